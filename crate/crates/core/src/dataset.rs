//! Dataset directory layout and file formats.
//!
//! One directory per scene holding `meta.json` plus raw little-endian f32
//! payloads whose shapes are declared in the meta file. Every file format
//! carries a version string and readers reject mismatches.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraRig;
use crate::synthdata::{SceneParams, SceneSpec, Splits};
use crate::tensor::Tensor;
use crate::trackcodec::{DepthScale, TrackSet};

pub const DATA_FORMAT_VERSION: &str = "SMV4D-DATA-1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("format version mismatch at {path}: found '{found}', expected '{expected}'")]
    Version { path: PathBuf, found: String, expected: String },
    #[error("payload {path} holds {found} floats but meta declares shape {shape:?}")]
    PayloadShape { path: PathBuf, found: usize, shape: Vec<usize> },
    #[error("dataset at {0} is missing {1}")]
    Missing(PathBuf, String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub format_version: String,
    pub spec: SceneSpec,
    pub cameras: CameraRig,
    pub prompt_ids: Vec<u16>,
    pub scale: DepthScale,
    pub video_shape: Vec<usize>,
    pub tracks_shape: Vec<usize>,
    pub workspace_center: [f64; 3],
    pub workspace_half: f64,
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// Scene payload as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredScene {
    pub meta: SceneMeta,
    pub videos: Tensor<f32>,
    pub tracks: TrackSet,
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn write_scene(
    root: &Path,
    id: &str,
    sample: &crate::synthdata::Sample,
    params: &SceneParams,
) -> Result<(), DataError> {
    let dir = scene_dir(root, id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let meta = SceneMeta {
        format_version: DATA_FORMAT_VERSION.to_string(),
        spec: sample.spec,
        cameras: sample.rig.clone(),
        prompt_ids: sample.prompt.clone(),
        scale: sample.scale.clone(),
        video_shape: sample.videos.shape().to_vec(),
        tracks_shape: sample.tracks.data().shape().to_vec(),
        workspace_center: params.workspace_center,
        workspace_half: params.workspace_half,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_f32(&dir.join("video.f32"), sample.videos.data())?;
    let tracks_f32: Vec<f32> = sample.tracks.data().data().iter().map(|&x| x as f32).collect();
    write_f32(&dir.join("tracks.f32"), &tracks_f32)?;
    Ok(())
}

pub fn read_scene(root: &Path, id: &str) -> Result<StoredScene, DataError> {
    let dir = scene_dir(root, id);
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(DataError::Missing(root.to_path_buf(), format!("scenes/{id}/meta.json")));
    }
    let meta: SceneMeta = read_json(&meta_path)?;
    if meta.format_version != DATA_FORMAT_VERSION {
        return Err(DataError::Version {
            path: meta_path,
            found: meta.format_version,
            expected: DATA_FORMAT_VERSION.to_string(),
        });
    }
    let video_path = dir.join("video.f32");
    let video_data = read_f32(&video_path)?;
    let expected: usize = meta.video_shape.iter().product();
    if video_data.len() != expected {
        return Err(DataError::PayloadShape {
            path: video_path,
            found: video_data.len(),
            shape: meta.video_shape.clone(),
        });
    }
    let tracks_path = dir.join("tracks.f32");
    let tracks_data = read_f32(&tracks_path)?;
    let expected: usize = meta.tracks_shape.iter().product();
    if tracks_data.len() != expected {
        return Err(DataError::PayloadShape {
            path: tracks_path,
            found: tracks_data.len(),
            shape: meta.tracks_shape.clone(),
        });
    }
    let videos = Tensor::from_vec(&meta.video_shape, video_data);
    let tracks = TrackSet::new(Tensor::from_vec(
        &meta.tracks_shape,
        tracks_data.iter().map(|&x| x as f64).collect(),
    ))
    .expect("stored tracks are valid");
    Ok(StoredScene { meta, videos, tracks })
}

pub fn write_splits(root: &Path, splits: &Splits) -> Result<(), DataError> {
    write_json(&root.join("splits.json"), splits)
}

pub fn read_splits(root: &Path) -> Result<Splits, DataError> {
    let path = root.join("splits.json");
    if !path.exists() {
        return Err(DataError::Missing(root.to_path_buf(), "splits.json".into()));
    }
    read_json(&path)
}

/// 8-bit PNG export of one frame, `value = round(255 * c)`.
pub fn write_png_frame(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<(), DataError> {
    assert_eq!(frame.len(), height * width * 3);
    let bytes: Vec<u8> = frame
        .iter()
        .map(|&c| (255.0 * c.clamp(0.0, 1.0)).round() as u8)
        .collect();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?;
    Ok(())
}

/// Export every view/frame of a `[V,N,H,W,3]` tensor as PNG files.
pub fn export_video_pngs(dir: &Path, stem: &str, video: &Tensor<f32>) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let shape = video.shape();
    let (v_count, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let frame_len = h * w * 3;
    for view in 0..v_count {
        for frame in 0..n {
            let off = (view * n + frame) * frame_len;
            let path = dir.join(format!("{stem}_v{view}_f{frame:03}.png"));
            write_png_frame(&path, &video.data()[off..off + frame_len], h, w)?;
        }
    }
    Ok(())
}

/// Append one JSON record plus newline to a log file.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), DataError> {
    let mut line = serde_json::to_string(record)
        .map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    line.push('\n');
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))
}
