//! Prediction directory format: per-scene meta.json plus raw f32 payloads for
//! the generated videos, pseudo-videos, fused tracks, and per-view coarse
//! tracks. Written by `sample`, consumed by `eval`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use smv4d_core::dataset::{read_f32, read_json, write_f32, write_json, DataError};
use smv4d_core::tensor::Tensor;
use smv4d_core::trackcodec::{DepthScale, TrackSet};

use crate::evalproto::ScenePrediction;
use crate::pipeline::{Pipeline, SampleResult, SceneBatch};

pub const PRED_FORMAT_VERSION: &str = "SMV4D-PRED-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredMeta {
    pub format_version: String,
    pub scene_id: String,
    pub video_shape: Vec<usize>,
    pub pseudo_shape: Vec<usize>,
    pub coarse_shape: Vec<usize>,
    pub fused_shape: Option<Vec<usize>>,
    pub per_view_fused_shape: Option<Vec<usize>>,
    pub scale: DepthScale,
}

fn tensor_to_f32(t: &Tensor<f64>) -> Vec<f32> {
    t.data().iter().map(|&x| x as f32).collect()
}

pub fn write_prediction(
    dir: &Path,
    scene_id: &str,
    pred: &ScenePrediction,
    pseudo: Option<&Tensor<f32>>,
    scale: &DepthScale,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let fused_shape = pred.fused.as_ref().map(|t| t.data().shape().to_vec());
    let per_view_fused_shape = pred.per_view_fused.as_ref().map(|sets| {
        let base = sets[0].data().shape();
        vec![sets.len(), base[0], base[1], base[2]]
    });
    let meta = PredMeta {
        format_version: PRED_FORMAT_VERSION.to_string(),
        scene_id: scene_id.to_string(),
        video_shape: pred.videos.shape().to_vec(),
        pseudo_shape: pseudo.map(|p| p.shape().to_vec()).unwrap_or_default(),
        coarse_shape: pred.coarse.shape().to_vec(),
        fused_shape,
        per_view_fused_shape,
        scale: scale.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_f32(&dir.join("videos.f32"), pred.videos.data())?;
    if let Some(p) = pseudo {
        write_f32(&dir.join("pseudo.f32"), p.data())?;
    }
    write_f32(&dir.join("coarse.f32"), &tensor_to_f32(&pred.coarse))?;
    if let Some(fused) = &pred.fused {
        write_f32(&dir.join("tracks.f32"), &tensor_to_f32(fused.data()))?;
    }
    if let Some(sets) = &pred.per_view_fused {
        let mut all = Vec::new();
        for set in sets {
            all.extend(tensor_to_f32(set.data()));
        }
        write_f32(&dir.join("tracks_per_view.f32"), &all)?;
    }
    Ok(())
}

pub fn read_prediction(dir: &Path) -> Result<(PredMeta, ScenePrediction), DataError> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(DataError::Missing(dir.to_path_buf(), "meta.json".into()));
    }
    let meta: PredMeta = read_json(&meta_path)?;
    if meta.format_version != PRED_FORMAT_VERSION {
        return Err(DataError::Version {
            path: meta_path,
            found: meta.format_version,
            expected: PRED_FORMAT_VERSION.to_string(),
        });
    }
    let videos = Tensor::from_vec(&meta.video_shape, read_f32(&dir.join("videos.f32"))?);
    let coarse_f32 = read_f32(&dir.join("coarse.f32"))?;
    let coarse = Tensor::from_vec(
        &meta.coarse_shape,
        coarse_f32.iter().map(|&x| x as f64).collect(),
    );
    let fused = match &meta.fused_shape {
        Some(shape) => {
            let data = read_f32(&dir.join("tracks.f32"))?;
            Some(
                TrackSet::new(Tensor::from_vec(shape, data.iter().map(|&x| x as f64).collect()))
                    .expect("stored tracks are valid"),
            )
        }
        None => None,
    };
    let per_view_fused = match &meta.per_view_fused_shape {
        Some(shape) => {
            let data = read_f32(&dir.join("tracks_per_view.f32"))?;
            let per = shape[1] * shape[2] * shape[3];
            Some(
                (0..shape[0])
                    .map(|v| {
                        TrackSet::new(Tensor::from_vec(
                            &shape[1..],
                            data[v * per..(v + 1) * per].iter().map(|&x| x as f64).collect(),
                        ))
                        .expect("stored tracks are valid")
                    })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    Ok((meta, ScenePrediction { videos, coarse, fused, per_view_fused }))
}

/// Track-overlay plots: generated frames with decoded track positions marked.
pub fn export_track_plots(
    dir: &Path,
    pipeline: &Pipeline,
    result: &SampleResult,
    batch: &SceneBatch,
) -> Result<(), DataError> {
    use smv4d_core::geometry::project;
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let (h, w) = (pipeline.cfg.data.height, pipeline.cfg.data.width);
    let n = pipeline.cfg.data.frames;
    let mut canvas = result.videos.clone();
    for (view, dv) in result.coarse.views.iter().enumerate() {
        let cam = &batch.rig.cameras[view];
        for frame in 0..n {
            for k in 0..dv.points() {
                if !dv.is_valid(frame, k) {
                    continue;
                }
                let Ok((u, v, _)) = project(dv.point(frame, k), cam) else { continue };
                let (x, y) = (u.round() as i64, v.round() as i64);
                for (dx, dy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (px, py) = (x + dx, y + dy);
                    if px < 0 || py < 0 || px as usize >= w || py as usize >= h {
                        continue;
                    }
                    let off = canvas.offset(&[view, frame, py as usize, px as usize, 0]);
                    let data = canvas.data_mut();
                    data[off] = 1.0;
                    data[off + 1] = 1.0;
                    data[off + 2] = 1.0;
                }
            }
        }
    }
    smv4d_core::dataset::export_video_pngs(dir, "overlay", &canvas)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredIndex {
    pub format_version: String,
    pub scene_ids: Vec<String>,
}

pub fn write_pred_index(root: &Path, scene_ids: &[String]) -> Result<(), DataError> {
    write_json(
        &root.join("predictions.json"),
        &PredIndex { format_version: PRED_FORMAT_VERSION.to_string(), scene_ids: scene_ids.to_vec() },
    )
}

pub fn read_pred_index(root: &Path) -> Result<Vec<String>, DataError> {
    let path = root.join("predictions.json");
    if !path.exists() {
        return Err(DataError::Missing(root.to_path_buf(), "predictions.json".into()));
    }
    let index: PredIndex = read_json(&path)?;
    Ok(index.scene_ids)
}

pub fn prediction_dir(root: &Path, scene_id: &str) -> PathBuf {
    root.join(scene_id)
}
