//! Bidirectional codec between metric 4D point tracks and motion pseudo-videos.
//!
//! Encoding: project tracks into each view, normalize (anchor pixel over
//! resolution, depth min-max per view), splat a disc per point colored by its
//! normalized channels. Decoding detects splats, reads their colors back, and
//! unprojects through the per-view depth scale. Values stay floats in [0, 1];
//! the 255 scaling applies only to PNG export.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, unproject, CameraRig, GeometryError, Vec3, MIN_CAMERA_DEPTH};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("anchor point {point} is behind the camera in view {view} at frame 0")]
    AnchorBehindCamera { view: usize, point: usize },
    #[error("anchors {a} and {b} collide in view {view} (separation < 2*radius+1)")]
    AnchorCollision { view: usize, a: usize, b: usize },
    #[error("no splat components found in frame 0 of view {view}")]
    NoAnchorsFound { view: usize },
    #[error("track set invalid: {0}")]
    InvalidTracks(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Widening applied to a degenerate per-view depth range.
pub const EPS_SCALE: f64 = 1e-4;

/// Motion representation switch: per-frame depth in the third channel, or the
/// frame-0 depth frozen over time (the "tracking video" ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    PointTracks,
    TrackingVideo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    pub splat_radius: u32,
    pub tau_bg: f64,
    pub tau_color: f64,
    pub search_radius: f64,
    pub representation: Representation,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            splat_radius: 2,
            tau_bg: 0.02,
            tau_color: 0.02,
            search_radius: 12.0,
            representation: Representation::PointTracks,
        }
    }
}

/// Ground-truth world-space tracks: `[N, K, 3]` meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    world: Tensor<f64>,
}

impl TrackSet {
    pub fn new(world: Tensor<f64>) -> Result<Self, CodecError> {
        let shape = world.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(CodecError::InvalidTracks(format!("expected [N,K,3], got {shape:?}")));
        }
        if shape[0] < 2 {
            return Err(CodecError::InvalidTracks("need at least two frames".into()));
        }
        if shape[1] < 1 {
            return Err(CodecError::InvalidTracks("need at least one point".into()));
        }
        if !world.all_finite() {
            return Err(CodecError::InvalidTracks("non-finite coordinates".into()));
        }
        Ok(Self { world })
    }

    pub fn from_points(frames: &[Vec<Vec3>]) -> Result<Self, CodecError> {
        let n = frames.len();
        let k = frames.first().map(|f| f.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * k * 3);
        for frame in frames {
            assert_eq!(frame.len(), k, "ragged frames");
            for p in frame {
                data.extend_from_slice(&p.to_array());
            }
        }
        Self::new(Tensor::from_vec(&[n, k, 3], data))
    }

    pub fn frames(&self) -> usize {
        self.world.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.world.shape()[1]
    }

    pub fn point(&self, frame: usize, k: usize) -> Vec3 {
        let base = self.world.offset(&[frame, k, 0]);
        let d = self.world.data();
        Vec3::new(d[base], d[base + 1], d[base + 2])
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.world
    }

    pub fn frame_points(&self, frame: usize) -> Vec<Vec3> {
        (0..self.points()).map(|k| self.point(frame, k)).collect()
    }
}

/// Per-view projections of a track set.
#[derive(Debug, Clone, PartialEq)]
pub struct PerViewTracks {
    /// `[V, K, 2]` frame-0 pixel coordinates.
    pub anchor_uv: Tensor<f64>,
    /// `[V, N, K, 2]` per-frame projected positions.
    pub uv: Tensor<f64>,
    /// `[V, N, K]` camera-space depth, meters.
    pub depth: Tensor<f64>,
    /// `[V, N, K]` projection validity (in front of the camera and in bounds).
    pub visible: Vec<bool>,
}

impl PerViewTracks {
    pub fn views(&self) -> usize {
        self.anchor_uv.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.uv.shape()[1]
    }

    pub fn points(&self) -> usize {
        self.anchor_uv.shape()[1]
    }

    pub fn is_visible(&self, view: usize, frame: usize, k: usize) -> bool {
        self.visible[(view * self.frames() + frame) * self.points() + k]
    }
}

/// Per-view (min, max) of metric depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScale {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DepthScale {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Self {
        assert_eq!(min.len(), max.len());
        let s = Self { min, max };
        s.assert_valid();
        s
    }

    pub fn views(&self) -> usize {
        self.min.len()
    }

    pub fn assert_valid(&self) {
        for v in 0..self.min.len() {
            assert!(
                self.max[v] > self.min[v],
                "depth scale must satisfy max > min (view {v})"
            );
        }
    }

    /// Min-max normalization of a metric depth, clamped to [0, 1].
    pub fn normalize(&self, view: usize, depth: f64) -> f64 {
        ((depth - self.min[view]) / (self.max[view] - self.min[view])).clamp(0.0, 1.0)
    }

    /// Inverse of [`DepthScale::normalize`] on the in-range segment.
    pub fn denormalize(&self, view: usize, c3: f64) -> f64 {
        self.min[view] + c3 * (self.max[view] - self.min[view])
    }

    /// Flat `[V, 2]` layout used for regression targets.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let v = self.views();
        Tensor::from_fn(&[v, 2], |i| if i % 2 == 0 { self.min[i / 2] } else { self.max[i / 2] })
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let v = t.shape()[0];
        Self::new(
            (0..v).map(|i| t.at(&[i, 0])).collect(),
            (0..v).map(|i| t.at(&[i, 1])).collect(),
        )
    }
}

/// Colored-splat rendering of the tracks: `[V, N, H, W, 3]` floats in [0, 1],
/// background exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoVideo {
    pub data: Tensor<f32>,
    pub splat_radius: u32,
}

impl PseudoVideo {
    pub fn views(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Project tracks into every view; derive anchors and the per-view depth scale.
///
/// Anchors are the frame-0 projections; every point must project in every view
/// at frame 0. The scale spans depth over all frames and points per view, and a
/// degenerate range is widened to `min + EPS_SCALE`.
pub fn derive_per_view(tracks: &TrackSet, rig: &CameraRig) -> Result<(PerViewTracks, DepthScale), CodecError> {
    let (v_count, n, k) = (rig.views(), tracks.frames(), tracks.points());
    let mut anchor = Tensor::<f64>::zeros(&[v_count, k, 2]);
    let mut uv = Tensor::<f64>::zeros(&[v_count, n, k, 2]);
    let mut depth = Tensor::<f64>::zeros(&[v_count, n, k]);
    let mut visible = vec![false; v_count * n * k];
    let mut smin = vec![f64::INFINITY; v_count];
    let mut smax = vec![f64::NEG_INFINITY; v_count];

    for (view, cam) in rig.cameras.iter().enumerate() {
        for frame in 0..n {
            for point in 0..k {
                let world = tracks.point(frame, point);
                match project(world, cam) {
                    Ok((u, vv, d)) => {
                        uv.set(&[view, frame, point, 0], u);
                        uv.set(&[view, frame, point, 1], vv);
                        depth.set(&[view, frame, point], d);
                        visible[(view * n + frame) * k + point] = cam.contains_pixel(u, vv);
                        smin[view] = smin[view].min(d);
                        smax[view] = smax[view].max(d);
                        if frame == 0 {
                            anchor.set(&[view, point, 0], u);
                            anchor.set(&[view, point, 1], vv);
                        }
                    }
                    Err(_) if frame == 0 => {
                        return Err(CodecError::AnchorBehindCamera { view, point });
                    }
                    Err(_) => {
                        depth.set(&[view, frame, point], f64::NAN);
                    }
                }
            }
        }
        if !smin[view].is_finite() || !smax[view].is_finite() {
            return Err(CodecError::InvalidTracks(format!("view {view} has no valid depths")));
        }
        if smax[view] - smin[view] < EPS_SCALE {
            smax[view] = smin[view] + EPS_SCALE;
        }
    }

    Ok((
        PerViewTracks { anchor_uv: anchor, uv, depth, visible },
        DepthScale::new(smin, smax),
    ))
}

/// Tolerant projection of arbitrary (possibly wild) tracks: points that fail
/// to project are simply invisible, and the anchor falls back to the image
/// center. Used for guidance rendering, which has no precondition to honor.
pub fn project_tracks_tolerant(tracks: &TrackSet, rig: &CameraRig) -> PerViewTracks {
    let (v_count, n, k) = (rig.views(), tracks.frames(), tracks.points());
    let mut anchor = Tensor::<f64>::zeros(&[v_count, k, 2]);
    let mut uv = Tensor::<f64>::zeros(&[v_count, n, k, 2]);
    let mut depth = Tensor::<f64>::zeros(&[v_count, n, k]);
    let mut visible = vec![false; v_count * n * k];
    for (view, cam) in rig.cameras.iter().enumerate() {
        for frame in 0..n {
            for point in 0..k {
                match project(tracks.point(frame, point), cam) {
                    Ok((u, vv, d)) => {
                        uv.set(&[view, frame, point, 0], u);
                        uv.set(&[view, frame, point, 1], vv);
                        depth.set(&[view, frame, point], d);
                        visible[(view * n + frame) * k + point] = cam.contains_pixel(u, vv);
                        if frame == 0 {
                            anchor.set(&[view, point, 0], u);
                            anchor.set(&[view, point, 1], vv);
                        }
                    }
                    Err(_) => {
                        depth.set(&[view, frame, point], f64::NAN);
                        if frame == 0 {
                            anchor.set(&[view, point, 0], cam.cx);
                            anchor.set(&[view, point, 1], cam.cy);
                        }
                    }
                }
            }
        }
    }
    PerViewTracks { anchor_uv: anchor, uv, depth, visible }
}

/// Rasterize without the anchor-separation precondition: overlaps resolve by
/// the nearest-depth rule as usual. Guidance rendering goes through here.
pub fn rasterize_unchecked(
    pv_tracks: &PerViewTracks,
    scale: &DepthScale,
    height: usize,
    width: usize,
    params: &CodecParams,
) -> PseudoVideo {
    rasterize_inner(pv_tracks, scale, height, width, params)
}

/// Normalized splat colors: anchor pixel over resolution, depth min-max scaled.
#[derive(Debug, Clone)]
pub struct NormalizedChannels {
    /// `[V, K]` anchor u / width.
    pub c1: Tensor<f64>,
    /// `[V, K]` anchor v / height.
    pub c2: Tensor<f64>,
    /// `[V, N, K]` normalized depth, clamped to [0, 1].
    pub c3: Tensor<f64>,
}

pub fn normalize(
    pv_tracks: &PerViewTracks,
    scale: &DepthScale,
    width: u32,
    height: u32,
    representation: Representation,
) -> NormalizedChannels {
    scale.assert_valid();
    let (v_count, n, k) = (pv_tracks.views(), pv_tracks.frames(), pv_tracks.points());
    let mut c1 = Tensor::<f64>::zeros(&[v_count, k]);
    let mut c2 = Tensor::<f64>::zeros(&[v_count, k]);
    let mut c3 = Tensor::<f64>::zeros(&[v_count, n, k]);
    for view in 0..v_count {
        for point in 0..k {
            c1.set(&[view, point], (pv_tracks.anchor_uv.at(&[view, point, 0]) / width as f64).clamp(0.0, 1.0));
            c2.set(&[view, point], (pv_tracks.anchor_uv.at(&[view, point, 1]) / height as f64).clamp(0.0, 1.0));
            for frame in 0..n {
                let source_frame = match representation {
                    Representation::PointTracks => frame,
                    Representation::TrackingVideo => 0,
                };
                let d = pv_tracks.depth.at(&[view, source_frame, point]);
                let value = if d.is_finite() { scale.normalize(view, d) } else { 0.0 };
                c3.set(&[view, frame, point], value);
            }
        }
    }
    NormalizedChannels { c1, c2, c3 }
}

/// Render the tracks as colored discs with nearest-depth occlusion.
///
/// Frame n draws each visible point at its current position, colored by
/// `(c1, c2, c3[n])`. Overlaps resolve to the smaller metric depth; equal
/// depths resolve to the lower point index. Requires frame-0 anchors in every
/// view to be pairwise separated by at least `2*radius + 1` pixels.
pub fn rasterize(
    pv_tracks: &PerViewTracks,
    scale: &DepthScale,
    height: usize,
    width: usize,
    params: &CodecParams,
) -> Result<PseudoVideo, CodecError> {
    let (v_count, k) = (pv_tracks.views(), pv_tracks.points());
    let radius = params.splat_radius as f64;
    let min_sep = 2.0 * radius + 1.0;
    for view in 0..v_count {
        for a in 0..k {
            for b in (a + 1)..k {
                let du = pv_tracks.anchor_uv.at(&[view, a, 0]) - pv_tracks.anchor_uv.at(&[view, b, 0]);
                let dv = pv_tracks.anchor_uv.at(&[view, a, 1]) - pv_tracks.anchor_uv.at(&[view, b, 1]);
                if (du * du + dv * dv).sqrt() < min_sep {
                    return Err(CodecError::AnchorCollision { view, a, b });
                }
            }
        }
    }
    Ok(rasterize_inner(pv_tracks, scale, height, width, params))
}

fn rasterize_inner(
    pv_tracks: &PerViewTracks,
    scale: &DepthScale,
    height: usize,
    width: usize,
    params: &CodecParams,
) -> PseudoVideo {
    let (v_count, n, k) = (pv_tracks.views(), pv_tracks.frames(), pv_tracks.points());
    let radius = params.splat_radius as f64;
    let channels = normalize(pv_tracks, scale, width as u32, height as u32, params.representation);
    let mut data = vec![0.0f32; v_count * n * height * width * 3];
    for view in 0..v_count {
        for frame in 0..n {
            let mut zbuf = vec![f64::INFINITY; height * width];
            let img_base = (view * n + frame) * height * width * 3;
            for point in 0..k {
                if !pv_tracks.is_visible(view, frame, point) {
                    continue;
                }
                let u = pv_tracks.uv.at(&[view, frame, point, 0]);
                let v = pv_tracks.uv.at(&[view, frame, point, 1]);
                let d = pv_tracks.depth.at(&[view, frame, point]);
                let color = [
                    channels.c1.at(&[view, point]) as f32,
                    channels.c2.at(&[view, point]) as f32,
                    channels.c3.at(&[view, frame, point]) as f32,
                ];
                let x_lo = (u - radius).ceil().max(0.0) as usize;
                let x_hi = (u + radius).floor().min(width as f64 - 1.0);
                let y_lo = (v - radius).ceil().max(0.0) as usize;
                let y_hi = (v + radius).floor().min(height as f64 - 1.0);
                if x_hi < 0.0 || y_hi < 0.0 {
                    continue;
                }
                for y in y_lo..=(y_hi as usize) {
                    for x in x_lo..=(x_hi as usize) {
                        let dx = x as f64 - u;
                        let dy = y as f64 - v;
                        if dx * dx + dy * dy > radius * radius {
                            continue;
                        }
                        let pix = y * width + x;
                        if d < zbuf[pix] {
                            zbuf[pix] = d;
                            let off = img_base + pix * 3;
                            data[off] = color[0];
                            data[off + 1] = color[1];
                            data[off + 2] = color[2];
                        }
                    }
                }
            }
        }
    }

    PseudoVideo {
        data: Tensor::from_vec(&[v_count, n, height, width, 3], data),
        splat_radius: params.splat_radius,
    }
}

/// One decoded view: anchors, world-space track estimates, validity flags,
/// and the raw pixel statistics (position and normalized depth) each world
/// point was derived from.
#[derive(Debug, Clone)]
pub struct DecodedView {
    /// Anchor pixel positions used as track keys, length K.
    pub anchors: Vec<[f64; 2]>,
    /// Frame-major world points, length `N * K`.
    pub world: Vec<Vec3>,
    /// False where the track was lost and the previous position repeated.
    pub valid: Vec<bool>,
    /// Frame-major pixel positions backing each world point.
    pub uv: Vec<[f64; 2]>,
    /// Frame-major normalized depth read from the splat colors.
    pub c3: Vec<f64>,
    pub frames: usize,
}

impl DecodedView {
    pub fn points(&self) -> usize {
        self.anchors.len()
    }

    pub fn point(&self, frame: usize, k: usize) -> Vec3 {
        self.world[frame * self.points() + k]
    }

    pub fn is_valid(&self, frame: usize, k: usize) -> bool {
        self.valid[frame * self.points() + k]
    }
}

#[derive(Debug, Clone)]
pub struct DecodedTracks {
    pub views: Vec<DecodedView>,
}

impl DecodedTracks {
    /// `[V, N, K, 3]` tensor form; only meaningful when every view decoded the
    /// same number of tracks (always true with anchor hints).
    pub fn to_tensor(&self) -> Tensor<f64> {
        let v = self.views.len();
        let n = self.views[0].frames;
        let k = self.views[0].points();
        let mut out = Tensor::zeros(&[v, n, k, 3]);
        for (vi, view) in self.views.iter().enumerate() {
            assert_eq!(view.points(), k, "ragged decoded views");
            for frame in 0..n {
                for point in 0..k {
                    let p = view.point(frame, point);
                    out.set(&[vi, frame, point, 0], p.x);
                    out.set(&[vi, frame, point, 1], p.y);
                    out.set(&[vi, frame, point, 2], p.z);
                }
            }
        }
        out
    }
}

struct SplatKey {
    c1: f64,
    c2: f64,
    u0: f64,
    v0: f64,
}

fn detect_components(
    pv: &PseudoVideo,
    view: usize,
    tau_bg: f64,
) -> Vec<SplatKey> {
    let (h, w) = (pv.height(), pv.width());
    let frame_off = |y: usize, x: usize| -> usize {
        pv.data.offset(&[view, 0, y, x, 0])
    };
    let lit = |y: usize, x: usize| -> bool {
        let off = frame_off(y, x);
        let d = pv.data.data();
        d[off].max(d[off + 1]).max(d[off + 2]) as f64 > tau_bg
    };
    let mut seen = vec![false; h * w];
    let mut keys = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !lit(y, x) {
                continue;
            }
            // BFS over a 4-connected component.
            let mut queue = vec![(y, x)];
            seen[y * w + x] = true;
            let (mut sum_x, mut sum_y, mut sum_c1, mut sum_c2, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
            while let Some((cy, cx)) = queue.pop() {
                let off = frame_off(cy, cx);
                let d = pv.data.data();
                sum_x += cx as f64;
                sum_y += cy as f64;
                sum_c1 += d[off] as f64;
                sum_c2 += d[off + 1] as f64;
                count += 1;
                let mut push = |ny: usize, nx: usize| {
                    if !seen[ny * w + nx] && lit(ny, nx) {
                        seen[ny * w + nx] = true;
                        queue.push((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            let inv = 1.0 / count as f64;
            keys.push(SplatKey {
                c1: sum_c1 * inv,
                c2: sum_c2 * inv,
                u0: sum_x * inv,
                v0: sum_y * inv,
            });
        }
    }
    // Deterministic track indexing for blind detection: scan order by centroid.
    keys.sort_by(|a, b| {
        a.v0.partial_cmp(&b.v0)
            .unwrap()
            .then(a.u0.partial_cmp(&b.u0).unwrap())
    });
    keys
}

/// Decode a pseudo-video back to per-view coarse world tracks.
///
/// With `anchors_hint` (the training/inference loops, where anchors are known)
/// track k keeps index k. Without hints, frame-0 splats are detected as
/// connected components above `tau_bg`. Each later frame collects pixels whose
/// (c1, c2) match the track key within `tau_color` inside a search window
/// around the previous position; their centroid gives the position and their
/// median third channel the normalized depth. Lost tracks repeat the previous
/// world point and are flagged invalid.
pub fn decode(
    pv: &PseudoVideo,
    scale: &DepthScale,
    rig: &CameraRig,
    anchors_hint: Option<&Tensor<f64>>,
    params: &CodecParams,
) -> Result<DecodedTracks, CodecError> {
    let (h, w) = (pv.height(), pv.width());
    let n = pv.frames();
    let mut views = Vec::with_capacity(pv.views());

    for view in 0..pv.views() {
        let cam = &rig.cameras[view];
        let keys: Vec<SplatKey> = match anchors_hint {
            Some(hint) => (0..hint.shape()[1])
                .map(|k| {
                    let u0 = hint.at(&[view, k, 0]);
                    let v0 = hint.at(&[view, k, 1]);
                    SplatKey { c1: u0 / w as f64, c2: v0 / h as f64, u0, v0 }
                })
                .collect(),
            None => {
                let found = detect_components(pv, view, params.tau_bg);
                if found.is_empty() {
                    return Err(CodecError::NoAnchorsFound { view });
                }
                found
            }
        };

        let k_count = keys.len();
        let mut world = vec![Vec3::ZERO; n * k_count];
        let mut valid = vec![false; n * k_count];
        let mut uv_out = vec![[0.0f64; 2]; n * k_count];
        let mut c3_out = vec![0.0f64; n * k_count];
        let mut prev_uv: Vec<[f64; 2]> = keys.iter().map(|key| [key.u0, key.v0]).collect();
        let data = pv.data.data();

        for frame in 0..n {
            for (k, key) in keys.iter().enumerate() {
                let [pu, pvv] = prev_uv[k];
                let x_lo = (pu - params.search_radius).floor().max(0.0) as usize;
                let x_hi = ((pu + params.search_radius).ceil() as usize).min(w - 1);
                let y_lo = (pvv - params.search_radius).floor().max(0.0) as usize;
                let y_hi = ((pvv + params.search_radius).ceil() as usize).min(h - 1);
                let (mut sum_x, mut sum_y, mut count) = (0.0, 0.0, 0usize);
                let mut c3s: Vec<f32> = Vec::new();
                for y in y_lo..=y_hi {
                    for x in x_lo..=x_hi {
                        let off = pv.data.offset(&[view, frame, y, x, 0]);
                        let (p1, p2, p3) = (data[off] as f64, data[off + 1] as f64, data[off + 2] as f64);
                        if p1.max(p2).max(p3) <= params.tau_bg {
                            continue;
                        }
                        if (p1 - key.c1).abs() > params.tau_color || (p2 - key.c2).abs() > params.tau_color {
                            continue;
                        }
                        sum_x += x as f64;
                        sum_y += y as f64;
                        count += 1;
                        c3s.push(data[off + 2]);
                    }
                }
                let idx = frame * k_count + k;
                if count == 0 {
                    // Lost track: repeat the previous frame's world point.
                    if frame == 0 {
                        let depth = scale.denormalize(view, 0.5).max(MIN_CAMERA_DEPTH);
                        world[idx] = unproject(key.u0, key.v0, depth, cam)?;
                        uv_out[idx] = [key.u0, key.v0];
                        c3_out[idx] = 0.5;
                    } else {
                        world[idx] = world[(frame - 1) * k_count + k];
                        uv_out[idx] = uv_out[(frame - 1) * k_count + k];
                        c3_out[idx] = c3_out[(frame - 1) * k_count + k];
                    }
                    valid[idx] = false;
                    continue;
                }
                let u = sum_x / count as f64;
                let v = sum_y / count as f64;
                c3s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let c3 = c3s[c3s.len() / 2] as f64;
                let depth = scale.denormalize(view, c3).max(MIN_CAMERA_DEPTH);
                world[idx] = unproject(u, v, depth, cam)?;
                valid[idx] = true;
                uv_out[idx] = [u, v];
                c3_out[idx] = c3;
                prev_uv[k] = [u, v];
            }
        }

        views.push(DecodedView {
            anchors: keys.iter().map(|k| [k.u0, k.v0]).collect(),
            world,
            valid,
            uv: uv_out,
            c3: c3_out,
            frames: n,
        });
    }

    Ok(DecodedTracks { views })
}
