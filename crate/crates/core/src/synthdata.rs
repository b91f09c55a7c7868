//! Procedural multi-view hand-object-interaction scenes with exact ground
//! truth: videos, 4D point tracks, cameras, prompts, and splits.
//!
//! Tracks and pixels come from the same surface samples (z-buffered point
//! splatting), so video/track consistency holds by construction. Everything is
//! deterministic in the scene seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraModel, CameraRig, Mat3, RigidTransform, Vec3};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::trackcodec::{derive_per_view, CodecError, DepthScale, TrackSet};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("anchor sampling failed after {0} attempts")]
    AnchorSamplingFailed(usize),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Cylinder,
    Sphere,
    Hammer,
    Spoon,
    Bowl,
}

pub const OBJECTS: [ObjectKind; 6] = [
    ObjectKind::Box,
    ObjectKind::Cylinder,
    ObjectKind::Sphere,
    ObjectKind::Hammer,
    ObjectKind::Spoon,
    ObjectKind::Bowl,
];

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Cylinder => "cylinder",
            ObjectKind::Sphere => "sphere",
            ObjectKind::Hammer => "hammer",
            ObjectKind::Spoon => "spoon",
            ObjectKind::Bowl => "bowl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Rotate,
    Stir,
    Tap,
    Slide,
    Lift,
    Measure,
}

pub const ACTIONS: [ActionKind; 6] = [
    ActionKind::Rotate,
    ActionKind::Stir,
    ActionKind::Tap,
    ActionKind::Slide,
    ActionKind::Lift,
    ActionKind::Measure,
];

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Rotate => "rotate",
            ActionKind::Stir => "stir",
            ActionKind::Tap => "tap",
            ActionKind::Slide => "slide",
            ActionKind::Lift => "lift",
            ActionKind::Measure => "measure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub tool: ObjectKind,
    pub target: ObjectKind,
    pub action: ActionKind,
    pub seed: u64,
}

/// Generation knobs; resolution and track count come from the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of tracked anchor points K.
    pub tracks: usize,
    /// Surface samples on the tool / pseudo-hand / target.
    pub tool_points: usize,
    pub hand_points: usize,
    pub target_points: usize,
    /// Splat radius the downstream codec will use; anchors are separated by
    /// 2*radius + 1 (+1 margin) pixels in every view.
    pub splat_radius: u32,
    pub workspace_center: [f64; 3],
    pub workspace_half: f64,
    /// Multiplier on the base object dimensions; larger objects give the
    /// anchor sampler more pixels to work with at low resolutions.
    pub object_scale: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            views: 3,
            frames: 5,
            height: 40,
            width: 40,
            tracks: 8,
            tool_points: 700,
            hand_points: 260,
            target_points: 400,
            splat_radius: 1,
            workspace_center: [0.0, 0.0, 0.0],
            workspace_half: 0.2,
            object_scale: 2.4,
        }
    }
}

impl SceneParams {
    pub fn center(&self) -> Vec3 {
        Vec3::from_array(self.workspace_center)
    }
}

/// One generated scene.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[V, N, H, W, 3]` in [0, 1].
    pub videos: Tensor<f32>,
    pub tracks: TrackSet,
    pub rig: CameraRig,
    /// Padded token ids.
    pub prompt: Vec<u16>,
    pub scale: DepthScale,
    pub spec: SceneSpec,
}

// ---------------------------------------------------------------------------
// Prompt vocabulary
// ---------------------------------------------------------------------------

pub const PAD_TOKEN: u16 = 0;

/// Closed vocabulary for the templated prompt "use <tool> to <action> <target>".
pub fn vocabulary() -> Vec<String> {
    let mut words = vec!["<pad>".to_string(), "use".to_string(), "to".to_string()];
    words.extend(OBJECTS.iter().map(|o| o.name().to_string()));
    words.extend(ACTIONS.iter().map(|a| a.name().to_string()));
    words
}

pub fn token_id(word: &str) -> Result<u16, SynthError> {
    vocabulary()
        .iter()
        .position(|w| w == word)
        .map(|i| i as u16)
        .ok_or_else(|| SynthError::UnknownToken(word.to_string()))
}

/// Templated token sequence, padded to `len`.
pub fn prompt_tokens(spec: &SceneSpec, len: usize) -> Result<Vec<u16>, SynthError> {
    let mut ids = vec![
        token_id("use")?,
        token_id(spec.tool.name())?,
        token_id("to")?,
        token_id(spec.action.name())?,
        token_id(spec.target.name())?,
    ];
    assert!(len >= ids.len(), "prompt length {len} too short");
    ids.resize(len, PAD_TOKEN);
    Ok(ids)
}

// ---------------------------------------------------------------------------
// Natural cubic spline (C^2) through uniform knots
// ---------------------------------------------------------------------------

/// Interpolate `knots` at `samples` uniform parameters over [0, knots-1].
pub fn cubic_spline(knots: &[f64], samples: usize) -> Vec<f64> {
    let n = knots.len();
    assert!(n >= 2);
    // Second derivatives from the natural spline tridiagonal system.
    let mut m = vec![0.0; n];
    if n > 2 {
        let mut diag = vec![4.0; n - 2];
        let mut rhs: Vec<f64> = (1..n - 1)
            .map(|i| 6.0 * (knots[i + 1] - 2.0 * knots[i] + knots[i - 1]))
            .collect();
        for i in 1..n - 2 {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (0..n - 2).rev() {
            let upper = if i + 1 < n - 2 { m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
    }
    (0..samples)
        .map(|s| {
            let x = if samples == 1 {
                0.0
            } else {
                (n - 1) as f64 * s as f64 / (samples - 1) as f64
            };
            let i = (x.floor() as usize).min(n - 2);
            let u = x - i as f64;
            let a = knots[i];
            let b = knots[i + 1] - knots[i] - (2.0 * m[i] + m[i + 1]) / 6.0;
            let c = m[i] / 2.0;
            let d = (m[i + 1] - m[i]) / 6.0;
            a + u * (b + u * (c + u * d))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Surface samplers
// ---------------------------------------------------------------------------

fn sample_box(half: Vec3, n: usize, rng: &mut Prng) -> Vec<Vec3> {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut pick = rng.uniform() * total;
            let mut face = 0;
            for (i, &a) in areas.iter().enumerate() {
                if pick < 2.0 * a {
                    face = i;
                    break;
                }
                pick -= 2.0 * a;
            }
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let (a, b) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            match face {
                0 => Vec3::new(sign * half.x, a * half.y, b * half.z),
                1 => Vec3::new(a * half.x, sign * half.y, b * half.z),
                _ => Vec3::new(a * half.x, b * half.y, sign * half.z),
            }
        })
        .collect()
}

fn sample_cylinder(radius: f64, half_h: f64, n: usize, rng: &mut Prng) -> Vec<Vec3> {
    let side = 2.0 * std::f64::consts::PI * radius * 2.0 * half_h;
    let caps = 2.0 * std::f64::consts::PI * radius * radius;
    (0..n)
        .map(|_| {
            let theta = rng.range(0.0, std::f64::consts::TAU);
            if rng.uniform() * (side + caps) < side {
                Vec3::new(radius * theta.cos(), radius * theta.sin(), rng.range(-half_h, half_h))
            } else {
                let r = radius * rng.uniform().sqrt();
                let z = if rng.uniform() < 0.5 { -half_h } else { half_h };
                Vec3::new(r * theta.cos(), r * theta.sin(), z)
            }
        })
        .collect()
}

fn sample_sphere(radius: f64, n: usize, rng: &mut Prng) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let z = rng.range(-1.0, 1.0);
            let theta = rng.range(0.0, std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            Vec3::new(r * theta.cos(), r * theta.sin(), z) * radius
        })
        .collect()
}

fn sample_ellipsoid(half: Vec3, n: usize, rng: &mut Prng) -> Vec<Vec3> {
    sample_sphere(1.0, n, rng)
        .into_iter()
        .map(|p| Vec3::new(p.x * half.x, p.y * half.y, p.z * half.z))
        .collect()
}

/// Object-local surface samples, sized for a desk-scale tool (~6-10 cm before
/// the configured scale multiplier).
fn sample_object(kind: ObjectKind, n: usize, scale: f64, rng: &mut Prng) -> Vec<Vec3> {
    let s = scale;
    let pts = match kind {
        ObjectKind::Box => sample_box(Vec3::new(0.035, 0.025, 0.02) * s, n, rng),
        ObjectKind::Cylinder => sample_cylinder(0.02 * s, 0.045 * s, n, rng),
        ObjectKind::Sphere => sample_sphere(0.032 * s, n, rng),
        ObjectKind::Hammer => {
            // Cylinder handle plus box head.
            let head = n / 3;
            let mut pts = sample_cylinder(0.012 * s, 0.045 * s, n - head, rng);
            pts.extend(
                sample_box(Vec3::new(0.03, 0.013, 0.013) * s, head, rng)
                    .into_iter()
                    .map(|p| p + Vec3::new(0.0, 0.0, 0.05 * s)),
            );
            pts
        }
        ObjectKind::Spoon => {
            // Ellipsoid bowl plus thin handle.
            let bowl = n / 2;
            let mut pts = sample_ellipsoid(Vec3::new(0.02, 0.014, 0.008) * s, bowl, rng);
            pts = pts.into_iter().map(|p| p + Vec3::new(0.0, 0.0, 0.045 * s)).collect();
            pts.extend(sample_cylinder(0.006 * s, 0.04 * s, n - bowl, rng));
            pts
        }
        ObjectKind::Bowl => {
            // Lower hemisphere shell.
            sample_sphere(0.04 * s, n, rng)
                .into_iter()
                .map(|p| Vec3::new(p.x, p.y, -p.z.abs() * 0.6))
                .collect()
        }
    };
    pts
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

fn look_at(eye: Vec3, center: Vec3, width: u32, height: u32, focal: f64, cx: f64, cy: f64) -> CameraModel {
    // Camera axes: x right, y down, z forward; world up is +z.
    let z_c = (center - eye).normalized();
    let up_world = Vec3::new(0.0, 0.0, 1.0);
    let lateral = z_c.cross(up_world);
    let x_c = if lateral.norm() < 1e-9 { Vec3::new(1.0, 0.0, 0.0) } else { lateral.normalized() };
    let y_c = z_c.cross(x_c);
    let rotation = Mat3::from_rows(x_c.to_array(), y_c.to_array(), z_c.to_array());
    let translation = -rotation.mul_vec(eye);
    CameraModel {
        fx: focal,
        fy: focal,
        cx,
        cy,
        rotation,
        translation,
        width,
        height,
    }
}

/// Cameras on an arc: azimuths spread around {-50, 0, +50} degrees with
/// jitter, elevation 20-40 degrees, about a meter from the workspace.
pub fn make_rig(params: &SceneParams, rng: &mut Prng) -> CameraRig {
    let center = params.center();
    let base: Vec<f64> = match params.views {
        1 => vec![0.0],
        v => (0..v).map(|i| -50.0 + 100.0 * i as f64 / (v - 1) as f64).collect(),
    };
    let cameras = base
        .iter()
        .map(|&az0| {
            let az = (az0 + rng.range(-10.0, 10.0)).to_radians();
            let el = rng.range(20.0_f64, 40.0).to_radians();
            let dist = rng.range(0.95, 1.15);
            let eye = center
                + Vec3::new(dist * el.cos() * az.sin(), -dist * el.cos() * az.cos(), dist * el.sin());
            let focal = 2.3 * params.width as f64;
            let cx = params.width as f64 / 2.0 + rng.range(-0.5, 0.5);
            let cy = params.height as f64 / 2.0 + rng.range(-0.5, 0.5);
            look_at(eye, center, params.width as u32, params.height as u32, focal, cx, cy)
        })
        .collect();
    let rig = CameraRig { cameras };
    rig.validate().expect("generated rig is valid");
    rig
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct Trajectory {
    /// Tool pose per frame (applied to object-local points).
    poses: Vec<RigidTransform>,
}

fn action_trajectory(action: ActionKind, params: &SceneParams, frames: usize, rng: &mut Prng) -> Trajectory {
    let center = params.center();
    let reach = params.workspace_half * 0.35;
    let knots = 4;
    let jitter = |rng: &mut Prng, s: f64| rng.range(-s, s);

    // Knot paths per action, in workspace coordinates around a start offset.
    let start = Vec3::new(jitter(rng, reach * 0.4), jitter(rng, reach * 0.4), reach * 0.6);
    let mut kx = Vec::with_capacity(knots);
    let mut ky = Vec::with_capacity(knots);
    let mut kz = Vec::with_capacity(knots);
    let mut kangle = Vec::with_capacity(knots);
    for i in 0..knots {
        let u = i as f64 / (knots - 1) as f64;
        let (p, angle) = match action {
            ActionKind::Rotate => (start + Vec3::new(0.0, 0.0, jitter(rng, 0.01)), u * rng.range(1.2, 2.2)),
            ActionKind::Stir => {
                let th = u * std::f64::consts::TAU * rng.range(0.6, 0.9);
                (
                    start + Vec3::new(reach * 0.5 * th.cos(), reach * 0.5 * th.sin(), 0.0),
                    th * 0.3,
                )
            }
            ActionKind::Tap => {
                let phase = (u * std::f64::consts::PI * 2.0).sin().abs();
                (start - Vec3::new(0.0, 0.0, phase * reach * 0.8), u * 0.2)
            }
            ActionKind::Slide => (start + Vec3::new((u - 0.5) * reach * 1.4, jitter(rng, 0.01), 0.0), u * 0.3),
            ActionKind::Lift => (start + Vec3::new(0.0, jitter(rng, 0.01), u * reach * 0.9), u * 0.4),
            ActionKind::Measure => (
                start + Vec3::new((u - 0.5) * reach, (u - 0.5) * reach * 0.8, (0.5 - u).abs() * reach * 0.5),
                u * 0.8,
            ),
        };
        kx.push(p.x);
        ky.push(p.y);
        kz.push(p.z);
        kangle.push(angle);
    }
    let xs = cubic_spline(&kx, frames);
    let ys = cubic_spline(&ky, frames);
    let zs = cubic_spline(&kz, frames);
    let angles = cubic_spline(&kangle, frames);
    let axis = Vec3::new(jitter(rng, 1.0), jitter(rng, 1.0), 1.0).normalized();

    let poses = (0..frames)
        .map(|f| {
            RigidTransform::new(
                Mat3::rotation(axis, angles[f]),
                center + Vec3::new(xs[f], ys[f], zs[f]),
            )
        })
        .collect();
    Trajectory { poses }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const TOOL_COLOR: [f32; 3] = [0.85, 0.25, 0.2];
const HAND_COLOR: [f32; 3] = [0.9, 0.7, 0.55];
const TARGET_COLOR: [f32; 3] = [0.2, 0.45, 0.85];
const BG_COLOR: [f32; 3] = [0.04, 0.04, 0.05];
const RENDER_RADIUS: f64 = 1.4;

struct RenderedFrame {
    zbuf: Vec<f64>,
}

/// World-z shading keeps colors view-independent.
fn shade(color: [f32; 3], z: f64, z_lo: f64, z_hi: f64) -> [f32; 3] {
    let t = ((z - z_lo) / (z_hi - z_lo)).clamp(0.0, 1.0) as f32;
    let b = 0.72 + 0.28 * t;
    [color[0] * b, color[1] * b, color[2] * b]
}

fn render_frame(
    points: &[Vec3],
    colors: &[[f32; 3]],
    cam: &CameraModel,
    z_range: (f64, f64),
    img: &mut [f32],
) -> RenderedFrame {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for pix in img.chunks_mut(3) {
        pix.copy_from_slice(&BG_COLOR);
    }
    for (idx, &p) in points.iter().enumerate() {
        let Ok((u, v, depth)) = project(p, cam) else { continue };
        let shaded = shade(colors[idx], p.z, z_range.0, z_range.1);
        let x_lo = (u - RENDER_RADIUS).ceil().max(0.0) as usize;
        let x_hi = (u + RENDER_RADIUS).floor().min(w as f64 - 1.0);
        let y_lo = (v - RENDER_RADIUS).ceil().max(0.0) as usize;
        let y_hi = (v + RENDER_RADIUS).floor().min(h as f64 - 1.0);
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        for y in y_lo..=(y_hi as usize) {
            for x in x_lo..=(x_hi as usize) {
                let dx = x as f64 - u;
                let dy = y as f64 - v;
                if dx * dx + dy * dy > RENDER_RADIUS * RENDER_RADIUS {
                    continue;
                }
                let pix = y * w + x;
                if depth < zbuf[pix] {
                    zbuf[pix] = depth;
                    img[pix * 3..pix * 3 + 3].copy_from_slice(&shaded);
                }
            }
        }
    }
    RenderedFrame { zbuf }
}

/// Surface-thickness tolerance for z-buffer visibility.
const VIS_DEPTH_TOL: f64 = 0.025;

fn point_visible(p: Vec3, cam: &CameraModel, frame: &RenderedFrame) -> bool {
    let Ok((u, v, depth)) = project(p, cam) else { return false };
    let (w, h) = (cam.width as usize, cam.height as usize);
    let (xi, yi) = (u.round(), v.round());
    if xi < 0.0 || yi < 0.0 || xi as usize >= w || yi as usize >= h {
        return false;
    }
    let pix = yi as usize * w + xi as usize;
    frame.zbuf[pix] >= depth - VIS_DEPTH_TOL
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

const MAX_ANCHOR_ATTEMPTS: usize = 24;

pub fn generate_scene(spec: &SceneSpec, params: &SceneParams) -> Result<Sample, SynthError> {
    for attempt in 0..MAX_ANCHOR_ATTEMPTS {
        let root = Prng::new(spec.seed, "scene").fork(&format!("attempt{attempt}"));
        match try_generate(spec, params, &root) {
            Ok(sample) => return Ok(sample),
            Err(SynthError::AnchorSamplingFailed(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::AnchorSamplingFailed(MAX_ANCHOR_ATTEMPTS))
}

fn try_generate(spec: &SceneSpec, params: &SceneParams, root: &Prng) -> Result<Sample, SynthError> {
    let (v_count, n_frames) = (params.views, params.frames);
    let rig = make_rig(params, &mut root.fork("rig"));
    let center = params.center();

    // Object-local surface samples.
    let tool_local = sample_object(spec.tool, params.tool_points, params.object_scale, &mut root.fork("tool"));
    let mut hand_rng = root.fork("hand");
    let hs = params.object_scale;
    let hand_local: Vec<Vec3> = sample_ellipsoid(Vec3::new(0.02, 0.028, 0.032) * hs, params.hand_points, &mut hand_rng)
        .into_iter()
        .map(|p| p + Vec3::new(0.0, 0.0, -0.05 * hs))
        .collect();
    let target_local = sample_object(spec.target, params.target_points, params.object_scale, &mut root.fork("target"));

    // Tool + attached pseudo-hand follow the action spline; the target sits low
    // in the workspace, static.
    let traj = action_trajectory(spec.action, params, n_frames, &mut root.fork("traj"));
    let mut tgt_rng = root.fork("target_pose");
    let target_offset = center
        + Vec3::new(
            tgt_rng.range(-0.3, 0.3) * params.workspace_half,
            tgt_rng.range(-0.3, 0.3) * params.workspace_half,
            -params.workspace_half * 0.7,
        );

    let moving_count = tool_local.len() + hand_local.len();
    let total_count = moving_count + target_local.len();
    let mut colors: Vec<[f32; 3]> = Vec::with_capacity(total_count);
    colors.extend(std::iter::repeat_n(TOOL_COLOR, tool_local.len()));
    colors.extend(std::iter::repeat_n(HAND_COLOR, hand_local.len()));
    colors.extend(std::iter::repeat_n(TARGET_COLOR, target_local.len()));

    // World positions per frame.
    let mut frames_world: Vec<Vec<Vec3>> = Vec::with_capacity(n_frames);
    for pose in &traj.poses {
        let mut pts = Vec::with_capacity(total_count);
        pts.extend(tool_local.iter().map(|&p| pose.apply_point(p)));
        pts.extend(hand_local.iter().map(|&p| pose.apply_point(p)));
        pts.extend(target_local.iter().map(|&p| p + target_offset));
        frames_world.push(pts);
    }

    // Render all views and frames.
    let z_range = (center.z - params.workspace_half, center.z + params.workspace_half);
    let (h, w) = (params.height, params.width);
    let mut video = vec![0.0f32; v_count * n_frames * h * w * 3];
    let mut rendered: Vec<Vec<RenderedFrame>> = Vec::with_capacity(v_count);
    for (view, cam) in rig.cameras.iter().enumerate() {
        let mut per_frame = Vec::with_capacity(n_frames);
        for (f, pts) in frames_world.iter().enumerate() {
            let base = (view * n_frames + f) * h * w * 3;
            per_frame.push(render_frame(pts, &colors, cam, z_range, &mut video[base..base + h * w * 3]));
        }
        rendered.push(per_frame);
    }

    // Anchor selection: moving surface points visible in every view at frame 0,
    // pairwise separated in every view.
    let min_sep = (2 * params.splat_radius + 1) as f64 + 0.01;
    let border = params.splat_radius as f64 + 1.0;
    let mut candidates: Vec<usize> = (0..moving_count)
        .filter(|&i| {
            rig.cameras.iter().enumerate().all(|(view, cam)| {
                let p = frames_world[0][i];
                if !point_visible(p, cam, &rendered[view][0]) {
                    return false;
                }
                let (u, v, _) = project(p, cam).expect("visible point projects");
                u >= border && u < w as f64 - border && v >= border && v < h as f64 - border
            })
        })
        .collect();
    root.fork("anchor_order").shuffle(&mut candidates);

    let mut chosen: Vec<usize> = Vec::with_capacity(params.tracks);
    let mut chosen_uv: Vec<Vec<(f64, f64)>> = vec![Vec::new(); v_count];
    'candidates: for &cand in &candidates {
        let uvs: Vec<(f64, f64)> = rig
            .cameras
            .iter()
            .map(|cam| {
                let (u, v, _) = project(frames_world[0][cand], cam).expect("candidate projects");
                (u, v)
            })
            .collect();
        for view in 0..v_count {
            for &(pu, pv) in &chosen_uv[view] {
                let (du, dv) = (uvs[view].0 - pu, uvs[view].1 - pv);
                if (du * du + dv * dv).sqrt() < min_sep {
                    continue 'candidates;
                }
            }
        }
        for view in 0..v_count {
            chosen_uv[view].push(uvs[view]);
        }
        chosen.push(cand);
        if chosen.len() == params.tracks {
            break;
        }
    }
    if chosen.len() < params.tracks {
        return Err(SynthError::AnchorSamplingFailed(1));
    }

    let track_frames: Vec<Vec<Vec3>> = frames_world
        .iter()
        .map(|pts| chosen.iter().map(|&i| pts[i]).collect())
        .collect();
    let tracks = TrackSet::from_points(&track_frames)?;
    let (_, scale) = derive_per_view(&tracks, &rig)?;

    Ok(Sample {
        videos: Tensor::from_vec(&[v_count, n_frames, h, w, 3], video),
        tracks,
        rig,
        prompt: Vec::new(), // filled by the caller, which knows the prompt length
        scale,
        spec: *spec,
    })
}

/// Codec-safe random scene: tracks stay pairwise separated and inside the
/// frame in every view and frame, so the pseudo-video round trip is exact.
/// Used by codec validation; shares the camera model with the full generator.
pub fn separated_scene(seed: u64, params: &SceneParams) -> (TrackSet, CameraRig) {
    'retry: for attempt in 0..200 {
        let root = Prng::new(seed, "sepscene").fork(&format!("a{attempt}"));
        let rig = make_rig(params, &mut root.fork("rig"));
        let mut rng = root.fork("pts");
        let center = params.center();
        let k = params.tracks;
        let motion_amp = 0.008;

        // Points live in a jittered x-z grid (a near-planar slab facing the
        // whole camera arc): all views then see correlated 2D layouts, so a
        // single grid spacing controls separation everywhere. The worst view
        // compresses x by about cos(50 deg).
        let side_x = ((k as f64).sqrt().ceil() as usize).max(2);
        let side_z = k.div_ceil(side_x);
        // World spacing sized so the most-compressed view (azimuth up to ~60
        // degrees, factor ~0.5) still separates splats with a motion margin.
        let focal = 2.3 * params.width as f64;
        let min_sep = (2 * params.splat_radius + 2) as f64;
        let motion_px = motion_amp * focal / 0.9;
        let spacing = (min_sep + 2.0 * motion_px + 1.0) * 1.15 / (focal * 0.5);
        assert!(
            spacing * (side_x.max(side_z) - 1) as f64 <= 2.0 * params.workspace_half,
            "separated_scene: {k} tracks at radius {} do not fit the workspace at {}x{}",
            params.splat_radius, params.width, params.height
        );
        let mut cells: Vec<(usize, usize)> = (0..side_x * side_z)
            .map(|i| (i % side_x, i / side_x))
            .collect();
        rng.shuffle(&mut cells);
        let worlds: Vec<Vec3> = cells[..k]
            .iter()
            .map(|&(ix, iz)| {
                center
                    + Vec3::new(
                        (ix as f64 - (side_x - 1) as f64 / 2.0) * spacing + rng.range(-0.12, 0.12) * spacing,
                        rng.range(-0.02, 0.02),
                        (iz as f64 - (side_z - 1) as f64 / 2.0) * spacing + rng.range(-0.12, 0.12) * spacing,
                    )
            })
            .collect();

        // Small C^2 motion per point.
        let n = params.frames;
        let mut frames: Vec<Vec<Vec3>> = vec![Vec::with_capacity(k); n];
        for &p0 in &worlds {
            let knots: Vec<Vec3> = (0..3)
                .map(|_| {
                    Vec3::new(
                        rng.range(-motion_amp, motion_amp),
                        rng.range(-motion_amp, motion_amp),
                        rng.range(-motion_amp, motion_amp),
                    )
                })
                .collect();
            let xs = cubic_spline(&knots.iter().map(|v| v.x).collect::<Vec<_>>(), n);
            let ys = cubic_spline(&knots.iter().map(|v| v.y).collect::<Vec<_>>(), n);
            let zs = cubic_spline(&knots.iter().map(|v| v.z).collect::<Vec<_>>(), n);
            for f in 0..n {
                frames[f].push(p0 + Vec3::new(xs[f], ys[f], zs[f]));
            }
        }

        // Verify separation and bounds in every view and frame: a one-pixel
        // empty gap between radius-r discs needs 2r + 2 pixels of separation.
        let min_sep = (2 * params.splat_radius + 2) as f64;
        let frame_border = params.splat_radius as f64 + 1.0;
        for cam in &rig.cameras {
            for frame in &frames {
                let mut uvs = Vec::with_capacity(k);
                for &p in frame {
                    let Ok((u, v, _)) = project(p, cam) else { continue 'retry };
                    if u < frame_border
                        || u >= params.width as f64 - frame_border
                        || v < frame_border
                        || v >= params.height as f64 - frame_border
                    {
                        continue 'retry;
                    }
                    uvs.push((u, v));
                }
                for i in 0..k {
                    for j in (i + 1)..k {
                        let (du, dv) = (uvs[i].0 - uvs[j].0, uvs[i].1 - uvs[j].1);
                        if (du * du + dv * dv).sqrt() < min_sep {
                            continue 'retry;
                        }
                    }
                }
            }
        }

        let tracks = TrackSet::from_points(&frames).expect("valid tracks");
        return (tracks, rig);
    }
    panic!("separated_scene: no valid configuration found for seed {seed}");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Deterministic scene specs for a dataset of `count` scenes.
pub fn dataset_specs(count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let mut rng = Prng::new(seed, &format!("spec{i}"));
            SceneSpec {
                tool: OBJECTS[rng.below(OBJECTS.len())],
                target: OBJECTS[rng.below(OBJECTS.len())],
                action: ACTIONS[rng.below(ACTIONS.len())],
                seed: seed.wrapping_mul(0x9E3779B9).wrapping_add(i as u64),
            }
        })
        .collect()
}

/// Hold out every scene that uses the hammer tool or the measure action; the
/// rest split train:val by seed hash at the given train ratio.
pub fn make_splits(specs: &[SceneSpec], train_ratio: f64) -> Splits {
    assert!(specs.len() >= 10, "need at least 10 scenes");
    let mut splits = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (i, spec) in specs.iter().enumerate() {
        let id = scene_id(i);
        if spec.tool == ObjectKind::Hammer || spec.action == ActionKind::Measure {
            splits.test.push(id);
        } else {
            let h = Prng::new(spec.seed, "split").uniform();
            if h < train_ratio {
                splits.train.push(id);
            } else {
                splits.val.push(id);
            }
        }
    }
    splits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> SceneParams {
        SceneParams::default()
    }

    #[test]
    fn spline_is_smooth_and_interpolating() {
        let knots = [0.0, 1.0, -0.5, 2.0];
        let out = cubic_spline(&knots, 31);
        assert!((out[0] - knots[0]).abs() < 1e-12);
        assert!((out[30] - knots[3]).abs() < 1e-12);
        assert!((out[10] - knots[1]).abs() < 1e-9);
        // Second differences stay bounded (no teleporting).
        for w in out.windows(3) {
            assert!((w[2] - 2.0 * w[1] + w[0]).abs() < 0.1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { tool: ObjectKind::Spoon, target: ObjectKind::Bowl, action: ActionKind::Stir, seed: 11 };
        let p = tiny_params();
        let a = generate_scene(&spec, &p).unwrap();
        let b = generate_scene(&spec, &p).unwrap();
        assert_eq!(a.videos, b.videos);
        assert_eq!(a.tracks.data(), b.tracks.data());
        assert_eq!(a.scale, b.scale);
    }

    #[test]
    fn sample_satisfies_anchor_separation() {
        let spec = SceneSpec { tool: ObjectKind::Box, target: ObjectKind::Sphere, action: ActionKind::Slide, seed: 3 };
        let p = tiny_params();
        let sample = generate_scene(&spec, &p).unwrap();
        let (pvt, _) = derive_per_view(&sample.tracks, &sample.rig).unwrap();
        let min_sep = (2 * p.splat_radius + 1) as f64;
        for view in 0..p.views {
            for a in 0..p.tracks {
                assert!(pvt.is_visible(view, 0, a));
                for b in (a + 1)..p.tracks {
                    let du = pvt.anchor_uv.at(&[view, a, 0]) - pvt.anchor_uv.at(&[view, b, 0]);
                    let dv = pvt.anchor_uv.at(&[view, a, 1]) - pvt.anchor_uv.at(&[view, b, 1]);
                    assert!((du * du + dv * dv).sqrt() >= min_sep);
                }
            }
        }
    }

    #[test]
    fn tracks_land_on_owning_object_colors() {
        let spec = SceneSpec { tool: ObjectKind::Cylinder, target: ObjectKind::Box, action: ActionKind::Rotate, seed: 5 };
        let p = tiny_params();
        let sample = generate_scene(&spec, &p).unwrap();
        let (pvt, _) = derive_per_view(&sample.tracks, &sample.rig).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for view in 0..p.views {
            for frame in 0..p.frames {
                for k in 0..p.tracks {
                    if !pvt.is_visible(view, frame, k) {
                        continue;
                    }
                    // Anchors come from the moving tool+hand; check the pixel is
                    // a shaded variant of one of those colors.
                    let u = pvt.uv.at(&[view, frame, k, 0]).round() as usize;
                    let v = pvt.uv.at(&[view, frame, k, 1]).round() as usize;
                    if u >= p.width || v >= p.height {
                        continue;
                    }
                    total += 1;
                    let off = sample.videos.offset(&[view, frame, v, u, 0]);
                    let d = sample.videos.data();
                    let px = [d[off], d[off + 1], d[off + 2]];
                    let matches = |c: [f32; 3]| {
                        // Shading scales all channels by the same factor in [0.72, 1].
                        let scale = if c[0] > 0.0 { px[0] / c[0] } else { 0.0 };
                        (0.6..=1.05).contains(&scale)
                            && (px[1] - c[1] * scale).abs() < 0.08
                            && (px[2] - c[2] * scale).abs() < 0.08
                    };
                    if matches(TOOL_COLOR) || matches(HAND_COLOR) {
                        hits += 1;
                    }
                }
            }
        }
        assert!(total > 0);
        let frac = hits as f64 / total as f64;
        assert!(frac >= 0.9, "GT consistency too low: {frac}");
    }

    #[test]
    fn videos_are_temporally_smooth() {
        for action in ACTIONS {
            let spec = SceneSpec { tool: ObjectKind::Sphere, target: ObjectKind::Bowl, action, seed: 17 };
            let p = tiny_params();
            let sample = generate_scene(&spec, &p).unwrap();
            let d = sample.videos.data();
            let frame_len = p.height * p.width * 3;
            let mut diff_sum = 0.0f64;
            let mut count = 0usize;
            for view in 0..p.views {
                for f in 1..p.frames {
                    let a = (view * p.frames + f - 1) * frame_len;
                    let b = (view * p.frames + f) * frame_len;
                    for i in 0..frame_len {
                        diff_sum += (d[b + i] - d[a + i]).abs() as f64;
                        count += 1;
                    }
                }
            }
            let mean = diff_sum / count as f64;
            assert!(mean < 0.15, "action {action:?}: mean frame diff {mean}");
        }
    }

    #[test]
    fn prompt_round_trip_and_structure() {
        let spec = SceneSpec { tool: ObjectKind::Hammer, target: ObjectKind::Box, action: ActionKind::Tap, seed: 1 };
        let ids = prompt_tokens(&spec, 8).unwrap();
        assert_eq!(ids.len(), 8);
        let vocab = vocabulary();
        let words: Vec<&str> = ids.iter().map(|&i| vocab[i as usize].as_str()).collect();
        assert_eq!(&words[..5], &["use", "hammer", "to", "tap", "box"]);
        assert!(words[5..].iter().all(|w| *w == "<pad>"));

        // Two specs differing only in action differ in exactly one content token.
        let spec2 = SceneSpec { action: ActionKind::Lift, ..spec };
        let ids2 = prompt_tokens(&spec2, 8).unwrap();
        let diff = ids.iter().zip(ids2.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn splits_respect_holdout_and_ratio() {
        let specs = dataset_specs(200, 9);
        let splits = make_splits(&specs, 0.9);
        let index = |id: &str| id[6..].parse::<usize>().unwrap();
        for id in splits.train.iter().chain(splits.val.iter()) {
            let s = &specs[index(id)];
            assert_ne!(s.tool, ObjectKind::Hammer);
            assert_ne!(s.action, ActionKind::Measure);
        }
        let non_test = splits.train.len() + splits.val.len();
        assert_eq!(non_test + splits.test.len(), 200);
        let ratio = splits.train.len() as f64 / non_test as f64;
        assert!((ratio - 0.9).abs() < 0.06, "ratio {ratio}");
        // Disjoint and covering.
        let mut all: Vec<&String> = splits.train.iter().chain(&splits.val).chain(&splits.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 200);
    }

    #[test]
    fn anchor_precondition_holds_over_many_seeds() {
        // Narrowed generator sweep; the wide one runs in the integration suite.
        let p = tiny_params();
        for seed in 0..25 {
            let spec = SceneSpec {
                tool: OBJECTS[(seed % 6) as usize],
                target: OBJECTS[((seed + 2) % 6) as usize],
                action: ACTIONS[((seed + 1) % 6) as usize],
                seed,
            };
            let sample = generate_scene(&spec, &p).unwrap();
            let (pvt, _) = derive_per_view(&sample.tracks, &sample.rig).unwrap();
            for view in 0..p.views {
                for k in 0..p.tracks {
                    assert!(pvt.is_visible(view, 0, k));
                    assert!(pvt.depth.at(&[view, 0, k]) > 0.0);
                }
            }
        }
    }
}
