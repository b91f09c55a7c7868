//! Motion and consistency metrics.
//!
//! RPE and PI normalize by the diagonal of the ground truth's sequence-wide
//! bounding box, which makes the 0.25 inlier threshold scene-scale-free.
//! Smoothness is the mean second temporal difference (lower is better).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraRig, Vec3};
use crate::pointset::{chamfer_frames, PointSetError};
use crate::tensor::Tensor;
use crate::trackcodec::TrackSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground-truth bounding box is degenerate")]
    DegenerateGt,
    #[error("smoothness needs at least three frames")]
    TooFewFrames,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    PointSet(#[from] PointSetError),
}

/// Motion evaluation report; fields that a variant cannot produce stay None.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub rpe: Option<f64>,
    pub pi: Option<f64>,
    pub chamfer: Option<f64>,
    pub smoothness: Option<f64>,
    pub rpe_mv: Option<f64>,
    pub pi_mv: Option<f64>,
    pub photometric: Option<f64>,
}

impl MotionReport {
    pub fn empty() -> Self {
        Self { rpe: None, pi: None, chamfer: None, smoothness: None, rpe_mv: None, pi_mv: None, photometric: None }
    }
}

/// Diameter of the sequence-wide ground-truth cloud: the maximum pairwise
/// distance. Rotation-invariant, unlike an axis-aligned box diagonal, which
/// keeps RPE/PI invariant under rigid motion applied jointly to pred and gt.
/// Above `DIAMETER_EXACT_LIMIT` points a deterministic stride subsample keeps
/// this quadratic scan bounded.
pub fn bbox_diagonal(tracks: &Tensor<f64>) -> f64 {
    const DIAMETER_EXACT_LIMIT: usize = 4096;
    let d = tracks.data();
    let count = d.len() / 3;
    let stride = count.div_ceil(DIAMETER_EXACT_LIMIT).max(1);
    let pts: Vec<[f64; 3]> = (0..count)
        .step_by(stride)
        .map(|i| [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]])
        .collect();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let sq = (pts[i][0] - pts[j][0]).powi(2)
                + (pts[i][1] - pts[j][1]).powi(2)
                + (pts[i][2] - pts[j][2]).powi(2);
            best = best.max(sq);
        }
    }
    best.sqrt()
}

fn check_tracks(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64, MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch(pred.shape().to_vec(), gt.shape().to_vec()));
    }
    let diag = bbox_diagonal(gt);
    if diag < 1e-6 {
        return Err(MetricError::DegenerateGt);
    }
    Ok(diag)
}

fn point_errors(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Vec<f64> {
    pred.data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect()
}

/// Relative point error: `100 * mean |pred - gt| / D`, with D the diagonal of
/// the ground truth's sequence-wide bounding box.
pub fn rpe(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64, MetricError> {
    let diag = check_tracks(pred, gt)?;
    let errs = point_errors(pred, gt);
    Ok(100.0 * errs.iter().sum::<f64>() / errs.len() as f64 / diag)
}

/// Percentage of inliers: fraction of points with `|pred - gt| / D <= threshold`
/// (inclusive boundary).
pub fn pi(pred: &Tensor<f64>, gt: &Tensor<f64>, threshold: f64) -> Result<f64, MetricError> {
    let diag = check_tracks(pred, gt)?;
    let errs = point_errors(pred, gt);
    let inliers = errs.iter().filter(|&&e| e / diag <= threshold).count();
    Ok(100.0 * inliers as f64 / errs.len() as f64)
}

pub const PI_THRESHOLD: f64 = 0.25;

/// Mean second temporal difference of `[N, K, 3]` tracks, meters.
pub fn smoothness(tracks: &Tensor<f64>) -> Result<f64, MetricError> {
    let shape = tracks.shape();
    let (n, k) = (shape[0], shape[1]);
    if n < 3 {
        return Err(MetricError::TooFewFrames);
    }
    let d = tracks.data();
    let at = |frame: usize, point: usize, axis: usize| d[(frame * k + point) * 3 + axis];
    let mut total = 0.0;
    for frame in 1..n - 1 {
        for point in 0..k {
            let mut sq = 0.0;
            for axis in 0..3 {
                let second = at(frame + 1, point, axis) - 2.0 * at(frame, point, axis) + at(frame - 1, point, axis);
                sq += second * second;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / ((n - 2) * k) as f64)
}

/// Per-frame Chamfer distance between predicted and ground-truth tracks.
pub fn chamfer_tracks(pred: &TrackSet, gt: &TrackSet) -> Result<f64, MetricError> {
    let frames_a: Vec<Vec<Vec3>> = (0..pred.frames()).map(|f| pred.frame_points(f)).collect();
    let frames_b: Vec<Vec<Vec3>> = (0..gt.frames()).map(|f| gt.frame_points(f)).collect();
    Ok(chamfer_frames(&frames_a, &frames_b)?)
}

/// Cross-view consistency: for every unordered view pair, RPE/PI between the
/// two views' world tracks, normalized by the true GT diagonal; averaged over
/// pairs. `per_view` is `[V, N, K, 3]`.
pub fn multiview_consistency(
    per_view: &Tensor<f64>,
    gt: &Tensor<f64>,
) -> Result<(f64, f64), MetricError> {
    let shape = per_view.shape();
    assert_eq!(shape.len(), 4, "expected [V,N,K,3]");
    let v = shape[0];
    assert!(v >= 2, "need at least two views");
    let diag = bbox_diagonal(gt);
    if diag < 1e-6 {
        return Err(MetricError::DegenerateGt);
    }
    let per_len = shape[1] * shape[2] * 3;
    let view_tracks = |i: usize| -> Tensor<f64> {
        Tensor::from_vec(
            &[shape[1], shape[2], 3],
            per_view.data()[i * per_len..(i + 1) * per_len].to_vec(),
        )
    };
    let mut rpe_sum = 0.0;
    let mut pi_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..v {
        let ta = view_tracks(a);
        for b in (a + 1)..v {
            let tb = view_tracks(b);
            let errs = point_errors(&ta, &tb);
            rpe_sum += 100.0 * errs.iter().sum::<f64>() / errs.len() as f64 / diag;
            let inl = errs.iter().filter(|&&e| e / diag <= PI_THRESHOLD).count();
            pi_sum += 100.0 * inl as f64 / errs.len() as f64;
            pairs += 1;
        }
    }
    Ok((rpe_sum / pairs as f64, pi_sum / pairs as f64))
}

/// Photometric cross-view agreement: project GT tracks into every view, and
/// for each point/frame compare the sampled RGB across view pairs. Returns the
/// percentage of pairs with RGB distance below `tau`. A desk-scale stand-in
/// for model-based multi-view video consistency scores. Frame 0 is excluded:
/// generation pipelines pin it to the reference input, so it carries no
/// information about generated consistency.
pub fn photometric_view_consistency(
    videos: &Tensor<f32>,
    gt_tracks: &TrackSet,
    rig: &CameraRig,
    tau: f64,
) -> f64 {
    let shape = videos.shape();
    let (v_count, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(v_count, rig.views());
    let mut agree = 0usize;
    let mut total = 0usize;
    for frame in 1..n.min(gt_tracks.frames()) {
        for k in 0..gt_tracks.points() {
            let world = gt_tracks.point(frame, k);
            // Sample RGB in every view where the point lands in-frame.
            let mut samples: Vec<[f32; 3]> = Vec::with_capacity(v_count);
            for (view, cam) in rig.cameras.iter().enumerate() {
                let Ok((u, vv, _)) = project(world, cam) else { continue };
                let (x, y) = (u.round(), vv.round());
                if x < 0.0 || y < 0.0 || x as usize >= w || y as usize >= h {
                    continue;
                }
                let off = videos.offset(&[view, frame, y as usize, x as usize, 0]);
                let d = videos.data();
                samples.push([d[off], d[off + 1], d[off + 2]]);
            }
            for a in 0..samples.len() {
                for b in (a + 1)..samples.len() {
                    let dist = (0..3)
                        .map(|c| (samples[a][c] as f64 - samples[b][c] as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    total += 1;
                    if dist < tau {
                        agree += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * agree as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random_tracks(n: usize, k: usize, rng: &mut Prng) -> Tensor<f64> {
        Tensor::from_fn(&[n, k, 3], |_| rng.range(-1.0, 1.0))
    }

    /// Brute-force re-derivations, independent of the production code path.
    fn rpe_bruteforce(pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
        let g = gt.data();
        let count = g.len() / 3;
        let mut diag = 0.0f64;
        for i in 0..count {
            for j in 0..count {
                let mut sq = 0.0;
                for a in 0..3 {
                    sq += (g[i * 3 + a] - g[j * 3 + a]).powi(2);
                }
                diag = diag.max(sq.sqrt());
            }
        }
        let p = pred.data();
        let count = p.len() / 3;
        let mut sum = 0.0;
        for i in 0..count {
            let mut sq = 0.0;
            for a in 0..3 {
                sq += (p[i * 3 + a] - g[i * 3 + a]).powi(2);
            }
            sum += sq.sqrt() / diag;
        }
        100.0 * sum / count as f64
    }

    #[test]
    fn rpe_zero_for_exact_prediction() {
        let mut rng = Prng::new(1, "m");
        let gt = random_tracks(6, 10, &mut rng);
        assert_eq!(rpe(&gt, &gt).unwrap(), 0.0);
        assert_eq!(pi(&gt, &gt, PI_THRESHOLD).unwrap(), 100.0);
    }

    #[test]
    fn rpe_uniform_offset() {
        let mut rng = Prng::new(2, "m");
        let gt = random_tracks(5, 8, &mut rng);
        let diag = bbox_diagonal(&gt);
        let off = 0.1 * diag / 3f64.sqrt();
        let pred = gt.map(|x| x + off);
        let r = rpe(&pred, &gt).unwrap();
        assert!((r - 10.0).abs() < 1e-9, "rpe = {r}");
    }

    #[test]
    fn rpe_scales_linearly_in_residuals() {
        let mut rng = Prng::new(12, "m");
        let gt = random_tracks(4, 9, &mut rng);
        let noise: Vec<f64> = (0..gt.len()).map(|_| rng.normal() * 0.01).collect();
        let pred1 = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + noise[i]);
        let pred2 = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + 2.0 * noise[i]);
        let r1 = rpe(&pred1, &gt).unwrap();
        let r2 = rpe(&pred2, &gt).unwrap();
        assert!((r2 - 2.0 * r1).abs() < 1e-9);
    }

    #[test]
    fn rpe_pi_invariant_under_joint_rigid_motion() {
        use crate::geometry::{Mat3, RigidTransform};
        let mut rng = Prng::new(13, "m");
        let gt = random_tracks(5, 7, &mut rng);
        let pred = gt.map(|x| x + 0.03);
        let tf = RigidTransform::new(Mat3::rotation(Vec3::new(0.2, 1.0, -0.4), 0.9), Vec3::new(1.0, -2.0, 0.5));
        let apply = |t: &Tensor<f64>| -> Tensor<f64> {
            let mut out = t.clone();
            let data = out.data_mut();
            for p in data.chunks_exact_mut(3) {
                let v = tf.apply_point(Vec3::new(p[0], p[1], p[2]));
                p.copy_from_slice(&v.to_array());
            }
            out
        };
        let r0 = rpe(&pred, &gt).unwrap();
        let r1 = rpe(&apply(&pred), &apply(&gt)).unwrap();
        assert!((r0 - r1).abs() < 1e-9);
        let p0 = pi(&pred, &gt, PI_THRESHOLD).unwrap();
        let p1 = pi(&apply(&pred), &apply(&gt), PI_THRESHOLD).unwrap();
        assert!((p0 - p1).abs() < 1e-9);
    }

    #[test]
    fn pi_boundary_is_inclusive() {
        let gt = Tensor::from_vec(&[2, 2, 3], vec![0.0; 12]);
        // Degenerate GT rejected.
        assert_eq!(pi(&gt, &gt, 0.25), Err(MetricError::DegenerateGt));

        let gt = Tensor::from_vec(&[2, 1, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let diag = bbox_diagonal(&gt);
        assert_eq!(diag, 1.0);
        let pred = gt.map(|x| x); // copy
        let mut pred = pred;
        {
            let d = pred.data_mut();
            d[0] += 0.25 * diag; // exactly at threshold
        }
        assert_eq!(pi(&pred, &gt, 0.25).unwrap(), 100.0);
    }

    #[test]
    fn pi_half_outliers() {
        // 2 frames x 2 points: offset exactly half of them far out.
        let gt = Tensor::from_vec(
            &[2, 2, 3],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.2, 0.8, 0.4],
        );
        let diag = bbox_diagonal(&gt);
        let mut pred = gt.clone();
        {
            let d = pred.data_mut();
            d[0] += 0.5 * diag;
            d[6] += 0.5 * diag;
        }
        assert_eq!(pi(&pred, &gt, 0.25).unwrap(), 50.0);
    }

    #[test]
    fn pi_monotone_in_threshold() {
        let mut rng = Prng::new(3, "m");
        let gt = random_tracks(6, 12, &mut rng);
        let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + rng.normal() * 0.2);
        let mut last = 101.0;
        for thr in [0.5, 0.25, 0.1, 0.05, 0.01] {
            let p = pi(&pred, &gt, thr).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn rpe_matches_bruteforce_on_100_cases() {
        let mut rng = Prng::new(4, "m");
        for _ in 0..100 {
            let n = 3 + rng.below(5);
            let k = 2 + rng.below(10);
            let gt = random_tracks(n, k, &mut rng);
            let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + rng.normal() * 0.1);
            let fast = rpe(&pred, &gt).unwrap();
            let slow = rpe_bruteforce(&pred, &gt);
            assert!((fast - slow).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothness_zero_for_linear_and_static() {
        let k = 4;
        let linear = Tensor::from_fn(&[6, k, 3], |i| {
            let frame = i / (k * 3);
            frame as f64 * 0.1
        });
        assert!(smoothness(&linear).unwrap() < 1e-12);
        let static_tracks = Tensor::full(&[5, k, 3], 0.7);
        assert_eq!(smoothness(&static_tracks).unwrap(), 0.0);
        assert_eq!(smoothness(&Tensor::zeros(&[2, 1, 3])), Err(MetricError::TooFewFrames));
    }

    #[test]
    fn smoothness_matches_sinusoid_closed_form() {
        // x(t) = a sin(w t): second difference = -4 a sin^2(w/2) sin(w t + w),
        // so mean |second diff| = 4 a sin^2(w/2) * mean |sin|.
        let (a, w) = (0.3, 0.25);
        let n = 2000;
        let tracks = Tensor::from_fn(&[n, 1, 3], |i| {
            let frame = i / 3;
            if i % 3 == 0 {
                a * (w * frame as f64).sin()
            } else {
                0.0
            }
        });
        let got = smoothness(&tracks).unwrap();
        let amp = 4.0 * a * (w / 2.0).sin().powi(2);
        let expected = amp * std::f64::consts::FRAC_2_PI; // mean |sin|
        assert!((got - expected).abs() / expected < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn multiview_identical_views_are_perfectly_consistent() {
        let mut rng = Prng::new(5, "m");
        let gt = random_tracks(4, 6, &mut rng);
        let mut per_view = Tensor::zeros(&[3, 4, 6, 3]);
        for v in 0..3 {
            for i in 0..gt.len() {
                per_view.data_mut()[v * gt.len() + i] = gt.data()[i];
            }
        }
        let (r, p) = multiview_consistency(&per_view, &gt).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(p, 100.0);
    }

    #[test]
    fn multiview_single_offset_view_matches_hand_computation() {
        let mut rng = Prng::new(6, "m");
        let gt = random_tracks(4, 6, &mut rng);
        let diag = bbox_diagonal(&gt);
        let off = 0.1 * diag / 3f64.sqrt();
        let mut per_view = Tensor::zeros(&[3, 4, 6, 3]);
        for v in 0..3 {
            for i in 0..gt.len() {
                let delta = if v == 2 { off } else { 0.0 };
                per_view.data_mut()[v * gt.len() + i] = gt.data()[i] + delta;
            }
        }
        // Pairs: (0,1) = 0, (0,2) = 10, (1,2) = 10 -> mean 20/3.
        let (r, _) = multiview_consistency(&per_view, &gt).unwrap();
        assert!((r - 20.0 / 3.0).abs() < 1e-9, "r = {r}");

        // Invariance to view ordering.
        let mut permuted = Tensor::zeros(&[3, 4, 6, 3]);
        let order = [2usize, 0, 1];
        for (dst, &src) in order.iter().enumerate() {
            for i in 0..gt.len() {
                permuted.data_mut()[dst * gt.len() + i] = per_view.data()[src * gt.len() + i];
            }
        }
        let (r2, _) = multiview_consistency(&permuted, &gt).unwrap();
        assert!((r - r2).abs() < 1e-12);
    }

    #[test]
    fn photometric_consistency_tau_infinite_is_100() {
        use crate::synthdata::{generate_scene, ActionKind, ObjectKind, SceneParams, SceneSpec};
        let spec = SceneSpec { tool: ObjectKind::Box, target: ObjectKind::Sphere, action: ActionKind::Lift, seed: 2 };
        let params = SceneParams::default();
        let sample = generate_scene(&spec, &params).unwrap();
        let all = photometric_view_consistency(&sample.videos, &sample.tracks, &sample.rig, f64::INFINITY);
        assert_eq!(all, 100.0);
        let strict = photometric_view_consistency(&sample.videos, &sample.tracks, &sample.rig, 0.1);
        assert!(strict >= 90.0, "GT-rendered videos should agree: {strict}");
        // Negative control: one view replaced by noise.
        let mut noisy = sample.videos.clone();
        let mut rng = Prng::new(7, "noise");
        let frame_len: usize = sample.videos.shape()[1..].iter().product();
        for i in 0..frame_len {
            noisy.data_mut()[i] = rng.uniform() as f32;
        }
        let bad = photometric_view_consistency(&noisy, &sample.tracks, &sample.rig, 0.1);
        assert!(bad < 50.0, "noise view should break consistency: {bad}");
    }
}
