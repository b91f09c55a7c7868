//! Track <-> pseudo-video codec validation: exact round trips on separated
//! scenes, occlusion rules, degenerate ranges, and noise robustness.

use smv4d_core::geometry::{project, CameraModel, CameraRig, Mat3, Vec3};
use smv4d_core::rng::Prng;
use smv4d_core::synthdata::{separated_scene, SceneParams};
use smv4d_core::tensor::Tensor;
use smv4d_core::trackcodec::*;

fn codec_scene_params() -> SceneParams {
    SceneParams {
        height: 64,
        width: 64,
        tracks: 9,
        splat_radius: 2,
        ..SceneParams::default()
    }
}

fn single_view_rig(w: u32, h: u32) -> CameraRig {
    CameraRig {
        cameras: vec![CameraModel {
            fx: 60.0,
            fy: 60.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            width: w,
            height: h,
        }],
    }
}

#[test]
fn derived_depths_match_projection() {
    let params = codec_scene_params();
    let (tracks, rig) = separated_scene(1, &params);
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    for (view, cam) in rig.cameras.iter().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for frame in 0..tracks.frames() {
            for k in 0..tracks.points() {
                let (u, v, d) = project(tracks.point(frame, k), cam).unwrap();
                assert_eq!(pvt.uv.at(&[view, frame, k, 0]), u);
                assert_eq!(pvt.uv.at(&[view, frame, k, 1]), v);
                assert_eq!(pvt.depth.at(&[view, frame, k]), d);
                lo = lo.min(d);
                hi = hi.max(d);
                if frame == 0 {
                    // Anchors are the frame-0 projections.
                    assert!((pvt.anchor_uv.at(&[view, k, 0]) - u).abs() < 1e-6);
                    assert!((pvt.anchor_uv.at(&[view, k, 1]) - v).abs() < 1e-6);
                }
            }
        }
        assert_eq!(scale.min[view], lo);
        assert_eq!(scale.max[view], hi);
    }
}

#[test]
fn degenerate_depth_range_is_widened() {
    // A single static point gives max == min; the scale widens to min + eps.
    let rig = single_view_rig(32, 32);
    let p = Vec3::new(0.0, 0.0, 1.0);
    let tracks = TrackSet::from_points(&[vec![p], vec![p], vec![p]]).unwrap();
    let (_, scale) = derive_per_view(&tracks, &rig).unwrap();
    assert_eq!(scale.min[0], 1.0);
    assert_eq!(scale.max[0], 1.0 + EPS_SCALE);
}

#[test]
fn anchor_behind_camera_is_reported() {
    let rig = single_view_rig(32, 32);
    let tracks = TrackSet::from_points(&[
        vec![Vec3::new(0.0, 0.0, -1.0)],
        vec![Vec3::new(0.0, 0.0, 1.0)],
    ])
    .unwrap();
    assert!(matches!(
        derive_per_view(&tracks, &rig),
        Err(CodecError::AnchorBehindCamera { view: 0, point: 0 })
    ));
}

#[test]
fn normalize_examples_and_round_trip() {
    let scale = DepthScale::new(vec![0.2], vec![1.2]);
    // Depth 0.7 with scale (0.2, 1.2) sits at 0.5.
    assert!((scale.normalize(0, 0.7) - 0.5).abs() < 1e-12);
    // Anchor (352, 240) at 704x480 normalizes to (0.5, 0.5): direct ratio.
    assert_eq!(352.0 / 704.0, 0.5);
    assert_eq!(240.0 / 480.0, 0.5);
    // Denormalize inverts normalize on the in-range segment, and
    // normalization is monotone in depth.
    let mut rng = Prng::new(3, "norm");
    let mut last = -1.0;
    for i in 0..100 {
        let d = 0.2 + i as f64 / 99.0;
        let c = scale.normalize(0, d);
        assert!((scale.denormalize(0, c) - d).abs() < 1e-6);
        assert!(c >= last);
        last = c;
        let r = rng.range(0.2, 1.2);
        assert!((scale.denormalize(0, scale.normalize(0, r)) - r).abs() < 1e-6);
    }
    // Clamping is the contract out of range.
    assert_eq!(scale.normalize(0, 0.0), 0.0);
    assert_eq!(scale.normalize(0, 5.0), 1.0);
}

/// World x-coordinate that projects to pixel `u` at depth `z` on the
/// identity camera with fx = 60, cx = 16.
fn world_x(u: f64, z: f64) -> f64 {
    (u - 16.0) / 60.0 * z
}

#[test]
fn rasterize_single_disc_is_exact() {
    let rig = single_view_rig(32, 32);
    let p = Vec3::new(-0.1, -0.1, 1.0); // projects to (10, 10)
    let tracks = TrackSet::from_points(&[vec![p], vec![p]]).unwrap();
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let params = CodecParams::default();
    let pv = rasterize(&pvt, &scale, 32, 32, &params).unwrap();
    let expected_color = [10.0f32 / 32.0, 10.0 / 32.0];
    let mut nonzero = 0;
    for y in 0..32 {
        for x in 0..32 {
            let off = pv.data.offset(&[0, 0, y, x, 0]);
            let d = pv.data.data();
            let in_disc = {
                let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
                dx * dx + dy * dy <= 4.0
            };
            if in_disc {
                nonzero += 1;
                assert_eq!(d[off], expected_color[0]);
                assert_eq!(d[off + 1], expected_color[1]);
            } else {
                assert_eq!(&d[off..off + 3], &[0.0, 0.0, 0.0], "background must stay black");
            }
        }
    }
    assert_eq!(nonzero, 13); // radius-2 disc on the integer grid
}

#[test]
fn rasterize_rejects_colliding_anchors() {
    let rig = single_view_rig(32, 32);
    // Frame-0 projections only 3 px apart with radius 2 (needs 5).
    let a = Vec3::new(world_x(16.0, 1.0), 0.0, 1.0);
    let b = Vec3::new(world_x(19.0, 1.0), 0.0, 1.0);
    let tracks = TrackSet::from_points(&vec![vec![a, b]; 2]).unwrap();
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let err = rasterize(&pvt, &scale, 32, 32, &CodecParams::default());
    assert!(matches!(err, Err(CodecError::AnchorCollision { view: 0, a: 0, b: 1 })));
}

#[test]
fn rasterize_nearest_depth_wins_and_ties_break_low() {
    let rig = single_view_rig(32, 32);
    let params = CodecParams::default(); // radius 2

    // Frame 0: anchors 9 px apart (precondition holds). Frame 1: the discs
    // overlap; the nearer point must own the contested pixels.
    let tracks = TrackSet::from_points(&[
        vec![Vec3::new(world_x(12.0, 1.0), 0.0, 1.0), Vec3::new(world_x(21.0, 0.5), 0.0, 0.5)],
        vec![Vec3::new(world_x(15.6, 1.0), 0.0, 1.0), Vec3::new(world_x(17.4, 0.5), 0.0, 0.5)],
    ])
    .unwrap();
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let pv = rasterize(&pvt, &scale, 32, 32, &params).unwrap();
    let d = pv.data.data();
    let at = |x: usize| {
        let off = pv.data.offset(&[0, 1, 16, x, 0]);
        [d[off], d[off + 1], d[off + 2]]
    };
    // Pixels 16 and 17 are covered by both discs in frame 1; the z=0.5 point
    // (index 1, anchor u=21) wins them.
    for x in [16usize, 17] {
        let c = at(x);
        assert!((c[0] as f64 - 21.0 / 32.0).abs() < 1e-6, "pixel {x} should belong to the nearer splat");
        assert_eq!(c[2], 0.0, "nearer point sits at the scale minimum");
    }
    // Pixel 14 is a's alone.
    let c = at(14);
    assert!((c[0] as f64 - 12.0 / 32.0).abs() < 1e-6);
    assert_eq!(c[2], 1.0);

    // Equal depths: the lower point index keeps the contested pixels.
    let tracks = TrackSet::from_points(&[
        vec![Vec3::new(world_x(12.0, 1.0), 0.0, 1.0), Vec3::new(world_x(21.0, 1.0), 0.0, 1.0)],
        vec![Vec3::new(world_x(15.6, 1.0), 0.0, 1.0), Vec3::new(world_x(17.4, 1.0), 0.0, 1.0)],
    ])
    .unwrap();
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let pv = rasterize(&pvt, &scale, 32, 32, &params).unwrap();
    let d = pv.data.data();
    let off = pv.data.offset(&[0, 1, 16, 16, 0]);
    assert!(
        (d[off] as f64 - 12.0 / 32.0).abs() < 1e-6,
        "equal-depth overlap resolves to the lower point index"
    );
}

#[test]
fn tracking_video_mode_freezes_depth_channel() {
    let params = codec_scene_params();
    let (tracks, rig) = separated_scene(7, &params);
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let channels = normalize(&pvt, &scale, 48, 48, Representation::TrackingVideo);
    for view in 0..pvt.views() {
        for k in 0..pvt.points() {
            let first = channels.c3.at(&[view, 0, k]);
            for frame in 1..pvt.frames() {
                assert_eq!(channels.c3.at(&[view, frame, k]), first);
            }
        }
    }
}

fn round_trip_errors(seed: u64, params: &SceneParams, codec: &CodecParams) -> (f64, f64) {
    let (tracks, rig) = separated_scene(seed, params);
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let pv = rasterize(&pvt, &scale, params.height, params.width, codec).unwrap();
    let decoded = decode(&pv, &scale, &rig, Some(&pvt.anchor_uv), codec).unwrap();
    let mut max_uv = 0.0f64;
    let mut max_depth = 0.0f64;
    for (view, cam) in rig.cameras.iter().enumerate() {
        let dv = &decoded.views[view];
        for frame in 0..tracks.frames() {
            for k in 0..tracks.points() {
                assert!(dv.is_valid(frame, k), "track lost in clean round trip");
                let (du, dvv, dd) = project(dv.point(frame, k), cam).unwrap();
                let tu = pvt.uv.at(&[view, frame, k, 0]);
                let tv = pvt.uv.at(&[view, frame, k, 1]);
                let td = pvt.depth.at(&[view, frame, k]);
                max_uv = max_uv.max((du - tu).abs()).max((dvv - tv).abs());
                let denom = scale.max[view] - scale.min[view];
                max_depth = max_depth.max((dd - td).abs() / denom);
            }
        }
    }
    (max_uv, max_depth)
}

#[test]
fn codec_round_trip_on_separated_scenes() {
    let params = codec_scene_params();
    let codec = CodecParams::default();
    for seed in 0..10 {
        let (uv_err, depth_err) = round_trip_errors(seed, &params, &codec);
        assert!(uv_err <= 0.5, "seed {seed}: uv error {uv_err}");
        assert!(depth_err <= 1e-3, "seed {seed}: depth error {depth_err}");
    }
}

#[test]
fn all_black_video_has_no_anchors() {
    let rig = single_view_rig(32, 32);
    let pv = PseudoVideo {
        data: Tensor::zeros(&[1, 3, 32, 32, 3]),
        splat_radius: 2,
    };
    let scale = DepthScale::new(vec![0.5], vec![1.5]);
    let out = decode(&pv, &scale, &rig, None, &CodecParams::default());
    assert!(matches!(out, Err(CodecError::NoAnchorsFound { view: 0 })));
}

#[test]
fn blind_decode_matches_hinted_decode_on_clean_video() {
    let params = codec_scene_params();
    let codec = CodecParams::default();
    let (tracks, rig) = separated_scene(42, &params);
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let pv = rasterize(&pvt, &scale, params.height, params.width, &codec).unwrap();
    let blind = decode(&pv, &scale, &rig, None, &codec).unwrap();
    let hinted = decode(&pv, &scale, &rig, Some(&pvt.anchor_uv), &codec).unwrap();
    for view in 0..rig.views() {
        assert_eq!(blind.views[view].points(), tracks.points());
        // Blind indexing is scan-ordered; match each blind track to the
        // nearest hinted anchor and compare trajectories.
        for bk in 0..tracks.points() {
            let ba = blind.views[view].anchors[bk];
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for hk in 0..tracks.points() {
                let ha = hinted.views[view].anchors[hk];
                let d = ((ba[0] - ha[0]).powi(2) + (ba[1] - ha[1]).powi(2)).sqrt();
                if d < best_d {
                    best_d = d;
                    best = hk;
                }
            }
            assert!(best_d < 1.0, "blind anchor far from any true anchor");
            for frame in 0..tracks.frames() {
                let pb = blind.views[view].point(frame, bk);
                let ph = hinted.views[view].point(frame, best);
                assert!(pb.dist(ph) < 1e-6);
            }
        }
    }
}

#[test]
fn noisy_decode_recovers_most_tracks() {
    let params = codec_scene_params();
    let codec = CodecParams::default();
    let mut rng = Prng::new(2024, "noise");
    let mut ok = 0usize;
    let mut total = 0usize;
    for seed in 100..106 {
        let (tracks, rig) = separated_scene(seed, &params);
        let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
        let mut pv = rasterize(&pvt, &scale, params.height, params.width, &codec).unwrap();
        for x in pv.data.data_mut() {
            *x = (*x + 0.02 * rng.normal() as f32).clamp(0.0, 1.0);
        }
        let decoded = decode(&pv, &scale, &rig, Some(&pvt.anchor_uv), &codec).unwrap();
        for (view, cam) in rig.cameras.iter().enumerate() {
            for frame in 0..tracks.frames() {
                for k in 0..tracks.points() {
                    total += 1;
                    if !decoded.views[view].is_valid(frame, k) {
                        continue;
                    }
                    let (du, dv, _) = project(decoded.views[view].point(frame, k), cam).unwrap();
                    let tu = pvt.uv.at(&[view, frame, k, 0]);
                    let tv = pvt.uv.at(&[view, frame, k, 1]);
                    if ((du - tu).powi(2) + (dv - tv).powi(2)).sqrt() < 1.5 {
                        ok += 1;
                    }
                }
            }
        }
    }
    let frac = ok as f64 / total as f64;
    assert!(frac >= 0.95, "recovered {frac}");
}

#[test]
fn lost_tracks_repeat_previous_position() {
    let rig = single_view_rig(32, 32);
    let a = Vec3::new(0.0, 0.0, 1.0);
    // Second frame: point moves far outside the search window (teleport).
    let tracks = TrackSet::from_points(&[vec![a], vec![Vec3::new(0.4, 0.4, 1.0)], vec![a]]).unwrap();
    let (pvt, scale) = derive_per_view(&tracks, &rig).unwrap();
    let codec = CodecParams { search_radius: 3.0, ..CodecParams::default() };
    let pv = rasterize(&pvt, &scale, 32, 32, &codec).unwrap();
    let decoded = decode(&pv, &scale, &rig, Some(&pvt.anchor_uv), &codec).unwrap();
    let view = &decoded.views[0];
    assert!(view.is_valid(0, 0));
    assert!(!view.is_valid(1, 0), "teleported frame should be lost");
    assert!(view.point(1, 0).dist(view.point(0, 0)) < 1e-12, "lost track repeats previous point");
}
