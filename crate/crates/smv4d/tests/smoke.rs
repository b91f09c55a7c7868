//! End-to-end smoke: dataset generation, a handful of training steps in each
//! phase, checkpoint round trip, and one sampling pass with shape checks.

use std::path::PathBuf;

use smv4d::config::RunConfig;
use smv4d::gendata::generate_dataset;
use smv4d::pipeline::{load_dataset, load_state, run_phases, save_state, Pipeline};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smv4d_smoke_{}_{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.data.scenes = 10;
    cfg.run_loop.phase_a_steps = 4;
    cfg.run_loop.phase_b_steps = 4;
    cfg.run_loop.phase_c_steps = 6;
    cfg
}

#[test]
fn train_sample_and_resume() {
    let dir = scratch("train");
    let data_dir = dir.join("data");
    let cfg = tiny_cfg();
    generate_dataset(&cfg, &data_dir, false).unwrap();

    let pipeline = Pipeline::new(cfg.clone());
    let dataset = load_dataset(&pipeline, &data_dir).unwrap();
    assert!(!dataset.train.is_empty());

    // Full phase run on the tiny budget.
    let out_a = dir.join("run_a");
    let artifacts = run_phases(&pipeline, &dataset.train, &out_a, None).unwrap();
    assert_eq!(artifacts.state.step, 14);
    let log = std::fs::read_to_string(&artifacts.log_path).unwrap();
    assert_eq!(log.lines().count(), 14);
    // Phases appear in order.
    let phases: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert!(phases[..4].iter().all(|p| p == "warmup_dpa"));
    assert!(phases[4..8].iter().all(|p| p == "warmup_mjd"));
    assert!(phases[8..].iter().all(|p| p == "joint"));

    // Determinism: a second identical run produces identical loss records
    // (timestamps excluded).
    let out_b = dir.join("run_b");
    let artifacts_b = run_phases(&pipeline, &dataset.train, &out_b, None).unwrap();
    let log_b = std::fs::read_to_string(&artifacts_b.log_path).unwrap();
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wallclock_ms");
                serde_json::to_string(&v).unwrap()
            })
            .collect()
    };
    assert_eq!(strip(&log), strip(&log_b));

    // Checkpoint round trip and resume.
    let ckpt = out_a.join("ckpt_final.smv4d");
    assert!(ckpt.exists());
    let state = load_state(&pipeline, &ckpt).unwrap();
    assert_eq!(state.step, 14);
    let resaved = dir.join("resaved.smv4d");
    save_state(&pipeline, &state, &resaved).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&resaved).unwrap());

    // Sampling produces declared shapes and is reproducible bitwise.
    let batch = &dataset.train[0];
    let result = pipeline.sample(&state.params, batch, 4, 11);
    let d = &pipeline.cfg.data;
    assert_eq!(result.videos.shape(), &[d.views, d.frames, d.height, d.width, 3]);
    assert_eq!(result.fused.data().shape(), &[d.frames, d.tracks, 3]);
    assert_eq!(result.coarse.views.len(), d.views);
    let result2 = pipeline.sample(&state.params, batch, 4, 11);
    assert_eq!(result.videos, result2.videos);
    assert_eq!(result.fused.data(), result2.fused.data());

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ablation_variants_run() {
    let dir = scratch("variants");
    let data_dir = dir.join("data");
    let mut cfg = tiny_cfg();
    cfg.data.scenes = 10;
    generate_dataset(&cfg, &data_dir, false).unwrap();

    // no-cycle
    let mut no_cycle = cfg.clone();
    no_cycle.run_loop.enable_cycle = false;
    let pipeline = Pipeline::new(no_cycle);
    let dataset = load_dataset(&pipeline, &data_dir).unwrap();
    run_phases(&pipeline, &dataset.train, &dir.join("no_cycle"), None).unwrap();

    // aligner disabled entirely
    let mut mjd_only = cfg.clone();
    mjd_only.dpa.enabled = false;
    mjd_only.run_loop.enable_cycle = false;
    let pipeline = Pipeline::new(mjd_only);
    let dataset = load_dataset(&pipeline, &data_dir).unwrap();
    let artifacts = run_phases(&pipeline, &dataset.train, &dir.join("mjd_only"), None).unwrap();
    // Phase A is skipped without the aligner.
    assert_eq!(artifacts.state.step, 14);
    let batch = &dataset.train[0];
    let result = pipeline.sample(&artifacts.state.params, batch, 3, 5);
    assert_eq!(result.coarse.views.len(), cfg.data.views);

    // single-view
    let mut single = cfg.clone();
    single.run_loop.single_view = true;
    single.run_loop.phase_c_steps = 4;
    let pipeline = Pipeline::new(single);
    let dataset = load_dataset(&pipeline, &data_dir).unwrap();
    let expanded = smv4d::pipeline::expand_single_view(&pipeline, &dataset.train);
    assert_eq!(expanded.len(), dataset.train.len() * cfg.data.views);
    let artifacts = run_phases(&pipeline, &expanded, &dir.join("single"), None).unwrap();
    let pred = smv4d::evalproto::predict_scene(&pipeline, &artifacts.state.params, &dataset.train[0], 3, 5);
    assert_eq!(pred.coarse.shape()[0], cfg.data.views);
    assert!(pred.per_view_fused.is_some());

    // tracking-video representation
    let mut tv = cfg.clone();
    tv.codec.representation = smv4d_core::trackcodec::Representation::TrackingVideo;
    tv.dpa.enabled = false;
    tv.run_loop.enable_cycle = false;
    tv.run_loop.phase_a_steps = 0;
    let pipeline = Pipeline::new(tv);
    let dataset = load_dataset(&pipeline, &data_dir).unwrap();
    run_phases(&pipeline, &dataset.train, &dir.join("tv"), None).unwrap();

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn joint_phase_updates_are_aligner_agnostic() {
    // Phase-scoped RNG streams, per-model gradient clipping, per-parameter
    // Adam counts, and the detached-scale conditions together guarantee that
    // the denoiser's weights evolve identically whether or not the aligner
    // trains alongside (the aligner couples back only through cycle guidance,
    // which the no-cycle variant disables).
    let dir = scratch("weight_eq");
    let data_dir = dir.join("data");
    let cfg = tiny_cfg();
    generate_dataset(&cfg, &data_dir, false).unwrap();

    let mut no_cycle = cfg.clone();
    no_cycle.run_loop.enable_cycle = false;
    let p1 = Pipeline::new(no_cycle);
    let d1 = load_dataset(&p1, &data_dir).unwrap();
    let a1 = run_phases(&p1, &d1.train, &dir.join("nc"), None).unwrap();

    let mut mjd_only = cfg.clone();
    mjd_only.dpa.enabled = false;
    mjd_only.run_loop.enable_cycle = false;
    let p2 = Pipeline::new(mjd_only);
    let d2 = load_dataset(&p2, &data_dir).unwrap();
    let a2 = run_phases(&p2, &d2.train, &dir.join("mo"), None).unwrap();

    for (name, t) in a1.state.params.iter() {
        if name.starts_with("mjd.") {
            assert_eq!(
                t.max_abs_diff(a2.state.params.get(name)),
                0.0,
                "parameter {name} diverged between no-cycle and aligner-free training"
            );
        }
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
