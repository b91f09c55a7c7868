//! Command-line entry point.
//!
//! Commands: gen-data, train, sample, eval, gradcheck. Any configuration key
//! can be overridden with a dotted path (`--mjd.dim=64`). Exit codes: 0
//! success, 2 configuration error, 3 data error, 4 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use smv4d::config::RunConfig;
use smv4d::evalproto::{
    render_table, score_scene, EvalReport, MotionAccumulator, EVAL_FORMAT_VERSION,
};
use smv4d::gendata::generate_dataset;
use smv4d::pipeline::{load_dataset, load_state, run_phases, LoopError, Pipeline};
use smv4d::predio;
use smv4d_core::dataset::{read_scene, write_json};

const USAGE: &str = "\
usage: smv4d <command> [options] [--<config.key>=<value> ...]

commands:
  gen-data  --out DIR [--scenes N] [--seed S] [--preset P] [--preview]
  train     --data DIR --out DIR [--preset P] [--seed S] [--resume CKPT]
            [--no-cycle] [--single-view] [--tracking-video]
  sample    --ckpt FILE --data DIR --scene ID --out DIR [--steps N] [--seed S]
            [--export-plots]
  eval      --pred DIR --data DIR [--out FILE]
  gradcheck [--op NAME]

presets: toy (default), desk, full. SMV4D_SEED overrides the default seed.
";

struct Args {
    flags: Vec<(String, Option<String>)>,
}

impl Args {
    fn parse(raw: &[String]) -> Result<Self, String> {
        let mut flags = Vec::new();
        let mut it = raw.iter().peekable();
        while let Some(arg) = it.next() {
            let Some(name) = arg.strip_prefix("--") else {
                return Err(format!("unexpected argument '{arg}'"));
            };
            if let Some((key, value)) = name.split_once('=') {
                flags.push((key.to_string(), Some(value.to_string())));
            } else if it.peek().map(|n| !n.starts_with("--")).unwrap_or(false) {
                flags.push((name.to_string(), Some(it.next().unwrap().clone())));
            } else {
                flags.push((name.to_string(), None));
            }
        }
        Ok(Self { flags })
    }

    fn take(&mut self, name: &str) -> Option<String> {
        let pos = self.flags.iter().position(|(k, _)| k == name)?;
        self.flags.remove(pos).1
    }

    fn take_bool(&mut self, name: &str) -> bool {
        if let Some(pos) = self.flags.iter().position(|(k, _)| k == name) {
            self.flags.remove(pos);
            true
        } else {
            false
        }
    }

    /// Remaining flags are dotted config overrides.
    fn into_overrides(self) -> Result<Vec<String>, String> {
        self.flags
            .into_iter()
            .map(|(k, v)| match v {
                Some(v) if k.contains('.') => Ok(format!("{k}={v}")),
                _ => Err(format!("unknown flag '--{k}'")),
            })
            .collect()
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("SMV4D_SEED").ok().and_then(|s| s.parse().ok())
}

fn build_config(args: &mut Args) -> Result<RunConfig, String> {
    let preset = args.take("preset").unwrap_or_else(|| "toy".to_string());
    let mut cfg = RunConfig::preset(&preset).map_err(|e| e.to_string())?;
    if let Some(seed) = env_seed() {
        cfg.seed = seed;
    }
    if let Some(seed) = args.take("seed") {
        cfg.seed = seed.parse().map_err(|_| format!("bad --seed '{seed}'"))?;
    }
    if let Some(n) = args.take("scenes") {
        cfg.data.scenes = n.parse().map_err(|_| format!("bad --scenes '{n}'"))?;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: RunConfig, overrides: &[String]) -> Result<RunConfig, String> {
    let mut cfg = cfg;
    for spec in overrides {
        cfg = cfg.with_override(spec).map_err(|e| e.to_string())?;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Echo the resolved config and code version into the output directory.
fn echo_run_metadata(cfg: &RunConfig, out: &Path) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    write_json(&out.join("config.json"), cfg).map_err(|e| e.to_string())?;
    write_json(
        &out.join("version.json"),
        &serde_json::json!({ "package": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") }),
    )
    .map_err(|e| e.to_string())
}

enum CmdError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Data(_) => 3,
            CmdError::Numerical(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Data(m) | CmdError::Numerical(m) => m,
        }
    }
}

fn loop_error(e: LoopError) -> CmdError {
    match e {
        LoopError::NanAbort { .. } => CmdError::Numerical(e.to_string()),
        other => CmdError::Data(other.to_string()),
    }
}

fn cmd_gen_data(mut args: Args) -> Result<(), CmdError> {
    let out = args.take("out").ok_or(CmdError::Config("gen-data needs --out".into()))?;
    let preview = args.take_bool("preview");
    let cfg = build_config(&mut args).map_err(CmdError::Config)?;
    let overrides = args.into_overrides().map_err(CmdError::Config)?;
    let cfg = apply_overrides(cfg, &overrides).map_err(CmdError::Config)?;
    let out = PathBuf::from(out);
    echo_run_metadata(&cfg, &out).map_err(CmdError::Data)?;
    generate_dataset(&cfg, &out, preview).map_err(|e| CmdError::Data(e.to_string()))?;
    println!("wrote {} scenes under {}", cfg.data.scenes, out.display());
    Ok(())
}

fn cmd_train(mut args: Args) -> Result<(), CmdError> {
    let data = args.take("data").ok_or(CmdError::Config("train needs --data".into()))?;
    let out = args.take("out").ok_or(CmdError::Config("train needs --out".into()))?;
    let resume = args.take("resume");
    let no_cycle = args.take_bool("no-cycle");
    let single_view = args.take_bool("single-view");
    let tracking_video = args.take_bool("tracking-video");
    let mut cfg = build_config(&mut args).map_err(CmdError::Config)?;
    if no_cycle {
        cfg.run_loop.enable_cycle = false;
    }
    if single_view {
        cfg.run_loop.single_view = true;
    }
    if tracking_video {
        // Frozen-depth representation: the aligner and the cycle are moot.
        cfg.codec.representation = smv4d_core::trackcodec::Representation::TrackingVideo;
        cfg.dpa.enabled = false;
        cfg.run_loop.enable_cycle = false;
        cfg.run_loop.phase_a_steps = 0;
    }
    let overrides = args.into_overrides().map_err(CmdError::Config)?;
    let cfg = apply_overrides(cfg, &overrides).map_err(CmdError::Config)?;

    let data_dir = PathBuf::from(data);
    if !data_dir.join("splits.json").exists() {
        return Err(CmdError::Data(format!("dataset missing at {}", data_dir.display())));
    }
    let out = PathBuf::from(out);
    echo_run_metadata(&cfg, &out).map_err(CmdError::Data)?;
    let pipeline = Pipeline::new(cfg);
    let dataset = load_dataset(&pipeline, &data_dir).map_err(loop_error)?;
    let train_scenes = if pipeline.cfg.run_loop.single_view {
        smv4d::pipeline::expand_single_view(&pipeline, &dataset.train)
    } else {
        dataset.train
    };
    let resume_state = match resume {
        Some(path) => Some(load_state(&pipeline, Path::new(&path)).map_err(loop_error)?),
        None => None,
    };
    let artifacts = run_phases(&pipeline, &train_scenes, &out, resume_state).map_err(loop_error)?;
    println!(
        "trained {} steps; checkpoints and {} under {}",
        artifacts.state.step,
        artifacts.log_path.file_name().unwrap().to_string_lossy(),
        out.display()
    );
    Ok(())
}

fn cmd_sample(mut args: Args) -> Result<(), CmdError> {
    let ckpt = args.take("ckpt").ok_or(CmdError::Config("sample needs --ckpt".into()))?;
    let data = args.take("data").ok_or(CmdError::Config("sample needs --data".into()))?;
    let scene_id = args.take("scene").ok_or(CmdError::Config("sample needs --scene".into()))?;
    let out = args.take("out").ok_or(CmdError::Config("sample needs --out".into()))?;
    let steps = args.take("steps");
    let seed_flag = args.take("seed");
    let export_plots = args.take_bool("export-plots");
    let overrides = args.into_overrides().map_err(CmdError::Config)?;
    // The checkpoint's stored config defines the model; CLI overrides apply on top.
    let ckpt_path = PathBuf::from(&ckpt);
    let stored = smv4d_nn::checkpoint::load(&ckpt_path).map_err(|e| CmdError::Data(e.to_string()))?;
    let mut cfg =
        RunConfig::from_json(&stored.meta.config_json).map_err(|e| CmdError::Config(e.to_string()))?;
    if let Some(seed) = env_seed() {
        cfg.flow.seed = Some(seed);
    }
    if let Some(seed) = seed_flag {
        cfg.flow.seed =
            Some(seed.parse().map_err(|_| CmdError::Config(format!("bad --seed '{seed}'")))?);
    }
    let cfg = apply_overrides(cfg, &overrides).map_err(CmdError::Config)?;
    let steps = match steps {
        Some(s) => s.parse().map_err(|_| CmdError::Config(format!("bad --steps '{s}'")))?,
        None => cfg.flow.steps,
    };

    let pipeline = Pipeline::new(cfg);
    let state = load_state(&pipeline, &ckpt_path).map_err(loop_error)?;
    let scene = read_scene(Path::new(&data), &scene_id).map_err(|e| CmdError::Data(e.to_string()))?;
    let batch = pipeline.prepare_scene(&scene_id, &scene).map_err(loop_error)?;
    let out = PathBuf::from(out);
    echo_run_metadata(&pipeline.cfg, &out).map_err(CmdError::Data)?;

    let seed = pipeline.cfg.sampling_seed();
    let pred = smv4d::evalproto::predict_scene(&pipeline, &state.params, &batch, steps, seed);
    let scene_dir = predio::prediction_dir(&out, &scene_id);
    // The pseudo-video export comes from the multi-view sample; the assembled
    // single-view variant has no joint pseudo block.
    let (pseudo, scale) = if pipeline.cfg.run_loop.single_view {
        (None, batch.scale_gt.clone())
    } else {
        let result = pipeline.sample(&state.params, &batch, steps, seed);
        if export_plots {
            predio::export_track_plots(&scene_dir.join("plots"), &pipeline, &result, &batch)
                .map_err(|e| CmdError::Data(e.to_string()))?;
        }
        (Some(result.pseudo.data.clone()), result.scale.clone())
    };
    predio::write_prediction(&scene_dir, &scene_id, &pred, pseudo.as_ref(), &scale)
        .map_err(|e| CmdError::Data(e.to_string()))?;
    smv4d_core::dataset::export_video_pngs(&scene_dir.join("frames"), "gen", &pred.videos)
        .map_err(|e| CmdError::Data(e.to_string()))?;
    predio::write_pred_index(&out, std::slice::from_ref(&scene_id))
        .map_err(|e| CmdError::Data(e.to_string()))?;
    println!("sampled scene {scene_id} into {}", scene_dir.display());
    Ok(())
}

fn cmd_eval(mut args: Args) -> Result<(), CmdError> {
    let pred_root = args.take("pred").ok_or(CmdError::Config("eval needs --pred".into()))?;
    let data = args.take("data").ok_or(CmdError::Config("eval needs --data".into()))?;
    let out = args.take("out");
    args.into_overrides().map_err(CmdError::Config)?;

    let pred_root = PathBuf::from(pred_root);
    let data_root = PathBuf::from(data);
    // The prediction run directory echoes its config; evaluation adopts it.
    let cfg_path = pred_root.join("config.json");
    let cfg = if cfg_path.exists() {
        RunConfig::from_json(
            &std::fs::read_to_string(&cfg_path).map_err(|e| CmdError::Data(e.to_string()))?,
        )
        .map_err(|e| CmdError::Config(e.to_string()))?
    } else {
        RunConfig::toy()
    };
    let pipeline = Pipeline::new(cfg);
    let ids = predio::read_pred_index(&pred_root).map_err(|e| CmdError::Data(e.to_string()))?;
    let mut acc = MotionAccumulator::default();
    for id in &ids {
        let (_, pred) = predio::read_prediction(&predio::prediction_dir(&pred_root, id))
            .map_err(|e| CmdError::Data(e.to_string()))?;
        let scene = read_scene(&data_root, id).map_err(|e| CmdError::Data(e.to_string()))?;
        let batch = pipeline.prepare_scene(id, &scene).map_err(loop_error)?;
        let report = score_scene(
            &pred,
            &batch,
            pipeline.cfg.codec.representation,
            pipeline.cfg.metrics.photometric_tau,
            pipeline.cfg.metrics.pi_threshold,
        )
        .map_err(|e| CmdError::Numerical(e.to_string()))?;
        acc.add(&report);
    }
    let mean = acc.mean();
    let table = render_table(&[("mean".to_string(), mean.clone())]);
    print!("{table}");
    let report = EvalReport {
        format_version: EVAL_FORMAT_VERSION.to_string(),
        scenes: ids.len(),
        report: mean,
    };
    if let Some(out) = out {
        write_json(Path::new(&out), &report).map_err(|e| CmdError::Data(e.to_string()))?;
    }
    Ok(())
}

fn cmd_gradcheck(mut args: Args) -> Result<(), CmdError> {
    let op = args.take("op");
    args.into_overrides().map_err(CmdError::Config)?;
    let reports = match op {
        Some(name) => {
            vec![smv4d_nn::gradcheck::grad_check(&name)
                .map_err(|e| CmdError::Config(e.to_string()))?]
        }
        None => smv4d_nn::gradcheck::run_all(),
    };
    let mut all_ok = true;
    for r in &reports {
        println!(
            "{:<24} max_rel_err {:>12.3e}  tol {:>8.0e}  {}",
            r.op,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_ok &= r.passed;
    }
    if !all_ok {
        return Err(CmdError::Numerical("gradient check failed".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let Some((command, rest)) = raw.split_first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    let args = match Args::parse(rest) {
        Ok(args) => args,
        Err(message) => {
            eprintln!("error: {message}\n");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(args),
        "train" => cmd_train(args),
        "sample" => cmd_sample(args),
        "eval" => cmd_eval(args),
        "gradcheck" => cmd_gradcheck(args),
        other => {
            eprintln!("error: unknown command '{other}'\n");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
