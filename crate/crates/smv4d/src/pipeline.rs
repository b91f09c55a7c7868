//! Closed-loop joint training and the matching inference sampler.
//!
//! One training step: diffuse the latents and the point set to a shared t,
//! refine the noisy points with a gradient-free aligner pass conditioned on
//! the decoded noisy motion latent, re-encode the refined tracks as guidance
//! added to the motion latent, run the joint denoiser, then run the aligner
//! again conditioned on the denoiser's own one-step motion estimate (depth
//! denormalization rides the predicted scale, which is where gradient flows
//! back into the denoiser), and descend on the summed losses.
//!
//! Inference mirrors the loop: each Euler step refines the point set,
//! re-encodes it as guidance, denoises both latents one step, then advances
//! the points with the aligner's velocity.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use smv4d_core::dataset::{read_scene, read_splits, DataError, StoredScene};
use smv4d_core::flowmatch::{euler_step, interpolate, one_step_denoise, velocity_target, TimeGrid};
use smv4d_core::geometry::{CameraRig, Vec3};
use smv4d_core::rng::Prng;
use smv4d_core::tensor::Tensor;
use smv4d_core::trackcodec::{
    decode, derive_per_view, project_tracks_tolerant, rasterize, rasterize_unchecked, CodecParams,
    DecodedTracks, DepthScale, PseudoVideo, TrackSet,
};
use smv4d_nn::checkpoint::{self, CkptMeta};
use smv4d_nn::dpa::{downsample_conditions, CondPoint, CondSource, DpaModel};
use smv4d_nn::latent::{decode_latent, encode_latent};
use smv4d_nn::mjd::MjdModel;
use smv4d_nn::params::{Optimizer, ParamStore, TapeBinding};
use smv4d_nn::tape::Tape;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("training aborted: non-finite loss at step {step} ({phase}): mjd={loss_mjd}, dpa={loss_dpa}")]
    NanAbort { step: usize, phase: String, loss_mjd: f64, loss_dpa: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ckpt(#[from] smv4d_nn::checkpoint::CkptError),
    #[error("dataset at {0} has no scenes in the requested split")]
    EmptySplit(String),
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmupDpa,
    WarmupMjd,
    Joint,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::WarmupDpa => "warmup_dpa",
            Phase::WarmupMjd => "warmup_mjd",
            Phase::Joint => "joint",
        }
    }
}

/// Named counter-based RNG streams; adding a consumer never shifts another.
#[derive(Debug, Clone)]
pub struct RngSet {
    pub data: Prng,
    pub timestep: Prng,
    pub noise_video: Prng,
    pub noise_motion: Prng,
    pub noise_points: Prng,
    pub cond_noise: Prng,
}

impl RngSet {
    pub fn new(seed: u64) -> Self {
        Self::for_phase(seed, "init")
    }

    /// Streams are scoped per phase so every phase sees the same draws no
    /// matter how long (or whether) earlier phases ran; ablation variants
    /// with different warm-up budgets then share identical joint-phase data
    /// order and noise.
    pub fn for_phase(seed: u64, phase: &str) -> Self {
        Self {
            data: Prng::new(seed, &format!("{phase}/data")),
            timestep: Prng::new(seed, &format!("{phase}/timestep")),
            noise_video: Prng::new(seed, &format!("{phase}/noise_video")),
            noise_motion: Prng::new(seed, &format!("{phase}/noise_motion")),
            noise_points: Prng::new(seed, &format!("{phase}/noise_points")),
            cond_noise: Prng::new(seed, &format!("{phase}/cond_noise")),
        }
    }

    pub fn states(&self) -> std::collections::BTreeMap<String, (u64, u64)> {
        [
            ("data", &self.data),
            ("timestep", &self.timestep),
            ("noise_video", &self.noise_video),
            ("noise_motion", &self.noise_motion),
            ("noise_points", &self.noise_points),
            ("cond_noise", &self.cond_noise),
        ]
        .into_iter()
        .map(|(name, rng)| (name.to_string(), rng.state()))
        .collect()
    }

    pub fn restore(seed: u64, states: &std::collections::BTreeMap<String, (u64, u64)>) -> Self {
        let mut set = Self::new(seed);
        let load = |name: &str, slot: &mut Prng| {
            if let Some(&s) = states.get(name) {
                *slot = Prng::from_state(s);
            }
        };
        load("data", &mut set.data);
        load("timestep", &mut set.timestep);
        load("noise_video", &mut set.noise_video);
        load("noise_motion", &mut set.noise_motion);
        load("noise_points", &mut set.noise_points);
        load("cond_noise", &mut set.cond_noise);
        set
    }
}

pub struct TrainState {
    pub step: usize,
    pub phase: Phase,
    pub params: ParamStore<f32>,
    pub opt: Optimizer,
    pub rngs: RngSet,
}

/// Everything the loop needs from one scene, precomputed once: the encode side
/// of the pipeline (scale, pseudo-video, latents) is loop-invariant.
pub struct SceneBatch {
    pub id: String,
    pub videos: Tensor<f32>,
    pub tracks: TrackSet,
    pub rig: CameraRig,
    pub prompt: Vec<u16>,
    pub scale_gt: DepthScale,
    pub anchors: Tensor<f64>,
    pub z0_video: Tensor<f32>,
    pub z0_motion: Tensor<f32>,
    /// `[N*K, 3]` normalized ground-truth points, frame-major.
    pub points0: Tensor<f32>,
    /// Per-frame normalized ground truth for the Chamfer term.
    pub gt_frames: Arc<Vec<Vec<[f64; 3]>>>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub mjd: MjdModel,
    pub dpa: Option<DpaModel>,
    codec_params: CodecParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    pub loss_mjd: f64,
    pub loss_dpa: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wallclock_ms: u128,
}

pub struct SampleResult {
    pub videos: Tensor<f32>,
    pub pseudo: PseudoVideo,
    /// Globally aligned world-space tracks, `[N, K, 3]` meters.
    pub fused: TrackSet,
    /// Per-view coarse tracks decoded from the generated pseudo-video.
    pub coarse: DecodedTracks,
    pub scale: DepthScale,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let mjd = MjdModel::new(cfg.mjd_config());
        let dpa = cfg.dpa.enabled.then(|| DpaModel::new(cfg.dpa_config()));
        let codec_params = cfg.codec_params();
        Self { cfg, mjd, dpa, codec_params }
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let rng = Prng::new(seed, "init");
        self.mjd.init_params(&mut store, &mut rng.fork("mjd"));
        if let Some(dpa) = &self.dpa {
            dpa.init_params(&mut store, &mut rng.fork("dpa"));
        }
        store
    }

    fn center(&self) -> Vec3 {
        Vec3::ZERO
    }

    fn half(&self) -> f64 {
        self.cfg.data.workspace_half
    }

    fn normalize_point(&self, p: Vec3) -> Vec3 {
        (p - self.center()) * (1.0 / self.half())
    }

    fn denormalize_point(&self, p: Vec3) -> Vec3 {
        self.center() + p * self.half()
    }

    /// Prepare loop-invariant per-scene data (Alg. lines 1-3).
    pub fn prepare_scene(&self, id: &str, scene: &StoredScene) -> Result<SceneBatch, LoopError> {
        let (pvt, scale_gt) = derive_per_view(&scene.tracks, &scene.meta.cameras)
            .map_err(|e| LoopError::CheckpointMismatch(format!("scene {id}: {e}")))?;
        let pseudo = rasterize(
            &pvt,
            &scale_gt,
            self.cfg.data.height,
            self.cfg.data.width,
            &self.codec_params,
        )
        .map_err(|e| LoopError::CheckpointMismatch(format!("scene {id}: {e}")))?;
        let codec = self.cfg.latent_codec();
        let z0_video = encode_latent(&scene.videos, &codec).expect("config-validated shapes");
        let z0_motion = encode_latent(&pseudo.data, &codec).expect("config-validated shapes");
        let (n, k) = (scene.tracks.frames(), scene.tracks.points());
        let points0 = Tensor::from_fn(&[n * k, 3], |idx| {
            let (i, c) = (idx / 3, idx % 3);
            let p = self.normalize_point(scene.tracks.point(i / k, i % k));
            p.to_array()[c] as f32
        });
        let gt_frames: Vec<Vec<[f64; 3]>> = (0..n)
            .map(|f| {
                (0..k)
                    .map(|kk| self.normalize_point(scene.tracks.point(f, kk)).to_array())
                    .collect()
            })
            .collect();
        Ok(SceneBatch {
            id: id.to_string(),
            videos: scene.videos.clone(),
            tracks: scene.tracks.clone(),
            rig: scene.meta.cameras.clone(),
            prompt: scene.meta.prompt_ids.clone(),
            scale_gt,
            anchors: pvt.anchor_uv,
            z0_video,
            z0_motion,
            points0,
            gt_frames: Arc::new(gt_frames),
        })
    }

    /// Slice one view out of a multi-view scene for the single-view variant.
    pub fn slice_view(&self, batch: &SceneBatch, view: usize) -> SceneBatch {
        let shape = batch.videos.shape();
        let (n, h, w) = (shape[1], shape[2], shape[3]);
        let frame_len = n * h * w * 3;
        let videos = Tensor::from_vec(
            &[1, n, h, w, 3],
            batch.videos.data()[view * frame_len..(view + 1) * frame_len].to_vec(),
        );
        let rig = CameraRig { cameras: vec![batch.rig.cameras[view].clone()] };
        let k = batch.tracks.points();
        let anchors = Tensor::from_fn(&[1, k, 2], |idx| batch.anchors.at(&[view, idx / 2, idx % 2]));
        let scale_gt = DepthScale::new(vec![batch.scale_gt.min[view]], vec![batch.scale_gt.max[view]]);
        let codec = self.cfg.latent_codec();
        let z0_video = encode_latent(&videos, &codec).expect("validated");
        // Re-render the single-view pseudo-video against the one-camera rig.
        let (pvt, _) = derive_per_view(&batch.tracks, &rig).expect("projections hold");
        let pseudo = rasterize(&pvt, &scale_gt, h, w, &self.codec_params).expect("anchors hold");
        let z0_motion = encode_latent(&pseudo.data, &codec).expect("validated");
        SceneBatch {
            id: format!("{}#v{view}", batch.id),
            videos,
            tracks: batch.tracks.clone(),
            rig,
            prompt: batch.prompt.clone(),
            scale_gt,
            anchors,
            z0_video,
            z0_motion,
            points0: batch.points0.clone(),
            gt_frames: batch.gt_frames.clone(),
        }
    }

    fn randn_like(t: &Tensor<f32>, rng: &mut Prng) -> Tensor<f32> {
        Tensor::from_fn(t.shape(), |_| rng.normal() as f32)
    }

    /// Overwrite the conditioning (first) latent frame of every view.
    fn pin_reference_frame(dst: &mut Tensor<f32>, reference: &Tensor<f32>) {
        let shape = dst.shape().to_vec();
        let (v, nl) = (shape[0], shape[1]);
        let frame_len: usize = shape[2..].iter().product();
        let dd = dst.data_mut();
        for view in 0..v {
            let off = view * nl * frame_len;
            dd[off..off + frame_len].copy_from_slice(&reference.data()[off..off + frame_len]);
        }
    }

    /// Decode a motion latent to per-view coarse tracks. Never errors with
    /// anchor hints; garbage input merely yields lost tracks.
    fn decode_motion_latent(
        &self,
        z_motion: &Tensor<f32>,
        scale: &DepthScale,
        rig: &CameraRig,
        anchors: &Tensor<f64>,
    ) -> Option<(PseudoVideo, DecodedTracks)> {
        let pixels = decode_latent(z_motion, &self.cfg.latent_codec(), self.cfg.data.frames);
        let pv = PseudoVideo { data: pixels, splat_radius: self.cfg.data.splat_radius };
        match decode(&pv, scale, rig, Some(anchors), &self.codec_params) {
            Ok(tracks) => Some((pv, tracks)),
            Err(_) => None,
        }
    }

    /// Detached condition points from decoded coarse tracks (normalized).
    fn fixed_conditions(&self, decoded: &DecodedTracks) -> CondSource {
        let mut points = Vec::new();
        for (view, dv) in decoded.views.iter().enumerate() {
            for frame in 0..dv.frames {
                for k in 0..dv.points() {
                    if !dv.is_valid(frame, k) {
                        continue;
                    }
                    let p = self.normalize_point(dv.point(frame, k));
                    if p.norm() > 4.0 {
                        continue; // wildly out-of-workspace decode at high noise
                    }
                    points.push(CondPoint { pos: p, view, frame, anchor: k });
                }
            }
        }
        let down = downsample_conditions(
            &points,
            self.cfg.dpa.voxel,
            self.cfg.dpa.cap_per_frame,
            self.cfg.data.views,
        );
        CondSource::Fixed(down)
    }

    /// Render refined normalized points into a guidance latent. Guidance has
    /// no codec precondition: points that fail to project stay invisible and
    /// splat overlaps resolve by depth. Returns None only for non-finite
    /// refinements.
    fn guidance_latent(
        &self,
        refined_norm: &Tensor<f32>,
        batch: &SceneBatch,
        scale: &DepthScale,
    ) -> Option<Tensor<f32>> {
        let (n, k) = (batch.tracks.frames(), batch.tracks.points());
        let frames: Vec<Vec<Vec3>> = (0..n)
            .map(|f| {
                (0..k)
                    .map(|kk| {
                        let i = f * k + kk;
                        self.denormalize_point(Vec3::new(
                            refined_norm.at(&[i, 0]) as f64,
                            refined_norm.at(&[i, 1]) as f64,
                            refined_norm.at(&[i, 2]) as f64,
                        ))
                    })
                    .collect()
            })
            .collect();
        let tracks = TrackSet::from_points(&frames).ok()?;
        let pvt = project_tracks_tolerant(&tracks, &batch.rig);
        let pseudo = rasterize_unchecked(
            &pvt,
            scale,
            self.cfg.data.height,
            self.cfg.data.width,
            &self.codec_params,
        );
        let z = encode_latent(&pseudo.data, &self.cfg.latent_codec()).ok()?;
        Some(z.scale(self.cfg.run_loop.guidance_gain))
    }

    // -- training steps -------------------------------------------------------

    /// Aligner warm-up: conditions are ground truth plus Gaussian noise,
    /// replicated per view (per-view decodes disagree; so should these).
    pub fn dpa_warmup_step(&self, state: &mut TrainState, batch: &SceneBatch) -> Result<StepRecord, LoopError> {
        let started = std::time::Instant::now();
        let dpa = self.dpa.as_ref().expect("phase A requires the aligner");
        let t = state.rngs.timestep.uniform();
        let noise = Self::randn_like(&batch.points0, &mut state.rngs.noise_points);
        let m_t = interpolate(&batch.points0, &noise, t).expect("shapes");
        let v_gt = velocity_target(&batch.points0, &noise).expect("shapes");

        let sigma = self.cfg.dpa.cond_noise / self.half();
        let (n, k) = (batch.tracks.frames(), batch.tracks.points());
        let mut points = Vec::with_capacity(self.cfg.data.views * n * k);
        for view in 0..self.cfg.data.views {
            for frame in 0..n {
                for kk in 0..k {
                    let i = frame * k + kk;
                    let pos = Vec3::new(
                        batch.points0.at(&[i, 0]) as f64 + sigma * state.rngs.cond_noise.normal(),
                        batch.points0.at(&[i, 1]) as f64 + sigma * state.rngs.cond_noise.normal(),
                        batch.points0.at(&[i, 2]) as f64 + sigma * state.rngs.cond_noise.normal(),
                    );
                    points.push(CondPoint { pos, view, frame, anchor: kk });
                }
            }
        }
        let conditions = CondSource::Fixed(downsample_conditions(
            &points,
            self.cfg.dpa.voxel,
            self.cfg.dpa.cap_per_frame,
            self.cfg.data.views,
        ));

        let mut tape = Tape::<f32>::new();
        let mut binding = TapeBinding::new(&state.params);
        let out = dpa.forward(&mut tape, &mut binding, &m_t, &conditions, t);
        let loss = dpa.loss(&mut tape, &out, v_gt, batch.gt_frames.clone());
        let loss_val = tape.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(LoopError::NanAbort {
                step: state.step,
                phase: state.phase.as_str().into(),
                loss_mjd: 0.0,
                loss_dpa: loss_val,
            });
        }
        let (grad_norm, lr) = apply_update(state, &tape, loss, |name| name.starts_with("dpa."));
        Ok(StepRecord {
            step: state.step,
            phase: state.phase.as_str().into(),
            loss_mjd: 0.0,
            loss_dpa: loss_val,
            grad_norm,
            lr,
            wallclock_ms: started.elapsed().as_millis(),
        })
    }

    /// One joint step (Alg. lines 4-13). `with_dpa = false` gives the pure
    /// denoiser step used in the warm-up phase and the no-aligner ablation.
    pub fn joint_step(
        &self,
        state: &mut TrainState,
        batch: &SceneBatch,
        with_dpa: bool,
    ) -> Result<StepRecord, LoopError> {
        let started = std::time::Instant::now();
        let t = state.rngs.timestep.uniform();
        let eps_video = Self::randn_like(&batch.z0_video, &mut state.rngs.noise_video);
        let eps_motion = Self::randn_like(&batch.z0_motion, &mut state.rngs.noise_motion);
        let eps_points = Self::randn_like(&batch.points0, &mut state.rngs.noise_points);

        let mut z_t_video = interpolate(&batch.z0_video, &eps_video, t).expect("shapes");
        Self::pin_reference_frame(&mut z_t_video, &batch.z0_video);
        let z_t_motion = interpolate(&batch.z0_motion, &eps_motion, t).expect("shapes");
        let m_t = interpolate(&batch.points0, &eps_points, t).expect("shapes");

        let v_gt_video = velocity_target(&batch.z0_video, &eps_video).expect("shapes");
        let v_gt_motion = velocity_target(&batch.z0_motion, &eps_motion).expect("shapes");
        let v_gt_points = velocity_target(&batch.points0, &eps_points).expect("shapes");

        let use_dpa = with_dpa && self.dpa.is_some();
        let cycle = use_dpa && self.cfg.run_loop.enable_cycle;

        // Lines 7-8: gradient-free refinement of the noisy points conditioned
        // on the decoded noisy motion latent; refined tracks re-encode into a
        // guidance latent added to the denoiser's motion input.
        let mut z_in_motion = z_t_motion.clone();
        let mut line7_decoded: Option<DecodedTracks> = None;
        if use_dpa {
            if let Some((_, decoded)) =
                self.decode_motion_latent(&z_t_motion, &batch.scale_gt, &batch.rig, &batch.anchors)
            {
                if cycle {
                    let dpa = self.dpa.as_ref().unwrap();
                    let conditions = self.fixed_conditions(&decoded);
                    let mut tape = Tape::<f32>::new();
                    let mut binding = TapeBinding::new(&state.params);
                    let out = dpa.forward(&mut tape, &mut binding, &m_t, &conditions, t);
                    let refined = tape.value(out.refined).clone();
                    if let Some(guidance) = self.guidance_latent(&refined, batch, &batch.scale_gt) {
                        z_in_motion = z_in_motion.add(&guidance).expect("shapes");
                    }
                }
                line7_decoded = Some(decoded);
            }
        }

        // Line 9: joint forward.
        let mut tape = Tape::<f32>::new();
        let mut binding = TapeBinding::new(&state.params);
        let zv_node = tape.input(z_t_video);
        let zm_node = tape.input(z_in_motion);
        let out = self.mjd.forward(&mut tape, &mut binding, zv_node, zm_node, &batch.prompt, t);
        let scale_gt_tensor: Tensor<f32> = batch.scale_gt.to_tensor().cast();
        let mjd_loss = self.mjd.loss(&mut tape, &out, v_gt_video, v_gt_motion, scale_gt_tensor);

        // Lines 10-11: aligner pass conditioned on the denoiser's one-step
        // motion estimate; the predicted scale node carries gradient into the
        // depth denormalization of the conditions.
        let mut dpa_loss_val = 0.0f64;
        let total = if use_dpa {
            let dpa = self.dpa.as_ref().unwrap();
            let v_motion_value = tape.value(out.v_motion).clone();
            let z_hat_motion = one_step_denoise(&z_t_motion, &v_motion_value, t).expect("shapes");
            let scale_value = DepthScale::from_tensor(&tape.value(out.scale).cast());
            // The predicted scale enters the conditions by value only: the
            // aligner loss supervises the aligner, and the scale keeps its
            // direct Eq.-3-style regression signal (letting this gradient
            // flow measurably degraded the scale estimate at desk scale).
            let source = if cycle {
                self.decode_motion_latent(&z_hat_motion, &scale_value, &batch.rig, &batch.anchors)
                    .map(|(_, d)| d)
            } else {
                // No-cycle ablation: condition on the line-7-style decode of
                // the detached noisy latent instead of the denoised estimate.
                line7_decoded.take().or_else(|| {
                    self.decode_motion_latent(&z_t_motion, &batch.scale_gt, &batch.rig, &batch.anchors)
                        .map(|(_, d)| d)
                })
            };
            let conditions = match source {
                Some(decoded) => self.fixed_conditions(&decoded),
                None => CondSource::Fixed(Vec::new()),
            };
            let dpa_out = dpa.forward(&mut tape, &mut binding, &m_t, &conditions, t);
            let dpa_loss = dpa.loss(&mut tape, &dpa_out, v_gt_points, batch.gt_frames.clone());
            dpa_loss_val = tape.value(dpa_loss).data()[0] as f64;
            tape.add(mjd_loss, dpa_loss)
        } else {
            mjd_loss
        };

        let mjd_loss_val = tape.value(mjd_loss).data()[0] as f64;
        if !mjd_loss_val.is_finite() || !dpa_loss_val.is_finite() {
            return Err(LoopError::NanAbort {
                step: state.step,
                phase: state.phase.as_str().into(),
                loss_mjd: mjd_loss_val,
                loss_dpa: dpa_loss_val,
            });
        }

        let trainable: Box<dyn Fn(&str) -> bool> = match state.phase {
            Phase::WarmupMjd => Box::new(|name: &str| name.starts_with("mjd.")),
            _ => Box::new(|_: &str| true),
        };
        let (grad_norm, lr) = apply_update(state, &tape, total, trainable);
        Ok(StepRecord {
            step: state.step,
            phase: state.phase.as_str().into(),
            loss_mjd: mjd_loss_val,
            loss_dpa: dpa_loss_val,
            grad_norm,
            lr,
            wallclock_ms: started.elapsed().as_millis(),
        })
    }

    // -- inference -------------------------------------------------------------

    /// Draw one sample conditioned on a scene's reference frames, prompt, rig,
    /// and anchor hints, mirroring the training wiring step for step.
    pub fn sample(
        &self,
        params: &ParamStore<f32>,
        batch: &SceneBatch,
        steps: usize,
        seed: u64,
    ) -> SampleResult {
        let grid = TimeGrid::uniform(steps);
        let mut rng_v = Prng::new(seed, "sample_video");
        let mut rng_m = Prng::new(seed, "sample_motion");
        let mut rng_p = Prng::new(seed, "sample_points");
        let mut z_video = Self::randn_like(&batch.z0_video, &mut rng_v);
        Self::pin_reference_frame(&mut z_video, &batch.z0_video);
        let mut z_motion = Self::randn_like(&batch.z0_motion, &mut rng_m);
        let mut points = Self::randn_like(&batch.points0, &mut rng_p);
        let mut scale_prev: Option<DepthScale> = None;
        let cycle = self.cfg.run_loop.enable_cycle && self.dpa.is_some();

        for (t_cur, t_next) in grid.pairs() {
            // (a) refined guidance from the previous step's scale estimate.
            let mut z_in_motion = z_motion.clone();
            if cycle {
                if let Some(scale) = &scale_prev {
                    if let Some((_, decoded)) =
                        self.decode_motion_latent(&z_motion, scale, &batch.rig, &batch.anchors)
                    {
                        let dpa = self.dpa.as_ref().unwrap();
                        let conditions = self.fixed_conditions(&decoded);
                        let mut tape = Tape::<f32>::new();
                        let mut binding = TapeBinding::new(params);
                        let out = dpa.forward(&mut tape, &mut binding, &points, &conditions, t_cur);
                        let refined = tape.value(out.refined).clone();
                        if let Some(guidance) = self.guidance_latent(&refined, batch, scale) {
                            z_in_motion = z_in_motion.add(&guidance).expect("shapes");
                        }
                    }
                }
            }

            // (b) joint denoiser.
            let mut tape = Tape::<f32>::new();
            let mut binding = TapeBinding::new(params);
            let zv_node = tape.input(z_video.clone());
            let zm_node = tape.input(z_in_motion);
            let out = self.mjd.forward(&mut tape, &mut binding, zv_node, zm_node, &batch.prompt, t_cur);
            let v_video = tape.value(out.v_video).clone();
            let v_motion = tape.value(out.v_motion).clone();
            let scale_now = DepthScale::from_tensor(&tape.value(out.scale).cast());

            // (c) Euler step both latents; the reference frame stays pinned.
            z_video = euler_step(&z_video, &v_video, t_cur, t_next).expect("grid");
            Self::pin_reference_frame(&mut z_video, &batch.z0_video);
            let z_motion_old = z_motion.clone();
            z_motion = euler_step(&z_motion, &v_motion, t_cur, t_next).expect("grid");

            // (d) aligner velocity on the denoised motion estimate.
            if let Some(dpa) = &self.dpa {
                let z_hat = one_step_denoise(&z_motion_old, &v_motion, t_cur).expect("shapes");
                let conditions = match self.decode_motion_latent(&z_hat, &scale_now, &batch.rig, &batch.anchors)
                {
                    Some((_, decoded)) => self.fixed_conditions(&decoded),
                    None => CondSource::Fixed(Vec::new()),
                };
                let mut tape = Tape::<f32>::new();
                let mut binding = TapeBinding::new(params);
                let dpa_out = dpa.forward(&mut tape, &mut binding, &points, &conditions, t_cur);
                let velocity = tape.value(dpa_out.velocity).clone();
                points = euler_step(&points, &velocity, t_cur, t_next).expect("grid");
            }

            scale_prev = Some(scale_now);
        }

        let scale = scale_prev.expect("at least one step");
        let videos = decode_latent(&z_video, &self.cfg.latent_codec(), self.cfg.data.frames);
        let pseudo_pixels = decode_latent(&z_motion, &self.cfg.latent_codec(), self.cfg.data.frames);
        let pseudo = PseudoVideo { data: pseudo_pixels, splat_radius: self.cfg.data.splat_radius };
        let coarse = decode(&pseudo, &scale, &batch.rig, Some(&batch.anchors), &self.codec_params)
            .expect("hinted decode cannot fail");
        let (n, k) = (batch.tracks.frames(), batch.tracks.points());
        let fused_frames: Vec<Vec<Vec3>> = (0..n)
            .map(|f| {
                (0..k)
                    .map(|kk| {
                        let i = f * k + kk;
                        self.denormalize_point(Vec3::new(
                            points.at(&[i, 0]) as f64,
                            points.at(&[i, 1]) as f64,
                            points.at(&[i, 2]) as f64,
                        ))
                    })
                    .collect()
            })
            .collect();
        let fused = TrackSet::from_points(&fused_frames).expect("finite outputs");
        SampleResult { videos, pseudo, fused, coarse, scale }
    }

    /// Align each view's coarse tracks through the aligner: the view's
    /// decoded points enter as the noisy set at a fixed mid time, conditioned
    /// on every view's decoded points, and the one-step refinement pulls them
    /// toward the shared aligned estimate. Deterministic; the per-view
    /// outputs keep (frame, track) identity for the pairwise consistency
    /// metrics while reflecting how well the aligner fuses the views.
    pub fn refine_per_view(
        &self,
        params: &ParamStore<f32>,
        batch: &SceneBatch,
        coarse: &DecodedTracks,
        _steps: usize,
        _seed: u64,
    ) -> Tensor<f64> {
        const ALIGN_T: f64 = 0.4;
        let dpa = self.dpa.as_ref().expect("alignment needs the aligner");
        let (n, k) = (batch.tracks.frames(), batch.tracks.points());
        let views = coarse.views.len();
        let conditions = self.fixed_conditions(coarse);
        let mut out = Tensor::<f64>::zeros(&[views, n, k, 3]);
        for (view, dv) in coarse.views.iter().enumerate() {
            let noisy = Tensor::<f32>::from_fn(&[n * k, 3], |idx| {
                let (i, c) = (idx / 3, idx % 3);
                let p = self.normalize_point(dv.point(i / k, i % k));
                p.to_array()[c] as f32
            });
            let mut tape = Tape::<f32>::new();
            let mut binding = TapeBinding::new(params);
            let dpa_out = dpa.forward(&mut tape, &mut binding, &noisy, &conditions, ALIGN_T);
            let refined = tape.value(dpa_out.refined).clone();
            for frame in 0..n {
                for kk in 0..k {
                    let i = frame * k + kk;
                    let world = self.denormalize_point(Vec3::new(
                        refined.at(&[i, 0]) as f64,
                        refined.at(&[i, 1]) as f64,
                        refined.at(&[i, 2]) as f64,
                    ));
                    out.set(&[view, frame, kk, 0], world.x);
                    out.set(&[view, frame, kk, 1], world.y);
                    out.set(&[view, frame, kk, 2], world.z);
                }
            }
        }
        out
    }
}

/// Clip, update, and return (pre-clip grad norm, lr used).
fn apply_update(
    state: &mut TrainState,
    tape: &Tape<f32>,
    loss: smv4d_nn::tape::NodeId,
    trainable: impl Fn(&str) -> bool,
) -> (f64, f64) {
    let grads = tape.backward(loss);
    let named: Vec<(String, Tensor<f32>)> = tape
        .param_nodes()
        .iter()
        .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
        .collect();
    let mut sq = 0.0f64;
    for (name, g) in &named {
        if trainable(name) {
            sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let lr = state.opt.current_lr();
    state.opt.apply(&mut state.params, &named, trainable);
    (sq.sqrt(), lr)
}

// -- dataset loading ----------------------------------------------------------

pub struct Dataset {
    pub train: Vec<SceneBatch>,
    pub val: Vec<SceneBatch>,
    pub test: Vec<SceneBatch>,
}

pub fn load_dataset(pipeline: &Pipeline, root: &Path) -> Result<Dataset, LoopError> {
    let splits = read_splits(root)?;
    let load = |ids: &[String]| -> Result<Vec<SceneBatch>, LoopError> {
        ids.iter()
            .map(|id| {
                let scene = read_scene(root, id)?;
                pipeline.prepare_scene(id, &scene)
            })
            .collect()
    };
    Ok(Dataset { train: load(&splits.train)?, val: load(&splits.val)?, test: load(&splits.test)? })
}

/// Expand multi-view batches into per-view batches for the single-view variant.
pub fn expand_single_view(pipeline: &Pipeline, batches: &[SceneBatch]) -> Vec<SceneBatch> {
    let mut out = Vec::with_capacity(batches.len() * pipeline.cfg.data.views);
    for batch in batches {
        for view in 0..pipeline.cfg.data.views {
            out.push(pipeline.slice_view(batch, view));
        }
    }
    out
}

// -- phase runner ---------------------------------------------------------------

pub struct RunArtifacts {
    pub state: TrainState,
    pub log_path: std::path::PathBuf,
}

/// Warm-up the aligner, warm-up the denoiser, then run the joint phase;
/// checkpoints land at phase boundaries and at the end.
pub fn run_phases(
    pipeline: &Pipeline,
    train_scenes: &[SceneBatch],
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<RunArtifacts, LoopError> {
    std::fs::create_dir_all(out_dir).map_err(|e| {
        LoopError::Data(DataError::Io { path: out_dir.to_path_buf(), source: e })
    })?;
    if train_scenes.is_empty() {
        return Err(LoopError::EmptySplit(out_dir.display().to_string()));
    }
    let cfg = &pipeline.cfg;
    let total_steps = cfg.run_loop.phase_a_steps + cfg.run_loop.phase_b_steps + cfg.run_loop.phase_c_steps;
    let resumed = resume.is_some();
    let mut state = resume.unwrap_or_else(|| TrainState {
        step: 0,
        phase: Phase::WarmupDpa,
        params: pipeline.init_params(cfg.seed),
        opt: Optimizer::new(cfg.run_loop.lr, cfg.run_loop.weight_decay, cfg.run_loop.clip_norm, total_steps),
        rngs: RngSet::new(cfg.seed),
    });
    let log_path = out_dir.join("train_log.jsonl");

    let phase_of = |step: usize| -> Phase {
        if step < cfg.run_loop.phase_a_steps {
            Phase::WarmupDpa
        } else if step < cfg.run_loop.phase_a_steps + cfg.run_loop.phase_b_steps {
            Phase::WarmupMjd
        } else {
            Phase::Joint
        }
    };

    let mut phase_initialized = resumed;
    while state.step < total_steps {
        let phase = phase_of(state.step);
        if phase != state.phase || !phase_initialized {
            state.phase = phase;
            state.rngs = RngSet::for_phase(cfg.seed, phase.as_str());
            phase_initialized = true;
        }
        // Skip the aligner warm-up entirely when the aligner is disabled.
        if state.phase == Phase::WarmupDpa && pipeline.dpa.is_none() {
            state.step = cfg.run_loop.phase_a_steps;
            continue;
        }
        let scene_idx = state.rngs.data.below(train_scenes.len());
        let batch = &train_scenes[scene_idx];
        state.opt.step = state.step;
        let record = match state.phase {
            Phase::WarmupDpa => pipeline.dpa_warmup_step(&mut state, batch)?,
            Phase::WarmupMjd => pipeline.joint_step(&mut state, batch, false)?,
            Phase::Joint => pipeline.joint_step(&mut state, batch, true)?,
        };
        if cfg.run_loop.log_every > 0 && state.step % cfg.run_loop.log_every == 0 {
            smv4d_core::dataset::append_jsonl(&log_path, &record)?;
        }
        state.step += 1;
        // Phase-boundary checkpoints.
        let next_phase = if state.step < total_steps { phase_of(state.step) } else { state.phase };
        if next_phase != state.phase || state.step == total_steps {
            let name = format!("ckpt_{}_{:06}.smv4d", state.phase.as_str(), state.step);
            save_state(pipeline, &state, &out_dir.join(name))?;
        }
    }
    save_state(pipeline, &state, &out_dir.join("ckpt_final.smv4d"))?;
    Ok(RunArtifacts { state, log_path })
}

pub fn save_state(pipeline: &Pipeline, state: &TrainState, path: &Path) -> Result<(), LoopError> {
    let meta = CkptMeta {
        step: state.step,
        phase: state.phase.as_str().to_string(),
        seed: pipeline.cfg.seed,
        optimizer_step: state.opt.step,
        rng_states: state.rngs.states(),
        config_json: serde_json::to_string(&pipeline.cfg).expect("config serializes"),
    };
    checkpoint::save(path, &meta, &state.params, Some(&state.opt))?;
    Ok(())
}

pub fn load_state(pipeline: &Pipeline, path: &Path) -> Result<TrainState, LoopError> {
    let ckpt = checkpoint::load(path)?;
    let stored_cfg: RunConfig = serde_json::from_str(&ckpt.meta.config_json)
        .map_err(|e| LoopError::CheckpointMismatch(format!("stored config unreadable: {e}")))?;
    if stored_cfg.mjd != pipeline.cfg.mjd || stored_cfg.dpa != pipeline.cfg.dpa || stored_cfg.data != pipeline.cfg.data
    {
        return Err(LoopError::CheckpointMismatch(
            "checkpoint was trained with a different model/data configuration".into(),
        ));
    }
    let phase = match ckpt.meta.phase.as_str() {
        "warmup_dpa" => Phase::WarmupDpa,
        "warmup_mjd" => Phase::WarmupMjd,
        _ => Phase::Joint,
    };
    let cfg = &pipeline.cfg;
    let total_steps_resume = cfg.run_loop.phase_a_steps + cfg.run_loop.phase_b_steps + cfg.run_loop.phase_c_steps;
    let mut opt =
        Optimizer::new(cfg.run_loop.lr, cfg.run_loop.weight_decay, cfg.run_loop.clip_norm, total_steps_resume);
    opt.step = ckpt.meta.optimizer_step;
    opt.restore_moments(ckpt.moments_m, ckpt.moments_v, ckpt.update_counts);
    Ok(TrainState {
        step: ckpt.meta.step,
        phase,
        params: ckpt.params,
        opt,
        rngs: RngSet::restore(ckpt.meta.seed, &ckpt.meta.rng_states),
    })
}
