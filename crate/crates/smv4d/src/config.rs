//! Run configuration: one JSON document with nested sections per subsystem.
//! Unknown keys are rejected; defaults are fully materialized and echoed into
//! every run directory. CLI flags override keys through dotted paths
//! (`--mjd.dim=64`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use smv4d_core::synthdata::SceneParams;
use smv4d_core::trackcodec::{CodecParams, Representation};
use smv4d_nn::dpa::DpaConfig;
use smv4d_nn::latent::LatentCodecConfig;
use smv4d_nn::mjd::MjdConfig;

pub const CONFIG_FORMAT_VERSION: &str = "SMV4D-CFG-1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("bad config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown preset '{0}' (expected toy, desk, or full)")]
    UnknownPreset(String),
    #[error("bad override '{0}': expected key=value")]
    BadOverride(String),
    #[error("override path '{0}' does not exist")]
    BadPath(String),
    #[error("config invariant violated: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub scenes: usize,
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: usize,
    pub splat_radius: u32,
    pub object_scale: f64,
    pub workspace_half: f64,
    pub train_ratio: f64,
    pub tool_points: usize,
    pub hand_points: usize,
    pub target_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    /// Inference Euler steps on the uniform grid.
    pub steps: usize,
    /// Optional sampling-seed override; the global seed otherwise.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MjdSection {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub text_len: usize,
    pub scale_tokens: usize,
    pub register_tokens: usize,
    pub ffn_mult: usize,
    pub r_n: usize,
    pub r_h: usize,
    pub r_w: usize,
    pub share_motion_modulator: bool,
    pub gate_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpaSection {
    pub enabled: bool,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub window: usize,
    /// Voxel size in normalized workspace units.
    pub voxel: f64,
    pub cap_per_frame: usize,
    pub fourier_levels: usize,
    pub ffn_mult: usize,
    /// Phase-A condition noise, meters.
    pub cond_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub tau_bg: f64,
    pub tau_color: f64,
    pub search_radius: f64,
    pub representation: Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub phase_a_steps: usize,
    pub phase_b_steps: usize,
    pub phase_c_steps: usize,
    pub enable_cycle: bool,
    pub guidance_gain: f64,
    pub single_view: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub pi_threshold: f64,
    pub photometric_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: String,
    pub seed: u64,
    pub data: DataSection,
    pub flow: FlowSection,
    pub mjd: MjdSection,
    pub dpa: DpaSection,
    pub codec: CodecSection,
    #[serde(rename = "loop")]
    pub run_loop: LoopSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    /// Desk-runnable default: small enough to train on a laptop CPU in
    /// minutes while exercising every pipeline component.
    pub fn toy() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION.to_string(),
            seed: 7,
            data: DataSection {
                scenes: 80,
                views: 3,
                frames: 5,
                height: 40,
                width: 40,
                tracks: 8,
                splat_radius: 1,
                object_scale: 2.4,
                workspace_half: 0.2,
                train_ratio: 0.9,
                tool_points: 700,
                hand_points: 260,
                target_points: 400,
            },
            flow: FlowSection { steps: 20, seed: None },
            mjd: MjdSection {
                dim: 48,
                blocks: 2,
                heads: 4,
                patch: 2,
                text_len: 8,
                scale_tokens: 2,
                register_tokens: 6,
                ffn_mult: 4,
                r_n: 1,
                r_h: 4,
                r_w: 4,
                share_motion_modulator: false,
                gate_init: 0.0,
            },
            dpa: DpaSection {
                enabled: true,
                dim: 48,
                blocks: 2,
                heads: 4,
                window: 16,
                voxel: 0.05,
                cap_per_frame: 64,
                fourier_levels: 4,
                ffn_mult: 4,
                cond_noise: 0.02,
            },
            codec: CodecSection {
                tau_bg: 0.02,
                tau_color: 0.02,
                search_radius: 12.0,
                representation: Representation::PointTracks,
            },
            run_loop: LoopSection {
                phase_a_steps: 1000,
                phase_b_steps: 1000,
                phase_c_steps: 3000,
                enable_cycle: true,
                guidance_gain: 1.0,
                single_view: false,
                lr: 1e-3,
                weight_decay: 0.01,
                clip_norm: 1.0,
                log_every: 1,
            },
            metrics: MetricsSection { pi_threshold: 0.25, photometric_tau: 0.1 },
        }
    }

    /// Larger desk configuration (the published toy sizing).
    pub fn desk() -> Self {
        let mut cfg = Self::toy();
        cfg.data = DataSection {
            scenes: 128,
            views: 3,
            frames: 9,
            height: 64,
            width: 64,
            tracks: 24,
            splat_radius: 2,
            object_scale: 2.4,
            workspace_half: 0.2,
            train_ratio: 0.9,
            tool_points: 1200,
            hand_points: 400,
            target_points: 600,
        };
        cfg.mjd = MjdSection {
            dim: 128,
            blocks: 4,
            heads: 4,
            patch: 2,
            text_len: 16,
            scale_tokens: 2,
            register_tokens: 6,
            ffn_mult: 4,
            r_n: 1,
            r_h: 4,
            r_w: 4,
            share_motion_modulator: false,
            gate_init: 0.0,
        };
        cfg.dpa = DpaSection {
            enabled: true,
            dim: 128,
            blocks: 4,
            heads: 4,
            window: 32,
            voxel: 0.05,
            cap_per_frame: 384,
            fourier_levels: 6,
            ffn_mult: 4,
            cond_noise: 0.02,
        };
        cfg.run_loop.phase_a_steps = 1000;
        cfg.run_loop.phase_b_steps = 2000;
        cfg.run_loop.phase_c_steps = 6000;
        cfg
    }

    /// Published full-scale reference sizes. Constructible for shape and
    /// token-count arithmetic; far outside CPU training budgets.
    pub fn full_reference() -> Self {
        let mut cfg = Self::desk();
        cfg.data.views = 3;
        cfg.data.frames = 49;
        cfg.data.height = 480;
        cfg.data.width = 704;
        cfg.data.tracks = 1600;
        cfg.mjd.dim = 3072;
        cfg.mjd.blocks = 30;
        cfg.mjd.heads = 24;
        cfg.mjd.text_len = 512;
        cfg.mjd.r_n = 4;
        cfg.mjd.r_h = 16;
        cfg.mjd.r_w = 16;
        cfg.dpa.cap_per_frame = 1600;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full_reference()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Apply a dotted-path override (`mjd.dim=64`). The value is parsed as
    /// JSON when possible, else taken as a string.
    pub fn with_override(&self, spec: &str) -> Result<Self, ConfigError> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let mut doc = serde_json::to_value(self)?;
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments.split_last().expect("split_once guarantees content");
        let mut cursor = &mut doc;
        for seg in parents {
            cursor = cursor
                .as_object_mut()
                .and_then(|m| m.get_mut(*seg))
                .ok_or_else(|| ConfigError::BadPath(path.to_string()))?;
        }
        let slot = cursor
            .as_object_mut()
            .and_then(|m| m.get_mut(*last))
            .ok_or_else(|| ConfigError::BadPath(path.to_string()))?;
        *slot = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let cfg: RunConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(ConfigError::Invalid(format!(
                "format_version '{}' != '{CONFIG_FORMAT_VERSION}'",
                self.format_version
            )));
        }
        if self.mjd.dim % self.mjd.heads != 0 {
            return Err(ConfigError::Invalid("mjd.dim must divide by mjd.heads".into()));
        }
        if self.dpa.dim % self.dpa.heads != 0 {
            return Err(ConfigError::Invalid("dpa.dim must divide by dpa.heads".into()));
        }
        if self.dpa.window < 8 {
            return Err(ConfigError::Invalid("dpa.window must be at least 8".into()));
        }
        if self.dpa.cap_per_frame < self.data.tracks {
            return Err(ConfigError::Invalid("dpa.cap_per_frame must cover data.tracks".into()));
        }
        if (self.data.frames - 1) % self.mjd.r_n != 0 {
            return Err(ConfigError::Invalid("data.frames-1 must divide by mjd.r_n".into()));
        }
        if self.data.height % (self.mjd.r_h * self.mjd.patch) != 0
            || self.data.width % (self.mjd.r_w * self.mjd.patch) != 0
        {
            return Err(ConfigError::Invalid(
                "resolution must divide by compression ratio times patch".into(),
            ));
        }
        Ok(())
    }

    /// The effective view count after the single-view ablation switch.
    pub fn model_views(&self) -> usize {
        if self.run_loop.single_view {
            1
        } else {
            self.data.views
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            views: self.data.views,
            frames: self.data.frames,
            height: self.data.height,
            width: self.data.width,
            tracks: self.data.tracks,
            tool_points: self.data.tool_points,
            hand_points: self.data.hand_points,
            target_points: self.data.target_points,
            splat_radius: self.data.splat_radius,
            workspace_center: [0.0, 0.0, 0.0],
            workspace_half: self.data.workspace_half,
            object_scale: self.data.object_scale,
        }
    }

    pub fn codec_params(&self) -> CodecParams {
        CodecParams {
            splat_radius: self.data.splat_radius,
            tau_bg: self.codec.tau_bg,
            tau_color: self.codec.tau_color,
            search_radius: self.codec.search_radius,
            representation: self.codec.representation,
        }
    }

    pub fn latent_codec(&self) -> LatentCodecConfig {
        LatentCodecConfig { r_n: self.mjd.r_n, r_h: self.mjd.r_h, r_w: self.mjd.r_w }
    }

    pub fn mjd_config(&self) -> MjdConfig {
        MjdConfig {
            views: self.model_views(),
            frames: self.data.frames,
            height: self.data.height,
            width: self.data.width,
            codec: self.latent_codec(),
            dim: self.mjd.dim,
            blocks: self.mjd.blocks,
            heads: self.mjd.heads,
            patch: self.mjd.patch,
            text_len: self.mjd.text_len,
            vocab: smv4d_core::synthdata::vocabulary().len(),
            scale_tokens: self.mjd.scale_tokens,
            register_tokens: self.mjd.register_tokens,
            ffn_mult: self.mjd.ffn_mult,
            share_motion_modulator: self.mjd.share_motion_modulator,
            gate_init: self.mjd.gate_init,
        }
    }

    pub fn dpa_config(&self) -> DpaConfig {
        DpaConfig {
            frames: self.data.frames,
            tracks: self.data.tracks,
            dim: self.dpa.dim,
            blocks: self.dpa.blocks,
            heads: self.dpa.heads,
            window: self.dpa.window,
            voxel: self.dpa.voxel,
            cap_per_frame: self.dpa.cap_per_frame,
            fourier_levels: self.dpa.fourier_levels,
            ffn_mult: self.dpa.ffn_mult,
            gate_init: 0.0,
            max_views: self.data.views,
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        self.flow.seed.unwrap_or(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["toy", "desk", "full"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(RunConfig::preset("bogus").is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = RunConfig::toy();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);

        let with_unknown = text.replace("\"seed\": 7", "\"seed\": 7, \"bogus_key\": 1");
        assert!(RunConfig::from_json(&with_unknown).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::toy();
        let cfg2 = cfg.with_override("mjd.dim=64").unwrap();
        assert_eq!(cfg2.mjd.dim, 64);
        let cfg3 = cfg2.with_override("loop.enable_cycle=false").unwrap();
        assert!(!cfg3.run_loop.enable_cycle);
        let cfg4 = cfg3.with_override("codec.representation=\"tracking_video\"").unwrap();
        assert_eq!(cfg4.codec.representation, Representation::TrackingVideo);
        assert!(cfg.with_override("mjd.nonexistent=3").is_err());
        assert!(cfg.with_override("mjd.dim=63").is_err(), "invariant check after override");
    }
}
