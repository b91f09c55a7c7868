//! Multi-view joint denoiser over video and motion latents.
//!
//! One token sequence holds both modalities plus learnable scale and register
//! tokens: [video tokens | motion tokens | scale | register]. Every block runs
//! per-modality adaptive modulation, inter-view attention (tokens of the same
//! latent frame across views), intra-view attention (tokens of the same view
//! across frames), text cross-attention, and an MLP, each gated. Scale and
//! register tokens join every attention group as shared copies whose outputs
//! are averaged, so they see the whole sequence in both groupings. The scale
//! head reads the averaged scale tokens and emits per-view (min, max) through
//! an exp parametrization that keeps max above min.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use smv4d_core::rng::Prng;
use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

use crate::embedding::{timestep_features, TIMESTEP_FEATURES};
use crate::latent::{patchify_plan, unpatchify_plan, LatentCodecConfig};
use crate::params::{trunc_normal, ParamStore, TapeBinding};
use crate::tape::{AttnSpan, ElemPerm, NodeId, RowMap, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MjdConfig {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec: LatentCodecConfig,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub scale_tokens: usize,
    pub register_tokens: usize,
    pub ffn_mult: usize,
    /// Ablation switch: motion tokens reuse the video modulator parameters.
    pub share_motion_modulator: bool,
    pub gate_init: f64,
}

impl MjdConfig {
    pub fn latent_frames(&self) -> usize {
        self.codec.latent_frames(self.frames)
    }
    pub fn latent_height(&self) -> usize {
        self.height / self.codec.r_h
    }
    pub fn latent_width(&self) -> usize {
        self.width / self.codec.r_w
    }
    pub fn token_rows(&self) -> usize {
        self.latent_height() / self.patch
    }
    pub fn token_cols(&self) -> usize {
        self.latent_width() / self.patch
    }
    /// Tokens per modality: V * NL * (h/p) * (w/p).
    pub fn tokens_per_modality(&self) -> usize {
        self.views * self.latent_frames() * self.token_rows() * self.token_cols()
    }
    pub fn seq_len(&self) -> usize {
        2 * self.tokens_per_modality() + self.scale_tokens + self.register_tokens
    }
    pub fn patch_dim(&self) -> usize {
        self.codec.channels() * self.patch * self.patch
    }
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![
            self.views,
            self.latent_frames(),
            self.latent_height(),
            self.latent_width(),
            self.codec.channels(),
        ]
    }
    /// Group length of inter-view attention (one latent frame, both
    /// modalities, all views, plus shared scale/register copies).
    pub fn inter_group_len(&self) -> usize {
        2 * self.views * self.token_rows() * self.token_cols() + self.scale_tokens + self.register_tokens
    }
    /// Group length of intra-view attention (one view, both modalities, all
    /// latent frames, plus shared copies).
    pub fn intra_group_len(&self) -> usize {
        2 * self.latent_frames() * self.token_rows() * self.token_cols()
            + self.scale_tokens
            + self.register_tokens
    }

    pub fn validate(&self) {
        assert!(self.dim % self.heads == 0, "dim must divide into heads");
        assert!(self.latent_height() % self.patch == 0, "latent height vs patch");
        assert!(self.latent_width() % self.patch == 0, "latent width vs patch");
        assert!((self.frames - 1) % self.codec.r_n == 0, "frames-1 vs temporal ratio");
        assert!(self.scale_tokens >= 1);
    }
}

/// Grouping plans: a gather into group-contiguous order, attention spans, and
/// the inverse scatter that averages the duplicated scale/register copies.
struct AttnPlan {
    gather: Arc<RowMap>,
    scatter: Arc<RowMap>,
    spans: Arc<Vec<AttnSpan>>,
}

pub struct MjdModel {
    pub cfg: MjdConfig,
    patchify: Arc<ElemPerm>,
    unpatchify: Arc<ElemPerm>,
    pos_plans: [Arc<RowMap>; 5], // view, time, h, w, modality (over 2*Tm rows)
    assemble_video: Arc<RowMap>,
    assemble_motion: Arc<RowMap>,
    assemble_scale: Arc<RowMap>,
    assemble_register: Arc<RowMap>,
    inter: AttnPlan,
    intra: AttnPlan,
    video_rows: Arc<RowMap>,
    motion_rows: Arc<RowMap>,
    scale_mean: Arc<RowMap>,
    expand_mod: [Vec<Arc<RowMap>>; 2], // per sublayer: [video-source plan, motion-source plan]
}

impl MjdModel {
    pub fn new(cfg: MjdConfig) -> Self {
        cfg.validate();
        let tm = cfg.tokens_per_modality();
        let (nl, ht, wt, v) = (cfg.latent_frames(), cfg.token_rows(), cfg.token_cols(), cfg.views);

        let patchify = patchify_plan(&cfg.latent_shape(), cfg.patch).expect("validated");
        let unpatchify = unpatchify_plan(&cfg.latent_shape(), cfg.patch).expect("validated");

        // Positional gathers over the concatenated 2*Tm modality tokens.
        let token_of = |vi: usize, n: usize, y: usize, x: usize| ((vi * nl + n) * ht + y) * wt + x;
        let mut view_idx = vec![0usize; 2 * tm];
        let mut time_idx = vec![0usize; 2 * tm];
        let mut h_idx = vec![0usize; 2 * tm];
        let mut w_idx = vec![0usize; 2 * tm];
        let mut mod_idx = vec![0usize; 2 * tm];
        for m in 0..2 {
            for vi in 0..v {
                for n in 0..nl {
                    for y in 0..ht {
                        for x in 0..wt {
                            let row = m * tm + token_of(vi, n, y, x);
                            view_idx[row] = vi;
                            time_idx[row] = n;
                            h_idx[row] = y;
                            w_idx[row] = x;
                            mod_idx[row] = m;
                        }
                    }
                }
            }
        }
        let pos_plans = [
            Arc::new(RowMap::gather(&view_idx, v)),
            Arc::new(RowMap::gather(&time_idx, nl)),
            Arc::new(RowMap::gather(&h_idx, ht)),
            Arc::new(RowMap::gather(&w_idx, wt)),
            Arc::new(RowMap::gather(&mod_idx, 2)),
        ];

        // Sequence assembly: tokens into [video | motion | scale | register].
        let seq = cfg.seq_len();
        let place = |offset: usize, rows: usize, in_rows: usize| {
            Arc::new(RowMap {
                in_rows,
                out_rows: seq,
                entries: (0..rows).map(|r| ((offset + r) as u32, r as u32, 1.0)).collect(),
            })
        };
        let assemble_video = place(0, tm, tm);
        let assemble_motion = place(tm, tm, tm);
        let assemble_scale = place(2 * tm, cfg.scale_tokens, cfg.scale_tokens);
        let assemble_register = place(2 * tm + cfg.scale_tokens, cfg.register_tokens, cfg.register_tokens);

        // Inter-view grouping: one group per latent frame.
        let extra = cfg.scale_tokens + cfg.register_tokens;
        let inter = {
            let glen = cfg.inter_group_len();
            let mut gather_entries = Vec::with_capacity(nl * glen);
            let mut scatter_entries = Vec::with_capacity(nl * glen);
            let mut spans = Vec::with_capacity(nl);
            let mut dst = 0u32;
            for n in 0..nl {
                let g0 = dst as usize;
                for m in 0..2 {
                    for vi in 0..v {
                        for y in 0..ht {
                            for x in 0..wt {
                                let src = (m * tm + token_of(vi, n, y, x)) as u32;
                                gather_entries.push((dst, src, 1.0));
                                scatter_entries.push((src, dst, 1.0));
                                dst += 1;
                            }
                        }
                    }
                }
                for e in 0..extra {
                    let src = (2 * tm + e) as u32;
                    gather_entries.push((dst, src, 1.0));
                    scatter_entries.push((src, dst, 1.0 / nl as f64));
                    dst += 1;
                }
                spans.push(AttnSpan { q0: g0, q1: dst as usize, k0: g0, k1: dst as usize });
            }
            AttnPlan {
                gather: Arc::new(RowMap { in_rows: seq, out_rows: nl * glen, entries: gather_entries }),
                scatter: Arc::new(RowMap { in_rows: nl * glen, out_rows: seq, entries: scatter_entries }),
                spans: Arc::new(spans),
            }
        };

        // Intra-view grouping: one group per view.
        let intra = {
            let glen = cfg.intra_group_len();
            let mut gather_entries = Vec::with_capacity(v * glen);
            let mut scatter_entries = Vec::with_capacity(v * glen);
            let mut spans = Vec::with_capacity(v);
            let mut dst = 0u32;
            for vi in 0..v {
                let g0 = dst as usize;
                for m in 0..2 {
                    for n in 0..nl {
                        for y in 0..ht {
                            for x in 0..wt {
                                let src = (m * tm + token_of(vi, n, y, x)) as u32;
                                gather_entries.push((dst, src, 1.0));
                                scatter_entries.push((src, dst, 1.0));
                                dst += 1;
                            }
                        }
                    }
                }
                for e in 0..extra {
                    let src = (2 * tm + e) as u32;
                    gather_entries.push((dst, src, 1.0));
                    scatter_entries.push((src, dst, 1.0 / v as f64));
                    dst += 1;
                }
                spans.push(AttnSpan { q0: g0, q1: dst as usize, k0: g0, k1: dst as usize });
            }
            AttnPlan {
                gather: Arc::new(RowMap { in_rows: seq, out_rows: v * glen, entries: gather_entries }),
                scatter: Arc::new(RowMap { in_rows: v * glen, out_rows: seq, entries: scatter_entries }),
                spans: Arc::new(spans),
            }
        };

        let video_rows = Arc::new(RowMap::gather(&(0..tm).collect::<Vec<_>>(), seq));
        let motion_rows = Arc::new(RowMap::gather(&(tm..2 * tm).collect::<Vec<_>>(), seq));
        let scale_mean = Arc::new(RowMap {
            in_rows: seq,
            out_rows: 1,
            entries: (0..cfg.scale_tokens)
                .map(|i| (0u32, (2 * tm + i) as u32, 1.0 / cfg.scale_tokens as f64))
                .collect(),
        });

        // Modulation expansion: sublayer rows of the [12, d] modulation matrix
        // broadcast over the segments that use each modality's modulator.
        // Video modulator also covers scale/register rows.
        let expand_from_video: Vec<Arc<RowMap>> = (0..12)
            .map(|row| {
                let mut entries: Vec<(u32, u32, f64)> =
                    (0..tm).map(|r| (r as u32, row as u32, 1.0)).collect();
                entries.extend((2 * tm..seq).map(|r| (r as u32, row as u32, 1.0)));
                Arc::new(RowMap { in_rows: 12, out_rows: seq, entries })
            })
            .collect();
        let expand_from_motion: Vec<Arc<RowMap>> = (0..12)
            .map(|row| {
                let entries: Vec<(u32, u32, f64)> =
                    (tm..2 * tm).map(|r| (r as u32, row as u32, 1.0)).collect();
                Arc::new(RowMap { in_rows: 12, out_rows: seq, entries })
            })
            .collect();

        Self {
            cfg,
            patchify,
            unpatchify,
            pos_plans,
            assemble_video,
            assemble_motion,
            assemble_scale,
            assemble_register,
            inter,
            intra,
            video_rows,
            motion_rows,
            scale_mean,
            expand_mod: [expand_from_video, expand_from_motion],
        }
    }

    // -- parameters -----------------------------------------------------------

    pub fn init_params(&self, store: &mut ParamStore<f32>, rng: &mut Prng) {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let pd = cfg.patch_dim();
        let sigma = 0.02;
        let tn = |shape: &[usize], rng: &mut Prng| trunc_normal::<f32>(shape, sigma, rng);

        store.insert("mjd.embed.video.w", tn(&[pd, d], rng));
        store.insert("mjd.embed.video.b", Tensor::zeros(&[d]));
        store.insert("mjd.embed.motion.w", tn(&[pd, d], rng));
        store.insert("mjd.embed.motion.b", Tensor::zeros(&[d]));
        store.insert("mjd.pos.view", tn(&[cfg.views, d], rng));
        store.insert("mjd.pos.time", tn(&[cfg.latent_frames(), d], rng));
        store.insert("mjd.pos.h", tn(&[cfg.token_rows(), d], rng));
        store.insert("mjd.pos.w", tn(&[cfg.token_cols(), d], rng));
        store.insert("mjd.pos.modality", tn(&[2, d], rng));
        store.insert("mjd.text.embed", tn(&[cfg.vocab, d], rng));
        store.insert("mjd.text.pos", tn(&[cfg.text_len, d], rng));
        store.insert("mjd.tokens.scale", tn(&[cfg.scale_tokens, d], rng));
        store.insert("mjd.tokens.register", tn(&[cfg.register_tokens, d], rng));
        store.insert("mjd.tmlp.w1", tn(&[TIMESTEP_FEATURES, d], rng));
        store.insert("mjd.tmlp.b1", Tensor::zeros(&[d]));
        store.insert("mjd.tmlp.w2", tn(&[d, d], rng));
        store.insert("mjd.tmlp.b2", Tensor::zeros(&[d]));

        for b in 0..cfg.blocks {
            let p = format!("mjd.block{b}");
            // Modulation heads start at zero: identity modulation, zero gates
            // (plus the configured gate bias).
            let mut mod_bias = Tensor::zeros(&[12 * d]);
            for sub in 0..4 {
                let gate_row = sub * 3 + 2;
                for c in 0..d {
                    mod_bias.data_mut()[gate_row * d + c] = cfg.gate_init as f32;
                }
            }
            store.insert(&format!("{p}.mod.video.w"), Tensor::zeros(&[d, 12 * d]));
            store.insert(&format!("{p}.mod.video.b"), mod_bias.clone());
            if !cfg.share_motion_modulator {
                store.insert(&format!("{p}.mod.motion.w"), Tensor::zeros(&[d, 12 * d]));
                store.insert(&format!("{p}.mod.motion.b"), mod_bias.clone());
            }
            for attn in ["inter", "intra", "cross"] {
                for proj in ["q", "k", "v", "o"] {
                    store.insert(&format!("{p}.{attn}.w{proj}"), tn(&[d, d], rng));
                    store.insert(&format!("{p}.{attn}.b{proj}"), Tensor::zeros(&[d]));
                }
            }
            store.insert(&format!("{p}.ffn.w1"), tn(&[d, cfg.ffn_mult * d], rng));
            store.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.ffn_mult * d]));
            store.insert(&format!("{p}.ffn.w2"), tn(&[cfg.ffn_mult * d, d], rng));
            store.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
        }

        store.insert("mjd.final.gamma", Tensor::full(&[d], 1.0));
        store.insert("mjd.final.beta", Tensor::zeros(&[d]));
        // Output heads start at zero so initial velocities are zero and the
        // initial scale prediction is (0, 1).
        store.insert("mjd.head.video.w", Tensor::zeros(&[d, pd]));
        store.insert("mjd.head.video.b", Tensor::zeros(&[pd]));
        store.insert("mjd.head.motion.w", Tensor::zeros(&[d, pd]));
        store.insert("mjd.head.motion.b", Tensor::zeros(&[pd]));
        store.insert("mjd.head.scale.w", Tensor::zeros(&[d, cfg.views * 2]));
        store.insert("mjd.head.scale.b", Tensor::zeros(&[cfg.views * 2]));
    }

    // -- forward ---------------------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn attention_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut TapeBinding<T>,
        x_mod: NodeId,
        prefix: &str,
        plan: &AttnPlan,
    ) -> NodeId {
        let (wq, bq) = (params.get(tape, &format!("{prefix}.wq")), params.get(tape, &format!("{prefix}.bq")));
        let q = tape.linear(x_mod, wq, bq);
        let (wk, bk) = (params.get(tape, &format!("{prefix}.wk")), params.get(tape, &format!("{prefix}.bk")));
        let k = tape.linear(x_mod, wk, bk);
        let (wv, bv) = (params.get(tape, &format!("{prefix}.wv")), params.get(tape, &format!("{prefix}.bv")));
        let v = tape.linear(x_mod, wv, bv);
        let qg = tape.row_map(q, plan.gather.clone());
        let kg = tape.row_map(k, plan.gather.clone());
        let vg = tape.row_map(v, plan.gather.clone());
        let attn = tape.attention(qg, kg, vg, self.cfg.heads, plan.spans.clone());
        let merged = tape.row_map(attn, plan.scatter.clone());
        let (wo, bo) = (params.get(tape, &format!("{prefix}.wo")), params.get(tape, &format!("{prefix}.bo")));
        tape.linear(merged, wo, bo)
    }

    /// Modulation triple (scale, shift, gate) for one sublayer, expanded over
    /// the full sequence from the per-modality [12, d] modulation matrices.
    fn sublayer_modulation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        mods: &[NodeId; 2],
        sublayer: usize,
    ) -> (NodeId, NodeId, NodeId) {
        let mut parts = [None, None, None];
        for (quantity, slot) in parts.iter_mut().enumerate() {
            let row = sublayer * 3 + quantity;
            let from_video = tape.row_map(mods[0], self.expand_mod[0][row].clone());
            let from_motion = tape.row_map(mods[1], self.expand_mod[1][row].clone());
            *slot = Some(tape.add(from_video, from_motion));
        }
        (parts[0].unwrap(), parts[1].unwrap(), parts[2].unwrap())
    }

    /// LN -> scale/shift -> sublayer -> gate -> residual.
    #[allow(clippy::too_many_arguments)]
    fn gated_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut TapeBinding<T>,
        x: NodeId,
        mods: &[NodeId; 2],
        sublayer: usize,
        body: impl FnOnce(&mut Tape<T>, &mut TapeBinding<T>, &Self, NodeId) -> NodeId,
    ) -> NodeId {
        let (scale, shift, gate) = self.sublayer_modulation(tape, mods, sublayer);
        let ln = tape.layer_norm(x);
        let x_mod = tape.mod_affine(ln, scale, shift);
        let out = body(tape, params, self, x_mod);
        tape.gate_add(x, gate, out)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut TapeBinding<T>,
        z_video: NodeId,
        z_motion: NodeId,
        prompt: &[u16],
        t: f64,
    ) -> MjdOutput {
        let cfg = &self.cfg;
        assert_eq!(prompt.len(), cfg.text_len, "prompt length vs config");
        assert_eq!(tape.value(z_video).shape(), cfg.latent_shape().as_slice());
        assert_eq!(tape.value(z_motion).shape(), cfg.latent_shape().as_slice());

        // Timestep conditioning.
        let t_feats = tape.input(timestep_features::<T>(t));
        let (w1, b1) = (params.get(tape, "mjd.tmlp.w1"), params.get(tape, "mjd.tmlp.b1"));
        let h = tape.linear(t_feats, w1, b1);
        let h = tape.silu(h);
        let (w2, b2) = (params.get(tape, "mjd.tmlp.w2"), params.get(tape, "mjd.tmlp.b2"));
        let t_embed = tape.linear(h, w2, b2); // [1, d]

        // Text features.
        let text_table = params.get(tape, "mjd.text.embed");
        let ids: Vec<usize> = prompt.iter().map(|&i| i as usize).collect();
        let text_gather = Arc::new(RowMap::gather(&ids, cfg.vocab));
        let text_tok = tape.row_map(text_table, text_gather);
        let text_pos = params.get(tape, "mjd.text.pos");
        let text_feats = tape.add(text_tok, text_pos);

        // Patchify + embed + factorized positions per modality.
        let video_patches = tape.permute_elems(z_video, self.patchify.clone());
        let motion_patches = tape.permute_elems(z_motion, self.patchify.clone());
        let (wev, bev) = (params.get(tape, "mjd.embed.video.w"), params.get(tape, "mjd.embed.video.b"));
        let video_emb = tape.linear(video_patches, wev, bev);
        let (wem, bem) = (params.get(tape, "mjd.embed.motion.w"), params.get(tape, "mjd.embed.motion.b"));
        let motion_emb = tape.linear(motion_patches, wem, bem);

        let scale_tok = params.get(tape, "mjd.tokens.scale");
        let register_tok = params.get(tape, "mjd.tokens.register");
        let video_seq = tape.row_map(video_emb, self.assemble_video.clone());
        let motion_seq = tape.row_map(motion_emb, self.assemble_motion.clone());
        let scale_seq = tape.row_map(scale_tok, self.assemble_scale.clone());
        let register_seq = tape.row_map(register_tok, self.assemble_register.clone());
        let base = tape.add(video_seq, motion_seq);
        let base = tape.add(base, scale_seq);
        let mut x = tape.add(base, register_seq);

        // Positions cover the 2*Tm modality tokens; scale/register tokens are
        // fully learnable rows without positional terms.
        let pos_tables = ["mjd.pos.view", "mjd.pos.time", "mjd.pos.h", "mjd.pos.w", "mjd.pos.modality"];
        let tm = cfg.tokens_per_modality();
        for (table_name, plan) in pos_tables.iter().zip(self.pos_plans.iter()) {
            let table = params.get(tape, table_name);
            let pos = tape.row_map(table, plan.clone());
            // Embed into the sequence rows 0..2Tm.
            let seq_plan = Arc::new(RowMap {
                in_rows: 2 * tm,
                out_rows: cfg.seq_len(),
                entries: (0..2 * tm).map(|r| (r as u32, r as u32, 1.0)).collect(),
            });
            let pos_seq = tape.row_map(pos, seq_plan);
            x = tape.add(x, pos_seq);
        }

        // Blocks.
        for b in 0..cfg.blocks {
            let p = format!("mjd.block{b}");
            let cond = tape.silu(t_embed);
            let (wmv, bmv) = (
                params.get(tape, &format!("{p}.mod.video.w")),
                params.get(tape, &format!("{p}.mod.video.b")),
            );
            let mod_video_flat = tape.linear(cond, wmv, bmv); // [1, 12d]
            let mod_video = tape.reshape(mod_video_flat, &[12, cfg.dim]);
            let mod_motion = if cfg.share_motion_modulator {
                mod_video
            } else {
                let (wmm, bmm) = (
                    params.get(tape, &format!("{p}.mod.motion.w")),
                    params.get(tape, &format!("{p}.mod.motion.b")),
                );
                let flat = tape.linear(cond, wmm, bmm);
                tape.reshape(flat, &[12, cfg.dim])
            };
            let mods = [mod_video, mod_motion];

            x = self.gated_sublayer(tape, params, x, &mods, 0, |tape, params, model, x_mod| {
                model.attention_sublayer(tape, params, x_mod, &format!("{p}.inter"), &model.inter)
            });
            x = self.gated_sublayer(tape, params, x, &mods, 1, |tape, params, model, x_mod| {
                model.attention_sublayer(tape, params, x_mod, &format!("{p}.intra"), &model.intra)
            });
            x = self.gated_sublayer(tape, params, x, &mods, 2, |tape, params, model, x_mod| {
                let (wq, bq) = (
                    params.get(tape, &format!("{p}.cross.wq")),
                    params.get(tape, &format!("{p}.cross.bq")),
                );
                let q = tape.linear(x_mod, wq, bq);
                let (wk, bk) = (
                    params.get(tape, &format!("{p}.cross.wk")),
                    params.get(tape, &format!("{p}.cross.bk")),
                );
                let k = tape.linear(text_feats, wk, bk);
                let (wv, bv) = (
                    params.get(tape, &format!("{p}.cross.wv")),
                    params.get(tape, &format!("{p}.cross.bv")),
                );
                let v = tape.linear(text_feats, wv, bv);
                let span = Arc::new(vec![AttnSpan {
                    q0: 0,
                    q1: model.cfg.seq_len(),
                    k0: 0,
                    k1: model.cfg.text_len,
                }]);
                let attn = tape.attention(q, k, v, model.cfg.heads, span);
                let (wo, bo) = (
                    params.get(tape, &format!("{p}.cross.wo")),
                    params.get(tape, &format!("{p}.cross.bo")),
                );
                tape.linear(attn, wo, bo)
            });
            x = self.gated_sublayer(tape, params, x, &mods, 3, |tape, params, _, x_mod| {
                let (w1, b1) = (
                    params.get(tape, &format!("{p}.ffn.w1")),
                    params.get(tape, &format!("{p}.ffn.b1")),
                );
                let h = tape.linear(x_mod, w1, b1);
                let h = tape.gelu(h);
                let (w2, b2) = (
                    params.get(tape, &format!("{p}.ffn.w2")),
                    params.get(tape, &format!("{p}.ffn.b2")),
                );
                tape.linear(h, w2, b2)
            });
        }

        // Final norm with affine parameters.
        let ln = tape.layer_norm(x);
        let gamma = params.get(tape, "mjd.final.gamma");
        let beta = params.get(tape, "mjd.final.beta");
        let normed = tape.row_broadcast_mul(ln, gamma);
        let normed = tape.row_broadcast_add(normed, beta);

        // Heads.
        let video_feat = tape.row_map(normed, self.video_rows.clone());
        let (whv, bhv) = (params.get(tape, "mjd.head.video.w"), params.get(tape, "mjd.head.video.b"));
        let video_tokens = tape.linear(video_feat, whv, bhv);
        let v_video = tape.permute_elems(video_tokens, self.unpatchify.clone());

        let motion_feat = tape.row_map(normed, self.motion_rows.clone());
        let (whm, bhm) = (params.get(tape, "mjd.head.motion.w"), params.get(tape, "mjd.head.motion.b"));
        let motion_tokens = tape.linear(motion_feat, whm, bhm);
        let v_motion = tape.permute_elems(motion_tokens, self.unpatchify.clone());

        let scale_feat = tape.row_map(normed, self.scale_mean.clone());
        let (whs, bhs) = (params.get(tape, "mjd.head.scale.w"), params.get(tape, "mjd.head.scale.b"));
        let scale_flat = tape.linear(scale_feat, whs, bhs);
        let scale_pairs = tape.reshape(scale_flat, &[cfg.views, 2]);
        let scale = tape.scale_head(scale_pairs);

        MjdOutput { v_video, v_motion, scale }
    }

    /// Velocity-matching objective: video MSE (conditioning frame masked out)
    /// + motion MSE + scale MSE, unit weights.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        out: &MjdOutput,
        v_video_gt: Tensor<T>,
        v_motion_gt: Tensor<T>,
        scale_gt: Tensor<T>,
    ) -> NodeId {
        let mask = self.video_loss_mask::<T>();
        let video_term = tape.mse_loss(out.v_video, v_video_gt, Some(mask));
        let motion_term = tape.mse_loss(out.v_motion, v_motion_gt, None);
        let scale_term = tape.mse_loss(out.scale, scale_gt, None);
        let vm = tape.add(video_term, motion_term);
        tape.add(vm, scale_term)
    }

    /// Ones everywhere except the conditioning (first) latent frame of every view.
    pub fn video_loss_mask<T: Scalar>(&self) -> Tensor<T> {
        let shape = self.cfg.latent_shape();
        let frame_len: usize = shape[2..].iter().product();
        let nl = shape[1];
        Tensor::from_fn(&shape, |i| {
            let frame = (i / frame_len) % nl;
            if frame == 0 {
                T::ZERO
            } else {
                T::ONE
            }
        })
    }
}

pub struct MjdOutput {
    pub v_video: NodeId,
    pub v_motion: NodeId,
    pub scale: NodeId,
}

/// Standalone adaptive modulation helper matching the op contract:
/// `(tokens * (1 + scale) + shift, gate)` with the triple read from a linear
/// map of the conditioning vector.
pub fn ada_modulate<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: NodeId,
    cond: NodeId,
    w: NodeId,
    b: NodeId,
) -> (NodeId, NodeId) {
    let d = tape.value(tokens).cols();
    let flat = tape.linear(cond, w, b); // [1, 3d]
    let triple = tape.reshape(flat, &[3, d]);
    let rows = tape.value(tokens).rows();
    let expand = |tape: &mut Tape<T>, triple: NodeId, row: usize| {
        let plan = Arc::new(RowMap {
            in_rows: 3,
            out_rows: rows,
            entries: (0..rows).map(|r| (r as u32, row as u32, 1.0)).collect(),
        });
        tape.row_map(triple, plan)
    };
    let scale = expand(tape, triple, 0);
    let shift = expand(tape, triple, 1);
    let gate = expand(tape, triple, 2);
    let scaled = tape.mul(tokens, scale);
    let with_scale = tape.add(tokens, scaled);
    let modulated = tape.add(with_scale, shift);
    (modulated, gate)
}

/// Tiny full-model gradient check (one block, handful of tokens).
pub fn grad_check_case() -> crate::gradcheck::CheckCase {
    let cfg = MjdConfig {
        views: 2,
        frames: 2,
        height: 2,
        width: 2,
        codec: LatentCodecConfig { r_n: 1, r_h: 2, r_w: 2 },
        dim: 16,
        blocks: 1,
        heads: 2,
        patch: 1,
        text_len: 3,
        vocab: 15,
        scale_tokens: 2,
        register_tokens: 2,
        ffn_mult: 2,
        share_motion_modulator: false,
        gate_init: 0.0,
    };
    let model = Arc::new(MjdModel::new(cfg.clone()));
    let mut rng = Prng::new(0xAB, "mjd_gc");
    let mut store32 = ParamStore::<f32>::new();
    model.init_params(&mut store32, &mut rng);
    let mut store = store32.cast::<f64>();
    // Nudge the zero-initialized heads/modulators so their gradients are
    // exercised away from the stationary init.
    for name in [
        "mjd.head.video.w",
        "mjd.head.motion.w",
        "mjd.head.scale.w",
        "mjd.block0.mod.video.w",
        "mjd.block0.mod.motion.w",
        "mjd.block0.mod.video.b",
        "mjd.block0.mod.motion.b",
    ] {
        let t = store.get_mut(name);
        let mut r = Prng::new(7, name);
        for x in t.data_mut().iter_mut() {
            *x += r.normal() * 0.05;
        }
    }
    let shape = cfg.latent_shape();
    let mut drng = Prng::new(0xAC, "mjd_gc_data");
    let z_video = Tensor::<f64>::from_fn(&shape, |_| drng.normal() * 0.5);
    let z_motion = Tensor::<f64>::from_fn(&shape, |_| drng.normal() * 0.5);
    let v_video_gt = Tensor::<f64>::from_fn(&shape, |_| drng.normal() * 0.5);
    let v_motion_gt = Tensor::<f64>::from_fn(&shape, |_| drng.normal() * 0.5);
    let scale_gt = Tensor::<f64>::from_vec(&[2, 2], vec![0.5, 1.5, 0.7, 1.9]);
    let prompt = vec![1u16, 3, 9];

    crate::gradcheck::CheckCase {
        name: "mjd_block",
        tolerance: 1e-3,
        store,
        eval: Box::new(move |s, with_grads| {
            let mut tape = Tape::<f64>::new();
            let mut binding = TapeBinding::new(s);
            let zv = tape.input(z_video.clone());
            let zm = tape.input(z_motion.clone());
            let out = model.forward(&mut tape, &mut binding, zv, zm, &prompt, 0.37);
            let loss = model.loss(&mut tape, &out, v_video_gt.clone(), v_motion_gt.clone(), scale_gt.clone());
            crate::gradcheck::collect_grads(&tape, loss, with_grads)
        }),
    }
}
