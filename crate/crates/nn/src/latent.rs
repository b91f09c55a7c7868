//! Exactly invertible latent codec and token patchification.
//!
//! The codec is a space-to-depth transform standing in for a learned video
//! VAE: frame 0 compresses spatially into `3 * r_h * r_w` channels (zero-padded
//! up to the group channel count when `r_n > 1`), and every following group of
//! `r_n` frames compresses space and time into `3 * r_n * r_h * r_w` channels.
//! `decode(encode(x))` is bitwise identity.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

use crate::tape::ElemPerm;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("dimension {dim} = {value} not divisible by {divisor}")]
    NotDivisible { dim: &'static str, value: usize, divisor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodecConfig {
    pub r_n: usize,
    pub r_h: usize,
    pub r_w: usize,
}

impl LatentCodecConfig {
    pub fn channels(&self) -> usize {
        3 * self.r_n * self.r_h * self.r_w
    }

    /// Latent frame count: frame 0 plus compressed groups of `r_n` frames.
    pub fn latent_frames(&self, video_frames: usize) -> usize {
        1 + (video_frames - 1) / self.r_n
    }

    pub fn check(&self, frames: usize, height: usize, width: usize) -> Result<(), LatentError> {
        if (frames - 1) % self.r_n != 0 {
            return Err(LatentError::NotDivisible { dim: "frames-1", value: frames - 1, divisor: self.r_n });
        }
        if height % self.r_h != 0 {
            return Err(LatentError::NotDivisible { dim: "height", value: height, divisor: self.r_h });
        }
        if width % self.r_w != 0 {
            return Err(LatentError::NotDivisible { dim: "width", value: width, divisor: self.r_w });
        }
        Ok(())
    }
}

/// `[V, N, H, W, 3] -> [V, NL, H/r_h, W/r_w, C]`.
pub fn encode_latent<T: Scalar>(video: &Tensor<T>, cfg: &LatentCodecConfig) -> Result<Tensor<T>, LatentError> {
    let shape = video.shape();
    assert_eq!(shape.len(), 5, "expected [V,N,H,W,3]");
    let (v_count, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    cfg.check(n, h, w)?;
    let (lh, lw, c) = (h / cfg.r_h, w / cfg.r_w, cfg.channels());
    let nl = cfg.latent_frames(n);
    let mut out = Tensor::zeros(&[v_count, nl, lh, lw, c]);
    let vd = video.data();
    let od = out.data_mut();
    let video_off = |vi: usize, f: usize, y: usize, x: usize, ch: usize| {
        (((vi * n + f) * h + y) * w + x) * 3 + ch
    };
    let latent_off = |vi: usize, lf: usize, y: usize, x: usize, ch: usize| {
        (((vi * nl + lf) * lh + y) * lw + x) * c + ch
    };
    for vi in 0..v_count {
        for lf in 0..nl {
            for y in 0..lh {
                for x in 0..lw {
                    if lf == 0 {
                        // Spatial-only compression of the conditioning frame.
                        for dy in 0..cfg.r_h {
                            for dx in 0..cfg.r_w {
                                for rgb in 0..3 {
                                    let ch = ((dy * cfg.r_w + dx) * 3) + rgb;
                                    od[latent_off(vi, 0, y, x, ch)] =
                                        vd[video_off(vi, 0, y * cfg.r_h + dy, x * cfg.r_w + dx, rgb)];
                                }
                            }
                        }
                    } else {
                        let f0 = 1 + (lf - 1) * cfg.r_n;
                        for dt in 0..cfg.r_n {
                            for dy in 0..cfg.r_h {
                                for dx in 0..cfg.r_w {
                                    for rgb in 0..3 {
                                        let ch = (((dt * cfg.r_h + dy) * cfg.r_w + dx) * 3) + rgb;
                                        od[latent_off(vi, lf, y, x, ch)] = vd[video_off(
                                            vi,
                                            f0 + dt,
                                            y * cfg.r_h + dy,
                                            x * cfg.r_w + dx,
                                            rgb,
                                        )];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`encode_latent`].
pub fn decode_latent<T: Scalar>(latent: &Tensor<T>, cfg: &LatentCodecConfig, frames: usize) -> Tensor<T> {
    let shape = latent.shape();
    assert_eq!(shape.len(), 5, "expected [V,NL,h,w,C]");
    let (v_count, nl, lh, lw, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    assert_eq!(c, cfg.channels(), "latent channel count");
    assert_eq!(nl, cfg.latent_frames(frames), "latent frame count");
    let (h, w) = (lh * cfg.r_h, lw * cfg.r_w);
    let mut out = Tensor::zeros(&[v_count, frames, h, w, 3]);
    let ld = latent.data();
    let od = out.data_mut();
    let video_off = |vi: usize, f: usize, y: usize, x: usize, ch: usize| {
        (((vi * frames + f) * h + y) * w + x) * 3 + ch
    };
    let latent_off = |vi: usize, lf: usize, y: usize, x: usize, ch: usize| {
        (((vi * nl + lf) * lh + y) * lw + x) * c + ch
    };
    for vi in 0..v_count {
        for lf in 0..nl {
            for y in 0..lh {
                for x in 0..lw {
                    if lf == 0 {
                        for dy in 0..cfg.r_h {
                            for dx in 0..cfg.r_w {
                                for rgb in 0..3 {
                                    let ch = ((dy * cfg.r_w + dx) * 3) + rgb;
                                    od[video_off(vi, 0, y * cfg.r_h + dy, x * cfg.r_w + dx, rgb)] =
                                        ld[latent_off(vi, 0, y, x, ch)];
                                }
                            }
                        }
                    } else {
                        let f0 = 1 + (lf - 1) * cfg.r_n;
                        for dt in 0..cfg.r_n {
                            for dy in 0..cfg.r_h {
                                for dx in 0..cfg.r_w {
                                    for rgb in 0..3 {
                                        let ch = (((dt * cfg.r_h + dy) * cfg.r_w + dx) * 3) + rgb;
                                        od[video_off(vi, f0 + dt, y * cfg.r_h + dy, x * cfg.r_w + dx, rgb)] =
                                            ld[latent_off(vi, lf, y, x, ch)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// -- patchify ----------------------------------------------------------------

/// Lossless 2D space-to-depth tokenization of a latent block:
/// `[V, NL, h, w, C] -> [V * NL * (h/p) * (w/p), C * p^2]`, row order (v, n, y, x).
pub fn patchify<T: Scalar>(latent: &Tensor<T>, p: usize) -> Result<Tensor<T>, LatentError> {
    let plan = patchify_plan(latent.shape(), p)?;
    let ld = latent.data();
    Ok(Tensor::from_fn(&plan.out_shape, |i| ld[plan.source[i] as usize]))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, latent_shape: &[usize], p: usize) -> Result<Tensor<T>, LatentError> {
    let plan = unpatchify_plan(latent_shape, p)?;
    let td = tokens.data();
    Ok(Tensor::from_fn(&plan.out_shape, |i| td[plan.source[i] as usize]))
}

/// Token count per modality for a `[V, NL, h, w, C]` block at patch size p.
pub fn token_count(latent_shape: &[usize], p: usize) -> usize {
    latent_shape[0] * latent_shape[1] * (latent_shape[2] / p) * (latent_shape[3] / p)
}

/// Element plan mapping latent -> tokens; also used as a tape op.
pub fn patchify_plan(latent_shape: &[usize], p: usize) -> Result<Arc<ElemPerm>, LatentError> {
    let (v_count, nl, h, w, c) = (
        latent_shape[0],
        latent_shape[1],
        latent_shape[2],
        latent_shape[3],
        latent_shape[4],
    );
    if h % p != 0 {
        return Err(LatentError::NotDivisible { dim: "latent height", value: h, divisor: p });
    }
    if w % p != 0 {
        return Err(LatentError::NotDivisible { dim: "latent width", value: w, divisor: p });
    }
    let (hp, wp) = (h / p, w / p);
    let rows = v_count * nl * hp * wp;
    let cols = c * p * p;
    let mut source = Vec::with_capacity(rows * cols);
    for vi in 0..v_count {
        for lf in 0..nl {
            for py in 0..hp {
                for px in 0..wp {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                source.push(((((vi * nl + lf) * h + y) * w + x) * c + ch) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Arc::new(ElemPerm { out_shape: vec![rows, cols], source }))
}

/// Element plan mapping tokens -> latent (the inverse permutation).
pub fn unpatchify_plan(latent_shape: &[usize], p: usize) -> Result<Arc<ElemPerm>, LatentError> {
    let fwd = patchify_plan(latent_shape, p)?;
    let total: usize = latent_shape.iter().product();
    let mut source = vec![0u32; total];
    for (token_idx, &latent_idx) in fwd.source.iter().enumerate() {
        source[latent_idx as usize] = token_idx as u32;
    }
    Ok(Arc::new(ElemPerm { out_shape: latent_shape.to_vec(), source }))
}
