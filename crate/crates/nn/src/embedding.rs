//! Fixed (non-learned) embeddings: sinusoidal timestep features and Fourier
//! features for 4D point positions. Both are computed outside the tape and
//! enter as constant inputs; learned projections sit on top.

use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

pub const TIMESTEP_FEATURES: usize = 256;

/// Sinusoidal features of a scalar timestep, `[1, TIMESTEP_FEATURES]`.
pub fn timestep_features<T: Scalar>(t: f64) -> Tensor<T> {
    let half = TIMESTEP_FEATURES / 2;
    let mut values = Vec::with_capacity(TIMESTEP_FEATURES);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / (half - 1) as f64).exp();
        values.push(T::from_f64((t * 1000.0 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(i as f64) * (10_000.0f64).ln() / (half - 1) as f64).exp();
        values.push(T::from_f64((t * 1000.0 * freq).cos()));
    }
    Tensor::from_vec(&[1, TIMESTEP_FEATURES], values)
}

/// Fourier features of 4D coordinates (x, y, z, normalized frame index):
/// raw values plus sin/cos at `levels` octaves -> `[rows, 4 + 8 * levels]`.
pub fn fourier_features_4d<T: Scalar>(coords: &[[f64; 4]], levels: usize) -> Tensor<T> {
    let width = fourier_width(levels);
    let mut values = Vec::with_capacity(coords.len() * width);
    for c in coords {
        for &x in c {
            values.push(T::from_f64(x));
        }
        for level in 0..levels {
            let scale = std::f64::consts::PI * (1 << level) as f64;
            for &x in c {
                values.push(T::from_f64((x * scale).sin()));
                values.push(T::from_f64((x * scale).cos()));
            }
        }
    }
    Tensor::from_vec(&[coords.len(), width], values)
}

pub fn fourier_width(levels: usize) -> usize {
    4 + 8 * levels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_features_are_smooth_and_distinct() {
        let a: Tensor<f64> = timestep_features(0.3);
        let b: Tensor<f64> = timestep_features(0.3 + 1e-5);
        let c: Tensor<f64> = timestep_features(0.7);
        // Deterministic in t.
        assert_eq!(a, timestep_features::<f64>(0.3));
        // Smooth: finite-difference derivative bounded (max frequency 1000).
        let deriv = a.max_abs_diff(&b) / 1e-5;
        assert!(deriv < 1100.0, "derivative {deriv}");
        // Distinct timesteps map far apart.
        assert!(a.max_abs_diff(&c) > 0.1);
    }

    #[test]
    fn fourier_width_matches() {
        let coords = vec![[0.1, 0.2, 0.3, 0.0], [0.5, -0.5, 0.25, 1.0]];
        let f: Tensor<f64> = fourier_features_4d(&coords, 6);
        assert_eq!(f.shape(), &[2, fourier_width(6)]);
        // Raw coordinates pass through as the first four features.
        assert_eq!(f.at(&[0, 0]), 0.1);
        assert_eq!(f.at(&[1, 3]), 1.0);
    }
}
