//! Rectified-flow primitives shared by the latent denoiser and the point aligner.
//!
//! Data and noise are joined by straight paths `z_t = (1-t) z0 + t z1`; the
//! regression target is the constant velocity `z1 - z0`. Denoising walks a
//! strictly decreasing time grid from 1 to 0, so every Euler step uses a
//! negative signed `dt = t_next - t_cur`.

use thiserror::Error;

use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("time grid must be strictly decreasing (got {0} -> {1})")]
    NonDecreasingTime(f64, f64),
    #[error("invalid time grid: {0}")]
    BadGrid(String),
}

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), FlowError> {
    if a.shape() != b.shape() {
        return Err(FlowError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `z_t = (1-t) z0 + t z1`.
pub fn interpolate<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>, t: f64) -> Result<Tensor<T>, FlowError> {
    check_shapes(z0, z1)?;
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    Ok(z0.zip_map(z1, |x0, x1| a * x0 + b * x1).expect("checked"))
}

/// Constant velocity of the straight path, `z1 - z0`.
pub fn velocity_target<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>) -> Result<Tensor<T>, FlowError> {
    check_shapes(z0, z1)?;
    Ok(z1.sub(z0).expect("checked"))
}

/// One Euler step with signed `dt = t_next - t_cur`.
pub fn euler_step<T: Scalar>(
    z_t: &Tensor<T>,
    v_hat: &Tensor<T>,
    t_cur: f64,
    t_next: f64,
) -> Result<Tensor<T>, FlowError> {
    check_shapes(z_t, v_hat)?;
    if t_next >= t_cur {
        return Err(FlowError::NonDecreasingTime(t_cur, t_next));
    }
    let dt = T::from_f64(t_next - t_cur);
    Ok(z_t.zip_map(v_hat, |z, v| z + dt * v).expect("checked"))
}

/// Single-shot estimate of the clean state, `z_hat0 = z_t - t v_hat`.
pub fn one_step_denoise<T: Scalar>(z_t: &Tensor<T>, v_hat: &Tensor<T>, t: f64) -> Result<Tensor<T>, FlowError> {
    check_shapes(z_t, v_hat)?;
    let t = T::from_f64(t);
    Ok(z_t.zip_map(v_hat, |z, v| z - t * v).expect("checked"))
}

/// Training timestep draw, continuous Uniform[0, 1).
pub fn sample_t(rng: &mut Prng) -> f64 {
    rng.uniform()
}

/// Strictly decreasing sampling times from 1.0 to 0.0 inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    ts: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Self {
        assert!(steps >= 1, "need at least one step");
        let ts = (0..=steps)
            .map(|i| 1.0 - i as f64 / steps as f64)
            .collect();
        let grid = Self { ts };
        grid.validate().expect("uniform grid is valid");
        grid
    }

    pub fn from_times(ts: Vec<f64>) -> Result<Self, FlowError> {
        let grid = Self { ts };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<(), FlowError> {
        if self.ts.len() < 2 {
            return Err(FlowError::BadGrid("need at least two knots".into()));
        }
        if self.ts[0] != 1.0 || *self.ts.last().unwrap() != 0.0 {
            return Err(FlowError::BadGrid("grid must start at 1.0 and end at 0.0".into()));
        }
        for w in self.ts.windows(2) {
            if w[1] >= w[0] {
                return Err(FlowError::NonDecreasingTime(w[0], w[1]));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.ts
    }

    pub fn steps(&self) -> usize {
        self.ts.len() - 1
    }

    /// (t_cur, t_next) pairs, in sampling order.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ts.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn randn(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn interpolate_endpoints() {
        let mut rng = Prng::new(1, "fm");
        let z0 = randn(&[3, 4], &mut rng);
        let z1 = randn(&[3, 4], &mut rng);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        let mid = interpolate(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(mid.data()[0], 1.0);
    }

    #[test]
    fn velocity_identity() {
        let mut rng = Prng::new(2, "fm");
        let z0 = randn(&[16], &mut rng);
        let z1 = randn(&[16], &mut rng);
        assert_eq!(velocity_target(&z0, &z0).unwrap().max_abs(), 0.0);
        let v = velocity_target(&z0, &z1).unwrap();
        for _ in 0..8 {
            let t = rng.uniform();
            // interpolate(z0,z1,t) + (1-t) v = z1
            let lhs = interpolate(&z0, &z1, t).unwrap().add(&v.scale(1.0 - t)).unwrap();
            assert!(lhs.max_abs_diff(&z1) < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(matches!(interpolate(&a, &b, 0.5), Err(FlowError::ShapeMismatch(..))));
        assert!(matches!(velocity_target(&a, &b), Err(FlowError::ShapeMismatch(..))));
    }

    #[test]
    fn euler_exact_on_linear_path() {
        let mut rng = Prng::new(3, "fm");
        let z0 = randn(&[8, 2], &mut rng);
        let z1 = randn(&[8, 2], &mut rng);
        let v = velocity_target(&z0, &z1).unwrap();
        let t = 0.73;
        let z_t = interpolate(&z0, &z1, t).unwrap();
        // One step straight to zero recovers z0 exactly (linear ODE).
        let out = euler_step(&z_t, &v, t, 0.0).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-12);
        // Zero velocity leaves the state unchanged.
        let frozen = euler_step(&z_t, &Tensor::zeros(&[8, 2]), t, 0.0).unwrap();
        assert_eq!(frozen, z_t);
    }

    #[test]
    fn euler_rejects_nondecreasing_time() {
        let z = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(euler_step(&z, &z, 0.5, 0.5), Err(FlowError::NonDecreasingTime(..))));
        assert!(matches!(euler_step(&z, &z, 0.5, 0.7), Err(FlowError::NonDecreasingTime(..))));
    }

    #[test]
    fn multi_step_with_true_velocity_recovers_z0() {
        let mut rng = Prng::new(4, "fm");
        let z0 = randn(&[5, 5], &mut rng);
        let z1 = randn(&[5, 5], &mut rng);
        let v = velocity_target(&z0, &z1).unwrap();
        let grid = TimeGrid::uniform(20);
        let mut z = z1.clone();
        for (t_cur, t_next) in grid.pairs() {
            z = euler_step(&z, &v, t_cur, t_next).unwrap();
        }
        assert!(z.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn one_step_denoise_identities() {
        let mut rng = Prng::new(5, "fm");
        let z0 = randn(&[7], &mut rng);
        let z1 = randn(&[7], &mut rng);
        let v = velocity_target(&z0, &z1).unwrap();
        for t in [0.0, 0.25, 0.9, 1.0] {
            let z_t = interpolate(&z0, &z1, t).unwrap();
            let est = one_step_denoise(&z_t, &v, t).unwrap();
            assert!(est.max_abs_diff(&z0) < 1e-12);
        }
        // t = 0 returns the state itself.
        let z_t = interpolate(&z0, &z1, 0.37).unwrap();
        assert_eq!(one_step_denoise(&z_t, &v, 0.0).unwrap(), z_t);
        // Agreement with a single Euler step to zero.
        let via_euler = euler_step(&z_t, &v, 0.37, 0.0).unwrap();
        let via_denoise = one_step_denoise(&z_t, &v, 0.37).unwrap();
        assert!(via_euler.max_abs_diff(&via_denoise) < 1e-12);
    }

    #[test]
    fn grid_validation() {
        let g = TimeGrid::uniform(20);
        assert_eq!(g.times()[0], 1.0);
        assert_eq!(*g.times().last().unwrap(), 0.0);
        assert_eq!(g.steps(), 20);
        assert!(TimeGrid::from_times(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.9, 0.5, 0.0]).is_err());
    }

    #[test]
    fn interpolate_is_affine_in_t() {
        let mut rng = Prng::new(6, "fm");
        let z0 = randn(&[12], &mut rng);
        let z1 = randn(&[12], &mut rng);
        // Second differences over a uniform t-grid vanish.
        let n = 11;
        let states: Vec<Tensor<f64>> = (0..n)
            .map(|i| interpolate(&z0, &z1, i as f64 / (n - 1) as f64).unwrap())
            .collect();
        for w in states.windows(3) {
            let second = w[2].sub(&w[1].scale(2.0)).unwrap().add(&w[0]).unwrap();
            assert!(second.max_abs() < 1e-7);
        }
    }
}
