//! Named parameter store, initialization, and the AdamW-style optimizer.

use std::collections::BTreeMap;

use smv4d_core::rng::Prng;
use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

use crate::tape::{NodeId, Tape};

/// Parameters keyed by dotted names; iteration order is the sorted name order,
/// which keeps reductions and updates deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let prior = self.map.insert(name.to_string(), value);
        assert!(prior.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Binds store parameters onto a tape, one leaf per distinct name.
pub struct TapeBinding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
}

impl<'a, T: Scalar> TapeBinding<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = tape.param(name, self.store.get(name).clone());
        self.bound.insert(name.to_string(), id);
        id
    }
}

/// Truncated normal (resampled beyond two sigmas), the projection default.
pub fn trunc_normal<T: Scalar>(shape: &[usize], sigma: f64, rng: &mut Prng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mut draw = rng.normal();
        while draw.abs() > 2.0 {
            draw = rng.normal();
        }
        T::from_f64(draw * sigma)
    })
}

/// Decoupled-weight-decay adaptive-moment optimizer with cosine decay and
/// global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps for the cosine decay horizon; 0 disables the schedule.
    pub total_steps: usize,
    /// Trainer-supplied global step, used only by the schedule.
    pub step: usize,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
    /// Per-parameter update counts: bias corrections must not depend on how
    /// often *other* parameters were updated (phases train disjoint sets).
    t: BTreeMap<String, u32>,
}

impl Optimizer {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            total_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        // Cosine decay to 10% of the base rate.
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    /// Apply one update. `grads` holds (name, gradient) pairs; only parameters
    /// whose name passes `trainable` are touched. The global-norm clip runs
    /// per top-level prefix ("mjd.", "dpa.") so one model's gradient scale
    /// never rescales the other's update. Weight decay skips vectors (biases,
    /// norm gains, tokens, embeddings are 1-D).
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(String, Tensor<f32>)],
        trainable: impl Fn(&str) -> bool,
    ) {
        let prefix_of = |name: &str| name.split('.').next().unwrap_or("").to_string();
        let mut sq: std::collections::BTreeMap<String, f64> = BTreeMap::new();
        for (name, g) in grads {
            if trainable(name) {
                *sq.entry(prefix_of(name)).or_insert(0.0) +=
                    g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            }
        }
        let clip_of = |prefix: &str| -> f64 {
            let norm = sq.get(prefix).copied().unwrap_or(0.0).sqrt();
            if self.clip_norm > 0.0 && norm > self.clip_norm {
                self.clip_norm / norm
            } else {
                1.0
            }
        };
        self.step += 1;
        let lr = self.current_lr();
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let clip = clip_of(&prefix_of(name));
            let p = store.get_mut(name);
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bias1 = 1.0 - b1.powi(*t as i32);
            let bias2 = 1.0 - b2.powi(*t as i32);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] * clip as f32;
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bias1;
                let vhat = vd[i] / bias2;
                pd[i] -= (lr as f32) * (mhat / (vhat.sqrt() + eps) + decay as f32 * pd[i]);
            }
        }
    }

    #[allow(clippy::type_complexity)]
    pub fn moments(
        &self,
    ) -> (&BTreeMap<String, Tensor<f32>>, &BTreeMap<String, Tensor<f32>>, &BTreeMap<String, u32>) {
        (&self.m, &self.v, &self.t)
    }

    pub fn restore_moments(
        &mut self,
        m: BTreeMap<String, Tensor<f32>>,
        v: BTreeMap<String, Tensor<f32>>,
        t: BTreeMap<String, u32>,
    ) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
