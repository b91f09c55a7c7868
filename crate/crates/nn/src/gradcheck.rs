//! Finite-difference gradient checking for every registered op.
//!
//! Each case builds a tiny f64 tape around seeded random inputs, produces a
//! scalar loss, and compares reverse-mode gradients against central
//! differences (h = 1e-5). Relative error uses max(1, |analytic|, |numeric|)
//! in the denominator so near-zero gradients stay meaningful.

use std::sync::Arc;

use smv4d_core::rng::Prng;
use smv4d_core::tensor::Tensor;
use thiserror::Error;

use crate::params::ParamStore;
use crate::tape::{AttnSpan, CondRays, ElemPerm, RowMap, Tape};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("unknown op '{0}'")]
    UnknownOp(String),
}

pub struct CheckCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub store: ParamStore<f64>,
    /// Rebuild the graph from a (possibly perturbed) store; return the loss,
    /// plus the analytic parameter gradients when `with_grads` is set (the
    /// finite-difference loop only needs the loss).
    #[allow(clippy::type_complexity)]
    pub eval: Box<dyn Fn(&ParamStore<f64>, bool) -> (f64, Vec<(String, Tensor<f64>)>) + Send + Sync>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

const FD_STEP: f64 = 1e-5;

/// Central-difference comparison over every parameter element.
pub fn run_case(case: &CheckCase) -> CheckReport {
    let (_, analytic) = (case.eval)(&case.store, true);
    let mut max_rel = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let mut plus = case.store.clone();
            plus.get_mut(name).data_mut()[i] += FD_STEP;
            let (loss_plus, _) = (case.eval)(&plus, false);
            let mut minus = case.store.clone();
            minus.get_mut(name).data_mut()[i] -= FD_STEP;
            let (loss_minus, _) = (case.eval)(&minus, false);
            let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    CheckReport {
        op: case.name.to_string(),
        max_rel_err: max_rel,
        tolerance: case.tolerance,
        passed: max_rel < case.tolerance,
    }
}

pub fn grad_check(op: &str) -> Result<CheckReport, GradCheckError> {
    let case = all_cases()
        .into_iter()
        .find(|c| c.name == op)
        .ok_or_else(|| GradCheckError::UnknownOp(op.to_string()))?;
    Ok(run_case(&case))
}

pub fn run_all() -> Vec<CheckReport> {
    all_cases().iter().map(run_case).collect()
}

pub fn op_names() -> Vec<&'static str> {
    all_cases().into_iter().map(|c| c.name).collect()
}

fn randn(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal() * 0.5)
}

/// Scalar loss wrapper: mse of the output against a fixed random target.
fn loss_of(tape: &mut Tape<f64>, out: crate::tape::NodeId, rng_key: u64) -> crate::tape::NodeId {
    let mut rng = Prng::new(rng_key, "gc_target");
    let target = Tensor::from_fn(tape.value(out).shape(), |_| rng.normal());
    tape.mse_loss(out, target, None)
}

pub(crate) fn collect_grads(
    tape: &Tape<f64>,
    loss: crate::tape::NodeId,
    with_grads: bool,
) -> (f64, Vec<(String, Tensor<f64>)>) {
    let loss_value = tape.value(loss).data()[0];
    if !with_grads {
        return (loss_value, Vec::new());
    }
    let grads = tape.backward(loss);
    let named = tape
        .param_nodes()
        .iter()
        .map(|(name, id)| {
            let g = grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape()));
            (name.clone(), g)
        })
        .collect();
    (loss_value, named)
}

pub fn all_cases() -> Vec<CheckCase> {
    let mut cases: Vec<CheckCase> = Vec::new();
    let mut rng = Prng::new(0xC0FFEE, "gradcheck");

    // linear: x @ w + b
    {
        let x = randn(&[5, 4], &mut rng);
        let mut store = ParamStore::new();
        store.insert("w", randn(&[4, 6], &mut rng));
        store.insert("b", randn(&[6], &mut rng));
        store.insert("x", x);
        cases.push(CheckCase {
            name: "linear",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let w = tape.param("w", s.get("w").clone());
                let b = tape.param("b", s.get("b").clone());
                let y = tape.linear(x, w, b);
                let loss = loss_of(&mut tape, y, 11);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // matmul
    {
        let mut store = ParamStore::new();
        store.insert("a", randn(&[3, 5], &mut rng));
        store.insert("b", randn(&[5, 4], &mut rng));
        cases.push(CheckCase {
            name: "matmul",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let a = tape.param("a", s.get("a").clone());
                let b = tape.param("b", s.get("b").clone());
                let y = tape.matmul(a, b);
                let loss = loss_of(&mut tape, y, 12);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // layer_norm
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[6, 8], &mut rng));
        cases.push(CheckCase {
            name: "layer_norm",
            tolerance: 1e-4,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let y = tape.layer_norm(x);
                let loss = loss_of(&mut tape, y, 13);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // activations
    for (name, which) in [("gelu", 0usize), ("silu", 1), ("exp", 2)] {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[4, 7], &mut rng));
        cases.push(CheckCase {
            name,
            tolerance: 1e-6,
            store,
            eval: Box::new(move |s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let y = match which {
                    0 => tape.gelu(x),
                    1 => tape.silu(x),
                    _ => tape.exp(x),
                };
                let loss = loss_of(&mut tape, y, 14 + which as u64);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // elementwise mul + add + scale chain
    {
        let mut store = ParamStore::new();
        store.insert("a", randn(&[5, 3], &mut rng));
        store.insert("b", randn(&[5, 3], &mut rng));
        cases.push(CheckCase {
            name: "elementwise",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let a = tape.param("a", s.get("a").clone());
                let b = tape.param("b", s.get("b").clone());
                let prod = tape.mul(a, b);
                let sum = tape.add(prod, a);
                let scaled = tape.scale(sum, -1.7);
                let diff = tape.sub(scaled, b);
                let loss = loss_of(&mut tape, diff, 17);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // row_map with duplication and averaging weights
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[4, 3], &mut rng));
        cases.push(CheckCase {
            name: "row_map",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let plan = Arc::new(RowMap {
                    in_rows: 4,
                    out_rows: 3,
                    entries: vec![
                        (0, 0, 1.0),
                        (0, 1, 0.5),
                        (1, 1, 1.0),
                        (1, 3, -0.25),
                        (2, 0, 0.5),
                        (2, 2, 0.5),
                    ],
                });
                let y = tape.row_map(x, plan);
                let loss = loss_of(&mut tape, y, 18);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // element permutation
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[2, 6], &mut rng));
        cases.push(CheckCase {
            name: "permute_elems",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let source: Vec<u32> = (0..12u32).map(|i| (i * 5) % 12).collect();
                let plan = Arc::new(ElemPerm { out_shape: vec![3, 4], source });
                let y = tape.permute_elems(x, plan);
                let loss = loss_of(&mut tape, y, 19);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // row broadcasts
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[5, 4], &mut rng));
        store.insert("scale", randn(&[4], &mut rng));
        store.insert("shift", randn(&[4], &mut rng));
        cases.push(CheckCase {
            name: "row_broadcast",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let sc = tape.param("scale", s.get("scale").clone());
                let sh = tape.param("shift", s.get("shift").clone());
                let y = tape.row_broadcast_mul(x, sc);
                let y = tape.row_broadcast_add(y, sh);
                let loss = loss_of(&mut tape, y, 20);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // grouped multi-head attention (self and cross spans)
    {
        let mut store = ParamStore::new();
        store.insert("q", randn(&[6, 8], &mut rng));
        store.insert("k", randn(&[7, 8], &mut rng));
        store.insert("v", randn(&[7, 8], &mut rng));
        cases.push(CheckCase {
            name: "mha",
            tolerance: 1e-4,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let q = tape.param("q", s.get("q").clone());
                let k = tape.param("k", s.get("k").clone());
                let v = tape.param("v", s.get("v").clone());
                let spans = Arc::new(vec![
                    AttnSpan { q0: 0, q1: 3, k0: 0, k1: 4 },
                    AttnSpan { q0: 3, q1: 6, k0: 2, k1: 7 },
                ]);
                let y = tape.attention(q, k, v, 2, spans);
                let loss = loss_of(&mut tape, y, 21);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // scale head (min, min + exp(log_range))
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[3, 2], &mut rng));
        cases.push(CheckCase {
            name: "scale_head",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let y = tape.scale_head(x);
                let loss = loss_of(&mut tape, y, 22);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // scale-differentiable condition unprojection
    {
        let mut store = ParamStore::new();
        store.insert("s", Tensor::from_vec(&[2, 2], vec![0.6, 1.4, 0.9, 1.7]));
        cases.push(CheckCase {
            name: "unproject_conditions",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut rng = Prng::new(23, "rays");
                let count = 10;
                let rays = Arc::new(CondRays {
                    view: (0..count).map(|i| (i % 2) as u32).collect(),
                    origin: (0..count).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
                    dir_min: (0..count).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
                    dir_max: (0..count).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
                });
                let mut tape = Tape::new();
                let sv = tape.param("s", s.get("s").clone());
                let y = tape.unproject_conditions(sv, rays);
                let loss = loss_of(&mut tape, y, 24);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // masked mse
    {
        let mut store = ParamStore::new();
        store.insert("x", randn(&[4, 5], &mut rng));
        cases.push(CheckCase {
            name: "mse_masked",
            tolerance: 1e-6,
            store,
            eval: Box::new(|s, with_grads| {
                let mut tape = Tape::new();
                let x = tape.param("x", s.get("x").clone());
                let mut trng = Prng::new(25, "mse");
                let target = Tensor::from_fn(&[4, 5], |_| trng.normal());
                let mask = Tensor::from_fn(&[4, 5], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
                let loss = tape.mse_loss(x, target, Some(mask));
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // chamfer (subgradient at the fixed nearest-neighbor assignment)
    {
        let mut store = ParamStore::new();
        store.insert("p", randn(&[8, 3], &mut rng));
        cases.push(CheckCase {
            name: "chamfer",
            tolerance: 1e-4,
            store,
            eval: Box::new(|s, with_grads| {
                let mut trng = Prng::new(26, "ch");
                let target: Vec<Vec<[f64; 3]>> = (0..2)
                    .map(|_| (0..3).map(|_| [trng.normal(), trng.normal(), trng.normal()]).collect())
                    .collect();
                let frame_of: Vec<u32> = (0..8).map(|i| (i / 4) as u32).collect();
                let mut tape = Tape::new();
                let p = tape.param("p", s.get("p").clone());
                let loss = tape.chamfer_loss(p, Arc::new(target), frame_of);
                collect_grads(&tape, loss, with_grads)
            }),
        });
    }

    // model blocks (tiny configurations)
    cases.push(crate::mjd::grad_check_case());
    cases.push(crate::dpa::grad_check_case());

    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_ops_pass_gradient_check() {
        for case in all_cases() {
            // Model-block cases run in the integration suite; keep the unit
            // pass quick.
            if case.name == "mjd_block" || case.name == "dpa_block" {
                continue;
            }
            let report = run_case(&case);
            assert!(
                report.passed,
                "{}: max rel err {} over tolerance {}",
                report.op, report.max_rel_err, report.tolerance
            );
        }
    }

    #[test]
    fn unknown_op_is_reported() {
        assert!(matches!(grad_check("nonexistent"), Err(GradCheckError::UnknownOp(_))));
    }
}
