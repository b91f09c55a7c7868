//! Reverse-mode autodiff over dense tensors.
//!
//! A forward pass records one node per op; `backward` replays the records in
//! reverse creation order, accumulating into per-node gradient buffers with a
//! fixed reduction order. Attention recomputes its softmax in the backward
//! pass instead of saving the score matrices, which keeps memory flat across
//! the deep token stacks. Kernels are generic over f32 (training) and f64
//! (gradient checking).

use std::sync::Arc;

use rayon::prelude::*;
use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

use crate::linalg::{column_sum, matmul, matmul_nt, matmul_tn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

/// Sparse row-mixing plan: `out[dst] += weight * x[src]`.
/// Gathers, scatters, duplications, and averaged merges are all instances.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub in_rows: usize,
    pub out_rows: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl RowMap {
    pub fn gather(indices: &[usize], in_rows: usize) -> Self {
        RowMap {
            in_rows,
            out_rows: indices.len(),
            entries: indices
                .iter()
                .enumerate()
                .map(|(dst, &src)| (dst as u32, src as u32, 1.0))
                .collect(),
        }
    }
}

/// Element permutation: `out[i] = x[plan[i]]`; must be a bijection.
#[derive(Debug, Clone)]
pub struct ElemPerm {
    pub out_shape: Vec<usize>,
    pub source: Vec<u32>,
}

/// One attention group: query rows [q0, q1) attend over key rows [k0, k1).
#[derive(Debug, Clone, Copy)]
pub struct AttnSpan {
    pub q0: usize,
    pub q1: usize,
    pub k0: usize,
    pub k1: usize,
}

/// Per-point unprojection rays for scale-differentiable conditions:
/// `point_i = origin_i + s[view,0] * dir_min_i + s[view,1] * dir_max_i`.
/// Affine in the per-view (min, max) depth scale, so voxel centroids of
/// rays merge exactly by averaging the three vectors.
#[derive(Debug, Clone)]
pub struct CondRays {
    pub view: Vec<u32>,
    pub origin: Vec<[f64; 3]>,
    pub dir_min: Vec<[f64; 3]>,
    pub dir_max: Vec<[f64; 3]>,
}

impl CondRays {
    pub fn len(&self) -> usize {
        self.view.len()
    }
    pub fn is_empty(&self) -> bool {
        self.view.is_empty()
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Gelu(NodeId),
    Silu(NodeId),
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    RowMap { x: NodeId, plan: Arc<RowMap> },
    PermuteElems { x: NodeId, plan: Arc<ElemPerm> },
    LayerNorm { x: NodeId, mean: Tensor<T>, rstd: Tensor<T> },
    RowBroadcastMul { x: NodeId, v: NodeId },
    RowBroadcastAdd { x: NodeId, v: NodeId },
    /// `x + x * scale + shift` in one pass (pre-norm adaptive modulation).
    ModAffine { x: NodeId, scale: NodeId, shift: NodeId },
    /// `x + gate * y` in one pass (gated residual).
    GateAdd { x: NodeId, gate: NodeId, y: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, spans: Arc<Vec<AttnSpan>> },
    ScaleHead { x: NodeId },
    UnprojectCond { s: NodeId, rays: Arc<CondRays> },
    MseLoss { pred: NodeId, target: Tensor<T>, mask: Option<Tensor<T>> },
    ChamferLoss { pred: NodeId, target: Arc<Vec<Vec<[f64; 3]>>>, frame_of: Vec<u32>, nearest_pt: Vec<u32>, nearest_tp: Vec<Vec<u32>> },
    Reshape(NodeId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
    param: Option<String>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

thread_local! {
    static PROFILE: std::cell::RefCell<std::collections::BTreeMap<&'static str, u128>> =
        std::cell::RefCell::new(std::collections::BTreeMap::new());
}

fn profiled<R>(label: &'static str, f: impl FnOnce() -> R) -> R {
    let t0 = std::time::Instant::now();
    let out = f();
    PROFILE.with(|t| *t.borrow_mut().entry(label).or_insert(0) += t0.elapsed().as_nanos());
    out
}

pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node[id.0 as usize].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0 as usize].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].needs_grad
    }

    /// Named parameter leaves in creation order.
    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, needs_grad, op, param: None });
        id
    }

    /// Temporary profiling hook: forward time per op label.
    #[doc(hidden)]
    pub fn profile_snapshot() -> Vec<(&'static str, u128)> {
        PROFILE.with(|t| t.borrow().iter().map(|(k, v)| (*k, *v)).collect())
    }

    #[doc(hidden)]
    pub fn profile_reset() {
        PROFILE.with(|t| t.borrow_mut().clear());
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.push(value, true, Op::Leaf);
        self.nodes[id.0 as usize].param = Some(name.to_string());
        self.params.push((name.to_string(), id));
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0 as usize].needs_grad)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = profiled("elementwise", || self.value(a).add(self.value(b)).expect("add shapes"));
        self.push(value, self.any_grad(&[a, b]), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(value, self.any_grad(&[a, b]), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = profiled("elementwise", || self.value(a).mul(self.value(b)).expect("mul shapes"));
        self.push(value, self.any_grad(&[a, b]), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(value, self.any_grad(&[a]), Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, self.any_grad(&[a]), Op::Exp(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = profiled("activation", || self.value(a).map(gelu_fwd));
        self.push(value, self.any_grad(&[a]), Op::Gelu(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = profiled("activation", || self.value(a).map(silu_fwd));
        self.push(value, self.any_grad(&[a]), Op::Silu(a))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, self.any_grad(&[a, b]), Op::MatMul(a, b))
    }

    /// Fused `x @ w + b` with the bias broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut value = profiled("linear", || matmul(self.value(x), self.value(w)));
        let bias = self.value(b).data().to_vec();
        let n = bias.len();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.iter()) {
                *o += bv;
            }
        }
        self.push(value, self.any_grad(&[x, w, b]), Op::Linear { x, w, b })
    }

    pub fn row_map(&mut self, x: NodeId, plan: Arc<RowMap>) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(xv.rows(), plan.in_rows, "row_map input rows");
        let mut out = Tensor::zeros(&[plan.out_rows, d]);
        profiled("row_map", || {
            let od = out.data_mut();
            let xd = xv.data();
            for &(dst, src, w) in &plan.entries {
                let dst_row = &mut od[dst as usize * d..(dst as usize + 1) * d];
                let src_row = &xd[src as usize * d..(src as usize + 1) * d];
                if w == 1.0 {
                    for (o, &v) in dst_row.iter_mut().zip(src_row.iter()) {
                        *o += v;
                    }
                } else {
                    let w = T::from_f64(w);
                    for (o, &v) in dst_row.iter_mut().zip(src_row.iter()) {
                        *o += w * v;
                    }
                }
            }
        });
        self.push(out, self.any_grad(&[x]), Op::RowMap { x, plan })
    }

    pub fn permute_elems(&mut self, x: NodeId, plan: Arc<ElemPerm>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), plan.source.len(), "permutation arity");
        let xd = xv.data();
        let out = profiled("permute", || Tensor::from_fn(&plan.out_shape, |i| xd[plan.source[i] as usize]));
        self.push(out, self.any_grad(&[x]), Op::PermuteElems { x, plan })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self.value(x).reshape(shape).expect("reshape arity");
        self.push(value, self.any_grad(&[x]), Op::Reshape(x))
    }

    /// Row-wise layer norm without affine parameters, eps 1e-6.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (m, d) = (xv.rows(), xv.cols());
        let mut mean = Tensor::zeros(&[m]);
        let mut rstd = Tensor::zeros(&[m]);
        let mut out = Tensor::zeros(&[m, d]);
        let eps = T::from_f64(1e-6);
        let inv_d = T::from_f64(1.0 / d as f64);
        {
            let xd = xv.data();
            let md = mean.data_mut();
            for i in 0..m {
                let mut s = T::ZERO;
                for &v in &xd[i * d..(i + 1) * d] {
                    s += v;
                }
                md[i] = s * inv_d;
            }
            let rd = rstd.data_mut();
            for i in 0..m {
                let mu = md[i];
                let mut var = T::ZERO;
                for &v in &xd[i * d..(i + 1) * d] {
                    let c = v - mu;
                    var += c * c;
                }
                rd[i] = T::ONE / (var * inv_d + eps).sqrt();
            }
            let od = out.data_mut();
            for i in 0..m {
                let (mu, rs) = (md[i], rd[i]);
                for c in 0..d {
                    od[i * d + c] = (xd[i * d + c] - mu) * rs;
                }
            }
        }
        self.push(out, self.any_grad(&[x]), Op::LayerNorm { x, mean, rstd })
    }

    /// `out[i, :] = x[i, :] * v` with `v` a single row.
    pub fn row_broadcast_mul(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let value = row_broadcast(self.value(x), self.value(v), |a, b| a * b);
        self.push(value, self.any_grad(&[x, v]), Op::RowBroadcastMul { x, v })
    }

    /// `out[i, :] = x[i, :] + v`.
    pub fn row_broadcast_add(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let value = row_broadcast(self.value(x), self.value(v), |a, b| a + b);
        self.push(value, self.any_grad(&[x, v]), Op::RowBroadcastAdd { x, v })
    }

    /// Fused modulation: `x + x * scale + shift`, elementwise.
    pub fn mod_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        assert_eq!(xv.shape(), sv.shape());
        assert_eq!(xv.shape(), hv.shape());
        let value = profiled("fused", || {
            let mut out = xv.clone();
            let od = out.data_mut();
            for ((o, &s), &h) in od.iter_mut().zip(sv.data()).zip(hv.data()) {
                *o = *o + *o * s + h;
            }
            out
        });
        self.push(value, self.any_grad(&[x, scale, shift]), Op::ModAffine { x, scale, shift })
    }

    /// Fused gated residual: `x + gate * y`, elementwise.
    pub fn gate_add(&mut self, x: NodeId, gate: NodeId, y: NodeId) -> NodeId {
        let (xv, gv, yv) = (self.value(x), self.value(gate), self.value(y));
        assert_eq!(xv.shape(), gv.shape());
        assert_eq!(xv.shape(), yv.shape());
        let value = profiled("fused", || {
            let mut out = xv.clone();
            let od = out.data_mut();
            for ((o, &g), &y) in od.iter_mut().zip(gv.data()).zip(yv.data()) {
                *o += g * y;
            }
            out
        });
        self.push(value, self.any_grad(&[x, gate, y]), Op::GateAdd { x, gate, y })
    }

    /// Scaled-dot-product attention over row spans; softmax is recomputed in
    /// the backward pass. The span list must cover disjoint query ranges.
    /// Values may be narrower or wider than the query/key width (both widths
    /// must split evenly across heads); the output takes the value width.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        spans: Arc<Vec<AttnSpan>>,
    ) -> NodeId {
        let d = self.value(q).cols();
        assert_eq!(d % heads, 0, "head count must divide the model width");
        assert_eq!(self.value(k).cols(), d);
        assert_eq!(self.value(v).cols() % heads, 0, "head count must divide the value width");
        let out = profiled("attention", || attention_forward(self.value(q), self.value(k), self.value(v), heads, &spans));
        self.push(out, self.any_grad(&[q, k, v]), Op::Attention { q, k, v, heads, spans })
    }

    /// `[V,2] (min, log_range) -> (min, min + exp(log_range))`: the max stays
    /// above the min by construction.
    pub fn scale_head(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 2, "scale head expects [V,2]");
        let xd = xv.data();
        let out = Tensor::from_fn(xv.shape(), |i| {
            if i % 2 == 0 {
                xd[i]
            } else {
                xd[i - 1] + xd[i].exp()
            }
        });
        self.push(out, self.any_grad(&[x]), Op::ScaleHead { x })
    }

    /// Condition points as a function of the predicted depth scale:
    /// pixel statistics stay fixed, depth denormalization carries gradient.
    pub fn unproject_conditions(&mut self, s: NodeId, rays: Arc<CondRays>) -> NodeId {
        let sv = self.value(s);
        assert_eq!(sv.cols(), 2);
        let sd = sv.data();
        let m = rays.len();
        let out = Tensor::from_fn(&[m, 3], |idx| {
            let (i, c) = (idx / 3, idx % 3);
            let view = rays.view[i] as usize;
            T::from_f64(
                rays.origin[i][c]
                    + sd[view * 2].to_f64() * rays.dir_min[i][c]
                    + sd[view * 2 + 1].to_f64() * rays.dir_max[i][c],
            )
        });
        self.push(out, self.any_grad(&[s]), Op::UnprojectCond { s, rays })
    }

    /// Mean squared error against a constant target, optionally masked.
    /// With a mask the mean runs over the unmasked elements only.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor<T>, mask: Option<Tensor<T>>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse target shape");
        let denom = match &mask {
            Some(m) => {
                assert_eq!(m.shape(), pv.shape(), "mse mask shape");
                m.data().iter().map(|x| x.to_f64()).sum::<f64>()
            }
            None => pv.len() as f64,
        };
        assert!(denom > 0.0, "mse over an empty selection");
        let mut acc = 0.0f64;
        for i in 0..pv.len() {
            let d = (pv.data()[i] - target.data()[i]).to_f64();
            let w = mask.as_ref().map_or(1.0, |m| m.data()[i].to_f64());
            acc += w * d * d;
        }
        let value = Tensor::scalar(T::from_f64(acc / denom));
        self.push(value, self.any_grad(&[pred]), Op::MseLoss { pred, target, mask })
    }

    /// Per-frame symmetric Chamfer distance against constant target frames,
    /// averaged over frames. `frame_of[i]` assigns pred row i to a frame.
    pub fn chamfer_loss(
        &mut self,
        pred: NodeId,
        target: Arc<Vec<Vec<[f64; 3]>>>,
        frame_of: Vec<u32>,
    ) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), 3, "chamfer expects [M,3] points");
        assert_eq!(pv.rows(), frame_of.len());
        let frames = target.len();
        let mut pred_by_frame: Vec<Vec<u32>> = vec![Vec::new(); frames];
        for (i, &f) in frame_of.iter().enumerate() {
            pred_by_frame[f as usize].push(i as u32);
        }
        let pd = pv.data();
        let point = |i: usize| -> [f64; 3] {
            [pd[i * 3].to_f64(), pd[i * 3 + 1].to_f64(), pd[i * 3 + 2].to_f64()]
        };
        let mut nearest_pt = vec![0u32; pv.rows()];
        let mut nearest_tp: Vec<Vec<u32>> = vec![Vec::new(); frames];
        let mut total = 0.0f64;
        for f in 0..frames {
            let preds = &pred_by_frame[f];
            let tgts = &target[f];
            assert!(!preds.is_empty() && !tgts.is_empty(), "chamfer over an empty frame");
            let mut fwd = 0.0;
            for &pi in preds {
                let p = point(pi as usize);
                let (mut best, mut best_j) = (f64::INFINITY, 0usize);
                for (j, t) in tgts.iter().enumerate() {
                    let d = dist3(p, *t);
                    if d < best {
                        best = d;
                        best_j = j;
                    }
                }
                nearest_pt[pi as usize] = best_j as u32;
                fwd += best;
            }
            let mut bwd = 0.0;
            let mut back_idx = Vec::with_capacity(tgts.len());
            for t in tgts {
                let (mut best, mut best_i) = (f64::INFINITY, 0u32);
                for &pi in preds {
                    let d = dist3(point(pi as usize), *t);
                    if d < best {
                        best = d;
                        best_i = pi;
                    }
                }
                back_idx.push(best_i);
                bwd += best;
            }
            nearest_tp[f] = back_idx;
            total += 0.5 * (fwd / preds.len() as f64 + bwd / tgts.len() as f64);
        }
        let value = Tensor::scalar(T::from_f64(total / frames as f64));
        self.push(
            value,
            self.any_grad(&[pred]),
            Op::ChamferLoss { pred, target, frame_of, nearest_pt, nearest_tp },
        )
    }

    // -- backward ------------------------------------------------------------

    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let seed = Tensor::full(self.value(loss).shape(), T::ONE);
        grads[loss.0 as usize] = Some(seed);
        for id in (0..=loss.0 as usize).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.accumulate(node, &g, &mut grads);
            }
            if node.param.is_some() || matches!(node.op, Op::Leaf) {
                grads[id] = Some(g); // leaves keep their gradient for readers
            }
        }
        Gradients { by_node: grads }
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'a mut Tensor<T>> {
        let node = &self.nodes[id.0 as usize];
        if !node.needs_grad {
            return None;
        }
        let slot = &mut grads[id.0 as usize];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut()
    }

    fn accumulate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_assign(da, g.data(), T::ONE);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    add_assign(db, g.data(), T::ONE);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_assign(da, g.data(), T::ONE);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    add_assign(db, g.data(), -T::ONE);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((o, &gv), &bvv) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bvv;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for ((o, &gv), &avv) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * avv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_assign(da, g.data(), T::from_f64(*c));
                }
            }
            Op::Exp(a) => {
                let out = node.value.clone();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((o, &gv), &ov) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gv * ov;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).clone();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((o, &gv), &xvv) in da.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv * gelu_bwd(xvv);
                    }
                }
            }
            Op::Silu(a) => {
                let xv = self.value(*a).clone();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((o, &gv), &xvv) in da.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv * silu_bwd(xvv);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if self.needs_grad(*a) {
                    let da = matmul_nt(g, &bv);
                    if let Some(buf) = self.grad_buf(grads, *a) {
                        add_assign(buf, da.data(), T::ONE);
                    }
                }
                if self.needs_grad(*b) {
                    let db = matmul_tn(&av, g);
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        add_assign(buf, db.data(), T::ONE);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).clone(), self.value(*w).clone());
                if self.needs_grad(*x) {
                    let dx = matmul_nt(g, &wv);
                    if let Some(buf) = self.grad_buf(grads, *x) {
                        add_assign(buf, dx.data(), T::ONE);
                    }
                }
                if self.needs_grad(*w) {
                    let dw = matmul_tn(&xv, g);
                    if let Some(buf) = self.grad_buf(grads, *w) {
                        add_assign(buf, dw.data(), T::ONE);
                    }
                }
                if self.needs_grad(*b) {
                    let db = column_sum(g);
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        add_assign(buf, db.data(), T::ONE);
                    }
                }
            }
            Op::RowMap { x, plan } => {
                let d = node.value.cols();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dxd = dx.data_mut();
                    let gd = g.data();
                    for &(dst, src, w) in &plan.entries {
                        let src_row = &mut dxd[src as usize * d..(src as usize + 1) * d];
                        let g_row = &gd[dst as usize * d..(dst as usize + 1) * d];
                        if w == 1.0 {
                            for (o, &v) in src_row.iter_mut().zip(g_row.iter()) {
                                *o += v;
                            }
                        } else {
                            let w = T::from_f64(w);
                            for (o, &v) in src_row.iter_mut().zip(g_row.iter()) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
            Op::PermuteElems { x, plan } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dxd = dx.data_mut();
                    let gd = g.data();
                    for (i, &src) in plan.source.iter().enumerate() {
                        dxd[src as usize] += gd[i];
                    }
                }
            }
            Op::LayerNorm { x, mean, rstd } => {
                let xv = self.value(*x).clone();
                let (m, d) = (xv.rows(), xv.cols());
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dxd = dx.data_mut();
                    let (xd, gd) = (xv.data(), g.data());
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for i in 0..m {
                        let (mu, rs) = (mean.data()[i], rstd.data()[i]);
                        let mut g_mean = T::ZERO;
                        let mut gx_mean = T::ZERO;
                        for c in 0..d {
                            let xhat = (xd[i * d + c] - mu) * rs;
                            g_mean += gd[i * d + c];
                            gx_mean += gd[i * d + c] * xhat;
                        }
                        g_mean *= inv_d;
                        gx_mean *= inv_d;
                        for c in 0..d {
                            let xhat = (xd[i * d + c] - mu) * rs;
                            dxd[i * d + c] += rs * (gd[i * d + c] - g_mean - xhat * gx_mean);
                        }
                    }
                }
            }
            Op::RowBroadcastMul { x, v } => {
                let (xv, vv) = (self.value(*x).clone(), self.value(*v).clone());
                let d = vv.len();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dxd = dx.data_mut();
                    let (gd, vd) = (g.data(), vv.data());
                    for (row, grow) in dxd.chunks_exact_mut(d).zip(gd.chunks_exact(d)) {
                        for c in 0..d {
                            row[c] += grow[c] * vd[c];
                        }
                    }
                }
                if let Some(dv) = self.grad_buf(grads, *v) {
                    let dvd = dv.data_mut();
                    let (gd, xd) = (g.data(), xv.data());
                    for (grow, xrow) in gd.chunks_exact(d).zip(xd.chunks_exact(d)) {
                        for c in 0..d {
                            dvd[c] += grow[c] * xrow[c];
                        }
                    }
                }
            }
            Op::RowBroadcastAdd { x, v } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_assign(dx, g.data(), T::ONE);
                }
                if let Some(dv) = self.grad_buf(grads, *v) {
                    let d = dv.len();
                    let dvd = dv.data_mut();
                    for grow in g.data().chunks_exact(d) {
                        for c in 0..d {
                            dvd[c] += grow[c];
                        }
                    }
                }
            }
            Op::ModAffine { x, scale, shift } => {
                let (xv, sv) = (self.value(*x).clone(), self.value(*scale).clone());
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for ((o, &gv), &s) in dx.data_mut().iter_mut().zip(g.data()).zip(sv.data()) {
                        *o += gv * (T::ONE + s);
                    }
                }
                if let Some(ds) = self.grad_buf(grads, *scale) {
                    for ((o, &gv), &x) in ds.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gv * x;
                    }
                }
                if let Some(dh) = self.grad_buf(grads, *shift) {
                    add_assign(dh, g.data(), T::ONE);
                }
            }
            Op::GateAdd { x, gate, y } => {
                let (gv_t, yv) = (self.value(*gate).clone(), self.value(*y).clone());
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_assign(dx, g.data(), T::ONE);
                }
                if let Some(dg) = self.grad_buf(grads, *gate) {
                    for ((o, &gv), &y) in dg.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o += gv * y;
                    }
                }
                if let Some(dy) = self.grad_buf(grads, *y) {
                    for ((o, &gv), &gt) in dy.data_mut().iter_mut().zip(g.data()).zip(gv_t.data()) {
                        *o += gv * gt;
                    }
                }
            }
            Op::Attention { q, k, v, heads, spans } => {
                let (qv, kv, vv) =
                    (self.value(*q).clone(), self.value(*k).clone(), self.value(*v).clone());
                let (dq, dk, dv) = attention_backward(&qv, &kv, &vv, *heads, spans, g);
                if let Some(buf) = self.grad_buf(grads, *q) {
                    add_assign(buf, dq.data(), T::ONE);
                }
                if let Some(buf) = self.grad_buf(grads, *k) {
                    add_assign(buf, dk.data(), T::ONE);
                }
                if let Some(buf) = self.grad_buf(grads, *v) {
                    add_assign(buf, dv.data(), T::ONE);
                }
            }
            Op::ScaleHead { x } => {
                let xv = self.value(*x).clone();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let dxd = dx.data_mut();
                    let (gd, xd) = (g.data(), xv.data());
                    for i in (0..xd.len()).step_by(2) {
                        dxd[i] += gd[i] + gd[i + 1];
                        dxd[i + 1] += gd[i + 1] * xd[i + 1].exp();
                    }
                }
            }
            Op::UnprojectCond { s, rays } => {
                if let Some(ds) = self.grad_buf(grads, *s) {
                    let dsd = ds.data_mut();
                    let gd = g.data();
                    for i in 0..rays.len() {
                        let view = rays.view[i] as usize;
                        let mut min_dot = 0.0f64;
                        let mut max_dot = 0.0f64;
                        for c in 0..3 {
                            min_dot += rays.dir_min[i][c] * gd[i * 3 + c].to_f64();
                            max_dot += rays.dir_max[i][c] * gd[i * 3 + c].to_f64();
                        }
                        dsd[view * 2] += T::from_f64(min_dot);
                        dsd[view * 2 + 1] += T::from_f64(max_dot);
                    }
                }
            }
            Op::MseLoss { pred, target, mask } => {
                let pv = self.value(*pred).clone();
                let denom = match mask {
                    Some(m) => m.data().iter().map(|x| x.to_f64()).sum::<f64>(),
                    None => pv.len() as f64,
                };
                let gs = g.data()[0];
                let scale = T::from_f64(2.0 / denom);
                if let Some(dp) = self.grad_buf(grads, *pred) {
                    let dpd = dp.data_mut();
                    for i in 0..pv.len() {
                        let w = mask.as_ref().map_or(T::ONE, |m| m.data()[i]);
                        dpd[i] += gs * scale * w * (pv.data()[i] - target.data()[i]);
                    }
                }
            }
            Op::ChamferLoss { pred, target, frame_of, nearest_pt, nearest_tp } => {
                let pv = self.value(*pred).clone();
                let frames = target.len();
                let mut per_frame_count = vec![0usize; frames];
                for &f in frame_of {
                    per_frame_count[f as usize] += 1;
                }
                let gs = g.data()[0].to_f64();
                if let Some(dp) = self.grad_buf(grads, *pred) {
                    let dpd = dp.data_mut();
                    let pd = pv.data();
                    let point = |i: usize| -> [f64; 3] {
                        [pd[i * 3].to_f64(), pd[i * 3 + 1].to_f64(), pd[i * 3 + 2].to_f64()]
                    };
                    // pred -> target side
                    for i in 0..pv.rows() {
                        let f = frame_of[i] as usize;
                        let t = target[f][nearest_pt[i] as usize];
                        let p = point(i);
                        let dist = dist3(p, t).max(1e-12);
                        let w = gs * 0.5 / (frames as f64 * per_frame_count[f] as f64);
                        for c in 0..3 {
                            dpd[i * 3 + c] += T::from_f64(w * (p[c] - t[c]) / dist);
                        }
                    }
                    // target -> pred side
                    for f in 0..frames {
                        let tgts = &target[f];
                        for (j, t) in tgts.iter().enumerate() {
                            let pi = nearest_tp[f][j] as usize;
                            let p = point(pi);
                            let dist = dist3(p, *t).max(1e-12);
                            let w = gs * 0.5 / (frames as f64 * tgts.len() as f64);
                            for c in 0..3 {
                                dpd[pi * 3 + c] += T::from_f64(w * (p[c] - t[c]) / dist);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    add_assign(dx, g.data(), T::ONE);
                }
            }
        }
    }
}

fn add_assign<T: Scalar>(buf: &mut Tensor<T>, delta: &[T], scale: T) {
    debug_assert_eq!(buf.len(), delta.len());
    for (o, &d) in buf.data_mut().iter_mut().zip(delta.iter()) {
        *o += scale * d;
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn row_broadcast<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = v.len();
    assert_eq!(x.cols(), d, "broadcast width");
    let mut out = x.clone();
    let vd = v.data().to_vec();
    for row in out.data_mut().chunks_exact_mut(d) {
        for c in 0..d {
            row[c] = f(row[c], vd[c]);
        }
    }
    out
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh_fast())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh_fast();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

fn silu_fwd<T: Scalar>(x: T) -> T {
    x / (T::ONE + (-x).exp_fast())
}

fn silu_bwd<T: Scalar>(x: T) -> T {
    let s = T::ONE / (T::ONE + (-x).exp_fast());
    s * (T::ONE + x * (T::ONE - s))
}

// -- attention kernels -------------------------------------------------------

/// Head-transposed copies of a row block: `kt[e * rows + i] = src[(r0+i) * d + h0 + e]`.
fn transpose_head_block<T: Scalar>(src: &[T], r0: usize, rows: usize, d: usize, h0: usize, dh: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; dh * rows];
    for i in 0..rows {
        let row = &src[(r0 + i) * d + h0..(r0 + i) * d + h0 + dh];
        for (e, &x) in row.iter().enumerate() {
            out[e * rows + i] = x;
        }
    }
    out
}

/// In-place numerically stable softmax with vector-friendly passes: max scan,
/// exp map, sum, scale. Returns nothing; `row` holds the probabilities.
#[inline]
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut m0 = T::from_f64(f64::NEG_INFINITY);
    let mut m1 = m0;
    let mut chunks = row.chunks_exact(2);
    for c in chunks.by_ref() {
        m0 = m0.maximum(c[0]);
        m1 = m1.maximum(c[1]);
    }
    for &x in chunks.remainder() {
        m0 = m0.maximum(x);
    }
    let maxs = m0.maximum(m1);
    for x in row.iter_mut() {
        *x = (*x - maxs).exp_fast();
    }
    let mut acc = [T::ZERO; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut z = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in chunks.remainder() {
        z += x;
    }
    let inv = T::ONE / z;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Four-accumulator dot product; vectorizes where a plain reduction cannot.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder().iter()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    spans: &[AttnSpan],
) -> Tensor<T> {
    let d = q.cols();
    let dh = d / heads;
    let dv_total = v.cols();
    let dvh = dv_total / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Tensor::zeros(&[q.rows(), dv_total]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    // Work splits over (span, head) pairs; every task owns a disjoint
    // (row-range, head-slice) block of the output, merged sequentially.
    // Keys and values are transposed into contiguous per-head blocks so the
    // inner loops vectorize over the key axis.
    let tasks: Vec<(usize, usize)> = spans
        .iter()
        .enumerate()
        .flat_map(|(si, _)| (0..heads).map(move |h| (si, h)))
        .collect();
    let results: Vec<(usize, usize, Vec<T>)> = tasks
        .par_iter()
        .map(|&(si, h)| {
            let span = &spans[si];
            let (nq, nk) = (span.q1 - span.q0, span.k1 - span.k0);
            let h0 = h * dh;
            let v0 = h * dvh;
            let mut local = vec![T::ZERO; nq * dvh];
            let mut scores = vec![T::ZERO; nk];
            let kt = transpose_head_block(kd, span.k0, nk, d, h0, dh);
            let vt = transpose_head_block(vd, span.k0, nk, dv_total, v0, dvh);
            for qi in 0..nq {
                let q_row = &qd[(span.q0 + qi) * d + h0..(span.q0 + qi) * d + h0 + dh];
                for s in scores.iter_mut() {
                    *s = T::ZERO;
                }
                for (e, &qv) in q_row.iter().enumerate() {
                    let qv = qv * scale;
                    let k_row = &kt[e * nk..(e + 1) * nk];
                    for (s, &kv) in scores.iter_mut().zip(k_row.iter()) {
                        *s += qv * kv;
                    }
                }
                softmax_row(&mut scores);
                let out_row = &mut local[qi * dvh..(qi + 1) * dvh];
                for (e, o) in out_row.iter_mut().enumerate() {
                    *o = dot(&scores, &vt[e * nk..(e + 1) * nk]);
                }
            }
            (si, h, local)
        })
        .collect();
    let od = out.data_mut();
    for (si, h, local) in results {
        let span = &spans[si];
        let v0 = h * dvh;
        for (qi, row) in local.chunks_exact(dvh).enumerate() {
            od[(span.q0 + qi) * dv_total + v0..(span.q0 + qi) * dv_total + v0 + dvh].copy_from_slice(row);
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    spans: &[AttnSpan],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / heads;
    let dv_total = v.cols();
    let dvh = dv_total / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    // Key/value ranges may be shared between spans (cross attention), so each
    // (span, head) task produces local buffers merged sequentially in task
    // order: deterministic regardless of scheduling.
    let tasks: Vec<(usize, usize)> = spans
        .iter()
        .enumerate()
        .flat_map(|(si, _)| (0..heads).map(move |h| (si, h)))
        .collect();
    let locals: Vec<(usize, usize, Vec<T>, Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|&(si, h)| {
            let span = &spans[si];
            let (nq, nk) = (span.q1 - span.q0, span.k1 - span.k0);
            let h0 = h * dh;
            let v0 = h * dvh;
            let mut dq = vec![T::ZERO; nq * dh];
            // dk/dv accumulate head-transposed.
            let mut dkt = vec![T::ZERO; dh * nk];
            let mut dvt = vec![T::ZERO; dvh * nk];
            let mut probs = vec![T::ZERO; nk];
            let mut dp = vec![T::ZERO; nk];
            let mut ds = vec![T::ZERO; nk];
            let kt = transpose_head_block(kd, span.k0, nk, d, h0, dh);
            let vt = transpose_head_block(vd, span.k0, nk, dv_total, v0, dvh);
            for qi in 0..nq {
                let q_row = &qd[(span.q0 + qi) * d + h0..(span.q0 + qi) * d + h0 + dh];
                let g_row = &gd[(span.q0 + qi) * dv_total + v0..(span.q0 + qi) * dv_total + v0 + dvh];
                // Recompute the softmax row.
                for p in probs.iter_mut() {
                    *p = T::ZERO;
                }
                for (e, &qv) in q_row.iter().enumerate() {
                    let qv = qv * scale;
                    let k_row = &kt[e * nk..(e + 1) * nk];
                    for (p, &kv) in probs.iter_mut().zip(k_row.iter()) {
                        *p += qv * kv;
                    }
                }
                softmax_row(&mut probs);
                // dp = g . v per key; correction = sum_k p_k dp_k.
                for x in dp.iter_mut() {
                    *x = T::ZERO;
                }
                for (e, &gv) in g_row.iter().enumerate() {
                    let v_row = &vt[e * nk..(e + 1) * nk];
                    for (x, &vv) in dp.iter_mut().zip(v_row.iter()) {
                        *x += gv * vv;
                    }
                }
                let correction = dot(&probs, &dp);
                for ((s, &p), &x) in ds.iter_mut().zip(probs.iter()).zip(dp.iter()) {
                    *s = p * (x - correction) * scale;
                }
                // dq[qi] += ds @ k ; dk_e += ds * q_e ; dv_e += p * g_e.
                let dq_row = &mut dq[qi * dh..(qi + 1) * dh];
                for (e, o) in dq_row.iter_mut().enumerate() {
                    *o += dot(&ds, &kt[e * nk..(e + 1) * nk]);
                }
                for (e, &qv) in q_row.iter().enumerate() {
                    let dk_row = &mut dkt[e * nk..(e + 1) * nk];
                    for (o, &s) in dk_row.iter_mut().zip(ds.iter()) {
                        *o += s * qv;
                    }
                }
                for (e, &gv) in g_row.iter().enumerate() {
                    let dv_row = &mut dvt[e * nk..(e + 1) * nk];
                    for (o, &p) in dv_row.iter_mut().zip(probs.iter()) {
                        *o += p * gv;
                    }
                }
            }
            (si, h, dq, dkt, dvt)
        })
        .collect();
    let mut dq = Tensor::zeros(&[q.rows(), d]);
    let mut dk = Tensor::zeros(&[k.rows(), d]);
    let mut dv = Tensor::zeros(&[v.rows(), dv_total]);
    for (si, h, ldq, ldkt, ldvt) in locals {
        let span = &spans[si];
        let (nk, h0, v0) = (span.k1 - span.k0, h * dh, h * dvh);
        let dqd = dq.data_mut();
        for (qi, row) in ldq.chunks_exact(dh).enumerate() {
            for (e, &x) in row.iter().enumerate() {
                dqd[(span.q0 + qi) * d + h0 + e] += x;
            }
        }
        let dkd = dk.data_mut();
        for e in 0..dh {
            for i in 0..nk {
                dkd[(span.k0 + i) * d + h0 + e] += ldkt[e * nk + i];
            }
        }
        let dvd = dv.data_mut();
        for e in 0..dvh {
            for i in 0..nk {
                dvd[(span.k0 + i) * dv_total + v0 + e] += ldvt[e * nk + i];
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use smv4d_core::rng::Prng;

    fn randn(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal() * 0.5)
    }

    #[test]
    fn forward_values_are_deterministic() {
        let mut rng = Prng::new(1, "tape");
        let x = randn(&[6, 8], &mut rng);
        let w = randn(&[8, 8], &mut rng);
        let b = randn(&[8], &mut rng);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let xi = tape.input(x.clone());
            let wi = tape.param("w", w.clone());
            let bi = tape.param("b", b.clone());
            let y = tape.linear(xi, wi, bi);
            let z = tape.gelu(y);
            tape.value(z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_key_attention_copies_value() {
        // With one key/value row every query attends fully to it.
        let mut rng = Prng::new(2, "tape");
        let mut tape = Tape::<f64>::new();
        let q = tape.input(randn(&[5, 8], &mut rng));
        let kv = randn(&[1, 8], &mut rng);
        let k = tape.input(kv.clone());
        let v = tape.input(kv.clone());
        let spans = Arc::new(vec![AttnSpan { q0: 0, q1: 5, k0: 0, k1: 1 }]);
        let out = tape.attention(q, k, v, 2, spans);
        for row in tape.value(out).data().chunks_exact(8) {
            for (o, &vv) in row.iter().zip(kv.data()) {
                assert!((o - vv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        // Permuting query rows permutes outputs; permuting keys+values
        // together leaves outputs unchanged.
        let mut rng = Prng::new(3, "tape");
        let qv = randn(&[4, 8], &mut rng);
        let kv = randn(&[6, 8], &mut rng);
        let vv = randn(&[6, 8], &mut rng);
        let spans = Arc::new(vec![AttnSpan { q0: 0, q1: 4, k0: 0, k1: 6 }]);
        let base = {
            let mut tape = Tape::<f64>::new();
            let (q, k, v) = (tape.input(qv.clone()), tape.input(kv.clone()), tape.input(vv.clone()));
            let out = tape.attention(q, k, v, 4, spans.clone());
            tape.value(out).clone()
        };
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute_rows = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |i| {
                let (r, c) = (i / 8, i % 8);
                t.data()[perm[r] * 8 + c]
            })
        };
        let shuffled = {
            let mut tape = Tape::<f64>::new();
            let (q, k, v) = (tape.input(qv.clone()), tape.input(permute_rows(&kv)), tape.input(permute_rows(&vv)));
            let out = tape.attention(q, k, v, 4, spans);
            tape.value(out).clone()
        };
        assert!(base.max_abs_diff(&shuffled) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_via_constant_values() {
        // With v = all-ones, the output equals the row sums of the attention
        // weights, which must be exactly 1.
        let mut rng = Prng::new(4, "tape");
        let mut tape = Tape::<f64>::new();
        let q = tape.input(randn(&[7, 8], &mut rng));
        let k = tape.input(randn(&[9, 8], &mut rng));
        let v = tape.input(Tensor::full(&[9, 8], 1.0));
        let spans = Arc::new(vec![
            AttnSpan { q0: 0, q1: 3, k0: 0, k1: 9 },
            AttnSpan { q0: 3, q1: 7, k0: 2, k1: 5 },
        ]);
        let out = tape.attention(q, k, v, 2, spans);
        for &x in tape.value(out).data() {
            assert!((x - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_head_keeps_max_above_min() {
        let mut rng = Prng::new(5, "tape");
        for _ in 0..50 {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(randn(&[3, 2], &mut rng));
            let s = tape.scale_head(x);
            let sv = tape.value(s);
            for v in 0..3 {
                assert!(sv.at(&[v, 1]) > sv.at(&[v, 0]));
            }
        }
    }

    #[test]
    fn mse_masked_ignores_masked_elements() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.input(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let target = Tensor::from_vec(&[4], vec![0.0, 2.0, 0.0, 4.0]);
        let mask = Tensor::from_vec(&[4], vec![1.0, 1.0, 0.0, 1.0]);
        let loss = tape.mse_loss(pred, target, Some(mask));
        // Only elements 0,1,3 count: ((1)^2 + 0 + 0) / 3.
        assert!((tape.value(loss).data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chamfer_loss_matches_pointset_reference() {
        use smv4d_core::geometry::Vec3;
        use smv4d_core::pointset::chamfer_frames;
        let mut rng = Prng::new(6, "tape");
        for _ in 0..20 {
            let frames = 3;
            let k = 5;
            let pred = randn(&[frames * k, 3], &mut rng);
            let tgt: Vec<Vec<[f64; 3]>> = (0..frames)
                .map(|_| (0..4).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect())
                .collect();
            let frame_of: Vec<u32> = (0..frames * k).map(|i| (i / k) as u32).collect();
            let mut tape = Tape::<f64>::new();
            let p = tape.input(pred.clone());
            let loss = tape.chamfer_loss(p, Arc::new(tgt.clone()), frame_of);
            let got = tape.value(loss).data()[0];

            let pred_frames: Vec<Vec<Vec3>> = (0..frames)
                .map(|f| (0..k).map(|i| {
                    let row = (f * k + i) * 3;
                    Vec3::new(pred.data()[row], pred.data()[row + 1], pred.data()[row + 2])
                }).collect())
                .collect();
            let tgt_frames: Vec<Vec<Vec3>> = tgt
                .iter()
                .map(|f| f.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
                .collect();
            let want = chamfer_frames(&pred_frames, &tgt_frames).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}
