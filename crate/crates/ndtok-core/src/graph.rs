//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation eagerly; node creation order is a
//! topological order, so [`Graph::backward`] walks ids in reverse. The graph
//! is consumed by backward (one backward per forward). Heavy kernels are the
//! shared routines in [`crate::linalg`], which keeps values bit-identical
//! with the graph-free inference path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::linalg;
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    /// C = A·Bᵀ
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    /// n×d plus a 1×d bias row added to every row.
    AddRowBroadcast { a: usize, bias: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<f64>, inv_stds: Vec<f64> },
    Gelu { a: usize },
    Sigmoid { a: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize, len: usize },
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, indices: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// Mean over rows of −log softmax(logits)[label]; caches the softmax.
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    /// Mean over elements of the numerically stable logit BCE.
    BceWithLogits { logits: usize, targets: usize },
    /// 1 − (2·Σpt + s)/(Σp + Σt + s) with s = 1, p = sigmoid(logits).
    DiceLoss { logits: usize, targets: usize },
    /// Mean over rows of 1 − cos(a_row, b_row); zero-norm rows contribute 1.
    CosineAlignment { a: usize, b: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, usize>,
    consumed: bool,
}

/// Gradients for every leaf that required them, addressable by id or by
/// parameter name.
pub struct GradientMap {
    by_id: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

impl GradientMap {
    pub fn of(&self, id: TensorId) -> Option<&Tensor> {
        self.by_id.get(&id.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_id.get(id))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_ids: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape_of(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: Option<String>) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            name,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, requires_grad: bool, what: &str) -> Result<TensorId> {
        value.ensure_finite(what)?;
        Ok(self.push(op, value, requires_grad, None))
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        value.ensure_finite("constant")?;
        Ok(self.push(Op::Leaf, value, false, None))
    }

    /// Differentiable unnamed input.
    pub fn var(&mut self, value: Tensor) -> Result<TensorId> {
        value.ensure_finite("var")?;
        Ok(self.push(Op::Leaf, value, true, None))
    }

    /// Differentiable leaf bound to a named parameter. Repeated calls with
    /// the same name return the same node so gradients accumulate correctly
    /// when a parameter is used more than once.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(TensorId(id));
        }
        let value = store.get(name)?.clone();
        value.ensure_finite(name)?;
        let id = self.push(Op::Leaf, value, true, Some(name.into()));
        self.param_ids.insert(name.into(), id.0);
        Ok(id)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape_of(a);
        let (kb, m) = self.shape_of(b);
        if k != kb {
            return Err(invalid(format!("matmul shape mismatch: {n}x{k} · {kb}x{m}")));
        }
        let data = linalg::matmul(self.nodes[a.0].value.data(), n, k, self.nodes[b.0].value.data(), m);
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::Matmul { a: a.0, b: b.0 }, Tensor::new(n, m, data)?, rg, "matmul")
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape_of(a);
        let (m, kb) = self.shape_of(b);
        if k != kb {
            return Err(invalid(format!("matmul_nt shape mismatch: {n}x{k} · ({m}x{kb})ᵀ")));
        }
        let data = linalg::matmul_nt(self.nodes[a.0].value.data(), n, k, self.nodes[b.0].value.data(), m);
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::MatmulNt { a: a.0, b: b.0 }, Tensor::new(n, m, data)?, rg, "matmul_nt")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("add shape mismatch"));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::Add { a: a.0, b: b.0 }, value, rg, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("sub shape mismatch"));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::Sub { a: a.0, b: b.0 }, value, rg, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("mul shape mismatch"));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::Mul { a: a.0, b: b.0 }, value, rg, "mul")
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::Scale { a: a.0, factor }, value, rg, "scale")
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape_of(a);
        let (bn, bd) = self.shape_of(bias);
        if bn != 1 || bd != d {
            return Err(invalid(format!("bias shape {bn}x{bd} does not broadcast over {n}x{d}")));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        linalg::add_bias_rows(&mut data, n, d, self.nodes[bias.0].value.data());
        let rg = self.needs_grad(&[a.0, bias.0]);
        self.push_checked(Op::AddRowBroadcast { a: a.0, bias: bias.0 }, Tensor::new(n, d, data)?, rg, "bias")
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape_of(a);
        let data = linalg::softmax_rows(self.nodes[a.0].value.data(), n, d);
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::SoftmaxRows { a: a.0 }, Tensor::new(n, d, data)?, rg, "softmax")
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape_of(x);
        if d < 2 {
            return Err(invalid("layer_norm needs width >= 2"));
        }
        let (gs, bs) = (self.shape_of(gamma), self.shape_of(beta));
        if gs != (1, d) || bs != (1, d) {
            return Err(invalid("layer_norm affine shape mismatch"));
        }
        let (data, means, inv_stds) = linalg::layer_norm_rows(
            self.nodes[x.0].value.data(),
            n,
            d,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        self.push_checked(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, means, inv_stds },
            Tensor::new(n, d, data)?,
            rg,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.rows(), va.cols(), linalg::gelu_vec(va.data()))?;
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::Gelu { a: a.0 }, value, rg, "gelu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.rows(), va.cols(), linalg::sigmoid_vec(va.data()))?;
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::Sigmoid { a: a.0 }, value, rg, "sigmoid")
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.shape_of(a);
        if start + len > d {
            return Err(invalid("slice_cols out of range"));
        }
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::SliceCols { a: a.0, start, len }, Tensor::new(n, len, data)?, rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(invalid("concat_cols needs at least one part"));
        }
        let n = self.shape_of(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape_of(p).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                if self.shape_of(p).0 != n {
                    return Err(invalid("concat_cols row mismatch"));
                }
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        self.push_checked(Op::ConcatCols { parts: ids }, Tensor::new(n, total, data)?, rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.shape_of(a);
        if start + len > n {
            return Err(invalid("slice_rows out of range"));
        }
        let src = self.nodes[a.0].value.data();
        let data = src[start * d..(start + len) * d].to_vec();
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::SliceRows { a: a.0, start, len }, Tensor::new(len, d, data)?, rg, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(invalid("concat_rows needs at least one part"));
        }
        let d = self.shape_of(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pn, pd) = self.shape_of(p);
            if pd != d {
                return Err(invalid("concat_rows col mismatch"));
            }
            rows += pn;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        self.push_checked(Op::ConcatRows { parts: ids }, Tensor::new(rows, d, data)?, rg, "concat_rows")
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = self.shape_of(a);
        if indices.iter().any(|&i| i >= n) {
            return Err(invalid("gather_rows index out of range"));
        }
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(
            Op::GatherRows { a: a.0, indices: indices.to_vec() },
            Tensor::new(indices.len(), d, data)?,
            rg,
            "gather_rows",
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::SumAll { a: a.0 }, Tensor::scalar(s), rg, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(&[a.0]);
        self.push_checked(Op::MeanAll { a: a.0 }, Tensor::scalar(s), rg, "mean_all")
    }

    /// Mean over rows of −log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = self.shape_of(logits);
        if labels.len() != n {
            return Err(invalid("label count does not match logit rows"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = linalg::softmax_rows(self.nodes[logits.0].value.data(), n, k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            loss -= math::ln(probs[i * k + label]);
        }
        loss /= n as f64;
        let rg = self.needs_grad(&[logits.0]);
        self.push_checked(
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            rg,
            "cross_entropy",
        )
    }

    /// Mean elementwise stable BCE with logits; gradients flow into logits only.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        let (vl, vt) = (&self.nodes[logits.0].value, &self.nodes[targets.0].value);
        if vl.len() != vt.len() {
            return Err(invalid("bce length mismatch"));
        }
        let mut loss = 0.0;
        for (&x, &t) in vl.data().iter().zip(vt.data()) {
            // max(x,0) − x·t + ln(1 + e^{−|x|})
            loss += x.max(0.0) - x * t + math::softplus(-math::abs(x));
        }
        loss /= vl.len() as f64;
        let rg = self.needs_grad(&[logits.0]);
        self.push_checked(
            Op::BceWithLogits { logits: logits.0, targets: targets.0 },
            Tensor::scalar(loss),
            rg,
            "bce",
        )
    }

    /// Smoothed Dice loss over sigmoid probabilities, smoothing constant 1.
    pub fn dice_loss(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        let (vl, vt) = (&self.nodes[logits.0].value, &self.nodes[targets.0].value);
        if vl.len() != vt.len() {
            return Err(invalid("dice length mismatch"));
        }
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (&x, &t) in vl.data().iter().zip(vt.data()) {
            let p = math::sigmoid(x);
            inter += p * t;
            psum += p;
            tsum += t;
        }
        let loss = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
        let rg = self.needs_grad(&[logits.0]);
        self.push_checked(
            Op::DiceLoss { logits: logits.0, targets: targets.0 },
            Tensor::scalar(loss),
            rg,
            "dice",
        )
    }

    /// Mean over rows of 1 − cos(a_i, b_i). Rows where either norm is zero
    /// contribute 1 (treated as orthogonal) with zero gradient.
    pub fn cosine_alignment(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("cosine shape mismatch"));
        }
        let (n, d) = (va.rows(), va.cols());
        let mut loss = 0.0;
        for i in 0..n {
            let ra = &va.data()[i * d..(i + 1) * d];
            let rb = &vb.data()[i * d..(i + 1) * d];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let denom = math::sqrt(na) * math::sqrt(nb);
            loss += if denom == 0.0 { 1.0 } else { 1.0 - dot / denom };
        }
        loss /= n as f64;
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push_checked(Op::CosineAlignment { a: a.0, b: b.0 }, Tensor::scalar(loss), rg, "cosine")
    }

    /// Reverse pass from a scalar loss. Consumes the graph: a second call
    /// fails with [`CoreError::GraphConsumed`].
    pub fn backward(&mut self, loss: TensorId) -> Result<GradientMap> {
        if self.consumed {
            return Err(CoreError::GraphConsumed);
        }
        self.consumed = true;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(invalid("backward requires a scalar loss"));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &grad, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(grad);
            }
        }

        let mut by_id = BTreeMap::new();
        let mut names = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, grads[id].take()) {
                let t = Tensor::new(node.value.rows(), node.value.cols(), g)?;
                by_id.insert(id, t);
                if let Some(name) = &node.name {
                    names.insert(name.clone(), id);
                }
            }
        }
        Ok(GradientMap { by_id, names })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target].value.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let value = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (n, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let m = self.nodes[*b].value.cols();
                let da = linalg::matmul_nt(grad, n, m, self.nodes[*b].value.data(), k);
                self.accumulate(grads, *a, |g| add_into(g, &da));
                let db = linalg::matmul_tn(self.nodes[*a].value.data(), n, k, grad, m);
                self.accumulate(grads, *b, |g| add_into(g, &db));
            }
            Op::MatmulNt { a, b } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A.
                let (n, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let m = self.nodes[*b].value.rows();
                let da = linalg::matmul(grad, n, m, self.nodes[*b].value.data(), k);
                self.accumulate(grads, *a, |g| add_into(g, &da));
                let db = linalg::matmul_tn(grad, n, m, self.nodes[*a].value.data(), k);
                self.accumulate(grads, *b, |g| add_into(g, &db));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
                self.accumulate(grads, *b, |g| add_into(g, grad));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
                self.accumulate(grads, *b, |g| sub_into(g, grad));
            }
            Op::Mul { a, b } => {
                let vb = self.nodes[*b].value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(grad).zip(vb) {
                        *g += d * o;
                    }
                });
                let va = self.nodes[*a].value.data();
                self.accumulate(grads, *b, |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(grad).zip(va) {
                        *g += d * o;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, |g| {
                    for (g, &d) in g.iter_mut().zip(grad) {
                        *g += f * d;
                    }
                });
            }
            Op::AddRowBroadcast { a, bias } => {
                self.accumulate(grads, *a, |g| add_into(g, grad));
                let (n, d) = (value.rows(), value.cols());
                self.accumulate(grads, *bias, |g| {
                    for i in 0..n {
                        for j in 0..d {
                            g[j] += grad[i * d + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let (n, d) = (value.rows(), value.cols());
                let y = value.data();
                self.accumulate(grads, *a, |g| {
                    for i in 0..n {
                        let yr = &y[i * d..(i + 1) * d];
                        let gr = &grad[i * d..(i + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..d {
                            g[i * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, means, inv_stds } => {
                let (n, d) = (value.rows(), value.cols());
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                let dn = d as f64;
                self.accumulate(grads, *beta, |g| {
                    for i in 0..n {
                        for j in 0..d {
                            g[j] += grad[i * d + j];
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| {
                    for i in 0..n {
                        let inv = inv_stds[i];
                        let mu = means[i];
                        for j in 0..d {
                            g[j] += grad[i * d + j] * (xv[i * d + j] - mu) * inv;
                        }
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for i in 0..n {
                        let inv = inv_stds[i];
                        let mu = means[i];
                        // dxhat = grad ⊙ γ; dx = inv·(dxhat − mean(dxhat) − x̂·mean(dxhat⊙x̂))
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xv[i * d + j] - mu) * inv;
                            let dxhat = grad[i * d + j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= dn;
                        mean_dxhat_xhat /= dn;
                        for j in 0..d {
                            let xhat = (xv[i * d + j] - mu) * inv;
                            let dxhat = grad[i * d + j] * gv[j];
                            g[i * d + j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = self.nodes[*a].value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(grad).zip(xv) {
                        *g += d * math::gelu_grad(x);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &yv) in g.iter_mut().zip(grad).zip(y) {
                        *g += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let d = self.nodes[*a].value.cols();
                let (n, l, s) = (value.rows(), *len, *start);
                self.accumulate(grads, *a, |g| {
                    for i in 0..n {
                        for j in 0..l {
                            g[i * d + s + j] += grad[i * l + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = value.rows();
                let total = value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pd = self.nodes[p].value.cols();
                    let off = offset;
                    self.accumulate(grads, p, |g| {
                        for i in 0..n {
                            for j in 0..pd {
                                g[i * pd + j] += grad[i * total + off + j];
                            }
                        }
                    });
                    offset += pd;
                }
            }
            Op::SliceRows { a, start, len } => {
                let d = value.cols();
                let (s, l) = (*start, *len);
                self.accumulate(grads, *a, |g| {
                    g[s * d..(s + l) * d]
                        .iter_mut()
                        .zip(grad)
                        .for_each(|(g, &dv)| *g += dv);
                });
            }
            Op::ConcatRows { parts } => {
                let d = value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.nodes[p].value.rows();
                    let off = offset;
                    self.accumulate(grads, p, |g| {
                        g.iter_mut()
                            .zip(&grad[off * d..(off + pn) * d])
                            .for_each(|(g, &dv)| *g += dv);
                    });
                    offset += pn;
                }
            }
            Op::GatherRows { a, indices } => {
                let d = value.cols();
                self.accumulate(grads, *a, |g| {
                    for (row, &src) in indices.iter().enumerate() {
                        for j in 0..d {
                            g[src * d + j] += grad[row * d + j];
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let d = grad[0];
                self.accumulate(grads, *a, |g| {
                    for g in g.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::MeanAll { a } => {
                let d = grad[0] / self.nodes[*a].value.len() as f64;
                self.accumulate(grads, *a, |g| {
                    for g in g.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let d = grad[0];
                let (n, k) = (labels.len(), self.nodes[*logits].value.cols());
                let scale = d / n as f64;
                self.accumulate(grads, *logits, |g| {
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            g[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let d = grad[0];
                let xv = self.nodes[*logits].value.data();
                let tv = self.nodes[*targets].value.data();
                let scale = d / xv.len() as f64;
                self.accumulate(grads, *logits, |g| {
                    for ((g, &x), &t) in g.iter_mut().zip(xv).zip(tv) {
                        *g += scale * (math::sigmoid(x) - t);
                    }
                });
            }
            Op::DiceLoss { logits, targets } => {
                let d = grad[0];
                let xv = self.nodes[*logits].value.data();
                let tv = self.nodes[*targets].value.data();
                let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
                for (&x, &t) in xv.iter().zip(tv) {
                    let p = math::sigmoid(x);
                    inter += p * t;
                    psum += p;
                    tsum += t;
                }
                let num = 2.0 * inter + 1.0;
                let den = psum + tsum + 1.0;
                self.accumulate(grads, *logits, |g| {
                    for ((g, &x), &t) in g.iter_mut().zip(xv).zip(tv) {
                        let p = math::sigmoid(x);
                        // d/dp of (1 − num/den)
                        let dp = -(2.0 * t * den - num) / (den * den);
                        *g += d * dp * p * (1.0 - p);
                    }
                });
            }
            Op::CosineAlignment { a, b } => {
                let d = grad[0];
                let va = self.nodes[*a].value.data();
                let vb = self.nodes[*b].value.data();
                let (n, dim) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let scale = d / n as f64;
                for (target, this, other) in [(*a, va, vb), (*b, vb, va)] {
                    self.accumulate(grads, target, |g| {
                        for i in 0..n {
                            let ra = &this[i * dim..(i + 1) * dim];
                            let rb = &other[i * dim..(i + 1) * dim];
                            let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
                            for (&x, &y) in ra.iter().zip(rb) {
                                dot += x * y;
                                na2 += x * x;
                                nb2 += y * y;
                            }
                            let na = math::sqrt(na2);
                            let nb = math::sqrt(nb2);
                            if na == 0.0 || nb == 0.0 {
                                continue;
                            }
                            let cosv = dot / (na * nb);
                            for j in 0..dim {
                                // ∂cos/∂this_j = other_j/(na·nb) − cos·this_j/na²
                                let dcos = rb[j] / (na * nb) - cosv * ra[j] / na2;
                                g[i * dim + j] -= scale * dcos;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.var(Tensor::new(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient_is_2x() {
        let mut g = Graph::new();
        let x = g.var(Tensor::new(1, 3, vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(1.0)).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(CoreError::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.var(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.var(Tensor::new(1, 4, vec![0.3, 0.3, 0.3, 0.3]).unwrap()).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        let v = g.value(loss).scalar_value().unwrap();
        assert!((v - math::ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum(x·W), x = [[1,2]], W = [[3],[4]].
        // dW = xᵀ·1 = [[1],[2]]; dx = 1·Wᵀ = [[3,4]].
        let mut g = Graph::new();
        let x = g.var(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let w = g.var(Tensor::new(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.of(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(Tensor::new(1, 1, vec![f64::NAN]).unwrap()),
            Err(CoreError::NonFinite(_))
        ));
    }
}
