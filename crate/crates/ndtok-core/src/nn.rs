//! Parameterized layers written once against an [`Engine`], so the autodiff
//! graph and the graph-free inference path execute the identical sequence of
//! kernel calls and produce bit-identical values.

use alloc::format;
use alloc::vec::Vec;

use crate::config::HeadActivation;
use crate::error::{invalid, Result};
use crate::graph::{Graph, TensorId};
use crate::linalg;
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub trait Engine {
    type Id: Clone;

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Self::Id>;
    fn constant(&mut self, t: Tensor) -> Result<Self::Id>;
    fn shape(&self, x: &Self::Id) -> (usize, usize);
    fn matmul(&mut self, a: &Self::Id, b: &Self::Id) -> Result<Self::Id>;
    /// A·Bᵀ
    fn matmul_nt(&mut self, a: &Self::Id, b: &Self::Id) -> Result<Self::Id>;
    fn add(&mut self, a: &Self::Id, b: &Self::Id) -> Result<Self::Id>;
    fn add_row_broadcast(&mut self, a: &Self::Id, bias: &Self::Id) -> Result<Self::Id>;
    fn scale(&mut self, a: &Self::Id, factor: f64) -> Result<Self::Id>;
    fn softmax_rows(&mut self, a: &Self::Id) -> Result<Self::Id>;
    fn layer_norm(&mut self, x: &Self::Id, gamma: &Self::Id, beta: &Self::Id) -> Result<Self::Id>;
    fn gelu(&mut self, a: &Self::Id) -> Result<Self::Id>;
    fn slice_cols(&mut self, a: &Self::Id, start: usize, len: usize) -> Result<Self::Id>;
    fn concat_cols(&mut self, parts: &[Self::Id]) -> Result<Self::Id>;
    fn slice_rows(&mut self, a: &Self::Id, start: usize, len: usize) -> Result<Self::Id>;
    fn concat_rows(&mut self, parts: &[Self::Id]) -> Result<Self::Id>;
    fn gather_rows(&mut self, a: &Self::Id, indices: &[usize]) -> Result<Self::Id>;
}

impl Engine for Graph {
    type Id = TensorId;

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        Graph::param(self, store, name)
    }
    fn constant(&mut self, t: Tensor) -> Result<TensorId> {
        Graph::constant(self, t)
    }
    fn shape(&self, x: &TensorId) -> (usize, usize) {
        self.shape_of(*x)
    }
    fn matmul(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        Graph::matmul(self, *a, *b)
    }
    fn matmul_nt(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        Graph::matmul_nt(self, *a, *b)
    }
    fn add(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        Graph::add(self, *a, *b)
    }
    fn add_row_broadcast(&mut self, a: &TensorId, bias: &TensorId) -> Result<TensorId> {
        Graph::add_row_broadcast(self, *a, *bias)
    }
    fn scale(&mut self, a: &TensorId, factor: f64) -> Result<TensorId> {
        Graph::scale(self, *a, factor)
    }
    fn softmax_rows(&mut self, a: &TensorId) -> Result<TensorId> {
        Graph::softmax_rows(self, *a)
    }
    fn layer_norm(&mut self, x: &TensorId, gamma: &TensorId, beta: &TensorId) -> Result<TensorId> {
        Graph::layer_norm(self, *x, *gamma, *beta)
    }
    fn gelu(&mut self, a: &TensorId) -> Result<TensorId> {
        Graph::gelu(self, *a)
    }
    fn slice_cols(&mut self, a: &TensorId, start: usize, len: usize) -> Result<TensorId> {
        Graph::slice_cols(self, *a, start, len)
    }
    fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        Graph::concat_cols(self, parts)
    }
    fn slice_rows(&mut self, a: &TensorId, start: usize, len: usize) -> Result<TensorId> {
        Graph::slice_rows(self, *a, start, len)
    }
    fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        Graph::concat_rows(self, parts)
    }
    fn gather_rows(&mut self, a: &TensorId, indices: &[usize]) -> Result<TensorId> {
        Graph::gather_rows(self, *a, indices)
    }
}

/// Graph-free evaluator: values only, no tape, intermediates freed as they
/// go out of scope. Used on the inference path where attention matrices over
/// thousands of cells would make a retained graph too large.
pub struct Eval;

impl Engine for Eval {
    type Id = Tensor;

    fn param(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        Ok(store.get(name)?.clone())
    }
    fn constant(&mut self, t: Tensor) -> Result<Tensor> {
        t.ensure_finite("constant")?;
        Ok(t)
    }
    fn shape(&self, x: &Tensor) -> (usize, usize) {
        (x.rows(), x.cols())
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(invalid("matmul shape mismatch"));
        }
        let out = Tensor::new(
            a.rows(),
            b.cols(),
            linalg::matmul(a.data(), a.rows(), a.cols(), b.data(), b.cols()),
        )?;
        out.ensure_finite("matmul")?;
        Ok(out)
    }
    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.cols() {
            return Err(invalid("matmul_nt shape mismatch"));
        }
        let out = Tensor::new(
            a.rows(),
            b.rows(),
            linalg::matmul_nt(a.data(), a.rows(), a.cols(), b.data(), b.rows()),
        )?;
        out.ensure_finite("matmul_nt")?;
        Ok(out)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.same_shape(b) {
            return Err(invalid("add shape mismatch"));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.rows(), a.cols(), data)?;
        out.ensure_finite("add")?;
        Ok(out)
    }
    fn add_row_broadcast(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != a.cols() {
            return Err(invalid("bias shape mismatch"));
        }
        let mut data = a.data().to_vec();
        linalg::add_bias_rows(&mut data, a.rows(), a.cols(), bias.data());
        let out = Tensor::new(a.rows(), a.cols(), data)?;
        out.ensure_finite("bias")?;
        Ok(out)
    }
    fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(a.rows(), a.cols(), data)?;
        out.ensure_finite("scale")?;
        Ok(out)
    }
    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = Tensor::new(
            a.rows(),
            a.cols(),
            linalg::softmax_rows(a.data(), a.rows(), a.cols()),
        )?;
        out.ensure_finite("softmax")?;
        Ok(out)
    }
    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if gamma.cols() != x.cols() || beta.cols() != x.cols() {
            return Err(invalid("layer_norm affine shape mismatch"));
        }
        let (data, _, _) =
            linalg::layer_norm_rows(x.data(), x.rows(), x.cols(), gamma.data(), beta.data());
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        out.ensure_finite("layer_norm")?;
        Ok(out)
    }
    fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = Tensor::new(a.rows(), a.cols(), linalg::gelu_vec(a.data()))?;
        out.ensure_finite("gelu")?;
        Ok(out)
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if start + len > a.cols() {
            return Err(invalid("slice_cols out of range"));
        }
        let mut data = Vec::with_capacity(a.rows() * len);
        for i in 0..a.rows() {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        Tensor::new(a.rows(), len, data)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(invalid("concat_cols needs parts"));
        }
        let n = parts[0].rows();
        if parts.iter().any(|p| p.rows() != n) {
            return Err(invalid("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(n, total, data)
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if start + len > a.rows() {
            return Err(invalid("slice_rows out of range"));
        }
        let d = a.cols();
        Tensor::new(len, d, a.data()[start * d..(start + len) * d].to_vec())
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(invalid("concat_rows needs parts"));
        }
        let d = parts[0].cols();
        if parts.iter().any(|p| p.cols() != d) {
            return Err(invalid("concat_rows col mismatch"));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(rows, d, data)
    }
    fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        if indices.iter().any(|&i| i >= a.rows()) {
            return Err(invalid("gather_rows index out of range"));
        }
        let d = a.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(a.row(i));
        }
        Tensor::new(indices.len(), d, data)
    }
}

/// y = x·W (+ bias). `weight` is the parameter name; bias uses `{weight%s/.w→.b}`
/// only when explicitly given.
pub fn linear<E: Engine>(
    e: &mut E,
    store: &ParamStore,
    x: &E::Id,
    weight: &str,
    bias: Option<&str>,
) -> Result<E::Id> {
    let w = e.param(store, weight)?;
    let (_, xc) = e.shape(x);
    let (wr, _) = e.shape(&w);
    if xc != wr {
        return Err(invalid(format!(
            "linear {weight}: input width {xc} does not match weight rows {wr}"
        )));
    }
    let mut y = e.matmul(x, &w)?;
    if let Some(bias) = bias {
        let b = e.param(store, bias)?;
        y = e.add_row_broadcast(&y, &b)?;
    }
    Ok(y)
}

/// Pre-affine layer norm; parameters `{prefix}.gamma` / `{prefix}.beta`.
pub fn layer_norm<E: Engine>(e: &mut E, store: &ParamStore, x: &E::Id, prefix: &str) -> Result<E::Id> {
    let gamma = e.param(store, &format!("{prefix}.gamma"))?;
    let beta = e.param(store, &format!("{prefix}.beta"))?;
    e.layer_norm(x, &gamma, &beta)
}

/// Scaled dot-product attention per head, heads concatenated. No output
/// projection — this is the convex combination of value rows itself.
pub fn attention_heads<E: Engine>(
    e: &mut E,
    q: &E::Id,
    k: &E::Id,
    v: &E::Id,
    heads: usize,
) -> Result<E::Id> {
    let (_, d) = e.shape(q);
    let (nk, dk) = e.shape(k);
    let (nv, dv) = e.shape(v);
    if d != dk || d != dv {
        return Err(invalid("attention width mismatch"));
    }
    if nk != nv {
        return Err(invalid("key/value row mismatch"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!("heads {heads} must divide width {d}")));
    }
    let dh = d / heads;
    let factor = 1.0 / math::sqrt(dh as f64);
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = e.slice_cols(q, h * dh, dh)?;
        let kh = e.slice_cols(k, h * dh, dh)?;
        let vh = e.slice_cols(v, h * dh, dh)?;
        let scores = e.matmul_nt(&qh, &kh)?;
        let scaled = e.scale(&scores, factor)?;
        let attn = e.softmax_rows(&scaled)?;
        contexts.push(e.matmul(&attn, &vh)?);
    }
    e.concat_cols(&contexts)
}

/// Multi-head attention with output projection `{prefix}.wo` / `{prefix}.bo`.
/// Self-attention is the q == k == v case.
pub fn multi_head_attention<E: Engine>(
    e: &mut E,
    store: &ParamStore,
    q: &E::Id,
    k: &E::Id,
    v: &E::Id,
    heads: usize,
    prefix: &str,
) -> Result<E::Id> {
    let ctx = attention_heads(e, q, k, v, heads)?;
    linear(e, store, &ctx, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")))
}

/// Pre-norm residual FFN: x + W2·gelu(W1·LN(x) + b1) + b2.
pub fn ffn<E: Engine>(e: &mut E, store: &ParamStore, x: &E::Id, prefix: &str) -> Result<E::Id> {
    let h = layer_norm(e, store, x, &format!("{prefix}.ln"))?;
    let h = linear(e, store, &h, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = e.gelu(&h)?;
    let h = linear(e, store, &h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))?;
    e.add(x, &h)
}

/// Two-layer projection head: W2·act(W1·x + b1) + b2.
pub fn mlp2<E: Engine>(
    e: &mut E,
    store: &ParamStore,
    x: &E::Id,
    prefix: &str,
    activation: HeadActivation,
) -> Result<E::Id> {
    let h = linear(e, store, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = match activation {
        HeadActivation::Gelu => e.gelu(&h)?,
        HeadActivation::Identity => h,
    };
    linear(e, store, &h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

/// Standard pre-norm transformer block: self-attention sublayer with residual,
/// then the residual FFN.
pub fn encoder_block<E: Engine>(
    e: &mut E,
    store: &ParamStore,
    x: &E::Id,
    heads: usize,
    prefix: &str,
) -> Result<E::Id> {
    let normed = layer_norm(e, store, x, &format!("{prefix}.attn.ln"))?;
    let attn = multi_head_attention(e, store, &normed, &normed, &normed, heads, &format!("{prefix}.attn"))?;
    let x = e.add(x, &attn)?;
    ffn(e, store, &x, &format!("{prefix}.ffn"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new(0);
        for (name, t) in entries {
            s.insert(*name, t.clone());
        }
        s
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let store = store_with(&[("w", Tensor::eye(3))]);
        let x = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let y = linear(&mut Eval, &store, &x, "w", None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_hand_value() {
        // x = [[1,2]], W = [[1],[1]] -> [[3]]
        let store = store_with(&[("w", Tensor::new(2, 1, vec![1.0, 1.0]).unwrap())]);
        let x = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let y = linear(&mut Eval, &store, &x, "w", None).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let store = store_with(&[("w", Tensor::eye(3))]);
        let x = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(linear(&mut Eval, &store, &x, "w", None).is_err());
    }

    #[test]
    fn single_key_attention_projects_the_value_row() {
        // nk = 1: every output row equals v0 through the output projection.
        let store = store_with(&[
            ("attn.wo", Tensor::eye(4)),
            ("attn.bo", Tensor::zeros(1, 4)),
        ]);
        let q = Tensor::new(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let k = Tensor::new(1, 4, vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let v = Tensor::new(1, 4, vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let out = multi_head_attention(&mut Eval, &store, &q, &k, &v, 2, "attn").unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn constant_value_rows_pass_through_pre_projection() {
        // all value rows equal c -> every context row equals c for any q, k.
        let q = Tensor::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, -4.0, 0.0, 0.5, 2.0]).unwrap();
        let k = Tensor::new(3, 4, vec![0.0, 1.0, 0.0, -1.0, 2.0, 0.3, 0.1, 0.7, -1.0, 0.6, 0.2, 0.9]).unwrap();
        let c = [3.0, -1.0, 2.0, 0.5];
        let v = Tensor::new(3, 4, c.iter().cycle().take(12).copied().collect()).unwrap();
        let ctx = attention_heads(&mut Eval, &q, &k, &v, 2).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((ctx.at(i, j) - c[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_zero_weights_is_identity() {
        let store = store_with(&[
            ("f.ln.gamma", Tensor::new(1, 4, vec![1.0; 4]).unwrap()),
            ("f.ln.beta", Tensor::zeros(1, 4)),
            ("f.w1", Tensor::zeros(4, 8)),
            ("f.b1", Tensor::zeros(1, 8)),
            ("f.w2", Tensor::zeros(8, 4)),
            ("f.b2", Tensor::zeros(1, 4)),
        ]);
        let x = Tensor::new(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        let y = ffn(&mut Eval, &store, &x, "f").unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ffn_single_hidden_unit_hand_value() {
        // x = [[1, 0]] (width 2). LN(x) = normalized row; with gamma=1, beta=0:
        // mean 0.5, var 0.25 -> xhat ≈ [1, -1] (eps-perturbed).
        // w1 = [[1],[0]], b1 = 0 -> h = xhat_0; gelu; w2 = [[2, 0]], b2 = 0;
        // y = x + [2·gelu(h), 0].
        let store = store_with(&[
            ("f.ln.gamma", Tensor::new(1, 2, vec![1.0, 1.0]).unwrap()),
            ("f.ln.beta", Tensor::zeros(1, 2)),
            ("f.w1", Tensor::new(2, 1, vec![1.0, 0.0]).unwrap()),
            ("f.b1", Tensor::zeros(1, 1)),
            ("f.w2", Tensor::new(1, 2, vec![2.0, 0.0]).unwrap()),
            ("f.b2", Tensor::zeros(1, 2)),
        ]);
        let x = Tensor::new(1, 2, vec![1.0, 0.0]).unwrap();
        let y = ffn(&mut Eval, &store, &x, "f").unwrap();

        let inv_std = 1.0 / math::sqrt(0.25 + linalg::LAYER_NORM_EPS);
        let xhat0 = 0.5 * inv_std;
        let expected0 = 1.0 + 2.0 * math::gelu(xhat0);
        assert!((y.at(0, 0) - expected0).abs() < 1e-12);
        assert_eq!(y.at(0, 1), 0.0);
    }

    #[test]
    fn graph_and_eval_paths_agree_bitwise() {
        let mut store = ParamStore::new(9);
        store.add_xavier("b.attn.wo", 8, 8);
        store.add_zeros("b.attn.bo", 1, 8);
        store.add_ones("b.attn.ln.gamma", 1, 8);
        store.add_zeros("b.attn.ln.beta", 1, 8);
        store.add_ones("b.ffn.ln.gamma", 1, 8);
        store.add_zeros("b.ffn.ln.beta", 1, 8);
        store.add_xavier("b.ffn.w1", 8, 16);
        store.add_zeros("b.ffn.b1", 1, 16);
        store.add_xavier("b.ffn.w2", 16, 8);
        store.add_zeros("b.ffn.b2", 1, 8);

        let mut rng = crate::rng::CounterRng::new(5, "x");
        let x = Tensor::new(6, 8, (0..48).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();

        let eval_out = encoder_block(&mut Eval, &store, &x, 4, "b").unwrap();

        let mut g = Graph::new();
        let xid = g.constant(x).unwrap();
        let gid = encoder_block(&mut g, &store, &xid, 4, "b").unwrap();
        assert_eq!(g.value(gid).data(), eval_out.data());
    }
}
