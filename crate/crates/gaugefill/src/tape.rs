//! Reverse-mode differentiation on a flat tape of tensor operations.
//!
//! Every forward op records its parents and whatever it needs for the
//! backward pass, validates operand shapes, and hard-errors on non-finite
//! outputs. Gradients are computed by a single reverse sweep; leaves that the
//! loss never touches keep a zero gradient.
//!
//! The op set is exactly what the interpolation model needs: dense matmul,
//! elementwise arithmetic, ReLU, layer norm, masked softmax, row gather and
//! concatenation, plus the fused sparse shielded-attention op whose backward
//! is hand-derived over the same allowed-pair list the forward walks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::plan::AttentionPlan;
use crate::tensor::Tensor;

/// Layer-norm epsilon on the variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub type VarId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    /// Matrix plus a row vector broadcast over rows.
    AddBias {
        x: VarId,
        bias: VarId,
    },
    Scale {
        x: VarId,
        factor: f64,
    },
    Relu {
        x: VarId,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        shift: VarId,
        /// (mean, inv_std) per row, captured at forward time.
        cache: Vec<(f64, f64)>,
    },
    SoftmaxMasked {
        scores: VarId,
        plan: Arc<AttentionPlan>,
    },
    Concat {
        parts: Vec<VarId>,
    },
    SumAxis {
        x: VarId,
        axis: usize,
    },
    SumAll {
        x: VarId,
    },
    GatherRows {
        x: VarId,
        indices: Arc<Vec<usize>>,
    },
    Reshape {
        x: VarId,
    },
    /// Fused shielded attention with relative-position scores.
    /// `c_pairs` holds one embedding row per allowed pair, in plan order.
    SparseAttn {
        q: VarId,
        k: VarId,
        v: VarId,
        c_pairs: VarId,
        plan: Arc<AttentionPlan>,
        /// Softmax weight per allowed pair, captured at forward time.
        alpha: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every tape variable, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> &[f64] {
        &self.grads[id]
    }

    pub fn take(&mut self, id: VarId) -> Vec<f64> {
        std::mem::take(&mut self.grads[id])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId> {
        self.push("leaf", value, Op::Leaf)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {ka} vs {kb}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let a_row = &av[i * ka..(i + 1) * ka];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in a_row.iter().enumerate() {
                let b_row = &bv[p * n..(p + 1) * n];
                for (c, &bpj) in c_row.iter_mut().zip(b_row) {
                    *c += aip * bpj;
                }
            }
        }
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, Tensor::new(shape, out)?, op)
    }

    /// `[r, c] + [c]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias shape {:?} does not match {} columns",
                    self.value(bias).shape(),
                    c
                ),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xv[i * c + j] + bv[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push("add_bias", Tensor::new(shape, out)?, Op::AddBias { x, bias })
    }

    /// `x * W + b` as one call.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push("relu", Tensor::new(shape, out)?, Op::Relu { x })
    }

    /// Normalize the last axis of `[r, c]` with learnable gain and shift.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, shift: VarId) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} vs {} columns",
                    self.value(gain).shape(),
                    self.value(shift).shape(),
                    c
                ),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut out = Vec::with_capacity(r * c);
        let mut cache = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            cache.push((mean, inv));
            for j in 0..c {
                out.push((row[j] - mean) * inv * gv[j] + sv[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                shift,
                cache,
            },
        )
    }

    /// Row-wise softmax over the plan's allowed entries only. Weights outside
    /// the allowed set are exactly zero; each row sums to one over its
    /// allowed set. Scores must be `[L, L]`.
    pub fn softmax_masked(&mut self, scores: VarId, plan: Arc<AttentionPlan>) -> Result<VarId> {
        let (r, c) = self.value(scores).dims2()?;
        let len = plan.len();
        if r != len || c != len {
            return Err(Error::shape(
                "softmax_masked",
                format!("scores {r}x{c} vs plan length {len}"),
            ));
        }
        let sv = self.value(scores).data();
        let mut out = vec![0.0f64; len * len];
        for i in 0..len {
            let allowed = plan.allowed(i);
            if allowed.is_empty() {
                return Err(Error::contract(
                    "softmax_masked",
                    format!("row {i} has an empty allowed set"),
                ));
            }
            let row_max = allowed
                .iter()
                .map(|&j| sv[i * len + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &j in allowed {
                let e = (sv[i * len + j] - row_max).exp();
                out[i * len + j] = e;
                sum += e;
            }
            for &j in allowed {
                out[i * len + j] /= sum;
            }
        }
        self.push(
            "softmax_masked",
            Tensor::new(vec![len, len], out)?,
            Op::SoftmaxMasked { scores, plan },
        )
    }

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no inputs"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.value(p).dims2()?;
            if rp != r {
                return Err(Error::shape(
                    "concat",
                    format!("row counts differ: {rp} vs {r}"),
                ));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let data = self.value(p).data();
                out.extend_from_slice(&data[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat",
            Tensor::new(vec![r, total], out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Sum a 2-D tensor along `axis` (0 = down columns, 1 = across rows).
    pub fn sum_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![0.0f64; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += xv[i * c + j];
                    }
                }
                (vec![c], out)
            }
            1 => {
                let mut out = vec![0.0f64; r];
                for i in 0..r {
                    out[i] = xv[i * c..(i + 1) * c].iter().sum();
                }
                (vec![r], out)
            }
            _ => {
                return Err(Error::contract(
                    "sum_axis",
                    format!("axis {axis} out of range for 2-D"),
                ))
            }
        };
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { x })
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Select rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: VarId, indices: Arc<Vec<usize>>) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            if i >= r {
                return Err(Error::contract(
                    "gather_rows",
                    format!("row index {i} out of range ({r} rows)"),
                ));
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let k = indices.len();
        self.push(
            "gather_rows",
            Tensor::new(vec![k, c], out)?,
            Op::GatherRows { x, indices },
        )
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(x).shape(), shape),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", Tensor::new(shape, data)?, Op::Reshape { x })
    }

    /// Fused sparse shielded attention (see [`crate::kernel`]). `q`, `k`, `v`
    /// are `[L, d]`; `c_pairs` is `[P, d]` with one relative-position
    /// embedding per allowed pair in plan order.
    pub fn sparse_attn(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        c_pairs: VarId,
        plan: Arc<AttentionPlan>,
    ) -> Result<VarId> {
        let (l, d) = self.value(q).dims2()?;
        if plan.len() != l {
            return Err(Error::shape(
                "sparse_attn",
                format!("plan length {} vs {} rows", plan.len(), l),
            ));
        }
        for (name, id) in [("k", k), ("v", v)] {
            if self.value(id).shape() != [l, d] {
                return Err(Error::shape(
                    "sparse_attn",
                    format!("{name} shape {:?} vs [{l}, {d}]", self.value(id).shape()),
                ));
            }
        }
        if self.value(c_pairs).shape() != [plan.pair_count(), d] {
            return Err(Error::shape(
                "sparse_attn",
                format!(
                    "c_pairs shape {:?} vs [{}, {d}]",
                    self.value(c_pairs).shape(),
                    plan.pair_count()
                ),
            ));
        }

        let src = PairOrderSource {
            c: self.value(c_pairs).data(),
            d,
        };
        let mut z = vec![0.0f64; l * d];
        let mut alpha = Vec::new();
        crate::kernel::sparse_shielded_attn(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &src,
            &plan,
            &mut z,
            Some(&mut alpha),
        )?;
        self.push(
            "sparse_attn",
            Tensor::new(vec![l, d], z)?,
            Op::SparseAttn {
                q,
                k,
                v,
                c_pairs,
                plan,
                alpha,
            },
        )
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per tape
    /// variable; variables the loss does not depend on get zeros.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0f64; n.value.numel()])
            .collect();
        let mut reached = vec![false; self.nodes.len()];
        grads[loss][0] = 1.0;
        reached[loss] = true;

        for id in (0..=loss).rev() {
            if !reached[id] {
                continue;
            }
            // Take the output gradient out to satisfy the borrow checker while
            // we accumulate into parent buffers; restored below.
            let g = std::mem::take(&mut grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, kk) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    {
                        let da = &mut grads[*a];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..kk {
                                let b_row = &bv[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for (gv, bvj) in g_row.iter().zip(b_row) {
                                    s += gv * bvj;
                                }
                                da[i * kk + p] += s;
                            }
                        }
                    }
                    {
                        let db = &mut grads[*b];
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            let a_row = &av[i * kk..(i + 1) * kk];
                            for (p, &aip) in a_row.iter().enumerate() {
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for (dbj, gv) in db_row.iter_mut().zip(g_row) {
                                    *dbj += aip * gv;
                                }
                            }
                        }
                    }
                    reached[*a] = true;
                    reached[*b] = true;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &g, 1.0);
                    accumulate(&mut grads[*b], &g, 1.0);
                    reached[*a] = true;
                    reached[*b] = true;
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads[*a], &g, 1.0);
                    accumulate(&mut grads[*b], &g, -1.0);
                    reached[*a] = true;
                    reached[*b] = true;
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data();
                    for ((da, &gv), &bvv) in grads[*a].iter_mut().zip(&g).zip(bv) {
                        *da += gv * bvv;
                    }
                    for ((db, &gv), &avv) in grads[*b].iter_mut().zip(&g).zip(&av) {
                        *db += gv * avv;
                    }
                    reached[*a] = true;
                    reached[*b] = true;
                }
                Op::AddBias { x, bias } => {
                    let (r, c) = self.value(*x).dims2()?;
                    accumulate(&mut grads[*x], &g, 1.0);
                    let db = &mut grads[*bias];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    reached[*x] = true;
                    reached[*bias] = true;
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads[*x], &g, *factor);
                    reached[*x] = true;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    for ((dx, &gv), &xvv) in grads[*x].iter_mut().zip(&g).zip(xv) {
                        if xvv > 0.0 {
                            *dx += gv;
                        }
                    }
                    reached[*x] = true;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    cache,
                } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    for i in 0..r {
                        let (mean, inv) = cache[i];
                        let row = &xv[i * c..(i + 1) * c];
                        let g_row = &g[i * c..(i + 1) * c];
                        // dxhat, and the two row means the backward needs.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = g_row[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_c = 1.0 / c as f64;
                        {
                            let dx = &mut grads[*x][i * c..(i + 1) * c];
                            for j in 0..c {
                                let xhat = (row[j] - mean) * inv;
                                let dxhat = g_row[j] * gv[j];
                                dx[j] += inv
                                    * (dxhat - sum_dxhat * inv_c - xhat * sum_dxhat_xhat * inv_c);
                            }
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            grads[*gain][j] += g_row[j] * xhat;
                            grads[*shift][j] += g_row[j];
                        }
                    }
                    reached[*x] = true;
                    reached[*gain] = true;
                    reached[*shift] = true;
                }
                Op::SoftmaxMasked { scores, plan } => {
                    let len = plan.len();
                    let w = self.nodes[id].value.data();
                    let ds = &mut grads[*scores];
                    for i in 0..len {
                        let allowed = plan.allowed(i);
                        let mut s = 0.0;
                        for &j in allowed {
                            s += g[i * len + j] * w[i * len + j];
                        }
                        for &j in allowed {
                            let idx = i * len + j;
                            ds[idx] += w[idx] * (g[idx] - s);
                        }
                    }
                    reached[*scores] = true;
                }
                Op::Concat { parts } => {
                    let r = self.value(parts[0]).dims2()?.0;
                    let total = self.nodes[id].value.dims2()?.1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2()?.1;
                        let dp = &mut grads[p];
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + w];
                            let dst = &mut dp[i * w..(i + 1) * w];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        offset += w;
                        reached[p] = true;
                    }
                }
                Op::SumAxis { x, axis } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let dx = &mut grads[*x];
                    match axis {
                        0 => {
                            for i in 0..r {
                                for j in 0..c {
                                    dx[i * c + j] += g[j];
                                }
                            }
                        }
                        _ => {
                            for i in 0..r {
                                for j in 0..c {
                                    dx[i * c + j] += g[i];
                                }
                            }
                        }
                    }
                    reached[*x] = true;
                }
                Op::SumAll { x } => {
                    accumulate(&mut grads[*x], &vec![g[0]; self.value(*x).numel()], 1.0);
                    reached[*x] = true;
                }
                Op::GatherRows { x, indices } => {
                    let c = self.value(*x).dims2()?.1;
                    let dx = &mut grads[*x];
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &g[k * c..(k + 1) * c];
                        let dst = &mut dx[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    reached[*x] = true;
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads[*x], &g, 1.0);
                    reached[*x] = true;
                }
                Op::SparseAttn {
                    q,
                    k,
                    v,
                    c_pairs,
                    plan,
                    alpha,
                } => {
                    self.sparse_attn_backward(
                        *q, *k, *v, *c_pairs, plan, alpha, &g, &mut grads,
                    )?;
                    reached[*q] = true;
                    reached[*k] = true;
                    reached[*v] = true;
                    reached[*c_pairs] = true;
                }
            }
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_arguments)]
    fn sparse_attn_backward(
        &self,
        q: VarId,
        k: VarId,
        v: VarId,
        c_pairs: VarId,
        plan: &AttentionPlan,
        alpha: &[f64],
        g: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Result<()> {
        let (l, d) = self.value(q).dims2()?;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let cv = self.value(c_pairs).data();

        let max_row = plan.pairs().max_row_len();
        let mut dalpha = vec![0.0f64; max_row];

        for i in 0..l {
            let row = plan.allowed(i);
            let range = plan.pairs().row_range(i);
            let g_i = &g[i * d..(i + 1) * d];
            let q_i = &qv[i * d..(i + 1) * d];

            // d(alpha_p) = g_i . v_j, and the softmax row correction term.
            let mut s_i = 0.0;
            for (off, &j) in row.iter().enumerate() {
                let v_j = &vv[j * d..(j + 1) * d];
                let mut dot = 0.0;
                for t in 0..d {
                    dot += g_i[t] * v_j[t];
                }
                dalpha[off] = dot;
                s_i += alpha[range.start + off] * dot;
            }

            for (off, &j) in row.iter().enumerate() {
                let p = range.start + off;
                let a = alpha[p];
                let de = a * (dalpha[off] - s_i) * inv_sqrt_d;
                let k_j = &kv[j * d..(j + 1) * d];
                let c_p = &cv[p * d..(p + 1) * d];
                {
                    let dq = &mut grads[q][i * d..(i + 1) * d];
                    for t in 0..d {
                        dq[t] += de * k_j[t] * c_p[t];
                    }
                }
                {
                    let dk = &mut grads[k][j * d..(j + 1) * d];
                    for t in 0..d {
                        dk[t] += de * q_i[t] * c_p[t];
                    }
                }
                {
                    let dc = &mut grads[c_pairs][p * d..(p + 1) * d];
                    for t in 0..d {
                        dc[t] += de * q_i[t] * k_j[t];
                    }
                }
                {
                    let dv = &mut grads[v][j * d..(j + 1) * d];
                    for t in 0..d {
                        dv[t] += a * g_i[t];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Source adapter: c rows stored in plan (pair) order.
struct PairOrderSource<'a> {
    c: &'a [f64],
    d: usize,
}

impl crate::kernel::SrpeSource for PairOrderSource<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn write_c(&self, pair_idx: usize, _i: usize, _j: usize, _scratch: &mut [f64], out: &mut [f64]) {
        out.copy_from_slice(&self.c[pair_idx * self.d..(pair_idx + 1) * self.d]);
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}
