//! Shielded-attention kernel with relative-position terms.
//!
//! The sparse kernel walks only the allowed (query, key) pairs of an
//! [`AttentionPlan`] — at most `(m+1)*L` of them for a shielded plan with `m`
//! observed nodes — and reuses per-row scratch buffers, so it never
//! materializes an `L*L` score matrix or an `L*L*d` position-embedding
//! tensor. The dense oracle in this module does exactly that materialization
//! and serves as the correctness reference.
//!
//! Attention scores use the fused triple product
//! `e_ij = sum(q_i * k_j * c_ij) / sqrt(d)`, where `c_ij` is the embedding of
//! the relative position of node j seen from node i. With `c_ij = 1` this is
//! ordinary scaled dot-product attention.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::plan::AttentionPlan;

/// Supplies the relative-position embedding vector for an allowed pair
/// without materializing anything per forbidden pair.
pub trait SrpeSource {
    fn dim(&self) -> usize;

    /// Write `c_ij` into `out` (length `dim`). `pair_idx` is the pair's
    /// position in plan order for sources indexed that way; `scratch` is a
    /// caller-owned buffer of length `dim` available for intermediates.
    fn write_c(&self, pair_idx: usize, i: usize, j: usize, scratch: &mut [f64], out: &mut [f64]);
}

/// Reads embeddings from a precomputed `n*n x d` table (row `i*n + j`).
/// Used at training scale, where the full table over the station roster is
/// small and shared by every masked sequence.
pub struct TableSource<'a> {
    table: &'a [f64],
    n: usize,
    d: usize,
}

impl<'a> TableSource<'a> {
    pub fn new(table: &'a [f64], n: usize, d: usize) -> Result<TableSource<'a>> {
        if table.len() != n * n * d {
            return Err(Error::shape(
                "srpe_table",
                format!("table length {} != n*n*d = {}", table.len(), n * n * d),
            ));
        }
        Ok(TableSource { table, n, d })
    }
}

impl SrpeSource for TableSource<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn write_c(&self, _pair_idx: usize, i: usize, j: usize, _scratch: &mut [f64], out: &mut [f64]) {
        let start = (i * self.n + j) * self.d;
        out.copy_from_slice(&self.table[start..start + self.d]);
    }
}

/// Computes embeddings on demand from standardized relative positions through
/// a two-layer network, using O(d) scratch per pair. Used at inference and in
/// the benchmark, where sequences are long and the full pair table must not
/// exist.
pub struct FcnSource<'a, F: Fn(usize, usize) -> [f64; 2]> {
    rel_std: F,
    /// First layer, 2 x d row-major.
    w1: &'a [f64],
    b1: &'a [f64],
    /// Second layer, d x d row-major.
    w2: &'a [f64],
    b2: &'a [f64],
    d: usize,
}

impl<'a, F: Fn(usize, usize) -> [f64; 2]> FcnSource<'a, F> {
    pub fn new(
        rel_std: F,
        w1: &'a [f64],
        b1: &'a [f64],
        w2: &'a [f64],
        b2: &'a [f64],
    ) -> Result<FcnSource<'a, F>> {
        let d = b1.len();
        if w1.len() != 2 * d || w2.len() != d * d || b2.len() != d {
            return Err(Error::shape(
                "srpe_fcn",
                format!(
                    "inconsistent weights for d={d}: w1={}, w2={}, b2={}",
                    w1.len(),
                    w2.len(),
                    b2.len()
                ),
            ));
        }
        Ok(FcnSource {
            rel_std,
            w1,
            b1,
            w2,
            b2,
            d,
        })
    }
}

impl<F: Fn(usize, usize) -> [f64; 2]> SrpeSource for FcnSource<'_, F> {
    fn dim(&self) -> usize {
        self.d
    }

    fn write_c(&self, _pair_idx: usize, i: usize, j: usize, scratch: &mut [f64], out: &mut [f64]) {
        let d = self.d;
        let r = (self.rel_std)(i, j);
        // hidden = r * W1 + b1
        for t in 0..d {
            scratch[t] = r[0] * self.w1[t] + r[1] * self.w1[d + t] + self.b1[t];
        }
        // out = hidden * W2 + b2
        out.copy_from_slice(self.b2);
        for (t, &h) in scratch.iter().enumerate() {
            let w_row = &self.w2[t * d..(t + 1) * d];
            for (o, &w) in out.iter_mut().zip(w_row) {
                *o += h * w;
            }
        }
    }
}

/// Accounting for one kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelStats {
    /// Number of (query, key) pairs actually scored.
    pub pairs_evaluated: usize,
    /// Peak bytes of kernel-internal scratch (score row + embedding buffers).
    /// Excludes caller-owned inputs and the output buffer.
    pub peak_scratch_bytes: usize,
    pub wall_time: Duration,
}

/// Sparse shielded attention with fused relative-position scores.
///
/// `q`, `k`, `v` and `z_out` are `L x d` row-major. If `save_alpha` is given
/// it receives the softmax weight of every allowed pair in plan order, which
/// the training tape uses for the backward pass.
pub fn sparse_shielded_attn<S: SrpeSource + ?Sized>(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    src: &S,
    plan: &AttentionPlan,
    z_out: &mut [f64],
    mut save_alpha: Option<&mut Vec<f64>>,
) -> Result<KernelStats> {
    let len = plan.len();
    if src.dim() != d {
        return Err(Error::shape(
            "sparse_shielded_attn",
            format!("srpe dim {} != head dim {}", src.dim(), d),
        ));
    }
    for (name, s) in [("q", q), ("k", k), ("v", v)] {
        if s.len() != len * d {
            return Err(Error::shape(
                "sparse_shielded_attn",
                format!("{name} length {} != L*d = {}", s.len(), len * d),
            ));
        }
    }
    if z_out.len() != len * d {
        return Err(Error::shape(
            "sparse_shielded_attn",
            format!("output length {} != L*d = {}", z_out.len(), len * d),
        ));
    }

    let start = Instant::now();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let max_row = plan.pairs().max_row_len();

    // Reused per-row scratch; this is the entire kernel-internal footprint.
    let mut scores = vec![0.0f64; max_row];
    let mut c_buf = vec![0.0f64; d];
    let mut h_buf = vec![0.0f64; d];
    let scratch_bytes = (scores.len() + c_buf.len() + h_buf.len()) * std::mem::size_of::<f64>();

    if let Some(alpha) = save_alpha.as_deref_mut() {
        alpha.clear();
        alpha.resize(plan.pair_count(), 0.0);
    }

    let mut pairs = 0usize;
    for i in 0..len {
        let row = plan.allowed(i);
        let pair_base = plan.pairs().row_range(i).start;
        let q_i = &q[i * d..(i + 1) * d];
        let mut row_max = f64::NEG_INFINITY;
        for (idx, &j) in row.iter().enumerate() {
            src.write_c(pair_base + idx, i, j, &mut h_buf, &mut c_buf);
            let k_j = &k[j * d..(j + 1) * d];
            let mut e = 0.0;
            for t in 0..d {
                e += q_i[t] * k_j[t] * c_buf[t];
            }
            let e = e * inv_sqrt_d;
            scores[idx] = e;
            if e > row_max {
                row_max = e;
            }
        }
        pairs += row.len();

        let mut sum = 0.0;
        for s in scores[..row.len()].iter_mut() {
            *s = (*s - row_max).exp();
            sum += *s;
        }
        let inv_sum = 1.0 / sum;

        let z_i = &mut z_out[i * d..(i + 1) * d];
        z_i.fill(0.0);
        for (idx, &j) in row.iter().enumerate() {
            let w = scores[idx] * inv_sum;
            scores[idx] = w;
            let v_j = &v[j * d..(j + 1) * d];
            for (z, &vv) in z_i.iter_mut().zip(v_j) {
                *z += w * vv;
            }
        }
        if let Some(alpha) = save_alpha.as_deref_mut() {
            let range = plan.pairs().row_range(i);
            alpha[range].copy_from_slice(&scores[..row.len()]);
        }
    }

    if !z_out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            op: "sparse_shielded_attn",
        });
    }

    Ok(KernelStats {
        pairs_evaluated: pairs,
        peak_scratch_bytes: scratch_bytes,
        wall_time: start.elapsed(),
    })
}

/// Reference implementation: score all `L*L` pairs, mask the forbidden ones
/// to -inf, softmax, then aggregate. Only affordable at testing scale.
///
/// `c_full` is the dense `L*L x d` embedding table (row `i*L + j`).
pub fn dense_masked_attn_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    c_full: &[f64],
    plan: &AttentionPlan,
) -> Result<Vec<f64>> {
    let len = plan.len();
    if c_full.len() != len * len * d {
        return Err(Error::shape(
            "dense_masked_attn_oracle",
            format!("c_full length {} != L*L*d = {}", c_full.len(), len * len * d),
        ));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // All pairs first, exactly the naive formulation.
    let mut scores = vec![0.0f64; len * len];
    for i in 0..len {
        let q_i = &q[i * d..(i + 1) * d];
        for j in 0..len {
            let k_j = &k[j * d..(j + 1) * d];
            let c = &c_full[(i * len + j) * d..(i * len + j + 1) * d];
            let mut e = 0.0;
            for t in 0..d {
                e += q_i[t] * k_j[t] * c[t];
            }
            scores[i * len + j] = e * inv_sqrt_d;
        }
    }

    // Mask out the illegal connections.
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for &j in plan.allowed(i) {
            allowed[i * len + j] = true;
        }
    }
    for (s, &a) in scores.iter_mut().zip(&allowed) {
        if !a {
            *s = f64::NEG_INFINITY;
        }
    }

    let mut z = vec![0.0f64; len * d];
    for i in 0..len {
        let row = &mut scores[i * len..(i + 1) * len];
        let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            if s.is_finite() {
                *s = (*s - row_max).exp();
                sum += *s;
            } else {
                *s = 0.0;
            }
        }
        let z_i = &mut z[i * d..(i + 1) * d];
        for (j, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = w / sum;
            let v_j = &v[j * d..(j + 1) * d];
            for (zz, &vv) in z_i.iter_mut().zip(v_j) {
                *zz += w * vv;
            }
        }
    }
    Ok(z)
}

/// Fused attention score for one pair:
/// `sum(q_i * k_j * c_ij) / sqrt(d)`. With `c_ij` all ones this reduces to
/// the ordinary scaled dot product.
pub fn srpe_score(q_i: &[f64], k_j: &[f64], c_ij: &[f64]) -> f64 {
    debug_assert!(q_i.len() == k_j.len() && k_j.len() == c_ij.len());
    let mut e = 0.0;
    for ((&q, &k), &c) in q_i.iter().zip(k_j).zip(c_ij) {
        e += q * k * c;
    }
    e / (q_i.len() as f64).sqrt()
}

/// One row of a benchmark report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub l: usize,
    pub m: usize,
    pub pairs: usize,
    pub wall_ms: f64,
    pub scratch_bytes: usize,
}

/// Time the sparse kernel at the given (sequence length, observed count)
/// sizes. Inputs are seeded pseudo-random; embeddings come from an on-demand
/// two-layer network so scratch stays O(d) per pair regardless of L.
/// The reported wall time is the minimum over `reps` runs.
pub fn bench(sizes: &[(usize, usize)], reps: usize, d: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(Error::contract("bench", "reps must be >= 1"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &(l, m) in sizes {
        if m == 0 || m > l {
            return Err(Error::contract(
                "bench",
                format!("need 1 <= m <= L, got L={l}, m={m}"),
            ));
        }
        let observed: Vec<usize> = (0..m).collect();
        let plan = AttentionPlan::shielded(l, &observed)?;

        let qkv_len = l * d;
        let q = hashed_values(seed ^ 0x51, qkv_len);
        let k = hashed_values(seed ^ 0x52, qkv_len);
        let v = hashed_values(seed ^ 0x53, qkv_len);
        let w1 = hashed_values(seed ^ 0x54, 2 * d);
        let b1 = hashed_values(seed ^ 0x55, d);
        let w2: Vec<f64> = hashed_values(seed ^ 0x56, d * d)
            .into_iter()
            .map(|x| x / d as f64)
            .collect();
        let b2 = hashed_values(seed ^ 0x57, d);
        let rel = move |i: usize, j: usize| hashed_rel(seed, i, j);
        let src = FcnSource::new(rel, &w1, &b1, &w2, &b2)?;

        let mut z = vec![0.0f64; qkv_len];
        let mut best = Duration::MAX;
        let mut stats = None;
        for _ in 0..reps {
            let s = sparse_shielded_attn(&q, &k, &v, d, &src, &plan, &mut z, None)?;
            if s.wall_time < best {
                best = s.wall_time;
            }
            stats = Some(s);
        }
        let stats = stats.unwrap();
        assert!(
            stats.pairs_evaluated <= (m + 1) * l,
            "pair budget exceeded: {} > {}",
            stats.pairs_evaluated,
            (m + 1) * l
        );
        rows.push(BenchRow {
            l,
            m,
            pairs: stats.pairs_evaluated,
            wall_ms: best.as_secs_f64() * 1e3,
            scratch_bytes: stats.peak_scratch_bytes,
        });
    }
    Ok(rows)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn unit_f64(h: u64) -> f64 {
    // [0, 1) from the top 53 bits.
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn hashed_values(seed: u64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 2.0 * unit_f64(splitmix64(seed ^ (i as u64).wrapping_mul(0xD6E8FEB86659FD93))) - 1.0)
        .collect()
}

/// Deterministic pseudo standardized relative position for a pair, computed
/// from the indices alone so the benchmark never stores an L*L table.
fn hashed_rel(seed: u64, i: usize, j: usize) -> [f64; 2] {
    let h = splitmix64(seed ^ ((i as u64) << 32 | j as u64));
    let h2 = splitmix64(h);
    [4.0 * unit_f64(h) - 2.0, 4.0 * unit_f64(h2) - 2.0]
}
