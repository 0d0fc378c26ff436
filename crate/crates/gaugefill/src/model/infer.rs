//! Forward-only inference without the tape.
//!
//! Long query sequences make the dense pair table unaffordable, so this path
//! computes relative-position embeddings on demand inside the sparse kernel
//! (O(d) scratch per pair) and never allocates anything quadratic in the
//! sequence length.

use std::sync::Arc;

use super::config::{EmbeddingKind, PositionMode};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::geo::{relpos, DistanceProvider, RelPosStats, Station};
use crate::kernel::{sparse_shielded_attn, FcnSource, SrpeSource};
use crate::plan::AttentionPlan;
use crate::tape::LAYER_NORM_EPS;

pub struct InferInput<'a> {
    /// Standardized, mean-filled input value per node (length L).
    pub x_std: &'a [f64],
    /// Node coordinates, one per sequence position.
    pub points: &'a [Station],
    /// Training-time relative-position standardization statistics.
    pub stats: &'a RelPosStats,
    pub metric: &'a dyn DistanceProvider,
    pub plan: Arc<AttentionPlan>,
}

/// Aggregated kernel accounting over all layers and heads of one pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferStats {
    pub pairs_evaluated: usize,
    pub peak_scratch_bytes: usize,
}

/// Predictions (standardized target space) for every node of the sequence.
pub fn infer(params: &ModelParams, input: &InferInput) -> Result<(Vec<f64>, InferStats)> {
    let config = params.config();
    let layout = params.layout();
    let plan = &input.plan;
    let l = plan.len();
    let d = config.d_embed;
    let dk = config.d_head;

    if input.x_std.len() != l || input.points.len() != l {
        return Err(Error::shape(
            "infer",
            format!(
                "{} inputs / {} points vs plan length {l}",
                input.x_std.len(),
                input.points.len()
            ),
        ));
    }

    let t = |idx: usize| params.tensor(idx).data();

    // Input embedding.
    let [v1, b1, w2, b2] = layout.iem;
    let mut x = match config.emb_input {
        EmbeddingKind::Fcn => {
            let h = linear_rows(input.x_std, l, 1, t(v1), d, Some(t(b1)));
            linear_rows(&h, l, d, t(w2), d, Some(t(b2)))
        }
        EmbeddingKind::LinearNobias => linear_rows(input.x_std, l, 1, t(v1), d, None),
    };

    if config.position == PositionMode::Sape {
        let ape = layout
            .ape
            .ok_or_else(|| Error::contract("infer", "sape mode without ape parameters"))?;
        let coords: Vec<f64> = input
            .points
            .iter()
            .flat_map(|p| [p.lat, p.lon])
            .collect();
        let [aw1, ab1, aw2, ab2] = ape;
        let a = match config.emb_pos {
            EmbeddingKind::Fcn => {
                let h = linear_rows(&coords, l, 2, t(aw1), d, Some(t(ab1)));
                linear_rows(&h, l, d, t(aw2), d, Some(t(ab2)))
            }
            EmbeddingKind::LinearNobias => linear_rows(&coords, l, 2, t(aw1), d, None),
        };
        for (xv, av) in x.iter_mut().zip(&a) {
            *xv += av;
        }
    }

    // On-demand standardized relative position for a pair.
    let points = input.points;
    let stats = *input.stats;
    let metric = input.metric;
    let rel_std = move |i: usize, j: usize| -> [f64; 2] {
        if i == j {
            [stats.dist.standardize(0.0), stats.azim.standardize(0.0)]
        } else {
            let rp = relpos(&points[i], &points[j], metric);
            [
                stats.dist.standardize(rp.distance_km),
                stats.azim.standardize(rp.azimuth_deg),
            ]
        }
    };

    // The linear-no-bias position variant reuses the two-layer source with an
    // identity second layer and zero biases.
    let eye: Vec<f64>;
    let zeros: Vec<f64>;
    let [sw1, sb1, sw2, sb2] = layout.srpe;
    let src: Box<dyn SrpeSource> = match (config.position, config.emb_pos) {
        (PositionMode::Sape, _) => Box::new(OnesSource { d: dk }),
        (PositionMode::Srpe, EmbeddingKind::Fcn) => {
            Box::new(FcnSource::new(rel_std, t(sw1), t(sb1), t(sw2), t(sb2))?)
        }
        (PositionMode::Srpe, EmbeddingKind::LinearNobias) => {
            eye = {
                let mut m = vec![0.0; dk * dk];
                for i in 0..dk {
                    m[i * dk + i] = 1.0;
                }
                m
            };
            zeros = vec![0.0; dk];
            Box::new(FcnSource::new(rel_std, t(sw1), &zeros, &eye, &zeros)?)
        }
    };

    let mut stats_out = InferStats::default();
    let mut fused = vec![0.0f64; l * config.heads * dk];
    let mut z_head = vec![0.0f64; l * dk];

    for ids in &layout.layers {
        for (h, &(wq, wk, wv)) in ids.heads.iter().enumerate() {
            let q = linear_rows(&x, l, d, t(wq), dk, None);
            let k = linear_rows(&x, l, d, t(wk), dk, None);
            let v = linear_rows(&x, l, d, t(wv), dk, None);
            let ks = sparse_shielded_attn(&q, &k, &v, dk, src.as_ref(), plan, &mut z_head, None)?;
            stats_out.pairs_evaluated += ks.pairs_evaluated;
            stats_out.peak_scratch_bytes = stats_out.peak_scratch_bytes.max(ks.peak_scratch_bytes);
            let width = config.heads * dk;
            for i in 0..l {
                fused[i * width + h * dk..i * width + (h + 1) * dk]
                    .copy_from_slice(&z_head[i * dk..(i + 1) * dk]);
            }
        }
        let attn = linear_rows(&fused, l, config.heads * dk, t(ids.wo), d, None);
        let mut x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        layer_norm_rows(&mut x1, l, d, t(ids.ln1_gain), t(ids.ln1_shift));

        let mut f = linear_rows(&x1, l, d, t(ids.ffn_w1), config.d_ffn, Some(t(ids.ffn_b1)));
        for v in f.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let f = linear_rows(&f, l, config.d_ffn, t(ids.ffn_w2), d, Some(t(ids.ffn_b2)));
        let mut x2: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
        layer_norm_rows(&mut x2, l, d, t(ids.ln2_gain), t(ids.ln2_shift));
        x = x2;
    }

    let [pw1, pb1, pw2, pb2] = layout.pm;
    let p = linear_rows(&x, l, d, t(pw1), d, Some(t(pb1)));
    let yhat = linear_rows(&p, l, d, t(pw2), 1, Some(t(pb2)));

    if !yhat.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { op: "infer" });
    }
    Ok((yhat, stats_out))
}

struct OnesSource {
    d: usize,
}

impl SrpeSource for OnesSource {
    fn dim(&self) -> usize {
        self.d
    }

    fn write_c(&self, _p: usize, _i: usize, _j: usize, _scratch: &mut [f64], out: &mut [f64]) {
        out.fill(1.0);
    }
}

/// `[l, in_dim] @ [in_dim, out_dim] (+ bias)`, plain row-major loops.
fn linear_rows(
    x: &[f64],
    l: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0f64; l * out_dim];
    for i in 0..l {
        let x_row = &x[i * in_dim..(i + 1) * in_dim];
        let o_row = &mut out[i * out_dim..(i + 1) * out_dim];
        for (p, &xv) in x_row.iter().enumerate() {
            let w_row = &w[p * out_dim..(p + 1) * out_dim];
            for (o, &wv) in o_row.iter_mut().zip(w_row) {
                *o += xv * wv;
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in o_row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    out
}

fn layer_norm_rows(x: &mut [f64], l: usize, d: usize, gain: &[f64], shift: &[f64]) {
    for i in 0..l {
        let row = &mut x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + shift[j];
        }
    }
}
