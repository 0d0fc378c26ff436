//! Differentiable forward pass on the tape.

use std::sync::Arc;

use super::config::{EmbeddingKind, ModelConfig, PositionMode};
use super::params::{LayerIds, Layout, ModelParams};
use crate::error::{Error, Result};
use crate::plan::AttentionPlan;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// One sequence's model inputs.
pub struct ForwardInput<'a> {
    /// Standardized, mean-filled input value per node (length L).
    pub x_std: &'a [f64],
    /// Standardized pairwise relative positions, flat `L*L*2` in sequence
    /// coordinates. Required in `srpe` position mode.
    pub rel_std: Option<&'a [f64]>,
    /// Raw (lat, lon) per node, flat `L*2`. Required in `sape` position mode.
    pub coords: Option<&'a [f64]>,
    pub plan: Arc<AttentionPlan>,
}

/// A completed forward pass: the tape plus handles for the backward sweep.
pub struct ForwardPass {
    pub tape: Tape,
    /// Tape variable of each parameter tensor, aligned with
    /// [`ModelParams::tensors`] order.
    pub param_vars: Vec<VarId>,
    /// Prediction per node, shape `[L]`, in standardized target space.
    pub predictions: VarId,
}

impl ForwardPass {
    pub fn predictions_vec(&self) -> Vec<f64> {
        self.tape.value(self.predictions).data().to_vec()
    }
}

/// Build the shielded plan (or the full plan when the shield is off).
pub fn build_plan(config: &ModelConfig, len: usize, observed: &[usize]) -> Result<Arc<AttentionPlan>> {
    let plan = if config.shield {
        AttentionPlan::shielded(len, observed)?
    } else {
        AttentionPlan::full(len)?
    };
    Ok(Arc::new(plan))
}

/// Scalar inputs through the input-embedding network: `[L] -> [L, d]`.
pub fn embed_inputs(
    tape: &mut Tape,
    param_vars: &[VarId],
    layout: &Layout,
    config: &ModelConfig,
    x_std: &[f64],
) -> Result<VarId> {
    let l = x_std.len();
    let x_col = tape.leaf(Tensor::new(vec![l, 1], x_std.to_vec())?)?;
    let [v1, b1, w2, b2] = layout.iem;
    match config.emb_input {
        EmbeddingKind::Fcn => {
            let h = tape.linear(x_col, param_vars[v1], param_vars[b1])?;
            tape.linear(h, param_vars[w2], param_vars[b2])
        }
        EmbeddingKind::LinearNobias => tape.matmul(x_col, param_vars[v1]),
    }
}

/// Standardized relative positions through the position-embedding network:
/// `[P, 2] -> [P, d]`, one row per allowed pair.
pub fn embed_relpos_pairs(
    tape: &mut Tape,
    param_vars: &[VarId],
    layout: &Layout,
    config: &ModelConfig,
    rel_pairs: Tensor,
) -> Result<VarId> {
    let r = tape.leaf(rel_pairs)?;
    let [w1, b1, w2, b2] = layout.srpe;
    match config.emb_pos {
        EmbeddingKind::Fcn => {
            let h = tape.linear(r, param_vars[w1], param_vars[b1])?;
            tape.linear(h, param_vars[w2], param_vars[b2])
        }
        EmbeddingKind::LinearNobias => tape.matmul(r, param_vars[w1]),
    }
}

/// Raw (lat, lon) rows through the absolute-position network: `[L, 2] -> [L, d]`.
fn embed_abs_positions(
    tape: &mut Tape,
    param_vars: &[VarId],
    layout: &Layout,
    config: &ModelConfig,
    coords: &[f64],
    len: usize,
) -> Result<VarId> {
    let ape = layout
        .ape
        .ok_or_else(|| Error::contract("forward", "sape mode without ape parameters"))?;
    let c = tape.leaf(Tensor::new(vec![len, 2], coords.to_vec())?)?;
    let [w1, b1, w2, b2] = ape;
    match config.emb_pos {
        EmbeddingKind::Fcn => {
            let h = tape.linear(c, param_vars[w1], param_vars[b1])?;
            tape.linear(h, param_vars[w2], param_vars[b2])
        }
        EmbeddingKind::LinearNobias => tape.matmul(c, param_vars[w1]),
    }
}

/// One encoder layer: shielded multi-head attention with residual + layer
/// norm, then the ReLU feed-forward with residual + layer norm.
pub fn encoder_layer(
    tape: &mut Tape,
    param_vars: &[VarId],
    ids: &LayerIds,
    x: VarId,
    c_pairs: VarId,
    plan: Arc<AttentionPlan>,
) -> Result<VarId> {
    let mut head_outputs = Vec::with_capacity(ids.heads.len());
    for &(wq, wk, wv) in &ids.heads {
        let q = tape.matmul(x, param_vars[wq])?;
        let k = tape.matmul(x, param_vars[wk])?;
        let v = tape.matmul(x, param_vars[wv])?;
        head_outputs.push(tape.sparse_attn(q, k, v, c_pairs, plan.clone())?);
    }
    let fused = tape.concat(&head_outputs)?;
    let attn = tape.matmul(fused, param_vars[ids.wo])?;
    let res1 = tape.add(x, attn)?;
    let x1 = tape.layer_norm(res1, param_vars[ids.ln1_gain], param_vars[ids.ln1_shift])?;

    let f = tape.linear(x1, param_vars[ids.ffn_w1], param_vars[ids.ffn_b1])?;
    let f = tape.relu(f)?;
    let f = tape.linear(f, param_vars[ids.ffn_w2], param_vars[ids.ffn_b2])?;
    let res2 = tape.add(x1, f)?;
    tape.layer_norm(res2, param_vars[ids.ln2_gain], param_vars[ids.ln2_shift])
}

/// Full differentiable forward pass for one sequence.
pub fn forward(params: &ModelParams, input: &ForwardInput) -> Result<ForwardPass> {
    let config = params.config();
    let plan = input.plan.clone();
    let l = plan.len();
    if input.x_std.len() != l {
        return Err(Error::shape(
            "forward",
            format!("{} inputs vs plan length {l}", input.x_std.len()),
        ));
    }

    let mut tape = Tape::new();
    let param_vars: Vec<VarId> = params
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let layout = params.layout();

    let mut x = embed_inputs(&mut tape, &param_vars, layout, config, input.x_std)?;
    if config.position == PositionMode::Sape {
        let coords = input
            .coords
            .ok_or_else(|| Error::contract("forward", "sape mode requires coords"))?;
        if coords.len() != l * 2 {
            return Err(Error::shape(
                "forward",
                format!("coords length {} vs L*2 = {}", coords.len(), l * 2),
            ));
        }
        let ape = embed_abs_positions(&mut tape, &param_vars, layout, config, coords, l)?;
        x = tape.add(x, ape)?;
    }

    let pair_count = plan.pair_count();
    let c_pairs = match config.position {
        PositionMode::Srpe => {
            let rel = input
                .rel_std
                .ok_or_else(|| Error::contract("forward", "srpe mode requires rel_std"))?;
            if rel.len() != l * l * 2 {
                return Err(Error::shape(
                    "forward",
                    format!("rel_std length {} vs L*L*2 = {}", rel.len(), l * l * 2),
                ));
            }
            let mut pairs = Vec::with_capacity(pair_count * 2);
            for i in 0..l {
                for &j in plan.allowed(i) {
                    pairs.push(rel[(i * l + j) * 2]);
                    pairs.push(rel[(i * l + j) * 2 + 1]);
                }
            }
            let rel_pairs = Tensor::new(vec![pair_count, 2], pairs)?;
            embed_relpos_pairs(&mut tape, &param_vars, layout, config, rel_pairs)?
        }
        // Constant all-ones embedding makes the fused score an ordinary
        // scaled dot product.
        PositionMode::Sape => tape.leaf(Tensor::new(
            vec![pair_count, config.d_head],
            vec![1.0; pair_count * config.d_head],
        )?)?,
    };

    for ids in &layout.layers {
        x = encoder_layer(&mut tape, &param_vars, ids, x, c_pairs, plan.clone())?;
    }

    let [w1, b1, w2, b2] = layout.pm;
    let p = tape.linear(x, param_vars[w1], param_vars[b1])?;
    let yhat = tape.linear(p, param_vars[w2], param_vars[b2])?;
    let predictions = tape.reshape(yhat, vec![l])?;

    Ok(ForwardPass {
        tape,
        param_vars,
        predictions,
    })
}

/// Mean squared error over the masked nodes only, in standardized space.
pub fn masked_mse_loss(
    tape: &mut Tape,
    predictions: VarId,
    mask_indices: &[usize],
    targets_std: &[f64],
) -> Result<VarId> {
    if mask_indices.is_empty() {
        return Err(Error::contract("masked_mse_loss", "empty mask"));
    }
    if mask_indices.len() != targets_std.len() {
        return Err(Error::shape(
            "masked_mse_loss",
            format!(
                "{} mask indices vs {} targets",
                mask_indices.len(),
                targets_std.len()
            ),
        ));
    }
    let l = tape.value(predictions).numel();
    let pred_col = tape.reshape(predictions, vec![l, 1])?;
    let picked = tape.gather_rows(pred_col, Arc::new(mask_indices.to_vec()))?;
    let targets = tape.leaf(Tensor::new(vec![targets_std.len(), 1], targets_std.to_vec())?)?;
    let diff = tape.sub(picked, targets)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}
