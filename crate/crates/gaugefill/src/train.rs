//! Mask-and-recover training loop.
//!
//! Every epoch re-masks each snapshot `remask_count` times, shuffles the
//! resulting sequences, and runs Adam with the inverse-square-root warmup
//! schedule on batch-mean masked MSE. Gradients are always reduced in
//! sequence order, so results are bit-identical for any worker count.

use serde::{Deserialize, Serialize};

use crate::data::ingest::Snapshot;
use crate::data::mask::{epoch_sequences, mix_seed, EpochConfig, FillMode, MaskedSequence};
use crate::error::{Error, Result};
use crate::geo::{build_relpos_table, Haversine, RelPosStats, StationSet};
use crate::model::{build_plan, forward, masked_mse_loss, ForwardInput, ModelConfig, ModelParams};
use crate::optim::{warmup_lr, AdamConfig, AdamState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Independently masked copies of each sequence per epoch.
    pub remask_count: usize,
    pub mask_ratio: f64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub static_masking: bool,
    pub fill: FillMode,
    /// Worker threads for per-sequence gradient evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 64,
            remask_count: 10,
            mask_ratio: 0.2,
            warmup_steps: 1200,
            lr_scale: 1.0,
            adam: AdamConfig::default(),
            seed: 42,
            static_masking: false,
            fill: FillMode::Mean,
            threads: 1,
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    /// Relative-position standardization statistics of the training roster;
    /// they travel with the checkpoint.
    pub stats: RelPosStats,
    /// Mean masked MSE per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on snapshots over the given (training) roster.
/// `progress` receives (epoch index, mean epoch loss) after each epoch.
pub fn train(
    roster: &StationSet,
    snapshots: &[Snapshot],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    if snapshots.is_empty() {
        return Err(Error::config("no training snapshots"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("epochs and batch size must be >= 1"));
    }

    let table = build_relpos_table(roster, &Haversine)?;
    let rel_std = table.standardized();
    let stats = table.stats();
    let coords: Vec<f64> = roster.iter().flat_map(|s| [s.lat, s.lon]).collect();

    let mut params = ModelParams::init(&cfg.model, mix_seed(&[cfg.seed, 0x7061_7261]))?;
    let mut adam = AdamState::new(params.tensors());
    let epoch_cfg = EpochConfig {
        remask_count: cfg.remask_count,
        mask_ratio: cfg.mask_ratio,
        seed: cfg.seed,
        static_masking: cfg.static_masking,
        fill: cfg.fill,
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let sequences = epoch_sequences(snapshots, epoch as u64, &epoch_cfg)?;
        if sequences.is_empty() {
            return Err(Error::config(
                "every snapshot was skipped (fewer than 2 known nodes each)",
            ));
        }
        let mut loss_sum = 0.0;
        for batch in sequences.chunks(cfg.batch_size) {
            let lr = warmup_lr(
                adam.step_count() + 1,
                cfg.warmup_steps,
                cfg.model.d_embed,
                cfg.lr_scale,
            )?;
            let (batch_loss, grads) = batch_gradients(&params, batch, &rel_std, &coords, cfg)?;
            adam.step(&cfg.adam, lr, params.tensors_mut(), &grads)?;
            loss_sum += batch_loss * batch.len() as f64;
        }
        let epoch_loss = loss_sum / sequences.len() as f64;
        epoch_losses.push(epoch_loss);
        progress(epoch, epoch_loss);
    }

    Ok(TrainOutcome {
        params,
        stats,
        epoch_losses,
    })
}

/// Mean loss and mean gradients over a batch. Per-sequence gradients are
/// summed in sequence order regardless of how work was distributed.
fn batch_gradients(
    params: &ModelParams,
    batch: &[MaskedSequence],
    rel_std: &[f64],
    coords: &[f64],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len();
    let per_seq: Vec<Result<(f64, Vec<Vec<f64>>)>> = if cfg.threads <= 1 || n == 1 {
        batch
            .iter()
            .map(|seq| sequence_gradients(params, seq, rel_std, coords))
            .collect()
    } else {
        let workers = cfg.threads.min(n);
        let chunk_len = n.div_ceil(workers);
        let mut results: Vec<Result<(f64, Vec<Vec<f64>>)>> = Vec::with_capacity(n);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk_len)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|seq| sequence_gradients(params, seq, rel_std, coords))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                results.extend(h.join().expect("gradient worker panicked"));
            }
        });
        results
    };

    let scale = 1.0 / n as f64;
    let mut total: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| vec![0.0f64; t.numel()])
        .collect();
    let mut loss_sum = 0.0;
    for res in per_seq {
        let (loss, grads) = res?;
        loss_sum += loss;
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
    }
    Ok((loss_sum * scale, total))
}

fn sequence_gradients(
    params: &ModelParams,
    seq: &MaskedSequence,
    rel_std: &[f64],
    coords: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let plan = build_plan(params.config(), seq.x_std.len(), &seq.observed_rows)?;
    let mut pass = forward(
        params,
        &ForwardInput {
            x_std: &seq.x_std,
            rel_std: Some(rel_std),
            coords: Some(coords),
            plan,
        },
    )?;
    let loss = masked_mse_loss(
        &mut pass.tape,
        pass.predictions,
        &seq.mask_indices,
        &seq.targets_std,
    )?;
    let loss_value = pass.tape.value(loss).data()[0];
    let mut grads = pass.tape.backward(loss)?;
    let per_param: Vec<Vec<f64>> = pass.param_vars.iter().map(|&v| grads.take(v)).collect();
    Ok((loss_value, per_param))
}
