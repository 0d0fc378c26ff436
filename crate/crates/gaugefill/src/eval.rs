//! Held-out evaluation: run the trained model and/or the classical
//! baselines over every snapshot, predict at the test stations, and pool
//! (prediction, observation) pairs into the metric suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::variogram::{fit_spherical_to_bins, max_pair_distance, BinAccumulator};
use crate::baselines::{
    fit_variogram, idw, metrics, ordinary_kriging, GreatCircleKm, MetricReport, P2, Sample, Tin,
    TinValue, Variogram,
};
use crate::data::ingest::Snapshot;
use crate::data::manifest::SplitIndices;
use crate::data::mask::{destandardize, fill_for_inference};
use crate::error::{Error, Result};
use crate::geo::{Haversine, RelPosStats, StationSet};
use crate::model::{build_plan, infer, InferInput, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Idw,
    Ok,
    Tin,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Idw => "idw",
            BaselineKind::Ok => "ok",
            BaselineKind::Tin => "tin",
        }
    }

    pub fn parse(s: &str) -> Result<BaselineKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "idw" => Ok(BaselineKind::Idw),
            "ok" | "kriging" => Ok(BaselineKind::Ok),
            "tin" => Ok(BaselineKind::Tin),
            other => Err(Error::config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Clamp model predictions at 0 mm.
    pub clamp_nonneg: bool,
    pub idw_power: f64,
    pub variogram_bins: usize,
    /// Refit the variogram per timestamp (default) or fit one global model
    /// over all timestamps' pair semivariances.
    pub variogram_refit_per_timestamp: bool,
    /// Outside the TIN hull, fall back to the nearest station value instead
    /// of skipping the pair.
    pub tin_nearest_fallback: bool,
    /// Average per-timestamp metrics instead of pooling all pairs globally.
    pub per_timestamp_pooling: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            clamp_nonneg: true,
            idw_power: 2.0,
            variogram_bins: 10,
            variogram_refit_per_timestamp: true,
            tin_nearest_fallback: true,
            per_timestamp_pooling: false,
        }
    }
}

/// Metrics for one method plus bookkeeping about skipped pairs.
#[derive(Debug, Clone, Serialize)]
pub struct MethodEval {
    pub report: MetricReport,
    /// Pairs dropped (e.g. outside the TIN hull with fallback disabled).
    pub skipped_pairs: usize,
}

/// (timestamp index, prediction, observation) triples pooled over the run.
type Pairs = Vec<(usize, f64, f64)>;

fn report_from_pairs(pairs: &Pairs, per_timestamp: bool) -> Result<MetricReport> {
    if per_timestamp {
        let mut by_t: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for &(t, p, o) in pairs {
            let e = by_t.entry(t).or_default();
            e.0.push(p);
            e.1.push(o);
        }
        let mut rmse_sum = 0.0;
        let mut mae_sum = 0.0;
        let mut nse_sum = 0.0;
        let mut nse_n = 0usize;
        let mut groups = 0usize;
        for (_, (p, o)) in &by_t {
            if p.len() < 2 {
                continue;
            }
            let r = metrics(p, o)?;
            rmse_sum += r.rmse;
            mae_sum += r.mae;
            if let Some(nse) = r.nse {
                nse_sum += nse;
                nse_n += 1;
            }
            groups += 1;
        }
        if groups == 0 {
            return Err(Error::Eval("no timestamp had >= 2 evaluable pairs".into()));
        }
        Ok(MetricReport {
            rmse: rmse_sum / groups as f64,
            mae: mae_sum / groups as f64,
            nse: if nse_n > 0 {
                Some(nse_sum / nse_n as f64)
            } else {
                None
            },
            n_pairs: pairs.len(),
            note: Some(format!("per-timestamp average over {groups} timestamps")),
        })
    } else {
        let pred: Vec<f64> = pairs.iter().map(|&(_, p, _)| p).collect();
        let obs: Vec<f64> = pairs.iter().map(|&(_, _, o)| o).collect();
        metrics(&pred, &obs)
    }
}

/// Evaluate the trained model: for every snapshot, feed the observed
/// training stations and predict at the test stations in one forward pass.
pub fn eval_model(
    params: &ModelParams,
    stats: &RelPosStats,
    roster: &StationSet,
    snapshots: &[Snapshot],
    split: &SplitIndices,
    cfg: &EvalConfig,
) -> Result<MethodEval> {
    let train_roster = roster.subset(&split.train)?;
    let test_stations: Vec<_> = split.test.iter().map(|&i| roster.get(i).clone()).collect();
    let mut pairs: Pairs = Vec::new();
    let mut skipped = 0usize;

    for (t, snap) in snapshots.iter().enumerate() {
        let sub = restrict_snapshot(snap, &split.train);
        if !sub.observed.iter().any(|&o| o) {
            skipped += count_observed_tests(snap, &split.test);
            continue;
        }
        let seq = fill_for_inference(&train_roster, &sub, &test_stations)?;
        let plan = build_plan(params.config(), seq.points.len(), &seq.observed_rows)?;
        let (pred_std, _) = infer(
            params,
            &InferInput {
                x_std: &seq.x_std,
                points: &seq.points,
                stats,
                metric: &Haversine,
                plan,
            },
        )?;
        for (qi, &row) in seq.query_rows.iter().enumerate() {
            let roster_idx = split.test[qi];
            if !snap.observed[roster_idx] {
                continue;
            }
            let pred_mm = destandardize(pred_std[row], &seq.stats, cfg.clamp_nonneg);
            pairs.push((t, pred_mm, snap.values[roster_idx]));
        }
    }

    if pairs.len() < 2 {
        return Err(Error::Eval(format!(
            "only {} evaluable (timestamp, test station) pairs",
            pairs.len()
        )));
    }
    Ok(MethodEval {
        report: report_from_pairs(&pairs, cfg.per_timestamp_pooling)?,
        skipped_pairs: skipped,
    })
}

/// Evaluate classical baselines on the identical split.
pub fn eval_baselines(
    roster: &StationSet,
    snapshots: &[Snapshot],
    split: &SplitIndices,
    kinds: &[BaselineKind],
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, MethodEval>> {
    let metric = GreatCircleKm;
    let mut pooled: BTreeMap<BaselineKind, (Pairs, usize)> = BTreeMap::new();
    for &k in kinds {
        pooled.insert(k, (Vec::new(), 0));
    }

    // Global variogram: accumulate pair semivariances over all timestamps
    // against fixed bin edges from the training-station geometry.
    let global_vario: Option<Variogram> = if kinds.contains(&BaselineKind::Ok)
        && !cfg.variogram_refit_per_timestamp
    {
        let geometry: Vec<Sample> = split
            .train
            .iter()
            .map(|&i| Sample {
                at: P2::from(roster.get(i)),
                value: 0.0,
            })
            .collect();
        let max_h = max_pair_distance(&geometry, &metric);
        let mut acc = BinAccumulator::new(cfg.variogram_bins, max_h)?;
        for snap in snapshots {
            let known = known_samples(roster, snap, &split.train);
            if known.len() >= 3 {
                acc.add_pairs(&known, &metric);
            }
        }
        Some(fit_spherical_to_bins(&acc.bins())?)
    } else {
        None
    };

    for (t, snap) in snapshots.iter().enumerate() {
        let known = known_samples(roster, snap, &split.train);
        if known.is_empty() {
            continue;
        }
        let queries: Vec<(usize, P2, f64)> = split
            .test
            .iter()
            .filter(|&&i| snap.observed[i])
            .map(|&i| (i, P2::from(roster.get(i)), snap.values[i]))
            .collect();
        if queries.is_empty() {
            continue;
        }

        for &kind in kinds {
            let (pairs, skipped) = pooled.get_mut(&kind).unwrap();
            match kind {
                BaselineKind::Idw => {
                    for &(_, q, obs) in &queries {
                        let v = idw(&known, q, cfg.idw_power, &metric)?;
                        pairs.push((t, v, obs));
                    }
                }
                BaselineKind::Ok => {
                    if known.len() < 3 {
                        *skipped += queries.len();
                        continue;
                    }
                    let vario = match &global_vario {
                        Some(v) => *v,
                        None => fit_variogram(&known, &metric, cfg.variogram_bins)?,
                    };
                    for &(_, q, obs) in &queries {
                        let (v, _) = ordinary_kriging(&known, q, &vario, &metric)?;
                        pairs.push((t, v, obs));
                    }
                }
                BaselineKind::Tin => {
                    if known.len() < 3 {
                        *skipped += queries.len();
                        continue;
                    }
                    let tin = match Tin::build(&known) {
                        Ok(t) => t,
                        Err(_) => {
                            // Collinear observed set this hour.
                            *skipped += queries.len();
                            continue;
                        }
                    };
                    for &(_, q, obs) in &queries {
                        match tin.interpolate(q) {
                            TinValue::Inside(v) => pairs.push((t, v, obs)),
                            TinValue::OutsideHull => {
                                if cfg.tin_nearest_fallback {
                                    pairs.push((t, tin.interpolate_or_nearest(q), obs));
                                } else {
                                    *skipped += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = BTreeMap::new();
    for (kind, (pairs, skipped)) in pooled {
        if pairs.len() < 2 {
            return Err(Error::Eval(format!(
                "baseline {}: only {} evaluable pairs",
                kind.name(),
                pairs.len()
            )));
        }
        out.insert(
            kind.name().to_string(),
            MethodEval {
                report: report_from_pairs(&pairs, cfg.per_timestamp_pooling)?,
                skipped_pairs: skipped,
            },
        );
    }
    Ok(out)
}

fn restrict_snapshot(snap: &Snapshot, indices: &[usize]) -> Snapshot {
    Snapshot {
        timestamp: snap.timestamp,
        values: indices.iter().map(|&i| snap.values[i]).collect(),
        observed: indices.iter().map(|&i| snap.observed[i]).collect(),
    }
}

fn count_observed_tests(snap: &Snapshot, test: &[usize]) -> usize {
    test.iter().filter(|&&i| snap.observed[i]).count()
}

fn known_samples(roster: &StationSet, snap: &Snapshot, train: &[usize]) -> Vec<Sample> {
    train
        .iter()
        .filter(|&&i| snap.observed[i])
        .map(|&i| Sample {
            at: P2::from(roster.get(i)),
            value: snap.values[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, FieldSpec};

    fn small_setup() -> (crate::synth::SynthDataset, SplitIndices) {
        let ds = generate(&FieldSpec {
            seed: 3,
            n_stations: 25,
            n_snapshots: 20,
            ..Default::default()
        })
        .unwrap();
        let split = SplitIndices {
            train: (5..25).collect(),
            test: (0..5).collect(),
        };
        (ds, split)
    }

    #[test]
    fn baselines_produce_reports_on_synthetic_data() {
        let (ds, split) = small_setup();
        let cfg = EvalConfig::default();
        let out = eval_baselines(
            &ds.roster,
            &ds.snapshots,
            &split,
            &[BaselineKind::Idw, BaselineKind::Ok, BaselineKind::Tin],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        for (name, m) in &out {
            assert!(m.report.rmse.is_finite(), "{name} rmse");
            assert!(m.report.rmse >= m.report.mae);
            assert!(m.report.n_pairs > 10, "{name} pooled {}", m.report.n_pairs);
        }
    }

    #[test]
    fn global_variogram_mode_works() {
        let (ds, split) = small_setup();
        let cfg = EvalConfig {
            variogram_refit_per_timestamp: false,
            ..Default::default()
        };
        let out = eval_baselines(&ds.roster, &ds.snapshots, &split, &[BaselineKind::Ok], &cfg)
            .unwrap();
        assert!(out["ok"].report.rmse.is_finite());
    }

    #[test]
    fn per_timestamp_pooling_flag() {
        let (ds, split) = small_setup();
        let cfg = EvalConfig {
            per_timestamp_pooling: true,
            ..Default::default()
        };
        let out =
            eval_baselines(&ds.roster, &ds.snapshots, &split, &[BaselineKind::Idw], &cfg).unwrap();
        assert!(out["idw"].report.note.as_deref().unwrap().contains("per-timestamp"));
    }

    #[test]
    fn model_eval_runs_with_fresh_params() {
        use crate::geo::{build_relpos_table, Haversine};
        use crate::model::{ModelConfig, ModelParams};
        let (ds, split) = small_setup();
        let train_roster = ds.roster.subset(&split.train).unwrap();
        let table = build_relpos_table(&train_roster, &Haversine).unwrap();
        let params = ModelParams::init(
            &ModelConfig {
                layers: 1,
                heads: 1,
                d_embed: 4,
                d_head: 4,
                d_ffn: 6,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let out = eval_model(
            &params,
            &table.stats(),
            &ds.roster,
            &ds.snapshots,
            &split,
            &EvalConfig::default(),
        )
        .unwrap();
        assert!(out.report.rmse.is_finite());
        assert!(out.report.n_pairs >= ds.snapshots.len());
    }
}
