//! Evaluation metrics: RMSE, MAE and the Nash–Sutcliffe efficiency,
//! pooled over all (timestamp, node) prediction pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the observations are all equal (NSE undefined).
    pub nse: Option<f64>,
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Pooled metrics: `nse = 1 - SSE / sum((y - mean(y))^2)`.
pub fn metrics(pred: &[f64], obs: &[f64]) -> Result<MetricReport> {
    if pred.len() != obs.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions vs {} observations", pred.len(), obs.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::contract(
            "metrics",
            format!("need at least 2 pairs, got {}", pred.len()),
        ));
    }
    let n = pred.len() as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    for (p, o) in pred.iter().zip(obs) {
        let d = o - p;
        sse += d * d;
        sae += d.abs();
    }
    let mean_obs: f64 = obs.iter().sum::<f64>() / n;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean_obs) * (o - mean_obs)).sum();

    let (nse, note) = if ss_tot <= 0.0 {
        (
            None,
            Some("observations are constant; NSE undefined".to_string()),
        )
    } else {
        (Some(1.0 - sse / ss_tot), None)
    };

    Ok(MetricReport {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        nse,
        n_pairs: pred.len(),
        note,
    })
}
