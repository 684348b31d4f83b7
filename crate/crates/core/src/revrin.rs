//! Reversible robust instance normalization: per-feature (x - median) / IQR
//! with stored statistics for exact inversion.

use serde::{Deserialize, Serialize};

use crate::distance::DistanceSeries;
use crate::error::{Error, Result};

/// Type-7 quantile: linear interpolation between order statistics at
/// position 1 + q(n-1).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub median: f64,
    pub iqr: f64,
}

/// Per-feature normalization statistics, serializable alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevrinState {
    pub features: Vec<FeatureStats>,
}

fn row_stats(row: &[f64], feature: usize) -> Result<FeatureStats> {
    if row.len() < 2 {
        return Err(Error::RevrinState(format!(
            "feature {feature}: need at least 2 steps, got {}",
            row.len()
        )));
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile(&sorted, 0.5);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    if iqr < 1e-12 * median.abs().max(1.0) {
        return Err(Error::DegenerateScale { feature });
    }
    Ok(FeatureStats { median, iqr })
}

/// Normalize each feature row to median 0 and IQR 1, returning the stored
/// statistics for inversion.
pub fn revrin_forward(x: &DistanceSeries) -> Result<(DistanceSeries, RevrinState)> {
    let mut features = Vec::with_capacity(x.n_features());
    let mut values = Vec::with_capacity(x.n_features());
    for (f, row) in x.values.iter().enumerate() {
        let stats = row_stats(row, f)?;
        values.push(
            row.iter()
                .map(|v| (v - stats.median) / stats.iqr)
                .collect(),
        );
        features.push(stats);
    }
    Ok((
        DistanceSeries {
            metric_names: x.metric_names.clone(),
            values,
        },
        RevrinState { features },
    ))
}

/// Exact inverse: x = xn * IQR + median.
pub fn revrin_inverse(xn: &DistanceSeries, state: &RevrinState) -> Result<DistanceSeries> {
    if xn.n_features() != state.features.len() {
        return Err(Error::RevrinState(format!(
            "series has {} features, state has {}",
            xn.n_features(),
            state.features.len()
        )));
    }
    let values = xn
        .values
        .iter()
        .zip(&state.features)
        .map(|(row, s)| row.iter().map(|v| v * s.iqr + s.median).collect())
        .collect();
    Ok(DistanceSeries {
        metric_names: xn.metric_names.clone(),
        values,
    })
}
