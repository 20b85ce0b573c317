//! RMSE, predictive NLL, PICP and MPIW on a held-out set.
//!
//! Predictions are made in the dataset's working units. When the dataset
//! carries [`NormStats`](crate::data::NormStats), RMSE is rescaled to the
//! original target units and NLL gets the Jacobian term `ln(y_std)`. PICP and
//! MPIW are invariant to the affine target map.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::uncertainty::{mixture_interval, IntervalEstimate, IntervalMethod};

pub const NLL_CONVENTION: &str = "original units: standardized NLL + ln(target_std)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub nll: f64,
    pub picp: f64,
    /// `None` when the test targets have zero range.
    pub mpiw: Option<f64>,
    pub level: f64,
    pub interval_method: IntervalMethod,
    pub nll_convention: &'static str,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "rmse,nll,picp,mpiw,level,interval_method";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rmse,
            self.nll,
            self.picp,
            self.mpiw.map_or_else(String::new, |v| v.to_string()),
            self.level,
            self.interval_method.as_str()
        )
    }
}

/// Fraction of targets inside their intervals (boundaries count as inside).
pub fn picp(intervals: &[IntervalEstimate], y: &[f64]) -> f64 {
    let covered = intervals
        .iter()
        .zip(y)
        .filter(|(iv, &t)| iv.contains(t))
        .count();
    covered as f64 / y.len() as f64
}

/// Mean interval width over the target range `max y − min y`.
pub fn mpiw(intervals: &[IntervalEstimate], y: &[f64]) -> Result<f64> {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > min) {
        return Err(Error::DegenerateRange(max));
    }
    let mean_w = intervals.iter().map(IntervalEstimate::width).sum::<f64>() / intervals.len() as f64;
    Ok(mean_w / (max - min))
}

/// Per-point intervals in working units.
pub fn intervals(
    e: &Ensemble,
    test: &Dataset,
    level: f64,
    method: IntervalMethod,
) -> Result<Vec<IntervalEstimate>> {
    let mixes = e.mixtures_batch(test.x(), test.len())?;
    mixes
        .par_iter()
        .map(|m| mixture_interval(m, level, method))
        .collect()
}

/// Mean `−ln p^q(y|x)` in working units.
pub fn standardized_nll(e: &Ensemble, test: &Dataset) -> Result<f64> {
    let mixes = e.mixtures_batch(test.x(), test.len())?;
    Ok(-mixes
        .iter()
        .zip(test.y())
        .map(|(m, &y)| m.log_density(y))
        .sum::<f64>()
        / test.len() as f64)
}

pub fn evaluate(e: &Ensemble, test: &Dataset, level: f64, method: IntervalMethod) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mixes = e.mixtures_batch(test.x(), test.len())?;
    let y_scale = test.norm.as_ref().map_or(1.0, |n| n.y_std);
    let mse = mixes
        .iter()
        .zip(test.y())
        .map(|(m, &y)| (y - m.mean()).powi(2))
        .sum::<f64>()
        / test.len() as f64;
    let nll = standardized_nll(e, test)? + y_scale.ln();
    let ivs: Vec<IntervalEstimate> = mixes
        .par_iter()
        .map(|m| mixture_interval(m, level, method))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        rmse: mse.sqrt() * y_scale,
        nll,
        picp: picp(&ivs, test.y()),
        mpiw: mpiw(&ivs, test.y()).ok(),
        level,
        interval_method: method,
        nll_convention: NLL_CONVENTION,
    })
}
