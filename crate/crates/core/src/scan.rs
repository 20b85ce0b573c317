//! λ sweep for the rBER objective on synthetic data: per (λ, seed) train on
//! a training split, score on validation and test splits, then select the
//! λ whose mean validation PICP is closest to the nominal level.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_norm, norm_stats, Dataset};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::Activation;
use crate::objectives::{train, ObjectiveKind, TrainConfig};
use crate::rng;
use crate::study::DataSource;
use crate::uncertainty::IntervalMethod;

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.05, 0.5, 1.0]
}
fn default_seeds() -> usize {
    5
}
fn default_n_train() -> usize {
    400
}
fn default_n_val() -> usize {
    200
}
fn default_n_test() -> usize {
    2000
}
fn default_level() -> f64 {
    0.95
}
fn default_scan_data() -> DataSource {
    DataSource::Teacher {
        layer_widths: vec![4, 16, 1],
        activation: Activation::Tanh,
        noise_var: 0.05,
        teacher_seed: 7,
    }
}
fn default_scan_train() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::Rber,
        m_particles: 10,
        hidden_widths: vec![50],
        epochs: 300,
        batch_size: 100,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub interval_method: IntervalMethod,
    #[serde(default = "default_scan_data")]
    pub data: DataSource,
    /// `objective` and `lambda` are overridden per grid point.
    #[serde(default = "default_scan_train")]
    pub train: TrainConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            n_seeds: default_seeds(),
            seed: 0,
            n_train: default_n_train(),
            n_val: default_n_val(),
            n_test: default_n_test(),
            level: default_level(),
            interval_method: IntervalMethod::default(),
            data: default_scan_data(),
            train: default_scan_train(),
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument("lambdas must be a non-empty list in [0, 1]".into()));
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("lambdas must be strictly increasing".into()));
        }
        if self.n_seeds == 0 || self.n_train < 2 || self.n_val < 2 || self.n_test < 2 {
            return Err(Error::InvalidArgument("n_seeds >= 1 and every split >= 2 rows required".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {}", self.level)));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub seed: u64,
    pub val_picp: f64,
    pub val_mpiw: f64,
    pub test_rmse: f64,
    pub test_nll: f64,
    pub test_picp: f64,
    pub test_mpiw: f64,
    /// Mean predictive variance over the test inputs (standardized units).
    pub test_mean_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSummary {
    pub lambda: f64,
    pub val_picp: f64,
    pub test_picp: f64,
    pub test_mpiw: f64,
    pub test_rmse: f64,
    pub test_nll: f64,
    pub test_mean_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    /// Ordered by λ, then seed.
    pub rows: Vec<ScanRow>,
    pub summary: Vec<ScanSummary>,
    pub selected_lambda: f64,
}

impl ScanResult {
    pub const CSV_HEADER: &'static str =
        "lambda,seed,val_picp,val_mpiw,test_rmse,test_nll,test_picp,test_mpiw,test_mean_var";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.lambda, r.seed, r.val_picp, r.val_mpiw, r.test_rmse, r.test_nll, r.test_picp, r.test_mpiw, r.test_mean_var
            )?;
        }
        Ok(())
    }

    /// Per-seed column sequences ordered by λ.
    pub fn column_by_seed(&self, f: impl Fn(&ScanRow) -> f64) -> Vec<Vec<f64>> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
            .iter()
            .map(|&s| self.rows.iter().filter(|r| r.seed == s).map(&f).collect())
            .collect()
    }

    /// Fraction of adjacent-λ comparisons, over all seeds, where the column
    /// does not increase.
    pub fn nonincreasing_fraction(&self, f: impl Fn(&ScanRow) -> f64) -> f64 {
        let (mut ok, mut total) = (0usize, 0usize);
        for col in self.column_by_seed(f) {
            for w in col.windows(2) {
                total += 1;
                if w[1] <= w[0] {
                    ok += 1;
                }
            }
        }
        ok as f64 / total.max(1) as f64
    }

    pub fn selected(&self) -> &ScanSummary {
        self.summary
            .iter()
            .find(|s| s.lambda == self.selected_lambda)
            .expect("selected lambda is in the grid")
    }
}

fn fit_one(cfg: &ScanConfig, lambda: f64, seed: u64) -> Result<ScanRow> {
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    let data = cfg.data.generate(n, rng::derive_seed(seed, rng::stream::DATA_X))?.data;
    let idx = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let raw_train = data.select(&idx(0, cfg.n_train));
    let stats = norm_stats(&raw_train, None)?;
    let norm = |d: &Dataset| apply_norm(d, &stats);
    let tr = norm(&raw_train);
    let val = norm(&data.select(&idx(cfg.n_train, cfg.n_train + cfg.n_val)));
    let test = norm(&data.select(&idx(cfg.n_train + cfg.n_val, n)));
    let tcfg = TrainConfig {
        objective: ObjectiveKind::Rber,
        lambda,
        seed,
        ..cfg.train.clone()
    };
    let (e, _) = train(&tcfg, &tr)?;
    let v = evaluate(&e, &val, cfg.level, cfg.interval_method)?;
    let t = evaluate(&e, &test, cfg.level, cfg.interval_method)?;
    let mixes = e.mixtures_batch(test.x(), test.len())?;
    let mean_var = mixes.iter().map(|m| m.variance()).sum::<f64>() / test.len() as f64;
    Ok(ScanRow {
        lambda,
        seed,
        val_picp: v.picp,
        val_mpiw: v.mpiw.unwrap_or(f64::NAN),
        test_rmse: t.rmse,
        test_nll: t.nll,
        test_picp: t.picp,
        test_mpiw: t.mpiw.unwrap_or(f64::NAN),
        test_mean_var: mean_var,
    })
}

pub fn lambda_scan(cfg: &ScanConfig) -> Result<ScanResult> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|k| rng::derive_seed(cfg.seed, k)).collect();
    let jobs: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows: Vec<ScanRow> = jobs
        .par_iter()
        .map(|&(l, s)| fit_one(cfg, l, s))
        .collect::<Result<_>>()?;
    let summary: Vec<ScanSummary> = cfg
        .lambdas
        .iter()
        .map(|&lambda| {
            let rs: Vec<&ScanRow> = rows.iter().filter(|r| r.lambda == lambda).collect();
            let mean = |f: fn(&ScanRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            ScanSummary {
                lambda,
                val_picp: mean(|r| r.val_picp),
                test_picp: mean(|r| r.test_picp),
                test_mpiw: mean(|r| r.test_mpiw),
                test_rmse: mean(|r| r.test_rmse),
                test_nll: mean(|r| r.test_nll),
                test_mean_var: mean(|r| r.test_mean_var),
            }
        })
        .collect();
    // first (smallest) λ wins ties
    let mut selected = &summary[0];
    for s in &summary[1..] {
        if (s.val_picp - cfg.level).abs() < (selected.val_picp - cfg.level).abs() {
            selected = s;
        }
    }
    let selected_lambda = selected.lambda;
    Ok(ScanResult {
        rows,
        summary,
        selected_lambda,
    })
}
