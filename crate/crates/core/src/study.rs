//! BER-versus-N convergence study on synthetic data with a known truth.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_cubic, gen_teacher, Synthetic};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, NetworkSpec};
use crate::objectives::{train, ObjectiveKind, TrainConfig};
use crate::risk::{entropy_convergence_check, spearman, squared_risks};
use crate::rng;
use crate::metrics::{evaluate, MetricReport};
use crate::uncertainty::{IntervalMethod, QuadratureSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    /// `y = 0.5x³ + ε`.
    Cubic,
    /// Random teacher network with Gaussian noise.
    Teacher {
        layer_widths: Vec<usize>,
        activation: Activation,
        noise_var: f64,
        teacher_seed: u64,
    },
}

impl DataSource {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Synthetic> {
        match self {
            DataSource::Cubic => Ok(gen_cubic(n, seed)),
            DataSource::Teacher {
                layer_widths,
                activation,
                noise_var,
                teacher_seed,
            } => {
                let spec = NetworkSpec::new(layer_widths.clone(), *activation)?;
                let theta = nn::init_params(&spec, rng::derive_seed(*teacher_seed, rng::stream::TEACHER));
                gen_teacher(&spec, &theta, n, *noise_var, seed)
            }
        }
    }
}

fn default_grid() -> Vec<usize> {
    vec![50, 100, 200, 400, 800, 1600]
}

fn default_study_train() -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::StandardVi,
        lambda: 1.0,
        m_particles: 5,
        hidden_widths: vec![50, 50],
        lr: 0.004,
        batch_size: 100,
        // weak prior: at N = 50 a unit prior pins every particle to one solution
        prior_var: 100.0,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "StudyConfig::default_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Optimizer steps per run; epochs are derived per `N` from this.
    #[serde(default = "StudyConfig::default_steps")]
    pub steps: usize,
    #[serde(default = "StudyConfig::default_test_n")]
    pub test_n: usize,
    /// Test inputs used for the entropy gap (a prefix of the test set).
    #[serde(default = "StudyConfig::default_entropy_points")]
    pub entropy_points: usize,
    #[serde(default = "StudyConfig::default_data")]
    pub data: DataSource,
    #[serde(default = "default_study_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    /// Interval level and method for the per-N metrics.
    #[serde(default = "StudyConfig::default_level")]
    pub level: f64,
    #[serde(default)]
    pub interval_method: IntervalMethod,
}

impl StudyConfig {
    fn default_seeds() -> usize {
        3
    }
    fn default_steps() -> usize {
        3000
    }
    fn default_test_n() -> usize {
        10_000
    }
    fn default_entropy_points() -> usize {
        500
    }
    fn default_level() -> f64 {
        0.95
    }
    fn default_data() -> DataSource {
        DataSource::Cubic
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("n_grid must be strictly increasing".into()));
        }
        if self.n_grid.iter().any(|&n| n < 20) {
            return Err(Error::InvalidArgument("every N in the grid must be >= 20".into()));
        }
        if self.n_seeds == 0 || self.test_n == 0 || self.entropy_points == 0 {
            return Err(Error::InvalidArgument("n_seeds, test_n and entropy_points must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {}", self.level)));
        }
        self.quadrature.validate()?;
        self.train.validate()
    }

    /// Epochs giving at least `steps` optimizer steps at training size `n`.
    pub fn epochs_for(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.train.batch_size.min(n));
        self.steps.div_ceil(per_epoch).max(1)
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_grid: default_grid(),
            n_seeds: Self::default_seeds(),
            seed: 0,
            steps: Self::default_steps(),
            test_n: Self::default_test_n(),
            entropy_points: Self::default_entropy_points(),
            data: Self::default_data(),
            train: default_study_train(),
            quadrature: QuadratureSpec::default(),
            level: Self::default_level(),
            interval_method: IntervalMethod::default(),
        }
    }
}

/// One grid point, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub n: usize,
    pub r: f64,
    pub r_se: f64,
    pub pr: f64,
    pub ber: f64,
    pub per: f64,
    pub er: f64,
    pub entropy_gap: f64,
    pub rmse: f64,
    pub nll: f64,
    pub picp: f64,
    pub mpiw: f64,
    /// `None` on success, otherwise the first failure message.
    pub failure: Option<String>,
}

impl StudyRow {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of ln BER on ln N over successful rows.
    pub fitted_slope: Option<f64>,
    pub spearman_ber_r: Option<f64>,
}

impl StudyResult {
    pub const CSV_HEADER: &'static str = "n,r,r_se,pr,ber,per,er,entropy_gap,status";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            let status = match &r.failure {
                None => "ok".to_string(),
                Some(m) => format!("\"failed: {}\"", m.replace('"', "'")),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.n, r.r, r.r_se, r.pr, r.ber, r.per, r.er, r.entropy_gap, status
            )?;
        }
        Ok(())
    }

    pub const METRICS_CSV_HEADER: &'static str = "n,rmse,nll,picp,mpiw";

    /// Test-set metrics per grid point, averaged over seeds.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::METRICS_CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.n, r.rmse, r.nll, r.picp, r.mpiw)?;
        }
        Ok(())
    }
}

struct RunOutcome {
    r: f64,
    r_se: f64,
    pr: f64,
    ber: f64,
    per: f64,
    er: f64,
    gap: f64,
    metrics: MetricReport,
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Fit slope of ln BER vs ln N; needs at least 4 successful rows.
pub fn fit_slope(rows: &[StudyRow]) -> Option<f64> {
    let ok: Vec<&StudyRow> = rows.iter().filter(|r| r.ok() && r.ber > 0.0).collect();
    if ok.len() < 4 {
        return None;
    }
    let lx: Vec<f64> = ok.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = ok.iter().map(|r| r.ber.ln()).collect();
    Some(ls_slope(&lx, &ly))
}

pub fn convergence_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let base = rng::derive_seed(cfg.seed, rng::stream::STUDY);
    let test = cfg.data.generate(cfg.test_n, rng::derive_seed(base, u64::MAX))?;
    let ent_rows = cfg.entropy_points.min(test.data.len());
    let ent_x = &test.data.x()[..ent_rows * test.data.dim()];

    let jobs: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.n_seeds).map(move |k| (n, k)))
        .collect();
    let outcomes: Vec<Result<RunOutcome>> = jobs
        .par_iter()
        .map(|&(n, k)| {
            let run_seed = rng::derive_seed(rng::derive_seed(base, n as u64), k as u64);
            let train_data = cfg.data.generate(n, run_seed)?;
            let tcfg = TrainConfig {
                seed: run_seed,
                epochs: cfg.epochs_for(n),
                ..cfg.train.clone()
            };
            let (e, _) = train(&tcfg, &train_data.data)?;
            let risks = squared_risks(&e, &test.data, Some(&test.truth))?;
            let gap = entropy_convergence_check(&e, ent_x, ent_rows, &cfg.quadrature)?;
            let metrics = evaluate(&e, &test.data, cfg.level, cfg.interval_method)?;
            Ok(RunOutcome {
                r: risks.r,
                r_se: risks.r_se,
                pr: risks.pr,
                ber: risks.ber,
                per: risks.per.unwrap_or(f64::NAN),
                er: risks.er.unwrap_or(f64::NAN),
                gap: gap.gap,
                metrics,
            })
        })
        .collect();

    let rows: Vec<StudyRow> = cfg
        .n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let runs = &outcomes[gi * cfg.n_seeds..(gi + 1) * cfg.n_seeds];
            if let Some(Err(e)) = runs.iter().find(|r| r.is_err()) {
                return StudyRow {
                    n,
                    r: f64::NAN,
                    r_se: f64::NAN,
                    pr: f64::NAN,
                    ber: f64::NAN,
                    per: f64::NAN,
                    er: f64::NAN,
                    entropy_gap: f64::NAN,
                    rmse: f64::NAN,
                    nll: f64::NAN,
                    picp: f64::NAN,
                    mpiw: f64::NAN,
                    failure: Some(e.to_string()),
                };
            }
            let ok: Vec<&RunOutcome> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
            let k = ok.len() as f64;
            let avg = |f: fn(&RunOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / k;
            StudyRow {
                n,
                r: avg(|o| o.r),
                // SE of a mean of independent per-seed means
                r_se: (ok.iter().map(|o| o.r_se * o.r_se).sum::<f64>()).sqrt() / k,
                pr: avg(|o| o.pr),
                ber: avg(|o| o.ber),
                per: avg(|o| o.per),
                er: avg(|o| o.er),
                entropy_gap: avg(|o| o.gap),
                rmse: avg(|o| o.metrics.rmse),
                nll: avg(|o| o.metrics.nll),
                picp: avg(|o| o.metrics.picp),
                mpiw: avg(|o| o.metrics.mpiw.unwrap_or(f64::NAN)),
                failure: None,
            }
        })
        .collect();

    let fitted_slope = fit_slope(&rows);
    let ok: Vec<&StudyRow> = rows.iter().filter(|r| r.ok()).collect();
    let spearman_ber_r = if ok.len() >= 2 {
        let b: Vec<f64> = ok.iter().map(|r| r.ber).collect();
        let r: Vec<f64> = ok.iter().map(|r| r.r).collect();
        spearman(&b, &r).ok()
    } else {
        None
    };
    Ok(StudyResult {
        rows,
        fitted_slope,
        spearman_ber_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, ber: f64, ok: bool) -> StudyRow {
        StudyRow {
            n,
            r: 1.0,
            r_se: 0.0,
            pr: 0.0,
            ber,
            per: 0.0,
            er: 0.0,
            entropy_gap: 0.0,
            rmse: 0.0,
            nll: 0.0,
            picp: 0.0,
            mpiw: 0.0,
            failure: (!ok).then(|| "diverged".to_string()),
        }
    }

    #[test]
    fn slope_recovers_power_law_and_skips_failures() {
        let rows: Vec<StudyRow> = [50, 100, 200, 400, 800]
            .iter()
            .map(|&n| row(n, 3.0 * (n as f64).powf(-0.5), true))
            .chain([row(1600, 123.0, false)])
            .collect();
        assert!((fit_slope(&rows).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(fit_slope(&rows[2..]), None);
    }

    #[test]
    fn grid_validation() {
        let bad = StudyConfig { n_grid: vec![50, 40], ..StudyConfig::default() };
        assert!(bad.validate().is_err());
        let small = StudyConfig { n_grid: vec![10, 40], ..StudyConfig::default() };
        assert!(small.validate().is_err());
    }

    #[test]
    fn epochs_cover_step_budget() {
        let cfg = StudyConfig::default();
        assert_eq!(cfg.epochs_for(50), 3000);
        assert_eq!(cfg.epochs_for(1600), 188);
    }

    #[test]
    fn noiseless_teacher_student_ber_shrinks() {
        let cfg = StudyConfig {
            n_grid: vec![20, 2000],
            n_seeds: 1,
            steps: 8000,
            test_n: 500,
            entropy_points: 50,
            data: DataSource::Teacher {
                layer_widths: vec![2, 16, 1],
                activation: Activation::Tanh,
                noise_var: 0.0,
                teacher_seed: 3,
            },
            train: TrainConfig {
                objective: ObjectiveKind::StandardVi,
                m_particles: 4,
                hidden_widths: vec![16],
                activation: Activation::Tanh,
                lr: 0.002,
                prior_var: 100.0,
                init_log_noise_var: -4.0,
                ..TrainConfig::default()
            },
            ..StudyConfig::default()
        };
        let res = convergence_study(&cfg).unwrap();
        assert!(res.rows.iter().all(StudyRow::ok));
        assert!(res.rows[1].ber * 10.0 < res.rows[0].ber, "{:?}", res.rows);
    }
}
