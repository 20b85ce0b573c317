//! Property suite: every identity and bound the library relies on, checked
//! on random ensembles with pinned tolerances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::gen_teacher;
use crate::ensemble::{Ensemble, GaussianMixture};
use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkSpec, ParameterVector};
use crate::objectives::{evaluate_loss, loss_and_gradient, Batch, ObjectiveSpec, PriorSpec, Repulsion};
use crate::risk::{brute_force_ber_squared_mixture, point_log_risks, squared_risks};
use crate::rng;
use crate::uncertainty::{gaussian_entropy, mixture_entropy, mixture_mutual_information, QuadratureSpec};

pub const DECOMPOSITION_REL_TOL: f64 = 1e-10;
pub const MC_Z_TOL: f64 = 3.0;
pub const CONSTRUCTION_TOL: f64 = 1e-8;
pub const BOUND_SLACK: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-5;

/// Deliberate faults for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sabotage {
    #[default]
    None,
    /// Inflate the predictive variance used by the pointwise identity.
    Variance,
}

impl std::str::FromStr for Sabotage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "variance" => Ok(Self::Variance),
            other => Err(Error::InvalidArgument(format!("unknown sabotage mode {other:?}"))),
        }
    }
}

/// Trial counts per check. Defaults are the full-size suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub decomposition_cases: usize,
    pub ber_squared_ensembles: usize,
    pub ber_log_ensembles: usize,
    pub mc_samples: usize,
    pub er_ensembles: usize,
    pub er_test_n: usize,
    pub log_bound_cases: usize,
    pub mi_bound_cases: usize,
    pub entropy_cases: usize,
    pub gradient_cases: usize,
    pub quadrature: QuadratureSpec,
    pub sabotage: Sabotage,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            decomposition_cases: 1000,
            ber_squared_ensembles: 50,
            ber_log_ensembles: 20,
            mc_samples: 1_000_000,
            er_ensembles: 10,
            er_test_n: 5000,
            log_bound_cases: 200,
            mi_bound_cases: 1000,
            entropy_cases: 100,
            gradient_cases: 50,
            quadrature: QuadratureSpec::default(),
            sabotage: Sabotage::None,
        }
    }
}

/// One row of the report. `observed` is the worst case over all trials;
/// the check passes when `observed <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub trials: usize,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub sabotage: Sabotage,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>7} {:>14} {:>12}  {}\n", "check", "trials", "observed", "tolerance", "status");
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>7} {:>14.6e} {:>12.3e}  {}\n",
                c.name,
                c.trials,
                c.observed,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

fn check(name: &'static str, trials: usize, observed: f64, tolerance: f64, detail: String) -> Check {
    Check {
        name,
        trials,
        observed,
        tolerance,
        // NaN fails
        passed: observed <= tolerance,
        detail,
    }
}

/// Small random tanh network ensemble: `M ∈ [2, 8]`, `v² ∈ [e⁻³, e¹]`.
pub fn random_ensemble(r: &mut ChaCha8Rng, dim: usize) -> Ensemble {
    let hidden = r.random_range(2..=6);
    let spec = NetworkSpec::new(vec![dim, hidden, 1], Activation::Tanh).expect("valid widths");
    let m = r.random_range(2..=8);
    let ps = (0..m)
        .map(|_| {
            let v = (0..spec.param_count()).map(|_| StandardNormal.sample(r)).collect();
            ParameterVector::new(&spec, v).expect("sized")
        })
        .collect();
    let log_nv = r.random_range(-3.0..1.0);
    Ensemble::new(spec, ps, log_nv).expect("valid ensemble")
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_input(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| 2.0 * gauss(r)).collect()
}

fn random_mixture(r: &mut ChaCha8Rng) -> Result<(Ensemble, GaussianMixture)> {
    let dim = r.random_range(1..=3);
    let e = random_ensemble(r, dim);
    let x = random_input(r, dim);
    let mix = e.mixture(&x)?;
    Ok((e, mix))
}

pub fn gibbs_decomposition(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 101);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.decomposition_cases {
        let (_, mix) = random_mixture(&mut r)?;
        let y = mix.mean() + 3.0 * gauss(&mut r);
        let var = match cfg.sabotage {
            Sabotage::None => mix.variance(),
            Sabotage::Variance => mix.variance() * 1.5 + 1e-3,
        };
        let gibbs = mix.gibbs_squared(y);
        let rel = ((y - mix.mean()).powi(2) + var - gibbs).abs() / gibbs.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(check(
        "gibbs_decomposition",
        cfg.decomposition_cases,
        worst,
        DECOMPOSITION_REL_TOL,
        "max relative |(y-m)^2 + Var - Gibbs|".into(),
    ))
}

pub fn ber_squared_oracle(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 102);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.ber_squared_ensembles {
        let (_, mix) = random_mixture(&mut r)?;
        let est = brute_force_ber_squared_mixture(&mix, cfg.mc_samples, rng::derive_seed(cfg.seed, k as u64))?;
        worst = worst.max((est.value - mix.variance()).abs() / est.se);
    }
    Ok(check(
        "ber_squared_oracle",
        cfg.ber_squared_ensembles,
        worst,
        MC_Z_TOL,
        "max |MC BER - Var| in MC standard errors".into(),
    ))
}

/// `H[p^q] − ½ ln(2πe v²)` by plain Monte Carlo over `y ~ p^q`.
fn mc_entropy_gap(mix: &GaussianMixture, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream_rng(seed, rng::stream::MONTE_CARLO);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n {
        let i = r.random_range(0..mix.n_components());
        let z: f64 = StandardNormal.sample(&mut r);
        let v = -mix.log_density(mix.means()[i] + mix.noise_sd() * z);
        let d = v - mean;
        mean += d / k as f64;
        m2 += d * (v - mean);
    }
    let se = (m2 / (n - 1) as f64 / n as f64).sqrt();
    (mean - gaussian_entropy(mix.noise_var()), se)
}

pub fn ber_log_oracle(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 103);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.ber_log_ensembles {
        let (_, mix) = random_mixture(&mut r)?;
        let mi = mixture_mutual_information(&mix, &cfg.quadrature)?;
        let (mc, se) = mc_entropy_gap(&mix, cfg.mc_samples, rng::derive_seed(cfg.seed, 1000 + k as u64));
        worst = worst.max((mc - mi).abs() / se);
    }
    Ok(check(
        "ber_log_oracle",
        cfg.ber_log_ensembles,
        worst,
        MC_Z_TOL,
        "max |quadrature MI - MC entropy gap| in MC standard errors".into(),
    ))
}

/// Returns the construction check and the `ER <= R + 3 SE` check.
pub fn excess_risk_decomposition(cfg: &VerifyConfig) -> Result<(Check, Check)> {
    let mut r = rng::stream_rng(cfg.seed, 104);
    let spec = NetworkSpec::new(vec![2, 8, 1], Activation::Tanh)?;
    let teacher = ParameterVector::new(
        &spec,
        (0..spec.param_count()).map(|_| StandardNormal.sample(&mut r)).collect(),
    )?;
    let data = gen_teacher(&spec, &teacher, cfg.er_test_n, 0.1, cfg.seed)?;
    let (mut worst_c, mut worst_b) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..cfg.er_ensembles {
        // particles scattered around the teacher at a random scale
        let scale = r.random_range(0.01..1.0);
        let m = r.random_range(2..=8);
        let ps = (0..m)
            .map(|_| {
                let v = teacher
                    .as_slice()
                    .iter()
                    .map(|&t| t + scale * gauss(&mut r))
                    .collect();
                ParameterVector::new(&spec, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = Ensemble::new(spec.clone(), ps, r.random_range(-3.0..0.0))?;
        let rep = squared_risks(&e, &data.data, Some(&data.truth))?;
        let (per, er) = (rep.per.unwrap_or(f64::NAN), rep.er.unwrap_or(f64::NAN));
        worst_c = worst_c.max((per + rep.ber - er).abs());
        worst_b = worst_b.max(er - rep.r - 3.0 * rep.r_se);
    }
    Ok((
        check(
            "er_decomposition",
            cfg.er_ensembles,
            worst_c,
            CONSTRUCTION_TOL,
            "max |PER + BER - ER|".into(),
        ),
        check(
            "er_below_gibbs_risk",
            cfg.er_ensembles,
            worst_b,
            0.0,
            "max ER - (R + 3 SE(R))".into(),
        ),
    ))
}

pub fn log_excess_bound(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 105);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.log_bound_cases {
        let (_, mix) = random_mixture(&mut r)?;
        let f_star = mix.mean() + mix.noise_sd() * 2.0 * gauss(&mut r);
        let p = point_log_risks(&mix, f_star, mix.noise_var(), &cfg.quadrature)?;
        worst = worst.max(p.per + p.ber - 2.0 * p.er);
    }
    Ok(check(
        "log_excess_bound",
        cfg.log_bound_cases,
        worst,
        BOUND_SLACK,
        "max PER + BER - 2 ER (log loss, variance well specified)".into(),
    ))
}

pub fn mi_variance_bound(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 106);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.mi_bound_cases {
        let (_, mix) = random_mixture(&mut r)?;
        let mi = mixture_mutual_information(&mix, &cfg.quadrature)?;
        let upper = mi - mix.variance() / mix.noise_var();
        worst = worst.max(upper).max(-mi);
    }
    Ok(check(
        "mi_variance_bound",
        cfg.mi_bound_cases,
        worst,
        BOUND_SLACK,
        "max of (MI - Var/v^2, -MI)".into(),
    ))
}

pub fn entropy_gap(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 107);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.entropy_cases {
        let (_, mix) = random_mixture(&mut r)?;
        let gap = mixture_entropy(&mix, &cfg.quadrature)? - gaussian_entropy(mix.noise_var());
        worst = worst.max(-gap);
        // coincident particles reach the Gaussian limit
        let c = GaussianMixture::new(vec![mix.means()[0]; 1 + k % 5], mix.noise_var())?;
        let gap_c = mixture_entropy(&c, &cfg.quadrature)? - gaussian_entropy(c.noise_var());
        worst = worst.max(gap_c.abs());
    }
    Ok(check(
        "entropy_gap",
        cfg.entropy_cases,
        worst,
        BOUND_SLACK,
        "max of (-gap) on random and |gap| on coincident mixtures".into(),
    ))
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` for one objective on one
/// random ensemble and batch, including the log noise variance coordinate.
pub fn gradient_rel_error(e: &Ensemble, batch: &Batch<'_>, spec: &ObjectiveSpec) -> Result<f64> {
    let (_, g) = loss_and_gradient(e, batch, spec)?;
    let mut analytic: Vec<f64> = g.particles.concat();
    analytic.push(g.log_noise_var);
    let p = e.spec().param_count();
    let m = e.n_particles();
    let mut theta: Vec<f64> = e.particles().iter().flat_map(|q| q.as_slice().to_vec()).collect();
    theta.push(e.log_noise_var());
    let eval = |t: &[f64]| -> Result<f64> {
        let ps = (0..m)
            .map(|k| ParameterVector::new(e.spec(), t[k * p..(k + 1) * p].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let en = Ensemble::new(e.spec().clone(), ps, t[m * p])?;
        Ok(evaluate_loss(&en, batch, spec)?.objective)
    };
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let orig = theta[i];
        theta[i] = orig + h;
        let up = eval(&theta)?;
        theta[i] = orig - h;
        let down = eval(&theta)?;
        theta[i] = orig;
        fd.push((up - down) / (2.0 * h));
    }
    let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nf).max(f64::MIN_POSITIVE))
}

pub fn gradient_fd(cfg: &VerifyConfig) -> Result<Check> {
    let mut r = rng::stream_rng(cfg.seed, 108);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.gradient_cases {
        let dim = r.random_range(1..=3);
        let e = random_ensemble(&mut r, dim);
        let rows = r.random_range(1..=8);
        let x: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let y: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut r)).collect();
        let batch = Batch::new(&x, &y);
        let prior = PriorSpec {
            prior_var: r.random_range(0.5..2.0),
            repulsion: Repulsion::Off,
            n_total: 10 * rows,
        };
        let specs = [
            ObjectiveSpec::standard_vi(),
            ObjectiveSpec::rber(r.random_range(0.0..1.0)),
            ObjectiveSpec::predictive_nll(),
        ];
        for (j, s) in specs.iter().enumerate() {
            // alternate with and without the prior term
            let s = if (k + j) % 2 == 0 { s.with_prior(prior) } else { *s };
            worst = worst.max(gradient_rel_error(&e, &batch, &s)?);
        }
    }
    Ok(check(
        "gradient_fd",
        cfg.gradient_cases * 3,
        worst,
        GRAD_REL_TOL,
        "max relative error of backprop vs central differences".into(),
    ))
}

pub fn run_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let (erc, erb) = excess_risk_decomposition(cfg)?;
    let checks = vec![
        gibbs_decomposition(cfg)?,
        ber_squared_oracle(cfg)?,
        ber_log_oracle(cfg)?,
        erc,
        erb,
        log_excess_bound(cfg)?,
        mi_variance_bound(cfg)?,
        entropy_gap(cfg)?,
        gradient_fd(cfg)?,
    ];
    Ok(VerifyReport {
        seed: cfg.seed,
        sabotage: cfg.sabotage,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyConfig {
        VerifyConfig {
            decomposition_cases: 100,
            ber_squared_ensembles: 3,
            ber_log_ensembles: 2,
            mc_samples: 20_000,
            er_ensembles: 3,
            er_test_n: 500,
            log_bound_cases: 10,
            mi_bound_cases: 50,
            entropy_cases: 10,
            gradient_cases: 5,
            quadrature: QuadratureSpec { n_points: 1024, ..QuadratureSpec::default() },
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn quick_suite_passes() {
        let rep = run_suite(&quick()).unwrap();
        assert!(rep.passed, "{}", rep.table());
        assert_eq!(rep.checks.len(), 9);
    }

    #[test]
    fn variance_sabotage_fails_decomposition_only() {
        let rep = run_suite(&VerifyConfig { sabotage: Sabotage::Variance, ..quick() }).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.failures(), vec!["gibbs_decomposition"]);
    }

    #[test]
    fn sabotage_parses() {
        assert_eq!("variance".parse::<Sabotage>().unwrap(), Sabotage::Variance);
        assert!("bogus".parse::<Sabotage>().is_err());
    }
}
