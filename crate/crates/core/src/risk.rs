//! Risk decompositions for squared and log loss, plus Monte-Carlo oracles
//! that evaluate the Bayesian excess risk from its definition.
//!
//! Naming: `R` is the Gibbs risk (posterior-averaged per-particle loss), `PR`
//! the loss of the predictive mean (or predictive density), `BER` the
//! Bayesian excess risk, `PER` the prediction excess risk against the true
//! Bayes predictor and `ER` the excess Gibbs risk over the truth.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, Truth};
use crate::ensemble::{gaussian_log_pdf, Ensemble, GaussianMixture};
use crate::error::{Error, Result};
use crate::rng;
use crate::uncertainty::{gaussian_entropy, mixture_entropy, mixture_mutual_information, trapezoid, QuadratureSpec};

/// Relative tolerance of the pointwise `(y − m)² + Var = Gibbs` identity.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub loss_kind: LossKind,
    pub r: f64,
    /// Standard error of `r` over test points.
    pub r_se: f64,
    pub pr: f64,
    pub ber: f64,
    pub per: Option<f64>,
    pub er: Option<f64>,
    pub n_test: usize,
    pub mc_seed: Option<u64>,
}

/// Squared-loss risks over `test`. With `truth`, `ER` is `PER + BER`.
///
/// Fails if the pointwise identity `(y − m)² + Var = (1/M) Σ (y − fᵢ)²` is
/// violated beyond [`DECOMPOSITION_TOL`].
pub fn squared_risks(e: &Ensemble, test: &Dataset, truth: Option<&Truth>) -> Result<RiskReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let n = test.len();
    let mixes = e.mixtures_batch(test.x(), n)?;
    let (mut r, mut r2, mut pr, mut ber, mut per) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, m) in mixes.iter().enumerate() {
        let y = test.y()[i];
        let mean = m.mean();
        let var = m.variance();
        let gibbs = m.gibbs_squared(y);
        let split = (y - mean).powi(2) + var;
        if (split - gibbs).abs() > DECOMPOSITION_TOL * gibbs.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "risk decomposition violated at test point {i}: {split} vs {gibbs}"
            )));
        }
        r += gibbs;
        r2 += gibbs * gibbs;
        pr += (y - mean).powi(2);
        ber += var;
        if let Some(t) = truth {
            per += (t.mean_at(test.row(i)) - mean).powi(2);
        }
    }
    let nf = n as f64;
    let r_mean = r / nf;
    let r_se = if n > 1 {
        ((r2 / nf - r_mean * r_mean).max(0.0) / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let (ber, per) = (ber / nf, per / nf);
    Ok(RiskReport {
        loss_kind: LossKind::Squared,
        r: r_mean,
        r_se,
        pr: pr / nf,
        ber,
        per: truth.map(|_| per),
        er: truth.map(|_| per + ber),
        n_test: n,
        mc_seed: None,
    })
}

/// `KL(N(μ₁, σ₁²) ‖ N(μ₂, σ₂²))`.
pub fn gaussian_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    0.5 * ((var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / var2 - 1.0)
}

/// Log-loss risks at one input, with `Y ~ N(f*, σ*²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointLogRisks {
    pub r: f64,
    pub pr: f64,
    pub ber: f64,
    pub per: f64,
    pub er: f64,
}

pub fn point_log_risks(
    mix: &GaussianMixture,
    truth_mean: f64,
    truth_var: f64,
    q: &QuadratureSpec,
) -> Result<PointLogRisks> {
    if !(truth_var > 0.0) {
        return Err(Error::InvalidArgument(format!("true noise variance must be > 0, got {truth_var}")));
    }
    let v2 = mix.noise_var();
    let m = mix.n_components() as f64;
    let er = mix
        .means()
        .iter()
        .map(|&f| gaussian_kl(truth_mean, truth_var, f, v2))
        .sum::<f64>()
        / m;
    let r = mix
        .means()
        .iter()
        .map(|&f| 0.5 * (2.0 * std::f64::consts::PI * v2).ln() + (truth_var + (truth_mean - f).powi(2)) / (2.0 * v2))
        .sum::<f64>()
        / m;
    let ber = mixture_mutual_information(mix, q)?;
    // PER = E_{N(f*,σ*²)}[ln N(Y|f*,σ*²) − ln p^q(Y)], on a grid covering
    // both the truth and every component.
    q.validate()?;
    let sd = truth_var.sqrt();
    let lo = (truth_mean - q.span_sigmas * sd).min(mix.min_mean() - q.span_sigmas * mix.noise_sd());
    let hi = (truth_mean + q.span_sigmas * sd).max(mix.max_mean() + q.span_sigmas * mix.noise_sd());
    let per = trapezoid(lo, hi, q.n_points, |y| {
        let lt = gaussian_log_pdf(y, truth_mean, truth_var);
        let p = lt.exp();
        if p == 0.0 {
            0.0
        } else {
            p * (lt - mix.log_density(y))
        }
    });
    if !per.is_finite() {
        return Err(Error::Quadrature(format!("non-finite PER {per}")));
    }
    Ok(PointLogRisks {
        r,
        pr: per + gaussian_entropy(truth_var),
        ber,
        per,
        er,
    })
}

/// Log-loss risks averaged over `test_x` (row-major, `rows` rows).
pub fn log_risks(
    e: &Ensemble,
    test_x: &[f64],
    rows: usize,
    truth: &Truth,
    q: &QuadratureSpec,
) -> Result<RiskReport> {
    if rows == 0 {
        return Err(Error::Empty("test inputs"));
    }
    let d = e.spec().input_dim();
    let mixes = e.mixtures_batch(test_x, rows)?;
    let points: Vec<PointLogRisks> = mixes
        .par_iter()
        .enumerate()
        .map(|(i, m)| point_log_risks(m, truth.mean_at(&test_x[i * d..(i + 1) * d]), truth.noise_var, q))
        .collect::<Result<_>>()?;
    let nf = rows as f64;
    let avg = |f: fn(&PointLogRisks) -> f64| points.iter().map(f).sum::<f64>() / nf;
    Ok(RiskReport {
        loss_kind: LossKind::Log,
        r: avg(|p| p.r),
        r_se: 0.0,
        pr: avg(|p| p.pr),
        ber: avg(|p| p.ber),
        per: Some(avg(|p| p.per)),
        er: Some(avg(|p| p.er)),
        n_test: rows,
        mc_seed: None,
    })
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

fn mc_mean<F>(n: usize, seed: u64, mut sample: F) -> McEstimate
where
    F: FnMut(&mut rand_chacha::ChaCha8Rng) -> f64,
{
    let mut rng = rng::stream_rng(seed, rng::stream::MONTE_CARLO);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n {
        let v = sample(&mut rng);
        let delta = v - mean;
        mean += delta / k as f64;
        m2 += delta * (v - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    McEstimate {
        value: mean,
        se: (var / n as f64).sqrt(),
        n,
    }
}

fn sample_joint(mix: &GaussianMixture, rng: &mut rand_chacha::ChaCha8Rng) -> (usize, f64) {
    let i = rng.random_range(0..mix.n_components());
    let z: f64 = StandardNormal.sample(rng);
    (i, mix.means()[i] + mix.noise_sd() * z)
}

/// Squared-loss BER from its definition: draw `(θ, y)` from the model joint
/// and average `(y − m)² − (y − f_θ)²`.
pub fn brute_force_ber_squared_mixture(mix: &GaussianMixture, mc_n: usize, seed: u64) -> Result<McEstimate> {
    if mc_n < 10_000 {
        return Err(Error::InvalidArgument(format!("mc_n must be >= 10^4, got {mc_n}")));
    }
    let mean = mix.mean();
    Ok(mc_mean(mc_n, seed, |rng| {
        let (i, y) = sample_joint(mix, rng);
        (y - mean).powi(2) - (y - mix.means()[i]).powi(2)
    }))
}

pub fn brute_force_ber_squared(e: &Ensemble, x: &[f64], mc_n: usize, seed: u64) -> Result<McEstimate> {
    brute_force_ber_squared_mixture(&e.mixture(x)?, mc_n, seed)
}

/// Log-loss BER from its definition: average `ln p(y|θ) − ln p^q(y)` over
/// the model joint.
pub fn brute_force_ber_log_mixture(mix: &GaussianMixture, mc_n: usize, seed: u64) -> Result<McEstimate> {
    if mc_n < 10_000 {
        return Err(Error::InvalidArgument(format!("mc_n must be >= 10^4, got {mc_n}")));
    }
    let v2 = mix.noise_var();
    Ok(mc_mean(mc_n, seed, |rng| {
        let (i, y) = sample_joint(mix, rng);
        gaussian_log_pdf(y, mix.means()[i], v2) - mix.log_density(y)
    }))
}

pub fn brute_force_ber_log(e: &Ensemble, x: &[f64], mc_n: usize, seed: u64) -> Result<McEstimate> {
    brute_force_ber_log_mixture(&e.mixture(x)?, mc_n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyGap {
    pub h_pred: f64,
    pub h_limit: f64,
    pub gap: f64,
}

/// Average predictive entropy over `xs` against `½ ln(2πe v²)`.
pub fn entropy_convergence_check(e: &Ensemble, xs: &[f64], rows: usize, q: &QuadratureSpec) -> Result<EntropyGap> {
    if rows == 0 {
        return Err(Error::Empty("entropy inputs"));
    }
    let mixes = e.mixtures_batch(xs, rows)?;
    let hs: Vec<f64> = mixes
        .par_iter()
        .map(|m| mixture_entropy(m, q))
        .collect::<Result<_>>()?;
    let h_pred = hs.iter().sum::<f64>() / rows as f64;
    let h_limit = gaussian_entropy(e.noise_var());
    let gap = h_pred - h_limit;
    if gap < -1e-6 {
        return Err(Error::Quadrature(format!("entropy gap {gap:e} below the Gaussian limit")));
    }
    Ok(EntropyGap { h_pred, h_limit, gap })
}

/// Fractional ranks (1-based), ties averaged.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman inputs",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 points".into()));
    }
    let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantRanks);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec, ParameterVector};
    use std::f64::consts::LN_2;

    fn constant_ensemble(outs: &[f64], v2: f64) -> Ensemble {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let ps = outs
            .iter()
            .map(|&c| ParameterVector::new(&spec, vec![0.0, c]).unwrap())
            .collect();
        Ensemble::new(spec, ps, v2.ln()).unwrap()
    }

    #[test]
    fn single_point_squared_arithmetic() {
        let e = constant_ensemble(&[1.0, 3.0], 1.0);
        let test = Dataset::new(vec![0.0], 1, vec![0.0]).unwrap();
        let r = squared_risks(&e, &test, None).unwrap();
        assert_eq!((r.pr, r.ber, r.r), (4.0, 1.0, 5.0));
        assert_eq!(r.per, None);
    }

    #[test]
    fn exact_truth_gives_zero_risks() {
        let e = constant_ensemble(&[0.0, 0.0], 1.0);
        let truth = Truth::new(|_| 0.0, 0.0).unwrap();
        let test = Dataset::new(vec![0.0, 1.0, 2.0], 1, vec![0.0; 3]).unwrap();
        let r = squared_risks(&e, &test, Some(&truth)).unwrap();
        assert_eq!((r.r, r.pr, r.ber, r.per, r.er), (0.0, 0.0, 0.0, Some(0.0), Some(0.0)));
        assert!(squared_risks(&e, &Dataset::new(vec![], 1, vec![]).unwrap(), None).is_err());
    }

    #[test]
    fn log_risks_for_exact_and_offset_particles() {
        let q = QuadratureSpec::default();
        let p = point_log_risks(&GaussianMixture::new(vec![1.0; 3], 0.5).unwrap(), 1.0, 0.5, &q).unwrap();
        assert!(p.er.abs() < 1e-8 && p.ber.abs() < 1e-8 && p.per.abs() < 1e-8);
        let delta = 0.7;
        let v2 = 0.5;
        let p = point_log_risks(&GaussianMixture::new(vec![1.0 + delta], v2).unwrap(), 1.0, v2, &q).unwrap();
        let expect = delta * delta / (2.0 * v2);
        assert!((p.er - expect).abs() < 1e-10);
        assert!((p.per - expect).abs() < 1e-8);
        assert!(p.ber.abs() < 1e-8);
        assert!((p.r - p.er - gaussian_entropy(v2)).abs() < 1e-12);
    }

    #[test]
    fn log_risks_reject_zero_noise_truth() {
        let q = QuadratureSpec::default();
        let mix = GaussianMixture::new(vec![0.0], 1.0).unwrap();
        assert!(point_log_risks(&mix, 0.0, 0.0, &q).is_err());
    }

    #[test]
    fn brute_force_ber_matches_variance() {
        let mix = GaussianMixture::new(vec![1.0, 3.0], 1.0).unwrap();
        let est = brute_force_ber_squared_mixture(&mix, 1_000_000, 5).unwrap();
        assert!((est.value - 1.0).abs() < 3.0 * est.se, "{est:?}");
        let flat = GaussianMixture::new(vec![2.0; 4], 1.0).unwrap();
        let est = brute_force_ber_squared_mixture(&flat, 10_000, 5).unwrap();
        assert!(est.value.abs() <= 3.0 * est.se + 1e-15);
        assert!(brute_force_ber_squared_mixture(&flat, 100, 5).is_err());
    }

    #[test]
    fn entropy_gap_limits() {
        let q = QuadratureSpec::default();
        let same = constant_ensemble(&[0.5, 0.5], 1.0);
        let g = entropy_convergence_check(&same, &[0.0, 1.0], 2, &q).unwrap();
        assert!(g.gap.abs() < 1e-6);
        let apart = constant_ensemble(&[0.0, 100.0], 1.0);
        let g = entropy_convergence_check(&apart, &[0.0], 1, &q).unwrap();
        assert!((g.gap - LN_2).abs() < 1e-6);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        let n = 4.0;
        let closed = 1.0 - 6.0 * 2.0 / (n * (n * n - 1.0));
        assert!((s - closed).abs() < 1e-12 && (s - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ConstantRanks)));
        assert_eq!(fractional_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
