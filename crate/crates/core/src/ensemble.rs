//! Particle ensembles and the Gaussian-mixture predictive distribution they
//! induce at a single input.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParameterVector};

pub const ENSEMBLE_SCHEMA: &str = "berlab.ensemble.v1";

/// `ln N(y | mean, var)`.
#[inline]
pub fn gaussian_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Equal-weight mixture `(1/M) Σ N(·| μᵢ, v²)` with a shared variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<f64>,
    noise_var: f64,
}

impl GaussianMixture {
    pub fn new(means: Vec<f64>, noise_var: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive and finite, got {noise_var}"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite component mean".into()));
        }
        Ok(Self { means, noise_var })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_var.sqrt()
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.means.len() as f64
    }

    /// Population variance of the component means.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.means.iter().map(|f| (f - m).powi(2)).sum::<f64>() / self.means.len() as f64
    }

    pub fn min_mean(&self) -> f64 {
        self.means.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_mean(&self) -> f64 {
        self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn log_density(&self, y: f64) -> f64 {
        let v = self.noise_var;
        log_sum_exp(self.means.iter().map(|&m| gaussian_log_pdf(y, m, v)))
            - (self.means.len() as f64).ln()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let sd = self.noise_sd();
        self.means
            .iter()
            .map(|&m| normal_cdf((y - m) / sd))
            .sum::<f64>()
            / self.means.len() as f64
    }

    /// Gibbs squared loss `(1/M) Σ (y − μᵢ)²`.
    pub fn gibbs_squared(&self, y: f64) -> f64 {
        self.means.iter().map(|m| (y - m).powi(2)).sum::<f64>() / self.means.len() as f64
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Posterior approximation by `M` equally weighted particles with a shared
/// Gaussian observation noise `v² = exp(log_noise_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    spec: NetworkSpec,
    particles: Vec<ParameterVector>,
    log_noise_var: f64,
}

impl Ensemble {
    pub fn new(spec: NetworkSpec, particles: Vec<ParameterVector>, log_noise_var: f64) -> Result<Self> {
        spec.validate()?;
        if particles.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one particle".into()));
        }
        for p in &particles {
            if p.len() != spec.param_count() {
                return Err(Error::DimensionMismatch {
                    context: "particle",
                    expected: spec.param_count(),
                    actual: p.len(),
                });
            }
        }
        if !log_noise_var.is_finite() {
            return Err(Error::InvalidArgument("log noise variance must be finite".into()));
        }
        Ok(Self {
            spec,
            particles,
            log_noise_var,
        })
    }

    /// Particles initialized from `seeds` via [`nn::init_params`].
    pub fn initialize(spec: NetworkSpec, seeds: &[u64], log_noise_var: f64) -> Result<Self> {
        let particles = seeds.iter().map(|&s| nn::init_params(&spec, s)).collect();
        Self::new(spec, particles, log_noise_var)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn particles(&self) -> &[ParameterVector] {
        &self.particles
    }

    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }

    pub fn log_noise_var(&self) -> f64 {
        self.log_noise_var
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    fn require_scalar(&self) -> Result<()> {
        if self.spec.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "scalar-output ensemble",
                expected: 1,
                actual: self.spec.output_dim(),
            });
        }
        Ok(())
    }

    /// Output of every particle at `x` (scalar-output networks).
    pub fn particle_outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_scalar()?;
        self.particles
            .iter()
            .map(|p| nn::forward(&self.spec, p, x).map(|o| o[0]))
            .collect()
    }

    /// Full output vectors of every particle at `x`.
    pub fn particle_output_vectors(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.particles
            .iter()
            .map(|p| nn::forward(&self.spec, p, x))
            .collect()
    }

    /// Outputs of every particle over a row-major batch: `out[i][r]`.
    pub fn particle_outputs_batch(&self, inputs: &[f64], rows: usize) -> Result<Vec<Vec<f64>>> {
        self.require_scalar()?;
        self.particles
            .par_iter()
            .map(|p| nn::forward_batch(&self.spec, p, inputs, rows))
            .collect()
    }

    /// Predictive mixtures at each row of a batch.
    pub fn mixtures_batch(&self, inputs: &[f64], rows: usize) -> Result<Vec<GaussianMixture>> {
        let outs = self.particle_outputs_batch(inputs, rows)?;
        let v2 = self.noise_var();
        (0..rows)
            .map(|r| GaussianMixture::new(outs.iter().map(|o| o[r]).collect(), v2))
            .collect()
    }

    pub fn mixture(&self, x: &[f64]) -> Result<GaussianMixture> {
        GaussianMixture::new(self.particle_outputs(x)?, self.noise_var())
    }

    pub fn predictive_mean(&self, x: &[f64]) -> Result<f64> {
        Ok(self.mixture(x)?.mean())
    }

    pub fn predictive_variance(&self, x: &[f64]) -> Result<f64> {
        Ok(self.mixture(x)?.variance())
    }

    pub fn predictive_log_density(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.mixture(x)?.log_density(y))
    }

    pub fn with_particles(&self, particles: Vec<ParameterVector>, log_noise_var: f64) -> Result<Self> {
        Self::new(self.spec.clone(), particles, log_noise_var)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = EnsembleDoc {
            schema: ENSEMBLE_SCHEMA.to_string(),
            spec: self.spec.clone(),
            log_noise_var: self.log_noise_var,
            particles: self.particles.iter().map(|p| p.as_slice().to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(text)?;
        if doc.schema != ENSEMBLE_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "unsupported schema `{}` (expected `{ENSEMBLE_SCHEMA}`)",
                doc.schema
            )));
        }
        doc.spec.validate()?;
        let particles = doc
            .particles
            .into_iter()
            .map(|p| ParameterVector::new(&doc.spec, p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.spec, particles, doc.log_noise_var)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleDoc {
    schema: String,
    spec: NetworkSpec,
    log_noise_var: f64,
    particles: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use proptest::prelude::*;

    /// Ensemble of `[1,1]` identity networks with zero weight, so particle
    /// `i` outputs `outs[i]` everywhere.
    fn constant_ensemble(outs: &[f64], v2: f64) -> Ensemble {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let ps = outs
            .iter()
            .map(|&c| ParameterVector::new(&spec, vec![0.0, c]).unwrap())
            .collect();
        Ensemble::new(spec, ps, v2.ln()).unwrap()
    }

    #[test]
    fn mean_and_variance_of_two_particles() {
        let e = constant_ensemble(&[1.0, 3.0], 1.0);
        assert_eq!(e.predictive_mean(&[0.0]).unwrap(), 2.0);
        assert_eq!(e.predictive_variance(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn identical_particles() {
        let e = constant_ensemble(&[0.7; 4], 2.0);
        assert!((e.predictive_mean(&[5.0]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(e.predictive_variance(&[5.0]).unwrap(), 0.0);
        let ld = e.predictive_log_density(&[5.0], 1.3).unwrap();
        assert!((ld - gaussian_log_pdf(1.3, 0.7, 2.0)).abs() < 1e-14);
    }

    #[test]
    fn two_component_log_density_value() {
        let e = constant_ensemble(&[0.0, 2.0], 1.0);
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        let direct = (0.5 * (phi(0.0) + phi(2.0))).ln();
        let ld = e.predictive_log_density(&[0.0], 0.0).unwrap();
        assert!((ld - direct).abs() < 1e-14);
        assert!((ld - (-1.485_157_7)).abs() < 1e-7);
    }

    #[test]
    fn density_integrates_to_one() {
        let mix = GaussianMixture::new(vec![-1.0, 0.3, 2.5], 0.4).unwrap();
        let (lo, hi, n) = (-15.0, 17.0, 20_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * mix.log_density(lo + i as f64 * h).exp();
        }
        assert!((s * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_construction() {
        let spec = NetworkSpec::new(vec![2, 1], Activation::Relu).unwrap();
        assert!(Ensemble::new(spec.clone(), vec![], 0.0).is_err());
        let wrong = NetworkSpec::new(vec![3, 1], Activation::Relu).unwrap();
        assert!(Ensemble::new(spec, vec![ParameterVector::zeros(&wrong)], 0.0).is_err());
    }

    #[test]
    fn vector_output_is_rejected_for_scalar_queries() {
        let spec = NetworkSpec::new(vec![2, 3], Activation::Relu).unwrap();
        let e = Ensemble::initialize(spec, &[1, 2], 0.0).unwrap();
        assert!(e.predictive_mean(&[0.0, 0.0]).is_err());
        assert_eq!(e.particle_output_vectors(&[0.0, 0.0]).unwrap()[0].len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_and_schema_check() {
        let spec = NetworkSpec::new(vec![3, 5, 1], Activation::Tanh).unwrap();
        let e = Ensemble::initialize(spec, &[1, 2, 3], -0.37).unwrap();
        let text = e.to_json().unwrap();
        assert!(text.contains(ENSEMBLE_SCHEMA));
        assert_eq!(Ensemble::from_json(&text).unwrap(), e);
        let bad = text.replace(ENSEMBLE_SCHEMA, "berlab.ensemble.v0");
        assert!(matches!(Ensemble::from_json(&bad), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn gibbs_decomposition(outs in proptest::collection::vec(-50.0f64..50.0, 1..12), y in -60.0f64..60.0) {
            let mix = GaussianMixture::new(outs, 1.0).unwrap();
            let lhs = (y - mix.mean()).powi(2) + mix.variance();
            let rhs = mix.gibbs_squared(y);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }

        #[test]
        fn variance_is_permutation_invariant(mut outs in proptest::collection::vec(-5.0f64..5.0, 2..10), k in 0usize..100) {
            let a = GaussianMixture::new(outs.clone(), 1.0).unwrap().variance();
            let n = outs.len();
            outs.rotate_left(k % n);
            outs.swap(0, n - 1);
            let b = GaussianMixture::new(outs, 1.0).unwrap().variance();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn symmetric_pair_density_decreases_away_from_midpoint(
            c in -3.0f64..3.0, half in 0.0f64..3.0, v2 in 0.2f64..3.0, a in 0.0f64..5.0, b in 0.0f64..5.0
        ) {
            // Mixtures of two equal Gaussians are unimodal in |y − c| only
            // when the half-separation is at most the component sd.
            prop_assume!(half <= v2.sqrt());
            let mix = GaussianMixture::new(vec![c - half, c + half], v2).unwrap();
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(mix.log_density(c + near) >= mix.log_density(c + far) - 1e-12);
            prop_assert!(mix.log_density(c - near) >= mix.log_density(c + far) - 1e-12);
        }
    }
}
