//! Epistemic-uncertainty measurements on the predictive mixture.
//!
//! Entropy is computed by composite trapezoid on a grid spanning every
//! component mean, so results are deterministic and tight enough to compare
//! against closed forms at 1e-6.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ensemble::{Ensemble, GaussianMixture};
use crate::error::{Error, Result};

/// MI values in `[-MI_CLAMP, 0)` are treated as quadrature noise.
pub const MI_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub n_points: usize,
    pub span_sigmas: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            n_points: 4096,
            span_sigmas: 8.0,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 || !self.n_points.is_multiple_of(2) {
            return Err(Error::Quadrature(format!(
                "n_points must be even and >= 64, got {}",
                self.n_points
            )));
        }
        if !(self.span_sigmas > 0.0 && self.span_sigmas.is_finite()) {
            return Err(Error::Quadrature(format!(
                "span_sigmas must be positive, got {}",
                self.span_sigmas
            )));
        }
        Ok(())
    }

    /// Grid endpoints `[min μ − span·v, max μ + span·v]`.
    pub fn bounds(&self, mix: &GaussianMixture) -> Result<(f64, f64)> {
        self.validate()?;
        let pad = self.span_sigmas * mix.noise_sd();
        let (lo, hi) = (mix.min_mean() - pad, mix.max_mean() + pad);
        if !(lo < mix.min_mean() && hi > mix.max_mean() && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Quadrature(format!(
                "grid [{lo}, {hi}] does not contain all component means"
            )));
        }
        Ok((lo, hi))
    }

    /// Composite trapezoid of `f` over the grid for `mix`.
    pub fn integrate(&self, mix: &GaussianMixture, f: impl Fn(f64) -> f64) -> Result<f64> {
        let (lo, hi) = self.bounds(mix)?;
        Ok(trapezoid(lo, hi, self.n_points, f))
    }
}

/// Composite trapezoid rule with `n` intervals.
pub fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

/// Differential entropy of `N(·, v²)`: `½ ln(2πe v²)`.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

pub fn mixture_entropy(mix: &GaussianMixture, q: &QuadratureSpec) -> Result<f64> {
    let h = q.integrate(mix, |y| {
        let lp = mix.log_density(y);
        let p = lp.exp();
        if p == 0.0 {
            0.0
        } else {
            -p * lp
        }
    })?;
    if !h.is_finite() {
        return Err(Error::Quadrature(format!("non-finite entropy {h}")));
    }
    Ok(h)
}

/// `H[mixture] − ½ ln(2πe v²)`, clamped at zero within [`MI_CLAMP`].
pub fn mixture_mutual_information(mix: &GaussianMixture, q: &QuadratureSpec) -> Result<f64> {
    let mi = mixture_entropy(mix, q)? - gaussian_entropy(mix.noise_var());
    if mi >= 0.0 {
        Ok(mi)
    } else if mi >= -MI_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::Quadrature(format!(
            "mutual information {mi:e} is negative beyond tolerance"
        )))
    }
}

pub fn predictive_entropy(e: &Ensemble, x: &[f64], q: &QuadratureSpec) -> Result<f64> {
    mixture_entropy(&e.mixture(x)?, q)
}

pub fn mutual_information(e: &Ensemble, x: &[f64], q: &QuadratureSpec) -> Result<f64> {
    mixture_mutual_information(&e.mixture(x)?, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// Exact quantiles of the mixture CDF.
    #[default]
    MixtureQuantile,
    /// `mean ± z·sqrt(Var + v²)`.
    GaussianMoment,
}

impl IntervalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalMethod::MixtureQuantile => "mixture_quantile",
            IntervalMethod::GaussianMoment => "gaussian_moment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Boundary points count as covered.
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Smallest `y` with `F(y) ≥ p`, by bisection to `1e-8·v`.
pub fn mixture_quantile(mix: &GaussianMixture, p: f64) -> Result<f64> {
    let v = mix.noise_sd();
    let (mut lo, mut hi) = (mix.min_mean() - 12.0 * v, mix.max_mean() + 12.0 * v);
    if !(mix.cdf(lo) <= p && mix.cdf(hi) >= p) {
        return Err(Error::Bracket(p));
    }
    let tol = 1e-8 * v;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mix.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn mixture_interval(
    mix: &GaussianMixture,
    level: f64,
    method: IntervalMethod,
) -> Result<IntervalEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "interval level must be in (0, 1), got {level}"
        )));
    }
    let (lower, upper) = match method {
        IntervalMethod::MixtureQuantile => (
            mixture_quantile(mix, 0.5 * (1.0 - level))?,
            mixture_quantile(mix, 0.5 * (1.0 + level))?,
        ),
        IntervalMethod::GaussianMoment => {
            let z = standard_normal_quantile(0.5 * (1.0 + level));
            let half = z * (mix.variance() + mix.noise_var()).sqrt();
            let m = mix.mean();
            (m - half, m + half)
        }
    };
    Ok(IntervalEstimate {
        lower,
        upper,
        level,
    })
}

pub fn prediction_interval(
    e: &Ensemble,
    x: &[f64],
    level: f64,
    method: IntervalMethod,
) -> Result<IntervalEstimate> {
    mixture_interval(&e.mixture(x)?, level, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mix(means: &[f64], v2: f64) -> GaussianMixture {
        GaussianMixture::new(means.to_vec(), v2).unwrap()
    }

    #[test]
    fn single_gaussian_entropy() {
        let h = mixture_entropy(&mix(&[0.3; 3], 1.0), &QuadratureSpec::default()).unwrap();
        assert!((h - 1.418939).abs() < 1e-6);
        assert!((h - gaussian_entropy(1.0)).abs() < 1e-10);
    }

    #[test]
    fn separated_pair_adds_ln2() {
        let q = QuadratureSpec::default();
        let m = mix(&[0.0, 100.0], 1.0);
        let h = mixture_entropy(&m, &q).unwrap();
        assert!((h - 2.112086).abs() < 1e-6);
        let mi = mixture_mutual_information(&m, &q).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn identical_particles_have_zero_mi() {
        let mi = mixture_mutual_information(&mix(&[2.0; 5], 0.3), &QuadratureSpec::default()).unwrap();
        assert!(mi.abs() < 1e-10);
    }

    #[test]
    fn misconfigured_quadrature_is_rejected() {
        let m = mix(&[0.0, 1.0], 1.0);
        for q in [
            QuadratureSpec { n_points: 32, span_sigmas: 8.0 },
            QuadratureSpec { n_points: 4095, span_sigmas: 8.0 },
            QuadratureSpec { n_points: 4096, span_sigmas: 0.0 },
        ] {
            assert!(matches!(mixture_entropy(&m, &q), Err(Error::Quadrature(_))));
        }
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let m = mix(&[-1.2, 0.4, 0.5, 2.0, 3.1], 0.6);
        let h = mixture_entropy(&m, &QuadratureSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..m.n_components());
            let z: f64 = StandardNormal.sample(&mut rng);
            let y = m.means()[i] + m.noise_sd() * z;
            let l = -m.log_density(y);
            s += l;
            s2 += l * l;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((h - mean).abs() < 3.0 * se, "{h} vs {mean} ± {se}");
    }

    #[test]
    fn standard_normal_interval() {
        let m = mix(&[1.5], 4.0);
        for method in [IntervalMethod::MixtureQuantile, IntervalMethod::GaussianMoment] {
            let iv = mixture_interval(&m, 0.95, method).unwrap();
            assert!((iv.lower - (1.5 - 1.959964 * 2.0)).abs() < 1e-5, "{method:?} {iv:?}");
            assert!((iv.upper - (1.5 + 1.959964 * 2.0)).abs() < 1e-5);
            assert!((iv.width() / 4.0 - 1.959963984540054).abs() < 1e-6);
            assert_eq!(iv.level, 0.95);
        }
    }

    #[test]
    fn symmetric_pair_interval_is_symmetric() {
        let m = mix(&[-0.8, 2.2], 0.5);
        let iv = mixture_interval(&m, 0.9, IntervalMethod::MixtureQuantile).unwrap();
        let mid = 0.7;
        assert!(((iv.upper - mid) - (mid - iv.lower)).abs() < 1e-8);
    }

    #[test]
    fn interval_level_is_validated() {
        let m = mix(&[0.0], 1.0);
        assert!(mixture_interval(&m, 1.0, IntervalMethod::MixtureQuantile).is_err());
        assert!(mixture_interval(&m, 0.0, IntervalMethod::GaussianMoment).is_err());
    }

    #[test]
    fn entropy_grows_with_noise_variance() {
        let q = QuadratureSpec::default();
        let means = [-0.5, 0.1, 1.7];
        let hs: Vec<f64> = [0.05, 0.1, 0.3, 1.0, 3.0, 10.0]
            .iter()
            .map(|&v| mixture_entropy(&mix(&means, v), &q).unwrap())
            .collect();
        assert!(hs.windows(2).all(|w| w[1] >= w[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn entropy_is_shift_invariant(means in proptest::collection::vec(-3.0f64..3.0, 1..6), shift in -50.0f64..50.0, v2 in 0.1f64..4.0) {
            let q = QuadratureSpec::default();
            let a = mixture_entropy(&mix(&means, v2), &q).unwrap();
            let shifted: Vec<f64> = means.iter().map(|m| m + shift).collect();
            let b = mixture_entropy(&mix(&shifted, v2), &q).unwrap();
            prop_assert!((a - b).abs() < 1e-8);
        }

        #[test]
        fn dispersion_widens_quantile_intervals(means in proptest::collection::vec(-3.0f64..3.0, 2..8), v2 in 0.05f64..4.0) {
            let m = mix(&means, v2);
            prop_assume!(m.variance() > 1e-6);
            let iv = mixture_interval(&m, 0.95, IntervalMethod::MixtureQuantile).unwrap();
            let single = 2.0 * 1.959963984540054 * v2.sqrt();
            prop_assert!(iv.width() >= single - 1e-7);
        }
    }
}
