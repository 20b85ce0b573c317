//! Training objectives for particle ensembles.
//!
//! All three objectives share the Gaussian likelihood with a single learned
//! noise variance `v² = exp(log_noise_var)`:
//!
//! * standard VI: `mean[(|y − m|² + Var)/(2v²)] + ½ln(2πv²) + prior/N`
//! * rBER(λ): `mean[|y − m|²/(2v²) + λ·Var/(2v²)] + ½ln(2πv²) + prior/N`
//! * predictive NLL: `−mean ln p^q(y|x) + prior/N`
//!
//! where `m` and `Var` are the particle mean and population variance at `x`.
//! Standard VI is evaluated as rBER with λ = 1.

mod adam;
mod train;

pub use adam::Adam;
pub use train::{fit, particle_seed, train, EpochRecord, TrainHistory};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, NetworkSpec, Tape, TapeOutputs, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    StandardVi,
    PredictiveNll,
    Rber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repulsion {
    #[default]
    Off,
    Rbf,
}

fn default_lambda() -> f64 {
    0.05
}
fn default_prior_var() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.004
}
fn default_epochs() -> usize {
    500
}
fn default_batch() -> usize {
    100
}
fn default_m() -> usize {
    20
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_hidden() -> Vec<usize> {
    vec![50]
}
fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// Variance weight; used by `rber` only.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default)]
    pub repulsion: Repulsion,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_m")]
    pub m_particles: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub init_log_noise_var: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Rber,
            lambda: default_lambda(),
            prior_var: default_prior_var(),
            repulsion: Repulsion::Off,
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            m_particles: default_m(),
            seed: 0,
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            hidden_widths: default_hidden(),
            activation: default_activation(),
            init_log_noise_var: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.prior_var > 0.0) {
            return bad(format!("prior_var must be > 0, got {}", self.prior_var));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.m_particles == 0 {
            return bad("batch_size and m_particles must be >= 1".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps > 0".into());
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Network `[input, hidden..., output]` with this config's activation.
    pub fn network(&self, input: usize, output: usize) -> Result<NetworkSpec> {
        let mut widths = vec![input];
        widths.extend(&self.hidden_widths);
        widths.push(output);
        NetworkSpec::new(widths, self.activation)
    }

    pub fn objective(&self, n_total: usize) -> ObjectiveSpec {
        ObjectiveSpec {
            kind: self.objective,
            lambda: self.lambda,
            prior: Some(PriorSpec {
                prior_var: self.prior_var,
                repulsion: self.repulsion,
                n_total,
            }),
        }
    }
}

/// The prior term, scaled by `1/n_total` inside every objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub prior_var: f64,
    pub repulsion: Repulsion,
    pub n_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda: f64,
    pub prior: Option<PriorSpec>,
}

impl ObjectiveSpec {
    pub fn standard_vi() -> Self {
        Self {
            kind: ObjectiveKind::StandardVi,
            lambda: 1.0,
            prior: None,
        }
    }

    pub fn rber(lambda: f64) -> Self {
        Self {
            kind: ObjectiveKind::Rber,
            lambda,
            prior: None,
        }
    }

    pub fn predictive_nll() -> Self {
        Self {
            kind: ObjectiveKind::PredictiveNll,
            lambda: 0.0,
            prior: None,
        }
    }

    pub fn with_prior(mut self, prior: PriorSpec) -> Self {
        self.prior = Some(prior);
        self
    }

    fn effective_lambda(&self) -> f64 {
        match self.kind {
            ObjectiveKind::StandardVi => 1.0,
            ObjectiveKind::Rber => self.lambda,
            ObjectiveKind::PredictiveNll => 0.0,
        }
    }
}

/// Rows of a mini-batch. `coords[r]` selects which output coordinate row
/// `r` is scored on (the observed arm for bandits); `None` means coordinate 0.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub coords: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64]) -> Self {
        Self { x, y, coords: None }
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    fn coord(&self, r: usize) -> usize {
        self.coords.map_or(0, |c| c[r])
    }
}

/// Objective value split into its parts; `objective = data + variance + prior`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub objective: f64,
    pub data: f64,
    pub variance: f64,
    pub prior: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleGradient {
    pub particles: Vec<Vec<f64>>,
    pub log_noise_var: f64,
}

fn check_batch(e: &Ensemble, batch: &Batch<'_>) -> Result<()> {
    let rows = batch.rows();
    if rows == 0 {
        return Err(Error::Empty("loss batch"));
    }
    if batch.x.len() != rows * e.spec().input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch inputs",
            expected: rows * e.spec().input_dim(),
            actual: batch.x.len(),
        });
    }
    let k = e.spec().output_dim();
    match batch.coords {
        Some(c) if c.len() != rows => Err(Error::DimensionMismatch {
            context: "batch output coordinates",
            expected: rows,
            actual: c.len(),
        }),
        Some(c) if c.iter().any(|&a| a >= k) => Err(Error::InvalidArgument(format!(
            "output coordinate out of range (output width {k})"
        ))),
        None if k != 1 => Err(Error::DimensionMismatch {
            context: "scalar-output objective",
            expected: 1,
            actual: k,
        }),
        _ => Ok(()),
    }
}

/// Per-row data contribution and the row-mean data/variance parts, in plain
/// arithmetic (no tape). Used for reporting and for locating bad samples.
fn row_values(
    outs: &[Vec<f64>],
    out_dim: usize,
    batch: &Batch<'_>,
    log_v2: f64,
    spec: &ObjectiveSpec,
) -> Result<(f64, f64)> {
    let v2 = log_v2.exp();
    let lambda = spec.effective_lambda();
    let (mut data, mut var_sum) = (0.0, 0.0);
    let m_count = outs.len() as f64;
    for r in 0..batch.rows() {
        let k = batch.coord(r);
        let f: Vec<f64> = outs.iter().map(|o| o[r * out_dim + k]).collect();
        let y = batch.y[r];
        let (d, v) = match spec.kind {
            ObjectiveKind::PredictiveNll => {
                let lp = crate::ensemble::log_sum_exp(
                    f.iter().map(|&fi| crate::ensemble::gaussian_log_pdf(y, fi, v2)),
                ) - m_count.ln();
                (-lp, 0.0)
            }
            _ => {
                let m = f.iter().sum::<f64>() / m_count;
                let var = f.iter().map(|fi| (fi - m).powi(2)).sum::<f64>() / m_count;
                (
                    (y - m).powi(2) / (2.0 * v2) + 0.5 * (2.0 * PI * v2).ln(),
                    lambda * var / (2.0 * v2),
                )
            }
        };
        if !(d.is_finite() && v.is_finite()) {
            return Err(Error::NonFiniteSample { index: r });
        }
        data += d;
        var_sum += v;
    }
    let n = batch.rows() as f64;
    Ok((data / n, var_sum / n))
}

/// Builds the data part of the objective on the tape.
fn tape_data_loss(
    t: &mut Tape,
    outs: &TapeOutputs<'_>,
    log_v2: Var,
    batch: &Batch<'_>,
    spec: &ObjectiveSpec,
) -> Var {
    let rows = batch.rows();
    let neg_log_v2 = t.neg(log_v2);
    let inv_v2 = t.exp(neg_log_v2);
    let half_inv_v2 = t.scale(inv_v2, 0.5);
    let norm = {
        let lv = t.scale(log_v2, 0.5);
        t.add_const(lv, 0.5 * (2.0 * PI).ln())
    };
    match spec.kind {
        ObjectiveKind::PredictiveNll => {
            let ln_m = (outs.outputs.len() as f64).ln();
            let mut rows_nll = Vec::with_capacity(rows);
            for r in 0..rows {
                let fs = outs.across(r, batch.coord(r));
                let y = batch.y[r];
                let logits: Vec<Var> = fs
                    .iter()
                    .map(|&f| {
                        let d = t.add_const(f, -y);
                        let sq = t.square(d);
                        let q = t.mul(sq, half_inv_v2);
                        t.neg(q)
                    })
                    .collect();
                let lse = t.log_sum_exp(&logits);
                // −ln p^q = −lse + ln M + ½ln(2π v²)
                let a = t.sub(norm, lse);
                rows_nll.push(t.add_const(a, ln_m));
            }
            t.mean(&rows_nll)
        }
        ObjectiveKind::StandardVi | ObjectiveKind::Rber => {
            let lambda = spec.effective_lambda();
            let mut row_terms = Vec::with_capacity(rows);
            for r in 0..rows {
                let fs = outs.across(r, batch.coord(r));
                let m = t.mean(&fs);
                let resid = t.add_const(m, -batch.y[r]);
                let sq = t.square(resid);
                if lambda == 0.0 {
                    row_terms.push(sq);
                } else {
                    let var = t.variance(&fs);
                    let weighted = t.scale(var, lambda);
                    row_terms.push(t.add(sq, weighted));
                }
            }
            let mean_terms = t.mean(&row_terms);
            let scaled = t.mul(mean_terms, half_inv_v2);
            t.add(scaled, norm)
        }
    }
}

/// Objective value and its parts, without gradients.
pub fn evaluate_loss(e: &Ensemble, batch: &Batch<'_>, spec: &ObjectiveSpec) -> Result<LossTerms> {
    check_batch(e, batch)?;
    let rows = batch.rows();
    let outs: Vec<Vec<f64>> = e
        .particles()
        .iter()
        .map(|p| nn::forward_batch(e.spec(), p, batch.x, rows))
        .collect::<Result<_>>()?;
    let (data, variance) = row_values(&outs, e.spec().output_dim(), batch, e.log_noise_var(), spec)?;
    let prior = prior_term(e, spec)?;
    Ok(LossTerms {
        objective: data + variance + prior,
        data,
        variance,
        prior,
    })
}

fn prior_term(e: &Ensemble, spec: &ObjectiveSpec) -> Result<f64> {
    Ok(match spec.prior {
        Some(p) => prior_penalty(e, p.prior_var, p.repulsion)? / p.n_total as f64,
        None => 0.0,
    })
}

/// Objective value, its parts, and the exact gradient with respect to every
/// particle and the log noise variance.
pub fn loss_and_gradient(
    e: &Ensemble,
    batch: &Batch<'_>,
    spec: &ObjectiveSpec,
) -> Result<(LossTerms, EnsembleGradient)> {
    check_batch(e, batch)?;
    let rows = batch.rows();
    let mut report = None;
    let g = nn::gradient(
        e.spec(),
        e.particles(),
        batch.x,
        rows,
        &[e.log_noise_var()],
        |t, outs, aux| {
            let plain: Vec<Vec<f64>> = outs
                .outputs
                .iter()
                .map(|o| o.iter().map(|&v| t.value(v)).collect())
                .collect();
            report = Some(row_values(&plain, outs.output_dim, batch, t.value(aux[0]), spec));
            tape_data_loss(t, outs, aux[0], batch, spec)
        },
    );
    let (data, variance) = report.expect("loss closure ran")?;
    let mut g = g?;
    let mut prior = 0.0;
    if let Some(p) = spec.prior {
        let scale = 1.0 / p.n_total as f64;
        let (value, grads) = prior_penalty_with_gradient(e, p.prior_var, p.repulsion)?;
        prior = value * scale;
        for (gp, gr) in g.params.iter_mut().zip(grads) {
            for (a, b) in gp.iter_mut().zip(gr) {
                *a += scale * b;
            }
        }
    }
    let objective = g.value + prior;
    if !objective.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite objective {objective}")));
    }
    Ok((
        LossTerms {
            objective,
            data,
            variance,
            prior,
        },
        EnsembleGradient {
            particles: g.params,
            log_noise_var: g.aux[0],
        },
    ))
}

pub fn loss_standard_vi(e: &Ensemble, batch: &Batch<'_>, prior: Option<PriorSpec>) -> Result<f64> {
    let spec = ObjectiveSpec { prior, ..ObjectiveSpec::standard_vi() };
    evaluate_loss(e, batch, &spec).map(|t| t.objective)
}

pub fn loss_rber(e: &Ensemble, batch: &Batch<'_>, lambda: f64, prior: Option<PriorSpec>) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let spec = ObjectiveSpec { prior, ..ObjectiveSpec::rber(lambda) };
    evaluate_loss(e, batch, &spec).map(|t| t.objective)
}

pub fn loss_predictive_nll(e: &Ensemble, batch: &Batch<'_>, prior: Option<PriorSpec>) -> Result<f64> {
    let spec = ObjectiveSpec { prior, ..ObjectiveSpec::predictive_nll() };
    evaluate_loss(e, batch, &spec).map(|t| t.objective)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// RBF bandwidth: median pairwise squared distance over `ln(M + 1)`;
/// falls back to 1 when particles coincide.
pub fn rbf_bandwidth(particles: &[&[f64]]) -> f64 {
    let m = particles.len();
    let mut d2 = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d2.push(sq_dist(particles[i], particles[j]));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    let k = d2.len();
    let med = if k % 2 == 1 {
        d2[k / 2]
    } else {
        0.5 * (d2[k / 2 - 1] + d2[k / 2])
    };
    let h = med / ((m + 1) as f64).ln();
    if h > 1e-12 {
        h
    } else {
        1.0
    }
}

/// `(1/M) Σᵢ ‖θᵢ‖²/(2s²)`, plus `(1/M) Σᵢ ln[(1/M) Σⱼ k(θᵢ, θⱼ)]` when
/// repulsion is on (largest when particles coincide).
pub fn prior_penalty(e: &Ensemble, prior_var: f64, repulsion: Repulsion) -> Result<f64> {
    prior_penalty_with_gradient(e, prior_var, repulsion).map(|(v, _)| v)
}

pub fn prior_penalty_with_gradient(
    e: &Ensemble,
    prior_var: f64,
    repulsion: Repulsion,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(prior_var > 0.0) {
        return Err(Error::InvalidArgument(format!("prior_var must be > 0, got {prior_var}")));
    }
    let ps: Vec<&[f64]> = e.particles().iter().map(|p| p.as_slice()).collect();
    let m = ps.len() as f64;
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = ps
        .iter()
        .map(|p| {
            value += p.iter().map(|v| v * v).sum::<f64>() / (2.0 * prior_var * m);
            p.iter().map(|v| v / (prior_var * m)).collect()
        })
        .collect();
    if repulsion == Repulsion::Rbf {
        let h = rbf_bandwidth(&ps);
        let n = ps.len();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = (-sq_dist(ps[i], ps[j]) / h).exp();
            }
        }
        let s: Vec<f64> = k.iter().map(|row| row.iter().sum::<f64>() / m).collect();
        value += s.iter().map(|si| si.ln()).sum::<f64>() / m;
        // ∂/∂θᵢ = (1/M²) Σⱼ (−2(θᵢ − θⱼ)/h)·kᵢⱼ·(1/Sᵢ + 1/Sⱼ)
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let c = -2.0 / h * k[i][j] * (1.0 / s[i] + 1.0 / s[j]) / (m * m);
                for (g, (a, b)) in grads[i].iter_mut().zip(ps[i].iter().zip(ps[j])) {
                    *g += c * (a - b);
                }
            }
        }
    }
    Ok((value, grads))
}
