use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{loss_and_gradient, Adam, Batch, TrainConfig};
use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::ParameterVector;
use crate::rng;

/// Seed of particle `i`: a splitmix derivation of the run seed.
pub fn particle_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, rng::stream::PARTICLE_INIT), i as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub data_term: f64,
    pub variance_term: f64,
    pub prior_term: f64,
    pub noise_var: f64,
}

/// One record per completed epoch. Terms are row-weighted averages of the
/// mini-batch values seen during the epoch; `noise_var` is read at its end.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,objective,data_term,variance_term,prior_term,noise_var";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.objective, r.data_term, r.variance_term, r.prior_term, r.noise_var
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Fresh ensemble of `cfg.m_particles` networks trained on `data`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Ensemble, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let spec = cfg.network(data.dim(), 1)?;
    let seeds: Vec<u64> = (0..cfg.m_particles).map(|i| particle_seed(cfg.seed, i)).collect();
    let init = Ensemble::initialize(spec, &seeds, cfg.init_log_noise_var)?;
    fit(init, cfg, data.x(), data.y(), None, cfg.epochs, cfg.seed)
}

/// Continue training `init` with Adam on all particle parameters plus the
/// log noise variance. The last short mini-batch of each epoch is kept.
/// Rows are shuffled per epoch from the stream derived from `shuffle_seed`.
pub fn fit(
    init: Ensemble,
    cfg: &TrainConfig,
    x: &[f64],
    y: &[f64],
    coords: Option<&[usize]>,
    epochs: usize,
    shuffle_seed: u64,
) -> Result<(Ensemble, TrainHistory)> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("training data"));
    }
    let d = init.spec().input_dim();
    if x.len() != n * d {
        return Err(Error::DimensionMismatch {
            context: "training inputs",
            expected: n * d,
            actual: x.len(),
        });
    }
    let objective = cfg.objective(n);
    let spec = init.spec().clone();
    let p = spec.param_count();
    let m = init.n_particles();

    let mut theta: Vec<f64> = Vec::with_capacity(m * p + 1);
    for particle in init.particles() {
        theta.extend_from_slice(particle.as_slice());
    }
    theta.push(init.log_noise_var());
    let mut adam = Adam::new(theta.len(), cfg.lr, cfg.adam_betas, cfg.adam_eps);
    let mut shuffle_rng = rng::stream_rng(shuffle_seed, rng::stream::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut ensemble = init;

    let bs = cfg.batch_size.min(n);
    let mut bx = Vec::with_capacity(bs * d);
    let mut by = Vec::with_capacity(bs);
    let mut bc = Vec::with_capacity(bs);
    let mut grad = vec![0.0; theta.len()];

    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = [0.0f64; 4];
        for (step, chunk) in order.chunks(bs).enumerate() {
            bx.clear();
            by.clear();
            bc.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * d..(i + 1) * d]);
                by.push(y[i]);
                if let Some(c) = coords {
                    bc.push(c[i]);
                }
            }
            let batch = Batch {
                x: &bx,
                y: &by,
                coords: coords.map(|_| bc.as_slice()),
            };
            let (terms, g) = loss_and_gradient(&ensemble, &batch, &objective).map_err(|e| {
                Error::Diverged {
                    epoch,
                    step,
                    detail: e.to_string(),
                }
            })?;
            let w = chunk.len() as f64;
            acc[0] += w * terms.objective;
            acc[1] += w * terms.data;
            acc[2] += w * terms.variance;
            acc[3] += w * terms.prior;

            for (k, gp) in g.particles.iter().enumerate() {
                grad[k * p..(k + 1) * p].copy_from_slice(gp);
            }
            grad[m * p] = g.log_noise_var;
            adam.step(&mut theta, &grad);
            if let Some(bad) = theta.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("parameter {bad} became non-finite"),
                });
            }
            ensemble = rebuild(&spec, &theta, m, p)?;
        }
        let nf = n as f64;
        history.records.push(EpochRecord {
            epoch,
            objective: acc[0] / nf,
            data_term: acc[1] / nf,
            variance_term: acc[2] / nf,
            prior_term: acc[3] / nf,
            noise_var: ensemble.noise_var(),
        });
    }
    Ok((ensemble, history))
}

fn rebuild(spec: &crate::nn::NetworkSpec, theta: &[f64], m: usize, p: usize) -> Result<Ensemble> {
    let particles = (0..m)
        .map(|k| ParameterVector::new(spec, theta[k * p..(k + 1) * p].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(spec.clone(), particles, theta[m * p])
}
