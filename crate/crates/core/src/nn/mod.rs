//! Feedforward networks with exact reverse-mode gradients.
//!
//! Parameter layout (frozen): layers in order; for a layer with fan-in `a`
//! and fan-out `b`, the `b × a` weight matrix in row-major order
//! (`W[o * a + i]`) followed by the `b` biases. Hidden layers apply the
//! activation; the output layer is affine.

mod tape;

pub use tape::{Tape, Var};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    /// The relu subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Σ (wᵢ·wᵢ₊₁ + wᵢ₊₁).
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of each layer's weight block and bias block.
    pub fn layer_offsets(&self) -> Vec<LayerOffsets> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let o = LayerOffsets {
                    fan_in,
                    fan_out,
                    weights: off,
                    biases: off + fan_in * fan_out,
                };
                off += fan_in * fan_out + fan_out;
                o
            })
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        NetworkSpec::new(self.layer_widths.clone(), self.activation).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub biases: usize,
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: spec.param_count(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    /// Assemble from per-layer `(weights, biases)` blocks.
    pub fn from_layers(spec: &NetworkSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let offsets = spec.layer_offsets();
        if layers.len() != offsets.len() {
            return Err(Error::DimensionMismatch {
                context: "layer count",
                expected: offsets.len(),
                actual: layers.len(),
            });
        }
        let mut values = Vec::with_capacity(spec.param_count());
        for ((w, b), o) in layers.iter().zip(&offsets) {
            if w.len() != o.fan_in * o.fan_out || b.len() != o.fan_out {
                return Err(Error::DimensionMismatch {
                    context: "layer block",
                    expected: o.fan_in * o.fan_out + o.fan_out,
                    actual: w.len() + b.len(),
                });
            }
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        Self::new(spec, values)
    }

    /// Split into per-layer `(weights, biases)` blocks.
    pub fn to_layers(&self, spec: &NetworkSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
        spec.layer_offsets()
            .iter()
            .map(|o| {
                (
                    self.0[o.weights..o.biases].to_vec(),
                    self.0[o.biases..o.biases + o.fan_out].to_vec(),
                )
            })
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_params(spec: &NetworkSpec, params: &ParameterVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    Ok(())
}

fn check_inputs(spec: &NetworkSpec, inputs: &[f64], rows: usize) -> Result<()> {
    if inputs.len() != rows * spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: rows * spec.input_dim(),
            actual: inputs.len(),
        });
    }
    Ok(())
}

/// Forward pass for a single input vector.
pub fn forward(spec: &NetworkSpec, params: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: spec.input_dim(),
            actual: x.len(),
        });
    }
    forward_batch(spec, params, x, 1)
}

/// Forward pass over `rows` row-major inputs; returns `rows × output_dim`
/// row-major outputs.
pub fn forward_batch(
    spec: &NetworkSpec,
    params: &ParameterVector,
    inputs: &[f64],
    rows: usize,
) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    check_inputs(spec, inputs, rows)?;
    Ok(ForwardCache::run(spec, params.as_slice(), inputs, rows, false).output)
}

/// Activations retained for the backward pass.
pub(crate) struct ForwardCache {
    rows: usize,
    // layer inputs: acts[0] = x, acts[l] = post-activation of layer l-1
    acts: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pres: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

impl ForwardCache {
    fn run(spec: &NetworkSpec, p: &[f64], inputs: &[f64], rows: usize, keep: bool) -> Self {
        let offsets = spec.layer_offsets();
        let act = spec.activation();
        let last = offsets.len() - 1;
        let mut acts = Vec::new();
        let mut pres = Vec::new();
        let mut cur = inputs.to_vec();
        for (l, o) in offsets.iter().enumerate() {
            let w = &p[o.weights..o.biases];
            let b = &p[o.biases..o.biases + o.fan_out];
            let mut z = vec![0.0; rows * o.fan_out];
            for r in 0..rows {
                let a = &cur[r * o.fan_in..(r + 1) * o.fan_in];
                let zr = &mut z[r * o.fan_out..(r + 1) * o.fan_out];
                for (k, zk) in zr.iter_mut().enumerate() {
                    let wk = &w[k * o.fan_in..(k + 1) * o.fan_in];
                    let mut s = b[k];
                    for (wi, ai) in wk.iter().zip(a) {
                        s += wi * ai;
                    }
                    *zk = s;
                }
            }
            if l == last {
                if keep {
                    acts.push(cur);
                }
                return ForwardCache {
                    rows,
                    acts,
                    pres,
                    output: z,
                };
            }
            let next: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            if keep {
                acts.push(std::mem::replace(&mut cur, next));
                pres.push(z);
            } else {
                cur = next;
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of Σ adjᵣₖ·outputᵣₖ with respect to the parameters.
    fn backward(&self, spec: &NetworkSpec, p: &[f64], out_adj: &[f64]) -> Vec<f64> {
        let offsets = spec.layer_offsets();
        let act = spec.activation();
        let rows = self.rows;
        let mut grad = vec![0.0; p.len()];
        let mut delta = out_adj.to_vec();
        for (l, o) in offsets.iter().enumerate().rev() {
            let input = &self.acts[l];
            {
                let (gw, gb) = grad[o.weights..o.biases + o.fan_out].split_at_mut(o.fan_in * o.fan_out);
                for r in 0..rows {
                    let d = &delta[r * o.fan_out..(r + 1) * o.fan_out];
                    let a = &input[r * o.fan_in..(r + 1) * o.fan_in];
                    for (k, &dk) in d.iter().enumerate() {
                        if dk == 0.0 {
                            continue;
                        }
                        gb[k] += dk;
                        let g = &mut gw[k * o.fan_in..(k + 1) * o.fan_in];
                        for (gi, ai) in g.iter_mut().zip(a) {
                            *gi += dk * ai;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &p[o.weights..o.biases];
            let pre = &self.pres[l - 1];
            let mut prev = vec![0.0; rows * o.fan_in];
            for r in 0..rows {
                let d = &delta[r * o.fan_out..(r + 1) * o.fan_out];
                let pr = &mut prev[r * o.fan_in..(r + 1) * o.fan_in];
                for (k, &dk) in d.iter().enumerate() {
                    if dk == 0.0 {
                        continue;
                    }
                    let wk = &w[k * o.fan_in..(k + 1) * o.fan_in];
                    for (pi, wi) in pr.iter_mut().zip(wk) {
                        *pi += dk * wi;
                    }
                }
                let z = &pre[r * o.fan_in..(r + 1) * o.fan_in];
                let a = &input[r * o.fan_in..(r + 1) * o.fan_in];
                for ((pi, &zi), &ai) in pr.iter_mut().zip(z).zip(a) {
                    *pi *= act.derivative(zi, ai);
                }
            }
            delta = prev;
        }
        grad
    }
}

/// Forward passes of several networks on a shared input batch, exposed as
/// tape leaves: `outputs[p][r * output_dim + k]`.
pub struct TapeOutputs<'a> {
    pub outputs: &'a [Vec<Var>],
    pub output_dim: usize,
    pub rows: usize,
}

impl TapeOutputs<'_> {
    /// Output `k` of particle `p` at row `r`.
    pub fn at(&self, p: usize, r: usize, k: usize) -> Var {
        self.outputs[p][r * self.output_dim + k]
    }

    /// Output `k` at row `r` across all particles.
    pub fn across(&self, r: usize, k: usize) -> Vec<Var> {
        self.outputs
            .iter()
            .map(|o| o[r * self.output_dim + k])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub value: f64,
    /// One gradient per network, in parameter layout.
    pub params: Vec<Vec<f64>>,
    /// Gradient with respect to each auxiliary scalar.
    pub aux: Vec<f64>,
}

/// Exact reverse-mode gradient of a scalar loss built on the tape from the
/// outputs of each network in `params` on `inputs`, plus auxiliary scalars.
///
/// Per-network forward and backward passes run on the rayon pool; results
/// are gathered in network order so the value is independent of the
/// thread count.
pub fn gradient<F>(
    spec: &NetworkSpec,
    params: &[ParameterVector],
    inputs: &[f64],
    rows: usize,
    aux: &[f64],
    loss: F,
) -> Result<Gradient>
where
    F: FnOnce(&mut Tape, &TapeOutputs<'_>, &[Var]) -> Var,
{
    for p in params {
        check_params(spec, p)?;
    }
    check_inputs(spec, inputs, rows)?;
    let caches: Vec<ForwardCache> = params
        .par_iter()
        .map(|p| ForwardCache::run(spec, p.as_slice(), inputs, rows, true))
        .collect();

    let out_dim = spec.output_dim();
    let mut tape = Tape::with_capacity(params.len() * rows * out_dim * 4 + aux.len() + 16);
    let outputs: Vec<Vec<Var>> = caches
        .iter()
        .map(|c| c.output.iter().map(|&v| tape.leaf(v)).collect())
        .collect();
    let aux_vars: Vec<Var> = aux.iter().map(|&a| tape.leaf(a)).collect();
    let view = TapeOutputs {
        outputs: &outputs,
        output_dim: out_dim,
        rows,
    };
    let root = loss(&mut tape, &view, &aux_vars);
    let adj = tape.backward(root)?;

    let grads: Vec<Vec<f64>> = caches
        .par_iter()
        .zip(params.par_iter())
        .zip(outputs.par_iter())
        .map(|((c, p), outs)| {
            let out_adj: Vec<f64> = outs.iter().map(|v| adj[v.index()]).collect();
            c.backward(spec, p.as_slice(), &out_adj)
        })
        .collect();
    Ok(Gradient {
        value: tape.value(root),
        params: grads,
        aux: aux_vars.iter().map(|v| adj[v.index()]).collect(),
    })
}

/// Gaussian weights with variance `gain / fan_in` (gain 2 for relu, 1
/// otherwise) and zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParameterVector {
    let mut rng = rng::stream_rng(seed, rng::stream::PARTICLE_INIT);
    let gain = match spec.activation() {
        Activation::Relu => 2.0,
        Activation::Tanh | Activation::Identity => 1.0,
    };
    let mut values = vec![0.0; spec.param_count()];
    for o in spec.layer_offsets() {
        let sd = (gain / o.fan_in as f64).sqrt();
        for w in &mut values[o.weights..o.biases] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = sd * z;
        }
    }
    ParameterVector(values)
}
