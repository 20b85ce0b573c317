//! Reverse-mode tape over scalar arithmetic.
//!
//! Nodes are appended in evaluation order, each with its local partial
//! derivatives against earlier nodes, so one reverse sweep yields exact
//! adjoints for every node.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    // (start, len) into `edges`
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            values: Vec::with_capacity(nodes),
            spans: Vec::with_capacity(nodes),
            edges: Vec::with_capacity(nodes * 2),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    fn push(&mut self, value: f64, op: &'static str, parents: &[(Var, f64)]) -> Var {
        let idx = self.values.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some((idx, op));
        }
        let start = self.edges.len() as u32;
        self.edges
            .extend(parents.iter().map(|&(p, d)| (p.0 as u32, d)));
        self.spans.push((start, parents.len() as u32));
        self.values.push(value);
        Var(idx)
    }

    /// An independent input; gradients are reported for it.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, "leaf", &[])
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, "constant", &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, "add", &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, "sub", &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, "mul", &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x / y, "div", &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, "neg", &[(a, -1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, "scale", &[(a, c)])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, "add_const", &[(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, "square", &[(a, 2.0 * x)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, "exp", &[(a, v)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.ln(), "ln", &[(a, 1.0 / x)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push(v, "sum", &parents)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let w = 1.0 / xs.len() as f64;
        let v = xs.iter().map(|&x| self.value(x)).sum::<f64>() * w;
        let parents: Vec<(Var, f64)> = xs.iter().map(|&x| (x, w)).collect();
        self.push(v, "mean", &parents)
    }

    /// Population variance `(1/n) Σ (xᵢ − x̄)²` as a single node.
    pub fn variance(&mut self, xs: &[Var]) -> Var {
        let n = xs.len() as f64;
        let m = xs.iter().map(|&x| self.value(x)).sum::<f64>() / n;
        let v = xs.iter().map(|&x| (self.value(x) - m).powi(2)).sum::<f64>() / n;
        let parents: Vec<(Var, f64)> = xs
            .iter()
            .map(|&x| (x, 2.0 * (self.value(x) - m) / n))
            .collect();
        self.push(v, "variance", &parents)
    }

    /// `ln Σ exp(xᵢ)`, stabilized by the running maximum.
    pub fn log_sum_exp(&mut self, xs: &[Var]) -> Var {
        let max = xs
            .iter()
            .map(|&x| self.value(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = xs.iter().map(|&x| (self.value(x) - max).exp()).sum();
        let v = max + total.ln();
        let parents: Vec<(Var, f64)> = xs
            .iter()
            .map(|&x| (x, (self.value(x) - v).exp()))
            .collect();
        self.push(v, "log_sum_exp", &parents)
    }

    /// Adjoints of `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Vec<f64>> {
        if let Some((node, op)) = self.first_non_finite {
            if node <= root.0 {
                return Err(Error::NonFinite { node, op });
            }
        }
        let mut adj = vec![0.0; root.0 + 1];
        adj[root.0] = 1.0;
        for i in (0..=root.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (start, len) = self.spans[i];
            for &(p, d) in &self.edges[start as usize..(start + len) as usize] {
                adj[p as usize] += a * d;
            }
        }
        adj.resize(self.values.len(), 0.0);
        Ok(adj)
    }
}
