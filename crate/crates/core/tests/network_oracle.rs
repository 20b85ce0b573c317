//! Forward pass and gradients against independent reference computations.

use berlab_core::nn::{self, Activation, NetworkSpec, ParameterVector};
use berlab_core::objectives::{Batch, ObjectiveSpec, PriorSpec, Repulsion};
use berlab_core::verify::{gradient_rel_error, GRAD_REL_TOL};
use berlab_core::Ensemble;
use proptest::prelude::*;

/// Plain nested loops over the `(W, b)` layer view.
fn naive_forward(spec: &NetworkSpec, p: &ParameterVector, x: &[f64]) -> Vec<f64> {
    let layers = p.to_layers(spec);
    let last = layers.len() - 1;
    let mut h = x.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut next = b.clone();
        for (o, v) in next.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate() {
                *v += w[o * h.len() + i] * hi;
            }
            if l < last {
                *v = match spec.activation() {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                    Activation::Identity => *v,
                };
            }
        }
        h = next;
    }
    h
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Tanh), Just(Activation::Identity)]
}

fn net_and_input() -> impl Strategy<Value = (NetworkSpec, Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(1usize..6, 2..5), activation()).prop_flat_map(|(widths, act)| {
        let spec = NetworkSpec::new(widths, act).unwrap();
        let p = spec.param_count();
        let d = spec.input_dim();
        (
            Just(spec),
            prop::collection::vec(-2.0f64..2.0, p),
            prop::collection::vec(-3.0f64..3.0, d),
        )
    })
}

proptest! {
    #[test]
    fn forward_matches_naive_loops((spec, theta, x) in net_and_input()) {
        let p = ParameterVector::new(&spec, theta).unwrap();
        let got = nn::forward(&spec, &p, &x).unwrap();
        let want = naive_forward(&spec, &p, &x);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_rows_match_single_forward((spec, theta, x) in net_and_input()) {
        let p = ParameterVector::new(&spec, theta).unwrap();
        let mut xs = x.clone();
        xs.extend(x.iter().map(|v| -v));
        let batch = nn::forward_batch(&spec, &p, &xs, 2).unwrap();
        let k = spec.output_dim();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(&batch[..k], &nn::forward(&spec, &p, &x).unwrap()[..]);
        prop_assert_eq!(&batch[k..], &nn::forward(&spec, &p, &neg).unwrap()[..]);
    }
}

fn tanh_ensemble(widths: Vec<usize>, flat: &[f64], m: usize, log_nv: f64) -> Ensemble {
    let spec = NetworkSpec::new(widths, Activation::Tanh).unwrap();
    let p = spec.param_count();
    let ps = (0..m)
        .map(|i| ParameterVector::new(&spec, flat[i * p..(i + 1) * p].to_vec()).unwrap())
        .collect();
    Ensemble::new(spec, ps, log_nv).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn gradients_match_central_differences(
        hidden in 1usize..5,
        m in 1usize..5,
        rows in 1usize..6,
        log_nv in -2.0f64..1.0,
        lambda in 0.0f64..1.0,
        kind in 0usize..3,
        with_prior in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let widths = vec![2, hidden, 1];
        let p = NetworkSpec::new(widths.clone(), Activation::Tanh).unwrap().param_count();
        let flat: Vec<f64> = (0..m * p).map(|_| StandardNormal.sample(&mut r)).collect();
        let e = tanh_ensemble(widths, &flat, m, log_nv);
        let x: Vec<f64> = (0..rows * 2).map(|_| StandardNormal.sample(&mut r)).collect();
        let y: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut spec = match kind {
            0 => ObjectiveSpec::standard_vi(),
            1 => ObjectiveSpec::rber(lambda),
            _ => ObjectiveSpec::predictive_nll(),
        };
        if with_prior {
            spec = spec.with_prior(PriorSpec { prior_var: 1.5, repulsion: Repulsion::Off, n_total: 40 });
        }
        let err = gradient_rel_error(&e, &Batch::new(&x, &y), &spec).unwrap();
        prop_assert!(err <= GRAD_REL_TOL, "relative error {err:e}");
    }
}

#[test]
fn masked_coordinates_gradient() {
    let spec = NetworkSpec::new(vec![2, 3, 3], Activation::Tanh).unwrap();
    let ps = (0..3)
        .map(|i| nn::init_params(&spec, 40 + i))
        .collect();
    let e = Ensemble::new(spec, ps, -0.5).unwrap();
    let x = [0.3, -1.0, 1.2, 0.4, -0.7, 0.0];
    let y = [0.5, -0.2, 1.0];
    let coords = [2, 0, 1];
    let batch = Batch { x: &x, y: &y, coords: Some(&coords) };
    let err = gradient_rel_error(&e, &batch, &ObjectiveSpec::rber(0.05)).unwrap();
    assert!(err <= GRAD_REL_TOL, "{err:e}");
}
