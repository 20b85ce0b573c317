//! Cross-module invariants on random ensembles.

use berlab_core::data::{gen_cubic, norm_stats, standardize_split, split};
use berlab_core::nn::{self, Activation, NetworkSpec, ParameterVector};
use berlab_core::objectives::{loss_predictive_nll, loss_rber, loss_standard_vi, Batch, PriorSpec, Repulsion};
use berlab_core::uncertainty::{mixture_mutual_information, QuadratureSpec};
use berlab_core::Ensemble;
use proptest::prelude::*;

fn ensemble_strategy() -> impl Strategy<Value = Ensemble> {
    (1usize..4, 1usize..7, -3.0f64..1.0).prop_flat_map(|(hidden, m, log_nv)| {
        let spec = NetworkSpec::new(vec![1, hidden, 1], Activation::Tanh).unwrap();
        let p = spec.param_count();
        prop::collection::vec(-2.0f64..2.0, m * p).prop_map(move |flat| {
            let ps = flat
                .chunks(p)
                .map(|c| ParameterVector::new(&spec, c.to_vec()).unwrap())
                .collect();
            Ensemble::new(spec.clone(), ps, log_nv).unwrap()
        })
    })
}

fn batch_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn gibbs_decomposition(e in ensemble_strategy(), x in -3.0f64..3.0, y in -5.0f64..5.0) {
        let mix = e.mixture(&[x]).unwrap();
        let lhs = (y - mix.mean()).powi(2) + mix.variance();
        let gibbs = e
            .particle_outputs(&[x])
            .unwrap()
            .iter()
            .map(|f| (y - f).powi(2))
            .sum::<f64>()
            / e.n_particles() as f64;
        prop_assert!((lhs - gibbs).abs() <= 1e-10 * gibbs.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn mutual_information_bounds(e in ensemble_strategy(), x in -3.0f64..3.0) {
        let mix = e.mixture(&[x]).unwrap();
        let mi = mixture_mutual_information(&mix, &QuadratureSpec::default()).unwrap();
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= mix.variance() / mix.noise_var() + 1e-6);
    }

    #[test]
    fn rber_at_one_is_standard_vi(e in ensemble_strategy(), (x, y) in batch_strategy()) {
        let b = Batch::new(&x, &y);
        let prior = Some(PriorSpec { prior_var: 1.0, repulsion: Repulsion::Off, n_total: 100 });
        let a = loss_rber(&e, &b, 1.0, prior).unwrap();
        let s = loss_standard_vi(&e, &b, prior).unwrap();
        prop_assert!((a - s).abs() <= 1e-12 * s.abs().max(1.0));
    }

    #[test]
    fn rber_nondecreasing_in_lambda(e in ensemble_strategy(), (x, y) in batch_strategy()) {
        let b = Batch::new(&x, &y);
        let vals: Vec<f64> = [0.0, 0.05, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&l| loss_rber(&e, &b, l, None).unwrap())
            .collect();
        prop_assert!(vals.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn jensen_ordering(e in ensemble_strategy(), (x, y) in batch_strategy()) {
        let b = Batch::new(&x, &y);
        let prior = Some(PriorSpec { prior_var: 2.0, repulsion: Repulsion::Rbf, n_total: 50 });
        let nll = loss_predictive_nll(&e, &b, prior).unwrap();
        let vi = loss_standard_vi(&e, &b, prior).unwrap();
        prop_assert!(nll <= vi + 1e-12 * vi.abs().max(1.0));
    }

    #[test]
    fn forward_is_pure(e in ensemble_strategy(), x in -3.0f64..3.0) {
        let p = &e.particles()[0];
        let a = nn::forward(e.spec(), p, &[x]).unwrap();
        let b = nn::forward(e.spec(), p, &[x]).unwrap();
        prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}

#[test]
fn normalization_uses_training_rows_only() {
    let data = gen_cubic(200, 4).data;
    let (train_raw, _) = split(&data, 0.8, 9).unwrap();
    let (train, test) = standardize_split(&data, 0.8, 9).unwrap();
    let expected = norm_stats(&train_raw, None).unwrap();
    assert_eq!(train.norm.as_ref().unwrap(), &expected);
    assert_eq!(test.norm.as_ref().unwrap(), &expected);
}

#[test]
fn generators_are_pure() {
    let a = gen_cubic(64, 11).data;
    let b = gen_cubic(64, 11).data;
    assert_eq!(a, b);
    assert_ne!(a, gen_cubic(64, 12).data);
}
