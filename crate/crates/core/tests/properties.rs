mod common;

use common::{max_scaled_diff, mixed_marginals, random_model, sample_inputs};
use deeppce::montecarlo::{mc_covariance, mc_mean};
use deeppce::training::fold_batchnorm;
use deeppce::{CircuitModel, ConditionSpec, ExactInference, ModelConfig, MultiIndexSet, RegionGraph, ShallowPce};
use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = (ModelConfig, u64)> {
    (1usize..=6, 1usize..=3, 1usize..=3, 1usize..=3, 1usize..=4, any::<u64>()).prop_map(
        |(d, o, scope, order, width, seed)| {
            let scope = scope.min(d);
            (ModelConfig::new(d, o, scope, order, width, seed), seed)
        },
    )
}

fn folded((config, seed): &(ModelConfig, u64)) -> CircuitModel {
    let marginals = mixed_marginals(config.d_in, *seed);
    fold_batchnorm(&random_model(config.clone(), marginals, *seed)).unwrap()
}

fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    dm.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sobol_indices_are_a_partial_variance_split(cfg in arb_config()) {
        let model = folded(&cfg);
        let s = ExactInference::new(&model).unwrap().sobol_first_order().unwrap();
        for row in s.indices.rows() {
            prop_assert!(row.iter().all(|&v| v >= -1e-10), "{row}");
            prop_assert!(row.sum() <= 1.0 + 1e-10, "sum {}", row.sum());
        }
    }

    #[test]
    fn covariances_are_positive_semidefinite(cfg in arb_config()) {
        let model = folded(&cfg);
        let inf = ExactInference::new(&model).unwrap();
        let d = model.d_in();
        let set: Vec<usize> = (0..d).step_by(2).collect();
        let point = sample_inputs(&model.marginals, 1, cfg.1);
        let spec = ConditionSpec::new(set.iter().map(|&i| (i, point[[0, i]]))).unwrap();
        for m in [
            inf.covariance().unwrap(),
            inf.conditional_covariance(&spec).unwrap(),
            inf.covariance_of_conditional_expectation(&set).unwrap(),
            inf.expected_conditional_covariance(&set).unwrap(),
        ] {
            let scale = inf.covariance().unwrap().diag().iter().cloned().fold(1.0, f64::max);
            prop_assert!(min_eigenvalue(&m) >= -1e-9 * scale);
            prop_assert!(max_scaled_diff(&m, &m.t().to_owned()) < 1e-12);
        }
    }

    #[test]
    fn folding_preserves_forward_and_moments(cfg in arb_config()) {
        let marginals = mixed_marginals(cfg.0.d_in, cfg.1);
        let unfolded = random_model(cfg.0.clone(), marginals.clone(), cfg.1);
        let model = fold_batchnorm(&unfolded).unwrap();
        let x = sample_inputs(&marginals, 16, cfg.1);
        let a = unfolded.forward(x.view()).unwrap();
        let b = model.forward(x.view()).unwrap();
        prop_assert!(max_scaled_diff(&a, &b) < 1e-9);
        let exact = ExactInference::new(&model).unwrap().covariance().unwrap();
        let other = ExactInference::new_unfolded(&unfolded).unwrap().covariance().unwrap();
        prop_assert!(max_scaled_diff(&exact, &other) < 1e-8);
        prop_assert!(matches!(ExactInference::new(&unfolded), Err(deeppce::Error::NotFolded)));
    }

    #[test]
    fn conditioning_on_everything_is_evaluation(cfg in arb_config()) {
        let model = folded(&cfg);
        let inf = ExactInference::new(&model).unwrap();
        let x = sample_inputs(&model.marginals, 1, cfg.1 ^ 1);
        let spec = ConditionSpec::full(x.row(0).as_slice().unwrap()).unwrap();
        let y = model.forward(x.view()).unwrap();
        prop_assert!(max_scaled_diff(&inf.conditional_mean(&spec).unwrap(), &y.row(0).to_owned()) < 1e-9);
        let c = inf.conditional_covariance(&spec).unwrap();
        let scale = inf.covariance().unwrap().diag().iter().cloned().fold(1.0, f64::max);
        prop_assert!(c.iter().all(|v| v.abs() < 1e-9 * scale));
        let empty = ConditionSpec::default();
        prop_assert!(max_scaled_diff(&inf.conditional_mean(&empty).unwrap(), &inf.mean().unwrap()) < 1e-12);
    }

    #[test]
    fn relabelling_inputs_permutes_the_answers(d in 2usize..=6, seed in any::<u64>(), shift in 1usize..6) {
        // X_v of the first model is X_{π(v)} of the second
        let pi: Vec<usize> = (0..d).map(|v| (v + shift) % d).collect();
        let marginals = mixed_marginals(d, seed);
        let config = ModelConfig::new(d, 2, 1, 2, 3, seed);
        let a = fold_batchnorm(&random_model(config.clone(), marginals.clone(), seed)).unwrap();
        let mut permuted_marginals = marginals.clone();
        for v in 0..d {
            permuted_marginals[pi[v]] = marginals[v];
        }
        let scopes: Vec<Vec<usize>> = a.graph.scopes.iter().map(|s| vec![pi[s[0]]]).collect();
        let graph = RegionGraph::with_scopes(scopes, seed);
        let mut b = CircuitModel::with_graph(config, permuted_marginals, graph).unwrap();
        for (lb, la) in b.leaves.iter_mut().zip(&a.leaves) {
            lb.sum = la.sum.clone();
        }
        b.blocks = a.blocks.clone();
        b.head = a.head.clone();

        let x = sample_inputs(&marginals, 8, seed);
        let mut xp = x.clone();
        for (v, &pv) in pi.iter().enumerate() {
            xp.column_mut(pv).assign(&x.column(v));
        }
        prop_assert!(max_scaled_diff(&a.forward(x.view()).unwrap(), &b.forward(xp.view()).unwrap()) < 1e-12);
        let sa = ExactInference::new(&a).unwrap().sobol_first_order().unwrap().indices;
        let sb = ExactInference::new(&b).unwrap().sobol_first_order().unwrap().indices;
        let sb_back = sb.select(Axis(1), &pi);
        prop_assert!(max_scaled_diff(&sa, &sb_back) < 1e-12);
    }

    #[test]
    fn shallow_fit_recovers_planted_weights(d in 1usize..=3, k in 1usize..=3, seed in any::<u64>()) {
        let marginals = mixed_marginals(d, seed);
        let basis = MultiIndexSet::generate(d, k, 1.0).unwrap();
        let w = sample_inputs(&vec![deeppce::PolyFamily::standard_normal(); basis.len()], 2, seed);
        let pce = ShallowPce::new(basis.clone(), marginals.clone(), w.clone()).unwrap();
        let x = sample_inputs(&marginals, 3 * basis.len(), seed ^ 7);
        let y = pce.predict_batch(x.view()).unwrap();
        let fit = ShallowPce::fit_least_squares(basis, marginals, x.view(), y.view(), 0.0).unwrap();
        prop_assert!(max_scaled_diff(&fit.weights, &w) < 1e-8);
    }
}

#[test]
fn exact_moments_match_monte_carlo() {
    let marginals = mixed_marginals(4, 21);
    let model = fold_batchnorm(&random_model(ModelConfig::new(4, 2, 2, 2, 3, 21), marginals, 21)).unwrap();
    let inf = ExactInference::new(&model).unwrap();
    let n = 1_000_000;
    let mean = mc_mean(&model, n, 3, 1).unwrap();
    let cov = mc_covariance(&model, n, 3, 2).unwrap();
    let exact_cov = inf.covariance().unwrap();
    for (o, (&m, &e)) in mean.iter().zip(inf.mean().unwrap().iter()).enumerate() {
        let se = (exact_cov[[o, o]] / n as f64).sqrt();
        assert!((m - e).abs() < 4.0 * se, "output {o}: {m} vs {e} (se {se})");
    }
    for o in 0..2 {
        // loose bound on the variance: the relative sampling error of a
        // variance estimate at 10^6 draws is far below 5%
        assert!((cov[[o, o]] / exact_cov[[o, o]] - 1.0).abs() < 0.05);
    }
}
