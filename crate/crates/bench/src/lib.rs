//! Shared fixtures for the benchmarks.

use deeppce::data::{marginals_100d, BENCH_100D_DIM};
use deeppce::rng::{stream_rng, PolarNormal};
use deeppce::training::{fold_batchnorm, init_weights, TrainConfig};
use deeppce::{CircuitModel, ModelConfig, PolyFamily};
use ndarray::Array2;

/// Randomly initialized, folded model with standard normal inputs.
pub fn random_model(d: usize, o: usize, scope: usize, order: usize, width: usize) -> CircuitModel {
    let mut m = CircuitModel::build(
        ModelConfig::new(d, o, scope, order, width, 0),
        vec![PolyFamily::standard_normal(); d],
    )
    .expect("valid fixture config");
    init_weights(&mut m, &TrainConfig::default(), 0);
    fold_batchnorm(&m).expect("fresh init has running stats")
}

/// Untrained model with the 100-variable benchmark layout (scope 1,
/// order 3, 40 sums per region).
pub fn model_100d() -> CircuitModel {
    let mut m = CircuitModel::build(ModelConfig::new(BENCH_100D_DIM, 1, 1, 3, 40, 0), marginals_100d())
        .expect("valid fixture config");
    init_weights(&mut m, &TrainConfig::default(), 0);
    m
}

/// `n` rows drawn from the model's marginals.
pub fn inputs(model: &CircuitModel, n: usize) -> Array2<f64> {
    let mut rng = stream_rng(1, 0);
    let mut normal = PolarNormal::new();
    Array2::from_shape_fn((n, model.d_in()), |(_, j)| model.marginals[j].sample(&mut rng, &mut normal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let m = random_model(8, 2, 2, 2, 4);
        assert!(m.is_folded());
        assert_eq!(inputs(&m, 3).dim(), (3, 8));
        assert_eq!(model_100d().n_regions(), 100);
    }
}
