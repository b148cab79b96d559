#![allow(dead_code)]

use deeppce::rng::{stream_rng, uniform};
use deeppce::training::{init_weights, TrainConfig};
use deeppce::{CircuitModel, ModelConfig, PolyFamily};

/// Random weights plus random batch-norm scale, shift and running stats,
/// so that folding is not a no-op.
pub fn random_model(config: ModelConfig, marginals: Vec<PolyFamily>, seed: u64) -> CircuitModel {
    let mut m = CircuitModel::build(config, marginals).expect("valid config");
    init_weights(&mut m, &TrainConfig::default(), seed);
    let mut rng = stream_rng(seed, 77);
    let mut sums: Vec<&mut deeppce::circuit::AffineSum> = m.leaves.iter_mut().map(|l| &mut l.sum).collect();
    sums.extend(m.blocks.iter_mut().flat_map(|b| b.sums.iter_mut()));
    for s in sums {
        s.bias.mapv_inplace(|_| uniform(&mut rng, -0.3, 0.3));
        if let Some(n) = &mut s.norm {
            n.gamma.mapv_inplace(|_| uniform(&mut rng, 0.5, 1.5));
            n.beta.mapv_inplace(|_| uniform(&mut rng, -0.5, 0.5));
            n.running_mean.mapv_inplace(|_| uniform(&mut rng, -0.5, 0.5));
            n.running_var.mapv_inplace(|_| uniform(&mut rng, 0.5, 2.0));
        }
    }
    m.head.bias.mapv_inplace(|_| uniform(&mut rng, -1.0, 1.0));
    m
}

/// A mix of normal and uniform marginals with shifted parameters.
pub fn mixed_marginals(d: usize, seed: u64) -> Vec<PolyFamily> {
    let mut rng = stream_rng(seed, 78);
    (0..d)
        .map(|i| {
            let a = uniform(&mut rng, -1.0, 1.0);
            let b = uniform(&mut rng, 0.5, 2.0);
            if i % 2 == 0 {
                PolyFamily::normal(a, b).unwrap()
            } else {
                PolyFamily::uniform(a, a + b).unwrap()
            }
        })
        .collect()
}

/// Draws `n` rows from the marginals.
pub fn sample_inputs(marginals: &[PolyFamily], n: usize, seed: u64) -> ndarray::Array2<f64> {
    let mut rng = stream_rng(seed, 79);
    let mut normal = deeppce::rng::PolarNormal::new();
    ndarray::Array2::from_shape_fn((n, marginals.len()), |(_, j)| marginals[j].sample(&mut rng, &mut normal))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Largest `|a − b| / max(1, |b|)` over paired entries.
pub fn max_scaled_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
