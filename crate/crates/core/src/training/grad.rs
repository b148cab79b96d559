//! Training-mode forward pass and exact reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::circuit::{block_label, leaf_label, AffineSum, CircuitModel, HEAD_LABEL};
use crate::error::{check_dim, Error, Result};

/// Gradient of one sum layer, same shapes as its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SumGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// Gradients of every sum layer, in [`CircuitModel::sums`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub sums: Vec<SumGrad>,
}

impl Gradients {
    /// Flattened in the same order as [`flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.sums {
            out.extend(g.weights.iter());
            out.extend(g.bias.iter());
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.extend(gm.iter());
                out.extend(bt.iter());
            }
        }
        out
    }
}

pub(crate) fn sums_mut(model: &mut CircuitModel) -> Vec<&mut AffineSum> {
    let mut out: Vec<&mut AffineSum> = model.leaves.iter_mut().map(|l| &mut l.sum).collect();
    for block in &mut model.blocks {
        out.extend(block.sums.iter_mut());
    }
    out.push(&mut model.head);
    out
}

/// All trainable scalars: per sum layer weights, bias, then batch-norm
/// scale and shift when present.
pub fn flat_params(model: &CircuitModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.n_parameters());
    for (_, s) in model.sums() {
        out.extend(s.weights.iter());
        out.extend(s.bias.iter());
        if let Some(n) = &s.norm {
            out.extend(n.gamma.iter());
            out.extend(n.beta.iter());
        }
    }
    out
}

/// Inverse of [`flat_params`].
pub fn set_flat_params(model: &mut CircuitModel, params: &[f64]) -> Result<()> {
    check_dim("flat parameter length", model.n_parameters(), params.len())?;
    let mut it = params.iter().copied();
    for s in sums_mut(model) {
        s.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
        s.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        if let Some(n) = &mut s.norm {
            n.gamma.iter_mut().for_each(|w| *w = it.next().unwrap());
            n.beta.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Normalized {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    /// Unbiased batch variance, used for the running estimate.
    var_unbiased: Array1<f64>,
}

#[derive(Debug, Clone)]
struct SumTape {
    input: Array2<f64>,
    norm: Option<Normalized>,
}

/// Cached activations of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    sums: Vec<SumTape>,
    /// Region values per level, leaves first.
    levels: Vec<Vec<Array2<f64>>>,
    pub output: Array2<f64>,
}

fn sum_forward(sum: &AffineSum, input: Array2<f64>) -> (Array2<f64>, SumTape) {
    let y = sum.linear(&input);
    match &sum.norm {
        None => (y, SumTape { input, norm: None }),
        Some(bn) => {
            let b = y.nrows() as f64;
            let mean = y.mean_axis(Axis(0)).unwrap();
            let centered = &y - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
            let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
            let xhat = &centered * &inv_std;
            let z = &xhat * &bn.gamma + &bn.beta;
            let var_unbiased = if b > 1.0 { &var * (b / (b - 1.0)) } else { var };
            let norm = Normalized {
                xhat,
                inv_std,
                mean,
                var_unbiased,
            };
            (z, SumTape { input, norm: Some(norm) })
        }
    }
}

fn sum_backward(sum: &AffineSum, tape: &SumTape, dz: &Array2<f64>, need_input: bool) -> (SumGrad, Option<Array2<f64>>) {
    let (dy, gamma, beta) = match (&sum.norm, &tape.norm) {
        (Some(bn), Some(n)) => {
            let b = dz.nrows() as f64;
            let dgamma = (dz * &n.xhat).sum_axis(Axis(0));
            let dbeta = dz.sum_axis(Axis(0));
            let dxhat = dz * &bn.gamma;
            let s1 = dxhat.sum_axis(Axis(0));
            let s2 = (&dxhat * &n.xhat).sum_axis(Axis(0));
            let dy = (&(&dxhat * b) - &s1 - &(&n.xhat * &s2)) * &(&n.inv_std / b);
            (dy, Some(dgamma), Some(dbeta))
        }
        _ => (dz.clone(), None, None),
    };
    let grad = SumGrad {
        weights: dy.t().dot(&tape.input),
        bias: dy.sum_axis(Axis(0)),
        gamma,
        beta,
    };
    let dx = need_input.then(|| dy.dot(&sum.weights));
    (grad, dx)
}

fn check_finite(a: &Array2<f64>, label: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: label() })
    }
}

/// Forward pass with batch statistics, keeping what backward needs.
pub fn train_forward(model: &CircuitModel, features: &[Array2<f64>]) -> Result<Tape> {
    check_dim("leaf feature count", model.leaves.len(), features.len())?;
    let mut sums = Vec::new();
    let mut regions = Vec::with_capacity(model.leaves.len());
    for (r, (leaf, phi)) in model.leaves.iter().zip(features).enumerate() {
        let (y, t) = sum_forward(&leaf.sum, phi.clone());
        check_finite(&y, || leaf_label(r))?;
        sums.push(t);
        regions.push(y);
    }
    let mut levels = vec![regions];
    for (l, block) in model.blocks.iter().enumerate() {
        let prev = levels.last().unwrap();
        let mut next = Vec::with_capacity(block.layer.n_outputs());
        for (p, (&(a, b), sum)) in block.layer.pairs.iter().zip(&block.sums).enumerate() {
            let (y, t) = sum_forward(sum, &prev[a] * &prev[b]);
            check_finite(&y, || block_label(l, p))?;
            sums.push(t);
            next.push(y);
        }
        if let Some(p) = block.layer.passthrough {
            next.push(prev[p].clone());
        }
        levels.push(next);
    }
    let root = levels.last().unwrap()[0].clone();
    let (output, t) = sum_forward(&model.head, root);
    check_finite(&output, || HEAD_LABEL.to_string())?;
    sums.push(t);
    Ok(Tape {
        sums,
        levels,
        output,
    })
}

/// Gradients of the scalar whose output cograd is `d_out`.
pub fn backward_from(model: &CircuitModel, tape: &Tape, d_out: &Array2<f64>) -> Result<Gradients> {
    let n_leaves = model.leaves.len();
    let mut grads: Vec<Option<SumGrad>> = vec![None; tape.sums.len()];
    let head_idx = tape.sums.len() - 1;
    let (g, dx) = sum_backward(&model.head, &tape.sums[head_idx], d_out, true);
    grads[head_idx] = Some(g);
    let mut cograds = vec![dx.unwrap()];
    // sum indices of each block start after the leaves
    let mut offsets = Vec::with_capacity(model.blocks.len());
    let mut next = n_leaves;
    for block in &model.blocks {
        offsets.push(next);
        next += block.sums.len();
    }
    for (l, block) in model.blocks.iter().enumerate().rev() {
        let prev = &tape.levels[l];
        let mut down: Vec<Option<Array2<f64>>> = vec![None; prev.len()];
        for (p, (&(a, b), sum)) in block.layer.pairs.iter().zip(&block.sums).enumerate() {
            let idx = offsets[l] + p;
            let (g, dp) = sum_backward(sum, &tape.sums[idx], &cograds[p], true);
            grads[idx] = Some(g);
            let dp = dp.unwrap();
            down[a] = Some(&dp * &prev[b]);
            down[b] = Some(&dp * &prev[a]);
        }
        if let Some(p) = block.layer.passthrough {
            down[p] = Some(cograds[block.layer.pairs.len()].clone());
        }
        cograds = down.into_iter().map(|d| d.expect("every region receives a cograd")).collect();
    }
    for (r, leaf) in model.leaves.iter().enumerate() {
        let (g, _) = sum_backward(&leaf.sum, &tape.sums[r], &cograds[r], false);
        grads[r] = Some(g);
    }
    let labels: Vec<String> = model.sums().map(|(l, _)| l).collect();
    let sums: Vec<SumGrad> = grads.into_iter().map(Option::unwrap).collect();
    for (g, label) in sums.iter().zip(labels) {
        let finite = g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite())
            && g.gamma.iter().chain(g.beta.iter()).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                layer: format!("gradient of {label}"),
            });
        }
    }
    Ok(Gradients { sums })
}

/// Mean squared error of the training-mode forward pass and its cograd.
pub(crate) fn mse_cograd(pred: &Array2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - &target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Training-mode MSE and its exact gradient on one batch.
pub fn backward(model: &CircuitModel, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    check_dim("target rows", x.nrows(), y.nrows())?;
    check_dim("target columns", model.d_out(), y.ncols())?;
    let features = model.leaf_features(x)?;
    let tape = train_forward(model, &features)?;
    let (loss, d_out) = mse_cograd(&tape.output, y);
    Ok((loss, backward_from(model, &tape, &d_out)?))
}

/// Blends the tape's batch statistics into the running estimates.
pub(crate) fn update_running_stats(model: &mut CircuitModel, tape: &Tape, momentum: f64) {
    for (s, t) in sums_mut(model).into_iter().zip(&tape.sums) {
        if let (Some(bn), Some(n)) = (&mut s.norm, &t.norm) {
            if !bn.has_running_stats() {
                bn.running_mean = n.mean.clone();
                bn.running_var = n.var_unbiased.clone();
                continue;
            }
            bn.running_mean = &bn.running_mean * (1.0 - momentum) + &n.mean * momentum;
            bn.running_var = &bn.running_var * (1.0 - momentum) + &n.var_unbiased * momentum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::ModelConfig;
    use crate::orthopoly::PolyFamily;
    use crate::rng::{stream_rng, PolarNormal};
    use crate::training::{init_weights, TrainConfig};
    use rand::Rng;

    fn batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        let mut normal = PolarNormal::new();
        Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng))
    }

    fn model(scope: usize, seed: u64) -> CircuitModel {
        let mut m = CircuitModel::build(
            ModelConfig::new(4, 2, scope, 2, 3, seed),
            vec![PolyFamily::standard_normal(); 4],
        )
        .unwrap();
        init_weights(&mut m, &TrainConfig::default(), seed);
        // move batch-norm affine parameters away from their trivial values
        let mut rng = stream_rng(seed, 77);
        for s in sums_mut(&mut m) {
            if let Some(n) = &mut s.norm {
                n.gamma.mapv_inplace(|_| 0.5 + rng.random::<f64>());
                n.beta.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            }
            s.bias.mapv_inplace(|_| 0.2 * (rng.random::<f64>() - 0.5));
        }
        m
    }

    #[test]
    fn zero_targets_zero_weights_give_zero_gradient() {
        let mut m = model(1, 0);
        for s in sums_mut(&mut m) {
            s.weights.fill(0.0);
            s.bias.fill(0.0);
            if let Some(n) = &mut s.norm {
                n.beta.fill(0.0);
            }
        }
        let x = batch(8, 4, 1);
        let (loss, g) = backward(&m, x.view(), Array2::zeros((8, 2)).view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (scope, seed) in [(1usize, 3u64), (2, 4)] {
            let m = model(scope, seed);
            let x = batch(12, 4, seed + 10);
            let y = batch(12, 2, seed + 20);
            let (_, g) = backward(&m, x.view(), y.view()).unwrap();
            let analytic = g.flatten();
            let base = flat_params(&m);
            let loss_at = |p: &[f64]| {
                let mut mm = m.clone();
                set_flat_params(&mut mm, p).unwrap();
                backward(&mm, x.view(), y.view()).unwrap().0
            };
            let mut rng = stream_rng(seed, 5);
            let h = 1e-4;
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let i = rng.random_range(0..base.len());
                let mut p = base.clone();
                p[i] += h;
                let up = loss_at(&p);
                p[i] -= 2.0 * h;
                let down = loss_at(&p);
                let fd = (up - down) / (2.0 * h);
                let a = analytic[i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-5, "scope {scope}: worst relative error {worst:e}");
        }
    }

    #[test]
    fn constant_term_gradient_equals_bias_gradient() {
        let mut m = CircuitModel::build(
            ModelConfig::new(3, 1, 3, 2, 4, 0),
            vec![PolyFamily::standard_normal(); 3],
        )
        .unwrap();
        init_weights(&mut m, &TrainConfig::default(), 2);
        let x = batch(10, 3, 3);
        let y = batch(10, 1, 4);
        let (_, g) = backward(&m, x.view(), y.view()).unwrap();
        let leaf = &g.sums[0];
        for n in 0..4 {
            assert!((leaf.weights[[n, 0]] - leaf.bias[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let m = model(2, 1);
        let p = flat_params(&m);
        assert_eq!(p.len(), m.n_parameters());
        let mut m2 = m.clone();
        set_flat_params(&mut m2, &p).unwrap();
        assert_eq!(m, m2);
        assert!(set_flat_params(&mut m2, &p[1..]).is_err());
    }

    #[test]
    fn train_forward_without_norm_matches_inference_forward() {
        let mut m = model(1, 6);
        for s in sums_mut(&mut m) {
            s.norm = None;
        }
        let x = batch(7, 4, 2);
        let tape = train_forward(&m, &m.leaf_features(x.view()).unwrap()).unwrap();
        assert_eq!(tape.output, m.forward(x.view()).unwrap());
    }
}
