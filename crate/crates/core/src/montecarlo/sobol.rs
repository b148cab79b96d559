//! Pick-and-freeze estimate of first-order Sobol indices for a black box.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pairwise, sample_rows, Surrogate};
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream_id, stream_rng};

const SOBOL_STREAM: u64 = 0x5342_4C4D;
const TARGET_BLOCKS: usize = 100;
const MAX_BLOCK_ROWS: usize = 8192;
const PILOT_ROWS: usize = 1000;
const BOOTSTRAP_REPLICATES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolEstimate {
    /// `[O × D]`.
    pub indices: Array2<f64>,
    /// Block-bootstrap standard errors, same shape.
    pub std_err: Array2<f64>,
    pub n_base: usize,
    /// Total function evaluations, `n_base · (D + 2)`.
    pub n_evaluations: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
struct BlockStats {
    n: usize,
    sum: Array1<f64>,
    sum_sq: Array1<f64>,
    /// `Σ (f(B) − c)(f(A_B^i) − f(A))`, `[O × D]`.
    cross: Array2<f64>,
}

impl BlockStats {
    fn merge(mut self, other: &BlockStats) -> Self {
        self.n += other.n;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
        self.cross += &other.cross;
        self
    }

    fn indices(&self) -> Array2<f64> {
        let m = 2.0 * self.n as f64;
        let mean = &self.sum / m;
        let var = (&self.sum_sq - &(&mean * &mean * m)) / (m - 1.0);
        let mut s = &self.cross / self.n as f64;
        for (mut row, v) in s.rows_mut().into_iter().zip(&var) {
            if *v > 0.0 {
                row /= *v;
            } else {
                row.fill(0.0);
            }
        }
        s
    }
}

/// First-order indices `S_i = E[(f(B) − c)(f(A_B^i) − f(A))] / Var f`
/// from `n` base rows (`n · (D + 2)` evaluations), `c` a pilot mean.
pub fn mc_sobol_on_function(s: &dyn Surrogate, n: usize, seed: u64) -> Result<SobolEstimate> {
    if n < 2 {
        return Err(Error::InvalidArgument("pick-and-freeze needs at least 2 base rows".into()));
    }
    let start = Instant::now();
    let d = s.n_inputs();
    let o = s.n_outputs();
    let free = vec![None; d];
    let mut pilot_rng = stream_rng(seed, stream_id(&[SOBOL_STREAM, u64::MAX]));
    let pilot_x = sample_rows(s.marginals(), &free, PILOT_ROWS, &mut pilot_rng);
    let pilot = s.eval_batch(pilot_x.view())?;
    check_dim("surrogate output width", o, pilot.ncols())?;
    let c = pilot.mean_axis(ndarray::Axis(0)).unwrap();

    let block_rows = n.div_ceil(TARGET_BLOCKS).clamp(1, MAX_BLOCK_ROWS);
    let n_blocks = n.div_ceil(block_rows);
    let blocks = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let rows = block_rows.min(n - b * block_rows);
            let mut rng = stream_rng(seed, stream_id(&[SOBOL_STREAM, b as u64]));
            let a = sample_rows(s.marginals(), &free, rows, &mut rng);
            let bm = sample_rows(s.marginals(), &free, rows, &mut rng);
            let fa = s.eval_batch(a.view())? - &c;
            let fb = s.eval_batch(bm.view())? - &c;
            let mut cross = Array2::zeros((o, d));
            let mut mixed = a.clone();
            for i in 0..d {
                mixed.column_mut(i).assign(&bm.column(i));
                let diff = s.eval_batch(mixed.view())? - &c - &fa;
                mixed.column_mut(i).assign(&a.column(i));
                for k in 0..o {
                    cross[[k, i]] = fb.column(k).dot(&diff.column(k));
                }
            }
            Ok(BlockStats {
                n: rows,
                sum: fa.sum_axis(ndarray::Axis(0)) + fb.sum_axis(ndarray::Axis(0)),
                sum_sq: (&fa * &fa).sum_axis(ndarray::Axis(0)) + (&fb * &fb).sum_axis(ndarray::Axis(0)),
                cross,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = pairwise(blocks.clone(), |a, b| a.merge(&b)).expect("at least one block");
    let indices = total.indices();

    let mut std_err = Array2::zeros((o, d));
    if blocks.len() > 1 {
        let mut rng = stream_rng(seed, stream_id(&[SOBOL_STREAM, u64::MAX - 1]));
        let mut sum = Array2::<f64>::zeros((o, d));
        let mut sum_sq = Array2::<f64>::zeros((o, d));
        for _ in 0..BOOTSTRAP_REPLICATES {
            let mut acc = blocks[rng.random_range(0..blocks.len())].clone();
            for _ in 1..blocks.len() {
                acc = acc.merge(&blocks[rng.random_range(0..blocks.len())]);
            }
            let si = acc.indices();
            sum += &si;
            sum_sq += &(&si * &si);
        }
        let r = BOOTSTRAP_REPLICATES as f64;
        let mean = &sum / r;
        std_err = ((&sum_sq - &(&mean * &mean * r)) / (r - 1.0)).mapv(|v| v.max(0.0).sqrt());
    }
    Ok(SobolEstimate {
        indices,
        std_err,
        n_base: n,
        n_evaluations: n * (d + 2),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
