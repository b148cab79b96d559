//! Classical single-level polynomial chaos expansion.
//!
//! A [`ShallowPce`] holds one weight row per output over a single
//! multi-index set. Its moments and Sobol indices follow directly from the
//! orthonormality of the basis, which makes it both a baseline surrogate and
//! the ground truth for the single-region case of the deep model.

use std::collections::HashMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::basis::MultiIndexSet;
use crate::error::{check_dim, Error, Result};
use crate::inference::ConditionSpec;
use crate::orthopoly::PolyFamily;

/// Default bound on `N × |𝒜|` for the least-squares design matrix.
pub const DEFAULT_DESIGN_CAP: u128 = 100_000_000;

const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowPce {
    pub basis: MultiIndexSet,
    pub families: Vec<PolyFamily>,
    /// `[n_outputs × |𝒜|]`; column 0 belongs to the all-zeros index.
    pub weights: Array2<f64>,
}

/// First-order Sobol indices, one row per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolIndices {
    /// `[n_outputs × n_inputs]`.
    pub indices: Array2<f64>,
    /// Outputs whose variance is zero; their rows are reported as zeros.
    pub zero_variance: Vec<bool>,
}

impl SobolIndices {
    pub(crate) fn from_variances(partial: Array2<f64>, total: &Array1<f64>) -> Self {
        let mut indices = partial;
        let mut zero_variance = vec![false; total.len()];
        for (o, mut row) in indices.rows_mut().into_iter().enumerate() {
            if total[o] > 0.0 {
                row.mapv_inplace(|v| v / total[o]);
            } else {
                zero_variance[o] = true;
                row.fill(0.0);
            }
        }
        Self {
            indices,
            zero_variance,
        }
    }

    /// Rows rescaled to sum to one (plot-style normalization).
    pub fn normalized_by_sum(&self) -> Array2<f64> {
        let mut out = self.indices.clone();
        for mut row in out.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        out
    }
}

impl ShallowPce {
    pub fn new(basis: MultiIndexSet, families: Vec<PolyFamily>, weights: Array2<f64>) -> Result<Self> {
        check_dim("shallow families", basis.scope_dim(), families.len())?;
        check_dim("shallow weight columns", basis.len(), weights.ncols())?;
        if weights.nrows() == 0 {
            return Err(Error::InvalidArgument("at least one output is required".into()));
        }
        Ok(Self {
            basis,
            families,
            weights,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.basis.scope_dim()
    }

    pub fn n_outputs(&self) -> usize {
        self.weights.nrows()
    }

    /// Penalized least squares, `min ‖y − Φw‖² + ridge ‖w‖²` per output,
    /// solved through a Householder QR of the (augmented) design matrix.
    pub fn fit_least_squares(
        basis: MultiIndexSet,
        families: Vec<PolyFamily>,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        ridge: f64,
    ) -> Result<Self> {
        Self::fit_least_squares_with_cap(basis, families, inputs, targets, ridge, DEFAULT_DESIGN_CAP)
    }

    pub fn fit_least_squares_with_cap(
        basis: MultiIndexSet,
        families: Vec<PolyFamily>,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        ridge: f64,
        design_cap: u128,
    ) -> Result<Self> {
        let n = inputs.nrows();
        let p = basis.len();
        let o = targets.ncols();
        check_dim("fit families", basis.scope_dim(), families.len())?;
        check_dim("fit input columns", basis.scope_dim(), inputs.ncols())?;
        check_dim("fit target rows", n, targets.nrows())?;
        if n == 0 || o == 0 {
            return Err(Error::InvalidArgument("fit needs at least one sample and output".into()));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidArgument(format!("ridge must be ≥ 0, got {ridge}")));
        }
        let entries = n as u128 * p as u128;
        if entries > design_cap {
            return Err(Error::TooLarge {
                size: entries,
                cap: design_cap,
            });
        }
        if ridge == 0.0 && n < p {
            return Err(Error::RankDeficient { rows: n, cols: p });
        }

        let design = basis.design_matrix(&families, inputs)?;
        let extra = if ridge > 0.0 { p } else { 0 };
        let rows = n + extra;
        let mut a = DMatrix::<f64>::zeros(rows, p);
        let mut b = DMatrix::<f64>::zeros(rows, o);
        for i in 0..n {
            for j in 0..p {
                a[(i, j)] = design[[i, j]];
            }
            for k in 0..o {
                b[(i, k)] = targets[[i, k]];
            }
        }
        let root = ridge.sqrt();
        for j in 0..extra {
            a[(n + j, j)] = root;
        }

        let qr = a.qr();
        let r = qr.r();
        let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if (0..p).any(|i| r[(i, i)].abs() <= RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient { rows: n, cols: p });
        }
        qr.q_tr_mul(&mut b);
        let rhs = b.rows(0, p).into_owned();
        let solution = r
            .solve_upper_triangular(&rhs)
            .ok_or(Error::RankDeficient { rows: n, cols: p })?;

        let mut weights = Array2::zeros((o, p));
        for k in 0..o {
            for j in 0..p {
                weights[[k, j]] = solution[(j, k)];
            }
        }
        Self::new(basis, families, weights)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Array1<f64>> {
        let phi = Array1::from(self.basis.eval(&self.families, x)?);
        Ok(self.weights.dot(&phi))
    }

    /// Predictions for a batch `[rows × D]`, returned as `[rows × O]`.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let design = self.basis.design_matrix(&self.families, x)?;
        Ok(design.dot(&self.weights.t()))
    }

    /// `E[f(X)] = w_{α_0}`.
    pub fn mean(&self) -> Array1<f64> {
        self.weights.column(0).to_owned()
    }

    /// `Σ_{α ≠ α_0} w_α²` per output.
    pub fn variance(&self) -> Array1<f64> {
        self.weights
            .rows()
            .into_iter()
            .map(|row| row.iter().skip(1).map(|w| w * w).sum())
            .collect()
    }

    /// Output covariance `Σ_{α ≠ α_0} w_{o,α} w_{o',α}`.
    pub fn covariance(&self) -> Array2<f64> {
        let tail = self.weights.slice(ndarray::s![.., 1..]);
        tail.dot(&tail.t())
    }

    /// Covariance of `E[f | X_𝓘]` over `X_𝓘`: the squared weights of the
    /// non-constant terms supported on `𝓘`.
    pub fn covariance_of_conditional_expectation(&self, set: &[usize]) -> Result<Array2<f64>> {
        let keep = self.flags(set)?;
        let mask = self.basis.supported_on(&keep);
        let o = self.n_outputs();
        let mut out = Array2::zeros((o, o));
        for (j, &m) in mask.iter().enumerate().skip(1) {
            if !m {
                continue;
            }
            let col = self.weights.column(j);
            for a in 0..o {
                for b in 0..o {
                    out[[a, b]] += col[a] * col[b];
                }
            }
        }
        Ok(out)
    }

    /// First-order Sobol indices `S_i = Var(E[f | X_i]) / Var(f)`.
    pub fn sobol_first_order(&self) -> SobolIndices {
        let d = self.n_inputs();
        let o = self.n_outputs();
        let mut partial = Array2::zeros((o, d));
        for (j, alpha) in self.basis.iter().enumerate().skip(1) {
            let active: Vec<usize> = (0..d).filter(|&k| alpha.0[k] > 0).collect();
            if active.len() != 1 {
                continue;
            }
            for k in 0..o {
                partial[[k, active[0]]] += self.weights[[k, j]].powi(2);
            }
        }
        SobolIndices::from_variances(partial, &self.variance())
    }

    /// Weights regrouped by the multi-index restricted to the free
    /// variables, after evaluating the fixed variables at their values.
    fn collapse(&self, spec: &ConditionSpec) -> Result<Vec<(bool, Array1<f64>)>> {
        let d = self.n_inputs();
        spec.validate(d)?;
        let mut tables: Vec<Option<Vec<f64>>> = vec![None; d];
        let max_deg = self.basis.max_degree_per_dim();
        for (&var, &value) in spec.fixed() {
            tables[var] = Some(self.families[var].eval_basis(max_deg[var], value)?);
        }
        let mut groups: HashMap<Vec<usize>, Array1<f64>> = HashMap::new();
        let mut order: Vec<Vec<usize>> = Vec::new();
        for (j, alpha) in self.basis.iter().enumerate() {
            let mut factor = 1.0;
            let mut key = Vec::with_capacity(d);
            for (k, &deg) in alpha.0.iter().enumerate() {
                match &tables[k] {
                    Some(t) => factor *= t[deg],
                    None => key.push(deg),
                }
            }
            let entry = groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                Array1::zeros(self.n_outputs())
            });
            entry.scaled_add(factor, &self.weights.column(j));
        }
        Ok(order
            .into_iter()
            .map(|key| {
                let zero = key.iter().all(|&v| v == 0);
                let c = groups.remove(&key).unwrap();
                (zero, c)
            })
            .collect())
    }

    /// `E[f | x_𝓘]`.
    pub fn conditional_mean(&self, spec: &ConditionSpec) -> Result<Array1<f64>> {
        let groups = self.collapse(spec)?;
        Ok(groups
            .into_iter()
            .find(|(zero, _)| *zero)
            .map(|(_, c)| c)
            .unwrap_or_else(|| Array1::zeros(self.n_outputs())))
    }

    /// `cov(f, f | x_𝓘)`.
    pub fn conditional_covariance(&self, spec: &ConditionSpec) -> Result<Array2<f64>> {
        let o = self.n_outputs();
        let mut out = Array2::zeros((o, o));
        for (zero, c) in self.collapse(spec)? {
            if zero {
                continue;
            }
            for a in 0..o {
                for b in 0..o {
                    out[[a, b]] += c[a] * c[b];
                }
            }
        }
        Ok(out)
    }

    fn flags(&self, set: &[usize]) -> Result<Vec<bool>> {
        let d = self.n_inputs();
        let mut keep = vec![false; d];
        for &i in set {
            if i >= d {
                return Err(Error::InvalidArgument(format!(
                    "variable index {i} out of range for {d} inputs"
                )));
            }
            keep[i] = true;
        }
        Ok(keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::MultiIndex;
    use crate::rng::{stream_rng, PolarNormal};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn hermite(d: usize) -> Vec<PolyFamily> {
        vec![PolyFamily::standard_normal(); d]
    }

    fn sample_normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        let mut normal = PolarNormal::new();
        Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng))
    }

    fn random_model(d: usize, k: usize, o: usize, seed: u64) -> ShallowPce {
        let basis = MultiIndexSet::generate(d, k, 1.0).unwrap();
        let mut rng = stream_rng(seed, 1);
        let w = Array2::from_shape_fn((o, basis.len()), |_| rng.random::<f64>() * 2.0 - 1.0);
        ShallowPce::new(basis, hermite(d), w).unwrap()
    }

    #[test]
    fn plant_and_recover() {
        let planted = random_model(3, 3, 2, 11);
        let n = 2 * planted.basis.len();
        let x = sample_normal(n, 3, 12);
        let y = planted.predict_batch(x.view()).unwrap();
        let fitted = ShallowPce::fit_least_squares(
            planted.basis.clone(),
            hermite(3),
            x.view(),
            y.view(),
            0.0,
        )
        .unwrap();
        for (a, b) in fitted.weights.iter().zip(planted.weights.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn constant_targets_fit_constant_term() {
        let basis = MultiIndexSet::generate(2, 2, 1.0).unwrap();
        let x = sample_normal(40, 2, 3);
        let y = Array2::from_elem((40, 1), 1.75);
        let fitted = ShallowPce::fit_least_squares(basis, hermite(2), x.view(), y.view(), 0.0).unwrap();
        assert_abs_diff_eq!(fitted.weights[[0, 0]], 1.75, epsilon = 1e-10);
        for w in fitted.weights.iter().skip(1) {
            assert_abs_diff_eq!(*w, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_errors() {
        let basis = MultiIndexSet::generate(2, 3, 1.0).unwrap();
        let x = sample_normal(5, 2, 3);
        let y = Array2::zeros((5, 1));
        let err = ShallowPce::fit_least_squares(basis.clone(), hermite(2), x.view(), y.view(), 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rows: 5, cols: 10 }));
        // ridge makes the underdetermined problem solvable
        assert!(ShallowPce::fit_least_squares(basis, hermite(2), x.view(), y.view(), 1e-3).is_ok());

        let big = MultiIndexSet::generate(100, 3, 1.0).unwrap();
        assert_eq!(big.len(), 176_851);
        let x = Array2::from_elem((1000, 100), 0.0);
        let y = Array2::zeros((1000, 1));
        let err = ShallowPce::fit_least_squares(big, hermite(100), x.view(), y.view(), 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }

    #[test]
    fn ridge_shrinks_towards_zero() {
        let planted = random_model(2, 2, 1, 5);
        let x = sample_normal(30, 2, 6);
        let y = planted.predict_batch(x.view()).unwrap();
        let plain = ShallowPce::fit_least_squares(planted.basis.clone(), hermite(2), x.view(), y.view(), 0.0).unwrap();
        let ridged = ShallowPce::fit_least_squares(planted.basis.clone(), hermite(2), x.view(), y.view(), 10.0).unwrap();
        let norm = |m: &ShallowPce| m.weights.iter().map(|w| w * w).sum::<f64>();
        assert!(norm(&ridged) < norm(&plain));
    }

    #[test]
    fn predict_examples() {
        let basis = MultiIndexSet::generate(1, 3, 1.0).unwrap();
        let m = ShallowPce::new(basis.clone(), hermite(1), array![[2.5, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m.predict(&[-4.2]).unwrap()[0], 2.5);
        let m = ShallowPce::new(basis, hermite(1), array![[0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(m.predict(&[2.0]).unwrap()[0], 2.0, epsilon = 1e-14);
        assert!(m.predict(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn predict_batch_matches_pointwise() {
        let m = random_model(3, 2, 2, 9);
        let x = sample_normal(100, 3, 10);
        let batch = m.predict_batch(x.view()).unwrap();
        for (r, row) in x.rows().into_iter().enumerate() {
            let p = m.predict(row.as_slice().unwrap()).unwrap();
            for k in 0..2 {
                assert_abs_diff_eq!(batch[[r, k]], p[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_moments() {
        let basis = MultiIndexSet::generate(2, 1, 1.0).unwrap();
        let m = ShallowPce::new(basis.clone(), hermite(2), array![[2.5, 1.0, -2.0]]).unwrap();
        assert_eq!(m.mean()[0], 2.5);
        assert_abs_diff_eq!(m.variance()[0], 5.0, epsilon = 1e-15);
        let zero = ShallowPce::new(basis.clone(), hermite(2), Array2::zeros((1, 3))).unwrap();
        assert_eq!(zero.mean()[0], 0.0);
        assert_eq!(zero.variance()[0], 0.0);
        let s = zero.sobol_first_order();
        assert!(s.zero_variance[0]);
        assert_eq!(s.indices.row(0).sum(), 0.0);
    }

    #[test]
    fn sobol_examples() {
        let basis = MultiIndexSet::generate(2, 2, 1.0).unwrap();
        let i10 = basis.position(&MultiIndex(vec![1, 0])).unwrap();
        let i01 = basis.position(&MultiIndex(vec![0, 1])).unwrap();
        let i11 = basis.position(&MultiIndex(vec![1, 1])).unwrap();

        let mut w = Array2::zeros((1, basis.len()));
        w[[0, i10]] = 1.0;
        w[[0, i01]] = 2.0;
        let m = ShallowPce::new(basis.clone(), hermite(2), w).unwrap();
        let s = m.sobol_first_order();
        assert_abs_diff_eq!(s.indices[[0, 0]], 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(s.indices[[0, 1]], 0.8, epsilon = 1e-14);

        let mut w = Array2::zeros((1, basis.len()));
        w[[0, i10]] = 0.7;
        w[[0, basis.position(&MultiIndex(vec![2, 0])).unwrap()]] = -0.3;
        let s = ShallowPce::new(basis.clone(), hermite(2), w).unwrap().sobol_first_order();
        assert_abs_diff_eq!(s.indices[[0, 0]], 1.0, epsilon = 1e-14);
        assert_eq!(s.indices[[0, 1]], 0.0);

        let mut w = Array2::zeros((1, basis.len()));
        w[[0, i11]] = 1.3;
        let s = ShallowPce::new(basis, hermite(2), w).unwrap().sobol_first_order();
        assert_eq!(s.indices.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn interaction_only_model_has_flat_conditional_expectation() {
        // Monte Carlo check that Var(E[Y | X_1]) ≈ 0 for f = φ_1(x_1) φ_1(x_2)
        let mut rng = stream_rng(21, 0);
        let mut normal = PolarNormal::new();
        let outer = 400;
        let inner = 400;
        let mut means = Vec::with_capacity(outer);
        for _ in 0..outer {
            let x1 = normal.sample(&mut rng);
            let m: f64 = (0..inner).map(|_| x1 * normal.sample(&mut rng)).sum::<f64>() / inner as f64;
            means.push(m);
        }
        let mu = means.iter().sum::<f64>() / outer as f64;
        let v = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (outer - 1) as f64;
        // pure inner-sampling noise: E[x1²]/inner
        let noise = 1.0 / inner as f64;
        assert!((v - noise).abs() < 5.0 * noise * (2.0 / outer as f64).sqrt() + 1e-3);
    }

    #[test]
    fn conditional_moments_limits() {
        let m = random_model(3, 3, 2, 41);
        let full = ConditionSpec::new([(0, 0.3), (1, -1.1), (2, 0.5)]).unwrap();
        let cm = m.conditional_mean(&full).unwrap();
        let p = m.predict(&[0.3, -1.1, 0.5]).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(cm[k], p[k], epsilon = 1e-12);
        }
        assert!(m.conditional_covariance(&full).unwrap().iter().all(|v| v.abs() < 1e-12));

        let empty = ConditionSpec::default();
        assert_eq!(m.conditional_mean(&empty).unwrap(), m.mean());
        let cov = m.conditional_covariance(&empty).unwrap();
        for (a, b) in cov.iter().zip(m.covariance().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn moments_match_quadrature() {
        let m = random_model(3, 2, 1, 77);
        let rules: Vec<_> = m.families.iter().map(|f| f.quadrature(4).unwrap()).collect();
        let mut mean = 0.0;
        let mut second = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let w = rules[0].weights[a] * rules[1].weights[b] * rules[2].weights[c];
                    let y = m
                        .predict(&[rules[0].nodes[a], rules[1].nodes[b], rules[2].nodes[c]])
                        .unwrap()[0];
                    mean += w * y;
                    second += w * y * y;
                }
            }
        }
        assert_abs_diff_eq!(mean, m.mean()[0], epsilon = 1e-10);
        assert_abs_diff_eq!(second - mean * mean, m.variance()[0], epsilon = 1e-9);
    }

    #[test]
    fn residual_non_increasing_in_basis_size() {
        let x = sample_normal(200, 2, 8);
        let y = x.map_axis(ndarray::Axis(1), |r| (r[0]).sin() * r[1].cos()).insert_axis(ndarray::Axis(1));
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let basis = MultiIndexSet::generate(2, k, 1.0).unwrap();
            let fit = ShallowPce::fit_least_squares(basis, hermite(2), x.view(), y.view(), 0.0).unwrap();
            let pred = fit.predict_batch(x.view()).unwrap();
            let rss: f64 = (&pred - &y).iter().map(|v| v * v).sum();
            assert!(rss <= last + 1e-9);
            last = rss;
        }
    }

    proptest::proptest! {
        #[test]
        fn sobol_sums_at_most_one(seed in 0u64..1000) {
            let m = random_model(3, 3, 2, seed);
            let s = m.sobol_first_order();
            for row in s.indices.rows() {
                proptest::prop_assert!(row.sum() <= 1.0 + 1e-9);
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            proptest::prop_assert!(m.variance().iter().all(|&v| v >= 0.0));
        }
    }
}
