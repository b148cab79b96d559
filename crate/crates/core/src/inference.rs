//! Closed-form statistical queries on a circuit by moment propagation.
//!
//! Every region carries the mean vector `e` and second-moment matrix `M` of
//! its node values. Leaves get them straight from their PCE weights
//! (orthonormality turns expectations into weight sums); products of
//! independent children multiply them elementwise; affine sums map them by
//! congruence. The different queries differ only in how the leaf states are
//! set up.

use std::collections::BTreeMap;
use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::circuit::{block_label, leaf_label, CircuitModel, Leaf, HEAD_LABEL};
use crate::error::{check_dim, Error, Result};
use crate::shallow::SobolIndices;

/// Values `x_𝓘` of the conditioned variables (0-based indices).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionSpec {
    fixed: BTreeMap<usize, f64>,
}

impl ConditionSpec {
    pub fn new(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut fixed = BTreeMap::new();
        for (i, v) in pairs {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "conditioning value for variable {i} is not finite"
                )));
            }
            if fixed.insert(i, v).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "variable {i} conditioned twice"
                )));
            }
        }
        Ok(Self { fixed })
    }

    /// Conditions every variable on the given point.
    pub fn full(x: &[f64]) -> Result<Self> {
        Self::new(x.iter().copied().enumerate())
    }

    pub fn fixed(&self) -> &BTreeMap<usize, f64> {
        &self.fixed
    }

    pub fn indices(&self) -> Vec<usize> {
        self.fixed.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self.fixed.keys().find(|&&i| i >= d) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "variable index {i} out of range for {d} inputs"
            ))),
            None => Ok(()),
        }
    }
}

/// Mean and second moment of one region's node values.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMoments {
    pub mean: Array1<f64>,
    pub second: Array2<f64>,
}

impl RegionMoments {
    pub fn covariance(&self) -> Array2<f64> {
        covariance_from(&self.mean, &self.second)
    }
}

/// Moments of every leaf region.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub regions: Vec<RegionMoments>,
}

fn covariance_from(mean: &Array1<f64>, second: &Array2<f64>) -> Array2<f64> {
    let n = mean.len();
    let mut cov = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            let s = 0.5 * (second[[a, b]] + second[[b, a]]);
            cov[[a, b]] = s - mean[a] * mean[b];
        }
    }
    cov
}

fn outer_sum(columns: impl Iterator<Item = Array1<f64>>, width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((width, width));
    for c in columns {
        let col = c.view().insert_axis(ndarray::Axis(1));
        m += &col.dot(&col.t());
    }
    m
}

/// Affine map with batch norm already absorbed.
#[derive(Debug, Clone)]
struct Affine {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Affine {
    fn map(&self, s: RegionMoments) -> RegionMoments {
        let we = self.weights.dot(&s.mean);
        let mean = &we + &self.bias;
        let b = self.bias.view().insert_axis(ndarray::Axis(1));
        let we_col = we.view().insert_axis(ndarray::Axis(1));
        let cross = b.dot(&we_col.t());
        let second = self.weights.dot(&s.second).dot(&self.weights.t())
            + &cross
            + cross.t()
            + b.dot(&b.t());
        RegionMoments { mean, second }
    }
}

/// Exact inference engine bound to one model.
#[derive(Debug, Clone)]
pub struct ExactInference<'a> {
    model: &'a CircuitModel,
    /// Leaf PCE weights with bias (and batch norm) in the constant column.
    leaf_weights: Vec<Array2<f64>>,
    blocks: Vec<Vec<Affine>>,
    head: Affine,
}

impl<'a> ExactInference<'a> {
    /// Requires a model whose batch norms are folded into the weights.
    pub fn new(model: &'a CircuitModel) -> Result<Self> {
        if !model.is_folded() {
            return Err(Error::NotFolded);
        }
        Self::new_unfolded(model)
    }

    /// Accepts batch-normalized models by treating each normalization as
    /// the inference-time affine map given by its running statistics.
    pub fn new_unfolded(model: &'a CircuitModel) -> Result<Self> {
        model.audit()?;
        let leaf_weights = model
            .leaves
            .iter()
            .enumerate()
            .map(|(r, leaf)| {
                let (mut w, b) = leaf.sum.effective(&leaf_label(r))?;
                let mut c0 = w.column_mut(0);
                c0 += &b;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = model
            .blocks
            .iter()
            .enumerate()
            .map(|(l, block)| {
                block
                    .sums
                    .iter()
                    .enumerate()
                    .map(|(p, s)| {
                        let (weights, bias) = s.effective(&block_label(l, p))?;
                        Ok(Affine { weights, bias })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (weights, bias) = model.head.effective(HEAD_LABEL)?;
        Ok(Self {
            model,
            leaf_weights,
            blocks,
            head: Affine { weights, bias },
        })
    }

    pub fn model(&self) -> &CircuitModel {
        self.model
    }

    fn flags(&self, set: &[usize]) -> Result<Vec<bool>> {
        let d = self.model.d_in();
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

    /// Leaf moments in one of three modes: plain (both `None`), conditioned
    /// on `spec`, or restricted to terms supported on `restrict`.
    pub fn input_moments(
        &self,
        spec: Option<&ConditionSpec>,
        restrict: Option<&[usize]>,
    ) -> Result<MomentState> {
        let regions = match (spec, restrict) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument(
                    "conditioning and restriction are separate query modes".into(),
                ))
            }
            (Some(spec), None) => {
                spec.validate(self.model.d_in())?;
                self.model
                    .leaves
                    .iter()
                    .zip(&self.leaf_weights)
                    .map(|(leaf, w)| conditioned_leaf(leaf, w, spec))
                    .collect::<Result<Vec<_>>>()?
            }
            (None, Some(set)) => {
                let keep = self.flags(set)?;
                self.model
                    .leaves
                    .iter()
                    .zip(&self.leaf_weights)
                    .map(|(leaf, w)| {
                        let local: Vec<bool> = leaf.scope.iter().map(|&v| keep[v]).collect();
                        let mask = leaf.basis.supported_on(&local);
                        plain_leaf(w, Some(&mask))
                    })
                    .collect()
            }
            (None, None) => self.leaf_weights.iter().map(|w| plain_leaf(w, None)).collect(),
        };
        Ok(MomentState { regions })
    }

    /// Runs the merge plan and the output head on leaf moments.
    pub fn propagate_moments(&self, state: MomentState) -> Result<RegionMoments> {
        check_dim("leaf moment regions", self.leaf_weights.len(), state.regions.len())?;
        for (r, w) in state.regions.iter().zip(&self.leaf_weights) {
            check_dim("leaf moment width", w.nrows(), r.mean.len())?;
            check_dim("leaf second-moment width", w.nrows(), r.second.nrows())?;
        }
        let mut regions: Vec<Option<RegionMoments>> = state.regions.into_iter().map(Some).collect();
        for (block, sums) in self.model.blocks.iter().zip(&self.blocks) {
            let mut next = Vec::with_capacity(block.layer.n_outputs());
            for (&(a, b), sum) in block.layer.pairs.iter().zip(sums) {
                let u = regions[a].take().expect("region used once");
                let v = regions[b].take().expect("region used once");
                let product = RegionMoments {
                    mean: &u.mean * &v.mean,
                    second: &u.second * &v.second,
                };
                next.push(Some(sum.map(product)));
            }
            if let Some(p) = block.layer.passthrough {
                next.push(regions[p].take());
            }
            regions = next;
        }
        let root = regions.pop().flatten().expect("root region");
        Ok(self.head.map(root))
    }

    fn run(&self, spec: Option<&ConditionSpec>, restrict: Option<&[usize]>) -> Result<RegionMoments> {
        self.propagate_moments(self.input_moments(spec, restrict)?)
    }

    /// Output moments under plain leaf states.
    pub fn moments(&self) -> Result<RegionMoments> {
        self.run(None, None)
    }

    pub fn mean(&self) -> Result<Array1<f64>> {
        Ok(self.moments()?.mean)
    }

    pub fn covariance(&self) -> Result<Array2<f64>> {
        Ok(self.moments()?.covariance())
    }

    /// `E[f | x_𝓘]`.
    pub fn conditional_mean(&self, spec: &ConditionSpec) -> Result<Array1<f64>> {
        Ok(self.run(Some(spec), None)?.mean)
    }

    /// `cov(f, f | x_𝓘)`.
    pub fn conditional_covariance(&self, spec: &ConditionSpec) -> Result<Array2<f64>> {
        Ok(self.run(Some(spec), None)?.covariance())
    }

    /// `cov(E[f | X_𝓘], E[f | X_𝓘])`.
    pub fn covariance_of_conditional_expectation(&self, set: &[usize]) -> Result<Array2<f64>> {
        Ok(self.run(None, Some(set))?.covariance())
    }

    /// `E[cov(f, f | X_𝓘)] = cov(f, f) − cov(E[f | X_𝓘], E[f | X_𝓘])`.
    pub fn expected_conditional_covariance(&self, set: &[usize]) -> Result<Array2<f64>> {
        Ok(self.covariance()? - self.covariance_of_conditional_expectation(set)?)
    }

    /// First-order Sobol indices `[O × D]`. Outputs whose variance is zero
    /// up to rounding are flagged and reported as zero rows.
    pub fn sobol_first_order(&self) -> Result<SobolIndices> {
        let total = self.moments()?;
        let d = self.model.d_in();
        let o = self.model.d_out();
        let columns = (0..d)
            .into_par_iter()
            .map(|i| {
                let c = self.covariance_of_conditional_expectation(&[i])?;
                Ok(c.diag().to_owned())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut partial = Array2::zeros((o, d));
        for (i, col) in columns.iter().enumerate() {
            partial.column_mut(i).assign(col);
        }
        let variance: Array1<f64> = (0..o)
            .map(|k| {
                let v = total.second[[k, k]] - total.mean[k] * total.mean[k];
                // cancellation noise in M − e² would otherwise yield huge ratios
                if v <= 1e-13 * total.second[[k, k]].abs() {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        Ok(SobolIndices::from_variances(partial, &variance))
    }
}

fn plain_leaf(w: &Array2<f64>, mask: Option<&[bool]>) -> RegionMoments {
    let mean = w.column(0).to_owned();
    let mut kept = w.clone();
    if let Some(mask) = mask {
        for (j, &m) in mask.iter().enumerate() {
            if !m {
                kept.column_mut(j).fill(0.0);
            }
        }
    }
    RegionMoments {
        mean,
        second: kept.dot(&kept.t()),
    }
}

/// Groups leaf terms by their multi-index on the free variables, after
/// evaluating the fixed ones; distinct groups are orthonormal.
fn conditioned_leaf(leaf: &Leaf, w: &Array2<f64>, spec: &ConditionSpec) -> Result<RegionMoments> {
    let fixed = spec.fixed();
    let local: Vec<Option<f64>> = leaf.scope.iter().map(|v| fixed.get(v).copied()).collect();
    if local.iter().all(Option::is_none) {
        return Ok(plain_leaf(w, None));
    }
    let max_deg = leaf.basis.max_degree_per_dim();
    let tables = local
        .iter()
        .zip(&leaf.families)
        .zip(&max_deg)
        .map(|((value, fam), &deg)| value.map(|x| fam.eval_basis(deg, x)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let width = w.nrows();
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut groups: HashMap<Vec<usize>, Array1<f64>> = HashMap::new();
    for (j, alpha) in leaf.basis.iter().enumerate() {
        let mut factor = 1.0;
        let mut key = Vec::with_capacity(alpha.0.len());
        for (k, &a) in alpha.0.iter().enumerate() {
            match &tables[k] {
                Some(t) => factor *= t[a],
                None => key.push(a),
            }
        }
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Array1::zeros(width)
        });
        entry.scaled_add(factor, &w.column(j));
    }
    let zero_key = order[0].clone();
    debug_assert!(zero_key.iter().all(|&a| a == 0));
    let mean = groups[&zero_key].clone();
    let second = outer_sum(order.iter().map(|k| groups[k].clone()), width);
    Ok(RegionMoments { mean, second })
}
