//! Multi-index sets and tensor-product basis evaluation.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::orthopoly::{PolyFamily, MAX_DEGREE};

/// Default upper bound on the number of terms in a generated set.
pub const DEFAULT_SET_CAP: u128 = 1_000_000;

const Q_NORM_SLACK: f64 = 1e-12;

/// Per-variable polynomial degrees of one tensor-product basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn degrees(&self) -> &[usize] {
        &self.0
    }

    pub fn total_degree(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }

    /// `(Σ α_d^q)^{1/q}`.
    pub fn q_norm(&self, q: f64) -> f64 {
        self.0
            .iter()
            .filter(|&&a| a > 0)
            .map(|&a| (a as f64).powf(q))
            .sum::<f64>()
            .powf(1.0 / q)
    }
}

/// Truncated set of multi-indices. The all-zeros index is always first;
/// the rest follow in graded order (by total degree, then descending
/// lexicographic within a degree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    scope_dim: usize,
    max_order: usize,
    q_norm: f64,
    indices: Vec<MultiIndex>,
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

impl MultiIndexSet {
    /// All `α` with `‖α‖_q ≤ K`, using the default size cap.
    pub fn generate(scope_dim: usize, max_order: usize, q_norm: f64) -> Result<Self> {
        Self::generate_with_cap(scope_dim, max_order, q_norm, DEFAULT_SET_CAP)
    }

    pub fn generate_with_cap(
        scope_dim: usize,
        max_order: usize,
        q_norm: f64,
        cap: u128,
    ) -> Result<Self> {
        if scope_dim == 0 {
            return Err(Error::InvalidArgument("scope dimension must be ≥ 1".into()));
        }
        if !(q_norm > 0.0 && q_norm <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "q-norm must lie in (0, 1], got {q_norm}"
            )));
        }
        if max_order > MAX_DEGREE {
            return Err(Error::UnsupportedDegree {
                degree: max_order,
                max: MAX_DEGREE,
            });
        }
        let total_order = binomial((max_order + scope_dim) as u128, scope_dim as u128);
        if q_norm == 1.0 && total_order > cap {
            return Err(Error::TooLarge {
                size: total_order,
                cap,
            });
        }

        let budget = (max_order as f64).powf(q_norm) * (1.0 + Q_NORM_SLACK) + Q_NORM_SLACK;
        let mut indices = Vec::new();
        let mut current = vec![0usize; scope_dim];
        for degree in 0..=max_order {
            compositions(
                &mut current,
                0,
                degree,
                0.0,
                q_norm,
                budget,
                &mut indices,
                cap,
            )?;
        }
        Ok(Self {
            scope_dim,
            max_order,
            q_norm,
            indices,
        })
    }

    /// Builds a set from explicit indices (validated; zero index forced first).
    pub fn from_indices(scope_dim: usize, indices: Vec<MultiIndex>) -> Result<Self> {
        if scope_dim == 0 || indices.is_empty() || !indices[0].is_zero() {
            return Err(Error::InvalidArgument(
                "index list must start with the all-zeros multi-index".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        let mut max_order = 0;
        for a in &indices {
            check_dim("multi-index length", scope_dim, a.0.len())?;
            if a.0.iter().any(|&d| d > MAX_DEGREE) {
                return Err(Error::UnsupportedDegree {
                    degree: *a.0.iter().max().unwrap(),
                    max: MAX_DEGREE,
                });
            }
            if !seen.insert(a.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate multi-index {:?}", a.0)));
            }
            max_order = max_order.max(a.total_degree());
        }
        Ok(Self {
            scope_dim,
            max_order,
            q_norm: 1.0,
            indices,
        })
    }

    pub fn scope_dim(&self) -> usize {
        self.scope_dim
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn q_norm(&self) -> f64 {
        self.q_norm
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.indices.iter()
    }

    pub fn position(&self, alpha: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|a| a == alpha)
    }

    /// Largest degree used for each variable.
    pub fn max_degree_per_dim(&self) -> Vec<usize> {
        let mut out = vec![0; self.scope_dim];
        for a in &self.indices {
            for (m, &d) in out.iter_mut().zip(&a.0) {
                *m = (*m).max(d);
            }
        }
        out
    }

    /// Marks indices whose nonzero degrees all fall on variables flagged in
    /// `keep` (the set `𝒜_𝓘` when `keep` flags `𝓘`).
    pub fn supported_on(&self, keep: &[bool]) -> Vec<bool> {
        self.indices
            .iter()
            .map(|a| a.0.iter().zip(keep).all(|(&d, &k)| k || d == 0))
            .collect()
    }

    /// `Φ_α(x)` for every `α` in set order.
    pub fn eval(&self, families: &[PolyFamily], x: &[f64]) -> Result<Vec<f64>> {
        check_dim("basis families", self.scope_dim, families.len())?;
        check_dim("basis input", self.scope_dim, x.len())?;
        let tables = self.univariate_tables(families, x)?;
        let mut out = vec![0.0; self.len()];
        self.combine(&tables, &mut out);
        Ok(out)
    }

    /// Design matrix `[rows × |𝒜|]` for a batch of points over this scope.
    pub fn design_matrix(&self, families: &[PolyFamily], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("basis families", self.scope_dim, families.len())?;
        check_dim("basis input columns", self.scope_dim, x.ncols())?;
        let mut out = Array2::zeros((x.nrows(), self.len()));
        let mut point = vec![0.0; self.scope_dim];
        for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            for (p, v) in point.iter_mut().zip(row.iter()) {
                *p = *v;
            }
            let tables = self.univariate_tables(families, &point)?;
            self.combine(&tables, dst.as_slice_mut().expect("standard layout"));
        }
        Ok(out)
    }

    pub(crate) fn univariate_tables(
        &self,
        families: &[PolyFamily],
        x: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        self.max_degree_per_dim()
            .iter()
            .zip(families)
            .zip(x)
            .map(|((&k, fam), &xi)| fam.eval_basis(k, xi))
            .collect()
    }

    pub(crate) fn combine(&self, tables: &[Vec<f64>], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.indices) {
            *o = a
                .0
                .iter()
                .zip(tables)
                .map(|(&d, t)| t[d])
                .product();
        }
    }
}

/// Truncated multi-index set `{α : ‖α‖_q ≤ K}` with the default cap.
pub fn generate_indices(scope_dim: usize, max_order: usize, q_norm: f64) -> Result<MultiIndexSet> {
    MultiIndexSet::generate(scope_dim, max_order, q_norm)
}

/// `Φ_α(x) = Π_d φ_{α_d}(x_d)` for every member of `set`.
pub fn eval_tensor_basis(set: &MultiIndexSet, families: &[PolyFamily], x: &[f64]) -> Result<Vec<f64>> {
    set.eval(families, x)
}

/// Emits compositions of `remaining` into `current[pos..]`, largest leading
/// part first, pruning on the running q-norm sum.
#[allow(clippy::too_many_arguments)]
fn compositions(
    current: &mut [usize],
    pos: usize,
    remaining: usize,
    partial: f64,
    q: f64,
    budget: f64,
    out: &mut Vec<MultiIndex>,
    cap: u128,
) -> Result<()> {
    if pos + 1 == current.len() {
        let last = if remaining > 0 {
            (remaining as f64).powf(q)
        } else {
            0.0
        };
        if partial + last <= budget {
            current[pos] = remaining;
            if out.len() as u128 >= cap {
                return Err(Error::TooLarge {
                    size: out.len() as u128 + 1,
                    cap,
                });
            }
            out.push(MultiIndex(current.to_vec()));
        }
        return Ok(());
    }
    for part in (0..=remaining).rev() {
        let add = if part > 0 { (part as f64).powf(q) } else { 0.0 };
        if partial + add > budget {
            continue;
        }
        current[pos] = part;
        compositions(current, pos + 1, remaining - part, partial + add, q, budget, out, cap)?;
    }
    current[pos] = 0;
    Ok(())
}
