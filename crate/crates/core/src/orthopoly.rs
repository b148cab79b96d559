//! Univariate orthonormal polynomial families and Gauss quadrature.
//!
//! Each family is tied to an input marginal: probabilists' Hermite
//! polynomials for normal inputs and Legendre polynomials for uniform
//! inputs. Polynomials are normalized so that `E[φ_i(X) φ_j(X)] = δ_ij`
//! under the marginal, which is what collapses every moment integral in the
//! rest of the crate to algebra on weights.
//!
//! Both families satisfy the symmetric three-term recurrence
//! `t φ_n(t) = b_{n+1} φ_{n+1}(t) + b_n φ_{n-1}(t)` on their canonical
//! domain, with `b_n = √n` (Hermite, N(0,1)) and `b_n = n / √(4n² − 1)`
//! (Legendre, U(−1,1)).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, PolarNormal};

/// Highest polynomial degree accepted by [`PolyFamily::eval_basis`].
pub const MAX_DEGREE: usize = 16;

/// Largest Gauss rule produced by [`PolyFamily::quadrature`].
pub const MAX_QUADRATURE_NODES: usize = 64;

const SUPPORT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    /// Orthonormal probabilists' Hermite polynomials, canonical marginal N(0, 1).
    HermiteStandardNormal,
    /// Orthonormal Legendre polynomials, canonical marginal U(−1, 1).
    LegendreUniform,
}

/// An orthonormal family attached to a (shifted, scaled) input marginal.
///
/// A user value `x` maps to the canonical domain as `t = (x − location) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyFamily {
    pub kind: FamilyKind,
    pub location: f64,
    pub scale: f64,
}

/// Gauss rule normalized to the probability measure of a family.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `Σ_q w_q f(x_q)`.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

impl PolyFamily {
    pub fn new(kind: FamilyKind, location: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !location.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "family needs finite location and positive scale, got ({location}, {scale})"
            )));
        }
        Ok(Self {
            kind,
            location,
            scale,
        })
    }

    pub fn standard_normal() -> Self {
        Self {
            kind: FamilyKind::HermiteStandardNormal,
            location: 0.0,
            scale: 1.0,
        }
    }

    pub fn normal(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(FamilyKind::HermiteStandardNormal, mean, std_dev)
    }

    /// Legendre family on the canonical U(−1, 1).
    pub fn legendre() -> Self {
        Self {
            kind: FamilyKind::LegendreUniform,
            location: 0.0,
            scale: 1.0,
        }
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        if !(upper > lower) {
            return Err(Error::InvalidArgument(format!(
                "uniform marginal needs lower < upper, got ({lower}, {upper})"
            )));
        }
        Self::new(
            FamilyKind::LegendreUniform,
            0.5 * (lower + upper),
            0.5 * (upper - lower),
        )
    }

    /// Support of the marginal in user coordinates.
    pub fn support(&self) -> (f64, f64) {
        match self.kind {
            FamilyKind::HermiteStandardNormal => (f64::NEG_INFINITY, f64::INFINITY),
            FamilyKind::LegendreUniform => {
                (self.location - self.scale, self.location + self.scale)
            }
        }
    }

    /// Mean of the marginal.
    pub fn mean(&self) -> f64 {
        self.location
    }

    /// Off-diagonal Jacobi coefficient `b_n`, `n ≥ 1`.
    fn recurrence_coefficient(&self, n: usize) -> f64 {
        let n = n as f64;
        match self.kind {
            FamilyKind::HermiteStandardNormal => n.sqrt(),
            FamilyKind::LegendreUniform => n / (4.0 * n * n - 1.0).sqrt(),
        }
    }

    /// Maps a user value to the canonical domain, checking the support.
    pub fn to_canonical(&self, x: f64) -> Result<f64> {
        let (lower, upper) = self.support();
        let t = (x - self.location) / self.scale;
        let inside = match self.kind {
            FamilyKind::HermiteStandardNormal => t.is_finite(),
            FamilyKind::LegendreUniform => t.is_finite() && t.abs() <= 1.0 + SUPPORT_SLACK,
        };
        if inside {
            Ok(t)
        } else {
            Err(Error::Domain {
                value: x,
                lower,
                upper,
            })
        }
    }

    /// `[φ_0(x), …, φ_K(x)]`.
    pub fn eval_basis(&self, max_degree: usize, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; max_degree + 1];
        self.eval_basis_into(x, &mut out)?;
        Ok(out)
    }

    /// Fills `out` with `φ_0(x) … φ_{len−1}(x)`.
    pub fn eval_basis_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if out.is_empty() {
            return Ok(());
        }
        let degree = out.len() - 1;
        if degree > MAX_DEGREE {
            return Err(Error::UnsupportedDegree {
                degree,
                max: MAX_DEGREE,
            });
        }
        let t = self.to_canonical(x)?;
        out[0] = 1.0;
        if degree >= 1 {
            out[1] = t / self.recurrence_coefficient(1);
        }
        for n in 1..degree {
            let b_n = self.recurrence_coefficient(n);
            let b_next = self.recurrence_coefficient(n + 1);
            out[n + 1] = (t * out[n] - b_n * out[n - 1]) / b_next;
        }
        Ok(())
    }

    /// Gauss rule with `n_nodes` nodes from the eigen-decomposition of the
    /// Jacobi matrix. Nodes are returned in user coordinates, ascending.
    pub fn quadrature(&self, n_nodes: usize) -> Result<QuadratureRule> {
        if !(1..=MAX_QUADRATURE_NODES).contains(&n_nodes) {
            return Err(Error::InvalidArgument(format!(
                "quadrature needs 1..={MAX_QUADRATURE_NODES} nodes, got {n_nodes}"
            )));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n_nodes, n_nodes);
        for i in 1..n_nodes {
            let b = self.recurrence_coefficient(i);
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eigen = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n_nodes)
            .map(|k| {
                let v0 = eigen.eigenvectors[(0, k)];
                (eigen.eigenvalues[k], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(QuadratureRule {
            nodes: pairs
                .iter()
                .map(|p| self.location + self.scale * p.0)
                .collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        })
    }

    /// Draws one value from the marginal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, normal: &mut PolarNormal) -> f64 {
        match self.kind {
            FamilyKind::HermiteStandardNormal => self.location + self.scale * normal.sample(rng),
            FamilyKind::LegendreUniform => {
                let (lower, upper) = self.support();
                rng::uniform(rng, lower, upper)
            }
        }
    }
}

impl fmt::Display for PolyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FamilyKind::HermiteStandardNormal => {
                write!(f, "normal({},{})", self.location, self.scale)
            }
            FamilyKind::LegendreUniform => {
                let (lower, upper) = self.support();
                write!(f, "uniform({lower},{upper})")
            }
        }
    }
}

impl FromStr for PolyFamily {
    type Err = Error;

    /// Parses `normal(mean,std)` or `uniform(lower,upper)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("cannot parse marginal '{s}'"));
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<f64> = inner
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if args.len() != 2 {
            return Err(bad());
        }
        match s[..open].trim() {
            "normal" => Self::normal(args[0], args[1]),
            "uniform" => Self::uniform(args[0], args[1]),
            _ => Err(bad()),
        }
    }
}
