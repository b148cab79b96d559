//! The deep circuit: random scope partition, region tree and layered
//! weights, plus the plain value forward pass.
//!
//! Layout of a model with `R` leaf regions:
//!
//! * one [`Leaf`] per region, each holding `n_nodes` PCEs over the region's
//!   scope (an affine sum over the tensor-product basis);
//! * a stack of [`Block`]s, each pairing the regions of the previous layer,
//!   taking the Hadamard product of every pair and mixing the product with
//!   an affine sum layer; an unpaired region passes through unchanged;
//! * an output [`AffineSum`] head mapping the root region to the outputs.
//!
//! Every sum layer except the head may carry a [`BatchNorm`]. Exact
//! inference needs those folded into the weights first (see
//! [`crate::training::fold_batchnorm`]).

mod io;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::basis::MultiIndexSet;
use crate::error::{check_dim, Error, Result};
use crate::orthopoly::PolyFamily;
use crate::rng::{stream_id, stream_rng};
use crate::shallow::ShallowPce;

pub use io::MODEL_FORMAT_VERSION;

const PARTITION_STREAM: u64 = 0x5041_5254;

/// Structural hyperparameters of a circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Number of input variables per leaf scope.
    pub scope_size: usize,
    /// Total-order truncation of every leaf PCE.
    pub max_order: usize,
    /// Node width of every region ("num sums").
    pub n_nodes: usize,
    pub seed: u64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(
        d_in: usize,
        d_out: usize,
        scope_size: usize,
        max_order: usize,
        n_nodes: usize,
        seed: u64,
    ) -> Self {
        Self {
            d_in,
            d_out,
            scope_size,
            max_order,
            n_nodes,
            seed,
            bn_eps: default_bn_eps(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("input and output dimensions must be ≥ 1".into());
        }
        if self.scope_size == 0 || self.scope_size > self.d_in {
            return bad(format!(
                "scope size must lie in 1..={}, got {}",
                self.d_in, self.scope_size
            ));
        }
        if self.max_order == 0 {
            return bad("max order must be ≥ 1".into());
        }
        if self.n_nodes == 0 {
            return bad("node width must be ≥ 1".into());
        }
        if !(self.bn_eps >= 0.0) {
            return bad("batch-norm epsilon must be ≥ 0".into());
        }
        Ok(())
    }
}

/// One merge layer: pairs of regions from the previous layer, plus at most
/// one unpaired region that passes through. Output regions are the pairs in
/// order, followed by the pass-through region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeLayer {
    pub pairs: Vec<(usize, usize)>,
    pub passthrough: Option<usize>,
}

impl MergeLayer {
    pub fn n_outputs(&self) -> usize {
        self.pairs.len() + usize::from(self.passthrough.is_some())
    }
}

/// Partition of the inputs into leaf scopes and the balanced binary plan
/// that merges them into a single root region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGraph {
    pub scopes: Vec<Vec<usize>>,
    pub layers: Vec<MergeLayer>,
    pub seed: u64,
}

impl RegionGraph {
    /// Seeded shuffle of `0..d`, chunked into scopes of `scope_size`
    /// (the last may be smaller); each scope is stored sorted.
    pub fn random(d: usize, scope_size: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..d).collect();
        let mut rng = stream_rng(seed, stream_id(&[PARTITION_STREAM]));
        order.shuffle(&mut rng);
        let scopes: Vec<Vec<usize>> = order
            .chunks(scope_size)
            .map(|c| {
                let mut s = c.to_vec();
                s.sort_unstable();
                s
            })
            .collect();
        Self::with_scopes(scopes, seed)
    }

    /// Balanced merge plan over explicit scopes.
    pub fn with_scopes(scopes: Vec<Vec<usize>>, seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut count = scopes.len();
        while count > 1 {
            let pairs: Vec<(usize, usize)> = (0..count / 2).map(|i| (2 * i, 2 * i + 1)).collect();
            let passthrough = (count % 2 == 1).then_some(count - 1);
            let layer = MergeLayer { pairs, passthrough };
            count = layer.n_outputs();
            layers.push(layer);
        }
        Self {
            scopes,
            layers,
            seed,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.scopes.iter().map(Vec::len).sum()
    }

    /// Scope of every region at every level, leaves first.
    pub fn region_scopes(&self) -> Vec<Vec<Vec<usize>>> {
        let mut levels = vec![self.scopes.clone()];
        for layer in &self.layers {
            let prev = levels.last().unwrap();
            let mut next: Vec<Vec<usize>> = layer
                .pairs
                .iter()
                .map(|&(a, b)| {
                    let mut s = prev[a].clone();
                    s.extend_from_slice(&prev[b]);
                    s.sort_unstable();
                    s
                })
                .collect();
            if let Some(p) = layer.passthrough {
                next.push(prev[p].clone());
            }
            levels.push(next);
        }
        levels
    }

    /// Checks disjointness of scopes and products and that the root covers
    /// every input exactly once.
    pub fn audit(&self) -> Result<()> {
        let d = self.n_inputs();
        let mut seen = vec![false; d];
        for scope in &self.scopes {
            if scope.is_empty() {
                return Err(Error::InvalidArgument("empty leaf scope".into()));
            }
            for &v in scope {
                if v >= d || seen[v] {
                    return Err(Error::InvalidArgument(format!(
                        "leaf scopes are not a partition of 0..{d} (variable {v})"
                    )));
                }
                seen[v] = true;
            }
        }
        let levels = self.region_scopes();
        for (layer, prev) in self.layers.iter().zip(&levels) {
            let mut used = vec![false; prev.len()];
            for &(a, b) in &layer.pairs {
                if a >= prev.len() || b >= prev.len() {
                    return Err(Error::InvalidArgument("merge plan references a missing region".into()));
                }
                if prev[a].iter().any(|v| prev[b].contains(v)) {
                    return Err(Error::InvalidArgument(
                        "product children must have disjoint scopes".into(),
                    ));
                }
                for i in [a, b] {
                    if std::mem::replace(&mut used[i], true) {
                        return Err(Error::InvalidArgument(format!("region {i} merged twice")));
                    }
                }
            }
            if let Some(p) = layer.passthrough {
                if p >= prev.len() || std::mem::replace(&mut used[p], true) {
                    return Err(Error::InvalidArgument("invalid pass-through region".into()));
                }
            }
            if used.iter().any(|u| !u) {
                return Err(Error::InvalidArgument("merge layer drops a region".into()));
            }
        }
        let root = levels.last().unwrap();
        if root.len() != 1 || root[0] != (0..d).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("root region must cover every input".into()));
        }
        Ok(())
    }
}

/// Per-node batch normalization. Running statistics are empty until the
/// model is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(0),
            running_var: Array1::zeros(0),
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn has_running_stats(&self) -> bool {
        self.running_mean.len() == self.width() && self.running_var.len() == self.width()
    }

    /// Inference-time map `z = γ̂ y + β̂`.
    pub fn affine(&self, layer: &str) -> Result<(Array1<f64>, Array1<f64>)> {
        if !self.has_running_stats() {
            return Err(Error::MissingRunningStats {
                layer: layer.to_string(),
            });
        }
        let scale: Array1<f64> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = &self.beta - &(&scale * &self.running_mean);
        Ok((scale, shift))
    }
}

/// `y = W x + b`, optionally followed by batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSum {
    /// `[n_out × n_in]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

impl AffineSum {
    pub fn zeros(n_out: usize, n_in: usize, norm: Option<BatchNorm>) -> Self {
        Self {
            weights: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
            norm,
        }
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    /// Affine part only, on a batch `[rows × n_in]`.
    pub(crate) fn linear(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut y = input.dot(&self.weights.t());
        y += &self.bias;
        y
    }

    /// Weights and bias of the inference-mode map with batch norm absorbed.
    pub fn effective(&self, layer: &str) -> Result<(Array2<f64>, Array1<f64>)> {
        match &self.norm {
            None => Ok((self.weights.clone(), self.bias.clone())),
            Some(norm) => {
                let (scale, shift) = norm.affine(layer)?;
                let weights = &self.weights * &scale.view().insert_axis(Axis(1));
                let bias = &self.bias * &scale + &shift;
                Ok((weights, bias))
            }
        }
    }

    /// Inference-mode application (running statistics for normalization).
    pub fn apply(&self, input: &Array2<f64>, layer: &str) -> Result<Array2<f64>> {
        let mut y = self.linear(input);
        if let Some(norm) = &self.norm {
            let (scale, shift) = norm.affine(layer)?;
            y *= &scale;
            y += &shift;
        }
        Ok(y)
    }
}

/// A leaf region: `n_nodes` PCEs sharing one scope and basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub scope: Vec<usize>,
    pub basis: MultiIndexSet,
    pub families: Vec<PolyFamily>,
    /// Weights `[n_nodes × |𝒜|]` over the basis; column 0 is the constant term.
    pub sum: AffineSum,
}

impl Leaf {
    /// Basis features of this leaf for a full input batch.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let local = x.select(Axis(1), &self.scope);
        self.basis.design_matrix(&self.families, local.view())
    }

    /// Leaf PCE weights with the bias folded into the constant term.
    pub fn pce_weights(&self) -> Array2<f64> {
        let mut w = self.sum.weights.clone();
        let mut c0 = w.column_mut(0);
        c0 += &self.sum.bias;
        w
    }
}

/// One merge layer with its sum units (one per pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layer: MergeLayer,
    pub sums: Vec<AffineSum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitModel {
    pub config: ModelConfig,
    pub marginals: Vec<PolyFamily>,
    pub graph: RegionGraph,
    pub leaves: Vec<Leaf>,
    pub blocks: Vec<Block>,
    pub head: AffineSum,
}

pub(crate) fn leaf_label(r: usize) -> String {
    format!("leaf region {r}")
}

pub(crate) fn block_label(l: usize, p: usize) -> String {
    format!("merge layer {l} pair {p}")
}

pub(crate) const HEAD_LABEL: &str = "output head";

fn ensure_finite(a: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

impl CircuitModel {
    /// Allocates a model with a random scope partition. Weights are zero and
    /// batch-norm running statistics empty until
    /// [`crate::training::init_weights`] runs.
    pub fn build(config: ModelConfig, marginals: Vec<PolyFamily>) -> Result<Self> {
        config.validate()?;
        check_dim("model marginals", config.d_in, marginals.len())?;
        let graph = RegionGraph::random(config.d_in, config.scope_size, config.seed);
        Self::with_graph(config, marginals, graph)
    }

    /// Like [`CircuitModel::build`] with a caller-supplied region graph.
    pub fn with_graph(config: ModelConfig, marginals: Vec<PolyFamily>, graph: RegionGraph) -> Result<Self> {
        config.validate()?;
        check_dim("model marginals", config.d_in, marginals.len())?;
        check_dim("region graph inputs", config.d_in, graph.n_inputs())?;
        graph.audit()?;
        let w = config.n_nodes;
        let leaves = graph
            .scopes
            .iter()
            .map(|scope| {
                let basis = MultiIndexSet::generate(scope.len(), config.max_order, 1.0)?;
                let families = scope.iter().map(|&v| marginals[v]).collect();
                let sum = AffineSum::zeros(w, basis.len(), Some(BatchNorm::new(w, config.bn_eps)));
                Ok(Leaf {
                    scope: scope.clone(),
                    basis,
                    families,
                    sum,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = graph
            .layers
            .iter()
            .map(|layer| Block {
                layer: layer.clone(),
                sums: layer
                    .pairs
                    .iter()
                    .map(|_| AffineSum::zeros(w, w, Some(BatchNorm::new(w, config.bn_eps))))
                    .collect(),
            })
            .collect();
        let head = AffineSum::zeros(config.d_out, w, None);
        Ok(Self {
            config,
            marginals,
            graph,
            leaves,
            blocks,
            head,
        })
    }

    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn n_regions(&self) -> usize {
        self.leaves.len()
    }

    pub fn n_merge_layers(&self) -> usize {
        self.blocks.len()
    }

    /// True when no sum layer carries batch normalization.
    pub fn is_folded(&self) -> bool {
        self.sums().all(|(_, s)| s.norm.is_none())
    }

    /// Every sum layer with a label, in forward order.
    pub fn sums(&self) -> impl Iterator<Item = (String, &AffineSum)> {
        let leaves = self
            .leaves
            .iter()
            .enumerate()
            .map(|(r, l)| (leaf_label(r), &l.sum));
        let blocks = self.blocks.iter().enumerate().flat_map(|(l, b)| {
            b.sums
                .iter()
                .enumerate()
                .map(move |(p, s)| (block_label(l, p), s))
        });
        leaves
            .chain(blocks)
            .chain(std::iter::once((HEAD_LABEL.to_string(), &self.head)))
    }

    /// Number of trainable scalars.
    pub fn n_parameters(&self) -> usize {
        self.sums()
            .map(|(_, s)| {
                s.weights.len() + s.bias.len() + s.norm.as_ref().map_or(0, |n| 2 * n.width())
            })
            .sum()
    }

    /// Checks graph structure and that all tensor shapes line up.
    pub fn audit(&self) -> Result<()> {
        self.graph.audit()?;
        check_dim("leaf count", self.graph.scopes.len(), self.leaves.len())?;
        check_dim("block count", self.graph.layers.len(), self.blocks.len())?;
        check_dim("marginal count", self.config.d_in, self.marginals.len())?;
        let mut width = None;
        for (leaf, scope) in self.leaves.iter().zip(&self.graph.scopes) {
            if &leaf.scope != scope {
                return Err(Error::InvalidArgument("leaf scope disagrees with region graph".into()));
            }
            check_dim("leaf basis dimension", leaf.scope.len(), leaf.basis.scope_dim())?;
            check_dim("leaf weight columns", leaf.basis.len(), leaf.sum.n_in())?;
            check_sum_shapes(&leaf.sum)?;
            let w = *width.get_or_insert(leaf.sum.n_out());
            check_dim("leaf width", w, leaf.sum.n_out())?;
        }
        let w = width.unwrap_or(0);
        for (block, layer) in self.blocks.iter().zip(&self.graph.layers) {
            if &block.layer != layer {
                return Err(Error::InvalidArgument("block plan disagrees with region graph".into()));
            }
            check_dim("block sum count", layer.pairs.len(), block.sums.len())?;
            for s in &block.sums {
                check_dim("block sum input width", w, s.n_in())?;
                check_dim("block sum output width", w, s.n_out())?;
                check_sum_shapes(s)?;
            }
        }
        check_dim("head input width", w, self.head.n_in())?;
        check_dim("head output width", self.config.d_out, self.head.n_out())?;
        check_sum_shapes(&self.head)?;
        Ok(())
    }

    /// Basis features for every leaf on a batch `[rows × D]`.
    pub fn leaf_features(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        check_dim("forward input columns", self.d_in(), x.ncols())?;
        self.leaves.iter().map(|leaf| leaf.features(x)).collect()
    }

    /// Inference-mode forward pass `[rows × D] → [rows × O]`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let features = self.leaf_features(x)?;
        self.forward_features(&features)
    }

    /// Forward pass from precomputed leaf features.
    pub fn forward_features(&self, features: &[Array2<f64>]) -> Result<Array2<f64>> {
        check_dim("leaf feature count", self.leaves.len(), features.len())?;
        let mut regions = Vec::with_capacity(self.leaves.len());
        for (r, (leaf, phi)) in self.leaves.iter().zip(features).enumerate() {
            let label = leaf_label(r);
            let y = leaf.sum.apply(phi, &label)?;
            ensure_finite(&y, || label)?;
            regions.push(y);
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let mut next = Vec::with_capacity(block.layer.n_outputs());
            for (p, (&(a, b), sum)) in block.layer.pairs.iter().zip(&block.sums).enumerate() {
                let label = block_label(l, p);
                let product = &regions[a] * &regions[b];
                let y = sum.apply(&product, &label)?;
                ensure_finite(&y, || label)?;
                next.push(y);
            }
            if let Some(p) = block.layer.passthrough {
                next.push(std::mem::take(&mut regions[p]));
            }
            regions = next;
        }
        let root = regions.pop().expect("root region");
        let out = self.head.apply(&root, HEAD_LABEL)?;
        ensure_finite(&out, || HEAD_LABEL.to_string())?;
        Ok(out)
    }

    /// Forward pass for a single point.
    pub fn predict(&self, x: &[f64]) -> Result<Array1<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::InvalidArgument("bad input shape".into()))?;
        Ok(self.forward(batch)?.row(0).to_owned())
    }

    /// Equivalent shallow expansion of a folded single-region model.
    pub fn to_shallow(&self) -> Result<ShallowPce> {
        if !self.is_folded() {
            return Err(Error::NotFolded);
        }
        if self.leaves.len() != 1 {
            return Err(Error::InvalidArgument(
                "only single-region models have a shallow equivalent".into(),
            ));
        }
        let leaf = &self.leaves[0];
        let mut weights = self.head.weights.dot(&leaf.pce_weights());
        let mut c0 = weights.column_mut(0);
        c0 += &self.head.bias;
        ShallowPce::new(leaf.basis.clone(), leaf.families.clone(), weights)
    }
}

fn check_sum_shapes(s: &AffineSum) -> Result<()> {
    check_dim("bias length", s.n_out(), s.bias.len())?;
    if let Some(n) = &s.norm {
        check_dim("batch-norm width", s.n_out(), n.width())?;
        check_dim("batch-norm shift width", s.n_out(), n.beta.len())?;
        if !n.running_mean.is_empty() || !n.running_var.is_empty() {
            check_dim("running mean width", s.n_out(), n.running_mean.len())?;
            check_dim("running variance width", s.n_out(), n.running_var.len())?;
        }
    }
    Ok(())
}
