//! Gradient-based fitting: initialization, losses, mini-batch training with
//! restarts and early stopping, and batch-norm folding.

mod grad;
mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{leaf_label, CircuitModel, ModelConfig};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream_id, stream_rng, PolarNormal};

pub use grad::{backward, backward_from, flat_params, set_flat_params, train_forward, Gradients, SumGrad, Tape};
pub use optim::Optimizer;

const INIT_STREAM: u64 = 0x494E_4954;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adam with the running maximum of the second-moment estimate.
    Amsgrad,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub init_base_std: f64,
    pub init_decay: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub batch_norm_momentum: f64,
    /// Initial batch-norm scale `γ`.
    pub bn_init_scale: f64,
    /// Initial batch-norm shift `β`. A nonzero shift keeps the lower-order
    /// terms of a Hadamard product alive at initialization; with `β = 0`
    /// every node is centred and products start as pure interactions.
    pub bn_init_shift: f64,
    /// Train on standardized targets; the scaling is folded back into the
    /// output head afterwards.
    pub standardize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8.5e-3,
            batch_size: 16,
            max_epochs: 200,
            early_stop_patience: 20,
            init_base_std: 1.0,
            init_decay: 0.5,
            n_restarts: 1,
            seed: 0,
            optimizer: OptimizerKind::Amsgrad,
            batch_norm_momentum: 0.1,
            bn_init_scale: 1.0,
            bn_init_shift: 0.0,
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.n_restarts == 0 {
            return bad("batch size, epoch count and restart count must be ≥ 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early-stopping patience must be ≥ 1");
        }
        if !(self.init_base_std > 0.0) {
            return bad("init base std must be positive");
        }
        if !(self.init_decay > 0.0 && self.init_decay <= 1.0) {
            return bad("init decay must lie in (0, 1]");
        }
        if !(self.bn_init_scale > 0.0 && self.bn_init_scale.is_finite() && self.bn_init_shift.is_finite()) {
            return bad("batch-norm initial scale must be positive and the shift finite");
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return bad("batch-norm momentum must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Draws all weights. Leaf weight for `α` has std
/// `base · decay^{|α|}`; sum weights have std `base / √fan_in`; biases
/// start at zero, batch norms at `bn_init_scale`, `bn_init_shift` and unit
/// running variance.
pub fn init_weights(model: &mut CircuitModel, cfg: &TrainConfig, seed: u64) {
    let mut rng = stream_rng(seed, stream_id(&[INIT_STREAM]));
    let mut normal = PolarNormal::new();
    for leaf in &mut model.leaves {
        let stds: Vec<f64> = leaf
            .basis
            .iter()
            .map(|a| cfg.init_base_std * cfg.init_decay.powi(a.total_degree() as i32))
            .collect();
        for mut row in leaf.sum.weights.rows_mut() {
            for (w, s) in row.iter_mut().zip(&stds) {
                *w = s * normal.sample(&mut rng);
            }
        }
    }
    let n_leaves = model.leaves.len();
    for (i, s) in grad::sums_mut(model).into_iter().enumerate() {
        if i >= n_leaves {
            let std = cfg.init_base_std / (s.n_in() as f64).sqrt();
            s.weights.mapv_inplace(|_| std * normal.sample(&mut rng));
        }
        s.bias.fill(0.0);
        if let Some(n) = &mut s.norm {
            n.gamma.fill(cfg.bn_init_scale);
            n.beta.fill(cfg.bn_init_shift);
            n.running_mean = Array1::zeros(n.width());
            n.running_var = Array1::ones(n.width());
        }
    }
}

/// Mean squared error over all entries.
pub fn loss_mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_dim("prediction rows", target.nrows(), pred.nrows())?;
    check_dim("prediction columns", target.ncols(), pred.ncols())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction batch".into()));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// `mean((y − ŷ)²) / mean(y²)`; infinite when the targets are all zero
/// but the predictions are not.
pub fn relative_mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    let mse = loss_mse(pred, target)?;
    let denom = target.iter().map(|t| t * t).sum::<f64>() / target.len() as f64;
    Ok(if denom > 0.0 {
        mse / denom
    } else if mse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Replaces every batch norm by its inference-time affine map, absorbed
/// into the sum weights and bias (leaf biases go into the constant term).
/// Folding an already folded model returns it unchanged.
pub fn fold_batchnorm(model: &CircuitModel) -> Result<CircuitModel> {
    let mut out = model.clone();
    for (r, leaf) in out.leaves.iter_mut().enumerate() {
        let (mut w, b) = leaf.sum.effective(&leaf_label(r))?;
        let mut c0 = w.column_mut(0);
        c0 += &b;
        leaf.sum.weights = w;
        leaf.sum.bias.fill(0.0);
        leaf.sum.norm = None;
    }
    let labels: Vec<String> = model.sums().map(|(l, _)| l).collect();
    let n_leaves = out.leaves.len();
    let mut rest = grad::sums_mut(&mut out);
    for (s, label) in rest.drain(n_leaves..).zip(&labels[n_leaves..]) {
        let (w, b) = s.effective(label)?;
        s.weights = w;
        s.bias = b;
        s.norm = None;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum RestartStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RestartStatus,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation MSE in original target units at the best epoch.
    pub best_val_mse: f64,
    pub best_val_relative_mse: f64,
    /// Mean training MSE per epoch (standardized units when enabled).
    pub train_curve: Vec<f64>,
    /// Validation MSE per epoch, same units as `train_curve`.
    pub val_curve: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub chosen_restart: usize,
    pub restarts: Vec<RestartReport>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    /// Best model, batch norm still unfolded.
    #[serde(skip)]
    pub best_model: Option<CircuitModel>,
}

impl TrainReport {
    pub fn best(&self) -> &RestartReport {
        &self.restarts[self.chosen_restart]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Prepared {
    features: Vec<Array2<f64>>,
    targets: Array2<f64>,
}

impl Prepared {
    fn rows(&self, idx: &[usize]) -> (Vec<Array2<f64>>, Array2<f64>) {
        let f = self.features.iter().map(|m| m.select(Axis(0), idx)).collect();
        (f, self.targets.select(Axis(0), idx))
    }
}

fn standardizer(targets: &Array2<f64>, enabled: bool) -> (Array1<f64>, Array1<f64>) {
    let o = targets.ncols();
    if !enabled {
        return (Array1::zeros(o), Array1::ones(o));
    }
    let mean = targets.mean_axis(Axis(0)).unwrap();
    let std = targets
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

fn destandardize_head(model: &mut CircuitModel, mean: &Array1<f64>, std: &Array1<f64>) {
    let head = &mut model.head;
    for (k, mut row) in head.weights.rows_mut().into_iter().enumerate() {
        row *= std[k];
    }
    head.bias = &head.bias * std + mean;
}

struct RestartOutcome {
    report: RestartReport,
    model: Option<CircuitModel>,
}

fn run_restart(
    template: &CircuitModel,
    cfg: &TrainConfig,
    restart: usize,
    train: &Prepared,
    val: &Prepared,
    val_raw: &Array2<f64>,
    scaling: &(Array1<f64>, Array1<f64>),
) -> RestartOutcome {
    let seed = stream_id(&[cfg.seed, restart as u64]);
    let mut report = RestartReport {
        restart,
        seed,
        status: RestartStatus::Completed,
        epochs_run: 0,
        best_epoch: 0,
        best_val_mse: f64::INFINITY,
        best_val_relative_mse: f64::INFINITY,
        train_curve: Vec::new(),
        val_curve: Vec::new(),
    };
    let result = (|| -> Result<Option<CircuitModel>> {
        let mut model = template.clone();
        init_weights(&mut model, cfg, seed);
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.n_parameters());
        let mut rng = stream_rng(seed, stream_id(&[SHUFFLE_STREAM]));
        let n = train.targets.nrows();
        let has_norm = !model.is_folded();
        let mut order: Vec<usize> = (0..n).collect();
        let mut best: Option<(f64, CircuitModel)> = None;
        let mut since_best = 0;
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut seen = 0usize;
            for idx in order.chunks(cfg.batch_size) {
                // batch statistics of a single row are meaningless
                if has_norm && idx.len() < 2 && n >= 2 {
                    continue;
                }
                let (features, targets) = train.rows(idx);
                let tape = train_forward(&model, &features)?;
                let (loss, d_out) = grad::mse_cograd(&tape.output, targets.view());
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        layer: "training loss".into(),
                    });
                }
                let grads = backward_from(&model, &tape, &d_out)?;
                let mut params = flat_params(&model);
                opt.step(&mut params, &grads.flatten());
                set_flat_params(&mut model, &params)?;
                grad::update_running_stats(&mut model, &tape, cfg.batch_norm_momentum);
                total += loss * idx.len() as f64;
                seen += idx.len();
            }
            let val_pred = model.forward_features(&val.features)?;
            let val_mse = loss_mse(val_pred.view(), val.targets.view())?;
            report.train_curve.push(total / seen.max(1) as f64);
            report.val_curve.push(val_mse);
            report.epochs_run = epoch + 1;
            if !val_mse.is_finite() {
                return Err(Error::NonFinite {
                    layer: "validation loss".into(),
                });
            }
            if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
                best = Some((val_mse, model.clone()));
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
        Ok(best.map(|(_, mut m)| {
            destandardize_head(&mut m, &scaling.0, &scaling.1);
            m
        }))
    })();
    match result {
        Ok(Some(model)) => {
            let scored = model
                .forward_features(&val.features)
                .and_then(|p| Ok((loss_mse(p.view(), val_raw.view())?, relative_mse(p.view(), val_raw.view())?)));
            match scored {
                Ok((mse, rel)) if mse.is_finite() => {
                    report.best_val_mse = mse;
                    report.best_val_relative_mse = rel;
                    RestartOutcome {
                        report,
                        model: Some(model),
                    }
                }
                Ok(_) => fail(report, "non-finite validation loss".into()),
                Err(e) => fail(report, e.to_string()),
            }
        }
        Ok(None) => fail(report, "no epoch completed".into()),
        Err(e) => fail(report, e.to_string()),
    }
}

fn fail(mut report: RestartReport, reason: String) -> RestartOutcome {
    report.status = RestartStatus::Failed { reason };
    RestartOutcome { report, model: None }
}

/// Trains `cfg.n_restarts` independent initializations of `template` and
/// keeps the one with the lowest validation MSE. Diverging restarts are
/// recorded as failed.
pub fn train(template: &CircuitModel, cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    template.audit()?;
    for (name, ds) in [("training", train_set), ("validation", val_set)] {
        if ds.n_samples() == 0 {
            return Err(Error::InvalidArgument(format!("{name} set is empty")));
        }
        check_dim("dataset inputs", template.d_in(), ds.n_inputs())?;
        check_dim("dataset outputs", template.d_out(), ds.n_outputs())?;
    }
    let scaling = standardizer(&train_set.targets, cfg.standardize_targets);
    let scale = |t: &Array2<f64>| (t - &scaling.0) / &scaling.1;
    let train = Prepared {
        features: template.leaf_features(train_set.inputs.view())?,
        targets: scale(&train_set.targets),
    };
    let val = Prepared {
        features: template.leaf_features(val_set.inputs.view())?,
        targets: scale(&val_set.targets),
    };
    let outcomes: Vec<RestartOutcome> = (0..cfg.n_restarts)
        .into_par_iter()
        .map(|r| run_restart(template, cfg, r, &train, &val, &val_set.targets, &scaling))
        .collect();
    let chosen = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.model.is_some())
        .min_by(|a, b| a.1.report.best_val_mse.total_cmp(&b.1.report.best_val_mse))
        .map(|(i, _)| i)
        .ok_or(Error::TrainingFailed(cfg.n_restarts))?;
    let mut restarts = Vec::with_capacity(outcomes.len());
    let mut best_model = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        if i == chosen {
            best_model = o.model;
        }
        restarts.push(o.report);
    }
    Ok(TrainReport {
        config: cfg.clone(),
        model_config: template.config.clone(),
        chosen_restart: chosen,
        restarts,
        target_mean: scaling.0.to_vec(),
        target_std: scaling.1.to_vec(),
        best_model,
    })
}
