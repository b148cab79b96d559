//! Monte Carlo estimators for every exact query, one-sample t-tests and a
//! pick-and-freeze Sobol baseline.
//!
//! Samples are drawn in fixed-size chunks, each from its own stream, and
//! chunk results are merged in a fixed pairwise order, so estimates are
//! bit-identical for a given seed whatever the thread count.

mod sobol;
mod stats;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::CircuitModel;
use crate::error::{check_dim, Error, Result};
use crate::inference::{ConditionSpec, ExactInference};
use crate::orthopoly::PolyFamily;
use crate::rng::{stream_id, stream_rng, uniform, PolarNormal};

pub use sobol::{mc_sobol_on_function, SobolEstimate};
pub use stats::{ln_gamma, one_sample_ttest, regularized_incomplete_beta, student_t_two_sided, TTest};

const CHUNK_ROWS: usize = 8192;

/// Anything that maps input batches to output batches under known
/// independent input marginals.
pub trait Surrogate: Sync {
    fn marginals(&self) -> &[PolyFamily];
    fn n_outputs(&self) -> usize;
    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn n_inputs(&self) -> usize {
        self.marginals().len()
    }
}

impl Surrogate for CircuitModel {
    fn marginals(&self) -> &[PolyFamily] {
        &self.marginals
    }

    fn n_outputs(&self) -> usize {
        self.d_out()
    }

    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x)
    }
}

/// A plain function `f(x, y)` writing `y` for input row `x`.
pub struct FnSurrogate<F> {
    pub marginals: Vec<PolyFamily>,
    pub n_outputs: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Surrogate for FnSurrogate<F> {
    fn marginals(&self) -> &[PolyFamily] {
        &self.marginals
    }

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn eval_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.n_outputs));
        let mut buf = vec![0.0; x.ncols()];
        for (row, mut y) in x.rows().into_iter().zip(out.rows_mut()) {
            buf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
            (self.f)(&buf, y.as_slice_mut().expect("standard layout"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub sample_sizes: Vec<usize>,
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![100_000, 1_000_000, 10_000_000],
            n_runs: 30,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least 2 Monte Carlo runs are needed, got {}",
                self.n_runs
            )));
        }
        if self.sample_sizes.is_empty()
            || self.sample_sizes[0] < 2
            || self.sample_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument(
                "sample sizes must be ≥ 2 and strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Running mean and scatter matrix, mergeable in any grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub n: usize,
    pub mean: Array1<f64>,
    /// `Σ (y − ȳ)(y − ȳ)ᵀ`.
    pub scatter: Array2<f64>,
}

impl SampleMoments {
    fn from_batch(y: &Array2<f64>) -> Self {
        let n = y.nrows();
        let mean = y.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(y.ncols()));
        let c = y - &mean;
        Self {
            n,
            mean,
            scatter: c.t().dot(&c),
        }
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &(&delta * (nb / n));
        let d = delta.view().insert_axis(Axis(1));
        let scatter = self.scatter + other.scatter + d.dot(&d.t()) * (na * nb / n);
        Self {
            n: self.n + other.n,
            mean,
            scatter,
        }
    }

    /// Unbiased sample covariance (n − 1 denominator).
    pub fn covariance(&self) -> Result<Array2<f64>> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(
                "a covariance estimate needs at least 2 samples".into(),
            ));
        }
        Ok(&self.scatter / (self.n - 1) as f64)
    }
}

pub(crate) fn pairwise<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => merge(a, b),
                None => a,
            });
        }
        items = next;
    }
    items.pop()
}

/// Fills a block of rows from the marginals, pinning the conditioned ones.
pub(crate) fn sample_rows(
    marginals: &[PolyFamily],
    pinned: &[Option<f64>],
    rows: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<f64> {
    let mut normal = PolarNormal::new();
    let mut x = Array2::zeros((rows, marginals.len()));
    for mut row in x.rows_mut() {
        for ((v, m), p) in row.iter_mut().zip(marginals).zip(pinned) {
            *v = match p {
                Some(val) => *val,
                None => m.sample(rng, &mut normal),
            };
        }
    }
    x
}

fn pinned_values(d: usize, spec: Option<&ConditionSpec>) -> Result<Vec<Option<f64>>> {
    let mut pinned = vec![None; d];
    if let Some(spec) = spec {
        spec.validate(d)?;
        for (&i, &v) in spec.fixed() {
            pinned[i] = Some(v);
        }
    }
    Ok(pinned)
}

/// Mean and scatter of `f(X)` over `n` draws, with `X_𝓘` pinned by `spec`.
pub fn sample_moments(
    s: &dyn Surrogate,
    spec: Option<&ConditionSpec>,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<SampleMoments> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be ≥ 1".into()));
    }
    let pinned = pinned_values(s.n_inputs(), spec)?;
    let n_chunks = n.div_ceil(CHUNK_ROWS);
    let parts = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK_ROWS.min(n - c * CHUNK_ROWS);
            let mut rng = stream_rng(seed, stream_id(&[stream, c as u64]));
            let x = sample_rows(s.marginals(), &pinned, rows, &mut rng);
            let y = s.eval_batch(x.view())?;
            check_dim("surrogate output width", s.n_outputs(), y.ncols())?;
            Ok(SampleMoments::from_batch(&y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise(parts, SampleMoments::merge).expect("at least one chunk"))
}

pub fn mc_mean(s: &dyn Surrogate, n: usize, seed: u64, stream: u64) -> Result<Array1<f64>> {
    Ok(sample_moments(s, None, n, seed, stream)?.mean)
}

pub fn mc_covariance(s: &dyn Surrogate, n: usize, seed: u64, stream: u64) -> Result<Array2<f64>> {
    sample_moments(s, None, n, seed, stream)?.covariance()
}

pub fn mc_conditional_mean(
    s: &dyn Surrogate,
    spec: &ConditionSpec,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Array1<f64>> {
    Ok(sample_moments(s, Some(spec), n, seed, stream)?.mean)
}

pub fn mc_conditional_covariance(
    s: &dyn Surrogate,
    spec: &ConditionSpec,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Array2<f64>> {
    sample_moments(s, Some(spec), n, seed, stream)?.covariance()
}

/// Inner moments for `n_outer` draws of `X_𝓘` from its marginals.
fn nested(
    s: &dyn Surrogate,
    set: &[usize],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<SampleMoments>> {
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::InvalidArgument(
            "nested estimates need at least 2 outer and 2 inner samples".into(),
        ));
    }
    let d = s.n_inputs();
    if let Some(&i) = set.iter().find(|&&i| i >= d) {
        return Err(Error::InvalidArgument(format!(
            "variable index {i} out of range for {d} inputs"
        )));
    }
    (0..n_outer)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, stream_id(&[stream, u64::MAX, k as u64]));
            let mut normal = PolarNormal::new();
            let spec = ConditionSpec::new(set.iter().map(|&i| (i, s.marginals()[i].sample(&mut rng, &mut normal))))?;
            let inner = sample_moments(s, Some(&spec), n_inner, seed, stream_id(&[stream, k as u64]))?;
            Ok(inner)
        })
        .collect()
}

/// `E[cov(Y | X_𝓘)]`: average of inner sample covariances over outer draws.
pub fn mc_expected_conditional_covariance(
    s: &dyn Surrogate,
    set: &[usize],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
    stream: u64,
) -> Result<Array2<f64>> {
    let inner = nested(s, set, n_outer, n_inner, seed, stream)?;
    let covs = inner.iter().map(SampleMoments::covariance).collect::<Result<Vec<_>>>()?;
    let total = pairwise(covs, |a, b| a + b).expect("outer draws");
    Ok(total / n_outer as f64)
}

/// `cov(E[Y | X_𝓘])` from the spread of inner means, minus the inner-noise
/// bias `E[cov(Y | X_𝓘)] / n_inner`.
pub fn mc_covariance_of_conditional_expectation(
    s: &dyn Surrogate,
    set: &[usize],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
    stream: u64,
) -> Result<Array2<f64>> {
    let inner = nested(s, set, n_outer, n_inner, seed, stream)?;
    let o = s.n_outputs();
    let mut means = Array2::zeros((n_outer, o));
    for (mut row, m) in means.rows_mut().into_iter().zip(&inner) {
        row.assign(&m.mean);
    }
    let spread = SampleMoments::from_batch(&means).covariance()?;
    let covs = inner.iter().map(SampleMoments::covariance).collect::<Result<Vec<_>>>()?;
    let noise = pairwise(covs, |a, b| a + b).expect("outer draws") / n_outer as f64;
    Ok(spread - noise / n_inner as f64)
}

/// Runs `f(run)` for every run in parallel, results in run order.
pub fn run_estimates<T: Send>(n_runs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..n_runs).into_par_iter().map(&f).collect()
}

/// Draws conditioning values for `set` from U(lower, upper).
pub fn draw_condition(set: &[usize], lower: f64, upper: f64, seed: u64) -> Result<ConditionSpec> {
    let mut rng = stream_rng(seed, stream_id(&[0xC0D1]));
    ConditionSpec::new(set.iter().map(|&i| (i, uniform(&mut rng, lower, upper))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Query {
    Mean,
    Covariance,
    ConditionalMean,
    ConditionalCovariance,
    ExpectedConditionalCovariance,
}

impl Query {
    pub const ALL: [Query; 5] = [
        Query::Mean,
        Query::Covariance,
        Query::ConditionalMean,
        Query::ConditionalCovariance,
        Query::ExpectedConditionalCovariance,
    ];

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub query: Query,
    pub sample_size: usize,
    pub output: usize,
    pub analytic: f64,
    pub mc_mean: f64,
    pub std_err: f64,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: McConfig,
    /// Conditioning values (0-based variable, value).
    pub condition: Vec<(usize, f64)>,
    pub set: Vec<usize>,
    pub rows: Vec<ValidationRow>,
}

impl ValidationReport {
    pub fn min_p(&self) -> f64 {
        self.rows.iter().map(|r| r.p_value).fold(1.0, f64::min)
    }

    /// Log-log slope of the mean standard error against sample size for
    /// one query (about −0.5 for a consistent estimator).
    pub fn convergence_slope(&self, query: Query) -> Option<f64> {
        let points: Vec<(f64, f64)> = self
            .config
            .sample_sizes
            .iter()
            .filter_map(|&s| {
                let errs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.query == query && r.sample_size == s && r.std_err > 0.0)
                    .map(|r| r.std_err.ln())
                    .collect();
                (!errs.is_empty()).then(|| ((s as f64).ln(), errs.iter().sum::<f64>() / errs.len() as f64))
            })
            .collect();
        log_log_slope(&points)
    }

    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("query\tsamples\toutput\tanalytic\tmc_mean\tstd_err\tt\tp\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.10e}\t{:.10e}\t{:.3e}\t{:.3}\t{:.4}\n",
                serde_json::to_value(r.query).unwrap().as_str().unwrap(),
                r.sample_size,
                r.output + 1,
                r.analytic,
                r.mc_mean,
                r.std_err,
                r.t,
                r.p_value
            ));
        }
        out
    }
}

pub(crate) fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Exact answers for the five query types, one value per output.
fn analytic_values(inf: &ExactInference<'_>, query: Query, spec: &ConditionSpec, set: &[usize]) -> Result<Array1<f64>> {
    Ok(match query {
        Query::Mean => inf.mean()?,
        Query::Covariance => inf.covariance()?.diag().to_owned(),
        Query::ConditionalMean => inf.conditional_mean(spec)?,
        Query::ConditionalCovariance => inf.conditional_covariance(spec)?.diag().to_owned(),
        Query::ExpectedConditionalCovariance => inf.expected_conditional_covariance(set)?.diag().to_owned(),
    })
}

/// One Monte Carlo run of `query` with `size` model evaluations. The
/// expected conditional covariance splits the budget into √size outer
/// draws of `√size` inner samples each.
pub fn mc_query(
    s: &dyn Surrogate,
    query: Query,
    spec: &ConditionSpec,
    set: &[usize],
    size: usize,
    seed: u64,
    run: usize,
) -> Result<Array1<f64>> {
    let stream = stream_id(&[query.code(), size as u64, run as u64]);
    Ok(match query {
        Query::Mean => mc_mean(s, size, seed, stream)?,
        Query::Covariance => mc_covariance(s, size, seed, stream)?.diag().to_owned(),
        Query::ConditionalMean => mc_conditional_mean(s, spec, size, seed, stream)?,
        Query::ConditionalCovariance => mc_conditional_covariance(s, spec, size, seed, stream)?
            .diag()
            .to_owned(),
        Query::ExpectedConditionalCovariance => {
            let side = ((size as f64).sqrt().round() as usize).max(2);
            mc_expected_conditional_covariance(s, set, side, side, seed, stream)?
                .diag()
                .to_owned()
        }
    })
}

/// Exact-versus-Monte-Carlo comparison for all five queries at every
/// configured sample size, with a one-sample t-test per output.
pub fn validate_model(
    model: &CircuitModel,
    cfg: &McConfig,
    spec: &ConditionSpec,
    set: &[usize],
    queries: &[Query],
) -> Result<ValidationReport> {
    cfg.validate()?;
    let inf = ExactInference::new_unfolded(model)?;
    let mut rows = Vec::new();
    for &size in &cfg.sample_sizes {
        for &query in queries {
            let exact = analytic_values(&inf, query, spec, set)?;
            let runs = run_estimates(cfg.n_runs, |r| mc_query(model, query, spec, set, size, cfg.seed, r))?;
            for (o, &a) in exact.iter().enumerate() {
                let samples: Vec<f64> = runs.iter().map(|v| v[o]).collect();
                let test = one_sample_ttest(&samples, a)?;
                rows.push(ValidationRow {
                    query,
                    sample_size: size,
                    output: o,
                    analytic: a,
                    mc_mean: test.mean,
                    std_err: test.std_err,
                    t: test.t,
                    p_value: test.p_value,
                });
            }
        }
    }
    Ok(ValidationReport {
        config: cfg.clone(),
        condition: spec.fixed().iter().map(|(&i, &v)| (i, v)).collect(),
        set: set.to_vec(),
        rows,
    })
}
