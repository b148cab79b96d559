//! Datasets: benchmark generators, CSV and binary tensor files, splits.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::orthopoly::PolyFamily;
use crate::rng::{stream_id, stream_rng, PolarNormal, GENERATOR_NAME};
use crate::shallow::ShallowPce;

pub const TENSOR_FORMAT_VERSION: u32 = 1;
const TENSOR_MAGIC: &str = "DEEPPCE-DATA";
const ROWS_PER_STREAM: usize = 1024;
const GEN_STREAM: u64 = 0x4745_4E44;
const SPLIT_STREAM: u64 = 0x5350_4C54;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[N × D]`.
    pub inputs: Array2<f64>,
    /// `[N × O]`.
    pub targets: Array2<f64>,
    pub marginals: Vec<PolyFamily>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        targets: Array2<f64>,
        marginals: Vec<PolyFamily>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        check_dim("target rows", inputs.nrows(), targets.nrows())?;
        check_dim("marginal count", inputs.ncols(), marginals.len())?;
        Ok(Self {
            inputs,
            targets,
            marginals,
            provenance: provenance.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            marginals: self.marginals.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Seeded shuffle, then consecutive train/validation/test blocks.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Self, Self, Self)> {
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} must be non-negative and sum to 1"
            )));
        }
        let n = self.n_samples();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, stream_id(&[SPLIT_STREAM])));
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let (a, rest) = order.split_at(n_train);
        let (b, c) = rest.split_at(n_val);
        Ok((self.select(a), self.select(b), self.select(c)))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let header: Vec<String> = (1..=self.n_inputs())
            .map(|i| format!("x_{i}"))
            .chain((1..=self.n_outputs()).map(|i| format!("y_{i}")))
            .collect();
        w.write_record(&header).map_err(csv_error)?;
        for (x, y) in self.inputs.rows().into_iter().zip(self.targets.rows()) {
            // Display for f64 is the shortest representation that parses back exactly
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with header `x_1..x_D, y_1..y_O`. A single marginal is
    /// applied to every input column.
    pub fn load_csv(path: impl AsRef<Path>, marginals: &[PolyFamily]) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(csv_error)?;
        let header = r.headers().map_err(csv_error)?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let d = names.iter().take_while(|n| n.starts_with("x_")).count();
        let o = names.len() - d;
        let expected = (1..=d)
            .map(|i| format!("x_{i}"))
            .chain((1..=o).map(|i| format!("y_{i}")));
        if d == 0 || o == 0 || !expected.zip(&names).all(|(e, n)| e == *n) {
            return Err(Error::Malformed(
                "CSV header must name columns x_1..x_D then y_1..y_O".into(),
            ));
        }
        let marginals = broadcast_marginals(marginals, d)?;
        let mut values = Vec::new();
        let mut rows = 0usize;
        for record in r.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != d + o {
                return Err(Error::RaggedRow {
                    line,
                    expected: d + o,
                    found: record.len(),
                });
            }
            for cell in record.iter() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Malformed(format!("non-numeric cell {cell:?} at line {line}"))
                })?;
                values.push(v);
            }
            rows += 1;
        }
        let all = Array2::from_shape_vec((rows, d + o), values).expect("row-major shape");
        Self::new(
            all.slice(ndarray::s![.., ..d]).to_owned(),
            all.slice(ndarray::s![.., d..]).to_owned(),
            marginals,
            "csv import",
        )
    }

    pub fn to_tensor_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{TENSOR_MAGIC}")?;
        writeln!(out, "version {TENSOR_FORMAT_VERSION}")?;
        writeln!(out, "n {}", self.n_samples())?;
        writeln!(out, "d {}", self.n_inputs())?;
        writeln!(out, "o {}", self.n_outputs())?;
        let marginals: Vec<String> = self.marginals.iter().map(ToString::to_string).collect();
        writeln!(out, "marginals {}", marginals.join(" "))?;
        writeln!(out, "provenance {}", serde_json::to_string(&self.provenance)?)?;
        writeln!(out, "end")?;
        for v in self.inputs.iter().chain(self.targets.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_tensor_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut header = Vec::new();
        loop {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Malformed("truncated tensor header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Malformed("tensor header is not text".into()))?
                .to_string();
            rest = &rest[end + 1..];
            if line == "end" {
                break;
            }
            header.push(line);
            if header.len() > 16 {
                return Err(Error::Malformed("tensor header has no end marker".into()));
            }
        }
        if header.first().map(String::as_str) != Some(TENSOR_MAGIC) {
            return Err(Error::Malformed("not a tensor data file".into()));
        }
        let field = |key: &str| -> Result<&str> {
            header
                .iter()
                .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
                .ok_or_else(|| Error::Malformed(format!("tensor header lacks `{key}`")))
        };
        let int = |key: &str| -> Result<usize> {
            field(key)?
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("bad `{key}` in tensor header")))
        };
        let version: u32 = field("version")?
            .trim()
            .parse()
            .map_err(|_| Error::Malformed("bad version".into()))?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TENSOR_FORMAT_VERSION,
            });
        }
        let (n, d, o) = (int("n")?, int("d")?, int("o")?);
        let marginals = field("marginals")?
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<PolyFamily>>>()?;
        let provenance: String = serde_json::from_str(field("provenance")?)
            .map_err(|e| Error::Malformed(format!("bad provenance: {e}")))?;
        let expected = d
            .checked_add(o)
            .and_then(|w| w.checked_mul(n))
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Malformed("declared shape overflows the payload length".into()))?;
        if rest.len() != expected {
            return Err(Error::Malformed(format!(
                "header declares N={n}, D={d}, O={o} ({expected} bytes) but payload has {} bytes",
                rest.len()
            )));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (x, y) = values.split_at(n * d);
        let inputs = Array2::from_shape_vec((n, d), x.to_vec()).expect("checked length");
        let targets = Array2::from_shape_vec((n, o), y.to_vec()).expect("checked length");
        Self::new(inputs, targets, marginals, provenance)
            .map_err(|e| Error::Malformed(format!("inconsistent tensor header: {e}")))
    }

    pub fn save_tensor(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tensor_bytes()?)?;
        Ok(())
    }

    pub fn load_tensor(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_bytes(&fs::read(path)?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Malformed(e.to_string())
    }
}

fn broadcast_marginals(marginals: &[PolyFamily], d: usize) -> Result<Vec<PolyFamily>> {
    match marginals.len() {
        1 => Ok(vec![marginals[0]; d]),
        n if n == d => Ok(marginals.to_vec()),
        n => Err(Error::DimensionMismatch {
            context: "marginal count",
            expected: d,
            found: n,
        }),
    }
}

/// Draws `n` rows from the product of `marginals` and evaluates `f` on each.
/// Rows are generated in fixed blocks, each on its own stream, so the
/// result does not depend on the thread count.
pub fn sample_function(
    marginals: &[PolyFamily],
    n_outputs: usize,
    n: usize,
    seed: u64,
    tag: u64,
    f: impl Fn(&[f64], &mut [f64]) + Sync,
) -> (Array2<f64>, Array2<f64>) {
    let d = marginals.len();
    let blocks: Vec<(Array2<f64>, Array2<f64>)> = (0..n.div_ceil(ROWS_PER_STREAM))
        .into_par_iter()
        .map(|block| {
            let rows = ROWS_PER_STREAM.min(n - block * ROWS_PER_STREAM);
            let mut rng = stream_rng(seed, stream_id(&[GEN_STREAM, tag, block as u64]));
            let mut normal = PolarNormal::new();
            let mut xs = Array2::zeros((rows, d));
            let mut ys = Array2::zeros((rows, n_outputs));
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; n_outputs];
            for (mut xr, mut yr) in xs.rows_mut().into_iter().zip(ys.rows_mut()) {
                for (v, m) in x.iter_mut().zip(marginals) {
                    *v = m.sample(&mut rng, &mut normal);
                }
                f(&x, &mut y);
                xr.assign(&ndarray::ArrayView1::from(&x));
                yr.assign(&ndarray::ArrayView1::from(&y));
            }
            (xs, ys)
        })
        .collect();
    let stack = |parts: Vec<ndarray::ArrayView2<f64>>, cols: usize| {
        if parts.is_empty() {
            Array2::zeros((0, cols))
        } else {
            ndarray::concatenate(Axis(0), &parts).expect("equal widths")
        }
    };
    let inputs = stack(blocks.iter().map(|b| b.0.view()).collect(), d);
    let targets = stack(blocks.iter().map(|b| b.1.view()).collect(), n_outputs);
    (inputs, targets)
}

/// Input dimension of the 100-variable benchmark.
pub const BENCH_100D_DIM: usize = 100;

/// The 100-variable benchmark function. Inputs are 1-based in the formula,
/// so `x[0]` is `X_1`.
pub fn f100d(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let mut lin = 0.0;
    let mut cub = 0.0;
    let mut log = 0.0;
    for (k, &v) in x.iter().enumerate() {
        let i = (k + 1) as f64;
        lin += i * v;
        cub += i * v * v * v;
        log += i * (v * v + v.powi(4)).ln();
    }
    3.0 - 5.0 / d * lin + cub / d + log / (3.0 * d) + x[0] * x[1] * x[1] + x[1] * x[3] - x[2] * x[4]
        + x[50]
        + x[49] * x[53] * x[53]
}

/// Marginals of the 100-variable benchmark: U(1, 2), except X_20 ~ U(1, 3).
pub fn marginals_100d() -> Vec<PolyFamily> {
    let mut m = vec![PolyFamily::uniform(1.0, 2.0).expect("valid interval"); BENCH_100D_DIM];
    m[19] = PolyFamily::uniform(1.0, 3.0).expect("valid interval");
    m
}

pub fn gen_100d(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be ≥ 1".into()));
    }
    let marginals = marginals_100d();
    let (inputs, targets) = sample_function(&marginals, 1, n, seed, 100, |x, y| y[0] = f100d(x));
    Dataset::new(
        inputs,
        targets,
        marginals,
        format!("gen-100d n={n} seed={seed} generator={GENERATOR_NAME}"),
    )
}

/// Noiseless samples of a shallow expansion under its own marginals.
pub fn gen_planted(pce: &ShallowPce, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be ≥ 1".into()));
    }
    let o = pce.n_outputs();
    let (inputs, targets) = sample_function(&pce.families, o, n, seed, 200, |x, y| {
        let p = pce.predict(x).expect("inputs drawn from the support");
        y.copy_from_slice(p.as_slice().unwrap());
    });
    Dataset::new(
        inputs,
        targets,
        pce.families.clone(),
        format!("planted-pce n={n} seed={seed} generator={GENERATOR_NAME}"),
    )
}

/// Separable quadratic map `y = c + A x + B (x ⊙ x)` with U(−1, 1) inputs
/// and seeded coefficients; a stand-in for field-to-field regression data.
pub fn gen_quadratic_map(d: usize, o: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || o == 0 {
        return Err(Error::InvalidArgument("sizes must be ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, stream_id(&[GEN_STREAM, 301]));
    let mut normal = PolarNormal::new();
    let c: Vec<f64> = (0..o).map(|_| 1.0 + 0.5 * normal.sample(&mut rng)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let a = Array2::from_shape_fn((o, d), |_| scale * normal.sample(&mut rng));
    let b = Array2::from_shape_fn((o, d), |_| 0.5 * scale * normal.sample(&mut rng));
    let marginals = vec![PolyFamily::legendre(); d];
    let (inputs, targets) = sample_function(&marginals, o, n, seed, 300, |x, y| {
        for k in 0..o {
            y[k] = c[k]
                + x.iter()
                    .enumerate()
                    .map(|(j, v)| a[[k, j]] * v + b[[k, j]] * v * v)
                    .sum::<f64>();
        }
    });
    Dataset::new(
        inputs,
        targets,
        marginals,
        format!("quadratic-map d={d} o={o} n={n} seed={seed} generator={GENERATOR_NAME}"),
    )
}
