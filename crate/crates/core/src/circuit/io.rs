//! Model files.
//!
//! ```text
//! DEEPPCE-MODEL
//! version 1
//! {json header: structure, shapes, seeds, marginals, payload length, sha256}
//! <little-endian f64 payload>
//! ```
//!
//! The payload holds every sum layer in forward order: weights (row major),
//! bias, then, when batch norm is present, gamma, beta, running mean and
//! running variance.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AffineSum, BatchNorm, Block, CircuitModel, Leaf, ModelConfig, RegionGraph};
use crate::basis::MultiIndexSet;
use crate::error::{Error, Result};
use crate::orthopoly::PolyFamily;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "DEEPPCE-MODEL";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    marginals: Vec<PolyFamily>,
    graph: RegionGraph,
    leaf_bases: Vec<MultiIndexSet>,
    sums: Vec<SumShape>,
    payload_bytes: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct SumShape {
    n_out: usize,
    n_in: usize,
    norm: Option<NormShape>,
}

#[derive(Serialize, Deserialize)]
struct NormShape {
    eps: f64,
    has_running_stats: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_all(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .filter(|&l| l <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("payload shorter than its declared shapes".into()))?;
        let (head, rest) = self.bytes.split_at(len);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.take(n)?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Malformed("tensor shape overflows".into()))?;
        Array2::from_shape_vec((rows, cols), self.take(n)?)
            .map_err(|e| Error::Malformed(e.to_string()))
    }

    fn sum(&mut self, shape: &SumShape) -> Result<AffineSum> {
        let weights = self.matrix(shape.n_out, shape.n_in)?;
        let bias = self.vector(shape.n_out)?;
        let norm = match &shape.norm {
            None => None,
            Some(ns) => {
                let gamma = self.vector(shape.n_out)?;
                let beta = self.vector(shape.n_out)?;
                let stats = if ns.has_running_stats { shape.n_out } else { 0 };
                Some(BatchNorm {
                    gamma,
                    beta,
                    running_mean: self.vector(stats)?,
                    running_var: self.vector(stats)?,
                    eps: ns.eps,
                })
            }
        };
        Ok(AffineSum { weights, bias, norm })
    }
}

impl CircuitModel {
    /// Serializes the model to bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.audit()?;
        let mut payload = Vec::new();
        let mut sums = Vec::new();
        for (_, s) in self.sums() {
            push_all(&mut payload, s.weights.iter().copied());
            push_all(&mut payload, s.bias.iter().copied());
            let norm = s.norm.as_ref().map(|n| {
                push_all(&mut payload, n.gamma.iter().copied());
                push_all(&mut payload, n.beta.iter().copied());
                push_all(&mut payload, n.running_mean.iter().copied());
                push_all(&mut payload, n.running_var.iter().copied());
                NormShape {
                    eps: n.eps,
                    has_running_stats: n.has_running_stats(),
                }
            });
            sums.push(SumShape {
                n_out: s.n_out(),
                n_in: s.n_in(),
                norm,
            });
        }
        let header = Header {
            config: self.config.clone(),
            marginals: self.marginals.clone(),
            graph: self.graph.clone(),
            leaf_bases: self.leaves.iter().map(|l| l.basis.clone()).collect(),
            sums,
            payload_bytes: payload.len(),
            sha256: hex(&Sha256::digest(&payload)),
        };
        let mut out = Vec::with_capacity(payload.len() + 4096);
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "version {MODEL_FORMAT_VERSION}")?;
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut line = || -> Result<&[u8]> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Malformed("truncated header".into()))?;
            let (l, r) = rest.split_at(end);
            rest = &r[1..];
            Ok(l)
        };
        if line()? != MAGIC.as_bytes() {
            return Err(Error::Malformed("not a model file".into()));
        }
        let version = std::str::from_utf8(line()?)
            .ok()
            .and_then(|l| l.strip_prefix("version "))
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Malformed("missing version line".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(line()?)
            .map_err(|e| Error::Malformed(format!("bad header: {e}")))?;
        if rest.len() != header.payload_bytes {
            return Err(Error::Malformed(format!(
                "payload has {} bytes, header declares {}",
                rest.len(),
                header.payload_bytes
            )));
        }
        let found = hex(&Sha256::digest(rest));
        if found != header.sha256 {
            return Err(Error::Checksum {
                expected: header.sha256,
                found,
            });
        }
        let n_leaves = header.graph.scopes.len();
        let n_block_sums: usize = header.graph.layers.iter().map(|l| l.pairs.len()).sum();
        if header.leaf_bases.len() != n_leaves || header.sums.len() != n_leaves + n_block_sums + 1 {
            return Err(Error::Malformed("layer count disagrees with region graph".into()));
        }
        let mut reader = Reader { bytes: rest };
        let mut shapes = header.sums.iter();
        let mut leaves = Vec::with_capacity(n_leaves);
        for (scope, basis) in header.graph.scopes.iter().zip(header.leaf_bases) {
            let families = scope
                .iter()
                .map(|&v| header.marginals.get(v).copied())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Malformed("scope references a missing marginal".into()))?;
            leaves.push(Leaf {
                scope: scope.clone(),
                basis,
                families,
                sum: reader.sum(shapes.next().unwrap())?,
            });
        }
        let mut blocks = Vec::with_capacity(header.graph.layers.len());
        for layer in &header.graph.layers {
            let sums = layer
                .pairs
                .iter()
                .map(|_| reader.sum(shapes.next().unwrap()))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block {
                layer: layer.clone(),
                sums,
            });
        }
        let head = reader.sum(shapes.next().unwrap())?;
        if !reader.bytes.is_empty() {
            return Err(Error::Malformed("trailing payload bytes".into()));
        }
        let model = CircuitModel {
            config: header.config,
            marginals: header.marginals,
            graph: header.graph,
            leaves,
            blocks,
            head,
        };
        model
            .audit()
            .map_err(|e| Error::Malformed(format!("inconsistent model: {e}")))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::tests::randomize;

    fn model() -> CircuitModel {
        let mut m = CircuitModel::build(
            ModelConfig::new(5, 2, 2, 2, 3, 11),
            vec![PolyFamily::uniform(1.0, 2.0).unwrap(); 5],
        )
        .unwrap();
        randomize(&mut m, 4);
        // keep one batch norm with stats and one without
        let mut bn = BatchNorm::new(3, 1e-5);
        bn.running_mean = Array1::from(vec![0.1, -0.2, 1.0 / 3.0]);
        bn.running_var = Array1::from(vec![1.5, 0.25, std::f64::consts::PI]);
        bn.gamma[1] = 0.7;
        m.leaves[0].sum.norm = Some(bn);
        m.blocks[0].sums[0].norm = Some(BatchNorm::new(3, 1e-3));
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = CircuitModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back, m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dpce");
        m.save(&path).unwrap();
        assert_eq!(CircuitModel::load(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let bytes = model().to_bytes().unwrap();
        for cut in [5, 20, bytes.len() - 8] {
            assert!(matches!(
                CircuitModel::from_bytes(&bytes[..cut]),
                Err(Error::Malformed(_))
            ));
        }
    }

    #[test]
    fn version_mismatch() {
        let bytes = model().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("version 1", "version 9");
        let mut altered = text.into_bytes();
        altered.extend_from_slice(&bytes[40..]);
        assert!(matches!(
            CircuitModel::from_bytes(&altered),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = model().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        assert!(matches!(
            CircuitModel::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }
}
