use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{simulate_outcomes, SimConfig, SimDataset, SimWeights, SimulateError};
use crate::hypergraph::{format_hypergraph, read_hypergraph, Hypergraph};
use crate::io_util::{format_column, format_rows, write_atomic};
use crate::numerics::Tensor;

/// Files written by [`save_dataset`].
pub const DATASET_FILES: [&str; 9] = [
    "hypergraph.txt",
    "X.csv",
    "T.csv",
    "Y.csv",
    "y1.csv",
    "y0.csv",
    "tau.csv",
    "delta.csv",
    "meta.json",
];

const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightChecksums {
    w0: String,
    w1: String,
    wt: String,
    vt: String,
}

impl WeightChecksums {
    fn of(w: &SimWeights) -> Self {
        Self {
            w0: checksum(&w.w0),
            w1: checksum(&w.w1),
            wt: checksum(w.wt.data()),
            vt: checksum(&w.vt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    seed: u64,
    n: usize,
    m: usize,
    config: SimConfig,
    weight_checksums: WeightChecksums,
}

fn checksum(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn treatment_column(t: &[f64]) -> String {
    t.iter().map(|&v| if v == 1.0 { "1\n" } else { "0\n" }).collect()
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset(ds: &SimDataset, dir: impl AsRef<Path>) -> Result<(), SimulateError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = Meta {
        format_version: META_VERSION,
        seed: ds.config.seed,
        n: ds.num_nodes(),
        m: ds.h.num_edges(),
        config: ds.config,
        weight_checksums: WeightChecksums::of(&ds.weights),
    };
    let x_rows = (0..ds.x.rows()).map(|i| ds.x.row(i));
    let files: [(&str, String); 9] = [
        ("hypergraph.txt", format_hypergraph(&ds.h)),
        ("X.csv", format_rows(x_rows)),
        ("T.csv", treatment_column(&ds.t)),
        ("Y.csv", format_column(&ds.y)),
        ("y1.csv", format_column(&ds.y1)),
        ("y0.csv", format_column(&ds.y0)),
        ("tau.csv", format_column(&ds.tau)),
        ("delta.csv", format_column(&ds.delta)),
        ("meta.json", serde_json::to_string_pretty(&meta)? + "\n"),
    ];
    for (name, body) in files {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

/// Reads a directory written by [`save_dataset`]. Simulation weights are
/// re-drawn from the recorded seed and checked against the stored checksums.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SimDataset, SimulateError> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.format_version != META_VERSION {
        return Err(SimulateError::InvalidConfig(format!(
            "unsupported dataset format version {}",
            meta.format_version
        )));
    }
    meta.config.validate()?;
    let weights = SimWeights::draw(meta.config.d, meta.config.seed);
    let sums = WeightChecksums::of(&weights);
    for (name, a, b) in [
        ("w0", &sums.w0, &meta.weight_checksums.w0),
        ("w1", &sums.w1, &meta.weight_checksums.w1),
        ("wt", &sums.wt, &meta.weight_checksums.wt),
        ("vt", &sums.vt, &meta.weight_checksums.vt),
    ] {
        if a != b {
            return Err(SimulateError::ChecksumMismatch(name.into()));
        }
    }

    let h = read_hypergraph(dir.join("hypergraph.txt"))?;
    let n = meta.n;
    if h.num_nodes() != n || h.num_edges() != meta.m {
        return Err(SimulateError::ShapeMismatch(format!(
            "hypergraph has {} nodes and {} edges, meta says {} and {}",
            h.num_nodes(),
            h.num_edges(),
            n,
            meta.m
        )));
    }
    let x = read_matrix(&dir.join("X.csv"), Some(n))?;
    if x.cols() != meta.config.d {
        return Err(SimulateError::ShapeMismatch(format!(
            "X.csv has {} columns, d = {}",
            x.cols(),
            meta.config.d
        )));
    }
    let column = |name: &str| read_column(&dir.join(name), Some(n));
    let t = read_treatments(&dir.join("T.csv"), Some(n))?;
    Ok(SimDataset {
        h,
        x,
        t,
        y: column("Y.csv")?,
        y1: column("y1.csv")?,
        y0: column("y0.csv")?,
        tau: column("tau.csv")?,
        delta: column("delta.csv")?,
        weights,
        config: meta.config,
    })
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>, SimulateError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| SimulateError::Parse {
                    file: file_label(path),
                    line: k + 1,
                    msg: format!("`{}`: {e}", f.trim()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn expect_rows(path: &Path, found: usize, expected: Option<usize>) -> Result<(), SimulateError> {
    match expected {
        Some(e) if e != found => Err(SimulateError::RowCountMismatch {
            what: file_label(path),
            expected: e,
            found,
        }),
        _ => Ok(()),
    }
}

fn read_matrix(path: &Path, expected: Option<usize>) -> Result<Tensor, SimulateError> {
    let rows = parse_rows(path)?;
    expect_rows(path, rows.len(), expected)?;
    if let Some(first) = rows.first() {
        if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != first.len()) {
            return Err(SimulateError::Parse {
                file: file_label(path),
                line: k + 1,
                msg: format!("{} fields, expected {}", r.len(), first.len()),
            });
        }
    }
    Tensor::from_rows(&rows).map_err(|e| SimulateError::ShapeMismatch(e.to_string()))
}

fn read_column(path: &Path, expected: Option<usize>) -> Result<Vec<f64>, SimulateError> {
    let rows = parse_rows(path)?;
    expect_rows(path, rows.len(), expected)?;
    rows.into_iter()
        .enumerate()
        .map(|(k, r)| match r.as_slice() {
            [v] => Ok(*v),
            _ => Err(SimulateError::Parse {
                file: file_label(path),
                line: k + 1,
                msg: format!("{} fields, expected 1", r.len()),
            }),
        })
        .collect()
}

fn read_treatments(path: &Path, expected: Option<usize>) -> Result<Vec<f64>, SimulateError> {
    let t = read_column(path, expected)?;
    if let Some(k) = t.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(SimulateError::Parse {
            file: file_label(path),
            line: k + 1,
            msg: format!("treatment {} is not 0 or 1", t[k]),
        });
    }
    Ok(t)
}

/// Real covariates, treatments and structure, optionally with observed
/// outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularData {
    pub h: Hypergraph,
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

impl TabularData {
    /// Simulated outcomes on top of the loaded covariates and treatments.
    /// `cfg.d` is taken from the feature matrix.
    pub fn simulate(&self, cfg: &SimConfig) -> Result<SimDataset, SimulateError> {
        let cfg = SimConfig { d: self.x.cols(), ..*cfg };
        simulate_outcomes(&self.h, &self.x, &self.t, &cfg)
    }

    /// Rescales every feature column to zero mean and unit variance;
    /// constant columns are only centered.
    pub fn standardize(&mut self) {
        let (n, d) = self.x.shape();
        for j in 0..d {
            let mean = (0..n).map(|i| self.x.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (self.x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            for i in 0..n {
                let v = self.x.get(i, j) - mean;
                self.x.set(i, j, if sd > 0.0 { v / sd } else { v });
            }
        }
    }
}

/// Loads headerless CSV features and 0/1 treatments, an optional outcome
/// column, and a hypergraph file.
pub fn load_tabular_dataset(
    features: impl AsRef<Path>,
    treatments: impl AsRef<Path>,
    outcomes: Option<&Path>,
    hypergraph: impl AsRef<Path>,
) -> Result<TabularData, SimulateError> {
    let x = read_matrix(features.as_ref(), None)?;
    let n = x.rows();
    let t = read_treatments(treatments.as_ref(), Some(n))?;
    let y = outcomes.map(|p| read_column(p, Some(n))).transpose()?;
    let h: Hypergraph = read_hypergraph(hypergraph.as_ref())?;
    if h.num_nodes() != n {
        return Err(SimulateError::RowCountMismatch {
            what: file_label(hypergraph.as_ref()),
            expected: n,
            found: h.num_nodes(),
        });
    }
    Ok(TabularData { h, x, t, y })
}
