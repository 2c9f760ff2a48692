//! Pareto Type-I data with independent coordinates.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::rng::{substream, tag};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub tail_index: f64,
    pub scale: f64,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_gen: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_index > 0.0 && self.tail_index.is_finite()) {
            return Err(Error::Config(format!("tail index must be positive, got {}", self.tail_index)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.dim == 0 || self.n_train == 0 || self.n_test == 0 || self.n_gen == 0 {
            return Err(Error::Config("dimension and sample counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Tensor,
    pub test: Tensor,
}

/// `x_m (1 - u)^(-1/alpha)` for `u` in `[0, 1)`.
pub fn pareto_transform(u: f64, tail_index: f64, scale: f64) -> f64 {
    scale * (1.0 - u).powf(-1.0 / tail_index)
}

/// `n x d` independent Pareto draws.
pub fn pareto_matrix<R: Rng + ?Sized>(n: usize, d: usize, tail_index: f64, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..n * d).map(|_| pareto_transform(rng.random::<f64>(), tail_index, scale)).collect();
    Tensor::new(n, d, data).expect("shape matches data length")
}

/// Train and test splits, each from its own substream of `cfg.seed`.
pub fn pareto_sample(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let key = cell_key(cfg.tail_index, cfg.dim);
    let mut train_rng = substream(cfg.seed, &[tag::TRAIN_DATA, key[0], key[1]]);
    let mut test_rng = substream(cfg.seed, &[tag::TEST_DATA, key[0], key[1]]);
    Ok(Dataset {
        train: pareto_matrix(cfg.n_train, cfg.dim, cfg.tail_index, cfg.scale, &mut train_rng),
        test: pareto_matrix(cfg.n_test, cfg.dim, cfg.tail_index, cfg.scale, &mut test_rng),
    })
}

/// Substream tags identifying a grid cell.
pub fn cell_key(tail_index: f64, dim: usize) -> [u64; 2] {
    [tail_index.to_bits(), dim as u64]
}

pub fn analytic_quantile(tail_index: f64, scale: f64, q: f64) -> f64 {
    scale * (1.0 - q).powf(-1.0 / tail_index)
}

pub fn analytic_ccdf(tail_index: f64, scale: f64, x: f64) -> f64 {
    if x <= scale {
        1.0
    } else {
        (scale / x).powf(tail_index)
    }
}

pub fn analytic_cdf(tail_index: f64, scale: f64, x: f64) -> f64 {
    1.0 - analytic_ccdf(tail_index, scale, x)
}

pub fn write_csv<W: Write>(m: &Tensor, mut w: W) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Io(format!("line {}: {e}", lineno + 1)))?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => return Err(Error::Io(format!("line {}: expected {c} columns", lineno + 1))),
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(rows, cols.unwrap_or(0), data)
}

pub fn save_csv(m: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(m, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Tensor> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
