use super::{decode_gaussian, decode_ph, standard_normal, DecoderKind, VaeModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// How a decoded latent becomes a data point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    /// Draw from the full decoder likelihood.
    #[default]
    Sample,
    /// Report the likelihood mean.
    Mean,
}

impl FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sample" | "sample_likelihood" => Ok(GenMode::Sample),
            "mean" | "mean_only" => Ok(GenMode::Mean),
            other => Err(Error::Config(format!("unknown generation mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GenMode::Sample => "sample",
            GenMode::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    /// `(n, d)` generated points.
    pub samples: Tensor,
    /// Smallest exit rate of every decoded PH (row-major over `(n, d)`);
    /// empty for the Gaussian model.
    pub smallest_rates: Vec<f64>,
}

const CHUNK: usize = 4096;

/// Draws `n` points by decoding `z ~ N(0, I)`.
pub fn generate<R: Rng + ?Sized>(model: &VaeModel, n: usize, rng: &mut R, mode: GenMode) -> Result<Generated> {
    let d = model.data_dim();
    let mut samples = Vec::with_capacity(n * d);
    let mut smallest_rates = Vec::new();
    let mut done = 0;
    while done < n {
        let rows = CHUNK.min(n - done);
        let z = standard_normal(rows, model.latent_dim(), rng);
        match model.kind() {
            DecoderKind::Gaussian => {
                let dec = decode_gaussian(model, &z)?;
                for i in 0..rows * d {
                    let mu = dec.mu.data()[i];
                    let x = match mode {
                        GenMode::Mean => mu,
                        GenMode::Sample => {
                            let eps: f64 = rng.sample(StandardNormal);
                            gaussian_draw(mu, dec.logvar.data()[i], eps)
                        }
                    };
                    samples.push(x);
                }
            }
            DecoderKind::Ph => {
                let dec = decode_ph(model, &z)?;
                for r in 0..rows {
                    for j in 0..d {
                        let ph = dec.distribution(r, j)?;
                        smallest_rates.push(ph.smallest_rate());
                        samples.push(match mode {
                            GenMode::Mean => ph.mean(),
                            GenMode::Sample => ph.sample(rng),
                        });
                    }
                }
            }
        }
        done += rows;
    }
    Ok(Generated {
        samples: Tensor::new(n, d, samples)?,
        smallest_rates,
    })
}

/// `mu + exp(logvar / 2) * eps`; collapses to `mu` as `logvar -> -inf`.
pub fn gaussian_draw(mu: f64, logvar: f64, eps: f64) -> f64 {
    mu + (0.5 * logvar).exp() * eps
}
