//! Gaussian-encoder VAEs with a swappable decoder likelihood.
//!
//! Both models share the encoder, the reparameterized latent and the KL
//! term. They differ only in the decoder head:
//!
//! * `gaussian`: `2 * d` outputs, a mean and a log-variance per dimension.
//! * `ph`: `2 * m * d` outputs. For dimension `j` the block
//!   `[j*2m, j*2m + m)` holds initial-vector logits (softmax) and
//!   `[j*2m + m, (j+1)*2m)` holds raw rates, mapped through softplus and a
//!   cumulative sum so that `0 < rate_1 <= ... <= rate_m`.

mod checkpoint;
mod generate;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use generate::{generate, GenMode, Generated};
pub use train::{train, TrainConfig, TrainReport};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::neural::{Mlp, HIDDEN};
use crate::phdist::{logpdf_diff, CanonicalPh, LikelihoodOptions, PhTelemetry};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const LATENT_DIM: usize = 8;
pub const PHASES: usize = 10;
/// Log-variances of both Gaussian heads are clamped to `[-LOGVAR_BOUND, LOGVAR_BOUND]`.
pub const LOGVAR_BOUND: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Gaussian,
    Ph,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Gaussian => "gaussian",
            DecoderKind::Ph => "ph",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "gauss" => Ok(DecoderKind::Gaussian),
            "ph" | "phase-type" => Ok(DecoderKind::Ph),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    kind: DecoderKind,
    data_dim: usize,
    latent_dim: usize,
    phases: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub likelihood: LikelihoodOptions,
}

impl VaeModel {
    /// Zero-initialized model; call [`VaeModel::init_params`] before training.
    pub fn new(kind: DecoderKind, data_dim: usize, latent_dim: usize, hidden: usize, phases: usize) -> Result<Self> {
        if data_dim == 0 || latent_dim == 0 || phases == 0 {
            return Err(Error::Config("dimensions and phase count must be positive".into()));
        }
        let head = head_width(kind, data_dim, phases);
        Ok(Self {
            kind,
            data_dim,
            latent_dim,
            phases,
            encoder: Mlp::two_hidden(data_dim, hidden, 2 * latent_dim)?,
            decoder: Mlp::two_hidden(latent_dim, hidden, head)?,
            likelihood: LikelihoodOptions::default(),
        })
    }

    /// Latent 8, hidden 64, 10 phases.
    pub fn standard(kind: DecoderKind, data_dim: usize) -> Result<Self> {
        Self::new(kind, data_dim, LATENT_DIM, HIDDEN, PHASES)
    }

    pub(crate) fn from_networks(
        kind: DecoderKind,
        data_dim: usize,
        latent_dim: usize,
        phases: usize,
        encoder: Mlp,
        decoder: Mlp,
    ) -> Result<Self> {
        if encoder.input_width() != data_dim
            || encoder.output_width() != 2 * latent_dim
            || decoder.input_width() != latent_dim
            || decoder.output_width() != head_width(kind, data_dim, phases)
        {
            return Err(Error::Config("network widths do not match the model dimensions".into()));
        }
        Ok(Self {
            kind,
            data_dim,
            latent_dim,
            phases,
            encoder,
            decoder,
            likelihood: LikelihoodOptions::default(),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.encoder.init_params(rng);
        self.decoder.init_params(rng);
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names("encoder");
        n.extend(self.decoder.param_names("decoder"));
        n
    }
}

pub fn head_width(kind: DecoderKind, data_dim: usize, phases: usize) -> usize {
    match kind {
        DecoderKind::Gaussian => 2 * data_dim,
        DecoderKind::Ph => 2 * phases * data_dim,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDecoderOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Raw PH head output, `(batch, 2 * m * d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhDecoderOutput {
    pub head: Tensor,
    pub phases: usize,
}

impl PhDecoderOutput {
    pub fn data_dim(&self) -> usize {
        self.head.cols() / (2 * self.phases)
    }

    /// Canonical PH for batch row `row`, data dimension `dim`.
    pub fn distribution(&self, row: usize, dim: usize) -> Result<CanonicalPh> {
        ph_from_head(self.head.row(row), dim, self.phases)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Plain-arithmetic counterpart of the tape transform for one block.
pub fn ph_from_head(head_row: &[f64], dim: usize, phases: usize) -> Result<CanonicalPh> {
    let base = dim * 2 * phases;
    let logits = &head_row[base..base + phases];
    let raw = &head_row[base + phases..base + 2 * phases];
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let init = e.iter().map(|v| v / z).collect();
    let mut acc = 0.0;
    let rates = raw
        .iter()
        .map(|&r| {
            acc += softplus(r).max(f64::MIN_POSITIVE);
            acc
        })
        .collect();
    CanonicalPh::new(init, rates)
}

// ---------------------------------------------------------------------------
// Graph builders. The value-level functions below run these on a fresh tape
// so training and inspection share one code path.

/// Encoder forward; returns `(mu, clamped logvar)`.
pub fn encode_on(tape: &mut Tape, model: &VaeModel, bound: &crate::neural::BoundMlp, x: Var) -> Result<(Var, Var)> {
    let out = model.encoder.forward(tape, bound, x)?;
    let dz = model.latent_dim;
    let mu = tape.narrow_cols(out, 0, dz)?;
    let lv = tape.narrow_cols(out, dz, dz)?;
    let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    Ok((mu, lv))
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize_on(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.mul(std, noise)?;
    tape.add(mu, eps)
}

/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`, averaged over the batch.
pub fn kl_on(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let batch = tape.shape(mu)[0] as f64;
    let m2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(m2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0)?;
    let total = tape.sum(s)?;
    tape.scale(total, 0.5 / batch)
}

/// Gaussian log-likelihood of `x` under a `(batch, 2d)` head, batch-averaged.
pub fn gaussian_loglik_on(tape: &mut Tape, head: Var, x: Var) -> Result<Var> {
    let [batch, width] = tape.shape(head);
    let d = width / 2;
    let mu = tape.narrow_cols(head, 0, d)?;
    let lv = tape.narrow_cols(head, d, d)?;
    let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    gaussian_terms_on(tape, mu, lv, x, batch)
}

fn gaussian_terms_on(tape: &mut Tape, mu: Var, lv: Var, x: Var, batch: usize) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(lv)?;
    let prec = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, prec)?;
    let s = tape.add(quad, lv)?;
    let s = tape.scale(s, 0.5)?;
    let s = tape.add_scalar(s, HALF_LN_2PI)?;
    let total = tape.sum(s)?;
    tape.scale(total, -1.0 / batch as f64)
}

/// PH log-likelihood of `x` under a `(batch, 2md)` head, batch-averaged.
pub fn ph_loglik_on(
    tape: &mut Tape,
    head: Var,
    x: &Tensor,
    phases: usize,
    opts: &LikelihoodOptions,
    telemetry: &mut PhTelemetry,
) -> Result<Var> {
    let [batch, width] = tape.shape(head);
    let d = width / (2 * phases);
    if x.cols() != d || x.rows() != batch {
        return Err(Error::ShapeMismatch {
            op: "ph_loglik",
            lhs: [batch, d],
            rhs: x.shape(),
        });
    }
    let mut total: Option<Var> = None;
    for j in 0..d {
        let logits = tape.narrow_cols(head, j * 2 * phases, phases)?;
        let raw = tape.narrow_cols(head, j * 2 * phases + phases, phases)?;
        let init = tape.softmax(logits, Axis::Cols)?;
        let sp = tape.softplus(raw)?;
        let rates = tape.cumsum(sp, Axis::Cols)?;
        let col = x.column_values(j);
        let lp = logpdf_diff(tape, init, rates, &col, opts, telemetry)?;
        total = Some(match total {
            None => lp,
            Some(t) => tape.add(t, lp)?,
        });
    }
    let total = total.expect("data dimension is positive");
    let s = tape.sum(total)?;
    tape.scale(s, 1.0 / batch as f64)
}

// ---------------------------------------------------------------------------
// Value-level API.

pub fn encode(model: &VaeModel, x: &Tensor) -> Result<EncoderOutput> {
    if x.cols() != model.data_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: x.shape(),
            rhs: [x.rows(), model.data_dim],
        });
    }
    let mut tape = Tape::new();
    let bound = model.encoder.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (mu, lv) = encode_on(&mut tape, model, &bound, xv)?;
    Ok(EncoderOutput {
        mu: tape.value(mu).clone(),
        logvar: tape.value(lv).clone(),
    })
}

pub fn reparameterize(enc: &EncoderOutput, noise: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mu = tape.constant(enc.mu.clone());
    let lv = tape.constant(enc.logvar.clone());
    let n = tape.constant(noise.clone());
    let z = reparameterize_on(&mut tape, mu, lv, n)?;
    Ok(tape.value(z).clone())
}

pub fn kl_standard_normal(enc: &EncoderOutput) -> Result<f64> {
    let mut tape = Tape::new();
    let mu = tape.constant(enc.mu.clone());
    let lv = tape.constant(enc.logvar.clone());
    let kl = kl_on(&mut tape, mu, lv)?;
    tape.value(kl).item()
}

pub fn gaussian_loglik(dec: &GaussianDecoderOutput, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let mu = tape.constant(dec.mu.clone());
    let lv = tape.constant(dec.logvar.clone());
    let xv = tape.constant(x.clone());
    let l = gaussian_terms_on(&mut tape, mu, lv, xv, x.rows())?;
    tape.value(l).item()
}

pub fn ph_loglik(dec: &PhDecoderOutput, x: &Tensor, opts: &LikelihoodOptions) -> Result<f64> {
    let mut tape = Tape::new();
    let head = tape.constant(dec.head.clone());
    let mut tel = PhTelemetry::default();
    let l = ph_loglik_on(&mut tape, head, x, dec.phases, opts, &mut tel)?;
    tape.value(l).item()
}

pub fn decode_gaussian(model: &VaeModel, z: &Tensor) -> Result<GaussianDecoderOutput> {
    let head = model.decoder.predict(z)?;
    let d = model.data_dim;
    let logvar = head.narrow_cols(d, d)?.map(|v| v.clamp(-LOGVAR_BOUND, LOGVAR_BOUND));
    Ok(GaussianDecoderOutput {
        mu: head.narrow_cols(0, d)?,
        logvar,
    })
}

pub fn decode_ph(model: &VaeModel, z: &Tensor) -> Result<PhDecoderOutput> {
    Ok(PhDecoderOutput {
        head: model.decoder.predict(z)?,
        phases: model.phases,
    })
}

/// Loss and gradients for one batch under fixed reparameterization noise.
#[derive(Clone, Debug)]
pub struct LossEval {
    /// Negative ELBO, batch-averaged.
    pub loss: f64,
    pub loglik: f64,
    pub kl: f64,
    /// One gradient per parameter, in [`VaeModel::params`] order.
    pub grads: Vec<Tensor>,
    pub telemetry: PhTelemetry,
}

fn build_loss(model: &VaeModel, tape: &mut Tape, x: &Tensor, noise: &Tensor, tel: &mut PhTelemetry) -> Result<(Var, Var, Var, Vec<Var>)> {
    if x.cols() != model.data_dim || noise.shape() != [x.rows(), model.latent_dim] {
        return Err(Error::ShapeMismatch {
            op: "elbo",
            lhs: x.shape(),
            rhs: noise.shape(),
        });
    }
    let enc_b = model.encoder.bind(tape);
    let dec_b = model.decoder.bind(tape);
    let xv = tape.constant(x.clone());
    let nv = tape.constant(noise.clone());
    let (mu, lv) = encode_on(tape, model, &enc_b, xv)?;
    let z = reparameterize_on(tape, mu, lv, nv)?;
    let kl = kl_on(tape, mu, lv)?;
    let head = model.decoder.forward(tape, &dec_b, z)?;
    let ll = match model.kind {
        DecoderKind::Gaussian => gaussian_loglik_on(tape, head, xv)?,
        DecoderKind::Ph => ph_loglik_on(tape, head, x, model.phases, &model.likelihood, tel)?,
    };
    let loss = tape.sub(kl, ll)?;
    let mut vars = enc_b.vars();
    vars.extend(dec_b.vars());
    Ok((loss, ll, kl, vars))
}

/// Negative ELBO and its gradient for a batch with the given noise.
pub fn loss_and_grads(model: &VaeModel, x: &Tensor, noise: &Tensor) -> Result<LossEval> {
    let mut tape = Tape::new();
    let mut telemetry = PhTelemetry::default();
    let (loss, ll, kl, vars) = build_loss(model, &mut tape, x, noise, &mut telemetry)?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| {
            let [r, c] = tape.shape(*v);
            Tensor::zeros(r, c)
        }))
        .collect();
    Ok(LossEval {
        loss: tape.value(loss).item()?,
        loglik: tape.value(ll).item()?,
        kl: tape.value(kl).item()?,
        grads,
        telemetry,
    })
}

/// Negative ELBO for fixed noise, no gradient.
pub fn loss_with_noise(model: &VaeModel, x: &Tensor, noise: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let mut telemetry = PhTelemetry::default();
    let (loss, ..) = build_loss(model, &mut tape, x, noise, &mut telemetry)?;
    tape.value(loss).item()
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data length")
}

/// Single-sample reparameterized ELBO, batch-averaged.
pub fn elbo<R: Rng + ?Sized>(model: &VaeModel, x: &Tensor, rng: &mut R) -> Result<f64> {
    let noise = standard_normal(x.rows(), model.latent_dim, rng);
    Ok(-loss_with_noise(model, x, &noise)?)
}
