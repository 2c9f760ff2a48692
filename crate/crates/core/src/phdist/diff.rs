use super::kernel::{log_density_grad, truncation_point};
use super::{DEFAULT_DENSITY_FLOOR, DEFAULT_MAX_TERMS, DEFAULT_TOLERANCE};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Counters gathered while evaluating PH log-likelihoods.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhTelemetry {
    pub evaluations: u64,
    /// Evaluations whose density was zero and got clamped to the floor.
    pub clamped: u64,
    pub max_terms: u64,
    pub total_terms: u64,
}

impl PhTelemetry {
    pub fn merge(&mut self, other: &PhTelemetry) {
        self.evaluations += other.evaluations;
        self.clamped += other.clamped;
        self.max_terms = self.max_terms.max(other.max_terms);
        self.total_terms += other.total_terms;
    }
}

/// Settings for the differentiable log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodOptions {
    pub tolerance: f64,
    pub max_terms: u64,
    pub density_floor: f64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_terms: DEFAULT_MAX_TERMS,
            density_floor: DEFAULT_DENSITY_FLOOR,
        }
    }
}

/// Per-row PH log-density recorded on the tape.
///
/// `init` and `rates` are `(batch, m)` tape values (one series-form PH per
/// row) and `x` holds one positive observation per row. Returns a
/// `(batch, 1)` column of log-densities. Each row picks its own
/// uniformization rate `max(rates)` and truncation length.
pub fn logpdf_diff(
    tape: &mut Tape,
    init: Var,
    rates: Var,
    x: &[f64],
    opts: &LikelihoodOptions,
    telemetry: &mut PhTelemetry,
) -> Result<Var> {
    let [b, m] = tape.shape(init);
    if tape.shape(rates) != [b, m] || x.len() != b {
        return Err(Error::ShapeMismatch {
            op: "ph_logpdf",
            lhs: [b, m],
            rhs: tape.shape(rates),
        });
    }
    let log_floor = opts.density_floor.ln();
    let mut values = Vec::with_capacity(b);
    let mut d_init = Vec::with_capacity(b * m);
    let mut d_rates = Vec::with_capacity(b * m);
    {
        let init_v = tape.value(init);
        let rates_v = tape.value(rates);
        for (row, &xi) in x.iter().enumerate() {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(Error::Domain {
                    op: "ph_logpdf",
                    detail: format!("observation {xi} is not strictly positive"),
                });
            }
            let a = init_v.row(row);
            let r = rates_v.row(row);
            if a.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || r.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::InvalidPh(format!("row {row} has invalid parameters")));
            }
            let q = r.iter().copied().fold(0.0, f64::max);
            if q <= 0.0 {
                return Err(Error::InvalidPh(format!("row {row} has no positive rate")));
            }
            let terms = truncation_point(q * xi, opts.tolerance, opts.max_terms)?;
            let g = log_density_grad(a, r, xi, q, terms, log_floor);
            telemetry.evaluations += 1;
            telemetry.total_terms += terms;
            telemetry.max_terms = telemetry.max_terms.max(terms);
            if g.clamped {
                telemetry.clamped += 1;
            }
            values.push(g.value);
            d_init.extend(g.d_init);
            d_rates.extend(g.d_rates);
        }
    }
    tape.row_function(
        "ph_logpdf",
        &[init, rates],
        Tensor::column(values),
        vec![Tensor::new(b, m, d_init)?, Tensor::new(b, m, d_rates)?],
    )
}
