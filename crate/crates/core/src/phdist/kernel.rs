//! Uniformization kernels for series-form phase-type densities.
//!
//! With `q >= max(rates)` the uniformized chain `P = I + A/q` of a series
//! sub-generator is upper bidiagonal: phase `i` stays with probability
//! `1 - rate_i/q` and moves on with probability `rate_i/q`. One step of the
//! row recurrence `v <- v P` is O(m).
//!
//! Row vectors are carried as `(mantissa vector, natural-log scale)` and the
//! Poisson-weighted sum is accumulated in log space, so densities far below
//! the smallest positive `f64` still yield a finite log-density.

use crate::error::{Error, Result};

const RESCALE_HI: f64 = 1.157_920_892_373_162e77; // 2^256
const RESCALE_LO: f64 = 8.636_168_555_094_445e-78; // 2^-256

/// Smallest `K` with Poisson(`qx`) mass beyond `K` below `tol`.
///
/// Weights are taken relative to the mode and the right tail is summed
/// directly from the far end, so there is no `1 - cdf` cancellation even
/// for large `qx`. Fails when `K` would exceed `cap`, reporting the
/// required count (estimated when it is far beyond the cap).
pub fn truncation_point(qx: f64, tol: f64, cap: u64) -> Result<u64> {
    if !(qx >= 0.0 && qx.is_finite()) {
        return Err(Error::Domain {
            op: "truncation_point",
            detail: format!("qx must be finite and non-negative, got {qx}"),
        });
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Domain {
            op: "truncation_point",
            detail: format!("tolerance must lie in (0, 1), got {tol}"),
        });
    }
    if qx == 0.0 {
        return Ok(0);
    }
    let mode = qx.floor() as u64;
    if mode > cap {
        let required = (qx + 10.0 * qx.sqrt() + 10.0).ceil() as u64;
        return Err(Error::TruncationCap { required, cap });
    }
    // Relative weights r_k = w_k / w_mode.
    let negligible = tol * 1e-6;
    let mut total = 1.0;
    let mut r = 1.0;
    let mut k = mode;
    while k > 0 && r > negligible {
        r *= k as f64 / qx;
        k -= 1;
        total += r;
    }
    let mut right = Vec::new();
    let mut r = 1.0;
    let mut k = mode;
    loop {
        k += 1;
        r *= qx / k as f64;
        right.push(r);
        let ratio = qx / (k + 1) as f64;
        // geometric bound on everything past k
        if ratio < 1.0 && r * ratio / (1.0 - ratio) < negligible * total {
            break;
        }
    }
    total += right.iter().sum::<f64>();
    // tail[i] = mass strictly beyond mode + i, scanned from the far end
    let mut tail = 0.0;
    let mut answer = mode + right.len() as u64;
    for (i, w) in right.iter().enumerate().rev() {
        let beyond_prev = tail + w;
        if beyond_prev / total >= tol {
            answer = mode + i as u64 + 1;
            break;
        }
        tail = beyond_prev;
        if i == 0 {
            answer = mode;
        }
    }
    // below the mode the tail is at least half the mass, never below tol < 0.5;
    // for tiny qx the mode is 0 and K = 0 may already qualify
    if answer > cap {
        return Err(Error::TruncationCap { required: answer, cap });
    }
    Ok(answer)
}

/// Running `ln(sum(exp(terms)))`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LogSum {
    max: f64,
    acc: f64,
}

impl LogSum {
    pub(crate) fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            acc: 0.0,
        }
    }

    pub(crate) fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.acc = self.acc * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.acc += (log_term - self.max).exp();
        }
    }

    pub(crate) fn ln(&self) -> f64 {
        if self.acc == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.acc.ln()
        }
    }
}

/// Uniformized series chain: per-phase stay/move probabilities.
pub(crate) struct SeriesChain {
    stay: Vec<f64>,
    advance: Vec<f64>,
}

impl SeriesChain {
    pub(crate) fn new(rates: &[f64], q: f64) -> Self {
        Self {
            stay: rates.iter().map(|&r| (q - r) / q).collect(),
            advance: rates.iter().map(|&r| r / q).collect(),
        }
    }

    /// `v <- v P` in place.
    fn step_row(&self, v: &mut [f64]) {
        let m = v.len();
        for i in (1..m).rev() {
            v[i] = v[i] * self.stay[i] + v[i - 1] * self.advance[i - 1];
        }
        v[0] *= self.stay[0];
    }

    /// `h <- P h` in place.
    fn step_col(&self, h: &mut [f64]) {
        let m = h.len();
        for i in 0..m - 1 {
            h[i] = h[i] * self.stay[i] + h[i + 1] * self.advance[i];
        }
        h[m - 1] *= self.stay[m - 1];
    }
}

/// Brings the largest magnitude of `v` into `[2^-256, 2^256]` using an exact
/// power-of-two factor, folding it into `log_scale`.
fn renormalize(v: &mut [f64], log_scale: &mut f64) {
    let mx = v.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if mx == 0.0 || (RESCALE_LO..=RESCALE_HI).contains(&mx) {
        return;
    }
    let e = mx.log2().floor() as i32;
    let factor = 2f64.powi(-e);
    for x in v.iter_mut() {
        *x *= factor;
    }
    *log_scale += f64::from(e) * std::f64::consts::LN_2;
}

/// What the forward sweep accumulates per step.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Target {
    /// `lambda_m * v_k[m]`: the density.
    Density,
    /// `sum(v_k)`: the survival function.
    Survival,
}

/// Forward sweep returning `ln(sum_k w_k * g(v_k))` for `g` given by `target`.
pub(crate) fn log_sweep(
    init: &[f64],
    rates: &[f64],
    x: f64,
    q: f64,
    terms: u64,
    target: Target,
) -> f64 {
    let chain = SeriesChain::new(rates, q);
    let m = rates.len();
    let qx = q * x;
    let ln_qx = qx.ln();
    let ln_exit = rates[m - 1].ln();
    let mut v = init.to_vec();
    let mut log_scale = 0.0;
    let mut log_w = -qx;
    let mut acc = LogSum::new();
    for k in 0..=terms {
        if k > 0 {
            log_w += ln_qx - (k as f64).ln();
        }
        let g = match target {
            Target::Density => v[m - 1],
            Target::Survival => v.iter().sum(),
        };
        if g > 0.0 {
            let extra = if target == Target::Density { ln_exit } else { 0.0 };
            acc.add(log_w + log_scale + g.ln() + extra);
        }
        if k < terms {
            chain.step_row(&mut v);
            renormalize(&mut v, &mut log_scale);
        }
    }
    acc.ln()
}

/// Log-density with its gradient with respect to the initial vector and the
/// rates.
#[derive(Clone, Debug, PartialEq)]
pub struct LogDensityGrad {
    pub value: f64,
    pub d_init: Vec<f64>,
    pub d_rates: Vec<f64>,
    /// Number of uniformization terms beyond the zeroth.
    pub terms: u64,
    /// True when the density was zero and the value is the floor.
    pub clamped: bool,
}

/// Log-density and gradient by a forward/adjoint pair of sweeps.
///
/// The uniformization rate is held fixed while differentiating: the exact
/// series does not depend on `q`, so the partials at fixed `q` are the true
/// partials up to the truncation error.
pub(crate) fn log_density_grad(
    init: &[f64],
    rates: &[f64],
    x: f64,
    q: f64,
    terms: u64,
    log_floor: f64,
) -> LogDensityGrad {
    let m = rates.len();
    let chain = SeriesChain::new(rates, q);
    let qx = q * x;
    let ln_qx = qx.ln();
    let exit = rates[m - 1];
    let ln_exit = exit.ln();
    let n = terms as usize + 1;

    // Forward: keep every scaled v_k.
    let mut vs = vec![0.0; n * m];
    let mut scales = vec![0.0; n];
    let mut log_ws = vec![0.0; n];
    let mut v = init.to_vec();
    let mut log_scale = 0.0;
    let mut log_w = -qx;
    let mut acc = LogSum::new();
    for k in 0..n {
        if k > 0 {
            log_w += ln_qx - (k as f64).ln();
            chain.step_row(&mut v);
            renormalize(&mut v, &mut log_scale);
        }
        vs[k * m..(k + 1) * m].copy_from_slice(&v);
        scales[k] = log_scale;
        log_ws[k] = log_w;
        if v[m - 1] > 0.0 {
            acc.add(log_w + log_scale + v[m - 1].ln() + ln_exit);
        }
    }
    let ln_s = acc.ln();
    if !ln_s.is_finite() {
        return LogDensityGrad {
            value: log_floor,
            d_init: vec![0.0; m],
            d_rates: vec![0.0; m],
            terms,
            clamped: true,
        };
    }

    // Adjoint: h_K = exit * w_K * e_m, h_k = exit * w_k * e_m + P h_{k+1}.
    let mut h = vec![0.0; m];
    h[m - 1] = 1.0;
    let mut r = log_ws[n - 1] + ln_exit;
    let mut d_rates = vec![0.0; m];
    for k in (0..n - 1).rev() {
        let vk = &vs[k * m..(k + 1) * m];
        let factor = (scales[k] + r - ln_s).exp() / q;
        if factor > 0.0 {
            for i in 0..m - 1 {
                d_rates[i] += factor * vk[i] * (h[i + 1] - h[i]);
            }
            d_rates[m - 1] -= factor * vk[m - 1] * h[m - 1];
        }
        chain.step_col(&mut h);
        let log_add = log_ws[k] + ln_exit;
        if log_add - r > 600.0 {
            let shrink = (r - log_add).exp();
            for x in h.iter_mut() {
                *x *= shrink;
            }
            r = log_add;
        }
        h[m - 1] += (log_add - r).exp();
        renormalize(&mut h, &mut r);
    }
    d_rates[m - 1] += 1.0 / exit;
    let to_value = (r - ln_s).exp();
    let d_init = h.iter().map(|&x| x * to_value).collect();

    LogDensityGrad {
        value: ln_s,
        d_init,
        d_rates,
        terms,
        clamped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_matches_direct() {
        let terms = [-1.0, 0.5, -30.0, 2.0];
        let mut s = LogSum::new();
        for t in terms {
            s.add(t);
        }
        let direct: f64 = terms.iter().map(|t: &f64| t.exp()).sum::<f64>().ln();
        assert!((s.ln() - direct).abs() < 1e-14);
        assert_eq!(LogSum::new().ln(), f64::NEG_INFINITY);
    }

    #[test]
    fn renormalize_is_exact_power_of_two() {
        let mut v = vec![1e-100, 3e-101];
        let mut s = 0.0;
        renormalize(&mut v, &mut s);
        assert!(v[0] >= 0.5 && v[0] < 2.0);
        assert!(((v[0].ln() + s) - (1e-100f64).ln()).abs() < 1e-12);
        assert_eq!(v[1] / v[0], 3e-101 / 1e-100);
    }
}
