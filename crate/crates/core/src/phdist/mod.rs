//! Acyclic phase-type distributions in series canonical form.
//!
//! A [`CanonicalPh`] is the absorption time of a chain that starts in phase
//! `i` with probability `init_probs[i]` and then walks `i -> i+1 -> ... -> m`
//! deterministically, leaving phase `j` at rate `rates[j]`. The
//! sub-generator is upper bidiagonal with `A[i][i] = -rates[i]` and
//! `A[i][i+1] = rates[i]`; only the last phase exits to absorption.
//!
//! Densities and survival functions are evaluated by uniformization. The
//! smallest rate controls how slowly the tail decays.

mod diff;
mod kernel;

pub use diff::{logpdf_diff, LikelihoodOptions, PhTelemetry};
pub use kernel::{truncation_point, LogDensityGrad};

use crate::error::{Error, Result};
use kernel::Target;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_MAX_TERMS: u64 = 1_000_000;
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPh {
    init_probs: Vec<f64>,
    rates: Vec<f64>,
}

impl CanonicalPh {
    pub fn new(init_probs: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let m = rates.len();
        if m == 0 || init_probs.len() != m {
            return Err(Error::InvalidPh(format!(
                "need matching non-empty vectors, got {} initial probabilities and {} rates",
                init_probs.len(),
                m
            )));
        }
        if init_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidPh("initial probabilities must be non-negative".into()));
        }
        let total: f64 = init_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPh(format!("initial probabilities sum to {total}")));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidPh("rates must be finite and positive".into()));
        }
        if rates.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidPh("rates must be non-decreasing".into()));
        }
        Ok(Self { init_probs, rates })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![rate])
    }

    /// Erlang with `k` phases, all starting in the first phase.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        let mut init = vec![0.0; k];
        if k > 0 {
            init[0] = 1.0;
        }
        Self::new(init, vec![rate; k])
    }

    pub fn phases(&self) -> usize {
        self.rates.len()
    }

    pub fn init_probs(&self) -> &[f64] {
        &self.init_probs
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// The rate that governs the asymptotic decay `ccdf(x) ~ C exp(-rate x)`.
    pub fn smallest_rate(&self) -> f64 {
        self.rates[0]
    }

    pub fn max_rate(&self) -> f64 {
        self.rates[self.rates.len() - 1]
    }

    /// Dense sub-generator `A`.
    pub fn sub_generator(&self) -> Vec<Vec<f64>> {
        let m = self.phases();
        let mut a = vec![vec![0.0; m]; m];
        for i in 0..m {
            a[i][i] = -self.rates[i];
            if i + 1 < m {
                a[i][i + 1] = self.rates[i];
            }
        }
        a
    }

    /// Exit vector `t = -A 1`; non-zero only in the last phase.
    pub fn exit_vector(&self) -> Vec<f64> {
        let m = self.phases();
        let mut t = vec![0.0; m];
        t[m - 1] = self.rates[m - 1];
        t
    }

    /// `E[X] = sum_i init[i] * sum_{j >= i} 1 / rates[j]`.
    pub fn mean(&self) -> f64 {
        let mut tail = 0.0;
        let mut total = 0.0;
        for i in (0..self.phases()).rev() {
            tail += 1.0 / self.rates[i];
            total += self.init_probs[i] * tail;
        }
        total
    }

    /// Exact absorption-time draw: pick the entry phase, then add one
    /// exponential holding time per remaining phase.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut start = self.phases() - 1;
        let mut cum = 0.0;
        for (i, p) in self.init_probs.iter().enumerate() {
            cum += p;
            if u < cum {
                start = i;
                break;
            }
        }
        self.rates[start..]
            .iter()
            .map(|&rate| {
                let open: f64 = 1.0 - rng.random::<f64>();
                -open.ln() / rate
            })
            .sum()
    }
}

/// Uniformization settings for one distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformizationPlan {
    rate: f64,
    tolerance: f64,
    max_terms: u64,
}

impl UniformizationPlan {
    pub fn new(rate: f64, tolerance: f64, max_terms: u64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Config(format!("uniformization rate must be positive, got {rate}")));
        }
        if !(tolerance > 0.0 && tolerance < 1.0) {
            return Err(Error::Config(format!("tolerance must lie in (0, 1), got {tolerance}")));
        }
        Ok(Self {
            rate,
            tolerance,
            max_terms,
        })
    }

    /// `q = max(rates)` with the default tolerance and cap.
    pub fn for_ph(ph: &CanonicalPh) -> Self {
        Self {
            rate: ph.max_rate(),
            tolerance: DEFAULT_TOLERANCE,
            max_terms: DEFAULT_MAX_TERMS,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self> {
        Self::new(self.rate, tolerance, self.max_terms)?;
        self.tolerance = tolerance;
        Ok(self)
    }

    pub fn with_max_terms(mut self, max_terms: u64) -> Self {
        self.max_terms = max_terms;
        self
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn max_terms(&self) -> u64 {
        self.max_terms
    }

    fn check(&self, ph: &CanonicalPh) -> Result<()> {
        if self.rate < ph.max_rate() {
            return Err(Error::Config(format!(
                "uniformization rate {} below max rate {}",
                self.rate,
                ph.max_rate()
            )));
        }
        Ok(())
    }

    fn terms_at(&self, x: f64) -> Result<u64> {
        truncation_point(self.rate * x, self.tolerance, self.max_terms)
    }
}

fn check_positive(op: &'static str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain {
            op,
            detail: format!("x must be finite and positive, got {x}"),
        });
    }
    Ok(())
}

/// Natural log of the density at `x > 0`; `-inf` only if the density is
/// exactly zero.
pub fn log_pdf(ph: &CanonicalPh, x: f64, plan: &UniformizationPlan) -> Result<f64> {
    check_positive("pdf", x)?;
    plan.check(ph)?;
    let terms = plan.terms_at(x)?;
    Ok(kernel::log_sweep(ph.init_probs(), ph.rates(), x, plan.rate, terms, Target::Density))
}

/// Density `init * exp(A x) * t` at `x > 0`.
pub fn pdf(ph: &CanonicalPh, x: f64, plan: &UniformizationPlan) -> Result<f64> {
    log_pdf(ph, x, plan).map(f64::exp)
}

/// Survival function `init * exp(A x) * 1` at `x >= 0`.
pub fn ccdf(ph: &CanonicalPh, x: f64, plan: &UniformizationPlan) -> Result<f64> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::Domain {
            op: "ccdf",
            detail: format!("x must be finite and non-negative, got {x}"),
        });
    }
    plan.check(ph)?;
    if x == 0.0 {
        return Ok(ph.init_probs().iter().sum::<f64>().min(1.0));
    }
    let terms = plan.terms_at(x)?;
    let ln = kernel::log_sweep(ph.init_probs(), ph.rates(), x, plan.rate, terms, Target::Survival);
    Ok(ln.exp().clamp(0.0, 1.0))
}

pub fn cdf(ph: &CanonicalPh, x: f64, plan: &UniformizationPlan) -> Result<f64> {
    ccdf(ph, x, plan).map(|s| 1.0 - s)
}

/// Log-density and its gradient with respect to `init_probs` and `rates`.
pub fn log_pdf_grad(ph: &CanonicalPh, x: f64, plan: &UniformizationPlan) -> Result<LogDensityGrad> {
    check_positive("pdf", x)?;
    plan.check(ph)?;
    let terms = plan.terms_at(x)?;
    Ok(kernel::log_density_grad(
        ph.init_probs(),
        ph.rates(),
        x,
        plan.rate,
        terms,
        DEFAULT_DENSITY_FLOOR.ln(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_phase() -> CanonicalPh {
        CanonicalPh::new(vec![0.5, 0.3, 0.2], vec![0.5, 1.0, 2.0]).unwrap()
    }

    fn plan(ph: &CanonicalPh) -> UniformizationPlan {
        UniformizationPlan::for_ph(ph)
    }

    #[test]
    fn validation() {
        assert!(CanonicalPh::new(vec![0.5, 0.5], vec![2.0, 1.0]).is_err());
        assert!(CanonicalPh::new(vec![0.5, 0.6], vec![1.0, 2.0]).is_err());
        assert!(CanonicalPh::new(vec![1.0], vec![0.0]).is_err());
        assert!(CanonicalPh::new(vec![1.0, 0.0], vec![1.0]).is_err());
        assert!(CanonicalPh::new(vec![], vec![]).is_err());
    }

    #[test]
    fn generator_structure() {
        let ph = three_phase();
        let a = ph.sub_generator();
        assert_eq!(a[0], vec![-0.5, 0.5, 0.0]);
        assert_eq!(a[1], vec![0.0, -1.0, 1.0]);
        assert_eq!(a[2], vec![0.0, 0.0, -2.0]);
        let t = ph.exit_vector();
        for i in 0..3 {
            let row_sum: f64 = a[i].iter().sum();
            assert_eq!(t[i], -row_sum);
        }
    }

    #[test]
    fn exponential_density_near_zero() {
        let ph = CanonicalPh::exponential(1.0).unwrap();
        let v = pdf(&ph, 1e-12, &plan(&ph)).unwrap();
        assert!((v - 1.0).abs() < 1e-11);
    }

    #[test]
    fn erlang_two_density() {
        let ph = CanonicalPh::erlang(2, 1.0).unwrap();
        let v = pdf(&ph, 1.0, &plan(&ph)).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn three_phase_matches_dense_oracle() {
        let ph = three_phase();
        let want_pdf = oracle::ph_pdf(ph.init_probs(), &ph.sub_generator(), 1.7);
        let want_ccdf = oracle::ph_ccdf(ph.init_probs(), &ph.sub_generator(), 1.7);
        assert!((pdf(&ph, 1.7, &plan(&ph)).unwrap() - want_pdf).abs() < 1e-12);
        assert!((ccdf(&ph, 1.7, &plan(&ph)).unwrap() - want_ccdf).abs() < 1e-12);
    }

    #[test]
    fn ccdf_basics() {
        let ph = three_phase();
        assert_eq!(ccdf(&ph, 0.0, &plan(&ph)).unwrap(), 1.0);
        let e = CanonicalPh::exponential(1.0).unwrap();
        assert!((ccdf(&e, 1.0, &plan(&e)).unwrap() - (-1.0f64).exp()).abs() < 1e-14);
        let mut prev = 1.0;
        for i in 1..200 {
            let s = ccdf(&ph, i as f64 * 0.1, &plan(&ph)).unwrap();
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn domain_errors() {
        let ph = three_phase();
        assert!(matches!(pdf(&ph, 0.0, &plan(&ph)), Err(Error::Domain { .. })));
        assert!(matches!(pdf(&ph, -1.0, &plan(&ph)), Err(Error::Domain { .. })));
        assert!(matches!(ccdf(&ph, -1.0, &plan(&ph)), Err(Error::Domain { .. })));
        let capped = plan(&ph).with_max_terms(5);
        match pdf(&ph, 100.0, &capped) {
            Err(Error::TruncationCap { required, cap }) => {
                assert_eq!(cap, 5);
                assert!(required > 5);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
        let low = UniformizationPlan::new(1.0, 1e-12, 100).unwrap();
        assert!(pdf(&ph, 1.0, &low).is_err());
    }

    #[test]
    fn inflated_uniformization_rate_gives_same_answer() {
        let ph = three_phase();
        let inflated = UniformizationPlan::new(7.5, 1e-12, DEFAULT_MAX_TERMS).unwrap();
        for x in [0.1, 1.7, 12.0] {
            let a = pdf(&ph, x, &plan(&ph)).unwrap();
            let b = pdf(&ph, x, &inflated).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_pdf_survives_extreme_arguments() {
        let ph = CanonicalPh::exponential(3.0).unwrap();
        let l = log_pdf(&ph, 2000.0, &plan(&ph)).unwrap();
        assert!((l - (3f64.ln() - 6000.0)).abs() < 1e-8);
        assert_eq!(pdf(&ph, 2000.0, &plan(&ph)).unwrap(), 0.0);
    }

    #[test]
    fn means() {
        assert_eq!(CanonicalPh::exponential(1.0).unwrap().mean(), 1.0);
        assert_eq!(CanonicalPh::erlang(2, 1.0).unwrap().mean(), 2.0);
        assert!((three_phase().mean() - 2.3).abs() < 1e-15);
    }

    #[test]
    fn truncation_point_examples() {
        assert_eq!(truncation_point(0.0, 1e-12, 10).unwrap(), 0);
        let k = truncation_point(1.0, 1e-12, 1000).unwrap();
        assert!(oracle::poisson_tail(1.0, k) < 1e-12);
        assert!(oracle::poisson_tail(1.0, k - 1) >= 1e-12);
        assert!(truncation_point(10.0, 1e-12, 1000).unwrap() >= k);
        assert!(truncation_point(1e4, 1e-12, 100).is_err());
        assert!(truncation_point(-1.0, 1e-12, 100).is_err());
        assert!(truncation_point(1.0, 1.0, 100).is_err());
    }

    #[test]
    fn truncation_is_minimal_across_scales() {
        for qx in [0.3, 5.0, 42.0, 700.0, 2500.0] {
            let k = truncation_point(qx, 1e-10, 100_000).unwrap();
            assert!(oracle::poisson_tail(qx, k) < 1e-10, "qx={qx}");
            assert!(oracle::poisson_tail(qx, k - 1) >= 1e-10 * 0.999, "qx={qx}");
        }
    }

    #[test]
    fn truncation_at_default_tolerance_for_large_qx() {
        for qx in [2100.0, 2.0e4, 3.0e5] {
            let k = truncation_point(qx, DEFAULT_TOLERANCE, DEFAULT_MAX_TERMS).unwrap();
            assert!(oracle::poisson_tail(qx, k) < DEFAULT_TOLERANCE * 1.001, "qx={qx}");
            assert!(oracle::poisson_tail(qx, k - 1) >= DEFAULT_TOLERANCE * 0.999, "qx={qx}");
            assert!((k as f64) < qx + 10.0 * qx.sqrt());
        }
    }

    #[test]
    fn single_phase_sample_is_inverse_transform() {
        let ph = CanonicalPh::exponential(2.5).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = ph.sample(&mut a);
            let _phase: f64 = b.random();
            let u = 1.0 - b.random::<f64>();
            assert_eq!(x, -u.ln() / 2.5);
        }
    }

    fn mean_within_3se(ph: &CanonicalPh, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = ph.sample(&mut rng);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - ph.mean()).abs() < 3.0 * se, "mean {mean} vs {}", ph.mean());
    }

    #[test]
    fn sample_means() {
        mean_within_3se(&CanonicalPh::erlang(2, 1.0).unwrap(), 5);
        mean_within_3se(&three_phase(), 6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ph = three_phase();
        for x in [0.3, 1.7, 9.0] {
            let g = log_pdf_grad(&ph, x, &plan(&ph)).unwrap();
            assert!((g.value - log_pdf(&ph, x, &plan(&ph)).unwrap()).abs() < 1e-12);
            // unconstrained perturbations, evaluated with a fixed generous q
            let f = |init: &[f64], rates: &[f64]| {
                let q = 3.0;
                let terms = truncation_point(q * x, 1e-14, 1_000_000).unwrap();
                kernel::log_sweep(init, rates, x, q, terms, Target::Density)
            };
            let h = 1e-5;
            for i in 0..3 {
                let mut up = ph.rates().to_vec();
                let mut dn = ph.rates().to_vec();
                up[i] += h;
                dn[i] -= h;
                let fd = (f(ph.init_probs(), &up) - f(ph.init_probs(), &dn)) / (2.0 * h);
                assert!((fd - g.d_rates[i]).abs() / fd.abs().max(1e-3) < 1e-4, "rate {i} at {x}: {fd} vs {}", g.d_rates[i]);
                let mut up = ph.init_probs().to_vec();
                let mut dn = ph.init_probs().to_vec();
                up[i] += h;
                dn[i] -= h;
                let fd = (f(&up, ph.rates()) - f(&dn, ph.rates())) / (2.0 * h);
                assert!((fd - g.d_init[i]).abs() / fd.abs().max(1e-3) < 1e-4, "init {i} at {x}");
            }
        }
    }

    #[test]
    fn exponential_log_gradient_is_analytic() {
        let ph = CanonicalPh::exponential(0.7).unwrap();
        let g = log_pdf_grad(&ph, 4.0, &plan(&ph)).unwrap();
        assert!((g.value - (0.7f64.ln() - 2.8)).abs() < 1e-13);
        assert!((g.d_rates[0] - (1.0 / 0.7 - 4.0)).abs() < 1e-10);
    }

    #[test]
    fn smaller_first_rate_fattens_the_tail() {
        let rest = [1.0, 1.5, 2.0, 4.0];
        let init = vec![0.4, 0.3, 0.2, 0.05, 0.05];
        let x = 40.0;
        let mut prev = 0.0;
        for first in [0.9, 0.6, 0.4, 0.2, 0.1, 0.05, 0.02] {
            let mut rates = vec![first];
            rates.extend_from_slice(&rest);
            let ph = CanonicalPh::new(init.clone(), rates).unwrap();
            let s = ccdf(&ph, x, &plan(&ph)).unwrap();
            assert!(s > prev, "first rate {first}: {s} <= {prev}");
            prev = s;
        }
    }
}
