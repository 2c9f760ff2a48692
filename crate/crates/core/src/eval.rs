//! Tail-fidelity metrics and CCDF export.
//!
//! Quantiles use linear interpolation between order statistics at rank
//! `q(n-1)+1`. Multi-dimensional metrics are computed per coordinate and
//! reported as the unweighted mean, with the per-coordinate values kept.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const TAIL_LEVEL: f64 = 0.99;

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn check_finite(samples: &[f64], what: &'static str) -> Result<()> {
    if samples.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain {
            op: what,
            detail: "samples must be finite".into(),
        })
    }
}

/// Two-sample KS statistic over already sorted inputs.
fn ks_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    // once one sample is exhausted the gap only shrinks toward 0
    d
}

/// Sup-distance between the empirical CDFs of `a` and `b`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptySample("ks_distance: first sample"));
    }
    if b.is_empty() {
        return Err(Error::EmptySample("ks_distance: second sample"));
    }
    check_finite(a, "ks_distance")?;
    check_finite(b, "ks_distance")?;
    Ok(ks_sorted(&sorted(a), &sorted(b)))
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= s.len() {
        return s[s.len() - 1];
    }
    let frac = pos - lo as f64;
    s[lo] + frac * (s[lo + 1] - s[lo])
}

pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample("empirical_quantile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain {
            op: "empirical_quantile",
            detail: format!("level {q} outside [0, 1]"),
        });
    }
    check_finite(samples, "empirical_quantile")?;
    Ok(quantile_sorted(&sorted(samples), q))
}

/// `|Q_gen(q) - Q_test(q)| / Q_test(q)`.
pub fn quantile_error(gen: &[f64], test: &[f64], q: f64) -> Result<f64> {
    let qt = empirical_quantile(test, q)?;
    let qg = empirical_quantile(gen, q)?;
    if qt == 0.0 {
        return Err(Error::Domain {
            op: "quantile_error",
            detail: "test quantile is zero".into(),
        });
    }
    Ok((qg - qt).abs() / qt.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailKs {
    pub distance: f64,
    /// Test quantile at the tail level.
    pub threshold: f64,
    pub n_gen: usize,
    pub n_test: usize,
}

/// KS distance between the samples conditioned on `x > u`, where `u` is the
/// test quantile at `level`. Exactly 1 when no generated point exceeds `u`.
pub fn tail_ks(gen: &[f64], test: &[f64], level: f64) -> Result<TailKs> {
    let threshold = empirical_quantile(test, level)?;
    check_finite(gen, "tail_ks")?;
    let tail_test: Vec<f64> = sorted(test).into_iter().filter(|&x| x > threshold).collect();
    if tail_test.is_empty() {
        return Err(Error::EmptySample("tail_ks: no test point above the threshold"));
    }
    let tail_gen: Vec<f64> = sorted(gen).into_iter().filter(|&x| x > threshold).collect();
    let distance = if tail_gen.is_empty() {
        1.0
    } else {
        ks_sorted(&tail_gen, &tail_test)
    };
    Ok(TailKs {
        distance,
        threshold,
        n_gen: tail_gen.len(),
        n_test: tail_test.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcdfCurve {
    pub label: String,
    /// Distinct sample values, ascending.
    pub x: Vec<f64>,
    /// Fraction of the sample strictly above each `x`.
    pub survival: Vec<f64>,
}

/// Empirical survival curve; the point with survival 0 is omitted.
pub fn ccdf_curve(samples: &[f64], label: &str) -> Result<CcdfCurve> {
    if samples.is_empty() {
        return Err(Error::EmptySample("ccdf_curve"));
    }
    check_finite(samples, "ccdf_curve")?;
    let s = sorted(samples);
    let n = s.len();
    let mut x = Vec::new();
    let mut survival = Vec::new();
    let mut i = 0;
    while i < n {
        let v = s[i];
        while i < n && s[i] == v {
            i += 1;
        }
        if i < n {
            x.push(v);
            survival.push((n - i) as f64 / n as f64);
        }
    }
    Ok(CcdfCurve {
        label: label.to_string(),
        x,
        survival,
    })
}

impl CcdfCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = format!("# label={}\nx,ccdf\n", self.label);
        for (x, s) in self.x.iter().zip(&self.survival) {
            out.push_str(&fmt_f64(*x));
            out.push(',');
            out.push_str(&fmt_f64(*s));
            out.push('\n');
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }
}

/// Unweighted mean of per-dimension values.
pub fn per_dimension_aggregate(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySample("per_dimension_aggregate"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimMetrics {
    pub ks: f64,
    pub ks_tail: f64,
    pub q99_err: f64,
    pub q995_err: f64,
    pub u: f64,
    pub n_tail_gen: usize,
    pub n_tail_test: usize,
}

pub fn dim_metrics(gen: &[f64], test: &[f64]) -> Result<DimMetrics> {
    let tail = tail_ks(gen, test, TAIL_LEVEL)?;
    Ok(DimMetrics {
        ks: ks_distance(gen, test)?,
        ks_tail: tail.distance,
        q99_err: quantile_error(gen, test, 0.99)?,
        q995_err: quantile_error(gen, test, 0.995)?,
        u: tail.threshold,
        n_tail_gen: tail.n_gen,
        n_tail_test: tail.n_test,
    })
}

/// Smallest exit rate over generated latents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub min: f64,
    pub median: f64,
}

impl RateStats {
    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::EmptySample("rate statistics"));
        }
        let s = sorted(rates);
        Ok(Self {
            min: s[0],
            median: quantile_sorted(&s, 0.5),
        })
    }
}

/// Per-cell metrics. Scalar fields are per-dimension means, tail counts
/// included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: f64,
    pub ks_tail: f64,
    pub q99_err: f64,
    pub q995_err: f64,
    pub u: f64,
    pub n_tail_gen: f64,
    pub n_tail_test: f64,
    pub per_dim: Vec<DimMetrics>,
    pub smallest_rate: Option<RateStats>,
    pub lipschitz_estimate: f64,
}

pub fn compute_metrics(gen: &Tensor, test: &Tensor, smallest_rates: Option<&[f64]>, lipschitz_estimate: f64) -> Result<MetricsReport> {
    if gen.cols() != test.cols() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: gen.shape(),
            rhs: test.shape(),
        });
    }
    let per_dim = (0..test.cols())
        .map(|j| dim_metrics(&gen.column_values(j), &test.column_values(j)))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&DimMetrics) -> f64| per_dimension_aggregate(&per_dim.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        ks: mean(&|m| m.ks)?,
        ks_tail: mean(&|m| m.ks_tail)?,
        q99_err: mean(&|m| m.q99_err)?,
        q995_err: mean(&|m| m.q995_err)?,
        u: mean(&|m| m.u)?,
        n_tail_gen: mean(&|m| m.n_tail_gen as f64)?,
        n_tail_test: mean(&|m| m.n_tail_test as f64)?,
        smallest_rate: smallest_rates.map(RateStats::from_rates).transpose()?,
        per_dim,
        lipschitz_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{analytic_ccdf, pareto_matrix};
    use crate::oracle;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pareto(n: usize, alpha: f64, seed: u64) -> Vec<f64> {
        pareto_matrix(n, 1, alpha, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
    }

    #[test]
    fn ks_examples() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&a, &[2.1, 2.5, 2.9, 2.2]).unwrap(), 1.0);
        let a = [1.0, 2.0, 3.0];
        let b = [1.5, 2.5, 3.5];
        assert_eq!(ks_distance(&a, &b).unwrap(), oracle::ks_brute_force(&a, &b));
        assert!((ks_distance(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(ks_distance(&[], &b).is_err());
        assert!(ks_distance(&a, &[]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let s = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(empirical_quantile(&s, 0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&s, 0.0).unwrap(), 1.0);
        assert_eq!(empirical_quantile(&s, 1.0).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&s, 0.3).unwrap(), 2.2);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&s, 1.5).is_err());
        let q = empirical_quantile(&pareto(20_000, 2.0, 1), 0.99).unwrap();
        assert!((q / 10.0 - 1.0).abs() < 0.05, "{q}");
    }

    #[test]
    fn quantile_error_examples() {
        let t = pareto(1000, 3.0, 2);
        assert_eq!(quantile_error(&t, &t, 0.99).unwrap(), 0.0);
        let doubled: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((quantile_error(&doubled, &t, 0.99).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_ks_is_one_for_collapsed_generation() {
        let test = pareto(5000, 2.0, 3);
        let u = empirical_quantile(&test, 0.99).unwrap();
        let gen: Vec<f64> = (0..5000).map(|i| 1.0 + (u - 1.0) * i as f64 / 4999.0).collect();
        let r = tail_ks(&gen, &test, 0.99).unwrap();
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.n_gen, 0);
        assert_eq!(r.threshold, u);
        assert_eq!(r.n_test, 50);
        // a single generated point at the test maximum is enough to leave 1
        let mut with_tail = gen.clone();
        with_tail.push(test.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let r = tail_ks(&with_tail, &test, 0.99).unwrap();
        assert_eq!(r.n_gen, 1);
        assert!((r.distance - 49.0 / 50.0).abs() < 1e-15);
    }

    #[test]
    fn tail_ks_self_comparison_is_zero() {
        let test = pareto(20_000, 2.0, 4);
        let r = tail_ks(&test, &test, 0.99).unwrap();
        assert_eq!(r.distance, 0.0);
        assert!(r.distance <= 2.0 / (0.01 * 20_000.0f64).sqrt());
    }

    #[test]
    fn tail_ks_same_law_is_below_critical_value() {
        let test = pareto(20_000, 2.0, 5);
        let gen = pareto(20_000, 2.0, 6);
        let r = tail_ks(&gen, &test, 0.99).unwrap();
        assert!(r.distance < oracle::ks_critical_two_sample(r.n_gen, r.n_test), "{r:?}");
    }

    #[test]
    fn tail_ks_needs_test_tail() {
        assert!(tail_ks(&[1.0], &[2.0; 10], 0.99).is_err());
        assert!(tail_ks(&[1.0], &[], 0.99).is_err());
    }

    #[test]
    fn ccdf_examples() {
        let c = ccdf_curve(&[2.0, 1.0], "toy").unwrap();
        assert_eq!(c.x, vec![1.0]);
        assert_eq!(c.survival, vec![0.5]);
        let c = ccdf_curve(&[1.0, 1.0, 2.0, 3.0], "ties").unwrap();
        assert_eq!(c.x, vec![1.0, 2.0]);
        assert_eq!(c.survival, vec![0.5, 0.25]);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# label=ties\nx,ccdf\n1,0.5\n2,0.25\n");
    }

    #[test]
    fn ccdf_tracks_the_analytic_survival() {
        let n = 100_000;
        let c = ccdf_curve(&pareto(n, 3.0, 7), "pareto").unwrap();
        assert_eq!(c.survival[0], 1.0 - 1.0 / n as f64);
        let bound = oracle::ks_critical_one_sample(n);
        for (x, s) in c.x.iter().zip(&c.survival) {
            assert!((s - analytic_ccdf(3.0, 1.0, *x)).abs() < bound);
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(per_dimension_aggregate(&[0.7]).unwrap(), 0.7);
        assert!((per_dimension_aggregate(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(per_dimension_aggregate(&[]).is_err());
        let col = pareto(2000, 2.0, 8);
        let gen = pareto(2000, 2.0, 9);
        let one = compute_metrics(&Tensor::new(2000, 1, gen.clone()).unwrap(), &Tensor::new(2000, 1, col.clone()).unwrap(), None, 0.0).unwrap();
        let dup = |v: &[f64]| Tensor::new(2000, 2, v.iter().flat_map(|&x| [x, x]).collect()).unwrap();
        let two = compute_metrics(&dup(&gen), &dup(&col), None, 0.0).unwrap();
        assert_eq!(one.ks, two.ks);
        assert_eq!(one.ks_tail, two.ks_tail);
        assert_eq!(one.q99_err, two.q99_err);
        assert_eq!(two.per_dim.len(), 2);
    }

    #[test]
    fn rate_stats() {
        let r = RateStats::from_rates(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(r.min, 1.0);
        assert_eq!(r.median, 2.5);
    }

    fn sample_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..60)
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_bounded_and_matches_brute_force(a in sample_vec(), b in sample_vec()) {
            let ab = ks_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, ks_distance(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
            prop_assert!((ab - oracle::ks_brute_force(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn ks_handles_ties(a in prop::collection::vec(0u8..5, 1..40), b in prop::collection::vec(0u8..5, 1..40)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!((ks_distance(&a, &b).unwrap() - oracle::ks_brute_force(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn quantile_error_is_scale_invariant(g in sample_vec(), t in prop::collection::vec(1.0f64..100.0, 1..60), k in -20i32..20, c in 0.01f64..100.0) {
            let base = quantile_error(&g, &t, 0.99).unwrap();
            let pow2 = 2f64.powi(k);
            let gs: Vec<f64> = g.iter().map(|v| v * pow2).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * pow2).collect();
            prop_assert_eq!(quantile_error(&gs, &ts, 0.99).unwrap(), base);
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            let scaled = quantile_error(&gs, &ts, 0.99).unwrap();
            prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn tail_ks_is_one_when_no_generated_mass_exceeds_threshold(g in sample_vec(), t in prop::collection::vec(-100.0f64..100.0, 200..400)) {
            let r = tail_ks(&g, &t, 0.99);
            prop_assume!(r.is_ok());
            let r = r.unwrap();
            let max_gen = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max_gen <= r.threshold {
                prop_assert_eq!((r.distance, r.n_gen), (1.0, 0));
            } else {
                prop_assert!(r.n_gen > 0);
            }
        }

        #[test]
        fn tail_ks_is_invariant_under_power_of_two_scaling(g in sample_vec(), t in prop::collection::vec(-100.0f64..100.0, 200..300), k in -30i32..30) {
            let c = 2f64.powi(k);
            let a = tail_ks(&g, &t, 0.99).unwrap();
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
            let b = tail_ks(&gs, &ts, 0.99).unwrap();
            prop_assert_eq!(a.distance, b.distance);
            prop_assert_eq!((a.n_gen, a.n_test), (b.n_gen, b.n_test));
        }

        /// For a nonlinear increasing map, the interpolated threshold moves
        /// relative to the data unless no generated point lies strictly
        /// between the two order statistics it interpolates.
        #[test]
        fn tail_ks_is_rank_based(g in sample_vec(), t in prop::collection::vec(-100.0f64..100.0, 200..300)) {
            let st = sorted(&t);
            let pos = 0.99 * (st.len() - 1) as f64;
            let (lo, hi) = (st[pos.floor() as usize], st[(pos.floor() as usize + 1).min(st.len() - 1)]);
            prop_assume!(!g.iter().any(|&x| x > lo && x < hi));
            prop_assume!(!g.iter().any(|&x| x == lo || x == hi) || lo == hi);
            let f = |v: f64| v.exp2().ln_1p() + v / 7.0;
            let a = tail_ks(&g, &t, 0.99).unwrap();
            let gf: Vec<f64> = g.iter().map(|&v| f(v)).collect();
            let tf: Vec<f64> = t.iter().map(|&v| f(v)).collect();
            let b = tail_ks(&gf, &tf, 0.99).unwrap();
            prop_assert!((a.distance - b.distance).abs() < 1e-12);
            prop_assert_eq!((a.n_gen, a.n_test), (b.n_gen, b.n_test));
        }

        #[test]
        fn ccdf_is_strictly_decreasing(s in sample_vec()) {
            let c = ccdf_curve(&s, "p").unwrap();
            prop_assert!(c.x.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(c.survival.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(c.survival.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
