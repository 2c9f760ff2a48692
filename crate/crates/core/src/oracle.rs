//! Independent reference computations used to validate the main code paths.
//!
//! Nothing here is used by training or evaluation. Everything is dense,
//! brute force, or textbook so it shares no logic with the fast kernels.

/// Dense matrix product.
pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn inf_norm(a: &[Vec<f64>]) -> f64 {
    a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `exp(a)` by Taylor series on `a / 2^s` followed by `s` squarings.
pub fn expm(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm = inf_norm(a);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scale = 2f64.powi(-s);
    let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    let mut result = vec![vec![0.0; n]; n];
    let mut term = vec![vec![0.0; n]; n];
    for i in 0..n {
        result[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..60 {
        term = mat_mul(&term, &scaled);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
        if inf_norm(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        result = mat_mul(&result, &result);
    }
    result
}

fn ph_vector(init: &[f64], a: &[Vec<f64>], x: f64) -> Vec<f64> {
    let ax: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * x).collect()).collect();
    let e = expm(&ax);
    let n = init.len();
    (0..n).map(|j| (0..n).map(|i| init[i] * e[i][j]).sum()).collect()
}

/// `init * exp(A x) * (-A 1)`.
pub fn ph_pdf(init: &[f64], a: &[Vec<f64>], x: f64) -> f64 {
    let v = ph_vector(init, a, x);
    let exit: Vec<f64> = a.iter().map(|r| -r.iter().sum::<f64>()).collect();
    v.iter().zip(&exit).map(|(p, t)| p * t).sum()
}

/// `init * exp(A x) * 1`.
pub fn ph_ccdf(init: &[f64], a: &[Vec<f64>], x: f64) -> f64 {
    ph_vector(init, a, x).iter().sum()
}

fn poisson_log_pmf(lambda: f64, j: u64) -> f64 {
    let log_fact: f64 = (1..=j).map(|i| (i as f64).ln()).sum();
    -lambda + j as f64 * lambda.ln() - log_fact
}

/// `P(N > k)` for `N ~ Poisson(lambda)` by summing the tail terms directly.
pub fn poisson_tail(lambda: f64, k: u64) -> f64 {
    let mut total = 0.0;
    let mut j = k + 1;
    loop {
        let t = poisson_log_pmf(lambda, j).exp();
        total += t;
        if j as f64 > lambda && t < total * 1e-18 {
            break;
        }
        if j as f64 > lambda + 50.0 * lambda.sqrt() + 100.0 {
            break;
        }
        j += 1;
    }
    total
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &[Vec<f64>]) -> f64 {
    let cols = w[0].len();
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let wv: Vec<f64> = w.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut wtwv = vec![0.0; cols];
        for (r, s) in w.iter().zip(&wv) {
            for (o, a) in wtwv.iter_mut().zip(r) {
                *o += a * s;
            }
        }
        let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = wtwv.iter().map(|x| x / norm).collect();
        let next = norm.sqrt();
        if (next - sigma).abs() < 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Integral of `f` over `[a, b]` on the given panel breakpoints, 30-point
/// Gauss-Legendre per panel.
pub fn integrate_panels(f: &dyn Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let rule = gauss_legendre(30);
    breaks
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            rule.iter().map(|(x, wt)| wt * f(mid + half * x)).sum::<f64>() * half
        })
        .sum()
}

/// Exhaustive two-sample KS: checks `|F_a - F_b|` at every observed point.
pub fn ks_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
        .fold(0.0, f64::max)
}

/// One-sample KS statistic of `samples` against `cdf`.
pub fn ks_one_sample(samples: &[f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov critical coefficient at significance 0.01.
pub const KS_C_001: f64 = 1.6276;

pub fn ks_critical_one_sample(n: usize) -> f64 {
    KS_C_001 / (n as f64).sqrt()
}

pub fn ks_critical_two_sample(n: usize, m: usize) -> f64 {
    KS_C_001 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Gaussian log-density written out directly.
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    (1.0 / (2.0 * std::f64::consts::PI * var).sqrt() * (-(x - mean) * (x - mean) / (2.0 * var)).exp()).ln()
}
