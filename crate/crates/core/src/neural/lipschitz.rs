use super::Mlp;
use crate::autodiff::Tensor;
use crate::error::Result;
use rand::Rng;
use rand_distr::StandardNormal;

fn uniform_in_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.iter().map(|v| v * r / norm).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest observed `|f(z) - f(z')| / |z - z'|` over `n_pairs` point pairs
/// drawn uniformly from the ball of the given radius.
///
/// Always a lower bound on the network's Lipschitz constant.
pub fn empirical_lipschitz<R: Rng + ?Sized>(mlp: &Mlp, n_pairs: usize, radius: f64, rng: &mut R) -> Result<f64> {
    let dim = mlp.input_width();
    let mut left = Vec::with_capacity(n_pairs * dim);
    let mut right = Vec::with_capacity(n_pairs * dim);
    for _ in 0..n_pairs {
        left.extend(uniform_in_ball(dim, radius, rng));
        right.extend(uniform_in_ball(dim, radius, rng));
    }
    let left = Tensor::new(n_pairs, dim, left)?;
    let right = Tensor::new(n_pairs, dim, right)?;
    let fl = mlp.predict(&left)?;
    let fr = mlp.predict(&right)?;
    let mut best: f64 = 0.0;
    for i in 0..n_pairs {
        let dz = l2(left.row(i), right.row(i));
        if dz > 0.0 {
            best = best.max(l2(fl.row(i), fr.row(i)) / dz);
        }
    }
    Ok(best)
}
