//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitives as they are evaluated. Parameters enter as
//! tracked leaves ([`Tape::param`]), data and noise as constants. After
//! [`Tape::backward`] the gradient of every tracked node is available through
//! [`Tape::grad`].
//!
//! Only two broadcast patterns exist: identical shapes, and a `1 x c` row
//! applied to every row of an `r x c` matrix. Anything else is rejected.

mod tape;
mod tensor;

pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0; 3]));
        let y = t.softmax(x, Axis::Cols).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.softplus(x).unwrap();
        assert!((t.value(y).item().unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![1000.0, -1000.0]));
        let y = t.softplus(x).unwrap();
        assert_eq!(t.value(y).data()[0], 1000.0);
        assert!(t.value(y).data()[1] >= 0.0 && t.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn cumsum_of_softplus_zero_gives_ordered_rates() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![LN2; 3]));
        let y = t.cumsum(x, Axis::Cols).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - LN2).abs() < 1e-15);
        assert!((v[1] - 2.0 * LN2).abs() < 1e-15);
        assert!((v[2] - 3.0 * LN2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.softplus(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.square(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.backward(y), Err(Error::BackwardTwice));
        // re-forward unlocks it
        let z = t.square(x).unwrap();
        t.backward(z).unwrap();
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
        // column broadcast is not supported
        let c = t.constant(Tensor::zeros(2, 1));
        assert!(t.mul(a, c).is_err());
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn non_finite_output_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1000.0));
        assert_eq!(t.exp(a), Err(Error::NonFinite { op: "exp" }));
        let z = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.log(z), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(t.div(a, z), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn row_broadcast_gradient_sums_rows() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.param(Tensor::row_vector(vec![0.5, -0.5]));
        let y = t.add(a, b).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 2.0]);
        assert!(t.grad(a).is_none());
    }

    /// Central finite differences of `f` at `x`.
    fn fd_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    type Build = dyn Fn(&mut Tape, Var) -> Var;

    /// Loss is a fixed random linear functional of the primitive's output so
    /// every output element contributes to the gradient.
    fn check_unary(name: &str, build: &Build, lo: f64, hi: f64, rows: usize, cols: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        let mut trials = 0;
        while trials < 100 {
            let x = Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
            // skip points within the finite-difference step of the relu kink
            if name == "relu" && x.data().iter().any(|v| v.abs() < 1e-4) {
                continue;
            }
            trials += 1;
            let probe: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |t: &mut Tape, x: &Tensor| {
                let v = t.param(x.clone());
                let y = build(t, v);
                let [r, c] = t.shape(y);
                let w = t.constant(Tensor::new(r, c, probe[..r * c].to_vec()).unwrap());
                let p = t.mul(y, w).unwrap();
                (v, t.sum(p).unwrap())
            };
            let mut t = Tape::new();
            let (v, loss) = eval(&mut t, &x);
            t.backward(loss).unwrap();
            let analytic = t.grad(v).unwrap().clone();
            let numeric = fd_grad(&x, &|x| {
                let mut t = Tape::new();
                let (_, loss) = eval(&mut t, x);
                t.value(loss).item().unwrap()
            });
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-5, "{name}: analytic {a} vs fd {n} (rel {rel:e})");
            }
        }
    }

    #[test]
    fn unary_primitives_match_finite_differences() {
        check_unary("exp", &|t, v| t.exp(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("log", &|t, v| t.log(v).unwrap(), 0.1, 6.0, 2, 3);
        check_unary("neg", &|t, v| t.neg(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("square", &|t, v| t.square(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("relu", &|t, v| t.relu(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("softplus", &|t, v| t.softplus(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("sum", &|t, v| t.sum(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("mean", &|t, v| t.mean(v).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("softmax_c", &|t, v| t.softmax(v, Axis::Cols).unwrap(), -3.0, 3.0, 2, 4);
        check_unary("softmax_r", &|t, v| t.softmax(v, Axis::Rows).unwrap(), -3.0, 3.0, 3, 2);
        check_unary("cumsum_c", &|t, v| t.cumsum(v, Axis::Cols).unwrap(), -3.0, 3.0, 2, 4);
        check_unary("cumsum_r", &|t, v| t.cumsum(v, Axis::Rows).unwrap(), -3.0, 3.0, 3, 2);
        check_unary("broadcast", &|t, v| t.broadcast(v, 3).unwrap(), -3.0, 3.0, 1, 4);
        check_unary("scale", &|t, v| t.scale(v, -1.7).unwrap(), -3.0, 3.0, 2, 3);
        check_unary("narrow", &|t, v| t.narrow_cols(v, 1, 2).unwrap(), -3.0, 3.0, 2, 4);
    }

    #[test]
    fn binary_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Tensor::new(3, 2, (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let b = Tensor::new(3, 2, (0..6).map(|_| rng.random_range(0.5..3.0)).collect()).unwrap();
            let row = Tensor::row_vector((0..2).map(|_| rng.random_range(0.5..3.0)).collect());
            let m = Tensor::new(2, 4, (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            type Bin = fn(&mut Tape, Var, Var) -> Var;
            let ops: [(&str, Bin, &Tensor); 9] = [
                ("add", |t, a, b| t.add(a, b).unwrap(), &b),
                ("sub", |t, a, b| t.sub(a, b).unwrap(), &b),
                ("mul", |t, a, b| t.mul(a, b).unwrap(), &b),
                ("div", |t, a, b| t.div(a, b).unwrap(), &b),
                ("add_row", |t, a, b| t.add(a, b).unwrap(), &row),
                ("sub_row", |t, a, b| t.sub(a, b).unwrap(), &row),
                ("mul_row", |t, a, b| t.mul(a, b).unwrap(), &row),
                ("div_row", |t, a, b| t.div(a, b).unwrap(), &row),
                ("matmul", |t, a, b| t.matmul(a, b).unwrap(), &m),
            ];
            for (name, op, rhs) in ops {
                let loss = |a: &Tensor, b: &Tensor| {
                    let mut t = Tape::new();
                    let va = t.param(a.clone());
                    let vb = t.param(b.clone());
                    let y = op(&mut t, va, vb);
                    let sq = t.square(y).unwrap();
                    let l = t.sum(sq).unwrap();
                    (t, va, vb, l)
                };
                let (mut t, va, vb, l) = loss(&a, rhs);
                t.backward(l).unwrap();
                let fa = fd_grad(&a, &|x| {
                    let (t, _, _, l) = loss(x, rhs);
                    t.value(l).item().unwrap()
                });
                let fb = fd_grad(rhs, &|x| {
                    let (t, _, _, l) = loss(&a, x);
                    t.value(l).item().unwrap()
                });
                for (g, n) in t.grad(va).unwrap().data().iter().zip(&fa).chain(t.grad(vb).unwrap().data().iter().zip(&fb)) {
                    let rel = (g - n).abs() / g.abs().max(n.abs()).max(1e-3);
                    assert!(rel < 1e-5, "{name}: {g} vs {n}");
                }
            }
        }
    }

    fn two_losses(t: &mut Tape, x: Var) -> (Var, Var) {
        let s = t.softplus(x).unwrap();
        let l1 = t.sum(s).unwrap();
        let e = t.softmax(x, Axis::Cols).unwrap();
        let c = t.cumsum(e, Axis::Cols).unwrap();
        let sq = t.square(c).unwrap();
        let l2 = t.mean(sq).unwrap();
        (l1, l2)
    }

    #[test]
    fn adjoints_are_linear() {
        let x0 = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.7]]).unwrap();
        let grad_of = |pick: u8| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let (l1, l2) = two_losses(&mut t, x);
            let loss = match pick {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.backward(loss).unwrap();
            t.grad(x).unwrap().clone()
        };
        let g1 = grad_of(0);
        let g2 = grad_of(1);
        let g12 = grad_of(2);
        for i in 0..g12.len() {
            assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible() {
        let x0 = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.7]]).unwrap();
        let run = || {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let (l1, l2) = two_losses(&mut t, x);
            let l = t.add(l1, l2).unwrap();
            t.backward(l).unwrap();
            (t.value(l).clone(), t.grad(x).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn row_function_scales_partials_by_upstream() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        // f(row) = 2*a0 + 3*a1
        let value = Tensor::column(vec![8.0, 18.0]);
        let partials = vec![Tensor::from_rows(&[vec![2.0, 3.0], vec![2.0, 3.0]]).unwrap()];
        let y = t.row_function("lin", &[a], value, partials).unwrap();
        let y = t.scale(y, 0.5).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 1.5, 1.0, 1.5]);
    }
}
