use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;

/// Fully connected ReLU network; the output layer is linear.
///
/// Weights are stored `(fan_in, fan_out)` so a batch `(n, fan_in)` maps
/// through `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Parameter handles of one [`Mlp`] on one tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundMlp {
    /// Handles in declaration order: `w0, b0, w1, b1, ...`.
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }
}

impl Mlp {
    /// Zero-initialized network with the given layer widths.
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| Tensor::zeros(w[0], w[1])).collect();
        let biases = widths.windows(2).map(|w| Tensor::zeros(1, w[1])).collect();
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// Input, two hidden layers of `hidden`, output.
    pub fn two_hidden(input: usize, hidden: usize, output: usize) -> Result<Self> {
        Self::new(&[input, hidden, hidden, output])
    }

    pub fn from_parts(widths: Vec<usize>, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let mut mlp = Self::new(&widths)?;
        if weights.len() != mlp.weights.len() || biases.len() != mlp.biases.len() {
            return Err(Error::Config("layer count does not match widths".into()));
        }
        for (slot, w) in mlp.weights.iter_mut().zip(weights) {
            if slot.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mlp",
                    lhs: slot.shape(),
                    rhs: w.shape(),
                });
            }
            *slot = w;
        }
        for (slot, b) in mlp.biases.iter_mut().zip(biases) {
            if slot.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mlp",
                    lhs: slot.shape(),
                    rhs: b.shape(),
                });
            }
            *slot = b;
        }
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in declaration order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    /// Kaiming-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for w in &mut self.weights {
            let bound = (6.0 / w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        for b in &mut self.biases {
            b.data_mut().fill(0.0);
        }
    }

    /// Registers the parameters as tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, input: Var) -> Result<Var> {
        let width = tape.shape(input)[1];
        if width != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: tape.shape(input),
                rhs: [width, self.input_width()],
            });
        }
        let last = self.weights.len() - 1;
        let mut h = input;
        for (i, (w, b)) in bound.weights.iter().zip(&bound.biases).enumerate() {
            let z = tape.matmul(h, *w)?;
            let z = tape.add(z, *b)?;
            h = if i < last { tape.relu(z)? } else { z };
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: input.shape(),
                rhs: [input.cols(), self.input_width()],
            });
        }
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w)?;
            let cols = z.cols();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v += b.data()[k % cols];
                if i < last {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        Ok(h)
    }
}
