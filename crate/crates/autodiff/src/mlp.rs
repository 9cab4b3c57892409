use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AdError, Result};
use crate::ops::gelu;
use crate::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_var<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => v.gelu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// One affine layer. Inputs are rows, so `weight` is `in x out` and `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Multilayer perceptron: affine layers separated by an activation, affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    /// Gaussian init with variance `1 / fan_in`, zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).unwrap();
                Layer {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| normal.sample(rng)),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[0], w[1]),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    /// Layer sizes, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.ncols()));
        sizes
    }

    /// Plain evaluation without recording a graph. `input` is `n x in`.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if h.ncols() != layer.weight.nrows() {
                return Err(AdError::ShapeMismatch {
                    op: "mlp_forward",
                    left: h.shape(),
                    right: layer.weight.shape(),
                });
            }
            h = &h * &layer.weight;
            for mut row in h.row_iter_mut() {
                row += &layer.bias;
            }
            if k + 1 < self.layers.len() {
                h.apply(|x| *x = self.activation.apply(*x));
            }
        }
        Ok(h)
    }

    /// Registers every weight and bias on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, true)
    }

    /// Registers the parameters either as leaves or as constants.
    pub fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let reg = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (reg(&l.weight), reg(&l.bias)))
                .collect(),
            activation: self.activation,
        }
    }

    /// Parameters in a fixed order: weight then bias, layer by layer.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// An [`MlpParams`] whose tensors live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
    pub activation: Activation,
}

impl<'t> BoundMlp<'t> {
    /// Same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn apply(&self, input: Var<'t>) -> Result<Var<'t>> {
        mlp_apply(self, input)
    }
}

/// Applies the network to the rows of `input`.
pub fn mlp_apply<'t>(mlp: &BoundMlp<'t>, input: Var<'t>) -> Result<Var<'t>> {
    let mut h = input;
    for (k, (w, b)) in mlp.layers.iter().enumerate() {
        h = h.matmul(w)?.add_row(b)?;
        if k + 1 < mlp.layers.len() {
            h = mlp.activation.apply_var(h);
        }
    }
    Ok(h)
}
