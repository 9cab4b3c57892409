//! The tape and its node records.
//!
//! Every operation appends one node holding its forward value and the indices
//! of its inputs. Nodes are appended in evaluation order, so walking the tape
//! backwards is a valid reverse topological order and each node is visited
//! exactly once during [`Tape::backward`].

use std::cell::{Cell, Ref, RefCell};

use nalgebra::DMatrix;

use crate::error::{AdError, Result};

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    LogDet { input: usize, inverse: Matrix },
    QuadForm(usize, usize),
    TileCols(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { input: usize, start: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Matrix,
    pub(crate) op: Op,
}

/// A growable record of a computation over dense matrices.
///
/// One tape belongs to one thread; graphs are rebuilt for every evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) index: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and re-arms the tape for a new graph.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_element(1, 1, value))
    }

    pub(crate) fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// A tape can be swept once; a second call fails with
    /// [`AdError::AlreadyConsumed`] until [`Tape::reset`] is called.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(AdError::NotScalarRoot(shape));
        }
        if self.consumed.replace(true) {
            return Err(AdError::AlreadyConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.index] = Some(Matrix::from_element(1, 1, 1.0));
        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            crate::ops::backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar root with respect to every node that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of the right shape if the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes()[self.index].value.shape()
    }

    pub fn value(&self) -> Matrix {
        self.tape.nodes()[self.index].value.clone()
    }

    /// First entry of the value; convenient for 1x1 results.
    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.index].value[(0, 0)]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.nodes()[self.index].value)
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Matrix>], index: usize, delta: Matrix) {
    match &mut grads[index] {
        Some(g) => *g += delta,
        slot @ None => *slot = Some(delta),
    }
}
