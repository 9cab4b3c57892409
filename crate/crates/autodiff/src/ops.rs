//! Forward operations and their reverse-mode rules.

use nalgebra::Cholesky;

use crate::error::{AdError, Result};
use crate::tape::{accumulate, Matrix, Node, Op, Var};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AdError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

fn lower_mask(mut a: Matrix) -> Matrix {
    a.fill_upper_triangle(0.0, 1);
    a
}

/// Lower triangle of `a` with the diagonal halved.
fn phi(a: &Matrix) -> Matrix {
    let mut out = lower_mask(a.clone());
    for i in 0..out.nrows() {
        out[(i, i)] *= 0.5;
    }
    out
}

fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero diagonal")
}

fn solve_lower_t(l: &Matrix, b: &Matrix) -> Matrix {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero diagonal")
}

fn check_triangular(op: &'static str, l: &Matrix, b: &Matrix) -> Result<()> {
    if !l.is_square() || l.nrows() != b.nrows() {
        return Err(AdError::ShapeMismatch {
            op,
            left: l.shape(),
            right: b.shape(),
        });
    }
    if l.diagonal().iter().any(|d| *d == 0.0 || !d.is_finite()) {
        return Err(AdError::NotPositiveDefinite);
    }
    Ok(())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<'t> Var<'t> {
    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var<'t> {
        let value = self.with_value(f);
        self.tape.push(value, op)
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.index].value, &nodes[rhs.index].value);
            if a.ncols() != b.nrows() {
                return Err(AdError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            a * b
        };
        Ok(self.tape.push(value, Op::MatMul(self.index, rhs.index)))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl FnOnce(&Matrix, &Matrix) -> Matrix,
    ) -> Result<Var<'t>> {
        self.check_same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.index].value, &nodes[rhs.index].value);
            same_shape(name, a, b)?;
            f(a, b)
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.index, rhs.index), |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.index, rhs.index), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.index, rhs.index), |a, b| {
            a.component_mul(b)
        })
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.index, factor), |a| a * factor)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.index), |a| a.add_scalar(c))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.index), |a| a.transpose())
    }

    /// Adds a `1 x k` row to every row of an `n x k` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(row);
        let value = {
            let nodes = self.tape.nodes();
            let (a, r) = (&nodes[self.index].value, &nodes[row.index].value);
            if r.nrows() != 1 || r.ncols() != a.ncols() {
                return Err(AdError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape(),
                    right: r.shape(),
                });
            }
            let mut out = a.clone();
            for mut out_row in out.row_iter_mut() {
                out_row += r;
            }
            out
        };
        Ok(self.tape.push(value, Op::AddRow(self.index, row.index)))
    }

    /// Adds a `k x 1` column to every column of a `k x n` matrix.
    pub fn add_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(col);
        let value = {
            let nodes = self.tape.nodes();
            let (a, c) = (&nodes[self.index].value, &nodes[col.index].value);
            if c.ncols() != 1 || c.nrows() != a.nrows() {
                return Err(AdError::ShapeMismatch {
                    op: "add_col",
                    left: a.shape(),
                    right: c.shape(),
                });
            }
            let mut out = a.clone();
            for mut out_col in out.column_iter_mut() {
                out_col += c;
            }
            out
        };
        Ok(self.tape.push(value, Op::AddCol(self.index, col.index)))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.index), |a| a.map(gelu))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), |a| a.map(f64::tanh))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.index), |a| a.map(f64::exp))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.index), |a| a.map(f64::ln))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.index), |a| a.map(|x| x * x))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.index), |a| Matrix::from_element(1, 1, a.sum()))
    }

    /// Lower Cholesky factor of the symmetric part of a square matrix.
    pub fn cholesky(&self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.index].value;
            if !a.is_square() {
                return Err(AdError::ShapeMismatch {
                    op: "cholesky",
                    left: a.shape(),
                    right: a.shape(),
                });
            }
            Cholesky::new(symmetrize(a))
                .ok_or(AdError::NotPositiveDefinite)?
                .unpack()
        };
        Ok(self.tape.push(value, Op::Cholesky(self.index)))
    }

    /// `L^{-1} B` for lower-triangular `self = L`; the upper triangle is ignored.
    pub fn solve_lower(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes();
            let (l, b) = (&nodes[self.index].value, &nodes[rhs.index].value);
            check_triangular("solve_lower", l, b)?;
            solve_lower(l, b)
        };
        Ok(self.tape.push(value, Op::SolveLower(self.index, rhs.index)))
    }

    /// `L^{-T} B` for lower-triangular `self = L`.
    pub fn solve_lower_t(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes();
            let (l, b) = (&nodes[self.index].value, &nodes[rhs.index].value);
            check_triangular("solve_lower_t", l, b)?;
            solve_lower_t(l, b)
        };
        Ok(self.tape.push(value, Op::SolveLowerT(self.index, rhs.index)))
    }

    /// `ln det` of the symmetric part of a positive definite matrix.
    pub fn logdet(&self) -> Result<Var<'t>> {
        let (value, inverse) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.index].value;
            if !a.is_square() {
                return Err(AdError::ShapeMismatch {
                    op: "logdet",
                    left: a.shape(),
                    right: a.shape(),
                });
            }
            let chol = Cholesky::new(symmetrize(a)).ok_or(AdError::NotPositiveDefinite)?;
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            (ld, symmetrize(&chol.inverse()))
        };
        Ok(self.tape.push(
            Matrix::from_element(1, 1, value),
            Op::LogDet {
                input: self.index,
                inverse,
            },
        ))
    }

    /// `sum_c x_c^T A x_c` over the columns of `self = x`.
    pub fn quadratic_form(&self, a: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(a);
        let value = {
            let nodes = self.tape.nodes();
            let (x, m) = (&nodes[self.index].value, &nodes[a.index].value);
            if !m.is_square() || m.nrows() != x.nrows() {
                return Err(AdError::ShapeMismatch {
                    op: "quadratic_form",
                    left: x.shape(),
                    right: m.shape(),
                });
            }
            x.component_mul(&(m * x)).sum()
        };
        Ok(self.tape.push(
            Matrix::from_element(1, 1, value),
            Op::QuadForm(self.index, a.index),
        ))
    }

    /// Horizontally repeats the matrix `reps` times.
    pub fn tile_cols(&self, reps: usize) -> Var<'t> {
        self.unary(Op::TileCols(self.index, reps), |a| {
            let (r, c) = a.shape();
            Matrix::from_fn(r, c * reps, |i, j| a[(i, j % c)])
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if start + len > c {
            return Err(AdError::ShapeMismatch {
                op: "slice_cols",
                left: (r, c),
                right: (r, start + len),
            });
        }
        Ok(self.unary(Op::SliceCols { input: self.index, start }, |a| {
            a.columns(start, len).into_owned()
        }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().expect("concat_cols needs at least one part");
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes();
            let rows = nodes[first.index].value.nrows();
            let mut total = 0;
            for p in parts {
                first.check_same_tape(p);
                let v = &nodes[p.index].value;
                if v.nrows() != rows {
                    return Err(AdError::ShapeMismatch {
                        op: "concat_cols",
                        left: nodes[first.index].value.shape(),
                        right: v.shape(),
                    });
                }
                total += v.ncols();
            }
            let mut out = Matrix::zeros(rows, total);
            let mut at = 0;
            for p in parts {
                let v = &nodes[p.index].value;
                out.columns_mut(at, v.ncols()).copy_from(v);
                at += v.ncols();
            }
            out
        };
        Ok(tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.index).collect())))
    }
}

/// Pushes the gradient `g` of node `i` into its inputs.
pub(crate) fn backprop(nodes: &[Node], i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |k: usize| &nodes[k].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            accumulate(grads, *a, g * val(*b).transpose());
            accumulate(grads, *b, val(*a).transpose() * g);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, -g);
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, g.component_mul(val(*b)));
            accumulate(grads, *b, g.component_mul(val(*a)));
        }
        Op::Scale(a, f) => accumulate(grads, *a, g * *f),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::AddRow(a, r) => {
            accumulate(grads, *a, g.clone());
            let mut row = Matrix::zeros(1, g.ncols());
            for g_row in g.row_iter() {
                row += g_row;
            }
            accumulate(grads, *r, row);
        }
        Op::AddCol(a, c) => {
            accumulate(grads, *a, g.clone());
            let mut col = Matrix::zeros(g.nrows(), 1);
            for g_col in g.column_iter() {
                col += g_col;
            }
            accumulate(grads, *c, col);
        }
        Op::Gelu(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, x| gi * gelu_grad(x))),
        Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
        Op::Exp(a) => accumulate(grads, *a, g.component_mul(out)),
        Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, x| gi / x)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, Matrix::from_element(r, c, g[(0, 0)]));
        }
        Op::Cholesky(a) => {
            // dA = dL L^T + L dL^T  =>  A_bar = sym(L^{-T} Phi(L^T L_bar) L^{-1})
            let l = out;
            let p = phi(&(l.transpose() * g));
            let x = solve_lower_t(l, &p);
            let s = solve_lower_t(l, &x.transpose()).transpose();
            accumulate(grads, *a, symmetrize(&s));
        }
        Op::SolveLower(l, b) => {
            let b_bar = solve_lower_t(val(*l), g);
            let l_bar = lower_mask(-(&b_bar * out.transpose()));
            accumulate(grads, *l, l_bar);
            accumulate(grads, *b, b_bar);
        }
        Op::SolveLowerT(l, b) => {
            let b_bar = solve_lower(val(*l), g);
            let l_bar = lower_mask(-(out * b_bar.transpose()));
            accumulate(grads, *l, l_bar);
            accumulate(grads, *b, b_bar);
        }
        Op::LogDet { input, inverse } => accumulate(grads, *input, inverse * g[(0, 0)]),
        Op::QuadForm(x, a) => {
            let (xv, av) = (val(*x), val(*a));
            let s = g[(0, 0)];
            accumulate(grads, *x, (av + av.transpose()) * xv * s);
            accumulate(grads, *a, xv * xv.transpose() * s);
        }
        Op::TileCols(a, reps) => {
            let (r, c) = val(*a).shape();
            let mut acc = Matrix::zeros(r, c);
            for k in 0..*reps {
                acc += g.columns(k * c, c);
            }
            accumulate(grads, *a, acc);
        }
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for p in parts {
                let w = val(*p).ncols();
                accumulate(grads, *p, g.columns(at, w).into_owned());
                at += w;
            }
        }
        Op::SliceCols { input, start } => {
            let (r, c) = val(*input).shape();
            let mut full = Matrix::zeros(r, c);
            full.columns_mut(*start, g.ncols()).copy_from(g);
            accumulate(grads, *input, full);
        }
    }
}
