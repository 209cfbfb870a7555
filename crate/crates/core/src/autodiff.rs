//! A small reverse-mode tape over dense matrices.
//!
//! Every value on the tape is a [`Matrix`]; scalars are 1×1. Nodes are
//! appended in evaluation order, so a reverse sweep over node ids is a valid
//! topological order for backpropagation.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// A primitive whose forward value is computed by the caller and whose
/// adjoint rule is supplied here. Used for kernel-matrix assembly.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adjoints for each input given the output adjoint `grad`.
    /// `None` means the input receives no gradient from this node.
    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], output: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    MulScalar,
    MatMul,
    Transpose,
    Exp,
    Log,
    Softplus,
    Square,
    ClampMin(f64),
    Sum,
    ColSums,
    Trace,
    Diag,
    DiagEmbed,
    Tril { strict: bool },
    Cholesky,
    TriSolve { transpose: bool },
    LogDet { inverse: Matrix },
    QuadForm,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    op: Op,
    inputs: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
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

    fn push(&self, value: Matrix, op: Op, inputs: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, inputs });
        Var { tape: self, id }
    }

    /// Records a leaf. Leaves are the only nodes [`Gradients`] reports on.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::scalar(value))
    }

    /// Records a caller-computed value produced by `op` from `inputs`.
    pub fn custom<'t>(
        &'t self,
        op: Box<dyn CustomOp>,
        inputs: &[Var<'t>],
        value: Matrix,
    ) -> Var<'t> {
        self.push(value, Op::Custom(op), inputs.iter().map(|v| v.id).collect())
    }

    /// Reverse sweep from a scalar `output`.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Matrix::scalar(1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Matrix> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let adj = backward(&node.op, &g, &inputs, &node.value)?;
                for (&input, a) in node.inputs.iter().zip(adj) {
                    if let Some(a) = a {
                        match &mut grads[input] {
                            Some(acc) => acc.axpy(1.0, &a)?,
                            slot @ None => *slot = Some(a),
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adjoints of the leaves of a tape after [`Tape::gradient`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zero when `var` does not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Matrix {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn tril(m: &Matrix) -> Matrix {
    m.lower_triangle(false)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn backward(op: &Op, g: &Matrix, x: &[&Matrix], out: &Matrix) -> Result<Vec<Option<Matrix>>> {
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Op::Mul => vec![Some(g.hadamard(x[1])?), Some(g.hadamard(x[0])?)],
        Op::Div => {
            let ga = g.zip_map(x[1], |g, b| g / b)?;
            let gb = ga.hadamard(out)?.scale(-1.0);
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone()), Some(Matrix::scalar(g.sum()))],
        Op::MulScalar => {
            let s = x[1][(0, 0)];
            let gs = g.hadamard(x[0])?.sum();
            vec![Some(g.scale(s)), Some(Matrix::scalar(gs))]
        }
        Op::MatMul => vec![Some(g.matmul_t(x[1])?), Some(x[0].t_matmul(g)?)],
        Op::Transpose => vec![Some(g.transpose())],
        Op::Exp => vec![Some(g.hadamard(out)?)],
        Op::Log => vec![Some(g.zip_map(x[0], |g, a| g / a)?)],
        Op::Softplus => vec![Some(g.zip_map(x[0], |g, a| g * sigmoid(a))?)],
        Op::Square => vec![Some(g.zip_map(x[0], |g, a| 2.0 * g * a)?)],
        Op::ClampMin(floor) => {
            vec![Some(
                g.zip_map(x[0], |g, a| if a > *floor { g } else { 0.0 })?,
            )]
        }
        Op::Sum => vec![Some(Matrix::filled(x[0].rows(), x[0].cols(), g[(0, 0)]))],
        Op::ColSums => {
            let (r, c) = x[0].shape();
            vec![Some(Matrix::from_fn(r, c, |_, j| g[(0, j)]))]
        }
        Op::Trace => {
            let mut m = Matrix::zeros(x[0].rows(), x[0].cols());
            m.add_diagonal(g[(0, 0)]);
            vec![Some(m)]
        }
        Op::Diag => {
            let n = x[0].rows();
            let mut m = Matrix::zeros(n, x[0].cols());
            for i in 0..n.min(x[0].cols()) {
                m[(i, i)] = g[(i, 0)];
            }
            vec![Some(m)]
        }
        Op::DiagEmbed => vec![Some(Matrix::column(g.diagonal()))],
        Op::Tril { strict } => vec![Some(g.lower_triangle(*strict))],
        Op::Cholesky => vec![Some(cholesky_adjoint(out, g)?)],
        Op::TriSolve { transpose } => {
            let l = x[0];
            if *transpose {
                // X = L⁻ᵀB
                let gb = linalg::solve_lower(l, g, false)?;
                let gl = linalg::lower_abt(out, &gb, -1.0)?;
                vec![Some(gl), Some(gb)]
            } else {
                // X = L⁻¹B
                let gb = linalg::solve_lower(l, g, true)?;
                let gl = linalg::lower_abt(&gb, out, -1.0)?;
                vec![Some(gl), Some(gb)]
            }
        }
        Op::LogDet { inverse } => vec![Some(inverse.scale(g[(0, 0)]))],
        Op::QuadForm => {
            let (v, a) = (x[0], x[1]);
            let s = g[(0, 0)];
            let av = a.matmul(v)?;
            let atv = a.t_matmul(v)?;
            let gv = av.add(&atv)?.scale(s);
            let ga = v.matmul_t(v)?.scale(s);
            vec![Some(gv), Some(ga)]
        }
        Op::Custom(c) => c.backward(g, x, out),
    })
}

/// Adjoint of `L = chol(A)` for symmetric `A`:
/// `Ā = ½(S + Sᵀ)`, `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, with `Φ` taking the lower
/// triangle and halving its diagonal.
fn cholesky_adjoint(l: &Matrix, gl: &Matrix) -> Result<Matrix> {
    let mut p = l.t_matmul(&tril(gl))?.lower_triangle(false);
    for i in 0..p.rows() {
        p[(i, i)] *= 0.5;
    }
    // X = L⁻ᵀ P, then S = X L⁻¹ = (L⁻ᵀ Xᵀ)ᵀ
    let xm = linalg::solve_lower(l, &p, true)?;
    let s = linalg::solve_lower(l, &xm.transpose(), true)?.transpose();
    let st = s.transpose();
    Ok(s.add(&st)?.scale(0.5))
}

fn check_same(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    a.same_shape(b, op)
}

fn check_scalar(s: &Matrix, op: &'static str) -> Result<()> {
    if s.shape() != (1, 1) {
        return Err(Error::dims(
            op,
            format!("expected a 1x1 scalar, got {:?}", s.shape()),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> f64 {
        self.value()[(0, 0)]
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Result<Matrix>) -> Result<Var<'t>> {
        let v = f(&self.value())?;
        Ok(self.tape.push(v, op, vec![self.id]))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let b = other.value();
            f(&a, &b)?
        };
        Ok(self.tape.push(v, op, vec![self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a.add(b))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a.hadamard(b))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div, |a, b| {
            check_same(a, b, "div")?;
            a.zip_map(b, |x, y| x / y)
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.tape.push(v, Op::Scale(c), vec![self.id])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds the 1×1 `s` to every entry.
    pub fn add_scalar(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.binary(s, Op::AddScalar, |a, s| {
            check_scalar(s, "add_scalar")?;
            let s = s[(0, 0)];
            Ok(a.map(|v| v + s))
        })
    }

    /// Multiplies every entry by the 1×1 `s`.
    pub fn mul_scalar(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.binary(s, Op::MulScalar, |a, s| {
            check_scalar(s, "mul_scalar")?;
            Ok(a.scale(s[(0, 0)]))
        })
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul, |a, b| a.matmul(b))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose, vec![self.id])
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.push(v, Op::Exp, vec![self.id])
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.tape.push(v, Op::Log, vec![self.id])
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.tape.push(v, Op::Softplus, vec![self.id])
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.push(v, Op::Square, vec![self.id])
    }

    /// `max(x, floor)` elementwise; the gradient is cut where clamped.
    pub fn clamp_min(&self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor));
        self.tape.push(v, Op::ClampMin(floor), vec![self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Matrix::scalar(self.value().sum());
        self.tape.push(v, Op::Sum, vec![self.id])
    }

    /// Sums over rows, giving a 1×cols row vector.
    pub fn col_sums(&self) -> Var<'t> {
        let v = {
            let a = self.value();
            let mut s = vec![0.0; a.cols()];
            for i in 0..a.rows() {
                for (acc, x) in s.iter_mut().zip(a.row_slice(i)) {
                    *acc += x;
                }
            }
            Matrix::row(s)
        };
        self.tape.push(v, Op::ColSums, vec![self.id])
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        self.unary(Op::Trace, |a| {
            if !a.is_square() {
                return Err(Error::dims("trace", "matrix is not square"));
            }
            Ok(Matrix::scalar(a.trace()))
        })
    }

    /// Diagonal as a column vector.
    pub fn diag(&self) -> Var<'t> {
        let v = Matrix::column(self.value().diagonal());
        self.tape.push(v, Op::Diag, vec![self.id])
    }

    /// Square diagonal matrix from a column vector.
    pub fn diag_embed(&self) -> Result<Var<'t>> {
        self.unary(Op::DiagEmbed, |a| {
            if a.cols() != 1 {
                return Err(Error::dims("diag_embed", "expected a column vector"));
            }
            Ok(Matrix::diag(a.as_slice()))
        })
    }

    pub fn tril(&self, strict: bool) -> Var<'t> {
        let v = self.value().lower_triangle(strict);
        self.tape.push(v, Op::Tril { strict }, vec![self.id])
    }

    /// Lower Cholesky factor of a symmetric matrix. The jitter chosen by
    /// [`linalg::cholesky_with_jitter`] is treated as a constant; the jitter
    /// actually used is returned alongside the node.
    pub fn cholesky(&self, base_jitter: f64) -> Result<(Var<'t>, f64)> {
        let f = linalg::cholesky_with_jitter(&self.value(), base_jitter)?;
        let jitter = f.jitter_used;
        Ok((self.tape.push(f.lower, Op::Cholesky, vec![self.id]), jitter))
    }

    /// `self⁻¹ · rhs` (or `self⁻ᵀ · rhs`) for lower-triangular `self`.
    pub fn tri_solve(&self, rhs: Var<'t>, transpose: bool) -> Result<Var<'t>> {
        self.binary(rhs, Op::TriSolve { transpose }, |l, b| {
            linalg::solve_lower(l, b, transpose)
        })
    }

    /// `log|A|` of a symmetric positive-definite matrix.
    pub fn log_det(&self) -> Result<Var<'t>> {
        let (v, inverse) = {
            let a = self.value();
            let f = linalg::cholesky_with_jitter(&a, 1e-12)?;
            (Matrix::scalar(linalg::log_det(&f)), f.inverse()?)
        };
        Ok(self.tape.push(v, Op::LogDet { inverse }, vec![self.id]))
    }

    /// `selfᵀ · a · self` for a column vector `self`.
    pub fn quad_form(&self, a: Var<'t>) -> Result<Var<'t>> {
        self.binary(a, Op::QuadForm, |v, a| {
            if v.cols() != 1 || !a.is_square() || a.rows() != v.rows() {
                return Err(Error::dims(
                    "quad_form",
                    format!("vector {:?} against matrix {:?}", v.shape(), a.shape()),
                ));
            }
            let av = a.matmul(v)?;
            Ok(Matrix::scalar(v.t_matmul(&av)?[(0, 0)]))
        })
    }
}

/// Outcome of [`fd_check`].
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `f` at `at` with central differences
/// `(f(x+heᵢ) − f(x−heᵢ)) / 2h`.
///
/// The relative error of a component is `|g − ĝ| / max(|g|, |ĝ|, 1e-8)`; the
/// maximum over components is reported.
pub fn fd_check<F>(f: F, at: &[f64], h: f64) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    assert!(h > 0.0, "step must be positive");
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::column(at.to_vec()));
        let y = f(&tape, x)?;
        tape.gradient(y)?.wrt(x).into_vec()
    };
    let eval = |point: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::column(point));
        Ok(f(&tape, x)?.item())
    };
    let mut numeric = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let mut plus = at.to_vec();
        plus[i] += h;
        let mut minus = at.to_vec();
        minus[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Reshapes a column vector into `rows × cols` (row-major).
pub fn reshape<'t>(v: Var<'t>, rows: usize, cols: usize) -> Result<Var<'t>> {
    let n = v.shape().0;
    if v.shape().1 != 1 || n != rows * cols {
        return Err(Error::dims(
            "reshape",
            format!("{:?} to {rows}x{cols}", v.shape()),
        ));
    }
    let value = Matrix::from_vec(rows, cols, v.value().as_slice().to_vec());
    Ok(v.tape()
        .custom(Box::new(Reshape { rows: n, cols: 1 }), &[v], value))
}

struct Reshape {
    rows: usize,
    cols: usize,
}

impl CustomOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        grad: &Matrix,
        _inputs: &[&Matrix],
        _output: &Matrix,
    ) -> Vec<Option<Matrix>> {
        vec![Some(Matrix::from_vec(
            self.rows,
            self.cols,
            grad.as_slice().to_vec(),
        ))]
    }
}

/// Contiguous segment `[start, start+rows*cols)` of a column leaf, reshaped.
pub fn segment<'t>(v: Var<'t>, start: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
    let n = v.shape().0;
    if v.shape().1 != 1 || start + rows * cols > n {
        return Err(Error::dims(
            "segment",
            format!("{start}+{rows}x{cols} of {n}"),
        ));
    }
    let value = Matrix::from_vec(
        rows,
        cols,
        v.value().as_slice()[start..start + rows * cols].to_vec(),
    );
    Ok(v.tape()
        .custom(Box::new(Segment { start, total: n }), &[v], value))
}

struct Segment {
    start: usize,
    total: usize,
}

impl CustomOp for Segment {
    fn name(&self) -> &'static str {
        "segment"
    }

    fn backward(
        &self,
        grad: &Matrix,
        _inputs: &[&Matrix],
        _output: &Matrix,
    ) -> Vec<Option<Matrix>> {
        let mut g = vec![0.0; self.total];
        g[self.start..self.start + grad.len()].copy_from_slice(grad.as_slice());
        vec![Some(Matrix::column(g))]
    }
}
