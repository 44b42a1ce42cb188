//! Matrix-level differentiation: one op vocabulary, two backends.
//!
//! [`Eval`] just computes values. [`Tape`] records every op and runs reverse
//! mode over the recording. Model code is written once against [`Ops`].

use super::matrix::Matrix;
use std::rc::Rc;

pub trait Ops {
    type V: Clone;

    fn val<'s>(&'s self, v: &'s Self::V) -> &'s Matrix;
    fn constant(&mut self, m: Matrix) -> Self::V;
    fn param(&mut self, index: usize) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Adds a `1 x m` row to every row.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    /// Multiplies every row elementwise by a `1 x m` row.
    fn mul_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    /// Multiplies every row by the matching entry of an `n x 1` column.
    fn mul_col(&mut self, a: &Self::V, col: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn sin(&mut self, a: &Self::V) -> Self::V;
    fn cos(&mut self, a: &Self::V) -> Self::V;
    fn square(&mut self, a: &Self::V) -> Self::V;
    fn sqrt(&mut self, a: &Self::V) -> Self::V;
    fn abs(&mut self, a: &Self::V) -> Self::V;
    /// `1 - a^2`, the tanh derivative written in terms of its output.
    fn one_minus_square(&mut self, a: &Self::V) -> Self::V;
    /// `n x m -> n x 1`
    fn sum_cols(&mut self, a: &Self::V) -> Self::V;
    /// `-> 1 x 1`
    fn sum_all(&mut self, a: &Self::V) -> Self::V;
    fn col_slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn row_slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;
    fn gather_rows(&mut self, a: &Self::V, index: &[usize]) -> Self::V;
}

fn broadcast_row(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!((row.rows(), row.cols()), (1, a.cols()), "row broadcast shape");
    let mut out = a.clone();
    let r = row.data();
    for i in 0..a.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
            *o = f(*o, b);
        }
    }
    out
}

fn broadcast_col(a: &Matrix, col: &Matrix) -> Matrix {
    assert_eq!((col.rows(), col.cols()), (a.rows(), 1), "column broadcast shape");
    let mut out = a.clone();
    for i in 0..a.rows() {
        let c = col.data()[i];
        out.row_mut(i).iter_mut().for_each(|v| *v *= c);
    }
    out
}

fn col_slice(a: &Matrix, start: usize, len: usize) -> Matrix {
    assert!(start + len <= a.cols(), "column slice out of range");
    let mut out = Matrix::zeros(a.rows(), len);
    for i in 0..a.rows() {
        out.row_mut(i).copy_from_slice(&a.row(i)[start..start + len]);
    }
    out
}

fn row_slice(a: &Matrix, start: usize, len: usize) -> Matrix {
    assert!(start + len <= a.rows(), "row slice out of range");
    Matrix::from_vec(len, a.cols(), a.data()[start * a.cols()..(start + len) * a.cols()].to_vec())
}

fn concat_cols(parts: &[&Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows(), rows, "concat row mismatch");
            out.row_mut(i)[off..off + p.cols()].copy_from_slice(p.row(i));
            off += p.cols();
        }
    }
    out
}

fn gather_rows(a: &Matrix, index: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(index.len(), a.cols());
    for (i, &j) in index.iter().enumerate() {
        out.row_mut(i).copy_from_slice(a.row(j));
    }
    out
}

fn sum_cols(a: &Matrix) -> Matrix {
    Matrix::from_vec(a.rows(), 1, a.row_sums())
}

/// Value-only backend. Parameters are borrowed, never copied.
pub struct Eval<'a> {
    params: &'a [Matrix],
}

#[derive(Clone)]
pub enum EvalValue {
    Param(usize),
    Owned(Rc<Matrix>),
}

impl<'a> Eval<'a> {
    pub fn new(params: &'a [Matrix]) -> Self {
        Self { params }
    }

    fn own(m: Matrix) -> EvalValue {
        EvalValue::Owned(Rc::new(m))
    }
}

impl Ops for Eval<'_> {
    type V = EvalValue;

    fn val<'s>(&'s self, v: &'s EvalValue) -> &'s Matrix {
        match v {
            EvalValue::Param(i) => &self.params[*i],
            EvalValue::Owned(m) => m,
        }
    }
    fn constant(&mut self, m: Matrix) -> EvalValue {
        Self::own(m)
    }
    fn param(&mut self, index: usize) -> EvalValue {
        EvalValue::Param(index)
    }
    fn matmul(&mut self, a: &EvalValue, b: &EvalValue) -> EvalValue {
        Self::own(self.val(a).matmul(self.val(b)))
    }
    fn add(&mut self, a: &EvalValue, b: &EvalValue) -> EvalValue {
        Self::own(self.val(a).zip_map(self.val(b), |x, y| x + y))
    }
    fn sub(&mut self, a: &EvalValue, b: &EvalValue) -> EvalValue {
        Self::own(self.val(a).zip_map(self.val(b), |x, y| x - y))
    }
    fn mul(&mut self, a: &EvalValue, b: &EvalValue) -> EvalValue {
        Self::own(self.val(a).zip_map(self.val(b), |x, y| x * y))
    }
    fn div(&mut self, a: &EvalValue, b: &EvalValue) -> EvalValue {
        Self::own(self.val(a).zip_map(self.val(b), |x, y| x / y))
    }
    fn add_row(&mut self, a: &EvalValue, row: &EvalValue) -> EvalValue {
        Self::own(broadcast_row(self.val(a), self.val(row), |x, y| x + y))
    }
    fn mul_row(&mut self, a: &EvalValue, row: &EvalValue) -> EvalValue {
        Self::own(broadcast_row(self.val(a), self.val(row), |x, y| x * y))
    }
    fn mul_col(&mut self, a: &EvalValue, col: &EvalValue) -> EvalValue {
        Self::own(broadcast_col(self.val(a), self.val(col)))
    }
    fn scale(&mut self, a: &EvalValue, c: f64) -> EvalValue {
        Self::own(self.val(a).map(|x| x * c))
    }
    fn add_scalar(&mut self, a: &EvalValue, c: f64) -> EvalValue {
        Self::own(self.val(a).map(|x| x + c))
    }
    fn tanh(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(f64::tanh))
    }
    fn sin(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(f64::sin))
    }
    fn cos(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(f64::cos))
    }
    fn square(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(|x| x * x))
    }
    fn sqrt(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(f64::sqrt))
    }
    fn abs(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(f64::abs))
    }
    fn one_minus_square(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(self.val(a).map(|x| 1.0 - x * x))
    }
    fn sum_cols(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(sum_cols(self.val(a)))
    }
    fn sum_all(&mut self, a: &EvalValue) -> EvalValue {
        Self::own(Matrix::scalar(self.val(a).sum()))
    }
    fn col_slice(&mut self, a: &EvalValue, start: usize, len: usize) -> EvalValue {
        Self::own(col_slice(self.val(a), start, len))
    }
    fn row_slice(&mut self, a: &EvalValue, start: usize, len: usize) -> EvalValue {
        Self::own(row_slice(self.val(a), start, len))
    }
    fn concat_cols(&mut self, parts: &[EvalValue]) -> EvalValue {
        let ms: Vec<&Matrix> = parts.iter().map(|p| self.val(p)).collect();
        Self::own(concat_cols(&ms))
    }
    fn gather_rows(&mut self, a: &EvalValue, index: &[usize]) -> EvalValue {
        Self::own(gather_rows(self.val(a), index))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    OneMinusSquare(usize),
    SumCols(usize),
    SumAll(usize),
    ColSlice(usize, usize),
    RowSlice(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording backend for reverse mode.
pub struct Tape<'a> {
    params: &'a [Matrix],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
}

/// Adjoints after a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    pub params: Vec<Matrix>,
}

impl Gradients {
    /// Adjoint of a recorded node (zero-shaped `None` if it never received one).
    pub fn wrt(&self, v: usize) -> Option<&Matrix> {
        self.nodes.get(v).and_then(|g| g.as_ref())
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose adjoint is wanted, such as a network input.
    pub fn input(&mut self, m: Matrix) -> usize {
        self.push(m, Op::Leaf, true)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> usize {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    fn unary(&mut self, a: usize, value: Matrix, op: Op) -> usize {
        let ng = self.nodes[a].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: usize, b: usize, value: Matrix, op: Op) -> usize {
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: usize) -> Gradients {
        assert_eq!(self.val(&out).shape(), (1, 1), "backward needs a scalar output");
        let mut g: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut pg: Vec<Matrix> = self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        g[out] = Some(Matrix::scalar(1.0));
        for i in (0..=out).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(i, node, &gi, &mut g, &mut pg);
            g[i] = Some(gi);
        }
        Gradients { nodes: g, params: pg }
    }

    fn propagate(&self, _i: usize, node: &Node, gi: &Matrix, g: &mut [Option<Matrix>], pg: &mut [Matrix]) {
        let v = |k: usize| self.nodes[k].value_ref(self.params);
        let mut acc = |k: usize, m: Matrix| {
            if !self.nodes[k].needs_grad {
                return;
            }
            match &mut g[k] {
                Some(e) => e.add_assign(&m),
                slot => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => pg[*p].add_assign(gi),
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs_grad {
                    acc(*a, gi.matmul_t(v(*b)));
                }
                if self.nodes[*b].needs_grad {
                    acc(*b, v(*a).tmatmul(gi));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gi.clone());
                acc(*b, gi.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gi.clone());
                acc(*b, gi.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, gi.zip_map(v(*b), |x, y| x * y));
                acc(*b, gi.zip_map(v(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                acc(*a, gi.zip_map(v(*b), |x, y| x / y));
                let t = gi.zip_map(v(*a), |x, y| x * y);
                acc(*b, t.zip_map(v(*b), |x, y| -x / (y * y)));
            }
            Op::AddRow(a, r) => {
                acc(*a, gi.clone());
                acc(*r, Matrix::from_vec(1, gi.cols(), gi.col_sums()));
            }
            Op::MulRow(a, r) => {
                acc(*a, broadcast_row(gi, v(*r), |x, y| x * y));
                if self.nodes[*r].needs_grad {
                    let t = gi.zip_map(v(*a), |x, y| x * y);
                    acc(*r, Matrix::from_vec(1, gi.cols(), t.col_sums()));
                }
            }
            Op::MulCol(a, c) => {
                acc(*a, broadcast_col(gi, v(*c)));
                if self.nodes[*c].needs_grad {
                    let t = gi.zip_map(v(*a), |x, y| x * y);
                    acc(*c, sum_cols(&t));
                }
            }
            Op::Scale(a, c) => acc(*a, gi.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, gi.clone()),
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, gi.zip_map(y, |x, t| x * (1.0 - t * t)));
            }
            Op::Sin(a) => acc(*a, gi.zip_map(v(*a), |x, u| x * u.cos())),
            Op::Cos(a) => acc(*a, gi.zip_map(v(*a), |x, u| -x * u.sin())),
            Op::Square(a) => acc(*a, gi.zip_map(v(*a), |x, u| 2.0 * x * u)),
            Op::Sqrt(a) => acc(*a, gi.zip_map(&node.value, |x, y| x / (2.0 * y))),
            Op::Abs(a) => acc(*a, gi.zip_map(v(*a), |x, u| if u > 0.0 { x } else if u < 0.0 { -x } else { 0.0 })),
            Op::OneMinusSquare(a) => acc(*a, gi.zip_map(v(*a), |x, u| -2.0 * x * u)),
            Op::SumCols(a) => {
                let am = v(*a);
                let mut m = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let s = gi.data()[r];
                    m.row_mut(r).iter_mut().for_each(|x| *x = s);
                }
                acc(*a, m);
            }
            Op::SumAll(a) => {
                let (r, c) = v(*a).shape();
                acc(*a, Matrix::filled(r, c, gi.data()[0]));
            }
            Op::ColSlice(a, start) => {
                let (r, c) = v(*a).shape();
                let mut m = Matrix::zeros(r, c);
                for row in 0..r {
                    m.row_mut(row)[*start..*start + gi.cols()].copy_from_slice(gi.row(row));
                }
                acc(*a, m);
            }
            Op::RowSlice(a, start) => {
                let (r, c) = v(*a).shape();
                let mut m = Matrix::zeros(r, c);
                m.data_mut()[start * c..(start + gi.rows()) * c].copy_from_slice(gi.data());
                acc(*a, m);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(&p).cols();
                    if self.nodes[p].needs_grad {
                        acc(p, col_slice(gi, off, w));
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, index) => {
                let (r, c) = v(*a).shape();
                let mut m = Matrix::zeros(r, c);
                for (i, &j) in index.iter().enumerate() {
                    for (d, s) in m.row_mut(j).iter_mut().zip(gi.row(i)) {
                        *d += s;
                    }
                }
                acc(*a, m);
            }
        }
    }
}

impl Node {
    fn value_ref<'s>(&'s self, params: &'s [Matrix]) -> &'s Matrix {
        match self.op {
            Op::Param(p) => &params[p],
            _ => &self.value,
        }
    }
}

impl Ops for Tape<'_> {
    type V = usize;

    fn val<'s>(&'s self, v: &'s usize) -> &'s Matrix {
        self.nodes[*v].value_ref(self.params)
    }
    fn constant(&mut self, m: Matrix) -> usize {
        self.push(m, Op::Leaf, false)
    }
    fn param(&mut self, index: usize) -> usize {
        if let Some(n) = self.param_nodes[index] {
            return n;
        }
        let n = self.push(Matrix::default(), Op::Param(index), true);
        self.param_nodes[index] = Some(n);
        n
    }
    fn matmul(&mut self, a: &usize, b: &usize) -> usize {
        let m = self.val(a).matmul(self.val(b));
        self.binary(*a, *b, m, Op::MatMul(*a, *b))
    }
    fn add(&mut self, a: &usize, b: &usize) -> usize {
        let m = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.binary(*a, *b, m, Op::Add(*a, *b))
    }
    fn sub(&mut self, a: &usize, b: &usize) -> usize {
        let m = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.binary(*a, *b, m, Op::Sub(*a, *b))
    }
    fn mul(&mut self, a: &usize, b: &usize) -> usize {
        let m = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.binary(*a, *b, m, Op::Mul(*a, *b))
    }
    fn div(&mut self, a: &usize, b: &usize) -> usize {
        let m = self.val(a).zip_map(self.val(b), |x, y| x / y);
        self.binary(*a, *b, m, Op::Div(*a, *b))
    }
    fn add_row(&mut self, a: &usize, row: &usize) -> usize {
        let m = broadcast_row(self.val(a), self.val(row), |x, y| x + y);
        self.binary(*a, *row, m, Op::AddRow(*a, *row))
    }
    fn mul_row(&mut self, a: &usize, row: &usize) -> usize {
        let m = broadcast_row(self.val(a), self.val(row), |x, y| x * y);
        self.binary(*a, *row, m, Op::MulRow(*a, *row))
    }
    fn mul_col(&mut self, a: &usize, col: &usize) -> usize {
        let m = broadcast_col(self.val(a), self.val(col));
        self.binary(*a, *col, m, Op::MulCol(*a, *col))
    }
    fn scale(&mut self, a: &usize, c: f64) -> usize {
        let m = self.val(a).map(|x| x * c);
        self.unary(*a, m, Op::Scale(*a, c))
    }
    fn add_scalar(&mut self, a: &usize, c: f64) -> usize {
        let m = self.val(a).map(|x| x + c);
        self.unary(*a, m, Op::AddScalar(*a))
    }
    fn tanh(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(f64::tanh);
        self.unary(*a, m, Op::Tanh(*a))
    }
    fn sin(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(f64::sin);
        self.unary(*a, m, Op::Sin(*a))
    }
    fn cos(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(f64::cos);
        self.unary(*a, m, Op::Cos(*a))
    }
    fn square(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(|x| x * x);
        self.unary(*a, m, Op::Square(*a))
    }
    fn sqrt(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(f64::sqrt);
        self.unary(*a, m, Op::Sqrt(*a))
    }
    fn abs(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(f64::abs);
        self.unary(*a, m, Op::Abs(*a))
    }
    fn one_minus_square(&mut self, a: &usize) -> usize {
        let m = self.val(a).map(|x| 1.0 - x * x);
        self.unary(*a, m, Op::OneMinusSquare(*a))
    }
    fn sum_cols(&mut self, a: &usize) -> usize {
        let m = sum_cols(self.val(a));
        self.unary(*a, m, Op::SumCols(*a))
    }
    fn sum_all(&mut self, a: &usize) -> usize {
        let m = Matrix::scalar(self.val(a).sum());
        self.unary(*a, m, Op::SumAll(*a))
    }
    fn col_slice(&mut self, a: &usize, start: usize, len: usize) -> usize {
        let m = col_slice(self.val(a), start, len);
        self.unary(*a, m, Op::ColSlice(*a, start))
    }
    fn row_slice(&mut self, a: &usize, start: usize, len: usize) -> usize {
        let m = row_slice(self.val(a), start, len);
        self.unary(*a, m, Op::RowSlice(*a, start))
    }
    fn concat_cols(&mut self, parts: &[usize]) -> usize {
        let ms: Vec<&Matrix> = parts.iter().map(|p| self.val(p)).collect();
        let m = concat_cols(&ms);
        let ng = self.ng(parts);
        self.push(m, Op::ConcatCols(parts.to_vec()), ng)
    }
    fn gather_rows(&mut self, a: &usize, index: &[usize]) -> usize {
        let m = gather_rows(self.val(a), index);
        self.unary(*a, m, Op::GatherRows(*a, index.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, seed: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|i| ((i as f64 + 1.0) * seed).sin() * 0.8).collect())
    }

    /// Builds a scalar from every op and checks the input adjoint against
    /// central differences.
    fn check(build: impl Fn(&mut Tape, usize) -> usize, x0: Matrix, params: &[Matrix]) {
        let mut tape = Tape::new(params);
        let x = tape.input(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let gx = grads.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for k in 0..x0.data().len() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[k] += d;
                let mut t = Tape::new(params);
                let x = t.input(xp);
                let o = build(&mut t, x);
                t.val(&o).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = gx.data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {k}: fd {fd} vs {an}");
        }
        // Parameter adjoints by the same check.
        for (pi, p0) in params.iter().enumerate() {
            for k in 0..p0.data().len() {
                let eval = |d: f64| {
                    let mut ps = params.to_vec();
                    ps[pi].data_mut()[k] += d;
                    let mut t = Tape::new(&ps);
                    let x = t.input(x0.clone());
                    let o = build(&mut t, x);
                    t.val(&o).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.params[pi].data()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_algebra_ops() {
        let params = vec![m(3, 4, 0.3), m(1, 4, 0.7), m(1, 4, 1.1)];
        check(
            |t, x| {
                let w = t.param(0);
                let b = t.param(1);
                let r = t.param(2);
                let y = t.matmul(&x, &w);
                let y = t.add_row(&y, &b);
                let y = t.mul_row(&y, &r);
                let y = t.tanh(&y);
                let z = t.sum_cols(&y);
                let y = t.mul_col(&y, &z);
                let s = t.square(&y);
                t.sum_all(&s)
            },
            m(5, 3, 0.9),
            &params,
        );
    }

    #[test]
    fn elementwise_ops() {
        check(
            |t, x| {
                let a = t.sin(&x);
                let b = t.cos(&x);
                let c = t.mul(&a, &b);
                let d = t.sub(&c, &a);
                let e = t.add(&d, &b);
                let e2 = t.square(&e);
                let f = t.add_scalar(&e2, 0.5);
                let g = t.sqrt(&f);
                let h = t.div(&g, &f);
                let i = t.abs(&h);
                let j = t.one_minus_square(&i);
                let k = t.scale(&j, 1.7);
                t.sum_all(&k)
            },
            m(3, 2, 1.3),
            &[],
        );
    }

    #[test]
    fn structural_ops() {
        let params = vec![m(4, 2, 0.4)];
        check(
            |t, x| {
                let w = t.param(0);
                let a = t.col_slice(&x, 1, 2);
                let b = t.row_slice(&w, 1, 2);
                let c = t.matmul(&a, &b);
                let d = t.concat_cols(&[c, x]);
                let e = t.gather_rows(&d, &[2, 0, 2, 1]);
                let f = t.tanh(&e);
                t.sum_all(&f)
            },
            m(3, 4, 0.6),
            &params,
        );
    }

    #[test]
    fn eval_matches_tape_values() {
        let params = vec![m(3, 4, 0.3), m(1, 4, 0.7)];
        let x0 = m(5, 3, 0.9);
        let mut e = Eval::new(&params);
        let x = e.constant(x0.clone());
        let (w, b) = (e.param(0), e.param(1));
        let y = e.matmul(&x, &w);
        let y = e.add_row(&y, &b);
        let y = e.tanh(&y);
        let mut t = Tape::new(&params);
        let xt = t.input(x0);
        let (wt, bt) = (t.param(0), t.param(1));
        let yt = t.matmul(&xt, &wt);
        let yt = t.add_row(&yt, &bt);
        let yt = t.tanh(&yt);
        assert_eq!(e.val(&y), t.val(&yt));
    }

    #[test]
    fn constants_get_no_adjoint() {
        let params = vec![m(2, 2, 0.5)];
        let mut t = Tape::new(&params);
        let c = t.constant(m(3, 2, 0.2));
        let w = t.param(0);
        let y = t.matmul(&c, &w);
        let s = t.sum_all(&y);
        let g = t.backward(s);
        assert!(g.wrt(c).is_none());
        assert!(g.params[0].sq_norm() > 0.0);
    }
}
