//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; `backward`
//! sweeps the nodes in reverse. The tape is generic over the float type so
//! that the same forward code can run in `f32` for training and in `f64` for
//! finite-difference checks.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

use crate::matrix::Matrix;

pub trait Real: Float + AddAssign + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; also the index into [`Tape::backward`]'s result.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `A Bᵀ`.
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    /// Row softmax; `true` entries of the mask are excluded.
    Softmax(Var, Matrix<bool>),
    LogSoftmax(Var, Matrix<bool>),
    LayerNorm(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// One entry per row: `A[r, idx[r]]`.
    Pick(Var, Vec<usize>),
    /// `Σ A ⊙ W` for a constant `W`.
    Dot(Var, Matrix<f64>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zeros<T: Real>(rows: usize, cols: usize) -> Matrix<T> {
    Matrix::filled(rows, cols, T::zero())
}

fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.rows(), "matmul shape");
    let mut out = zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let orow = out.row_mut(i);
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matmul_t<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_t shape");
    let mut out = zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// `Aᵀ B`.
fn t_matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows(), b.rows(), "t_matmul shape");
    let mut out = zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let br = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn map<T: Real>(a: &Matrix<T>, f: impl Fn(T) -> T) -> Matrix<T> {
    Matrix::from_vec(a.rows(), a.cols(), a.as_slice().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(g) => {
            for (x, d) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *x += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn mask_row(mask: &Matrix<bool>, r: usize) -> &[bool] {
    mask.row(if mask.rows() == 1 { 0 } else { r })
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()), "add shape");
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p + q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows(), y.cols()), (1, x.cols()), "add_row shape");
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(y.row(0)) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((y.rows(), y.cols()), (1, x.cols()), "mul_row shape");
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(y.row(0)) {
                *o = *o * bv;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let f = T::of(s);
        let v = map(self.value(a), |x| x * f);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), Float::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise softmax. `mask` has one row shared by all rows or one row per
    /// row; masked entries get probability zero. Every row needs at least one
    /// unmasked entry.
    pub fn softmax(&mut self, a: Var, mask: Matrix<bool>) -> Var {
        let v = self.log_softmax_values(a, &mask);
        let v = map(&v, |x| if x == T::neg_infinity() { T::zero() } else { x.exp() });
        self.push(v, Op::Softmax(a, mask))
    }

    /// Row-wise log-softmax; masked entries are `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Matrix<bool>) -> Var {
        let v = self.log_softmax_values(a, &mask);
        self.push(v, Op::LogSoftmax(a, mask))
    }

    fn log_softmax_values(&self, a: Var, mask: &Matrix<bool>) -> Matrix<T> {
        let x = self.value(a);
        assert_eq!(mask.cols(), x.cols(), "mask shape");
        assert!(mask.rows() == 1 || mask.rows() == x.rows(), "mask rows");
        let mut out = zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let m = mask_row(mask, r);
            let row = x.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &masked)| !masked)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            assert!(max > T::neg_infinity(), "softmax row {r} is fully masked");
            let sum = row
                .iter()
                .zip(m)
                .filter(|(_, &masked)| !masked)
                .fold(T::zero(), |acc, (&v, _)| acc + (v - max).exp());
            let log_z = max + sum.ln();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = if m[c] { T::neg_infinity() } else { row[c] - log_z };
            }
        }
        out
    }

    /// Per-row normalization to zero mean and unit variance, without gain or
    /// bias.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::of(x.cols() as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            for o in row.iter_mut() {
                *o = (*o - mean) * inv;
            }
        }
        self.push(v, Op::LayerNorm(a))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &xv) in v.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += xv;
            }
        }
        let n = T::of(x.rows() as f64);
        let v = map(&v, |s| s / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat rows");
                v.row_mut(r)[c0..c0 + src.cols()].copy_from_slice(src.row(r));
                c0 += src.cols();
            }
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let mut v = zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut v = zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Column vector with `a[r, idx[r]]` in row `r`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows(), "pick rows");
        let data = idx.iter().enumerate().map(|(r, &c)| x[(r, c)]).collect();
        let v = Matrix::from_vec(idx.len(), 1, data).expect("column");
        self.push(v, Op::Pick(a, idx))
    }

    /// Scalar `Σ a ⊙ w`.
    pub fn dot(&mut self, a: Var, w: Matrix<f64>) -> Var {
        let x = self.value(a);
        assert_eq!((x.rows(), x.cols()), (w.rows(), w.cols()), "dot shape");
        let s = x
            .as_slice()
            .iter()
            .zip(w.as_slice())
            .fold(T::zero(), |acc, (&p, &q)| acc + p * T::of(q));
        self.push(Matrix::filled(1, 1, s), Op::Dot(a, w))
    }

    /// Gradients of the scalar `root` with respect to every node; `None`
    /// where the root does not depend on the node.
    pub fn backward(&self, root: Var) -> Vec<Option<Matrix<T>>> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        let rv = self.value(root);
        assert_eq!((rv.rows(), rv.cols()), (1, 1), "backward needs a scalar root");
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_t(&g, self.value(*b));
                    let db = t_matmul(self.value(*a), &g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&g, self.value(*b));
                    let db = t_matmul(&g, self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut db = zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::MulRow(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut da = g.clone();
                    let mut db = zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da[(r, c)] = g[(r, c)] * y[(0, c)];
                            db[(0, c)] += g[(r, c)] * x[(r, c)];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, s) => {
                    let f = T::of(*s);
                    accumulate(&mut grads[a.0], map(&g, |v| v * f));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(x.as_slice())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), data).unwrap());
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), data).unwrap());
                }
                Op::Softmax(a, mask) => {
                    let y = &node.value;
                    let mut da = zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let m = mask_row(mask, r);
                        let inner = (0..g.cols())
                            .filter(|&c| !m[c])
                            .fold(T::zero(), |acc, c| acc + y[(r, c)] * g[(r, c)]);
                        for c in (0..g.cols()).filter(|&c| !m[c]) {
                            da[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LogSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut da = zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let m = mask_row(mask, r);
                        let total = (0..g.cols())
                            .filter(|&c| !m[c])
                            .fold(T::zero(), |acc, c| acc + g[(r, c)]);
                        for c in (0..g.cols()).filter(|&c| !m[c]) {
                            da[(r, c)] = g[(r, c)] - y[(r, c)].exp() * total;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = T::of(x.cols() as f64);
                    let eps = T::of(LAYER_NORM_EPS);
                    let mut da = zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let xr = x.row(r);
                        let mean = xr.iter().fold(T::zero(), |a, &b| a + b) / n;
                        let var = xr.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
                        let inv = T::one() / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().fold(T::zero(), |a, &b| a + b) / n;
                        let mean_gy = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
                        for c in 0..g.cols() {
                            da[(r, c)] = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let n = T::of(rows as f64);
                    let mut da = zeros(rows, g.cols());
                    for r in 0..rows {
                        for (o, &gv) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = gv / n;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut dp = zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                        c0 += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut da = zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut da = zeros(x.rows(), x.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &gv) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Pick(a, idx) => {
                    let x = self.value(*a);
                    let mut da = zeros(x.rows(), x.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        da[(r, c)] = g[(r, 0)];
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Dot(a, w) => {
                    let s = g[(0, 0)];
                    accumulate(&mut grads[a.0], map_f64(w, |v| s * T::of(v)));
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}

fn map_f64<T: Real>(w: &Matrix<f64>, f: impl Fn(f64) -> T) -> Matrix<T> {
    Matrix::from_vec(w.rows(), w.cols(), w.as_slice().iter().map(|&v| f(v)).collect()).expect("same shape")
}
