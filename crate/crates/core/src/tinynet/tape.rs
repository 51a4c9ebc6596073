//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation records its inputs on a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the tape in reverse and accumulates the
//! adjoint of every node; the tape itself is never mutated by a backward
//! pass, so repeated passes give identical gradients.

use std::cell::{Ref, RefCell};

use super::tensor::{softmax_in_place, Matrix, Scalar};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Mse(Var, Matrix<T>),
    NegLogAt {
        probs: Var,
        class: usize,
        eps: T,
    },
    WeightedSum(Var, Matrix<T>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Adjoints of every node reachable from the differentiated output.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zero-shape `None` if `v` does not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(&self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(&self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        {
            let r = self.value(row);
            assert_eq!((1, v.cols()), r.shape(), "add_row shape");
            for i in 0..v.rows() {
                for (x, &b) in v.row_mut(i).iter_mut().zip(r.data()) {
                    *x = *x + b;
                }
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// `x · w + b` with `b` a `1 x n` row.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
        let c = T::from_f64_lossy(GELU_COEF);
        let half = T::from_f64_lossy(0.5);
        let v = self.value(a).map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let s = T::one() / (var + eps).sqrt();
                rstd.push(s);
                for c in 0..cols {
                    let h = (row[c] - mean) * s;
                    xhat.set(r, c, h);
                    out.set(r, c, h * g.get(0, c) + b.get(0, c));
                }
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a).clone();
        let mut v = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows cols");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of the result is row `indices[i]` of `a`; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a).clone();
        let mut v = Matrix::zeros(indices.len(), src.cols());
        for (i, &k) in indices.iter().enumerate() {
            v.row_mut(i).copy_from_slice(src.row(k));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let src = self.value(a).clone();
        let n = T::from_usize(src.rows()).unwrap();
        let mut v = Matrix::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, &x) in v.row_mut(0).iter_mut().zip(src.row(r)) {
                *o = *o + x;
            }
        }
        let v = v.map(|x| x / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Mean squared error against a constant target, as a `1 x 1` node.
    pub fn mse(&self, pred: Var, target: Matrix<T>) -> Var {
        let loss = {
            let p = self.value(pred);
            assert_eq!(p.shape(), target.shape(), "mse shape");
            let n = T::from_usize(p.len()).unwrap();
            p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n
        };
        self.push(Matrix::filled(1, 1, loss), Op::Mse(pred, target))
    }

    /// `-ln(max(p[class], eps))` for a `1 x C` probability row.
    pub fn neg_log_at(&self, probs: Var, class: usize, eps: T) -> Var {
        let p = self.value(probs).get(0, class);
        let loss = -(p.max(eps)).ln();
        self.push(Matrix::filled(1, 1, loss), Op::NegLogAt { probs, class, eps })
    }

    /// `Σ w ⊙ a` for a constant weight matrix.
    pub fn weighted_sum(&self, a: Var, weights: Matrix<T>) -> Var {
        let s = {
            let m = self.value(a);
            assert_eq!(m.shape(), weights.shape(), "weighted_sum shape");
            m.data().iter().zip(weights.data()).map(|(&x, &w)| x * w).sum::<T>()
        };
        self.push(Matrix::filled(1, 1, s), Op::WeightedSum(a, weights))
    }

    /// Adjoints of every node with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, dy.matmul_t(val(*b)));
                    acc(&mut grads, *b, val(*a).t_matmul(&dy));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, dy.matmul(val(*b)));
                    acc(&mut grads, *b, dy.t_matmul(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::AddRow(a, row) => {
                    let mut g = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &x) in g.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o = *o + x;
                        }
                    }
                    acc(&mut grads, *row, g);
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.map(|x| x * *s)),
                Op::Gelu(a) => {
                    let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
                    let c = T::from_f64_lossy(GELU_COEF);
                    let half = T::from_f64_lossy(0.5);
                    let three = T::from_f64_lossy(3.0);
                    let x = val(*a);
                    let mut g = Matrix::zeros(x.rows(), x.cols());
                    for (j, (o, &xv)) in g.data_mut().iter_mut().zip(x.data()).enumerate() {
                        let t = (k * (xv + c * xv * xv * xv)).tanh();
                        let d = half * (T::one() + t)
                            + half * xv * (T::one() - t * t) * k * (T::one() + three * c * xv * xv);
                        *o = dy.data()[j] * d;
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let n = T::from_usize(cols).unwrap();
                    let g = val(*gamma);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let d = dy.get(r, c);
                            let h = xhat.get(r, c);
                            dgamma.set(0, c, dgamma.get(0, c) + d * h);
                            dbeta.set(0, c, dbeta.get(0, c) + d);
                            let dh = d * g.get(0, c);
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * h;
                        }
                        for c in 0..cols {
                            let dh = dy.get(r, c) * g.get(0, c);
                            let h = xhat.get(r, c);
                            dx.set(r, c, rstd[r] / n * (n * dh - sum_d - h * sum_dh));
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: T = y.row(r).iter().zip(dy.row(r)).map(|(&p, &d)| p * d).sum();
                        for c in 0..y.cols() {
                            g.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = val(*a).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = val(p).shape();
                        let mut g = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = val(p).shape();
                        let g = Matrix::from_vec(rows, cols, dy.data()[off * cols..(off + rows) * cols].to_vec());
                        off += rows;
                        acc(&mut grads, p, g);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (rows, cols) = val(*a).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for (i, &k) in indices.iter().enumerate() {
                        for (o, &d) in g.row_mut(k).iter_mut().zip(dy.row(i)) {
                            *o = *o + d;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = val(*a).shape();
                    let n = T::from_usize(rows).unwrap();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, &d) in g.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *o = d / n;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mse(pred, target) => {
                    let p = val(*pred);
                    let n = T::from_usize(p.len()).unwrap();
                    let two = T::from_f64_lossy(2.0);
                    let d = dy.get(0, 0);
                    let g = Matrix::from_vec(
                        p.rows(),
                        p.cols(),
                        p.data().iter().zip(target.data()).map(|(&a, &b)| two * (a - b) / n * d).collect(),
                    );
                    acc(&mut grads, *pred, g);
                }
                Op::NegLogAt { probs, class, eps } => {
                    let p = val(*probs);
                    let mut g = Matrix::zeros(p.rows(), p.cols());
                    let pc = p.get(0, *class);
                    if pc > *eps {
                        g.set(0, *class, -dy.get(0, 0) / pc);
                    }
                    acc(&mut grads, *probs, g);
                }
                Op::WeightedSum(a, w) => {
                    let d = dy.get(0, 0);
                    acc(&mut grads, *a, w.map(|x| x * d));
                }
            }
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }
}
