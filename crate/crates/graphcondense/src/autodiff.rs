//! Dense matrices, a reverse-mode tape and a finite-difference checker.
//!
//! The condensation objective mixes ordinary network layers with two custom
//! differentiable pieces: the symmetric upper-triangle assembly of the
//! synthetic adjacency and the second-largest-eigenvalue surrogate behind the
//! spectral loss. Everything is recorded on a [`Tape`] and differentiated in
//! one reverse pass; tapes are rebuilt every epoch so saved values never
//! outlive the step that produced them.
//!
//! Values are f64 throughout. Reductions accumulate in f64 as well, which is
//! what lets the checker hold reverse-mode gradients to 1e-4 of central
//! differences at step 1e-5.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

/// Dense row-major matrix. Scalars are (1, 1), column vectors (n, 1),
/// row vectors (1, n).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in [-scale, scale).
    pub fn rand_uniform(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn rand_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "tensor is not a scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Plain (non-tape) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out, 1.0, 0.0);
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, c: &mut Tensor, alpha: f64, beta: f64) {
    use ndarray::{ArrayView2, ArrayViewMut2};
    let av = ArrayView2::from_shape((a.rows, a.cols), &a.data).unwrap();
    let bv = ArrayView2::from_shape((b.rows, b.cols), &b.data).unwrap();
    let cv = ArrayViewMut2::from_shape((c.rows, c.cols), &mut c.data).unwrap();
    ndarray::linalg::general_mat_mul(alpha, &av, &bv, beta, &mut { cv });
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Artanh(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    PowConst(Var, f64),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    RowNorm(Var),
    RowClampNorm(Var, f64),
    MulRowVec(Var, Var),
    MulColVec(Var, Var),
    AddRowVec(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    HCat(Var, Var),
    RowSoftmax(Var),
    CrossEntropyLogits(Var, Rc<Vec<usize>>),
    SymmetrizeUpper(Var),
    Lambda2Sym(Var, Vec<f64>),
    SpmmSym(Var, Rc<CsrMatrix>),
    Opaque(Var, &'static str),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros if the variable never
    /// influenced the loss.
    pub fn get(&self, var: Var, tape: &Tape) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(var);
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }
}

/// Records primitive operations for one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// atanh with the argument clamped to (-1, 1).
    pub fn artanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.clamp(-ARTANH_BOUND, ARTANH_BOUND).atanh());
        let ng = self.needs(a);
        self.push(v, Op::Artanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Elementwise x^p. Non-positive inputs map to 0 (and get zero gradient);
    /// intended for strictly positive arguments such as degrees + eps.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x.powf(p) } else { 0.0 });
        let ng = self.needs(a);
        self.push(v, Op::PowConst(a, p), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            out.data[i] = t.row_slice(i).iter().sum();
        }
        let ng = self.needs(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                out.data[j] += t.get(i, j);
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::ColSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Euclidean norm of every row, shape (m, 1).
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), 1);
        for i in 0..t.rows() {
            out.data[i] = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let ng = self.needs(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Rescale any row whose norm exceeds `max_norm` back onto that radius.
    pub fn row_clamp_norm(&mut self, a: Var, max_norm: f64) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let norm = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                for j in 0..t.cols() {
                    out.data[i * t.cols() + j] *= s;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowClampNorm(a, max_norm), ng)
    }

    /// (m, k) * (1, k): broadcast a row vector across all rows.
    pub fn mul_row_vec(&mut self, a: Var, r: Var) -> Var {
        let (t, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.rows(), 1);
        assert_eq!(t.cols(), rv.cols());
        let mut out = t.clone();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                out.data[i * t.cols() + j] *= rv.data[j];
            }
        }
        let ng = self.needs(a) || self.needs(r);
        self.push(out, Op::MulRowVec(a, r), ng)
    }

    /// (m, k) * (m, 1): broadcast a column vector across all columns.
    pub fn mul_col_vec(&mut self, a: Var, c: Var) -> Var {
        let (t, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.cols(), 1);
        assert_eq!(t.rows(), cv.rows());
        let mut out = t.clone();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                out.data[i * t.cols() + j] *= cv.data[i];
            }
        }
        let ng = self.needs(a) || self.needs(c);
        self.push(out, Op::MulColVec(a, c), ng)
    }

    /// (m, k) + (1, k).
    pub fn add_row_vec(&mut self, a: Var, r: Var) -> Var {
        let (t, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.rows(), 1);
        assert_eq!(t.cols(), rv.cols());
        let mut out = t.clone();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                out.data[i * t.cols() + j] += rv.data[j];
            }
        }
        let ng = self.needs(a) || self.needs(r);
        self.push(out, Op::AddRowVec(a, r), ng)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (k, &i) in indices.iter().enumerate() {
            out.data[k * t.cols()..(k + 1) * t.cols()].copy_from_slice(t.row_slice(i));
        }
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, Rc::new(indices)), ng)
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows());
        let cols = ta.cols() + tb.cols();
        let mut out = Tensor::zeros(ta.rows(), cols);
        for i in 0..ta.rows() {
            out.data[i * cols..i * cols + ta.cols()].copy_from_slice(ta.row_slice(i));
            out.data[i * cols + ta.cols()..(i + 1) * cols].copy_from_slice(tb.row_slice(i));
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::HCat(a, b), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let row = &mut out.data[i * t.cols()..(i + 1) * t.cols()];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    /// Mean softmax cross-entropy of (m, C) logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), labels.len());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        let ng = self.needs(logits);
        self.push(v, Op::CrossEntropyLogits(logits, Rc::new(labels)), ng)
    }

    /// Assemble an (n, n) symmetric zero-diagonal matrix from its strict
    /// upper triangle flattened lexicographically as an (n(n-1)/2, 1) vector.
    /// Both mirrored entries hold the same f64 bit pattern.
    pub fn symmetrize_upper(&mut self, upper: Var, n: usize) -> Var {
        let t = self.value(upper);
        assert_eq!(t.len(), n * (n - 1) / 2, "upper-triangle length mismatch");
        let mut out = Tensor::zeros(n, n);
        let mut p = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                out.data[i * n + j] = t.data[p];
                out.data[j * n + i] = t.data[p];
                p += 1;
            }
        }
        let ng = self.needs(upper);
        self.push(out, Op::SymmetrizeUpper(upper), ng)
    }

    /// Second-largest eigenvalue of a symmetric matrix as a scalar node.
    /// Backward uses the analytic rule d(lambda_2)/dM = u2 u2^T for simple
    /// eigenvalues; when lambda_2 is degenerate the same expression is kept
    /// as a finite sub-gradient.
    pub fn lambda2_sym(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        let n = t.rows();
        if n < 2 || t.cols() != n {
            return Err(Error::Numerical(format!(
                "second-largest eigenvalue needs a square matrix of size >= 2, got ({}, {})",
                t.rows(),
                t.cols()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Numerical(
                "eigenvalue input contains non-finite entries".into(),
            ));
        }
        let (vals, vecs) = linalg::sym_eig_ascending(n, t.data());
        let lambda2 = vals[n - 2];
        let u2 = vecs[n - 2].clone();
        let ng = self.needs(m);
        Ok(self.push(Tensor::scalar(lambda2), Op::Lambda2Sym(m, u2), ng))
    }

    /// Product of a fixed symmetric sparse matrix with a dense variable.
    pub fn spmm_sym(&mut self, mat: Rc<CsrMatrix>, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(mat.n(), t.rows(), "sparse matmul shape mismatch");
        let out = Tensor::from_vec(t.rows(), t.cols(), mat.mul_dense(t.data(), t.cols()));
        let ng = self.needs(x);
        self.push(out, Op::SpmmSym(x, mat), ng)
    }

    /// A value derived from `parent` with no backward rule. Reverse passes
    /// that reach it fail with an unsupported-op error.
    pub fn opaque_unary(&mut self, parent: Var, value: Tensor, name: &'static str) -> Var {
        let ng = self.needs(parent);
        self.push(value, Op::Opaque(parent, name), ng)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        assert_eq!(t.len(), 1, "backward needs a scalar loss");
        if !t.as_scalar().is_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate_parents(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip(tb, |gg, y| gg * y));
                self.accumulate(grads, *b, g.zip(ta, |gg, x| gg * x));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip(tb, |gg, y| gg / y));
                let mut db = g.zip(ta, |gg, x| gg * x);
                db = db.zip(tb, |t, y| -t / (y * y));
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| c * x));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = g . B^T
                    let bt = tb.transpose();
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    matmul_into(g, &bt, &mut da, 1.0, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let at = ta.transpose();
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    matmul_into(&at, g, &mut db, 1.0, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sigmoid(a) => {
                let s = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip(s, |gg, y| gg * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip(y, |gg, t| gg * (1.0 - t * t)));
            }
            Op::Artanh(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip(x, |gg, v| {
                        let v = v.clamp(-ARTANH_BOUND, ARTANH_BOUND);
                        gg / (1.0 - v * v)
                    }),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gg, v| if v > 0.0 { gg } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gg, v| gg * sigmoid(v)));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gg, v| gg * v.signum() * ((v != 0.0) as i32 as f64)));
            }
            Op::PowConst(a, p) => {
                let (x, p) = (self.value(*a), *p);
                self.accumulate(
                    grads,
                    *a,
                    g.zip(x, |gg, v| if v > 0.0 { gg * p * v.powf(p - 1.0) } else { 0.0 }),
                );
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    for j in 0..t.cols() {
                        da.data[i * t.cols() + j] = g.data[i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::ColSum(a) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    da.data[i * t.cols()..(i + 1) * t.cols()].copy_from_slice(&g.data);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                let gv = g.as_scalar();
                self.accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), gv));
            }
            Op::RowNorm(a) => {
                let t = self.value(*a);
                let norms = &self.nodes[id].value;
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    let n = norms.data[i];
                    if n > 1e-30 {
                        let gi = g.data[i] / n;
                        for j in 0..t.cols() {
                            da.data[i * t.cols() + j] = gi * t.get(i, j);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowClampNorm(a, max_norm) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for i in 0..t.rows() {
                    let row = t.row_slice(i);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let grow = &g.data[i * t.cols()..(i + 1) * t.cols()];
                    let dst = &mut da.data[i * t.cols()..(i + 1) * t.cols()];
                    if norm <= *max_norm {
                        dst.copy_from_slice(grow);
                    } else {
                        // d(max * x / |x|) = (max/|x|) (I - xhat xhat^T)
                        let s = max_norm / norm;
                        let dot: f64 = grow
                            .iter()
                            .zip(row)
                            .map(|(gg, x)| gg * x / norm)
                            .sum();
                        for j in 0..t.cols() {
                            dst[j] = s * (grow[j] - dot * row[j] / norm);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::MulRowVec(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for i in 0..ta.rows() {
                        for j in 0..ta.cols() {
                            da.data[i * ta.cols() + j] *= tr.data[j];
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*r) {
                    let mut dr = Tensor::zeros(1, tr.cols());
                    for i in 0..ta.rows() {
                        for j in 0..ta.cols() {
                            dr.data[j] += g.data[i * ta.cols() + j] * ta.get(i, j);
                        }
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::MulColVec(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for i in 0..ta.rows() {
                        for j in 0..ta.cols() {
                            da.data[i * ta.cols() + j] *= tc.data[i];
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*c) {
                    let mut dc = Tensor::zeros(ta.rows(), 1);
                    for i in 0..ta.rows() {
                        for j in 0..ta.cols() {
                            dc.data[i] += g.data[i * ta.cols() + j] * ta.get(i, j);
                        }
                    }
                    self.accumulate(grads, *c, dc);
                }
            }
            Op::AddRowVec(a, r) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*r) {
                    let t = self.value(*a);
                    let mut dr = Tensor::zeros(1, t.cols());
                    for i in 0..t.rows() {
                        for j in 0..t.cols() {
                            dr.data[j] += g.data[i * t.cols() + j];
                        }
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::GatherRows(a, indices) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..t.cols() {
                        da.data[i * t.cols() + j] += g.data[k * t.cols() + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::HCat(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols() + tb.cols();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    for i in 0..ta.rows() {
                        da.data[i * ta.cols()..(i + 1) * ta.cols()]
                            .copy_from_slice(&g.data[i * cols..i * cols + ta.cols()]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..tb.rows() {
                        db.data[i * tb.cols()..(i + 1) * tb.cols()]
                            .copy_from_slice(&g.data[i * cols + ta.cols()..(i + 1) * cols]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowSoftmax(a) => {
                let s = &self.nodes[id].value;
                let mut da = Tensor::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let srow = s.row_slice(i);
                    let grow = &g.data[i * s.cols()..(i + 1) * s.cols()];
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for j in 0..s.cols() {
                        da.data[i * s.cols() + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropyLogits(a, labels) => {
                let t = self.value(*a);
                let gv = g.as_scalar() / labels.len() as f64;
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let row = t.row_slice(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..t.cols() {
                        let p = (row[j] - max).exp() / z;
                        da.data[i * t.cols() + j] =
                            gv * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SymmetrizeUpper(a) => {
                let n = self.nodes[id].value.rows();
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                let mut p = 0usize;
                for i in 0..n {
                    for j in (i + 1)..n {
                        da.data[p] = g.data[i * n + j] + g.data[j * n + i];
                        p += 1;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Lambda2Sym(a, u2) => {
                let gv = g.as_scalar();
                let n = u2.len();
                let mut da = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        da.data[i * n + j] = gv * u2[i] * u2[j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SpmmSym(x, mat) => {
                let t = self.value(*x);
                let dx = Tensor::from_vec(t.rows(), t.cols(), mat.mul_dense(g.data(), t.cols()));
                self.accumulate(grads, *x, dx);
            }
            Op::Opaque(a, name) => {
                if self.needs(*a) {
                    return Err(Error::Numerical(format!(
                        "gradient requested through unsupported primitive '{name}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

const ARTANH_BOUND: f64 = 1.0 - 1e-15;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compare `analytic` (the reverse-mode gradient of f at theta) against
/// central finite differences of `f`, coordinate by coordinate.
pub fn check_gradients(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    theta: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    assert_eq!(
        (analytic.rows(), analytic.cols()),
        (theta.rows(), theta.cols()),
        "gradient and parameter shapes differ"
    );
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
    };
    let mut probe = theta.clone();
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite evaluation while probing coordinate {k}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.max_rel_err {
            worst.max_rel_err = rel;
            worst.worst_coord = k;
            worst.analytic_at_worst = a;
            worst.numeric_at_worst = numeric;
        }
    }
    Ok(worst)
}
