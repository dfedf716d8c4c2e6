//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`] walks the
//! records in reverse and returns gradients for parameters and for inputs that were
//! registered with `requires_grad`.

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::resample::ResamplePlan;
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a batched `k x k` convolution patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { a: Var, row: Var },
    AddTiled { a: Var, b: Var },
    TileRows(Var),
    Relu(Var),
    Clamp { a: Var, lo: T, hi: T },
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Resample { a: Var, plan: Arc<ResamplePlan> },
    Im2Col { a: Var, geom: ConvGeom },
    NormalizeRowSum { a: Var, eps: T },
    L2NormalizeRows { a: Var, eps: T },
    GatherRows { table: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Arc<Vec<Option<u32>>>, probs: Mat<T>, count: usize },
    SumAll(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Mat<T>>>,
    inputs: Vec<(Var, Mat<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn input(&self, v: Var) -> Option<&Mat<T>> {
        self.inputs.iter().find(|(x, _)| *x == v).map(|(_, g)| g)
    }

    pub fn into_params(self) -> Vec<Option<Mat<T>>> {
        self.params
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan()) || matches!(op, Op::Leaf),
            "NaN produced by tape node {}",
            self.nodes.len()
        );
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul_ext(&mut self, a: Var, ta: bool, b: Var, tb: bool, alpha: T) -> Var {
        let value = Mat::matmul(self.value(a), ta, self.value(b), tb, alpha);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb, alpha }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, false, b, false, T::one())
    }

    /// `a * b^T * alpha`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: T) -> Var {
        self.matmul_ext(a, false, b, true, alpha)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, true, b, false, T::one())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = Mat::from_vec(
            self.shape(a).0,
            self.shape(a).1,
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = Mat::from_vec(
            self.shape(a).0,
            self.shape(a).1,
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} bias");
        let mut value = self.value(a).clone();
        let bias = self.value(row).row(0).to_vec();
        for i in 0..r {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x = *x + b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow { a, row }, ng)
    }

    /// `a + tile(b)` where `a` stacks `k` blocks shaped like `b` along rows.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert!(ca == cb && rb > 0 && ra % rb == 0, "add_tiled shape mismatch {ra}x{ca} vs {rb}x{cb}");
        let mut value = self.value(a).clone();
        let bv = self.value(b).data();
        for chunk in value.data_mut().chunks_mut(rb * cb) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddTiled { a, b }, ng)
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(self.value(a).data());
        }
        let ng = self.ng(a);
        self.push(Mat::from_vec(r * times, c, data), Op::TileRows(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let ng = self.ng(a);
        self.push(value, Op::Clamp { a, lo, hi }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols row mismatch");
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(a);
        let out = Mat::from_fn(r, len, |i, j| src.get(i, start + j));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == cols), "concat_rows col mismatch");
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push(Mat::from_vec(len, c, data), Op::SliceRows { a, start }, ng)
    }

    pub fn resample(&mut self, a: Var, plan: Arc<ResamplePlan>) -> Var {
        if plan.is_identity() {
            return a;
        }
        let value = plan.apply(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Resample { a, plan }, ng)
    }

    /// Patch extraction: rows `(b, oy, ox)`, columns `(ky, kx, c)`; zero padding.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.shape(a), (geom.batch * geom.h * geom.w, geom.c), "im2col geometry mismatch");
        let value = im2col_forward(self.value(a), geom);
        let ng = self.ng(a);
        self.push(value, Op::Im2Col { a, geom }, ng)
    }

    /// Divides each row by its sum (guarded below by `eps`).
    pub fn normalize_row_sum(&mut self, a: Var, eps: T) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let s: T = row.iter().copied().sum();
            let d = if s > eps { s } else { eps };
            for x in row {
                *x = *x / d;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRowSum { a, eps }, ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let d = if n > eps { n } else { eps };
            for x in row {
                *x = *x / d;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows { a, eps }, ng)
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        self.push(Mat::from_vec(idx.len(), c, data), Op::GatherRows { table, idx }, ng)
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are skipped.
    /// With no valid rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<Option<u32>>>) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r, "cross_entropy target count");
        let mut probs = self.value(logits).clone();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for i in 0..r {
            let row = probs.row_mut(i);
            softmax_in_place(row);
            if let Some(t) = targets[i] {
                let t = t as usize;
                assert!(t < c, "cross_entropy target {t} out of range for {c} classes");
                total -= row[t].as_f64().max(1e-300).ln();
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(Mat::from_f64(1, 1, &[loss]), Op::CrossEntropy { logits, targets, probs, count }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));
        let mut inputs = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    inputs.push((Var(i), g));
                }
                Op::Param => {
                    grads[i] = Some(g);
                }
                _ => self.backprop_node(i, g, &mut grads),
            }
        }
        let mut params = vec![None; self.params.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if v.0 <= loss.0 {
                    params[pid] = grads[v.0].take();
                }
            }
        }
        Gradients { params, inputs }
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.ng(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch at node {}", v.0);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul { a, b, ta, tb, alpha } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = alpha op(A) op(B)
                    let ga = match (ta, tb) {
                        (false, false) => Mat::matmul(&g, false, bv, true, *alpha),
                        (false, true) => Mat::matmul(&g, false, bv, false, *alpha),
                        (true, false) => Mat::matmul(bv, false, &g, true, *alpha),
                        (true, true) => Mat::matmul(bv, true, &g, true, *alpha),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = match (ta, tb) {
                        (false, false) => Mat::matmul(av, true, &g, false, *alpha),
                        (false, true) => Mat::matmul(&g, true, av, false, *alpha),
                        (true, false) => Mat::matmul(av, false, &g, false, *alpha),
                        (true, true) => Mat::matmul(&g, true, av, true, *alpha),
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddRow { a, row } => {
                if self.ng(*row) {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &x) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddTiled { a, b } => {
                if self.ng(*b) {
                    let (rb, cb) = self.shape(*b);
                    let mut gb = Mat::zeros(rb, cb);
                    for chunk in g.data().chunks(rb * cb) {
                        for (acc, &x) in gb.data_mut().iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::TileRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for chunk in g.data().chunks(r * c) {
                    for (acc, &x) in ga.data_mut().iter_mut().zip(chunk) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = elementwise(&g, &node.value, |gx, y| if y > T::zero() { gx } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp { a, lo, hi } => {
                let x = &self.nodes[a.0].value;
                let ga = elementwise(&g, x, |gx, v| if v >= *lo && v <= *hi { gx } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = ga.row(r).iter().zip(yr).map(|(&gx, &yx)| gx * yx).sum();
                    for (gx, &yx) in ga.row_mut(r).iter_mut().zip(yr) {
                        *gx = yx * (*gx - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, g.reshaped(r, c));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let gp = Mat::from_fn(r, c, |i, j| g.get(i, off + j));
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let gp = Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += r;
                }
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.shape(*a);
                let mut ga = Mat::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::Resample { a, plan } => {
                self.accumulate(grads, *a, plan.apply_adjoint(&g));
            }
            Op::Im2Col { a, geom } => {
                self.accumulate(grads, *a, col2im(&g, *geom));
            }
            Op::NormalizeRowSum { a, eps } => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = g;
                for r in 0..y.rows() {
                    let s: T = x.row(r).iter().copied().sum();
                    if s > *eps {
                        let dot: T = ga.row(r).iter().zip(y.row(r)).map(|(&gx, &yx)| gx * yx).sum();
                        for gx in ga.row_mut(r) {
                            *gx = (*gx - dot) / s;
                        }
                    } else {
                        for gx in ga.row_mut(r) {
                            *gx = *gx / *eps;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows { a, eps } => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = g;
                for r in 0..y.rows() {
                    let n = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n > *eps {
                        let dot: T = ga.row(r).iter().zip(y.row(r)).map(|(&gx, &yx)| gx * yx).sum();
                        for (gx, &yx) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gx = (*gx - yx * dot) / n;
                        }
                    } else {
                        for gx in ga.row_mut(r) {
                            *gx = *gx / *eps;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows { table, idx } => {
                let (r, c) = self.shape(*table);
                let mut gt = Mat::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, &x) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let mut gl = Mat::zeros(probs.rows(), probs.cols());
                if *count > 0 {
                    let scale = g.get(0, 0) / T::from_f64(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let dst = gl.row_mut(r);
                            dst.copy_from_slice(probs.row(r));
                            dst[*t as usize] = dst[*t as usize] - T::one();
                            for x in dst {
                                *x = *x * scale;
                            }
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Mat::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

fn elementwise<T: Real>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    Mat::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn im2col_forward<T: Real>(x: &Mat<T>, g: ConvGeom) -> Mat<T> {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k * g.c;
    let mut out = Mat::zeros(g.batch * ho * wo, kk);
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = out.row_mut((b * ho + oy) * wo + ox);
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = x.row((b * g.h + iy as usize) * g.w + ix as usize);
                        let off = (ky * g.k + kx) * g.c;
                        row[off..off + g.c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols: &Mat<T>, g: ConvGeom) -> Mat<T> {
    let (ho, wo) = g.out_hw();
    let mut out = Mat::zeros(g.batch * g.h * g.w, g.c);
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = cols.row((b * ho + oy) * wo + ox);
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = out.row_mut((b * g.h + iy as usize) * g.w + ix as usize);
                        let off = (ky * g.k + kx) * g.c;
                        for (d, &s) in dst.iter_mut().zip(&row[off..off + g.c]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    out
}
