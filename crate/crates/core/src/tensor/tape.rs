//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward evaluation. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates gradients
//! for every leaf created with `requires_grad`. A tape is built per
//! optimisation iteration and then dropped.

use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

use super::Real;
use crate::error::{Result, SlamError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation whose backward pass is written by hand.
pub trait CustomOp<T: Real> {
    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries whose `wants` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[ArrayView2<'_, T>],
        output: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        wants: &[bool],
    ) -> Vec<Option<Array2<T>>>;
}

enum Op<'a, T: Real> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sqrt(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowNorm(Var),
    RowNormalize(Var),
    Sum(Var),
    Mean(Var),
    DotConst(Var, Array2<T>),
    Custom(Vec<Var>, Box<dyn CustomOp<T> + 'a>),
}

struct Node<'a, T: Real> {
    value: CowArray<'a, T, Ix2>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Record of one forward evaluation.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    leaf_grads: Vec<Option<Array2<T>>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> SlamError {
    SlamError::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: CowArray<'a, T, Ix2>, op: Op<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: impl Into<CowArray<'a, T, Ix2>>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&mut self, value: impl Into<CowArray<'a, T, Ix2>>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary_same(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let v = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v.into(), Op::Add(a, b), rg))
    }

    /// `x + row` with `row` (1 x n) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.0 != 1 || sr.1 != sx.1 {
            return Err(shape_err("add_row", &[sx.0, sx.1], &[sr.0, sr.1]));
        }
        let v = &self.value(x) + &self.value(row);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v.into(), Op::AddRow(x, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let v = &self.value(a) - &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v.into(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let v = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v.into(), Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b)?;
        let v = &self.value(a) / &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v.into(), Op::Div(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).mapv(|e| scale * e + shift);
        let rg = self.rg(x);
        self.push(v.into(), Op::Affine(x, scale), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let v = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v.into(), Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w` (in x out) and `b` (1 x out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 || sb != (1, sw.1) {
            return Err(shape_err("linear", &[sx.0, sx.1, sw.0, sw.1], &[sb.0, sb.1]));
        }
        let mut v = self.value(x).dot(&self.value(w));
        v += &self.value(b);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(v.into(), Op::Linear(x, w, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(T::zero()));
        let rg = self.rg(x);
        self.push(v.into(), Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(v.into(), Op::Sigmoid(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::sin);
        let rg = self.rg(x);
        self.push(v.into(), Op::Sin(x), rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::cos);
        let rg = self.rg(x);
        self.push(v.into(), Op::Cos(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * e);
        let rg = self.rg(x);
        self.push(v.into(), Op::Square(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::sqrt);
        let rg = self.rg(x);
        self.push(v.into(), Op::Sqrt(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.shape(*p).0,
            None => return Err(SlamError::contract("concat_cols of nothing")),
        };
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(SlamError::contract("concat_cols: row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(v.into(), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.shape(x).1;
        if start >= end || end > cols {
            return Err(SlamError::contract(format!(
                "slice_cols {start}..{end} out of {cols} columns"
            )));
        }
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(v.into(), Op::SliceCols(x, start), rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(bad) = rows.iter().find(|r| **r >= n) {
            return Err(SlamError::contract(format!("gather_rows: row {bad} of {n}")));
        }
        let v = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        Ok(self.push(v.into(), Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Euclidean norm of every row, as an (n x 1) column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(v.into(), Op::RowNorm(x), rg)
    }

    /// Scales every non-zero row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).to_owned();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|e| e / n);
            }
        }
        let rg = self.rg(x);
        self.push(v.into(), Op::RowNormalize(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v.into(), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(SlamError::contract("mean of an empty array"));
        }
        let v = Array2::from_elem((1, 1), self.value(x).sum() / T::of(n as f64));
        let rg = self.rg(x);
        Ok(self.push(v.into(), Op::Mean(x), rg))
    }

    /// `sum(c ∘ x)` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Array2<T>) -> Result<Var> {
        let sx = self.shape(x);
        if sx != c.dim() {
            return Err(shape_err("dot_const", &[sx.0, sx.1], &[c.nrows(), c.ncols()]));
        }
        let v = Array2::from_elem((1, 1), (&self.value(x) * &c).sum());
        let rg = self.rg(x);
        Ok(self.push(v.into(), Op::DotConst(x, c), rg))
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array2<T>,
        op: Box<dyn CustomOp<T> + 'a>,
    ) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(value.into(), Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Accumulates d(loss)/d(leaf) into every reachable leaf created with
    /// [`Tape::leaf`]. Calling it again without [`Tape::zero_grad`] adds to
    /// the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(SlamError::contract(format!(
                "backward needs a scalar loss, got a {r}x{c} value"
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, ig) in self.input_grads(i, g.view()) {
                match &mut grads[input.0] {
                    Some(acc) => *acc += &ig,
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: ArrayView2<'_, T>) -> Vec<(Var, Array2<T>)> {
        let node = &self.nodes[i];
        let out = node.value.view();
        let mut res = Vec::with_capacity(2);
        let want = |v: Var| self.rg(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        res.push((v, g.to_owned()));
                    }
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    res.push((*x, g.to_owned()));
                }
                if want(*row) {
                    res.push((*row, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    res.push((*a, g.to_owned()));
                }
                if want(*b) {
                    res.push((*b, g.mapv(|e| -e)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    res.push((*a, &g * &self.value(*b)));
                }
                if want(*b) {
                    res.push((*b, &g * &self.value(*a)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if want(*a) {
                    res.push((*a, &g / &bv));
                }
                if want(*b) {
                    let mut gb = Array2::zeros(bv.dim());
                    Zip::from(&mut gb)
                        .and(&g)
                        .and(&out)
                        .and(&bv)
                        .for_each(|d, &g, &o, &b| *d = -g * o / b);
                    res.push((*b, gb));
                }
            }
            Op::Affine(x, scale) => res.push((*x, g.mapv(|e| e * *scale))),
            Op::MatMul(a, b) => {
                if want(*a) {
                    res.push((*a, g.dot(&self.value(*b).t())));
                }
                if want(*b) {
                    res.push((*b, self.value(*a).t().dot(&g)));
                }
            }
            Op::Linear(x, w, b) => {
                if want(*x) {
                    res.push((*x, g.dot(&self.value(*w).t())));
                }
                if want(*w) {
                    res.push((*w, self.value(*x).t().dot(&g)));
                }
                if want(*b) {
                    res.push((*b, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
            }
            Op::Relu(x) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(&out)
                    .for_each(|d, &o| {
                        if o <= T::zero() {
                            *d = T::zero()
                        }
                    });
                res.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(&out)
                    .for_each(|d, &o| *d = *d * o * (T::one() - o));
                res.push((*x, d));
            }
            Op::Sin(x) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(&self.value(*x))
                    .for_each(|d, &xv| *d = *d * xv.cos());
                res.push((*x, d));
            }
            Op::Cos(x) => {
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(&self.value(*x))
                    .for_each(|d, &xv| *d = -*d * xv.sin());
                res.push((*x, d));
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let mut d = g.to_owned();
                Zip::from(&mut d)
                    .and(&self.value(*x))
                    .for_each(|d, &xv| *d = *d * two * xv);
                res.push((*x, d));
            }
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                let mut d = g.to_owned();
                Zip::from(&mut d).and(&out).for_each(|d, &o| {
                    *d = if o > T::zero() { *d * half / o } else { T::zero() }
                });
                res.push((*x, d));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if want(*p) {
                        res.push((*p, g.slice(s![.., start..start + w]).to_owned()));
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(self.shape(*x));
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(&g);
                res.push((*x, d));
            }
            Op::GatherRows(x, rows) => {
                let mut d = Array2::zeros(self.shape(*x));
                for (k, r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(*r);
                    dst += &g.row(k);
                }
                res.push((*x, d));
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.dim());
                for (k, mut row) in d.rows_mut().into_iter().enumerate() {
                    let n = out[[k, 0]];
                    if n > T::zero() {
                        let s = g[[k, 0]] / n;
                        row.zip_mut_with(&xv.row(k), |d, &e| *d = s * e);
                    }
                }
                res.push((*x, d));
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.dim());
                for (k, mut row) in d.rows_mut().into_iter().enumerate() {
                    let xr = xv.row(k);
                    let n = xr.dot(&xr).sqrt();
                    if n > T::zero() {
                        let y = out.row(k);
                        let gy = g.row(k).dot(&y);
                        row.zip_mut_with(&g.row(k), |d, &ge| *d = ge);
                        row.zip_mut_with(&y, |d, &ye| *d = (*d - gy * ye) / n);
                    }
                }
                res.push((*x, d));
            }
            Op::Sum(x) => res.push((*x, Array2::from_elem(self.shape(*x), g[[0, 0]]))),
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let n = T::of((shape.0 * shape.1) as f64);
                res.push((*x, Array2::from_elem(shape, g[[0, 0]] / n)));
            }
            Op::DotConst(x, c) => res.push((*x, c.mapv(|e| e * g[[0, 0]]))),
            Op::Custom(inputs, op) => {
                let views: Vec<_> = inputs.iter().map(|v| self.value(*v)).collect();
                let wants: Vec<bool> = inputs.iter().map(|v| want(*v)).collect();
                let grads = op.backward(&views, out, g, &wants);
                for ((v, w), gi) in inputs.iter().zip(&wants).zip(grads) {
                    if let (true, Some(gi)) = (*w, gi) {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
