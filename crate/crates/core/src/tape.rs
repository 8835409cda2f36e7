//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Every primitive computes its
//! value eagerly, checks it for non-finite entries and records what the
//! backward sweep needs. Node inputs always precede the node itself, so a
//! single reverse pass over the list visits each node exactly once.
//!
//! Tapes are cheap to throw away and are rebuilt for every loss evaluation.

use crate::error::{shape_err, Error, Result};
use crate::families::special::{digamma, lgamma};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Lgamma(Var),
    Sum(Var),
    SumRows(Var),
    Dot(Var, Var),
    Slice { src: Var, offset: usize },
    SliceCols { src: Var, offset: usize },
    RepeatRows { src: Var, times: usize },
    Reshape(Var),
    HCat(Var, Var),
    Scatter { src: Var, cols: Vec<usize> },
    Gather { src: Var, cols: Vec<usize> },
    GroupedMatMul { x: Var, mats: Var },
    GroupedAdd(Var, Var),
    GroupedMul(Var, Var),
    GroupedRowDot(Var, Var),
    GroupedOuterAdd { z: Var, u: Var, h: Var },
    PlanarLogDet(Var, Var),
    LogAbsDetTri { src: Var, dim: usize },
    LogOnePlusSumExp(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "reciprocal",
            Op::Abs(..) => "abs",
            Op::Lgamma(..) => "lgamma",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::Dot(..) => "dot",
            Op::Slice { .. } => "slice",
            Op::SliceCols { .. } => "slice_cols",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Reshape(..) => "reshape",
            Op::HCat(..) => "hcat",
            Op::Scatter { .. } => "scatter",
            Op::Gather { .. } => "gather",
            Op::GroupedMatMul { .. } => "grouped_matmul",
            Op::GroupedAdd(..) => "grouped_add",
            Op::GroupedMul(..) => "grouped_mul",
            Op::GroupedRowDot(..) => "grouped_row_dot",
            Op::GroupedOuterAdd { .. } => "grouped_outer_add",
            Op::PlanarLogDet(..) => "planar_log_det",
            Op::LogAbsDetTri { .. } => "logabsdet_tri",
            Op::LogOnePlusSumExp(..) => "log1p_sum_exp",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
    kinks: Vec<(usize, &'static str)>,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn is_scalar_shape(t: &Tensor) -> bool {
    t.rank() == 0
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Adds `f(i)` into the slot; the first contribution is written directly
/// instead of into a zeroed buffer.
fn accumulate_elementwise(slot: &mut Option<Vec<f64>>, la: usize, n: usize, f: impl Fn(usize) -> f64) {
    match slot {
        None if la == n => *slot = Some((0..n).map(f).collect()),
        _ => {
            let buf = slot.get_or_insert_with(|| vec![0.0; la]);
            if la == n {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += f(i);
                }
            } else {
                buf[0] += (0..n).map(f).sum::<f64>();
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dot product with four interleaved partial sums, so the loop vectorizes
/// while the summation order stays fixed.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| p * q).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `C = A B` for row-major `A: m x k`, `B: k x n`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    // p outermost so each row of B is streamed once; every entry of C still
    // accumulates over p in increasing order
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaves in creation order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Nodes evaluated at a non-differentiable point (e.g. `abs(0)`).
    pub fn kinks(&self) -> &[(usize, &'static str)] {
        &self.kinks
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.v(a);
        let data = x.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, value)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, value)?;
        self.leaves.push(v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, x: f64) -> Result<Var> {
        self.constant(Tensor::scalar(x))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (x, y) = (self.v(a), self.v(b));
        let value = if x.shape() == y.shape() {
            let d = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), d)?
        } else if is_scalar_shape(y) {
            let q = y.item();
            let d = x.data().iter().map(|&p| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), d)?
        } else if is_scalar_shape(x) {
            let p = x.item();
            let d = y.data().iter().map(|&q| f(p, q)).collect();
            Tensor::new(y.shape().to_vec(), d)?
        } else {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        };
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// `a / b` as `a * reciprocal(b)`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.recip(b)?;
        self.mul(a, r)
    }

    /// Matrix `[r, c]` plus a length-`c` vector added to every row.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (x, y) = (self.v(m), self.v(v));
        let (r, c) = x.dims2();
        if x.rank() != 2 || y.len() != c || y.rank() != 1 {
            return Err(shape_err("add_row", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut d = x.data().to_vec();
        for i in 0..r {
            for (o, &b) in d[i * c..(i + 1) * c].iter_mut().zip(y.data()) {
                *o += b;
            }
        }
        let value = Tensor::matrix(r, c, d)?;
        self.push(Op::AddRow(m, v), value)
    }

    /// Matrix `[r, c]` with row `i` scaled by `v[i]`.
    pub fn mul_col(&mut self, m: Var, v: Var) -> Result<Var> {
        let (x, y) = (self.v(m), self.v(v));
        let (r, c) = x.dims2();
        if x.rank() != 2 || y.len() != r || y.rank() != 1 {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let mut d = x.data().to_vec();
        for i in 0..r {
            let s = y.data()[i];
            d[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= s);
        }
        let value = Tensor::matrix(r, c, d)?;
        self.push(Op::MulCol(m, v), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Shift(a), |x| x + c)
    }

    /// `[m, k] x [k, n] -> [m, n]` or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.v(a), self.v(b));
        if x.rank() != 2 || y.rank() == 0 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let (m, k) = x.dims2();
        let (k2, n) = y.dims2();
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape())));
        }
        let mut c = vec![0.0; m * n];
        matmul_into(x.data(), y.data(), m, k, n, &mut c);
        let shape = if y.rank() == 1 { vec![m] } else { vec![m, n] };
        let value = Tensor::new(shape, c)?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.v(a);
        if x.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", x.shape())));
        }
        let (r, c) = x.dims2();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = x.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, d)?;
        self.push(Op::Transpose(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; non-positive inputs produce a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), |x| if x > 0.0 { x.ln() } else { f64::NAN })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let id = self.nodes.len();
        if self.v(a).data().iter().any(|&x| x == 0.0) {
            self.kinks.push((id, "sqrt"));
        }
        self.map(a, Op::Sqrt(a), |x| if x >= 0.0 { x.sqrt() } else { f64::NAN })
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let id = self.nodes.len();
        if self.v(a).data().iter().any(|&x| x == 0.0) {
            self.kinks.push((id, "abs"));
        }
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Log-gamma; defined for positive inputs.
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Lgamma(a), |x| if x > 0.0 { lgamma(x) } else { f64::NAN })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.v(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.v(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] -> [r]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.v(a);
        if x.rank() != 2 {
            return Err(shape_err("sum_rows", format!("{:?}", x.shape())));
        }
        let (r, _) = x.dims2();
        let d = (0..r).map(|i| x.row(i).iter().sum()).collect();
        self.push(Op::SumRows(a), Tensor::vector(d))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.v(a), self.v(b));
        if x.rank() != 1 || x.shape() != y.shape() {
            return Err(shape_err("dot", format!("{:?} . {:?}", x.shape(), y.shape())));
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s))
    }

    /// Contiguous slice of the flat data reinterpreted with `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        let x = self.v(src);
        let n: usize = shape.iter().product();
        if offset + n > x.len() {
            return Err(shape_err(
                "slice",
                format!("{offset}+{n} exceeds {}", x.len()),
            ));
        }
        let value = Tensor::new(shape, x.data()[offset..offset + n].to_vec())?;
        self.push(Op::Slice { src, offset }, value)
    }

    /// Columns `offset..offset+len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, offset: usize, len: usize) -> Result<Var> {
        let x = self.v(src);
        let (r, c) = x.dims2();
        if x.rank() != 2 || offset + len > c {
            return Err(shape_err("slice_cols", format!("{:?} [{offset}; {len}]", x.shape())));
        }
        let mut d = Vec::with_capacity(r * len);
        for i in 0..r {
            d.extend_from_slice(&x.row(i)[offset..offset + len]);
        }
        let value = Tensor::matrix(r, len, d)?;
        self.push(Op::SliceCols { src, offset }, value)
    }

    /// `[g, c] -> [g * times, c]`: each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, src: Var, times: usize) -> Result<Var> {
        let x = self.v(src);
        if x.rank() != 2 || times == 0 {
            return Err(shape_err("repeat_rows", format!("{:?} x{times}", x.shape())));
        }
        let (g, c) = x.dims2();
        let mut d = Vec::with_capacity(g * times * c);
        for i in 0..g {
            for _ in 0..times {
                d.extend_from_slice(x.row(i));
            }
        }
        let value = Tensor::matrix(g * times, c, d)?;
        self.push(Op::RepeatRows { src, times }, value)
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.v(src).clone().reshape(shape)?;
        self.push(Op::Reshape(src), value)
    }

    /// Horizontal concatenation `[r, p] | [r, q] -> [r, p + q]`.
    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.v(a), self.v(b));
        let ((r, p), (r2, q)) = (x.dims2(), y.dims2());
        if x.rank() != 2 || y.rank() != 2 || r != r2 {
            return Err(shape_err("hcat", format!("{:?} | {:?}", x.shape(), y.shape())));
        }
        let mut d = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            d.extend_from_slice(x.row(i));
            d.extend_from_slice(y.row(i));
        }
        let value = Tensor::matrix(r, p + q, d)?;
        self.push(Op::HCat(a, b), value)
    }

    /// `[r, p] -> [r, width]` with column `j` of the input placed at `cols[j]`
    /// and every other column zero.
    pub fn scatter_cols(&mut self, src: Var, cols: Vec<usize>, width: usize) -> Result<Var> {
        let x = self.v(src);
        let (r, p) = x.dims2();
        if x.rank() != 2 || cols.len() != p || cols.iter().any(|&c| c >= width) {
            return Err(shape_err("scatter", format!("{:?} -> width {width}", x.shape())));
        }
        let mut d = vec![0.0; r * width];
        for i in 0..r {
            for (j, &c) in cols.iter().enumerate() {
                d[i * width + c] = x.data()[i * p + j];
            }
        }
        let value = Tensor::matrix(r, width, d)?;
        self.push(Op::Scatter { src, cols }, value)
    }

    /// `[r, p] -> [r, cols.len()]` with output column `k` copied from input
    /// column `cols[k]`. Columns may repeat.
    pub fn gather_cols(&mut self, src: Var, cols: Vec<usize>) -> Result<Var> {
        let x = self.v(src);
        let (r, p) = x.dims2();
        if x.rank() != 2 || cols.iter().any(|&c| c >= p) {
            return Err(shape_err("gather", format!("{:?} <- {cols:?}", x.shape())));
        }
        let w = cols.len();
        let mut d = Vec::with_capacity(r * w);
        for i in 0..r {
            let row = x.row(i);
            d.extend(cols.iter().map(|&c| row[c]));
        }
        let value = Tensor::matrix(r, w, d)?;
        self.push(Op::Gather { src, cols }, value)
    }

    /// Per-group matrix-vector products. `x: [g * m, n]` holds `g` groups of
    /// `m` rows; `mats: [g, k * n]` holds one row-major `k x n` matrix per
    /// group. Output row `r` is `A_{r / m} x_r`, shape `[g * m, k]`.
    pub fn grouped_matmul(&mut self, x: Var, mats: Var, k: usize) -> Result<Var> {
        let (xv, av) = (self.v(x), self.v(mats));
        let (rows, n) = xv.dims2();
        let (g, kn) = av.dims2();
        if xv.rank() != 2 || av.rank() != 2 || kn != k * n || g == 0 || rows % g != 0 {
            return Err(shape_err(
                "grouped_matmul",
                format!("{:?} with {:?} (k={k})", xv.shape(), av.shape()),
            ));
        }
        let m = rows / g;
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let a = av.row(r / m);
            let xr = xv.row(r);
            for i in 0..k {
                let arow = &a[i * n..(i + 1) * n];
                out[r * k + i] = arow.iter().zip(xr).map(|(p, q)| p * q).sum();
            }
        }
        let value = Tensor::matrix(rows, k, out)?;
        self.push(Op::GroupedMatMul { x, mats }, value)
    }

    /// Rows per group when `rows` rows are split evenly over `groups`.
    fn group_size(&self, what: &'static str, rows: usize, groups: usize) -> Result<usize> {
        if groups == 0 || rows % groups != 0 {
            return Err(shape_err(what, format!("{rows} rows over {groups} groups")));
        }
        Ok(rows / groups)
    }

    /// `x: [g * m, c]` (or `[g * m]`) plus `b: [g, c]` (or `[g]`), row `r`
    /// receiving row `r / m` of `b`.
    pub fn grouped_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.v(x), self.v(b));
        let c = if xv.rank() == 2 { xv.cols() } else { 1 };
        let bc = if bv.rank() == 2 { bv.cols() } else { 1 };
        if xv.rank() != bv.rank() || xv.rank() == 0 || c != bc {
            return Err(shape_err("grouped_add", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let m = self.group_size("grouped_add", xv.len() / c, bv.len() / c)?;
        let (xv, bv) = (self.v(x), self.v(b));
        let mut d = xv.data().to_vec();
        for (r, row) in d.chunks_mut(c).enumerate() {
            let br = &bv.data()[(r / m) * c..(r / m + 1) * c];
            row.iter_mut().zip(br).for_each(|(o, v)| *o += v);
        }
        let value = Tensor::new(xv.shape().to_vec(), d)?;
        self.push(Op::GroupedAdd(x, b), value)
    }

    /// `x: [g * m]` times `s: [g]`, entry `r` scaled by `s[r / m]`.
    pub fn grouped_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.v(x), self.v(s));
        if xv.rank() != 1 || sv.rank() != 1 {
            return Err(shape_err("grouped_mul", format!("{:?} * {:?}", xv.shape(), sv.shape())));
        }
        let m = self.group_size("grouped_mul", xv.len(), sv.len())?;
        let (xv, sv) = (self.v(x), self.v(s));
        let d = xv.data().iter().enumerate().map(|(r, v)| v * sv.data()[r / m]).collect();
        self.push(Op::GroupedMul(x, s), Tensor::vector(d))
    }

    /// `z: [g * m, d]`, `w: [g, d]` -> `[g * m]`, entry `r` is `z_r · w_{r / m}`.
    pub fn grouped_row_dot(&mut self, z: Var, w: Var) -> Result<Var> {
        let (zv, wv) = (self.v(z), self.v(w));
        if zv.rank() != 2 || wv.rank() != 2 || zv.cols() != wv.cols() {
            return Err(shape_err("grouped_row_dot", format!("{:?} . {:?}", zv.shape(), wv.shape())));
        }
        let m = self.group_size("grouped_row_dot", zv.rows(), wv.rows())?;
        let (zv, wv) = (self.v(z), self.v(w));
        let d = (0..zv.rows())
            .map(|r| zv.row(r).iter().zip(wv.row(r / m)).map(|(p, q)| p * q).sum())
            .collect();
        self.push(Op::GroupedRowDot(z, w), Tensor::vector(d))
    }

    /// `z + h ⊗ u`: row `r` of `z: [g * m, d]` plus `h[r] · u_{r / m}`.
    pub fn grouped_outer_add(&mut self, z: Var, u: Var, h: Var) -> Result<Var> {
        let (zv, uv, hv) = (self.v(z), self.v(u), self.v(h));
        if zv.rank() != 2 || uv.rank() != 2 || zv.cols() != uv.cols() || hv.shape() != [zv.rows()] {
            return Err(shape_err(
                "grouped_outer_add",
                format!("{:?}, {:?}, {:?}", zv.shape(), uv.shape(), hv.shape()),
            ));
        }
        let m = self.group_size("grouped_outer_add", zv.rows(), uv.rows())?;
        let (zv, uv, hv) = (self.v(z), self.v(u), self.v(h));
        let c = zv.cols();
        let mut d = zv.data().to_vec();
        for (r, row) in d.chunks_mut(c).enumerate() {
            let hr = hv.data()[r];
            row.iter_mut().zip(uv.row(r / m)).for_each(|(o, u)| *o += hr * u);
        }
        let value = Tensor::matrix(zv.rows(), c, d)?;
        self.push(Op::GroupedOuterAdd { z, u, h }, value)
    }

    /// Planar-flow log-determinant `log(1 + (1 − h_r²) s_{r / m})` for
    /// `h: [g * m]`, `s: [g]`.
    pub fn planar_log_det(&mut self, h: Var, s: Var) -> Result<Var> {
        let (hv, sv) = (self.v(h), self.v(s));
        if hv.rank() != 1 || sv.rank() != 1 {
            return Err(shape_err("planar_log_det", format!("{:?}, {:?}", hv.shape(), sv.shape())));
        }
        let m = self.group_size("planar_log_det", hv.len(), sv.len())?;
        let (hv, sv) = (self.v(h), self.v(s));
        let mut d = Vec::with_capacity(hv.len());
        for (r, &x) in hv.data().iter().enumerate() {
            let det = 1.0 + (1.0 - x * x) * sv.data()[r / m];
            if !(det > 0.0) {
                return Err(Error::Domain(format!(
                    "planar Jacobian determinant not positive at sample {r}"
                )));
            }
            d.push(det.ln());
        }
        self.push(Op::PlanarLogDet(h, s), Tensor::vector(d))
    }

    /// `log|det|` of triangular matrices: the sum of `log|diag|`.
    ///
    /// Accepts a single `[d, d]` matrix (scalar result) or `[g, d * d]`
    /// stacked row-major matrices (one value per group).
    pub fn logabsdet_tri(&mut self, src: Var, dim: usize) -> Result<Var> {
        let x = self.v(src);
        let per = dim * dim;
        let single = x.shape() == [dim, dim];
        if !(single || (x.rank() == 2 && x.cols() == per)) {
            return Err(shape_err("logabsdet_tri", format!("{:?} (d={dim})", x.shape())));
        }
        let groups = x.len() / per;
        let vals: Vec<f64> = (0..groups)
            .map(|g| {
                (0..dim)
                    .map(|i| x.data()[g * per + i * dim + i].abs().ln())
                    .sum()
            })
            .collect();
        let value = if single {
            Tensor::scalar(vals[0])
        } else {
            Tensor::vector(vals)
        };
        self.push(Op::LogAbsDetTri { src, dim }, value)
    }

    /// `[r, c] -> [r]`: `log(1 + sum_j exp(x_ij))`, evaluated in log space.
    pub fn log1p_sum_exp(&mut self, a: Var) -> Result<Var> {
        let x = self.v(a);
        if x.rank() != 2 {
            return Err(shape_err("log1p_sum_exp", format!("{:?}", x.shape())));
        }
        let d = (0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let mx = row.iter().copied().fold(0.0_f64, f64::max);
                let s: f64 = (-mx).exp() + row.iter().map(|&v| (v - mx).exp()).sum::<f64>();
                mx + s.ln()
            })
            .collect();
        self.push(Op::LogOnePlusSumExp(a), Tensor::vector(d))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.v(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let len_of = |v: Var| self.nodes[v.0].value.len();
        // `g` has the node's shape; scalar-broadcast inputs get the reduced sum.
        macro_rules! ew {
            ($a:expr, $f:expr) => {
                accumulate_elementwise(&mut grads[$a.0], len_of($a), g.len(), $f)
            };
        }
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                ew!(*a, |i| g[i]);
                ew!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                ew!(*a, |i| g[i]);
                ew!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.v(*a).data(), self.v(*b).data());
                let at = |x: &[f64], i: usize| if x.len() == 1 { x[0] } else { x[i] };
                ew!(*a, |i| g[i] * at(xb, i));
                ew!(*b, |i| g[i] * at(xa, i));
            }
            Op::AddRow(m, v) => {
                let c = self.v(*v).len();
                ew!(*m, |i| g[i]);
                accumulate(&mut grads[v.0], c, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                });
            }
            Op::MulCol(m, v) => {
                let (xm, xv) = (self.v(*m), self.v(*v).data());
                let (r, c) = xm.dims2();
                ew!(*m, |i| g[i] * xv[i / c]);
                accumulate(&mut grads[v.0], r, |buf| {
                    for i in 0..r {
                        let row = &xm.data()[i * c..(i + 1) * c];
                        buf[i] += row.iter().zip(&g[i * c..(i + 1) * c]).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::Neg(a) => ew!(*a, |i| -g[i]),
            Op::Scale(a, c) => ew!(*a, |i| c * g[i]),
            Op::Shift(a) => ew!(*a, |i| g[i]),
            Op::MatMul(a, b) => {
                let (xa, xb) = (self.v(*a), self.v(*b));
                let (m, k) = xa.dims2();
                let (_, n) = xb.dims2();
                // dA = G B^T
                accumulate(&mut grads[a.0], m * k, |buf| {
                    for p in 0..k {
                        let bp = &xb.data()[p * n..(p + 1) * n];
                        for i in 0..m {
                            buf[i * k + p] += dot(&g[i * n..(i + 1) * n], bp);
                        }
                    }
                });
                // dB = A^T G, row p of dB finished before moving on
                accumulate(&mut grads[b.0], k * n, |buf| {
                    for (p, out) in buf.chunks_mut(n).enumerate() {
                        for i in 0..m {
                            let aip = xa.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in out.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.v(*a).dims2();
                accumulate(&mut grads[a.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Tanh(a) => ew!(*a, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Exp(a) => ew!(*a, |i| g[i] * y[i]),
            Op::Log(a) => {
                let x = self.v(*a).data();
                ew!(*a, |i| g[i] / x[i]);
            }
            Op::Softplus(a) => {
                let x = self.v(*a).data();
                ew!(*a, |i| g[i] * sigmoid(x[i]));
            }
            Op::Square(a) => {
                let x = self.v(*a).data();
                ew!(*a, |i| 2.0 * x[i] * g[i]);
            }
            Op::Sqrt(a) => ew!(*a, |i| {
                if y[i] == 0.0 {
                    0.0
                } else {
                    g[i] / (2.0 * y[i])
                }
            }),
            Op::Recip(a) => ew!(*a, |i| -g[i] * y[i] * y[i]),
            Op::Abs(a) => {
                let x = self.v(*a).data();
                ew!(*a, |i| {
                    if x[i] > 0.0 {
                        g[i]
                    } else if x[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Lgamma(a) => {
                let x = self.v(*a).data();
                ew!(*a, |i| g[i] * digamma(x[i]));
            }
            Op::Sum(a) => {
                let la = len_of(*a);
                accumulate(&mut grads[a.0], la, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
            Op::SumRows(a) => {
                let (r, c) = self.v(*a).dims2();
                accumulate(&mut grads[a.0], r * c, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i / c];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (xa, xb) = (self.v(*a).data(), self.v(*b).data());
                accumulate(&mut grads[a.0], xa.len(), |buf| {
                    buf.iter_mut().zip(xb).for_each(|(o, v)| *o += g[0] * v)
                });
                accumulate(&mut grads[b.0], xb.len(), |buf| {
                    buf.iter_mut().zip(xa).for_each(|(o, v)| *o += g[0] * v)
                });
            }
            Op::Slice { src, offset } => {
                let ls = len_of(*src);
                accumulate(&mut grads[src.0], ls, |buf| {
                    for (b, gi) in buf[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *b += gi;
                    }
                });
            }
            Op::SliceCols { src, offset } => {
                let (r, c) = self.v(*src).dims2();
                let len = node.value.cols();
                accumulate(&mut grads[src.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + offset + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::RepeatRows { src, times } => {
                let (rg, c) = self.v(*src).dims2();
                accumulate(&mut grads[src.0], rg * c, |buf| {
                    for r in 0..rg * times {
                        let gi = r / times;
                        for j in 0..c {
                            buf[gi * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::Reshape(src) => ew!(*src, |i| g[i]),
            Op::HCat(a, b) => {
                let (r, p) = self.v(*a).dims2();
                let q = self.v(*b).cols();
                accumulate(&mut grads[a.0], r * p, |buf| {
                    for i in 0..r {
                        for j in 0..p {
                            buf[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                });
                accumulate(&mut grads[b.0], r * q, |buf| {
                    for i in 0..r {
                        for j in 0..q {
                            buf[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::Scatter { src, cols } => {
                let (r, p) = self.v(*src).dims2();
                let width = node.value.cols();
                accumulate(&mut grads[src.0], r * p, |buf| {
                    for i in 0..r {
                        for (j, &c) in cols.iter().enumerate() {
                            buf[i * p + j] += g[i * width + c];
                        }
                    }
                });
            }
            Op::Gather { src, cols } => {
                let (r, p) = self.v(*src).dims2();
                let w = cols.len();
                accumulate(&mut grads[src.0], r * p, |buf| {
                    for i in 0..r {
                        for (k, &c) in cols.iter().enumerate() {
                            buf[i * p + c] += g[i * w + k];
                        }
                    }
                });
            }
            Op::GroupedMatMul { x, mats } => {
                let (xv, av) = (self.v(*x), self.v(*mats));
                let (rows, n) = xv.dims2();
                let (groups, kn) = av.dims2();
                let k = kn / n;
                let m = rows / groups;
                accumulate(&mut grads[x.0], rows * n, |buf| {
                    for r in 0..rows {
                        let a = av.row(r / m);
                        let gr = &g[r * k..(r + 1) * k];
                        let out = &mut buf[r * n..(r + 1) * n];
                        for (i, &gi) in gr.iter().enumerate() {
                            for (o, &aij) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                                *o += gi * aij;
                            }
                        }
                    }
                });
                accumulate(&mut grads[mats.0], groups * kn, |buf| {
                    for r in 0..rows {
                        let grp = r / m;
                        let xr = xv.row(r);
                        let gr = &g[r * k..(r + 1) * k];
                        let out = &mut buf[grp * kn..(grp + 1) * kn];
                        for (i, &gi) in gr.iter().enumerate() {
                            for (o, &xj) in out[i * n..(i + 1) * n].iter_mut().zip(xr) {
                                *o += gi * xj;
                            }
                        }
                    }
                });
            }
            Op::GroupedAdd(x, b) => {
                let (xl, bl) = (len_of(*x), len_of(*b));
                let xv = self.v(*x);
                let c = if xv.rank() == 2 { xv.cols() } else { 1 };
                let m = xl / bl;
                ew!(*x, |i| g[i]);
                accumulate(&mut grads[b.0], bl, |buf| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let o = &mut buf[(r / m) * c..(r / m + 1) * c];
                        o.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::GroupedMul(x, s) => {
                let (xv, sv) = (self.v(*x).data(), self.v(*s).data());
                let m = xv.len() / sv.len();
                ew!(*x, |i| g[i] * sv[i / m]);
                accumulate(&mut grads[s.0], sv.len(), |buf| {
                    for (r, (gr, xr)) in g.iter().zip(xv).enumerate() {
                        buf[r / m] += gr * xr;
                    }
                });
            }
            Op::GroupedRowDot(z, w) => {
                let (zv, wv) = (self.v(*z), self.v(*w));
                let (rows, c) = zv.dims2();
                let m = rows / wv.rows();
                accumulate(&mut grads[z.0], rows * c, |buf| {
                    for (r, o) in buf.chunks_mut(c).enumerate() {
                        let gr = g[r];
                        o.iter_mut().zip(wv.row(r / m)).for_each(|(o, w)| *o += gr * w);
                    }
                });
                accumulate(&mut grads[w.0], wv.len(), |buf| {
                    for r in 0..rows {
                        let gr = g[r];
                        let o = &mut buf[(r / m) * c..(r / m + 1) * c];
                        o.iter_mut().zip(zv.row(r)).for_each(|(o, z)| *o += gr * z);
                    }
                });
            }
            Op::GroupedOuterAdd { z, u, h } => {
                let (uv, hv) = (self.v(*u), self.v(*h).data());
                let c = uv.cols();
                let m = hv.len() / uv.rows();
                ew!(*z, |i| g[i]);
                accumulate(&mut grads[u.0], uv.len(), |buf| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let hr = hv[r];
                        let o = &mut buf[(r / m) * c..(r / m + 1) * c];
                        o.iter_mut().zip(gr).for_each(|(o, v)| *o += hr * v);
                    }
                });
                let dh = |r: usize| -> f64 {
                    let gr = &g[r * c..(r + 1) * c];
                    gr.iter().zip(uv.row(r / m)).map(|(p, q)| p * q).sum()
                };
                accumulate_elementwise(&mut grads[h.0], hv.len(), hv.len(), dh);
            }
            Op::PlanarLogDet(h, s) => {
                let (hv, sv) = (self.v(*h).data(), self.v(*s).data());
                let m = hv.len() / sv.len();
                // y = log det, so 1 / det = exp(−y)
                ew!(*h, |r| -2.0 * g[r] * hv[r] * sv[r / m] * (-y[r]).exp());
                accumulate(&mut grads[s.0], sv.len(), |buf| {
                    for (r, &x) in hv.iter().enumerate() {
                        buf[r / m] += g[r] * (1.0 - x * x) * (-y[r]).exp();
                    }
                });
            }
            Op::LogAbsDetTri { src, dim } => {
                let x = self.v(*src).data();
                let per = dim * dim;
                accumulate(&mut grads[src.0], x.len(), |buf| {
                    for (grp, &gg) in g.iter().enumerate() {
                        for i in 0..*dim {
                            let idx = grp * per + i * dim + i;
                            buf[idx] += gg / x[idx];
                        }
                    }
                });
            }
            Op::LogOnePlusSumExp(a) => {
                let xv = self.v(*a);
                let (r, c) = xv.dims2();
                accumulate(&mut grads[a.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[i] * (xv.data()[i * c + j] - y[i]).exp();
                        }
                    }
                });
            }
        }
    }
}
