//! Reverse-mode automatic differentiation over dense 2-D matrices.
//!
//! Every value on a [`Tape`] is an `f64` matrix; vectors are `1 × n` rows and
//! scalars are `1 × 1`. Operations record their parents and the backward pass
//! walks the tape in reverse, accumulating gradients. Constants are leaves
//! whose gradients are simply never read, which is how stop-gradient is
//! expressed throughout the crate.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Mat>),
    AddConst(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Transpose(usize),
    Exp(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Sum(usize),
    RowSums(usize),
    Gather(usize, Rc<Vec<(usize, usize)>>),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.nrows(), v.ncols())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf used as a constant; identical to [`Tape::leaf`] but documents intent.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Backpropagates from a `1 × 1` output.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        assert_eq!(out.dim(), (1, 1), "gradients require a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; output.id + 1];
        grads[output.id] = Some(Mat::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Mat { &nodes[i].value };
            let mut acc = |i: usize, delta: Mat| match &mut grads[i] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::MulConst(a, c) => acc(*a, &g * c.as_ref()),
                Op::AddConst(a) => acc(*a, g),
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::ScaleBy(a, sc) => {
                    let sv = val(*sc)[[0, 0]];
                    acc(*sc, Mat::from_elem((1, 1), (&g * val(*a)).sum()));
                    acc(*a, g * sv);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Exp(a) => acc(*a, g * node.value.as_ref()),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref();
                    acc(*a, g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                    acc(*a, g * &d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, g * &d);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref();
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, gy - &(y * &dots));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, g - &(p * &sums));
                }
                Op::NormalizeRows(a, floor) => {
                    let x = val(*a);
                    let y = node.value.as_ref();
                    let mut d = Mat::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let norm = x.row(r).dot(&x.row(r)).sqrt();
                        if norm > *floor {
                            let yg = y.row(r).dot(&g.row(r));
                            for c in 0..x.ncols() {
                                d[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / norm;
                            }
                        } else {
                            for c in 0..x.ncols() {
                                d[[r, c]] = g[[r, c]] / floor;
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        acc(p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).ncols();
                        acc(p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, Mat::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::RowSums(a) => {
                    let (r, c) = val(*a).dim();
                    let d = Mat::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(*a, d);
                }
                Op::Gather(a, idx) => {
                    let mut d = Mat::zeros(val(*a).dim());
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        d[[r, c]] += g[[k, 0]];
                    }
                    acc(*a, d);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` did not influence the output.
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when absent.
    pub fn get_or_zero(&self, v: Var<'_>) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(v.value().dim()))
    }
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The `[0, 0]` entry; intended for scalar outputs.
    pub fn item(&self) -> f64 {
        self.value()[[0, 0]]
    }

    fn unary(&self, value: Mat, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().dot(other.value().as_ref());
        self.unary(v, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "add shape mismatch");
        self.unary(a.as_ref() + b.as_ref(), Op::Add(self.id, other.id))
    }

    /// Adds a `1 × c` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.nrows(), 1, "add_row expects a row vector");
        assert_eq!(a.ncols(), r.ncols(), "add_row width mismatch");
        self.unary(a.as_ref() + r.as_ref(), Op::AddRow(self.id, row.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "sub shape mismatch");
        self.unary(a.as_ref() - b.as_ref(), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
        self.unary(a.as_ref() * b.as_ref(), Op::Mul(self.id, other.id))
    }

    /// Elementwise product with a constant matrix (no gradient to the constant).
    pub fn mul_const(&self, c: Mat) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.dim(), c.dim(), "mul_const shape mismatch");
        let v = a.as_ref() * &c;
        self.unary(v, Op::MulConst(self.id, Rc::new(c)))
    }

    /// Adds a constant matrix (no gradient to the constant).
    pub fn add_const(&self, c: &Mat) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.dim(), c.dim(), "add_const shape mismatch");
        self.unary(a.as_ref() + c, Op::AddConst(self.id))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(self.value().mapv(|x| x + k), Op::AddConst(self.id))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(self.value().mapv(|x| x * k), Op::Scale(self.id, k))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiplies every entry by the `1 × 1` value `s`.
    pub fn scale_by(&self, s: &Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1), "scale_by expects a scalar");
        let k = s.item();
        self.unary(self.value().mapv(|x| x * k), Op::ScaleBy(self.id, s.id))
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(self.value().t().to_owned(), Op::Transpose(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value().mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(softmax_rows(&self.value()), Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unary(log_softmax_rows(&self.value()), Op::LogSoftmaxRows(self.id))
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn normalize_rows(&self, floor: f64) -> Var<'t> {
        let mut v = self.value().as_ref().clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(floor);
            row.mapv_inplace(|x| x / n);
        }
        self.unary(v, Op::NormalizeRows(self.id, floor))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![start..end, ..]).to_owned();
        self.unary(v, Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.unary(v, Op::SliceCols(self.id, start))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Mat::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Row sums as an `r × 1` column.
    pub fn row_sums(&self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::RowSums(self.id))
    }

    /// Picks the listed `(row, col)` entries into a `k × 1` column.
    pub fn gather(&self, index: Vec<(usize, usize)>) -> Var<'t> {
        let a = self.value();
        let v = Mat::from_shape_fn((index.len(), 1), |(k, _)| a[index[k]]);
        self.unary(v, Op::Gather(self.id, Rc::new(index)))
    }
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
    parts[0].unary(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
    parts[0].unary(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
}

/// Sum of several same-shaped values.
pub fn sum_all<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let mut it = parts.iter();
    let first = *it.next().expect("sum_all of nothing");
    it.fold(first, |acc, p| acc.add(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut m = x.clone();
            m[[r, c]] -= h;
            g[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Mat, build: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(xv);
        let g = tape.gradients(out).get_or_zero(xv);
        let n = numeric_grad(&x, |p| {
            let t = Tape::new();
            build(t.leaf(p.clone())).item()
        });
        for (a, b) in g.iter().zip(n.iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "analytic {a} vs numeric {b}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |x| x.exp().sum());
        check(sample(), |x| x.sigmoid().mul(&x).sum());
        check(sample(), |x| x.leaky_relu(0.1).scale(3.0).sum());
        check(sample(), |x| x.relu().add_scalar(2.0).mul(&x).sum());
    }

    #[test]
    fn row_ops() {
        let w = array![[0.2, -0.4, 1.0], [0.5, 0.5, -2.0]];
        check(sample(), |x| x.softmax_rows().mul_const(w.clone()).sum());
        check(sample(), |x| x.log_softmax_rows().mul_const(w.clone()).sum());
        check(sample(), |x| x.normalize_rows(1e-12).mul_const(w.clone()).sum());
        check(sample(), |x| x.row_sums().exp().sum());
    }

    #[test]
    fn structural_ops() {
        check(sample(), |x| x.matmul(&x.t()).sum());
        check(sample(), |x| {
            let a = x.slice_rows(0, 1);
            let b = x.slice_cols(1, 3);
            concat_cols(&[a.t().slice_rows(0, 2), b.t()]).exp().sum()
        });
        check(sample(), |x| concat_rows(&[x, x.scale(2.0)]).sigmoid().sum());
        check(sample(), |x| x.gather(vec![(0, 1), (1, 2), (0, 1)]).exp().sum());
        check(sample(), |x| {
            let s = x.slice_rows(0, 1).slice_cols(0, 1);
            x.scale_by(&s).add_row(&x.slice_rows(1, 2)).exp().sum()
        });
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(sample());
        let b = tape.leaf(sample());
        let out = a.sum();
        let g = tape.gradients(out);
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zero(b), Mat::zeros((2, 3)));
    }

    #[test]
    fn normalize_handles_zero_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::zeros((1, 3)));
        let y = x.normalize_rows(1e-12);
        assert!(y.value().iter().all(|v| v.is_finite() && *v == 0.0));
    }
}
