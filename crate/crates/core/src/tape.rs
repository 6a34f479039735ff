//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are 1×1. Leaves are
//! either trainable (`param`) or constant (`constant`). `backward` walks the
//! tape once in reverse and only visits nodes that depend on a trainable leaf.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMatMul(Rc<Csr>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    RowSum(Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentMean(Var, Rc<Vec<(usize, usize)>>),
    Sum(Var),
    Frobenius(Var),
    SoftmaxRows(Var),
    Block(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// Constant sparse matrix times a tape value.
    pub fn sp_matmul(&mut self, m: &Rc<Csr>, b: Var) -> Var {
        let v = m.matmul(self.value(b));
        let t = self.tracked(b);
        self.push(v, Op::SpMatMul(Rc::clone(m), b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    /// `a` (n×d) plus a 1×d row broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let t = self.tracked(a);
        self.push(v, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let t = self.tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let t = self.tracked(a);
        self.push(v, Op::Log(a), t)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        let t = self.tracked(a);
        self.push(v, Op::Pow(a, p), t)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let t = self.tracked(a);
        self.push(v, Op::Clamp(a, lo, hi), t)
    }

    /// n×d → n×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(a);
        self.push(v, Op::RowSum(a), t)
    }

    /// `diag(v) · a` with `v` an n×1 column.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Var {
        let out = self.value(a) * self.value(v);
        let t = self.tracked(a) || self.tracked(v);
        self.push(out, Op::ScaleRows(a, v), t)
    }

    /// `a · diag(v)` with `v` a d×1 column.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Var {
        let row = self.value(v).t().to_owned();
        let out = self.value(a) * &row;
        let t = self.tracked(a) || self.tracked(v);
        self.push(out, Op::ScaleCols(a, v), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::ConcatCols(a, b), t)
    }

    /// Output row `i` is input row `index[i]`; `index` must be a permutation.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &index);
        let t = self.tracked(a);
        self.push(v, Op::GatherRows(a, index), t)
    }

    /// Mean of each `(start, len)` row segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, segments: Rc<Vec<(usize, usize)>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((segments.len(), x.ncols()));
        for (k, &(start, len)) in segments.iter().enumerate() {
            if len > 0 {
                let m = x.slice(s![start..start + len, ..]).sum_axis(Axis(0)) / len as f64;
                v.row_mut(k).assign(&m);
            }
        }
        let t = self.tracked(a);
        self.push(v, Op::SegmentMean(a, segments), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn frobenius(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let t = self.tracked(a);
        self.push(Array2::from_elem((1, 1), n), Op::Frobenius(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.outer_iter_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        let t = self.tracked(a);
        self.push(v, Op::SoftmaxRows(a), t)
    }

    /// Top-left `rows × cols` block.
    pub fn block(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).slice(s![..rows, ..cols]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::Block(a, rows, cols), t)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward_with(&self, output: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape must match output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut push = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        push(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.tracked(*b) {
                        push(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::SpMatMul(m, b) => push(*b, m.transpose_matmul(&g)),
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g);
                }
                Op::Sub(a, b) => {
                    push(*a, g.clone());
                    push(*b, -g);
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        push(*a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        push(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        push(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    push(*a, g);
                }
                Op::Scale(a, c) => push(*a, g * *c),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    push(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    push(*a, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Log(a) => push(*a, &g / self.value(*a)),
                Op::Pow(a, p) => {
                    let d = self.value(*a).mapv(|x| p * x.powf(p - 1.0));
                    push(*a, &g * &d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x < *lo || x > *hi {
                                *d = 0.0
                            }
                        });
                    push(*a, d);
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).ncols();
                    let d = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                    push(*a, d);
                }
                Op::ScaleRows(a, v) => {
                    if self.tracked(*v) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        push(*v, d);
                    }
                    if self.tracked(*a) {
                        push(*a, &g * self.value(*v));
                    }
                }
                Op::ScaleCols(a, v) => {
                    if self.tracked(*v) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(1));
                        push(*v, d);
                    }
                    if self.tracked(*a) {
                        let row = self.value(*v).t().to_owned();
                        push(*a, &g * &row);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    push(*a, g.slice(s![.., ..split]).to_owned());
                    push(*b, g.slice(s![.., split..]).to_owned());
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(i);
                    }
                    push(*a, d);
                }
                Op::SegmentMean(a, segments) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (k, &(start, len)) in segments.iter().enumerate() {
                        if len == 0 {
                            continue;
                        }
                        let share = &g.row(k) / len as f64;
                        for r in start..start + len {
                            d.row_mut(r).assign(&share);
                        }
                    }
                    push(*a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    push(*a, d);
                }
                Op::Frobenius(a) => {
                    let n = node.value[[0, 0]];
                    let d = if n > 0.0 {
                        self.value(*a) * (g[[0, 0]] / n)
                    } else {
                        Array2::zeros(self.value(*a).dim())
                    };
                    push(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    push(*a, gy - &(y * &dot));
                }
                Op::Block(a, rows, cols) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![..*rows, ..*cols]).assign(&g);
                    push(*a, d);
                }
            }
        }
        Gradients { grads }
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_with(output, Array2::from_elem((1, 1), 1.0))
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the output does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}
