//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks it in reverse and accumulates parameter gradients into the
//! [`ParamStore`](super::ParamStore).

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::LearnError;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} does not match data");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor::from_vec(1, data.len(), data)
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        Tensor::from_vec(data.len(), 1, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Tensor) -> Tensor {
        assert_eq!(self.cols, b.rows, "matmul {}x{} by {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Tensor::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, x) in orow.iter_mut().zip(brow) {
                    *o += a * x;
                }
            }
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Embed(ParamId, Rc<[usize]>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// matrix plus a 1×n row broadcast down every row
    AddRow(Var, Var),
    /// column n×1 plus row 1×m giving n×m
    OuterAdd(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// each row scaled by the matching entry of an n×1 column
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Relu(Var),
    MaskedSoftmax(Var, Rc<[bool]>),
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Rc<[usize]>),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Rows `ids` of a parameter matrix, as a `ids.len()`×cols matrix.
    pub fn embed(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Var {
        let table = store.value(id);
        let mut out = Tensor::zeros(ids.len(), table.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.data[r * table.cols..(r + 1) * table.cols].copy_from_slice(table.row(i));
        }
        self.push(out, Op::Embed(id, ids.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op on mismatched shapes");
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "add_row shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.data[i * v.cols..(i + 1) * v.cols].iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn outer_add(&mut self, col: Var, row: Var) -> Var {
        let (c, r) = (self.value(col), self.value(row));
        assert!(c.cols == 1 && r.rows == 1, "outer_add shape");
        let mut v = Tensor::zeros(c.rows, r.cols);
        for i in 0..c.rows {
            for j in 0..r.cols {
                v.data[i * r.cols + j] = c.data[i] + r.data[j];
            }
        }
        self.push(v, Op::OuterAdd(col, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert!(c.cols == 1 && c.rows == x.rows, "scale_rows shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            for o in &mut v.data[i * v.cols..(i + 1) * v.cols] {
                *o *= c.data[i];
            }
        }
        self.push(v, Op::ScaleRows(a, col))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        self.push(v, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(f64::MIN_POSITIVE).ln());
        self.push(v, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise softmax over entries where `mask` is true. Rows with no
    /// unmasked entry are all zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask shape");
        let mut v = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let span = i * x.cols..(i + 1) * x.cols;
            let m = &mask[span.clone()];
            let row = &x.data[span.clone()];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = &mut v.data[span];
            let mut total = 0.0;
            for ((o, x), &keep) in out.iter_mut().zip(row).zip(m) {
                if keep {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(v, Op::MaskedSoftmax(a, mask))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, y) in v.data.iter_mut().zip(x.row(i)) {
                *o += y;
            }
        }
        let n = x.rows.max(1) as f64;
        for o in &mut v.data {
            *o /= n;
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.data[i * cols + offset..i * cols + offset + x.cols].copy_from_slice(x.row(i));
            }
            offset += x.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(rows.len(), x.cols);
        for (r, &i) in rows.iter().enumerate() {
            v.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
        }
        self.push(v, Op::SelectRows(a, rows.into()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Accumulates d`loss`/d`param` into `store` for every parameter on the
    /// tape. `loss` must be a 1×1 tensor.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), LearnError> {
        if loss.0 >= self.nodes.len() {
            return Err(LearnError::GraphNotEvaluated);
        }
        if self.value(loss).len() != 1 {
            let (r, c) = self.value(loss).shape();
            return Err(LearnError::NotScalar { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate(*id, &g),
                Op::Embed(id, ids) => store.accumulate_rows(*id, ids, &g),
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(&y.transpose()));
                    acc(&mut grads, *b, x.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
                    };
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect(),
                    };
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::OuterAdd(col, row) => {
                    let mut gc = Tensor::zeros(g.rows, 1);
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            let x = g.data[i * g.cols + j];
                            gc.data[i] += x;
                            gr.data[j] += x;
                        }
                    }
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| x * k)),
                Op::ScaleRows(a, col) => {
                    let (x, c) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Tensor::zeros(c.rows, 1);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            let k = i * g.cols + j;
                            ga.data[k] = g.data[k] * c.data[i];
                            gc.data[i] += g.data[k] * x.data[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, x)| if *x > 0.0 { *g } else { g * x.exp() })
                            .collect(),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                            .collect(),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, x)| g / x.max(f64::MIN_POSITIVE))
                            .collect(),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let s = &node.value;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let span = i * g.cols..(i + 1) * g.cols;
                        let dot: f64 = g.data[span.clone()]
                            .iter()
                            .zip(&s.data[span.clone()])
                            .map(|(g, s)| g * s)
                            .sum();
                        for k in span {
                            if mask[k] {
                                ga.data[k] = s.data[k] * (g.data[k] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows.max(1) as f64;
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        for (o, y) in ga.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(&g.data) {
                            *o = y / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    let k = g.item();
                    acc(&mut grads, *a, Tensor::from_vec(x.rows, x.cols, vec![k; x.len()]));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let mut gp = Tensor::zeros(x.rows, x.cols);
                        for i in 0..x.rows {
                            gp.data[i * x.cols..(i + 1) * x.cols]
                                .copy_from_slice(&g.data[i * g.cols + offset..i * g.cols + offset + x.cols]);
                        }
                        offset += x.cols;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let gp = Tensor::from_vec(x.rows, x.cols, g.data[offset..offset + x.len()].to_vec());
                        offset += x.len();
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::SelectRows(a, rows) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for (r, &i) in rows.iter().enumerate() {
                        for (o, y) in ga.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(g.row(r)) {
                            *o += y;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
            }
        }
        Ok(())
    }
}
