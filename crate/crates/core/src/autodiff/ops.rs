//! Forward operations and their backward rules.
//!
//! Every op stores its parents plus whatever the backward rule needs
//! (argmax winners, nearest-neighbor assignments). Rules accumulate into
//! parent gradients; parents that do not require gradients are skipped.

use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows(Tensor, usize),
    SliceCols(Tensor, usize),
    GatherRows(Tensor, Vec<usize>),
    AddRowVec(Tensor, Tensor),
    RowSoftmax(Tensor),
    RowLogSoftmax(Tensor),
    LayerNorm(Tensor, f64),
    Gelu(Tensor),
    Relu(Tensor),
    MaxAxis(Tensor, Vec<usize>),
    SegmentMaxRows(Tensor, Vec<usize>),
    MeanAxis(Tensor, usize),
    L2NormRows(Tensor),
    L2NormalizeRows(Tensor, f64),
    Ln(Tensor),
    Exp(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    TakeDiag(Tensor),
    Chamfer {
        pred: Tensor,
        target: Tensor,
        nearest_of_pred: Vec<usize>,
        nearest_of_target: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::AddRowVec(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::MaxAxis(a, _)
            | Op::SegmentMaxRows(a, _)
            | Op::MeanAxis(a, _)
            | Op::L2NormRows(a)
            | Op::L2NormalizeRows(a, _)
            | Op::Ln(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::TakeDiag(a) => vec![a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
            Op::Chamfer { pred, target, .. } => vec![pred, target],
        }
    }

    /// Accumulates d(loss)/d(parent) given the node's own value and gradient.
    pub(crate) fn backprop(&self, node: &Tensor, g: &[f64]) {
        match self {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bv = b.data();
                    let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(g, b)| g * b).collect();
                    drop(bv);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.data();
                    let db: Vec<f64> = g.iter().zip(av.iter()).map(|(g, a)| g * a).collect();
                    drop(av);
                    b.accumulate_grad(&db);
                }
            }
            Op::Scale(a, c) => {
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().map(|g| g * c).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    // da = g @ bᵀ
                    let bv = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                    }
                    drop(bv);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // db = aᵀ @ g
                    let av = a.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                    drop(av);
                    b.accumulate_grad(&db);
                }
            }
            Op::Transpose(a) => {
                if a.requires_grad() {
                    let (m, n) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.shape()[1];
                let mut row0 = 0;
                for p in parts {
                    let rows = p.shape()[0];
                    if p.requires_grad() {
                        p.accumulate_grad(&g[row0 * cols..(row0 + rows) * cols]);
                    }
                    row0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape()[0];
                let total_cols = node.shape()[1];
                let mut col0 = 0;
                for p in parts {
                    let cols = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dp[i * cols + j] = g[i * total_cols + col0 + j];
                            }
                        }
                        p.accumulate_grad(&dp);
                    }
                    col0 += cols;
                }
            }
            Op::SliceRows(a, start) => {
                if a.requires_grad() {
                    let cols = a.shape()[1];
                    let mut da = vec![0.0; a.len()];
                    da[start * cols..start * cols + g.len()].copy_from_slice(g);
                    a.accumulate_grad(&da);
                }
            }
            Op::SliceCols(a, start) => {
                if a.requires_grad() {
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let out_cols = node.shape()[1];
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..out_cols {
                            da[i * cols + start + j] = g[i * out_cols + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::GatherRows(a, idx) => {
                if a.requires_grad() {
                    let cols = a.shape()[1];
                    let mut da = vec![0.0; a.len()];
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..cols {
                            da[src_row * cols + j] += g[out_row * cols + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::AddRowVec(a, v) => {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if v.requires_grad() {
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += g[i * cols + j];
                        }
                    }
                    v.accumulate_grad(&dv);
                }
            }
            Op::RowSoftmax(a) => {
                if a.requires_grad() {
                    let y = node.data();
                    let (rows, cols) = (node.shape()[0], node.shape()[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = i * cols;
                        let dot: f64 = (0..cols).map(|j| g[r + j] * y[r + j]).sum();
                        for j in 0..cols {
                            da[r + j] = y[r + j] * (g[r + j] - dot);
                        }
                    }
                    drop(y);
                    a.accumulate_grad(&da);
                }
            }
            Op::RowLogSoftmax(a) => {
                if a.requires_grad() {
                    let y = node.data();
                    let (rows, cols) = (node.shape()[0], node.shape()[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = i * cols;
                        let gsum: f64 = (0..cols).map(|j| g[r + j]).sum();
                        for j in 0..cols {
                            da[r + j] = g[r + j] - y[r + j].exp() * gsum;
                        }
                    }
                    drop(y);
                    a.accumulate_grad(&da);
                }
            }
            Op::LayerNorm(a, eps) => {
                if a.requires_grad() {
                    let x = a.data();
                    let y = node.data();
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let nf = cols as f64;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = i * cols;
                        let mu: f64 = (0..cols).map(|j| x[r + j]).sum::<f64>() / nf;
                        let var: f64 =
                            (0..cols).map(|j| (x[r + j] - mu).powi(2)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gm: f64 = (0..cols).map(|j| g[r + j]).sum::<f64>() / nf;
                        let gym: f64 = (0..cols).map(|j| g[r + j] * y[r + j]).sum::<f64>() / nf;
                        for j in 0..cols {
                            da[r + j] = inv * (g[r + j] - gm - y[r + j] * gym);
                        }
                    }
                    drop(x);
                    drop(y);
                    a.accumulate_grad(&da);
                }
            }
            Op::Gelu(a) => {
                if a.requires_grad() {
                    let x = a.data();
                    let da: Vec<f64> = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    drop(x);
                    a.accumulate_grad(&da);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let x = a.data();
                    let da: Vec<f64> = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    drop(x);
                    a.accumulate_grad(&da);
                }
            }
            Op::MaxAxis(a, winners) | Op::SegmentMaxRows(a, winners) => {
                if a.requires_grad() {
                    let mut da = vec![0.0; a.len()];
                    for (slot, &src) in winners.iter().enumerate() {
                        da[src] += g[slot];
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::MeanAxis(a, axis) => {
                if a.requires_grad() {
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; rows * cols];
                    if *axis == 0 {
                        let inv = 1.0 / rows as f64;
                        for i in 0..rows {
                            for j in 0..cols {
                                da[i * cols + j] = g[j] * inv;
                            }
                        }
                    } else {
                        let inv = 1.0 / cols as f64;
                        for i in 0..rows {
                            for j in 0..cols {
                                da[i * cols + j] = g[i] * inv;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::L2NormRows(a) => {
                if a.requires_grad() {
                    let x = a.data();
                    let y = node.data();
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let denom = y[i].max(1e-12);
                        for j in 0..cols {
                            da[i * cols + j] = g[i] * x[i * cols + j] / denom;
                        }
                    }
                    drop(x);
                    drop(y);
                    a.accumulate_grad(&da);
                }
            }
            Op::L2NormalizeRows(a, eps) => {
                if a.requires_grad() {
                    let x = a.data();
                    let (rows, cols) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = i * cols;
                        let norm: f64 =
                            (0..cols).map(|j| x[r + j] * x[r + j]).sum::<f64>().sqrt();
                        let s = norm + eps;
                        let dot: f64 = (0..cols).map(|j| g[r + j] * x[r + j]).sum();
                        for j in 0..cols {
                            da[r + j] = g[r + j] / s;
                            if norm > 1e-300 {
                                da[r + j] -= x[r + j] * dot / (norm * s * s);
                            }
                        }
                    }
                    drop(x);
                    a.accumulate_grad(&da);
                }
            }
            Op::Ln(a) => {
                if a.requires_grad() {
                    let x = a.data();
                    let da: Vec<f64> = x.iter().zip(g).map(|(&x, &g)| g / x).collect();
                    drop(x);
                    a.accumulate_grad(&da);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let y = node.data();
                    let da: Vec<f64> = y.iter().zip(g).map(|(&y, &g)| g * y).collect();
                    drop(y);
                    a.accumulate_grad(&da);
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![g[0]; a.len()]);
                }
            }
            Op::Mean(a) => {
                if a.requires_grad() {
                    let v = g[0] / a.len() as f64;
                    a.accumulate_grad(&vec![v; a.len()]);
                }
            }
            Op::TakeDiag(a) => {
                if a.requires_grad() {
                    let n = a.shape()[0];
                    let mut da = vec![0.0; n * n];
                    for i in 0..n {
                        da[i * n + i] = g[i];
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Chamfer {
                pred,
                target,
                nearest_of_pred,
                nearest_of_target,
            } => {
                let g0 = g[0];
                let p = pred.data();
                let t = target.data();
                let m = pred.shape()[0];
                let n = target.shape()[0];
                if pred.requires_grad() {
                    let mut dp = vec![0.0; p.len()];
                    for (i, &j) in nearest_of_pred.iter().enumerate() {
                        for c in 0..3 {
                            dp[i * 3 + c] += g0 * 2.0 / m as f64 * (p[i * 3 + c] - t[j * 3 + c]);
                        }
                    }
                    for (j, &i) in nearest_of_target.iter().enumerate() {
                        for c in 0..3 {
                            dp[i * 3 + c] += g0 * 2.0 / n as f64 * (p[i * 3 + c] - t[j * 3 + c]);
                        }
                    }
                    pred.accumulate_grad(&dp);
                }
                if target.requires_grad() {
                    let mut dt = vec![0.0; t.len()];
                    for (i, &j) in nearest_of_pred.iter().enumerate() {
                        for c in 0..3 {
                            dt[j * 3 + c] += g0 * 2.0 / m as f64 * (t[j * 3 + c] - p[i * 3 + c]);
                        }
                    }
                    for (j, &i) in nearest_of_target.iter().enumerate() {
                        for c in 0..3 {
                            dt[j * 3 + c] += g0 * 2.0 / n as f64 * (t[j * 3 + c] - p[i * 3 + c]);
                        }
                    }
                    drop(p);
                    drop(t);
                    target.accumulate_grad(&dt);
                }
            }
        }
    }
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn node(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
    let requires = op.parents().iter().any(|p| p.requires_grad());
    Tensor::new_node(shape, data, Some(op), requires)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(node(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(node(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(node(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        node(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        node(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(other, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip != 0.0 {
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        drop(a);
        drop(b);
        Ok(node(vec![m, n], out, Op::Matmul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = require_2d(self, "transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(node(vec![n, m], out, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(node(shape, self.value(), Op::Reshape(self.clone())))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let (_, cols) = require_2d(&parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = require_2d(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data());
        }
        Ok(node(vec![rows, cols], data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let (rows, _) = require_2d(&parts[0], "concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (r, c) = require_2d(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut col0 = 0;
        for p in parts {
            let c = p.shape()[1];
            let pv = p.data();
            for i in 0..rows {
                data[i * cols + col0..i * cols + col0 + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        Ok(node(vec![rows, cols], data, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        let data = self.data()[start * cols..end * cols].to_vec();
        Ok(node(vec![end - start, cols], data, Op::SliceRows(self.clone(), start)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} out of range for {cols} cols"
            )));
        }
        let w = end - start;
        let a = self.data();
        let mut data = vec![0.0; rows * w];
        for i in 0..rows {
            data[i * w..(i + 1) * w].copy_from_slice(&a[i * cols + start..i * cols + end]);
        }
        drop(a);
        Ok(node(vec![rows, w], data, Op::SliceCols(self.clone(), start)))
    }

    /// Rows of `self` picked by index; duplicate indices accumulate gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "gather_rows")?;
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("gather_rows index {i} out of range")));
            }
        }
        let a = self.data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&a[i * cols..(i + 1) * cols]);
        }
        drop(a);
        Ok(node(
            vec![indices.len(), cols],
            data,
            Op::GatherRows(self.clone(), indices.to_vec()),
        ))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "add_rowvec")?;
        if v.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let a = self.data();
        let vv = v.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = a[i * cols + j] + vv[j];
            }
        }
        drop(a);
        drop(vv);
        Ok(node(vec![rows, cols], data, Op::AddRowVec(self.clone(), v.clone())))
    }

    /// Numerically stable softmax along each row.
    pub fn row_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "row_softmax")?;
        let a = self.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols;
            let m = a[r..r + cols].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..cols {
                let e = (a[r + j] - m).exp();
                data[r + j] = e;
                s += e;
            }
            for j in 0..cols {
                data[r + j] /= s;
            }
        }
        drop(a);
        Ok(node(vec![rows, cols], data, Op::RowSoftmax(self.clone())))
    }

    /// Numerically stable log-softmax along each row.
    pub fn row_log_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "row_log_softmax")?;
        let a = self.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols;
            let m = a[r..r + cols].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = a[r..r + cols]
                .iter()
                .map(|x| (x - m).exp())
                .sum::<f64>()
                .ln()
                + m;
            for j in 0..cols {
                data[r + j] = a[r + j] - lse;
            }
        }
        drop(a);
        Ok(node(vec![rows, cols], data, Op::RowLogSoftmax(self.clone())))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "layer_norm")?;
        let a = self.data();
        let nf = cols as f64;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols;
            let mu: f64 = a[r..r + cols].iter().sum::<f64>() / nf;
            let var: f64 = a[r..r + cols].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[r + j] = (a[r + j] - mu) * inv;
            }
        }
        drop(a);
        Ok(node(vec![rows, cols], data, Op::LayerNorm(self.clone(), eps)))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        node(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        node(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    /// Maximum over one axis of a matrix; ties resolved to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "max_axis")?;
        if axis > 1 {
            return Err(Error::invalid(format!("max_axis axis {axis} out of range")));
        }
        let a = self.data();
        let (out_len, mut data, mut winners);
        if axis == 0 {
            out_len = cols;
            data = vec![f64::NEG_INFINITY; out_len];
            winners = vec![0usize; out_len];
            for j in 0..cols {
                for i in 0..rows {
                    let v = a[i * cols + j];
                    if v > data[j] {
                        data[j] = v;
                        winners[j] = i * cols + j;
                    }
                }
            }
        } else {
            out_len = rows;
            data = vec![f64::NEG_INFINITY; out_len];
            winners = vec![0usize; out_len];
            for i in 0..rows {
                for j in 0..cols {
                    let v = a[i * cols + j];
                    if v > data[i] {
                        data[i] = v;
                        winners[i] = i * cols + j;
                    }
                }
            }
        }
        drop(a);
        Ok(node(vec![out_len], data, Op::MaxAxis(self.clone(), winners)))
    }

    /// Max over consecutive blocks of `segment` rows: `(s*segment, n) -> (s, n)`.
    pub fn segment_max_rows(&self, segment: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "segment_max_rows")?;
        if segment == 0 || rows % segment != 0 {
            return Err(Error::invalid(format!(
                "segment {segment} does not divide {rows} rows"
            )));
        }
        let segs = rows / segment;
        let a = self.data();
        let mut data = vec![f64::NEG_INFINITY; segs * cols];
        let mut winners = vec![0usize; segs * cols];
        for s in 0..segs {
            for i in 0..segment {
                let row = s * segment + i;
                for j in 0..cols {
                    let v = a[row * cols + j];
                    if v > data[s * cols + j] {
                        data[s * cols + j] = v;
                        winners[s * cols + j] = row * cols + j;
                    }
                }
            }
        }
        drop(a);
        Ok(node(vec![segs, cols], data, Op::SegmentMaxRows(self.clone(), winners)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "mean_axis")?;
        if axis > 1 {
            return Err(Error::invalid(format!("mean_axis axis {axis} out of range")));
        }
        let a = self.data();
        let data = if axis == 0 {
            (0..cols)
                .map(|j| (0..rows).map(|i| a[i * cols + j]).sum::<f64>() / rows as f64)
                .collect::<Vec<f64>>()
        } else {
            (0..rows)
                .map(|i| a[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64)
                .collect::<Vec<f64>>()
        };
        drop(a);
        let out_len = data.len();
        Ok(node(vec![out_len], data, Op::MeanAxis(self.clone(), axis)))
    }

    /// Euclidean norm of each row: `(m, n) -> (m)`.
    pub fn l2_norm_rows(&self) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "l2_norm_rows")?;
        let a = self.data();
        let data: Vec<f64> = (0..rows)
            .map(|i| a[i * cols..(i + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        drop(a);
        Ok(node(vec![rows], data, Op::L2NormRows(self.clone())))
    }

    /// Rows scaled to unit norm; `eps` keeps zero rows finite.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "l2_normalize_rows")?;
        let a = self.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols;
            let norm: f64 = a[r..r + cols].iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = norm + eps;
            for j in 0..cols {
                data[r + j] = a[r + j] / s;
            }
        }
        drop(a);
        Ok(node(vec![rows, cols], data, Op::L2NormalizeRows(self.clone(), eps)))
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x.ln()).collect();
        Ok(node(self.shape().to_vec(), data, Op::Ln(self.clone())))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|x| x.exp()).collect();
        Ok(node(self.shape().to_vec(), data, Op::Exp(self.clone())))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Ok(node(vec![], vec![s], Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s: f64 = self.data().iter().sum::<f64>() / self.len() as f64;
        Ok(node(vec![], vec![s], Op::Mean(self.clone())))
    }

    /// Main diagonal of a square matrix.
    pub fn take_diag(&self) -> Result<Tensor> {
        let (rows, cols) = require_2d(self, "take_diag")?;
        if rows != cols {
            return Err(Error::ShapeMismatch {
                op: "take_diag",
                lhs: self.shape().to_vec(),
                rhs: vec![rows, rows],
            });
        }
        let a = self.data();
        let data: Vec<f64> = (0..rows).map(|i| a[i * cols + i]).collect();
        drop(a);
        Ok(node(vec![rows], data, Op::TakeDiag(self.clone())))
    }

    /// Symmetric mean squared nearest-neighbor distance between `(m, 3)` and
    /// `(n, 3)` point sets.
    pub fn chamfer(&self, target: &Tensor) -> Result<Tensor> {
        let (m, c1) = require_2d(self, "chamfer")?;
        let (n, c2) = require_2d(target, "chamfer")?;
        if c1 != 3 || c2 != 3 {
            return Err(Error::ShapeMismatch {
                op: "chamfer",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if m == 0 || n == 0 {
            return Err(Error::invalid("chamfer of empty point set"));
        }
        let p = self.data();
        let t = target.data();
        let d2 = |i: usize, j: usize| -> f64 {
            let dx = p[i * 3] - t[j * 3];
            let dy = p[i * 3 + 1] - t[j * 3 + 1];
            let dz = p[i * 3 + 2] - t[j * 3 + 2];
            dx * dx + dy * dy + dz * dz
        };
        let mut nearest_of_pred = vec![0usize; m];
        let mut acc_pred = 0.0;
        for i in 0..m {
            let mut best = f64::INFINITY;
            for j in 0..n {
                let d = d2(i, j);
                if d < best {
                    best = d;
                    nearest_of_pred[i] = j;
                }
            }
            acc_pred += best;
        }
        let mut nearest_of_target = vec![0usize; n];
        let mut acc_tgt = 0.0;
        for j in 0..n {
            let mut best = f64::INFINITY;
            for i in 0..m {
                let d = d2(i, j);
                if d < best {
                    best = d;
                    nearest_of_target[j] = i;
                }
            }
            acc_tgt += best;
        }
        drop(p);
        drop(t);
        let value = acc_pred / m as f64 + acc_tgt / n as f64;
        Ok(node(
            vec![],
            vec![value],
            Op::Chamfer {
                pred: self.clone(),
                target: target.clone(),
                nearest_of_pred,
                nearest_of_target,
            },
        ))
    }
}
