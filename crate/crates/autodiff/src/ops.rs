//! Forward definitions of the primitive operations.

use std::sync::Arc;

use crate::kernels::{self, Conv1dGeom};
use crate::tape::{Axis, Op};
use crate::{Error, Result, Tensor, Var};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::Index { index, len })
    } else {
        Ok(())
    }
}

impl Var {
    fn same_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value().map(f);
        self.tape.push(out, op, name)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        self.tape.push(zip_with(&a, &b, |x, y| x + y), Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        self.tape.push(zip_with(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        self.tape.push(zip_with(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id), "mul")
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Op::Neg(self.id), "neg", |x| -x)
    }

    pub fn scale(&self, factor: f64) -> Result<Var> {
        self.unary(Op::Scale(self.id, factor), "scale", |x| x * factor)
    }

    /// Adds a constant tensor of the same shape (masks, fixed offsets).
    pub fn add_const(&self, c: &Tensor) -> Result<Var> {
        let a = self.value();
        same_shape("add_const", &a, c)?;
        self.tape.push(zip_with(&a, c, |x, y| x + y), Op::AddConst(self.id), "add_const")
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(&self, c: Arc<Tensor>) -> Result<Var> {
        let a = self.value();
        same_shape("mul_const", &a, &c)?;
        let out = zip_with(&a, &c, |x, y| x * y);
        self.tape.push(out, Op::MulConst(self.id, c), "mul_const")
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.bmm(other, 1, false, false)
    }

    /// Batched product of `batch` stacked matrices with optional transposes.
    ///
    /// `self` is viewed as `[batch, rows / batch, cols]` in its stored
    /// layout, likewise `other`; the result is `[batch * m, n]`.
    pub fn bmm(&self, other: &Var, batch: usize, ta: bool, tb: bool) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if batch == 0 || a.rows() % batch != 0 || b.rows() % batch != 0 {
            return Err(Error::Shape(format!(
                "batch {batch} does not divide {:?} / {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (ar, ac) = (a.rows() / batch, a.cols());
        let (br, bc) = (b.rows() / batch, b.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            )));
        }
        let data = kernels::bmm(a.data(), ar, ac, b.data(), br, bc, batch, ta, tb);
        let out = Tensor::new(&[batch * m, n], data)?;
        self.tape.push(out, Op::MatMul { a: self.id, b: other.id, batch, ta, tb }, "matmul")
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-D, got {:?}", a.shape())));
        }
        let (r, c) = (a.rows(), a.cols());
        let out = Tensor::new(&[c, r], kernels::transpose(a.data(), r, c))?;
        self.tape.push(out, Op::Transpose(self.id), "transpose")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), "reshape")
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let axis = match axis {
            0 => Axis::Rows,
            1 => Axis::Cols,
            _ => return Err(Error::Invalid(format!("concat axis {axis}"))),
        };
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.shape().len() != 2 {
                return Err(Error::Shape(format!("concat expects 2-D, got {:?}", v.shape())));
            }
        }
        let out = match axis {
            Axis::Rows => {
                let c = values[0].cols();
                if values.iter().any(|v| v.cols() != c) {
                    return Err(Error::Shape("concat rows: column counts differ".into()));
                }
                let rows = values.iter().map(|v| v.rows()).sum::<usize>();
                let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(&[rows, c], data)?
            }
            Axis::Cols => {
                let r = values[0].rows();
                if values.iter().any(|v| v.rows() != r) {
                    return Err(Error::Shape("concat cols: row counts differ".into()));
                }
                let c: usize = values.iter().map(|v| v.cols()).sum();
                let mut data = Vec::with_capacity(r * c);
                for row in 0..r {
                    for v in &values {
                        data.extend_from_slice(v.row(row));
                    }
                }
                Tensor::new(&[r, c], data)?
            }
        };
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push(out, Op::Concat { parts: ids, axis }, "concat")
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        self.slice(Axis::Rows, start, len)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        self.slice(Axis::Cols, start, len)
    }

    pub(crate) fn slice(&self, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let extent = if axis == Axis::Rows { r } else { c };
        if a.shape().len() != 2 || start + len > extent {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of {:?}",
                start + len,
                a.shape()
            )));
        }
        let out = match axis {
            Axis::Rows => Tensor::new(&[len, c], a.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&a.row(row)[start..start + len]);
                }
                Tensor::new(&[r, len], data)?
            }
        };
        self.tape.push(out, Op::Slice { a: self.id, axis, start }, "slice")
    }

    /// Embeds `self` into zeros of extent `total` along `axis` at `start`;
    /// the adjoint of slicing.
    pub(crate) fn place(&self, axis: Axis, start: usize, total: usize) -> Result<Var> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let out = match axis {
            Axis::Rows => {
                let mut data = vec![0.0; total * c];
                data[start * c..(start + r) * c].copy_from_slice(a.data());
                Tensor::new(&[total, c], data)?
            }
            Axis::Cols => {
                let mut data = vec![0.0; r * total];
                for row in 0..r {
                    data[row * total + start..row * total + start + c].copy_from_slice(a.row(row));
                }
                Tensor::new(&[r, total], data)?
            }
        };
        self.tape.push(out, Op::Place { a: self.id, axis, start }, "place")
    }

    /// Row lookup: `out[i] = self[idx[i]]` (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            check_index(i, a.rows())?;
            data.extend_from_slice(a.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let idx = Arc::new(idx.to_vec());
        self.tape.push(out, Op::GatherRows { a: self.id, idx }, "gather_rows")
    }

    /// `out[idx[i]] += self[i]` into `n_rows` zero rows.
    pub fn scatter_add_rows(&self, idx: &[usize], n_rows: usize) -> Result<Var> {
        let a = self.value();
        let c = a.cols();
        if idx.len() != a.rows() {
            return Err(Error::Shape(format!("{} indices for {} rows", idx.len(), a.rows())));
        }
        let mut data = vec![0.0; n_rows * c];
        for (src, &i) in idx.iter().enumerate() {
            check_index(i, n_rows)?;
            for (d, v) in data[i * c..(i + 1) * c].iter_mut().zip(a.row(src)) {
                *d += v;
            }
        }
        let out = Tensor::new(&[n_rows, c], data)?;
        let idx = Arc::new(idx.to_vec());
        self.tape.push(out, Op::ScatterAddRows { a: self.id, idx }, "scatter_add_rows")
    }

    /// Picks `self[r, idx[r]]` from every row into an `[r, 1]` column.
    pub fn pick_cols(&self, idx: &[usize]) -> Result<Var> {
        let a = self.value();
        if idx.len() != a.rows() {
            return Err(Error::Shape(format!("{} indices for {} rows", idx.len(), a.rows())));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            check_index(i, a.cols())?;
            data.push(a.at(r, i));
        }
        let out = Tensor::new(&[idx.len(), 1], data)?;
        let idx = Arc::new(idx.to_vec());
        self.tape.push(out, Op::PickCols { a: self.id, idx }, "pick_cols")
    }

    pub(crate) fn place_picks(&self, idx: Arc<Vec<usize>>, cols: usize) -> Result<Var> {
        let a = self.value();
        let mut data = vec![0.0; idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            data[r * cols + i] = a.data()[r];
        }
        let out = Tensor::new(&[idx.len(), cols], data)?;
        self.tape.push(out, Op::PlacePicks { a: self.id, idx }, "place_picks")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::SumAll(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().item()?;
        self.tape.push(Tensor::full(shape, v), Op::BroadcastScalar(self.id), "broadcast_scalar")
    }

    /// Sum along columns: `[r, c] -> [r, 1]`.
    pub fn row_sum(&self) -> Result<Var> {
        let a = self.value();
        let data = a.data().chunks(a.cols()).map(|row| row.iter().sum()).collect();
        let out = Tensor::new(&[a.rows(), 1], data)?;
        self.tape.push(out, Op::RowSum(self.id), "row_sum")
    }

    pub fn row_mean(&self) -> Result<Var> {
        let c = self.value().cols() as f64;
        self.row_sum()?.scale(1.0 / c)
    }

    /// `[r, 1] -> [r, cols]` by repeating each row's value.
    pub fn broadcast_cols(&self, cols: usize) -> Result<Var> {
        let a = self.value();
        if a.cols() != 1 {
            return Err(Error::Shape(format!("broadcast_cols expects [r, 1], got {:?}", a.shape())));
        }
        let data = a.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        let out = Tensor::new(&[a.rows(), cols], data)?;
        self.tape.push(out, Op::BroadcastCols(self.id), "broadcast_cols")
    }

    /// Sum along rows: `[r, c] -> [1, c]`.
    pub fn col_sum(&self) -> Result<Var> {
        let a = self.value();
        let c = a.cols();
        let mut data = vec![0.0; c];
        for row in a.data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let out = Tensor::new(&[1, c], data)?;
        self.tape.push(out, Op::ColSum(self.id), "col_sum")
    }

    /// Repeats a single row (`[c]` or `[1, c]`) `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Var> {
        let a = self.value();
        if a.rows() != 1 {
            return Err(Error::Shape(format!("broadcast_rows expects one row, got {:?}", a.shape())));
        }
        let c = a.cols();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(a.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        self.tape.push(out, Op::BroadcastRows(self.id), "broadcast_rows")
    }

    /// Adds a bias row to every row.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let rows = self.value().rows();
        self.add(&bias.broadcast_rows(rows)?)
    }

    /// Stacks `times` copies of a 2-D tensor vertically.
    pub fn tile_rows(&self, times: usize) -> Result<Var> {
        let a = self.value();
        let mut data = Vec::with_capacity(times * a.numel());
        for _ in 0..times {
            data.extend_from_slice(a.data());
        }
        let out = Tensor::new(&[times * a.rows(), a.cols()], data)?;
        self.tape.push(out, Op::TileRows { a: self.id, times }, "tile_rows")
    }

    pub(crate) fn untile_sum(&self, times: usize) -> Result<Var> {
        let a = self.value();
        let block = a.numel() / times;
        let mut data = vec![0.0; block];
        for chunk in a.data().chunks(block) {
            for (d, v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        let out = Tensor::new(&[a.rows() / times, a.cols()], data)?;
        self.tape.push(out, Op::UntileSum { a: self.id, times }, "untile_sum")
    }

    /// Views the data as `[b, m, n, z]` and swaps the middle axes, returning
    /// a 2-D `[b * n * m, z]` tensor. Used to split and merge attention heads.
    pub fn swap_mid(&self, b: usize, m: usize, n: usize, z: usize) -> Result<Var> {
        let a = self.value();
        if a.numel() != b * m * n * z {
            return Err(Error::Shape(format!("swap_mid {b}x{m}x{n}x{z} on {:?}", a.shape())));
        }
        let out = Tensor::new(&[b * n * m, z], kernels::swap_mid(a.data(), b, m, n, z))?;
        self.tape.push(out, Op::SwapMid { a: self.id, dims: [b, m, n, z] }, "swap_mid")
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(Op::Log(self.id), "log", f64::ln)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(Op::Tanh(self.id), "tanh", f64::tanh)
    }

    pub fn powf(&self, p: f64) -> Result<Var> {
        self.unary(Op::Pow(self.id, p), "pow", |x| x.powf(p))
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let a = self.value();
        let out = Tensor::new(a.shape(), kernels::softmax_rows(a.data(), a.cols()))?;
        self.tape.push(out, Op::Softmax(self.id), "softmax")
    }

    /// Softmax along `axis` of a 2-D tensor.
    pub fn softmax_axis(&self, axis: usize) -> Result<Var> {
        let ndim = self.value().shape().len();
        match (axis, ndim) {
            (1, 2) | (0, 1) => self.softmax(),
            (0, 2) => self.transpose()?.softmax()?.transpose(),
            _ => Err(Error::Invalid(format!("softmax axis {axis} for {ndim}-D tensor"))),
        }
    }

    pub fn log_softmax(&self) -> Result<Var> {
        let a = self.value();
        let out = Tensor::new(a.shape(), kernels::log_softmax_rows(a.data(), a.cols()))?;
        self.tape.push(out, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// im2col view of `batch` stacked `[t_in, channels]` sequences.
    pub fn unfold(&self, geom: Conv1dGeom) -> Result<Var> {
        let a = self.value();
        if a.rows() != geom.batch * geom.t_in || a.cols() != geom.channels {
            return Err(Error::Shape(format!("unfold {geom:?} on {:?}", a.shape())));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.t_in + 2 * geom.pad < geom.kernel {
            return Err(Error::Invalid(format!("conv window {geom:?}")));
        }
        let out = Tensor::new(
            &[geom.batch * geom.t_out(), geom.kernel * geom.channels],
            kernels::unfold(a.data(), geom),
        )?;
        self.tape.push(out, Op::Unfold { a: self.id, geom }, "unfold")
    }

    pub(crate) fn fold(&self, geom: Conv1dGeom) -> Result<Var> {
        let out = Tensor::new(
            &[geom.batch * geom.t_in, geom.channels],
            kernels::fold(self.value().data(), geom),
        )?;
        self.tape.push(out, Op::Fold { a: self.id, geom }, "fold")
    }
}
