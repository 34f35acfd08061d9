//! Forward implementations for every differentiable op.

use super::{Op, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Row-major matrix product: out(m x n) = a(m x k) * b(k x n).
pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pn) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pn;
            }
        }
    }
    out
}

pub(crate) fn transpose_values(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tensor {
    fn zip_elementwise(
        &self,
        other: &Tensor,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(op.name(), self, other));
        }
        let values = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::make(
            op,
            vec![self.clone(), other.clone()],
            values,
            self.shape().to_vec(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, Op::Mul, |a, b| a * b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|&v| -v).collect();
        Tensor::make(Op::Neg, vec![self.clone()], values, self.shape().to_vec())
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let values = self.values().iter().map(|&v| v * s).collect();
        Tensor::make(
            Op::Scale(s),
            vec![self.clone()],
            values,
            self.shape().to_vec(),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let values = self.values().iter().map(|&v| v.max(0.0)).collect();
        Tensor::make(Op::Relu, vec![self.clone()], values, self.shape().to_vec())
    }

    /// Broadcast-add a length-c row vector to every row of a (r x c) matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_r, c) = self.expect_2d("add_row")?;
        if row.shape() != [c] {
            return Err(shape_err("add_row", self, row));
        }
        let rv = row.values();
        let values = self
            .values()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv.iter()).map(|(&a, &b)| a + b))
            .collect();
        Tensor::make(
            Op::AddRow,
            vec![self.clone(), row.clone()],
            values,
            self.shape().to_vec(),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let values = matmul_values(self.values(), other.values(), m, k, n);
        Tensor::make(
            Op::Matmul,
            vec![self.clone(), other.clone()],
            values,
            vec![m, n],
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        let values = transpose_values(self.values(), r, c);
        Tensor::make(Op::Transpose, vec![self.clone()], values, vec![c, r])
    }

    /// Softmax along each row of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("softmax_rows")?;
        let mut values = vec![0.0; r * c];
        for (row, out) in self.values().chunks(c).zip(values.chunks_mut(c)) {
            softmax_row(row, out);
        }
        Tensor::make(Op::SoftmaxRows, vec![self.clone()], values, vec![r, c])
    }

    /// Softmax along the chosen axis (0 = down columns, 1 = along rows).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        match axis {
            1 => self.softmax_rows(),
            0 => self.transpose()?.softmax_rows()?.transpose(),
            _ => Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range"),
            )),
        }
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("log_softmax_rows")?;
        let mut values = vec![0.0; r * c];
        for (row, out) in self.values().chunks(c).zip(values.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o = v - lse;
            }
        }
        Tensor::make(Op::LogSoftmaxRows, vec![self.clone()], values, vec![r, c])
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.expect_2d("layer_norm")?;
        if gamma.shape() != [c] {
            return Err(shape_err("layer_norm", self, gamma));
        }
        if beta.shape() != [c] {
            return Err(shape_err("layer_norm", self, beta));
        }
        let g = gamma.values();
        let b = beta.values();
        let mut values = vec![0.0; r * c];
        for (row, out) in self.values().chunks(c).zip(values.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Tensor::make(
            Op::LayerNorm { eps },
            vec![self.clone(), gamma.clone(), beta.clone()],
            values,
            vec![r, c],
        )
    }

    /// Row-wise l2-normalization. A zero row stays a zero row.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("l2_normalize_rows")?;
        let mut values = vec![0.0; r * c];
        for (row, out) in self.values().chunks(c).zip(values.chunks_mut(c)) {
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    *o = v / norm;
                }
            }
        }
        Tensor::make(Op::L2NormRows, vec![self.clone()], values, vec![r, c])
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.values().iter().sum();
        Tensor::make(Op::SumAll, vec![self.clone()], vec![s], vec![])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let s = self.values().iter().sum::<f64>() / self.numel() as f64;
        Tensor::make(Op::MeanAll, vec![self.clone()], vec![s], vec![])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Tensor::make_shared(
            Op::Reshape,
            vec![self.clone()],
            self.values_arc(),
            shape.to_vec(),
        )
    }

    /// Concatenate 2-D tensors along rows. All inputs must share a column count.
    pub fn cat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("cat_rows", "no tensors to concatenate"));
        }
        let (_, c) = parts[0].expect_2d("cat_rows")?;
        let mut row_splits = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.expect_2d("cat_rows")?;
            if pc != c {
                return Err(shape_err("cat_rows", &parts[0], p));
            }
            row_splits.push(r);
            rows += r;
            values.extend_from_slice(p.values());
        }
        Tensor::make(
            Op::CatRows { row_splits },
            parts.to_vec(),
            values,
            vec![rows, c],
        )
    }

    /// Concatenate 2-D tensors along columns. All inputs must share a row count.
    pub fn cat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("cat_cols", "no tensors to concatenate"));
        }
        let (r, _) = parts[0].expect_2d("cat_cols")?;
        let mut col_splits = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = p.expect_2d("cat_cols")?;
            if pr != r {
                return Err(shape_err("cat_cols", &parts[0], p));
            }
            col_splits.push(pc);
            cols += pc;
        }
        let mut values = vec![0.0; r * cols];
        let mut offset = 0;
        for (p, &pc) in parts.iter().zip(col_splits.iter()) {
            for row in 0..r {
                values[row * cols + offset..row * cols + offset + pc]
                    .copy_from_slice(&p.values()[row * pc..(row + 1) * pc]);
            }
            offset += pc;
        }
        Tensor::make(
            Op::CatCols { col_splits },
            parts.to_vec(),
            values,
            vec![r, cols],
        )
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("narrow_rows")?;
        if start + len > r {
            return Err(Error::invalid(
                "narrow_rows",
                format!("rows {start}..{} out of 0..{r}", start + len),
            ));
        }
        let values = self.values()[start * c..(start + len) * c].to_vec();
        Tensor::make(
            Op::NarrowRows { start },
            vec![self.clone()],
            values,
            vec![len, c],
        )
    }

    /// Running sum down the rows: `out[t]` = sum of rows `0..=t`.
    pub fn cumsum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("cumsum_rows")?;
        let mut values = self.values().to_vec();
        for row in 1..r {
            for col in 0..c {
                values[row * c + col] += values[(row - 1) * c + col];
            }
        }
        Tensor::make(Op::CumsumRows, vec![self.clone()], values, vec![r, c])
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("narrow_cols")?;
        if start + len > c {
            return Err(Error::invalid(
                "narrow_cols",
                format!("cols {start}..{} out of 0..{c}", start + len),
            ));
        }
        let mut values = Vec::with_capacity(r * len);
        for row in 0..r {
            values.extend_from_slice(&self.values()[row * c + start..row * c + start + len]);
        }
        Tensor::make(
            Op::NarrowCols { start },
            vec![self.clone()],
            values,
            vec![r, len],
        )
    }

    /// Gather whole rows of a 2-D table by index (with repetition allowed).
    /// Backward scatter-adds into the table, so it doubles as embedding lookup.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_2d("select_rows")?;
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::invalid(
                    "select_rows",
                    format!("row index {i} out of 0..{r}"),
                ));
            }
            values.extend_from_slice(&self.values()[i * c..(i + 1) * c]);
        }
        Tensor::make(
            Op::SelectRows {
                indices: indices.to_vec(),
            },
            vec![self.clone()],
            values,
            vec![indices.len(), c],
        )
    }

    /// Pick one element per row: `out[r] = self[r, cols[r]]`.
    pub fn gather_per_row(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.expect_2d("gather_per_row")?;
        if cols.len() != r {
            return Err(Error::invalid(
                "gather_per_row",
                format!("{} column indices for {r} rows", cols.len()),
            ));
        }
        let mut values = Vec::with_capacity(r);
        for (row, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::invalid(
                    "gather_per_row",
                    format!("column index {j} out of 0..{c}"),
                ));
            }
            values.push(self.values()[row * c + j]);
        }
        Tensor::make(
            Op::GatherPerRow {
                cols: cols.to_vec(),
            },
            vec![self.clone()],
            values,
            vec![r],
        )
    }

    /// KL divergence KL(target || self) where `target` is a constant
    /// distribution over the same support. Entries with target mass zero
    /// contribute nothing (0 log 0 = 0). Requires positive predicted mass
    /// wherever the target has mass.
    pub fn kl_against(&self, target: &[f64]) -> Result<Tensor> {
        if target.len() != self.numel() {
            return Err(Error::invalid(
                "kl_against",
                format!(
                    "target of {} entries against {} values",
                    target.len(),
                    self.numel()
                ),
            ));
        }
        let mut kl = 0.0;
        for (&t, &p) in target.iter().zip(self.values().iter()) {
            if t > 0.0 {
                kl += t * (t.ln() - p.ln());
            }
        }
        Tensor::make(
            Op::KlAgainst {
                target: target.to_vec(),
            },
            vec![self.clone()],
            vec![kl],
            vec![],
        )
    }

    /// Straight-through estimator: forward takes the quantized values
    /// bit-for-bit, backward routes the gradient to the continuous latent.
    pub fn straight_through(latent: &Tensor, quantized: &Tensor) -> Result<Tensor> {
        if latent.shape() != quantized.shape() {
            return Err(shape_err("straight_through", latent, quantized));
        }
        Tensor::make_shared(
            Op::StraightThrough,
            vec![latent.clone()],
            quantized.values_arc(),
            quantized.shape().to_vec(),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.sub(other)?;
        d.mul(&d)?.mean_all()
    }

    /// Sum of squared differences over all elements.
    pub fn sum_squared_diff(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.sub(other)?;
        d.mul(&d)?.sum_all()
    }
}

/// Scaled dot-product attention: softmax(q kᵀ / sqrt(d)) v.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = q.expect_2d("attention")?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
    scores.softmax_rows()?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn matmul_error_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        match &err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(*op, "matmul");
                assert_eq!(lhs, &[2, 3]);
                assert_eq!(rhs, &[4, 2]);
            }
            other => panic!("expected shape mismatch, got {other}"),
        }
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::zeros(&[1, 2]);
        let y = x.softmax_rows().unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.5, 3.25], &[3]).unwrap();
        assert_eq!(x.mse(&x).unwrap().scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn l2_normalize_keeps_zero_rows() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert_eq!(&y.values()[..2], &[0.0, 0.0]);
        assert_eq!(&y.values()[2..], &[0.6, 0.8]);
    }

    #[test]
    fn cumsum_rows_prefix_sums() {
        let x = Tensor::from_vec(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], &[3, 2]).unwrap();
        let y = x.cumsum_rows().unwrap();
        assert_eq!(y.values(), &[1.0, 10.0, 3.0, 30.0, 6.0, 60.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let x = Tensor::from_vec(values, &[3, 4]).unwrap();
            let y = x.softmax_rows().unwrap();
            for row in y.values().chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalized_nonzero_rows_have_unit_norm(
            values in proptest::collection::vec(0.1f64..5.0, 12),
            signs in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            let signed: Vec<f64> = values
                .iter()
                .zip(signs.iter())
                .map(|(&v, &s)| if s { v } else { -v })
                .collect();
            let x = Tensor::from_vec(signed, &[4, 3]).unwrap();
            let y = x.l2_normalize_rows().unwrap();
            for row in y.values().chunks(3) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
