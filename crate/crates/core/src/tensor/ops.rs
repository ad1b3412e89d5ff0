//! Forward definitions of the differentiable primitives.
//!
//! Broadcasting for `add`, `sub` and `mul` follows trailing-aligned rules
//! where a dimension of size 1 stretches. `matmul` contracts the last axis of
//! the left operand with the second-to-last of the right operand; a rank-2
//! operand broadcasts against the batch dimensions of the other, otherwise
//! batch dimensions must match exactly.

use super::kernels::{self, Layout};
use super::{invalid, numel, Op, Result, Tensor, TensorError};

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let out_shape =
        kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a, b))?;
    let (x, y) = (a.data(), b.data());
    let data = match (
        kernels::layout(a.shape(), &out_shape),
        kernels::layout(b.shape(), &out_shape),
    ) {
        (Layout::Same, Layout::Same) => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
        (Layout::Same, Layout::Suffix(n)) => x
            .chunks_exact(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(y).map(|(&p, &q)| f(p, q)))
            .collect(),
        (Layout::Suffix(n), Layout::Same) => y
            .chunks_exact(n.max(1))
            .flat_map(|chunk| x.iter().zip(chunk).map(|(&p, &q)| f(p, q)))
            .collect(),
        _ => {
            let ia = kernels::broadcast_index_map(a.shape(), &out_shape);
            let ib = kernels::broadcast_index_map(b.shape(), &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(x[i], y[j])).collect()
        }
    };
    Ok((out_shape, data))
}

fn unary(a: &Tensor, op: Op, f: impl Fn(f32) -> f32) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    Tensor::build(a.shape().to_vec(), data, a.requires_grad(), op)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch("matmul", a, b));
        }
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", a, b));
        }
        let a_batch = &a.shape()[..a.rank() - 2];
        let b_batch = &b.shape()[..b.rank() - 2];
        let requires_grad = a.requires_grad() || b.requires_grad();
        let (out_shape, data) = if b_batch.is_empty() {
            let rows = numel(a_batch) * m;
            let mut out = vec![0.0; rows * n];
            kernels::gemm_nn(a.data(), b.data(), &mut out, rows, k, n);
            let mut shape = a_batch.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else if a_batch.is_empty() || a_batch == b_batch {
            let batch = numel(b_batch);
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let a_off = if a_batch.is_empty() { 0 } else { i * m * k };
                kernels::gemm_nn(
                    &a.data()[a_off..a_off + m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = b_batch.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else {
            return Err(mismatch("matmul", a, b));
        };
        Ok(Tensor::build(
            out_shape,
            data,
            requires_grad,
            Op::MatMul(a.clone(), b.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = binary("add", self, other, |p, q| p + q)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::build(
            shape,
            data,
            rg,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = binary("sub", self, other, |p, q| p - q)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::build(
            shape,
            data,
            rg,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = binary("mul", self, other, |p, q| p * q)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::build(
            shape,
            data,
            rg,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        unary(self, Op::Scale(self.clone(), s), |v| v * s)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no operands"))?;
        if axis >= first.rank() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {:?}", first.shape()),
            ));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", first, p));
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(Tensor::requires_grad);
        Ok(Tensor::build(
            shape,
            data,
            rg,
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(invalid(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, dim, inner) = axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(
                &self.data()[base + start * inner..base + (start + len) * inner],
            );
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::build(
            shape,
            data,
            self.requires_grad(),
            Op::Slice {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("transpose", format!("rank {r} < 2")));
        }
        let (rows, cols) = (self.shape()[r - 2], self.shape()[r - 1]);
        let mut data = Vec::with_capacity(self.len());
        for block in self.data().chunks_exact((rows * cols).max(1)) {
            data.extend(kernels::transpose2d(block, rows, cols));
        }
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::build(
            shape,
            data,
            self.requires_grad(),
            Op::TransposeLast(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::build(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, Op::Relu(self.clone()), |v| v.max(0.0))
    }

    pub fn square(&self) -> Tensor {
        unary(self, Op::Square(self.clone()), |v| v * v)
    }

    /// Square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Tensor {
        unary(self, Op::Sqrt(self.clone()), f32::sqrt)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, Op::Exp(self.clone()), f32::exp)
    }

    /// Softmax over the last axis of `self + mask`. The mask is a constant
    /// that broadcasts as a suffix of `self` (typically `[L, L]`).
    pub fn softmax_masked(&self, mask: Option<&Tensor>) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("softmax", "rank 0 input"))?;
        let logits = match mask {
            Some(m) => {
                if m.requires_grad() {
                    return Err(invalid("softmax", "mask must be a constant"));
                }
                let (_, data) = binary("softmax", self, m, |p, q| p + q)?;
                if data.len() != self.len() {
                    return Err(mismatch("softmax", self, m));
                }
                data
            }
            None => self.data().to_vec(),
        };
        let mut out = logits;
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let inv = 1.0 / total;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        Ok(Tensor::build(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::Softmax(self.clone()),
        ))
    }

    /// Layer normalization over the last axis followed by `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("layernorm", "rank 0 input"))?;
        if d == 0 {
            return Err(invalid("layernorm", "empty normalized axis"));
        }
        if gain.shape() != [d] {
            return Err(mismatch("layernorm", self, gain));
        }
        if bias.shape() != [d] {
            return Err(mismatch("layernorm", self, bias));
        }
        let rows = self.len() / d;
        let mut normalized = Vec::with_capacity(self.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks_exact(d) {
            let mean = kernels::sum_f64(row) / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            inv_std.push(r as f32);
            normalized.extend(row.iter().map(|&v| ((v as f64 - mean) * r) as f32));
        }
        let data = normalized
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gain.data())
                    .zip(bias.data())
                    .map(|((&x, &g), &b)| x * g + b)
            })
            .collect();
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(Tensor::build(
            self.shape().to_vec(),
            data,
            rg,
            Op::LayerNorm {
                input: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            },
        ))
    }

    /// Rows of a `[N, D]` table, in the order of `indices`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(invalid(
                "gather",
                format!("table must be rank 2, got {:?}", self.shape()),
            ));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(invalid(
                    "gather",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::build(
            vec![indices.len(), d],
            data,
            self.requires_grad(),
            Op::Gather {
                table: self.clone(),
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let v = (kernels::sum_f64(self.data()) / self.len() as f64) as f32;
        Ok(Tensor::build(
            Vec::new(),
            vec![v],
            self.requires_grad(),
            Op::Mean(self.clone()),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let v = kernels::sum_f64(self.data()) as f32;
        Tensor::build(
            Vec::new(),
            vec![v],
            self.requires_grad(),
            Op::Sum(self.clone()),
        )
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| invalid("sum_last", "rank 0 input"))?;
        let data = if n == 0 {
            vec![0.0; numel(&self.shape()[..self.rank() - 1])]
        } else {
            self.data()
                .chunks_exact(n)
                .map(|row| kernels::sum_f64(row) as f32)
                .collect()
        };
        Ok(Tensor::build(
            self.shape()[..self.rank() - 1].to_vec(),
            data,
            self.requires_grad(),
            Op::SumLast(self.clone()),
        ))
    }
}
