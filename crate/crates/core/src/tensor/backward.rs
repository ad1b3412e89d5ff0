use std::collections::{HashMap, HashSet};

use super::kernels::{self, gemm_nn, gemm_tn, transpose2d};
use super::{numel, Op, Result, Tensor, TensorError, TensorId};

/// Gradients of a scalar with respect to every `requires_grad` leaf that
/// contributed to it.
#[derive(Debug, Default, Clone)]
pub struct GradMap {
    grads: HashMap<TensorId, Vec<f32>>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Concat(parts, _) => parts.iter().collect(),
        Op::LayerNorm {
            input, gain, bias, ..
        } => vec![input, gain, bias],
        Op::Gather { table, .. } => vec![table],
        Op::Scale(a, _)
        | Op::Slice { input: a, .. }
        | Op::TransposeLast(a)
        | Op::Reshape(a)
        | Op::Relu(a)
        | Op::Softmax(a)
        | Op::Mean(a)
        | Op::Sum(a)
        | Op::SumLast(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Exp(a) => vec![a],
    }
}

/// Post-order over the differentiable part of the record.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in parents(&t.0.op) {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn accumulate(store: &mut HashMap<TensorId, Vec<f32>>, t: &Tensor, g: Vec<f32>) {
    if !t.requires_grad() {
        return;
    }
    match store.get_mut(&t.id()) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            store.insert(t.id(), g);
        }
    }
}

impl Tensor {
    /// Reverse-mode gradients of this scalar with respect to all leaves that
    /// require them. The record is never consumed, so calling this again
    /// recomputes identical gradients.
    pub fn backward(&self) -> Result<GradMap> {
        if self.len() != 1 || !self.shape().is_empty() {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let mut grads = GradMap::default();
        if !self.requires_grad() {
            return Ok(grads);
        }
        let order = topo_order(self);
        let mut store: HashMap<TensorId, Vec<f32>> = HashMap::new();
        store.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = store.remove(&node.id()) else {
                continue;
            };
            if node.is_leaf() {
                grads.grads.insert(node.id(), g);
                continue;
            }
            propagate(node, &g, &mut store);
        }
        Ok(grads)
    }
}

fn propagate(node: &Tensor, g: &[f32], store: &mut HashMap<TensorId, Vec<f32>>) {
    let out_shape = node.shape();
    match &node.0.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => matmul_backward(a, b, g, store),
        Op::Add(a, b) => {
            if a.requires_grad() {
                accumulate(store, a, kernels::reduce_to(g, out_shape, a.shape()));
            }
            if b.requires_grad() {
                accumulate(store, b, kernels::reduce_to(g, out_shape, b.shape()));
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                accumulate(store, a, kernels::reduce_to(g, out_shape, a.shape()));
            }
            if b.requires_grad() {
                let mut gb = kernels::reduce_to(g, out_shape, b.shape());
                gb.iter_mut().for_each(|v| *v = -*v);
                accumulate(store, b, gb);
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(a, b), (b, a)] {
                if !this.requires_grad() {
                    continue;
                }
                let other_full: Vec<f32> = if other.shape() == out_shape {
                    other.data().to_vec()
                } else {
                    kernels::broadcast_index_map(other.shape(), out_shape)
                        .into_iter()
                        .map(|j| other.data()[j])
                        .collect()
                };
                let prod: Vec<f32> = g.iter().zip(&other_full).map(|(x, y)| x * y).collect();
                accumulate(
                    store,
                    this,
                    kernels::reduce_to(&prod, out_shape, this.shape()),
                );
            }
        }
        Op::Scale(a, s) => accumulate(store, a, g.iter().map(|v| v * s).collect()),
        Op::Concat(parts, axis) => {
            let inner = numel(&out_shape[axis + 1..]);
            let outer = numel(&out_shape[..*axis]);
            let row = out_shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let chunk = p.shape()[*axis] * inner;
                if p.requires_grad() {
                    let mut gp = Vec::with_capacity(p.len());
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    accumulate(store, p, gp);
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let inner = numel(&input.shape()[axis + 1..]);
            let outer = numel(&input.shape()[..*axis]);
            let dim = input.shape()[*axis];
            let len = out_shape[*axis];
            let mut gi = vec![0.0; input.len()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                gi[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(store, input, gi);
        }
        Op::TransposeLast(a) => {
            let r = out_shape.len();
            let (rows, cols) = (out_shape[r - 2], out_shape[r - 1]);
            let mut ga = Vec::with_capacity(g.len());
            for block in g.chunks_exact((rows * cols).max(1)) {
                ga.extend(transpose2d(block, rows, cols));
            }
            accumulate(store, a, ga);
        }
        Op::Reshape(a) => accumulate(store, a, g.to_vec()),
        Op::Relu(a) => accumulate(
            store,
            a,
            g.iter()
                .zip(a.data())
                .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                .collect(),
        ),
        Op::Softmax(a) => {
            let n = *out_shape.last().unwrap_or(&1);
            let y = node.data();
            let mut ga = Vec::with_capacity(g.len());
            for (gy, yy) in g.chunks_exact(n.max(1)).zip(y.chunks_exact(n.max(1))) {
                let dot: f32 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                ga.extend(gy.iter().zip(yy).map(|(&p, &q)| q * (p - dot)));
            }
            accumulate(store, a, ga);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = *out_shape.last().unwrap();
            if input.requires_grad() {
                let mut gx = Vec::with_capacity(g.len());
                for ((gy, xh), &r) in g
                    .chunks_exact(d)
                    .zip(normalized.chunks_exact(d))
                    .zip(inv_std)
                {
                    let gxh: Vec<f32> = gy.iter().zip(gain.data()).map(|(p, q)| p * q).collect();
                    let mean_g = kernels::sum_f64(&gxh) / d as f64;
                    let mean_gx = gxh
                        .iter()
                        .zip(xh)
                        .map(|(&p, &q)| p as f64 * q as f64)
                        .sum::<f64>()
                        / d as f64;
                    gx.extend(gxh.iter().zip(xh).map(|(&p, &q)| {
                        (r as f64 * (p as f64 - mean_g - q as f64 * mean_gx)) as f32
                    }));
                }
                accumulate(store, input, gx);
            }
            if gain.requires_grad() {
                let mut gg = vec![0.0f32; d];
                for (gy, xh) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                    for ((acc, &p), &q) in gg.iter_mut().zip(gy).zip(xh) {
                        *acc += p * q;
                    }
                }
                accumulate(store, gain, gg);
            }
            if bias.requires_grad() {
                accumulate(store, bias, kernels::reduce_to(g, out_shape, &[d]));
            }
        }
        Op::Gather { table, indices } => {
            let d = table.shape()[1];
            let mut gt = vec![0.0; table.len()];
            for (row, &i) in g.chunks_exact(d.max(1)).zip(indices) {
                for (acc, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(store, table, gt);
        }
        Op::Mean(a) => {
            let v = g[0] / a.len() as f32;
            accumulate(store, a, vec![v; a.len()]);
        }
        Op::Sum(a) => accumulate(store, a, vec![g[0]; a.len()]),
        Op::SumLast(a) => {
            let n = *a.shape().last().unwrap();
            let mut ga = Vec::with_capacity(a.len());
            for &v in g {
                ga.extend(std::iter::repeat_n(v, n));
            }
            accumulate(store, a, ga);
        }
        Op::Square(a) => accumulate(
            store,
            a,
            g.iter()
                .zip(a.data())
                .map(|(&gv, &x)| 2.0 * x * gv)
                .collect(),
        ),
        Op::Sqrt(a) => accumulate(
            store,
            a,
            g.iter()
                .zip(node.data())
                .map(|(&gv, &y)| if y > 0.0 { gv * 0.5 / y } else { 0.0 })
                .collect(),
        ),
        Op::Exp(a) => accumulate(
            store,
            a,
            g.iter().zip(node.data()).map(|(&gv, &y)| gv * y).collect(),
        ),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f32], store: &mut HashMap<TensorId, Vec<f32>>) {
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let n = b.shape()[b.rank() - 1];
    let a_batched = a.rank() > 2;
    let b_batched = b.rank() > 2;
    if !b_batched {
        // a: [rows, k], b: [k, n]
        let rows = a.len() / k.max(1);
        if a.requires_grad() {
            let bt = transpose2d(b.data(), k, n);
            let mut ga = vec![0.0; a.len()];
            gemm_nn(g, &bt, &mut ga, rows, n, k);
            accumulate(store, a, ga);
        }
        if b.requires_grad() {
            let mut gb = vec![0.0; b.len()];
            gemm_tn(a.data(), g, &mut gb, rows, k, n);
            accumulate(store, b, gb);
        }
        return;
    }
    let batch = b.len() / (k * n).max(1);
    if a.requires_grad() {
        let mut ga = vec![0.0; a.len()];
        for i in 0..batch {
            let bt = transpose2d(&b.data()[i * k * n..(i + 1) * k * n], k, n);
            let a_off = if a_batched { i * m * k } else { 0 };
            gemm_nn(
                &g[i * m * n..(i + 1) * m * n],
                &bt,
                &mut ga[a_off..a_off + m * k],
                m,
                n,
                k,
            );
        }
        accumulate(store, a, ga);
    }
    if b.requires_grad() {
        let mut gb = vec![0.0; b.len()];
        for i in 0..batch {
            let a_off = if a_batched { i * m * k } else { 0 };
            gemm_tn(
                &a.data()[a_off..a_off + m * k],
                &g[i * m * n..(i + 1) * m * n],
                &mut gb[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        accumulate(store, b, gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let grads = x.square().sum().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_are_absent() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::constant(vec![3.0, 4.0], &[2]).unwrap();
        let grads = x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[3.0, 4.0]);
        assert!(!grads.contains(&c));
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            x.square().backward(),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let x = Tensor::param(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let loss = x.exp().mul(&x).unwrap().sum();
        let g1 = loss.backward().unwrap().get(&x).unwrap().to_vec();
        let g2 = loss.backward().unwrap().get(&x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let y = x.add(&x).unwrap().sum();
        assert_eq!(y.backward().unwrap().get(&x).unwrap(), &[2.0]);
    }
}
