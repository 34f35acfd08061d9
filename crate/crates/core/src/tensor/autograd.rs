//! Reverse-mode differentiation over the recorded graph.
//!
//! Backward walks the graph in reverse topological order, visiting each node
//! exactly once and accumulating vector-Jacobian products into a map keyed by
//! node id. The traversal order is a pure function of the graph, so repeated
//! runs produce bitwise-identical gradients.

use std::collections::{HashMap, HashSet};

use super::ops::{matmul_values, transpose_values};
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Gradients produced by [`Tensor::backward`], queryable by tensor.
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if any flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of the loss with respect to `t`, zeros if none flowed.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        }
    }
}

fn topological_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Iterative post-order: (node, next parent index to visit).
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    if root.requires_grad() {
        visited.insert(root.id());
        stack.push((root.clone(), 0));
    }
    while let Some((node, idx)) = stack.pop() {
        let parents = &node.node().parents;
        if idx < parents.len() {
            stack.push((node.clone(), idx + 1));
            let parent = &parents[idx];
            if parent.requires_grad() && !visited.contains(&parent.id()) {
                visited.insert(parent.id());
                stack.push((parent.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

impl Tensor {
    /// Backpropagate from a scalar loss, returning gradients for every
    /// node that requires them.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }
        let order = topological_order(self);
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let g = match grads.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            backward_one(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, target: &Tensor, delta: &[f64]) {
    if !target.requires_grad() {
        return;
    }
    match grads.get_mut(&target.id()) {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta.iter()) {
                *e += d;
            }
        }
        None => {
            grads.insert(target.id(), delta.to_vec());
        }
    }
}

fn backward_one(node: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    let inner = node.node();
    let parents = &inner.parents;
    match &inner.op {
        Op::Leaf => {}
        Op::Add => {
            accumulate(grads, &parents[0], g);
            accumulate(grads, &parents[1], g);
        }
        Op::Sub => {
            accumulate(grads, &parents[0], g);
            let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
            accumulate(grads, &parents[1], &neg);
        }
        Op::Mul => {
            let a = parents[0].values();
            let b = parents[1].values();
            let da: Vec<f64> = g.iter().zip(b.iter()).map(|(&gi, &bi)| gi * bi).collect();
            let db: Vec<f64> = g.iter().zip(a.iter()).map(|(&gi, &ai)| gi * ai).collect();
            accumulate(grads, &parents[0], &da);
            accumulate(grads, &parents[1], &db);
        }
        Op::Neg => {
            let d: Vec<f64> = g.iter().map(|&v| -v).collect();
            accumulate(grads, &parents[0], &d);
        }
        Op::Relu => {
            let x = parents[0].values();
            let d: Vec<f64> = g
                .iter()
                .zip(x.iter())
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            accumulate(grads, &parents[0], &d);
        }
        Op::Scale(s) => {
            let d: Vec<f64> = g.iter().map(|&v| v * s).collect();
            accumulate(grads, &parents[0], &d);
        }
        Op::AddRow => {
            accumulate(grads, &parents[0], g);
            let c = parents[1].numel();
            let mut db = vec![0.0; c];
            for chunk in g.chunks(c) {
                for (d, &gi) in db.iter_mut().zip(chunk.iter()) {
                    *d += gi;
                }
            }
            accumulate(grads, &parents[1], &db);
        }
        Op::Matmul => {
            let (m, k) = (parents[0].rows(), parents[0].cols());
            let n = parents[1].cols();
            // dA = G Bᵀ, dB = Aᵀ G
            let bt = transpose_values(parents[1].values(), k, n);
            let da = matmul_values(g, &bt, m, n, k);
            accumulate(grads, &parents[0], &da);
            let at = transpose_values(parents[0].values(), m, k);
            let db = matmul_values(&at, g, k, m, n);
            accumulate(grads, &parents[1], &db);
        }
        Op::Transpose => {
            let (r, c) = (parents[0].rows(), parents[0].cols());
            let d = transpose_values(g, c, r);
            accumulate(grads, &parents[0], &d);
        }
        Op::SoftmaxRows => {
            let c = node.cols();
            let y = node.values();
            let mut d = vec![0.0; y.len()];
            for ((y_row, g_row), d_row) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                let dot: f64 = y_row
                    .iter()
                    .zip(g_row.iter())
                    .map(|(&yi, &gi)| yi * gi)
                    .sum();
                for j in 0..c {
                    d_row[j] = y_row[j] * (g_row[j] - dot);
                }
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::LogSoftmaxRows => {
            let c = node.cols();
            let y = node.values();
            let mut d = vec![0.0; y.len()];
            for ((y_row, g_row), d_row) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                let gsum: f64 = g_row.iter().sum();
                for j in 0..c {
                    d_row[j] = g_row[j] - y_row[j].exp() * gsum;
                }
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::LayerNorm { eps } => {
            let x = parents[0].values();
            let gamma = parents[1].values();
            let c = node.cols();
            let cf = c as f64;
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (x_row, (g_row, dx_row)) in x.chunks(c).zip(g.chunks(c).zip(dx.chunks_mut(c))) {
                let mean = x_row.iter().sum::<f64>() / cf;
                let var = x_row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / cf;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = x_row.iter().map(|&v| (v - mean) * inv).collect();
                let h: Vec<f64> = g_row
                    .iter()
                    .zip(gamma.iter())
                    .map(|(&gi, &gm)| gi * gm)
                    .collect();
                let h_mean = h.iter().sum::<f64>() / cf;
                let hx_mean = h
                    .iter()
                    .zip(xhat.iter())
                    .map(|(&hi, &xi)| hi * xi)
                    .sum::<f64>()
                    / cf;
                for j in 0..c {
                    dx_row[j] = inv * (h[j] - h_mean - xhat[j] * hx_mean);
                    dgamma[j] += g_row[j] * xhat[j];
                    dbeta[j] += g_row[j];
                }
            }
            accumulate(grads, &parents[0], &dx);
            accumulate(grads, &parents[1], &dgamma);
            accumulate(grads, &parents[2], &dbeta);
        }
        Op::L2NormRows => {
            let x = parents[0].values();
            let y = node.values();
            let c = node.cols();
            let mut d = vec![0.0; x.len()];
            for ((x_row, y_row), (g_row, d_row)) in x
                .chunks(c)
                .zip(y.chunks(c))
                .zip(g.chunks(c).zip(d.chunks_mut(c)))
            {
                let norm = x_row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let dot: f64 = y_row
                        .iter()
                        .zip(g_row.iter())
                        .map(|(&yi, &gi)| yi * gi)
                        .sum();
                    for j in 0..c {
                        d_row[j] = (g_row[j] - y_row[j] * dot) / norm;
                    }
                }
                // Zero rows keep a zero gradient.
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::SumAll => {
            let d = vec![g[0]; parents[0].numel()];
            accumulate(grads, &parents[0], &d);
        }
        Op::MeanAll => {
            let n = parents[0].numel() as f64;
            let d = vec![g[0] / n; parents[0].numel()];
            accumulate(grads, &parents[0], &d);
        }
        Op::Reshape => {
            accumulate(grads, &parents[0], g);
        }
        Op::CatRows { row_splits } => {
            let c = node.cols();
            let mut offset = 0;
            for (parent, &r) in parents.iter().zip(row_splits.iter()) {
                accumulate(grads, parent, &g[offset..offset + r * c]);
                offset += r * c;
            }
        }
        Op::CatCols { col_splits } => {
            let rows = node.rows();
            let total_cols = node.cols();
            let mut offset = 0;
            for (parent, &pc) in parents.iter().zip(col_splits.iter()) {
                let mut d = vec![0.0; rows * pc];
                for row in 0..rows {
                    d[row * pc..(row + 1) * pc].copy_from_slice(
                        &g[row * total_cols + offset..row * total_cols + offset + pc],
                    );
                }
                accumulate(grads, parent, &d);
                offset += pc;
            }
        }
        Op::CumsumRows => {
            // d x[s] = sum of upstream gradients for rows s..end.
            let c = node.cols();
            let mut d = g.to_vec();
            for row in (0..node.rows().saturating_sub(1)).rev() {
                for col in 0..c {
                    d[row * c + col] += d[(row + 1) * c + col];
                }
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::NarrowRows { start } => {
            let (pr, c) = (parents[0].rows(), parents[0].cols());
            let mut d = vec![0.0; pr * c];
            d[start * c..start * c + g.len()].copy_from_slice(g);
            accumulate(grads, &parents[0], &d);
        }
        Op::NarrowCols { start } => {
            let (pr, pc) = (parents[0].rows(), parents[0].cols());
            let len = node.cols();
            let mut d = vec![0.0; pr * pc];
            for row in 0..pr {
                d[row * pc + start..row * pc + start + len]
                    .copy_from_slice(&g[row * len..(row + 1) * len]);
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::SelectRows { indices } => {
            let (pr, c) = (parents[0].rows(), parents[0].cols());
            let mut d = vec![0.0; pr * c];
            for (out_row, &i) in indices.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g[out_row * c + j];
                }
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::GatherPerRow { cols } => {
            let (pr, pc) = (parents[0].rows(), parents[0].cols());
            let mut d = vec![0.0; pr * pc];
            for (row, &j) in cols.iter().enumerate() {
                d[row * pc + j] += g[row];
            }
            accumulate(grads, &parents[0], &d);
        }
        Op::KlAgainst { target } => {
            let p = parents[0].values();
            let scale = g[0];
            let d: Vec<f64> = target
                .iter()
                .zip(p.iter())
                .map(|(&t, &pi)| if t > 0.0 { -scale * t / pi } else { 0.0 })
                .collect();
            accumulate(grads, &parents[0], &d);
        }
        Op::StraightThrough => {
            accumulate(grads, &parents[0], g);
        }
    }
}
