//! Reverse-mode gradient propagation over [`Value`] graphs.
//!
//! The graph is walked once with an iterative depth-first pass to produce a
//! topological order, then gradients flow from the scalar loss back to every
//! named parameter leaf. Per-node gradient buffers are dropped as soon as the
//! node has pushed its contribution upstream, which keeps peak memory at
//! "live frontier" size instead of whole-graph size.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::kernels::{mm_nn, mm_nt, mm_tn};
use crate::tensor::value::{
    gather_head, gelu_grad, rope_rotate_buffer, scatter_head, Op, Value,
};
use crate::tensor::{probe_finite, Tensor};

/// Gradient of a scalar loss with respect to every named parameter leaf in
/// its graph, keyed by parameter name.
pub fn backward_named(loss: &Value) -> Result<BTreeMap<String, Tensor>> {
    if loss.data().numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, got {:?}", loss.shape()),
        ));
    }

    let order = topo_order(loss);

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    // Reverse topological order: every node's gradient is complete before the
    // node itself is expanded.
    for v in order.iter().rev() {
        let g = match grads.remove(&v.id()) {
            Some(g) => g,
            None => continue, // no path from the loss to this node
        };
        match &v.inner.op {
            Op::Leaf { param_name } => {
                if let Some(name) = param_name {
                    named
                        .entry(name.clone())
                        .and_modify(|acc| {
                            for (a, b) in acc.iter_mut().zip(g.iter()) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                    shapes
                        .entry(name.clone())
                        .or_insert_with(|| v.shape().to_vec());
                }
            }
            op => propagate(v, op, &g, &mut grads),
        }
    }

    let mut out = BTreeMap::new();
    for (name, buf) in named {
        if !probe_finite(&buf) {
            return Err(Error::NonFinite { op: "backward" });
        }
        let shape = shapes.remove(&name).expect("shape recorded with grad");
        out.insert(name, Tensor::from_parts(shape, buf));
    }
    Ok(out)
}

/// Postorder DFS (iterative) so dependencies precede their consumers.
fn topo_order(root: &Value) -> Vec<Value> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Value, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((v, child_idx)) = stack.pop() {
        let inputs = op_inputs(&v.inner.op);
        if child_idx < inputs.len() {
            let child = inputs[child_idx].clone();
            stack.push((v, child_idx + 1));
            if visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(v);
        }
    }
    order
}

fn op_inputs(op: &Op) -> Vec<&Value> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add { lhs, rhs } | Op::Sub { lhs, rhs } | Op::Mul { lhs, rhs } => vec![lhs, rhs],
        Op::Scale { input, .. }
        | Op::AddScalar { input }
        | Op::Transpose { input }
        | Op::Reshape { input }
        | Op::SliceRows { input, .. }
        | Op::Gather { input, .. }
        | Op::SoftmaxLastDim { input }
        | Op::LayerNormLastDim { input, .. }
        | Op::Gelu { input }
        | Op::SumAll { input }
        | Op::Rope { input, .. } => vec![input],
        Op::Matmul { lhs, rhs } => vec![lhs, rhs],
        Op::ConcatRows { parts } => parts.iter().collect(),
        Op::Attention { q, k, v, .. } | Op::WindowAttention { q, k, v, .. } => vec![q, k, v],
    }
}

fn accum(grads: &mut HashMap<u64, Vec<f64>>, target: &Value, contribution: Vec<f64>) {
    grads
        .entry(target.id())
        .and_modify(|acc| {
            for (a, b) in acc.iter_mut().zip(contribution.iter()) {
                *a += b;
            }
        })
        .or_insert(contribution);
}

/// Fold a full-shaped gradient down onto a suffix-broadcast operand.
fn reduce_suffix(g: &[f64], suffix_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; suffix_len];
    for (i, &v) in g.iter().enumerate() {
        out[i % suffix_len] += v;
    }
    out
}

fn propagate(v: &Value, op: &Op, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::Leaf { .. } => unreachable!("leaves handled by the caller"),
        Op::Add { lhs, rhs } => {
            accum(grads, lhs, g.to_vec());
            if rhs.data().numel() == g.len() {
                accum(grads, rhs, g.to_vec());
            } else {
                accum(grads, rhs, reduce_suffix(g, rhs.data().numel()));
            }
        }
        Op::Sub { lhs, rhs } => {
            accum(grads, lhs, g.to_vec());
            accum(grads, rhs, g.iter().map(|x| -x).collect());
        }
        Op::Mul { lhs, rhs } => {
            let (ld, rd) = (lhs.data().data(), rhs.data().data());
            let rlen = rd.len().max(1);
            let dl: Vec<f64> = g.iter().enumerate().map(|(i, &gv)| gv * rd[i % rlen]).collect();
            accum(grads, lhs, dl);
            let prod: Vec<f64> = g.iter().zip(ld.iter()).map(|(&gv, &lv)| gv * lv).collect();
            if rd.len() == g.len() {
                accum(grads, rhs, prod);
            } else {
                accum(grads, rhs, reduce_suffix(&prod, rd.len()));
            }
        }
        Op::Scale { input, factor } => {
            accum(grads, input, g.iter().map(|x| x * factor).collect());
        }
        Op::AddScalar { input } => {
            accum(grads, input, g.to_vec());
        }
        Op::Matmul { lhs, rhs } => {
            let (a, b) = (lhs.data(), rhs.data());
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![0.0; m * k];
            mm_nt(g, b.data(), m, n, k, &mut da);
            accum(grads, lhs, da);
            let mut db = vec![0.0; k * n];
            mm_tn(a.data(), g, k, m, n, &mut db);
            accum(grads, rhs, db);
        }
        Op::Transpose { input } => {
            // v = inputᵀ, so d(input) = gᵀ with v's dims.
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let mut di = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    di[j * m + i] = g[i * n + j];
                }
            }
            accum(grads, input, di);
        }
        Op::Reshape { input } => {
            accum(grads, input, g.to_vec());
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = p.data().numel();
                accum(grads, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::SliceRows { input, start } => {
            let w = input.shape()[1];
            let mut di = vec![0.0; input.data().numel()];
            di[start * w..start * w + g.len()].copy_from_slice(g);
            accum(grads, input, di);
        }
        Op::Gather { input, index } => {
            let mut di = vec![0.0; input.data().numel()];
            for (i, &ix) in index.iter().enumerate() {
                di[ix] += g[i];
            }
            accum(grads, input, di);
        }
        Op::SoftmaxLastDim { input } => {
            let y = v.data().data();
            let n = v.shape()[1];
            let mut di = vec![0.0; y.len()];
            for r in 0..v.shape()[0] {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    di[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            accum(grads, input, di);
        }
        Op::LayerNormLastDim { input, eps } => {
            let x = input.data().data();
            let y = v.data().data();
            let n = v.shape()[1];
            let nf = n as f64;
            let mut di = vec![0.0; x.len()];
            for r in 0..v.shape()[0] {
                let xr = &x[r * n..(r + 1) * n];
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mean = xr.iter().sum::<f64>() / nf;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps).sqrt();
                let gmean = gr.iter().sum::<f64>() / nf;
                let gymean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                for j in 0..n {
                    di[r * n + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                }
            }
            accum(grads, input, di);
        }
        Op::Gelu { input } => {
            let x = input.data().data();
            let di: Vec<f64> = g
                .iter()
                .zip(x.iter())
                .map(|(&gv, &xv)| gv * gelu_grad(xv))
                .collect();
            accum(grads, input, di);
        }
        Op::SumAll { input } => {
            accum(grads, input, vec![g[0]; input.data().numel()]);
        }
        Op::Rope {
            input,
            tables,
            heads,
        } => {
            // Rotations are orthogonal: the adjoint is the inverse rotation.
            let mut di = g.to_vec();
            rope_rotate_buffer(&mut di, v.shape()[0], *heads, tables, true);
            accum(grads, input, di);
        }
        Op::Attention {
            q,
            k,
            v: val,
            heads,
            scale,
            weights,
        } => {
            let heads = *heads;
            let (q_rows, width) = (q.shape()[0], q.shape()[1]);
            let k_rows = k.shape()[0];
            let head_dim = width / heads;
            let wdat = weights.data();

            let mut dq = vec![0.0; q_rows * width];
            let mut dk = vec![0.0; k_rows * width];
            let mut dv = vec![0.0; k_rows * width];

            let mut qh = vec![0.0; q_rows * head_dim];
            let mut kh = vec![0.0; k_rows * head_dim];
            let mut vh = vec![0.0; k_rows * head_dim];
            let mut goh = vec![0.0; q_rows * head_dim];
            let mut dvh = vec![0.0; k_rows * head_dim];
            let mut dw = vec![0.0; q_rows * k_rows];
            let mut dqh = vec![0.0; q_rows * head_dim];
            let mut dkh = vec![0.0; k_rows * head_dim];

            for h in 0..heads {
                let col0 = h * head_dim;
                gather_head(q.data().data(), &mut qh, q_rows, width, col0, head_dim);
                gather_head(k.data().data(), &mut kh, k_rows, width, col0, head_dim);
                gather_head(val.data().data(), &mut vh, k_rows, width, col0, head_dim);
                gather_head(g, &mut goh, q_rows, width, col0, head_dim);
                let w = &wdat[h * q_rows * k_rows..(h + 1) * q_rows * k_rows];

                // dV = Wᵀ·dOut
                mm_tn(w, &goh, k_rows, q_rows, head_dim, &mut dvh);
                // dW = dOut·Vᵀ
                mm_nt(&goh, &vh, q_rows, head_dim, k_rows, &mut dw);
                // Softmax backward per row, then fold in the score scale.
                for r in 0..q_rows {
                    let wr = &w[r * k_rows..(r + 1) * k_rows];
                    let dwr = &mut dw[r * k_rows..(r + 1) * k_rows];
                    let dot: f64 = wr.iter().zip(dwr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..k_rows {
                        dwr[j] = wr[j] * (dwr[j] - dot) * scale;
                    }
                }
                // dQ = dS·K, dK = dSᵀ·Q
                mm_nn(&dw, &kh, q_rows, k_rows, head_dim, &mut dqh);
                mm_tn(&dw, &qh, k_rows, q_rows, head_dim, &mut dkh);

                scatter_head(&dqh, &mut dq, q_rows, width, col0, head_dim);
                scatter_head(&dkh, &mut dk, k_rows, width, col0, head_dim);
                scatter_head(&dvh, &mut dv, k_rows, width, col0, head_dim);
            }
            accum(grads, q, dq);
            accum(grads, k, dk);
            accum(grads, val, dv);
        }
        Op::WindowAttention {
            q,
            k,
            v: val,
            heads,
            scale,
            rows_per_window,
            slots,
            weights,
        } => {
            let heads = *heads;
            let (q_rows, width) = (q.shape()[0], q.shape()[1]);
            let k_rows = k.shape()[0];
            let head_dim = width / heads;
            let windows = q_rows / rows_per_window;
            let wdat = weights.data();
            let (p, s) = (*rows_per_window, *slots);

            let mut dq = vec![0.0; q_rows * width];
            let mut dk = vec![0.0; k_rows * width];
            let mut dv = vec![0.0; k_rows * width];

            let mut qh = vec![0.0; q_rows * head_dim];
            let mut kh = vec![0.0; k_rows * head_dim];
            let mut vh = vec![0.0; k_rows * head_dim];
            let mut goh = vec![0.0; q_rows * head_dim];
            let mut dqh = vec![0.0; q_rows * head_dim];
            let mut dkh = vec![0.0; k_rows * head_dim];
            let mut dvh = vec![0.0; k_rows * head_dim];
            let mut dw = vec![0.0; p * s];

            for h in 0..heads {
                let col0 = h * head_dim;
                gather_head(q.data().data(), &mut qh, q_rows, width, col0, head_dim);
                gather_head(k.data().data(), &mut kh, k_rows, width, col0, head_dim);
                gather_head(val.data().data(), &mut vh, k_rows, width, col0, head_dim);
                gather_head(g, &mut goh, q_rows, width, col0, head_dim);
                dqh.fill(0.0);
                dkh.fill(0.0);
                dvh.fill(0.0);
                for wdx in 0..windows {
                    let qb = &qh[wdx * p * head_dim..(wdx + 1) * p * head_dim];
                    let kb = &kh[wdx * s * head_dim..(wdx + 1) * s * head_dim];
                    let vb = &vh[wdx * s * head_dim..(wdx + 1) * s * head_dim];
                    let gob = &goh[wdx * p * head_dim..(wdx + 1) * p * head_dim];
                    let wb_start = h * q_rows * s + wdx * p * s;
                    let wb = &wdat[wb_start..wb_start + p * s];

                    let dvb = &mut dvh[wdx * s * head_dim..(wdx + 1) * s * head_dim];
                    mm_tn(wb, gob, s, p, head_dim, dvb);

                    mm_nt(gob, vb, p, head_dim, s, &mut dw);
                    for r in 0..p {
                        let wr = &wb[r * s..(r + 1) * s];
                        let dwr = &mut dw[r * s..(r + 1) * s];
                        let dot: f64 = wr.iter().zip(dwr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..s {
                            dwr[j] = wr[j] * (dwr[j] - dot) * scale;
                        }
                    }
                    let dqb = &mut dqh[wdx * p * head_dim..(wdx + 1) * p * head_dim];
                    mm_nn(&dw, kb, p, s, head_dim, dqb);
                    let dkb = &mut dkh[wdx * s * head_dim..(wdx + 1) * s * head_dim];
                    mm_tn(&dw, qb, s, p, head_dim, dkb);
                }
                scatter_head(&dqh, &mut dq, q_rows, width, col0, head_dim);
                scatter_head(&dkh, &mut dk, k_rows, width, col0, head_dim);
                scatter_head(&dvh, &mut dv, k_rows, width, col0, head_dim);
            }
            accum(grads, q, dq);
            accum(grads, k, dk);
            accum(grads, val, dv);
        }
    }
}
