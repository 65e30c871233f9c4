//! Computation-graph nodes for reverse-mode differentiation.
//!
//! A [`Value`] owns a result [`Tensor`] plus the operation (and input nodes)
//! that produced it. Graphs are DAGs of `Arc`-shared nodes; building one node
//! eagerly computes its forward result, so a `Value` is always materialized.
//! Gradients are produced afterwards by [`super::autograd::backward_named`].
//!
//! The op set is deliberately small and fused where the sequence length makes
//! naive composition expensive: attention (scores, softmax and the value
//! contraction in one node) and rotary application are single ops so the graph
//! stays shallow on long token sequences.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{mm_nn, mm_nt};
use crate::tensor::{probe_finite, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Graph node: immutable result tensor plus provenance.
#[derive(Clone)]
pub struct Value {
    pub(crate) inner: Arc<ValueInner>,
}

pub(crate) struct ValueInner {
    pub(crate) id: u64,
    pub(crate) data: Tensor,
    pub(crate) op: Op,
}

/// Rotary tables for one sequence: per row, one cosine and one sine per
/// rotated pair within a head. Shared by every head of that sequence.
#[derive(Clone)]
pub struct RopeTables {
    pub(crate) cos: Arc<Vec<f64>>,
    pub(crate) sin: Arc<Vec<f64>>,
    /// Pairs per head (= head_dim / 2); tables are `[rows, pairs]`.
    pub(crate) pairs: usize,
}

pub(crate) enum Op {
    Leaf { param_name: Option<String> },
    Add { lhs: Value, rhs: Value },
    Sub { lhs: Value, rhs: Value },
    Mul { lhs: Value, rhs: Value },
    Scale { input: Value, factor: f64 },
    AddScalar { input: Value },
    Matmul { lhs: Value, rhs: Value },
    Transpose { input: Value },
    Reshape { input: Value },
    ConcatRows { parts: Vec<Value> },
    SliceRows { input: Value, start: usize },
    /// Free-form index map: `out.flat[i] = in.flat[index[i]]`. Backward is
    /// scatter-add, so repeated indices (embedding lookups) work.
    Gather { input: Value, index: Arc<Vec<usize>> },
    SoftmaxLastDim { input: Value },
    LayerNormLastDim { input: Value, eps: f64 },
    Gelu { input: Value },
    SumAll { input: Value },
    /// Pairwise rotation of head channels by precomputed angle tables.
    Rope { input: Value, tables: RopeTables, heads: usize },
    /// Fused multi-head attention. `weights` keeps the post-softmax scores
    /// (`[heads * q_rows, k_rows]`) for the backward pass and for probes.
    Attention {
        q: Value,
        k: Value,
        v: Value,
        heads: usize,
        scale: f64,
        weights: Tensor,
    },
    /// Fused attention where query block j (rows `j*rows_per_window ..`) may
    /// only see key/value block j (rows `j*slots ..`); everything outside the
    /// matching block is structurally zero. `weights` is
    /// `[heads * q_rows, slots]`.
    WindowAttention {
        q: Value,
        k: Value,
        v: Value,
        heads: usize,
        scale: f64,
        rows_per_window: usize,
        slots: usize,
        weights: Tensor,
    },
}

fn node(data: Tensor, op: Op) -> Value {
    Value {
        inner: Arc::new(ValueInner {
            id: fresh_id(),
            data,
            op,
        }),
    }
}

fn finite(op: &'static str, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
    if probe_finite(&data) {
        Ok(Tensor::from_parts(shape, data))
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Value {
    /// Constant input (no gradient is reported for it).
    pub fn constant(t: Tensor) -> Value {
        node(t, Op::Leaf { param_name: None })
    }

    /// Named parameter leaf; gradients are keyed by this name.
    pub fn param(name: impl Into<String>, t: Tensor) -> Value {
        node(
            t,
            Op::Leaf {
                param_name: Some(name.into()),
            },
        )
    }

    pub fn data(&self) -> &Tensor {
        &self.inner.data
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.data.shape()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar payload of a `[1]`-shaped value.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data().numel() != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("expected 1 element, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.data().data()[0])
    }

    /// Post-softmax attention weights if this node is a fused attention op.
    ///
    /// Plain attention returns `[heads * q_rows, k_rows]`; window attention
    /// returns `[heads * q_rows, slots]` (the structural zeros outside each
    /// window are not materialized).
    pub fn attention_weights(&self) -> Option<&Tensor> {
        match &self.inner.op {
            Op::Attention { weights, .. } | Op::WindowAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Elementwise sum. `rhs` must have the same shape, or a shape that is a
    /// suffix of `self`'s (it is then repeated across leading dims).
    pub fn add(&self, rhs: &Value) -> Result<Value> {
        broadcast_zip("add", self, rhs, |a, b| a + b)
    }

    /// Elementwise difference of identically shaped values.
    pub fn sub(&self, rhs: &Value) -> Result<Value> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data: Vec<f64> = self
            .data()
            .data()
            .iter()
            .zip(rhs.data().data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let t = finite("sub", data, self.shape().to_vec())?;
        Ok(node(
            t,
            Op::Sub {
                lhs: self.clone(),
                rhs: rhs.clone(),
            },
        ))
    }

    /// Elementwise product, with the same suffix-broadcast rule as [`add`](Self::add).
    pub fn mul(&self, rhs: &Value) -> Result<Value> {
        broadcast_zip("mul", self, rhs, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Value> {
        let data: Vec<f64> = self.data().data().iter().map(|v| v * factor).collect();
        let t = finite("scale", data, self.shape().to_vec())?;
        Ok(node(
            t,
            Op::Scale {
                input: self.clone(),
                factor,
            },
        ))
    }

    pub fn add_scalar(&self, addend: f64) -> Result<Value> {
        let data: Vec<f64> = self.data().data().iter().map(|v| v + addend).collect();
        let t = finite("add_scalar", data, self.shape().to_vec())?;
        Ok(node(
            t,
            Op::AddScalar {
                input: self.clone(),
            },
        ))
    }

    /// 2-D matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Value) -> Result<Value> {
        let (a, b) = (self.data(), rhs.data());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(a.data(), b.data(), m, k, n, &mut out);
        let t = finite("matmul", out, vec![m, n])?;
        Ok(node(
            t,
            Op::Matmul {
                lhs: self.clone(),
                rhs: rhs.clone(),
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Value> {
        let a = self.data();
        if a.shape().len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected 2-D, got {:?}", a.shape()),
            ));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(node(
            Tensor::from_parts(vec![n, m], out),
            Op::Transpose {
                input: self.clone(),
            },
        ))
    }

    /// Same elements under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        let t = self.data().reshape(shape)?;
        Ok(node(
            t,
            Op::Reshape {
                input: self.clone(),
            },
        ))
    }

    /// Stack 2-D blocks with identical row length on top of each other.
    pub fn concat_rows(parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let row_len = parts[0].data().row_len();
        let mut rows = 0;
        for p in parts {
            if p.shape().len() != 2 || p.data().row_len() != row_len {
                return Err(Error::shape(
                    "concat_rows",
                    format!("part shape {:?}, want 2-D with row length {}", p.shape(), row_len),
                ));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * row_len);
        for p in parts {
            out.extend_from_slice(p.data().data());
        }
        Ok(node(
            Tensor::from_parts(vec![rows, row_len], out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous row range `[start, start+len)` of a 2-D value.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Value> {
        let a = self.data();
        if a.shape().len() != 2 || start + len > a.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, a.shape()),
            ));
        }
        let w = a.shape()[1];
        let out = a.data()[start * w..(start + len) * w].to_vec();
        Ok(node(
            Tensor::from_parts(vec![len, w], out),
            Op::SliceRows {
                input: self.clone(),
                start,
            },
        ))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `out_shape`.
    ///
    /// This is the engine behind embedding lookup, column extraction and the
    /// patch/unpatch rearrangements — anything that is a pure index map.
    pub fn gather(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Value> {
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape(
                "gather",
                format!("index len {} vs out shape {:?}", index.len(), out_shape),
            ));
        }
        let src = self.data().data();
        let mut out = Vec::with_capacity(index.len());
        for &ix in index.iter() {
            let v = src.get(ix).copied().ok_or_else(|| {
                Error::invalid("gather", format!("index {} out of range {}", ix, src.len()))
            })?;
            out.push(v);
        }
        Ok(node(
            Tensor::from_parts(out_shape.to_vec(), out),
            Op::Gather {
                input: self.clone(),
                index,
            },
        ))
    }

    /// Row-wise softmax over the last dim of a 2-D value (max-subtracted).
    pub fn softmax_lastdim(&self) -> Result<Value> {
        let a = self.data();
        if a.shape().len() != 2 {
            return Err(Error::shape(
                "softmax_lastdim",
                format!("expected 2-D, got {:?}", a.shape()),
            ));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let t = finite("softmax_lastdim", out, vec![m, n])?;
        Ok(node(
            t,
            Op::SoftmaxLastDim {
                input: self.clone(),
            },
        ))
    }

    /// Row-wise normalization to zero mean / unit variance (no affine part;
    /// learned gain and bias are separate parameters when wanted).
    pub fn layer_norm(&self, eps: f64) -> Result<Value> {
        let a = self.data();
        if a.shape().len() != 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("expected 2-D, got {:?}", a.shape()),
            ));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let t = finite("layer_norm", out, vec![m, n])?;
        Ok(node(
            t,
            Op::LayerNormLastDim {
                input: self.clone(),
                eps,
            },
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Value> {
        let data: Vec<f64> = self.data().data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = finite("gelu", data, self.shape().to_vec())?;
        Ok(node(
            t,
            Op::Gelu {
                input: self.clone(),
            },
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Value> {
        let s: f64 = self.data().data().iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "sum_all" });
        }
        Ok(node(
            Tensor::from_parts(vec![1], vec![s]),
            Op::SumAll {
                input: self.clone(),
            },
        ))
    }

    /// Apply per-head pairwise rotations with precomputed tables.
    ///
    /// `self` is `[rows, heads * head_dim]`; the tables carry one (cos, sin)
    /// per row per in-head pair and are shared across heads.
    pub fn rope(&self, tables: &RopeTables, heads: usize) -> Result<Value> {
        let a = self.data();
        if a.shape().len() != 2 {
            return Err(Error::shape(
                "rope",
                format!("expected 2-D, got {:?}", a.shape()),
            ));
        }
        let (rows, width) = (a.shape()[0], a.shape()[1]);
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(
                "rope",
                format!("width {} not divisible by {} heads", width, heads),
            ));
        }
        let head_dim = width / heads;
        if head_dim != tables.pairs * 2 {
            return Err(Error::shape(
                "rope",
                format!("head_dim {} vs tables for {} pairs", head_dim, tables.pairs),
            ));
        }
        if tables.cos.len() != rows * tables.pairs || tables.sin.len() != rows * tables.pairs {
            return Err(Error::shape(
                "rope",
                format!(
                    "table len {} vs rows {} x pairs {}",
                    tables.cos.len(),
                    rows,
                    tables.pairs
                ),
            ));
        }
        let mut out = a.data().to_vec();
        rope_rotate_buffer(&mut out, rows, heads, tables, false);
        let t = finite("rope", out, vec![rows, width])?;
        Ok(node(
            t,
            Op::Rope {
                input: self.clone(),
                tables: tables.clone(),
                heads,
            },
        ))
    }

    /// Fused multi-head attention: `softmax(q·kᵀ·scale)·v` per head.
    ///
    /// `q` is `[q_rows, D]`, `k` and `v` are `[k_rows, D]`; `D` must divide by
    /// `heads`. Queries see every key (no mask).
    pub fn attention(q: &Value, k: &Value, v: &Value, heads: usize, scale: f64) -> Result<Value> {
        let (qt, kt, vt) = (q.data(), k.data(), v.data());
        check_attention_shapes("attention", qt, kt, vt, heads)?;
        let (q_rows, width) = (qt.shape()[0], qt.shape()[1]);
        let k_rows = kt.shape()[0];
        let head_dim = width / heads;

        let mut out = vec![0.0; q_rows * width];
        let mut weights = vec![0.0; heads * q_rows * k_rows];
        let mut qh = vec![0.0; q_rows * head_dim];
        let mut kh = vec![0.0; k_rows * head_dim];
        let mut vh = vec![0.0; k_rows * head_dim];
        let mut oh = vec![0.0; q_rows * head_dim];
        for h in 0..heads {
            gather_head(qt.data(), &mut qh, q_rows, width, h * head_dim, head_dim);
            gather_head(kt.data(), &mut kh, k_rows, width, h * head_dim, head_dim);
            gather_head(vt.data(), &mut vh, k_rows, width, h * head_dim, head_dim);

            let w = &mut weights[h * q_rows * k_rows..(h + 1) * q_rows * k_rows];
            mm_nt(&qh, &kh, q_rows, head_dim, k_rows, w);
            for x in w.iter_mut() {
                *x *= scale;
            }
            for row in w.chunks_mut(k_rows) {
                softmax_row(row);
            }
            mm_nn(w, &vh, q_rows, k_rows, head_dim, &mut oh);
            scatter_head(&oh, &mut out, q_rows, width, h * head_dim, head_dim);
        }
        if !probe_finite(&out) || !probe_finite(&weights) {
            return Err(Error::NonFinite { op: "attention" });
        }
        let weights = Tensor::from_parts(vec![heads * q_rows, k_rows], weights);
        let t = Tensor::from_parts(vec![q_rows, width], out);
        Ok(node(
            t,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                scale,
                weights,
            },
        ))
    }

    /// Block-diagonal attention: query block j attends only to key/value
    /// block j. Query blocks have `rows_per_window` rows, key/value blocks
    /// have `slots` rows, and the block counts must match.
    pub fn window_attention(
        q: &Value,
        k: &Value,
        v: &Value,
        heads: usize,
        scale: f64,
        rows_per_window: usize,
        slots: usize,
    ) -> Result<Value> {
        let (qt, kt, vt) = (q.data(), k.data(), v.data());
        check_attention_shapes("window_attention", qt, kt, vt, heads)?;
        let (q_rows, width) = (qt.shape()[0], qt.shape()[1]);
        let k_rows = kt.shape()[0];
        if rows_per_window == 0 || slots == 0 {
            return Err(Error::invalid("window_attention", "zero-sized window"));
        }
        if q_rows % rows_per_window != 0
            || k_rows % slots != 0
            || q_rows / rows_per_window != k_rows / slots
        {
            return Err(Error::shape(
                "window_attention",
                format!(
                    "{} query rows / {} per window vs {} key rows / {} slots",
                    q_rows, rows_per_window, k_rows, slots
                ),
            ));
        }
        let windows = q_rows / rows_per_window;
        let head_dim = width / heads;

        let mut out = vec![0.0; q_rows * width];
        let mut weights = vec![0.0; heads * q_rows * slots];
        let mut qh = vec![0.0; q_rows * head_dim];
        let mut kh = vec![0.0; k_rows * head_dim];
        let mut vh = vec![0.0; k_rows * head_dim];
        let mut oh = vec![0.0; q_rows * head_dim];
        for h in 0..heads {
            gather_head(qt.data(), &mut qh, q_rows, width, h * head_dim, head_dim);
            gather_head(kt.data(), &mut kh, k_rows, width, h * head_dim, head_dim);
            gather_head(vt.data(), &mut vh, k_rows, width, h * head_dim, head_dim);
            for wdx in 0..windows {
                let qb = &qh[wdx * rows_per_window * head_dim..(wdx + 1) * rows_per_window * head_dim];
                let kb = &kh[wdx * slots * head_dim..(wdx + 1) * slots * head_dim];
                let vb = &vh[wdx * slots * head_dim..(wdx + 1) * slots * head_dim];
                let wb_start = h * q_rows * slots + wdx * rows_per_window * slots;
                let wb = &mut weights[wb_start..wb_start + rows_per_window * slots];
                mm_nt(qb, kb, rows_per_window, head_dim, slots, wb);
                for x in wb.iter_mut() {
                    *x *= scale;
                }
                for row in wb.chunks_mut(slots) {
                    softmax_row(row);
                }
                let ob = &mut oh[wdx * rows_per_window * head_dim..(wdx + 1) * rows_per_window * head_dim];
                mm_nn(wb, vb, rows_per_window, slots, head_dim, ob);
            }
            scatter_head(&oh, &mut out, q_rows, width, h * head_dim, head_dim);
        }
        if !probe_finite(&out) || !probe_finite(&weights) {
            return Err(Error::NonFinite {
                op: "window_attention",
            });
        }
        let weights = Tensor::from_parts(vec![heads * q_rows, slots], weights);
        let t = Tensor::from_parts(vec![q_rows, width], out);
        Ok(node(
            t,
            Op::WindowAttention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                scale,
                rows_per_window,
                slots,
                weights,
            },
        ))
    }
}

fn check_attention_shapes(
    op: &'static str,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<()> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::shape(op, "q, k, v must be 2-D".to_string()));
    }
    let width = q.shape()[1];
    if k.shape()[1] != width || v.shape()[1] != width || k.shape()[0] != v.shape()[0] {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::invalid(
            op,
            format!("width {} not divisible by {} heads", width, heads),
        ));
    }
    Ok(())
}

pub(crate) fn gather_head(
    src: &[f64],
    dst: &mut [f64],
    rows: usize,
    width: usize,
    col0: usize,
    head_dim: usize,
) {
    for i in 0..rows {
        dst[i * head_dim..(i + 1) * head_dim]
            .copy_from_slice(&src[i * width + col0..i * width + col0 + head_dim]);
    }
}

pub(crate) fn scatter_head(
    src: &[f64],
    dst: &mut [f64],
    rows: usize,
    width: usize,
    col0: usize,
    head_dim: usize,
) {
    for i in 0..rows {
        dst[i * width + col0..i * width + col0 + head_dim]
            .copy_from_slice(&src[i * head_dim..(i + 1) * head_dim]);
    }
}

/// In-place max-subtracted softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Rotate (or inversely rotate, for the backward pass) all head pairs of a
/// `[rows, heads * head_dim]` buffer in place.
pub(crate) fn rope_rotate_buffer(
    buf: &mut [f64],
    rows: usize,
    heads: usize,
    tables: &RopeTables,
    inverse: bool,
) {
    let pairs = tables.pairs;
    let head_dim = pairs * 2;
    let width = heads * head_dim;
    for i in 0..rows {
        let crow = &tables.cos[i * pairs..(i + 1) * pairs];
        let srow = &tables.sin[i * pairs..(i + 1) * pairs];
        let row = &mut buf[i * width..(i + 1) * width];
        for h in 0..heads {
            let base = h * head_dim;
            for p in 0..pairs {
                let c = crow[p];
                let s = if inverse { -srow[p] } else { srow[p] };
                let x0 = row[base + 2 * p];
                let x1 = row[base + 2 * p + 1];
                row[base + 2 * p] = x0 * c - x1 * s;
                row[base + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Shared add/mul with optional suffix broadcast of `rhs` over `lhs`.
fn broadcast_zip(
    op: &'static str,
    lhs: &Value,
    rhs: &Value,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Value> {
    let (a, b) = (lhs.data(), rhs.data());
    if !is_suffix(b.shape(), a.shape()) {
        return Err(Error::shape(
            op,
            format!("{:?} with {:?} (rhs must be a shape suffix)", a.shape(), b.shape()),
        ));
    }
    let blen = b.numel().max(1);
    let bd = b.data();
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, bd[i % blen]))
        .collect();
    let t = finite(op, data, a.shape().to_vec())?;
    let opv = match op {
        "add" => Op::Add {
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        },
        _ => Op::Mul {
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        },
    };
    Ok(node(t, opv))
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v2(shape: [usize; 2], data: Vec<f64>) -> Value {
        Value::constant(Tensor::from_vec(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn add_suffix_broadcast() {
        let a = v2([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Value::constant(Tensor::from_vec(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
        let c = a.add(&b).unwrap();
        assert_eq!(c.data().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // The other order is rejected: broadcast only widens the left side.
        assert!(b.add(&a).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = v2([2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = v2([2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = v2([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let s = a.softmax_lastdim().unwrap();
        for row in s.data().data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        // Large inputs stay finite thanks to max subtraction.
        let big = v2([1, 2], vec![1000.0, 1001.0]);
        assert!(big.softmax_lastdim().is_ok());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let a = v2([1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = a.layer_norm(1e-6).unwrap();
        let row = y.data().data();
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let a = v2([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let top = a.slice_rows(0, 1).unwrap();
        let rest = a.slice_rows(1, 2).unwrap();
        let back = Value::concat_rows(&[top, rest]).unwrap();
        assert_eq!(back.data().data(), a.data().data());
    }

    #[test]
    fn gather_as_embedding_lookup() {
        // Table of 3 rows, width 2; look up rows [2, 0, 2].
        let table = v2([3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let ids = [2usize, 0, 2];
        let mut index = Vec::new();
        for &id in &ids {
            index.push(id * 2);
            index.push(id * 2 + 1);
        }
        let out = table.gather(Arc::new(index), &[3, 2]).unwrap();
        assert_eq!(out.data().data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    }

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu_fwd(0.0), 0.0);
        assert!((gelu_fwd(1.0) - 0.8411919906082768).abs() < 1e-12);
        // gelu(x) + gelu(-x) = x * tanh(u(x)) for the tanh form.
        let x = 0.73;
        let u = GELU_C * (x + GELU_A * x * x * x);
        assert!((gelu_fwd(x) + gelu_fwd(-x) - x * u.tanh()).abs() < 1e-12);
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let rows = 3;
        let pairs = 2;
        let cos: Vec<f64> = (0..rows * pairs).map(|i| (i as f64 * 0.3).cos()).collect();
        let sin: Vec<f64> = (0..rows * pairs).map(|i| (i as f64 * 0.3).sin()).collect();
        let tables = RopeTables {
            cos: Arc::new(cos),
            sin: Arc::new(sin),
            pairs,
        };
        let x = v2([3, 8], (0..24).map(|i| i as f64 * 0.1 - 1.0).collect());
        let y = x.rope(&tables, 2).unwrap();
        for i in 0..3 {
            let xr = &x.data().data()[i * 8..(i + 1) * 8];
            let yr = &y.data().data()[i * 8..(i + 1) * 8];
            let nx: f64 = xr.iter().map(|v| v * v).sum();
            let ny: f64 = yr.iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12, "rotation must preserve norms");
        }
        // Inverse rotation restores the input bit-for-bit up to fp rounding.
        let mut buf = y.data().data().to_vec();
        rope_rotate_buffer(&mut buf, 3, 2, &tables, true);
        for (a, b) in buf.iter().zip(x.data().data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_uniform_when_keys_equal() {
        // All keys identical -> uniform weights -> output is the value mean.
        let q = v2([2, 4], vec![0.3; 8]);
        let k = v2([3, 4], vec![1.0; 12]);
        let v = v2(
            [3, 4],
            vec![
                0.0, 0.0, 0.0, 0.0, //
                3.0, 3.0, 3.0, 3.0, //
                6.0, 6.0, 6.0, 6.0,
            ],
        );
        let out = Value::attention(&q, &k, &v, 2, 0.5).unwrap();
        for &o in out.data().data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
        let w = out.attention_weights().unwrap();
        assert_eq!(w.shape(), &[2 * 2, 3]);
        for &x in w.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_attention_is_block_diagonal() {
        // 2 windows, 2 query rows per window, 2 slots per window.
        // Values differ per window; outputs must only mix within a window.
        let q = v2([4, 2], vec![0.1; 8]);
        let k = v2([4, 2], vec![0.2; 8]);
        let v = v2([4, 2], vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0]);
        let out = Value::window_attention(&q, &k, &v, 1, 1.0, 2, 2).unwrap();
        let o = out.data().data();
        assert!((o[0] - 1.0).abs() < 1e-12 && (o[3] - 1.0).abs() < 1e-12);
        assert!((o[4] - 5.0).abs() < 1e-12 && (o[7] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let a = v2([1, 2], vec![f64::MAX, f64::MAX]);
        assert!(a.scale(2.0).is_err());
        let b = v2([1, 1], vec![f64::MAX]);
        assert!(b.mul(&b).is_err());
    }
}
