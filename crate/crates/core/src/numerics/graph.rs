//! Reverse-mode tape over dynamically recorded operations.
//!
//! Nodes are appended in execution order, so the node index order is already
//! a topological order; `backward` walks it once in reverse. `backward`
//! consumes the graph, which makes "backward twice without re-running the
//! forward pass" a compile-time error rather than a runtime one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    AddSame { a: NodeId, b: NodeId },
    /// value[r, c] = a[r, c] + bias[c]
    AddBias { a: NodeId, bias: NodeId },
    MulSame { a: NodeId, b: NodeId },
    /// value[r, c] = a[r, c] * scale[c]
    MulCols { a: NodeId, scale: NodeId },
    /// value = k * a + c
    Affine { a: NodeId, k: T },
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize> },
    Embedding { table: NodeId, indices: Vec<u32> },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, inv_std: Vec<T> },
    Relu { a: NodeId },
    Dropout { a: NodeId, keep: Vec<T> },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    Ln { a: NodeId },
    Clamp { a: NodeId, lo: T, hi: T },
    SliceRows { a: NodeId, start: usize },
    /// value[i] = a[i, idx[i]]
    PickCol { a: NodeId, idx: Vec<u32> },
    /// Fused multi-head scaled dot-product attention over a flat
    /// [batch*seq, d] layout; saves the softmaxed attention weights.
    Mha { q: NodeId, k: NodeId, v: NodeId, heads: usize, batch: usize, seq: usize, attn: Vec<T> },
    /// value[b*(seq-1) + i] = sum_c probs[b,i,c] * probs[b,i+1,c]
    AdjOverlap { probs: NodeId, batch: usize, seq: usize },
    /// Per-example soft dynamic time warping against one-hot targets.
    SoftDtw {
        probs: NodeId,
        targets: Vec<u32>,
        gamma: T,
        batch: usize,
        seq: usize,
        classes: usize,
        r: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recorded operations with parents plus per-node gradient buffers created
/// during [`Graph::backward`]. Acyclic by construction.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers per node, keyed by the NodeId returned at recording time.
/// Non-trainable (frozen) leaves receive no buffer.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts an external tensor; its `requires_grad` flag decides whether a
    /// gradient buffer is accumulated for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf)
    }

    /// A leaf that never receives a gradient buffer.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nn(m, ka, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::AddSame { a, b }))
    }

    /// Broadcasts a rank-1 bias over the last dimension.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (_rows, cols) = self.value(a).dims2()?;
        if self.value(bias).len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.value(a).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data();
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias_data[i % cols])
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(out, needs, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::MulSame { a, b }))
    }

    /// Broadcasts a rank-1 scale over the last dimension (the multiplicative
    /// twin of [`Graph::add_bias`]).
    pub fn mul_cols(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId, NumericsError> {
        let (_rows, cols) = self.value(a).dims2()?;
        if self.value(scale).len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_cols",
                left: self.value(a).shape().to_vec(),
                right: self.value(scale).shape().to_vec(),
            });
        }
        let s = self.value(scale).data();
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().enumerate().map(|(i, &x)| x * s[i % cols]).collect(),
        )?;
        let needs = self.needs(a) || self.needs(scale);
        Ok(self.push(out, needs, Op::MulCols { a, scale }))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        self.affine(a, k, T::zero())
    }

    /// Elementwise k * x + c.
    pub fn affine(&mut self, a: NodeId, k: T, c: T) -> NodeId {
        let out = self.value(a).map(|x| k * x + c);
        let needs = self.needs(a);
        self.push(out, needs, Op::Affine { a, k })
    }

    /// Concatenates rank-2 tensors with equal row counts along the last dim.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        {
            let out_data = out.data_mut();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.nodes[p.0].value.data();
                for r in 0..rows {
                    out_data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, needs, Op::ConcatCols { parts: parts.to_vec(), widths }))
    }

    /// Gathers rows of an embedding table: value[i] = table[indices[i]].
    pub fn embedding_lookup(
        &mut self,
        table: NodeId,
        indices: &[u32],
    ) -> Result<NodeId, NumericsError> {
        let (vocab, dim) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= vocab) {
            return Err(NumericsError::Invalid {
                op: "embedding_lookup",
                msg: format!("index {bad} out of range for table with {vocab} rows"),
            });
        }
        let src = self.value(table).data();
        let mut out = Tensor::zeros(vec![indices.len(), dim]);
        {
            let out_data = out.data_mut();
            for (i, &idx) in indices.iter().enumerate() {
                out_data[i * dim..(i + 1) * dim]
                    .copy_from_slice(&src[idx as usize * dim..(idx as usize + 1) * dim]);
            }
        }
        let needs = self.needs(table);
        Ok(self.push(out, needs, Op::Embedding { table, indices: indices.to_vec() }))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(a).dims2()?;
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        softmax_rows(out.data_mut(), rows, cols);
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::Softmax { a }))
    }

    /// Row-wise normalization (x - mean) / sqrt(var + eps) over the last
    /// dimension, without affine parameters (apply scale/shift separately).
    pub fn layer_norm(&mut self, a: NodeId, eps: T) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(a).dims2()?;
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::from_f64(cols as f64);
        {
            let data = out.data_mut();
            for r in 0..rows {
                let row = &mut data[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
                let inv = (var + eps).sqrt().recip();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::LayerNorm { a, inv_std }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(out, needs, Op::Relu { a })
    }

    /// Inverted dropout: keeps each entry with probability 1 - p, scaling
    /// survivors by 1/(1 - p). Identity (no node recorded) when not training
    /// or p == 0.
    pub fn dropout(&mut self, a: NodeId, p: f64, train: bool, rng: &mut ChaCha8Rng) -> NodeId {
        if !train || p <= 0.0 {
            return a;
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(&keep).map(|(&x, &k)| x * k).collect(),
        )
        .expect("same shape");
        let needs = self.needs(a);
        self.push(out, needs, Op::Dropout { a, keep })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(vec![cols, rows]);
        {
            let dst = out.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::Reshape { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.value(a).data().iter().copied().sum::<T>() / n;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::MeanAll { a })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::SumAll { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.ln());
        let needs = self.needs(a);
        self.push(out, needs, Op::Ln { a })
    }

    /// Clamps to [lo, hi]; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let needs = self.needs(a);
        self.push(out, needs, Op::Clamp { a, lo, hi })
    }

    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > rows {
            return Err(NumericsError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {rows}", start + len),
            });
        }
        let src = &self.value(a).data()[start * cols..(start + len) * cols];
        let out = Tensor::new(vec![len, cols], src.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::SliceRows { a, start }))
    }

    /// value[i] = a[i, idx[i]]; the per-row class pick used by cross-entropy.
    pub fn pick_col(&mut self, a: NodeId, idx: &[u32]) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(a).dims2()?;
        if idx.len() != rows {
            return Err(NumericsError::Invalid {
                op: "pick_col",
                msg: format!("{} indices for {rows} rows", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= cols) {
            return Err(NumericsError::Invalid {
                op: "pick_col",
                msg: format!("column {bad} out of range for {cols} columns"),
            });
        }
        let src = self.value(a).data();
        let data: Vec<T> = idx.iter().enumerate().map(|(i, &c)| src[i * cols + c as usize]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::PickCol { a, idx: idx.to_vec() }))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are [batch*seq, d] with d divisible by `heads`; output
    /// has the same shape. Softmaxed attention weights are saved for the
    /// backward pass.
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        batch: usize,
        seq: usize,
    ) -> Result<NodeId, NumericsError> {
        let (rows, d) = self.value(q).dims2()?;
        for &id in &[k, v] {
            if self.value(id).shape() != self.value(q).shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "multi_head_attention",
                    left: self.value(q).shape().to_vec(),
                    right: self.value(id).shape().to_vec(),
                });
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(NumericsError::Invalid {
                op: "multi_head_attention",
                msg: format!("rows {rows}, batch {batch} x seq {seq}, d {d}, heads {heads}"),
            });
        }
        let dh = d / heads;
        let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = Tensor::zeros(vec![rows, d]);
        let mut attn = vec![T::zero(); batch * heads * seq * seq];
        {
            let out_data: &mut [T] = out.data_mut();
            for b in 0..batch {
                let row0 = b * seq;
                for h in 0..heads {
                    let col0 = h * dh;
                    let w = &mut attn[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    // scores = alpha * Qh Kh^T
                    unsafe {
                        T::gemm(
                            seq,
                            dh,
                            seq,
                            alpha,
                            qd.as_ptr().add(row0 * d + col0),
                            d as isize,
                            1,
                            kd.as_ptr().add(row0 * d + col0),
                            1,
                            d as isize,
                            T::zero(),
                            w.as_mut_ptr(),
                            seq as isize,
                            1,
                        );
                    }
                    softmax_rows(w, seq, seq);
                    // ctx = W Vh
                    unsafe {
                        T::gemm(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            w.as_ptr(),
                            seq as isize,
                            1,
                            vd.as_ptr().add(row0 * d + col0),
                            d as isize,
                            1,
                            T::zero(),
                            out_data.as_mut_ptr().add(row0 * d + col0),
                            d as isize,
                            1,
                        );
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, needs, Op::Mha { q, k, v, heads, batch, seq, attn }))
    }

    /// Adjacent-row overlap within each example:
    /// value[b*(seq-1)+i] = <probs[b,i,:], probs[b,i+1,:]>.
    pub fn adjacent_overlap(
        &mut self,
        probs: NodeId,
        batch: usize,
        seq: usize,
    ) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(probs).dims2()?;
        if rows != batch * seq || seq < 2 {
            return Err(NumericsError::Invalid {
                op: "adjacent_overlap",
                msg: format!("rows {rows}, batch {batch} x seq {seq}"),
            });
        }
        let p = self.value(probs).data();
        let mut data = Vec::with_capacity(batch * (seq - 1));
        for b in 0..batch {
            for i in 0..seq - 1 {
                let r0 = (b * seq + i) * cols;
                let r1 = r0 + cols;
                let dot =
                    p[r0..r0 + cols].iter().zip(&p[r1..r1 + cols]).map(|(&x, &y)| x * y).sum::<T>();
                data.push(dot);
            }
        }
        let out = Tensor::new(vec![batch * (seq - 1)], data)?;
        let needs = self.needs(probs);
        Ok(self.push(out, needs, Op::AdjOverlap { probs, batch, seq }))
    }

    /// Per-example soft-DTW between predicted probability rows and one-hot
    /// targets, with squared Euclidean local cost. Returns a [batch] vector.
    ///
    /// gamma = 0 gives classic DTW (forward exact; backward follows the
    /// leftmost optimal alignment path); gamma > 0 uses the smooth-min
    /// recursion and is differentiable everywhere.
    pub fn soft_dtw(
        &mut self,
        probs: NodeId,
        targets: &[u32],
        gamma: T,
        batch: usize,
        seq: usize,
    ) -> Result<NodeId, NumericsError> {
        let (rows, classes) = self.value(probs).dims2()?;
        if rows != batch * seq || targets.len() != rows {
            return Err(NumericsError::Invalid {
                op: "soft_dtw",
                msg: format!("rows {rows}, batch {batch} x seq {seq}, targets {}", targets.len()),
            });
        }
        if gamma < T::zero() {
            return Err(NumericsError::Invalid { op: "soft_dtw", msg: "gamma < 0".into() });
        }
        let p = self.value(probs).data();
        let width = seq + 1;
        let mut r = vec![T::infinity(); batch * width * width];
        let mut values = Vec::with_capacity(batch);
        for b in 0..batch {
            let rb = &mut r[b * width * width..(b + 1) * width * width];
            rb[0] = T::zero();
            // Row squared norms plus one: ||p_i||^2 + ||e_t||^2 = sq + 1.
            let sq: Vec<T> = (0..seq)
                .map(|i| {
                    let row = &p[(b * seq + i) * classes..(b * seq + i + 1) * classes];
                    row.iter().map(|&x| x * x).sum::<T>() + T::one()
                })
                .collect();
            for i in 1..=seq {
                for j in 1..=seq {
                    let t = targets[b * seq + j - 1] as usize;
                    let cost = sq[i - 1]
                        - T::from_f64(2.0) * p[(b * seq + i - 1) * classes + t];
                    let up = rb[(i - 1) * width + j];
                    let diag = rb[(i - 1) * width + j - 1];
                    let left = rb[i * width + j - 1];
                    rb[i * width + j] = cost + soft_min3(up, diag, left, gamma);
                }
            }
            values.push(rb[seq * width + seq]);
        }
        let out = Tensor::new(vec![batch], values)?;
        let needs = self.needs(probs);
        Ok(self.push(
            out,
            needs,
            Op::SoftDtw { probs, targets: targets.to_vec(), gamma, batch, seq, classes, r },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the graph: running
    /// backward twice on the same recorded forward pass cannot compile.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.propagate(id, &grad, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn ensure<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        grads[id.0].as_mut()
    }

    fn propagate(&self, id: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("checked at forward");
                let (_, n) = self.nodes[b.0].value.dims2().expect("checked at forward");
                let a_data = self.nodes[a.0].value.data();
                let b_data = self.nodes[b.0].value.data();
                if let Some(ga) = self.ensure(grads, *a) {
                    // dA = G B^T
                    gemm_nt(m, n, k, T::one(), grad.data(), b_data, T::one(), ga.data_mut());
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    // dB = A^T G
                    gemm_tn(k, m, n, T::one(), a_data, grad.data(), T::one(), gb.data_mut());
                }
            }
            Op::AddSame { a, b } => {
                for &p in &[*a, *b] {
                    if let Some(g) = self.ensure(grads, p) {
                        accumulate(g.data_mut(), grad.data());
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    accumulate(ga.data_mut(), grad.data());
                }
                if let Some(gb) = self.ensure(grads, *bias) {
                    let cols = gb.len();
                    let gb_data = gb.data_mut();
                    for (i, &g) in grad.data().iter().enumerate() {
                        gb_data[i % cols] += g;
                    }
                }
            }
            Op::MulSame { a, b } => {
                let a_data = self.nodes[a.0].value.data();
                let b_data = self.nodes[b.0].value.data();
                if let Some(ga) = self.ensure(grads, *a) {
                    for ((g, &go), &y) in ga.data_mut().iter_mut().zip(grad.data()).zip(b_data) {
                        *g += go * y;
                    }
                }
                if let Some(gb) = self.ensure(grads, *b) {
                    for ((g, &go), &x) in gb.data_mut().iter_mut().zip(grad.data()).zip(a_data) {
                        *g += go * x;
                    }
                }
            }
            Op::Affine { a, k } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for (g, &go) in ga.data_mut().iter_mut().zip(grad.data()) {
                        *g += *k * go;
                    }
                }
            }
            Op::MulCols { a, scale } => {
                let a_data = self.nodes[a.0].value.data();
                let s_data = self.nodes[scale.0].value.data();
                let cols = s_data.len();
                if let Some(ga) = self.ensure(grads, *a) {
                    for (i, (g, &go)) in ga.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        *g += go * s_data[i % cols];
                    }
                }
                if let Some(gs) = self.ensure(grads, *scale) {
                    let gs_data = gs.data_mut();
                    for (i, &go) in grad.data().iter().enumerate() {
                        gs_data[i % cols] += go * a_data[i];
                    }
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = grad.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.ensure(grads, p) {
                        let gp_data = gp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                gp_data[r * w + c] += grad.data()[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, indices } => {
                if let Some(gt) = self.ensure(grads, *table) {
                    let dim = gt.last_dim();
                    let gt_data = gt.data_mut();
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = &mut gt_data[idx as usize * dim..(idx as usize + 1) * dim];
                        let src = &grad.data()[i * dim..(i + 1) * dim];
                        accumulate(dst, src);
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let y = self.nodes[id].value.data();
                    let cols = self.nodes[id].value.last_dim();
                    let rows = y.len() / cols;
                    let ga_data = ga.data_mut();
                    for r in 0..rows {
                        let y_row = &y[r * cols..(r + 1) * cols];
                        let g_row = &grad.data()[r * cols..(r + 1) * cols];
                        let dot =
                            y_row.iter().zip(g_row).map(|(&yv, &gv)| yv * gv).sum::<T>();
                        for c in 0..cols {
                            ga_data[r * cols + c] += y_row[c] * (g_row[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let y = self.nodes[id].value.data();
                    let cols = self.nodes[id].value.last_dim();
                    let rows = y.len() / cols;
                    let n = T::from_f64(cols as f64);
                    let ga_data = ga.data_mut();
                    for r in 0..rows {
                        let y_row = &y[r * cols..(r + 1) * cols];
                        let g_row = &grad.data()[r * cols..(r + 1) * cols];
                        let mean_g = g_row.iter().copied().sum::<T>() / n;
                        let mean_gy =
                            g_row.iter().zip(y_row).map(|(&g, &yv)| g * yv).sum::<T>() / n;
                        let inv = inv_std[r];
                        for c in 0..cols {
                            ga_data[r * cols + c] +=
                                inv * (g_row[c] - mean_g - y_row[c] * mean_gy);
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let y = self.nodes[id].value.data();
                    for ((g, &go), &yv) in ga.data_mut().iter_mut().zip(grad.data()).zip(y) {
                        if yv > T::zero() {
                            *g += go;
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    for ((g, &go), &k) in ga.data_mut().iter_mut().zip(grad.data()).zip(keep) {
                        *g += go * k;
                    }
                }
            }
            Op::Transpose { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let (rows, cols) =
                        self.nodes[a.0].value.dims2().expect("checked at forward");
                    let ga_data = ga.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            ga_data[r * cols + c] += grad.data()[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    accumulate(ga.data_mut(), grad.data());
                }
            }
            Op::MeanAll { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let k = grad.item() / T::from_f64(ga.len() as f64);
                    for g in ga.data_mut() {
                        *g += k;
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let k = grad.item();
                    for g in ga.data_mut() {
                        *g += k;
                    }
                }
            }
            Op::Ln { a } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = self.ensure(grads, *a) {
                    for ((g, &go), &xv) in ga.data_mut().iter_mut().zip(grad.data()).zip(x) {
                        *g += go / xv;
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.nodes[a.0].value.data();
                if let Some(ga) = self.ensure(grads, *a) {
                    for ((g, &go), &xv) in ga.data_mut().iter_mut().zip(grad.data()).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *g += go;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let cols = ga.last_dim();
                    let dst = &mut ga.data_mut()[start * cols..start * cols + grad.len()];
                    accumulate(dst, grad.data());
                }
            }
            Op::PickCol { a, idx } => {
                if let Some(ga) = self.ensure(grads, *a) {
                    let cols = ga.last_dim();
                    let ga_data = ga.data_mut();
                    for (i, (&c, &g)) in idx.iter().zip(grad.data()).enumerate() {
                        ga_data[i * cols + c as usize] += g;
                    }
                }
            }
            Op::Mha { q, k, v, heads, batch, seq, attn } => {
                self.backward_mha(grad, grads, *q, *k, *v, *heads, *batch, *seq, attn);
            }
            Op::AdjOverlap { probs, batch, seq } => {
                let p = self.nodes[probs.0].value.data();
                let cols = self.nodes[probs.0].value.last_dim();
                if let Some(gp) = self.ensure(grads, *probs) {
                    let gp_data = gp.data_mut();
                    for b in 0..*batch {
                        for i in 0..seq - 1 {
                            let g = grad.data()[b * (seq - 1) + i];
                            let r0 = (b * seq + i) * cols;
                            let r1 = r0 + cols;
                            for c in 0..cols {
                                gp_data[r0 + c] += g * p[r1 + c];
                                gp_data[r1 + c] += g * p[r0 + c];
                            }
                        }
                    }
                }
            }
            Op::SoftDtw { probs, targets, gamma, batch, seq, classes, r } => {
                self.backward_soft_dtw(
                    grad, grads, *probs, targets, *gamma, *batch, *seq, *classes, r,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_mha(
        &self,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        batch: usize,
        seq: usize,
        attn: &[T],
    ) {
        let d = self.nodes[q.0].value.last_dim();
        let dh = d / heads;
        let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();

        // Buffers are filled regardless of which parents need gradients;
        // attention shares q/k/v projections so they almost always all do.
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dw = vec![T::zero(); seq * seq];
        let mut ds = vec![T::zero(); seq * seq];

        for b in 0..batch {
            let row0 = b * seq;
            for h in 0..heads {
                let col0 = h * dh;
                let w = &attn[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                unsafe {
                    // dW = Gctx Vh^T
                    T::gemm(
                        seq,
                        dh,
                        seq,
                        T::one(),
                        grad.data().as_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                        vd.as_ptr().add(row0 * d + col0),
                        1,
                        d as isize,
                        T::zero(),
                        dw.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                    // dVh += W^T Gctx
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        w.as_ptr(),
                        1,
                        seq as isize,
                        grad.data().as_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                        T::one(),
                        dv.as_mut_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                    );
                }
                // Softmax backward into dS (scores grad), scaled by alpha.
                for rrow in 0..seq {
                    let w_row = &w[rrow * seq..(rrow + 1) * seq];
                    let dw_row = &dw[rrow * seq..(rrow + 1) * seq];
                    let dot = w_row.iter().zip(dw_row).map(|(&a, &g)| a * g).sum::<T>();
                    for c in 0..seq {
                        ds[rrow * seq + c] = alpha * w_row[c] * (dw_row[c] - dot);
                    }
                }
                unsafe {
                    // dQh += dS Kh
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        ds.as_ptr(),
                        seq as isize,
                        1,
                        kd.as_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                        T::one(),
                        dq.as_mut_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                    );
                    // dKh += dS^T Qh
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        ds.as_ptr(),
                        1,
                        seq as isize,
                        qd.as_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                        T::one(),
                        dk.as_mut_ptr().add(row0 * d + col0),
                        d as isize,
                        1,
                    );
                }
            }
        }
        if let Some(gq) = self.ensure(grads, q) {
            accumulate(gq.data_mut(), &dq);
        }
        if let Some(gk) = self.ensure(grads, k) {
            accumulate(gk.data_mut(), &dk);
        }
        if let Some(gv) = self.ensure(grads, v) {
            accumulate(gv.data_mut(), &dv);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_soft_dtw(
        &self,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        probs: NodeId,
        targets: &[u32],
        gamma: T,
        batch: usize,
        seq: usize,
        classes: usize,
        r: &[T],
    ) {
        let p = self.nodes[probs.0].value.data();
        let Some(gp) = self.ensure(grads, probs) else { return };
        let gp_data = gp.data_mut();
        let width = seq + 1;
        let two = T::from_f64(2.0);

        for b in 0..batch {
            let g_out = grad.data()[b];
            if g_out == T::zero() {
                continue;
            }
            let rb = &r[b * width * width..(b + 1) * width * width];
            let cost = |i: usize, j: usize| -> T {
                let row = &p[(b * seq + i - 1) * classes..(b * seq + i) * classes];
                let t = targets[b * seq + j - 1] as usize;
                row.iter().map(|&x| x * x).sum::<T>() + T::one() - two * row[t]
            };
            // Alignment weights E[i][j] = d(loss)/d(cost(i, j)).
            let mut e = vec![T::zero(); width * width];
            e[seq * width + seq] = T::one();
            if gamma > T::zero() {
                for i in (1..=seq).rev() {
                    for j in (1..=seq).rev() {
                        if i == seq && j == seq {
                            continue;
                        }
                        let mut acc = T::zero();
                        if i + 1 <= seq {
                            let a = ((rb[(i + 1) * width + j] - rb[i * width + j] - cost(i + 1, j))
                                / gamma)
                                .exp();
                            acc = acc + a * e[(i + 1) * width + j];
                        }
                        if j + 1 <= seq {
                            let c = ((rb[i * width + j + 1] - rb[i * width + j] - cost(i, j + 1))
                                / gamma)
                                .exp();
                            acc = acc + c * e[i * width + j + 1];
                        }
                        if i + 1 <= seq && j + 1 <= seq {
                            let dgn = ((rb[(i + 1) * width + j + 1]
                                - rb[i * width + j]
                                - cost(i + 1, j + 1))
                                / gamma)
                                .exp();
                            acc = acc + dgn * e[(i + 1) * width + j + 1];
                        }
                        e[i * width + j] = acc;
                    }
                }
            } else {
                // Hard DTW: subgradient along one optimal path, preferring
                // the diagonal on ties.
                let (mut i, mut j) = (seq, seq);
                while i > 1 || j > 1 {
                    e[i * width + j] = T::one();
                    let up = if i > 1 { rb[(i - 1) * width + j] } else { T::infinity() };
                    let diag =
                        if i > 1 && j > 1 { rb[(i - 1) * width + j - 1] } else { T::infinity() };
                    let left = if j > 1 { rb[i * width + j - 1] } else { T::infinity() };
                    if diag <= up && diag <= left {
                        i -= 1;
                        j -= 1;
                    } else if up <= left {
                        i -= 1;
                    } else {
                        j -= 1;
                    }
                }
                e[width + 1] = T::one();
            }
            // d cost(i, j) / d p_row(i) = 2 p - 2 onehot(target_j).
            for i in 1..=seq {
                let row0 = (b * seq + i - 1) * classes;
                let mut row_sum = T::zero();
                for j in 1..=seq {
                    let w = e[i * width + j];
                    if w != T::zero() {
                        row_sum = row_sum + w;
                        let t = targets[b * seq + j - 1] as usize;
                        gp_data[row0 + t] = gp_data[row0 + t] - g_out * two * w;
                    }
                }
                if row_sum != T::zero() {
                    let k = g_out * two * row_sum;
                    for c in 0..classes {
                        gp_data[row0 + c] += k * p[row0 + c];
                    }
                }
            }
        }
    }
}

fn accumulate<T: Element>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place numerically stable row-wise softmax.
fn softmax_rows<T: Element>(data: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// Smooth minimum: -gamma * ln(sum exp(-x / gamma)); exact min at gamma = 0.
fn soft_min3<T: Element>(a: T, b: T, c: T, gamma: T) -> T {
    let m = a.min(b).min(c);
    if gamma <= T::zero() || m.is_infinite() {
        return m;
    }
    let sum = ((m - a) / gamma).exp() + ((m - b) / gamma).exp() + ((m - c) / gamma).exp();
    m - gamma * sum.ln()
}
