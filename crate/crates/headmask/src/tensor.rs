//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns an arena of [`Tensor`]s and records every operation as a
//! node. `backward()` replays the nodes in reverse recording order, which is
//! a valid topological order by construction. Gradients are kept for every
//! tensor that (transitively) requires them, so intermediate nodes such as
//! per-head attention contexts can be inspected after the backward pass.
//!
//! Tapes are single-shot: one forward, one backward, then the tape is done.
//! A second `backward()` call is an error. Training code builds a fresh tape
//! per forward pass.
//!
//! Shapes are row-major. The only implicit broadcasting is over leading
//! batch dimensions (matmul with a shared 2-D rhs, bias addition over the
//! last axis, per-batch row scaling); everything else requires explicit
//! reshapes.

use rand::Rng;

use crate::error::{Error, Result};

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A dense f32 array plus its gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Recorded operation. Inputs always precede the output in the arena.
#[derive(Debug, Clone)]
enum Node {
    /// c = a @ b, optionally with b's last two dims transposed.
    Matmul { a: TensorId, b: TensorId, out: TensorId, trans_b: bool },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f32, out: TensorId },
    /// x[..., d] + bias[d]
    AddBias { x: TensorId, bias: TensorId, out: TensorId },
    /// out[b, ...] = x[b, ...] * g[b]; the head-gate primitive.
    ScaleRows { x: TensorId, g: TensorId, out: TensorId },
    Reshape { x: TensorId, out: TensorId },
    /// Swap the last two axes.
    TransposeLast { x: TensorId, out: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize, out: TensorId },
    /// out[..., 0..len] = x[..., start..start+len]
    SliceLast { x: TensorId, start: usize, len: usize, out: TensorId },
    /// Row gather; backward scatter-adds into the table.
    Embedding { table: TensorId, ids: Vec<usize>, out: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f32, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    /// mask entries are 0 or 1/(1-p), sampled at record time.
    Dropout { x: TensorId, mask: Vec<f32>, out: TensorId },
    Softmax { x: TensorId, axis: usize, out: TensorId },
    /// Per-position label-smoothed cross entropy; rows whose target is the
    /// pad id produce 0 loss and 0 gradient. `lse` caches the log-sum-exp.
    SmoothedCe {
        logits: TensorId,
        targets: Vec<u32>,
        pad_id: u32,
        epsilon: f32,
        lse: Vec<f32>,
        out: TensorId,
    },
    SumAll { x: TensorId, out: TensorId },
}

/// Recording tape; see module docs.
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), nodes: Vec::new(), done: false }
    }

    // ── arena ────────────────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None });
        id
    }

    /// Non-differentiable input (token batches, attention masks, weights of
    /// sums).
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<TensorId> {
        self.check_open()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "constant: shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, false))
    }

    /// Differentiable leaf (model parameters, head gates).
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<TensorId> {
        self.check_open()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "leaf: shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, true))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.tensors[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.tensors[id.0].numel()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.numel(id), 1);
        self.tensors[id.0].data[0]
    }

    fn check_open(&self) -> Result<()> {
        if self.done {
            Err(Error::usage("tape already consumed by backward(); tapes are single-shot"))
        } else {
            Ok(())
        }
    }

    fn record(&mut self, node: Node) {
        self.nodes.push(node);
    }

    fn rg(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Batched matrix product `a[..., m, k] @ b[..., k, n]`. The rhs may be
    /// a plain 2-D matrix shared across all leading dims of `a`; otherwise
    /// the leading dims must match exactly.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ transpose(b[..., n, k])`, the attention-score form.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        self.check_open()?;
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || {
            Err(Error::shape(format!(
                "matmul{}: lhs {:?} incompatible with rhs {:?}",
                if trans_b { "_nt" } else { "" },
                ashape,
                bshape
            )))
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return err();
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        if ka != kb {
            return err();
        }
        let a_batch = &ashape[..ashape.len() - 2];
        let b_batch = &bshape[..bshape.len() - 2];
        if !(b_batch.is_empty() || a_batch == b_batch) {
            return err();
        }
        let batch: usize = a_batch.iter().product();
        let mut out_shape = a_batch.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0f32; batch * m * n];

        let adata = &self.tensors[a.0].data;
        let bdata = &self.tensors[b.0].data;
        let k = ka;
        if b_batch.is_empty() {
            // Collapse the batch into rows; one gemm.
            let kind = if trans_b { GemmKind::Nt } else { GemmKind::Nn };
            gemm(&mut out, batch * m, n, k, adata, bdata, kind);
        } else {
            let kind = if trans_b { GemmKind::Nt } else { GemmKind::Nn };
            for i in 0..batch {
                gemm(
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    n,
                    k,
                    &adata[i * m * k..(i + 1) * m * k],
                    &bdata[i * k * n..(i + 1) * k * n],
                    kind,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let out_id = self.push(out_shape, out, rg);
        self.record(Node::Matmul { a, b, out: out_id, trans_b });
        Ok(out_id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.check_same_shape("add", a, b)?;
        let data: Vec<f32> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(Node::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f32> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(Node::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f32> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(Node::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.check_open()?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        let out = self.push(self.shape(x).to_vec(), data, rg);
        self.record(Node::Scale { x, c, out });
        Ok(out)
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] || d == 0 {
            return Err(Error::shape(format!(
                "add_bias: x {:?} incompatible with bias {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let bdata = self.tensors[bias.0].data.clone();
        let data: Vec<f32> = self.tensors[x.0]
            .data
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&bdata).map(|(v, b)| v + b).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        let out = self.push(self.shape(x).to_vec(), data, rg);
        self.record(Node::AddBias { x, bias, out });
        Ok(out)
    }

    /// `out[i, ...] = x[i, ...] * g[i]` where `g` has one entry per leading
    /// row of `x`. The gradient of `g[i]` is the full contraction of row `i`
    /// of `x` with the upstream gradient, which is what makes this the head
    /// gate primitive.
    pub fn scale_rows(&mut self, x: TensorId, g: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let xshape = self.shape(x).to_vec();
        let b = *xshape.first().unwrap_or(&0);
        if self.shape(g) != [b] || b == 0 {
            return Err(Error::shape(format!(
                "scale_rows: x {:?} incompatible with gates {:?}",
                xshape,
                self.shape(g)
            )));
        }
        let row = self.numel(x) / b;
        let gdata = self.tensors[g.0].data.clone();
        let mut data = self.tensors[x.0].data.clone();
        for (i, chunk) in data.chunks_exact_mut(row).enumerate() {
            let gv = gdata[i];
            for v in chunk {
                *v *= gv;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        let out = self.push(xshape, data, rg);
        self.record(Node::ScaleRows { x, g, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        self.check_open()?;
        if new_shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} elements, target {:?} wants {}",
                self.shape(x),
                self.numel(x),
                new_shape,
                new_shape.iter().product::<usize>()
            )));
        }
        let data = self.tensors[x.0].data.clone();
        let rg = self.rg(x);
        let out = self.push(new_shape.to_vec(), data, rg);
        self.record(Node::Reshape { x, out });
        Ok(out)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("transpose: need >= 2 dims, got {:?}", shape)));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let src = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; src.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        let out = self.push(out_shape, data, rg);
        self.record(Node::TransposeLast { x, out });
        Ok(out)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        self.check_open()?;
        let first = *inputs.first().ok_or_else(|| Error::usage("concat: empty input list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat: axis {} out of range for {:?}", axis, base)));
        }
        let mut axis_total = 0usize;
        for &t in inputs {
            let s = self.shape(t);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {}",
                    s, base, axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * axis_total * inner];
        let out_stride = axis_total * inner;
        let mut col = 0usize;
        for &t in inputs {
            let len = self.shape(t)[axis];
            let chunk = len * inner;
            let src = &self.tensors[t.0].data;
            for o in 0..outer {
                let dst = o * out_stride + col * inner;
                data[dst..dst + chunk].copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            col += len;
        }
        let rg = inputs.iter().any(|&t| self.rg(t));
        let out = self.push(out_shape, data, rg);
        self.record(Node::Concat { inputs: inputs.to_vec(), axis, out });
        Ok(out)
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_open()?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(Error::shape(format!(
                "slice_last: range {}..{} out of bounds for {:?}",
                start,
                start + len,
                shape
            )));
        }
        let rows = self.numel(x) / d;
        let src = &self.tensors[x.0].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        let out = self.push(out_shape, data, rg);
        self.record(Node::SliceLast { x, start, len, out });
        Ok(out)
    }

    /// Gather rows of `table[v, d]` by id; backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        self.check_open()?;
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::shape(format!("embedding: table must be 2-D, got {:?}", tshape)));
        }
        let (v, d) = (tshape[0], tshape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        let src = &self.tensors[table.0].data;
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::usage(format!(
                    "embedding: token id {} out of range for vocab {}",
                    id, v
                )));
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        let out = self.push(vec![ids.len(), d], data, rg);
        self.record(Node::Embedding {
            table,
            ids: ids.iter().map(|&i| i as usize).collect(),
            out,
        });
        Ok(out)
    }

    /// Normalize over the last axis with learned gain/shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId> {
        self.check_open()?;
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || d == 0 {
            return Err(Error::shape(format!(
                "layer_norm: x {:?} incompatible with gamma {:?} / beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let gdata = self.tensors[gamma.0].data.clone();
        let bdata = self.tensors[beta.0].data.clone();
        let src = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; src.len()];
        for (lane, out_lane) in src.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            for i in 0..d {
                let xhat = ((lane[i] as f64 - mean) * inv_std) as f32;
                out_lane[i] = xhat * gdata[i] + bdata[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(self.shape(x).to_vec(), data, rg);
        self.record(Node::LayerNorm { x, gamma, beta, eps, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        let out = self.push(self.shape(x).to_vec(), data, rg);
        self.record(Node::Relu { x, out });
        Ok(out)
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). Eval mode is simply
    /// not recording this op, which is bit-identical to the identity.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, p: f32, rng: &mut R) -> Result<TensorId> {
        self.check_open()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::usage(format!("dropout: p must be in [0, 1), got {}", p)));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.numel(x))
            .map(|_| if rng.gen::<f32>() >= p { keep } else { 0.0 })
            .collect();
        let data: Vec<f32> =
            self.tensors[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        let out = self.push(self.shape(x).to_vec(), data, rg);
        self.record(Node::Dropout { x, mask, out });
        Ok(out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.check_open()?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let src = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; src.len()];
        for_each_lane(&shape, axis, |lane_indices| {
            let max = lane_indices.iter().map(|&i| src[i]).fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &i in lane_indices {
                let e = (src[i] - max).exp();
                data[i] = e;
                denom += e as f64;
            }
            for &i in lane_indices {
                data[i] = (data[i] as f64 / denom) as f32;
            }
        });
        let rg = self.rg(x);
        let out = self.push(shape, data, rg);
        self.record(Node::Softmax { x, axis, out });
        Ok(out)
    }

    /// Per-position cross entropy of `logits[n, v]` against the smoothed
    /// distribution that puts 1-epsilon on the gold id and epsilon/(v-1) on
    /// every other id. Output is `[n]`; pad positions contribute 0.
    pub fn smoothed_ce(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        pad_id: u32,
        epsilon: f32,
    ) -> Result<TensorId> {
        self.check_open()?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "smoothed_ce: logits {:?} incompatible with {} targets",
                shape,
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::usage(format!(
                "smoothed_ce: epsilon must be in [0, 1), got {}",
                epsilon
            )));
        }
        let v = shape[1];
        let src = &self.tensors[logits.0].data;
        let mut losses = vec![0.0f32; targets.len()];
        let mut lses = vec![0.0f32; targets.len()];
        let off_mass = if v > 1 { epsilon / (v as f32 - 1.0) } else { 0.0 };
        for (row, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t as usize >= v {
                return Err(Error::usage(format!(
                    "smoothed_ce: target id {} out of range for vocab {}",
                    t, v
                )));
            }
            let lane = &src[row * v..(row + 1) * v];
            let max = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = lane.iter().map(|&l| ((l - max) as f64).exp()).sum();
            let lse = max + (sum.ln() as f32);
            lses[row] = lse;
            let gold_lp = lane[t as usize] - lse;
            if epsilon == 0.0 {
                losses[row] = -gold_lp;
            } else {
                let sum_lp: f64 = lane.iter().map(|&l| (l - lse) as f64).sum();
                let gold_coef = 1.0 - epsilon - off_mass;
                losses[row] =
                    -((gold_coef as f64 * gold_lp as f64 + off_mass as f64 * sum_lp) as f32);
            }
        }
        let rg = self.rg(logits);
        let out = self.push(vec![targets.len()], losses, rg);
        self.record(Node::SmoothedCe {
            logits,
            targets: targets.to_vec(),
            pad_id,
            epsilon,
            lse: lses,
            out,
        });
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor. Accumulates in f64.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let s: f64 = self.tensors[x.0].data.iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        let out = self.push(vec![1], vec![s as f32], rg);
        self.record(Node::SumAll { x, out });
        Ok(out)
    }

    fn check_same_shape(&self, op: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{}: lhs {:?} incompatible with rhs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor
    /// that requires gradients and is reachable from the loss. Gradients
    /// accumulate additively across multiple uses of a tensor.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.done {
            return Err(Error::usage(
                "tape already consumed by backward(); tapes are single-shot",
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::usage("backward: tape is empty"));
        }
        self.done = true;
        self.tensors[loss.0].grad = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            let node = self.nodes[idx].clone();
            self.backward_node(&node);
        }
        Ok(())
    }

    fn take_out_grad(&self, out: TensorId) -> Option<Vec<f32>> {
        self.tensors[out.0].grad.clone()
    }

    fn acc_grad(&mut self, id: TensorId, add: &[f32]) {
        if !self.rg(id) {
            return;
        }
        let n = self.tensors[id.0].numel();
        debug_assert_eq!(add.len(), n);
        match &mut self.tensors[id.0].grad {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += ai;
                }
            }
            None => self.tensors[id.0].grad = Some(add.to_vec()),
        }
    }

    /// Gradient buffer for in-place accumulation (matmul backward).
    fn grad_buf(&mut self, id: TensorId) -> &mut [f32] {
        let n = self.tensors[id.0].numel();
        self.tensors[id.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_node(&mut self, node: &Node) {
        match node {
            Node::Matmul { a, b, out, trans_b } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let ashape = self.shape(*a).to_vec();
                let bshape = self.shape(*b).to_vec();
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = if *trans_b {
                    bshape[bshape.len() - 2]
                } else {
                    bshape[bshape.len() - 1]
                };
                let batch: usize = ashape[..ashape.len() - 2].iter().product();
                let b_shared = bshape.len() == 2 && ashape.len() > 2;
                if self.rg(*a) {
                    let bdata = self.tensors[b.0].data.clone();
                    let da = self.grad_buf(*a);
                    if b_shared {
                        // dA = dC @ B^T (nn) or dC @ B (nt), batch collapsed.
                        let kind = if *trans_b { GemmKind::Nn } else { GemmKind::Nt };
                        gemm(da, batch * m, k, n, &dout, &bdata, kind);
                    } else {
                        let kind = if *trans_b { GemmKind::Nn } else { GemmKind::Nt };
                        for i in 0..batch {
                            gemm(
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                                &dout[i * m * n..(i + 1) * m * n],
                                &bdata[i * k * n..(i + 1) * k * n],
                                kind,
                            );
                        }
                    }
                }
                if self.rg(*b) {
                    let adata = self.tensors[a.0].data.clone();
                    let db = self.grad_buf(*b);
                    if b_shared {
                        if *trans_b {
                            // dB = dC^T @ A, collapsed over batch rows.
                            gemm(db, n, k, batch * m, &dout, &adata, GemmKind::Tn);
                        } else {
                            gemm(db, k, n, batch * m, &adata, &dout, GemmKind::Tn);
                        }
                    } else {
                        for i in 0..batch {
                            let (dc, av) =
                                (&dout[i * m * n..(i + 1) * m * n], &adata[i * m * k..(i + 1) * m * k]);
                            if *trans_b {
                                gemm(
                                    &mut db[i * n * k..(i + 1) * n * k],
                                    n,
                                    k,
                                    m,
                                    dc,
                                    av,
                                    GemmKind::Tn,
                                );
                            } else {
                                gemm(
                                    &mut db[i * k * n..(i + 1) * k * n],
                                    k,
                                    n,
                                    m,
                                    av,
                                    dc,
                                    GemmKind::Tn,
                                );
                            }
                        }
                    }
                }
            }
            Node::Add { a, b, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                self.acc_grad(*a, &dout);
                self.acc_grad(*b, &dout);
            }
            Node::Sub { a, b, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                self.acc_grad(*a, &dout);
                let neg: Vec<f32> = dout.iter().map(|v| -v).collect();
                self.acc_grad(*b, &neg);
            }
            Node::Mul { a, b, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                if self.rg(*a) {
                    let da: Vec<f32> =
                        dout.iter().zip(&self.tensors[b.0].data).map(|(d, v)| d * v).collect();
                    self.acc_grad(*a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f32> =
                        dout.iter().zip(&self.tensors[a.0].data).map(|(d, v)| d * v).collect();
                    self.acc_grad(*b, &db);
                }
            }
            Node::Scale { x, c, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let dx: Vec<f32> = dout.iter().map(|d| d * c).collect();
                self.acc_grad(*x, &dx);
            }
            Node::AddBias { x, bias, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                self.acc_grad(*x, &dout);
                if self.rg(*bias) {
                    let d = self.numel(*bias);
                    let mut db = vec![0.0f32; d];
                    for row in dout.chunks_exact(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc_grad(*bias, &db);
                }
            }
            Node::ScaleRows { x, g, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let b = self.numel(*g);
                let row = self.numel(*x) / b;
                if self.rg(*x) {
                    let gdata = self.tensors[g.0].data.clone();
                    let mut dx = dout.clone();
                    for (i, chunk) in dx.chunks_exact_mut(row).enumerate() {
                        for v in chunk {
                            *v *= gdata[i];
                        }
                    }
                    self.acc_grad(*x, &dx);
                }
                if self.rg(*g) {
                    let xdata = &self.tensors[x.0].data;
                    let mut dg = vec![0.0f32; b];
                    for i in 0..b {
                        let mut s = 0.0f64;
                        for j in 0..row {
                            s += (xdata[i * row + j] as f64) * (dout[i * row + j] as f64);
                        }
                        dg[i] = s as f32;
                    }
                    self.acc_grad(*g, &dg);
                }
            }
            Node::Reshape { x, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                self.acc_grad(*x, &dout);
            }
            Node::TransposeLast { x, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let oshape = self.shape(*out).to_vec();
                let (r, c) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
                let batch: usize = oshape[..oshape.len() - 2].iter().product();
                let mut dx = vec![0.0f32; dout.len()];
                for bi in 0..batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            dx[off + j * r + i] = dout[off + i * c + j];
                        }
                    }
                }
                self.acc_grad(*x, &dx);
            }
            Node::Concat { inputs, axis, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let oshape = self.shape(*out).to_vec();
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[*axis + 1..].iter().product();
                let out_stride = oshape[*axis] * inner;
                let mut col = 0usize;
                for &t in inputs {
                    let len = self.shape(t)[*axis];
                    let chunk = len * inner;
                    if self.rg(t) {
                        let mut dx = vec![0.0f32; self.numel(t)];
                        for o in 0..outer {
                            let src = o * out_stride + col * inner;
                            dx[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&dout[src..src + chunk]);
                        }
                        self.acc_grad(t, &dx);
                    }
                    col += len;
                }
            }
            Node::SliceLast { x, start, len, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let d = *self.shape(*x).last().unwrap();
                let rows = self.numel(*x) / d;
                let mut dx = vec![0.0f32; self.numel(*x)];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&dout[r * len..(r + 1) * len]);
                }
                self.acc_grad(*x, &dx);
            }
            Node::Embedding { table, ids, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0f32; self.numel(*table)];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dout[row * d + j];
                        }
                    }
                    self.acc_grad(*table, &dt);
                }
            }
            Node::LayerNorm { x, gamma, beta, eps, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let d = self.numel(*gamma);
                let xdata = self.tensors[x.0].data.clone();
                let gdata = self.tensors[gamma.0].data.clone();
                let lanes = xdata.len() / d;
                let mut dx = vec![0.0f32; xdata.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for lane in 0..lanes {
                    let xs = &xdata[lane * d..(lane + 1) * d];
                    let dys = &dout[lane * d..(lane + 1) * d];
                    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var =
                        xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + *eps as f64).sqrt();
                    let mut mean_g = 0.0f64;
                    let mut mean_gx = 0.0f64;
                    let mut xhat = vec![0.0f64; d];
                    for i in 0..d {
                        xhat[i] = (xs[i] as f64 - mean) * inv_std;
                        let g = dys[i] as f64 * gdata[i] as f64;
                        mean_g += g;
                        mean_gx += g * xhat[i];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for i in 0..d {
                        let g = dys[i] as f64 * gdata[i] as f64;
                        dx[lane * d + i] = ((g - mean_g - xhat[i] * mean_gx) * inv_std) as f32;
                        dgamma[i] += (dys[i] as f64 * xhat[i]) as f32;
                        dbeta[i] += dys[i];
                    }
                }
                self.acc_grad(*x, &dx);
                self.acc_grad(*gamma, &dgamma);
                self.acc_grad(*beta, &dbeta);
            }
            Node::Relu { x, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let dx: Vec<f32> = dout
                    .iter()
                    .zip(&self.tensors[x.0].data)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.acc_grad(*x, &dx);
            }
            Node::Dropout { x, mask, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let dx: Vec<f32> = dout.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.acc_grad(*x, &dx);
            }
            Node::Softmax { x, axis, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let shape = self.shape(*out).to_vec();
                let ydata = self.tensors[out.0].data.clone();
                let mut dx = vec![0.0f32; ydata.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let s: f64 =
                        lane.iter().map(|&i| dout[i] as f64 * ydata[i] as f64).sum();
                    for &i in lane {
                        dx[i] = (ydata[i] as f64 * (dout[i] as f64 - s)) as f32;
                    }
                });
                self.acc_grad(*x, &dx);
            }
            Node::SmoothedCe { logits, targets, pad_id, epsilon, lse, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                if !self.rg(*logits) {
                    return;
                }
                let v = self.shape(*logits)[1];
                let src = self.tensors[logits.0].data.clone();
                let mut dl = vec![0.0f32; src.len()];
                let off_mass = if v > 1 { epsilon / (v as f32 - 1.0) } else { 0.0 };
                let gold_coef = 1.0 - epsilon;
                for (row, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    let delta = dout[row];
                    if delta == 0.0 {
                        continue;
                    }
                    let lane = &src[row * v..(row + 1) * v];
                    for (j, &l) in lane.iter().enumerate() {
                        let p = (l - lse[row]).exp();
                        let q = if j == t as usize { gold_coef } else { off_mass };
                        dl[row * v + j] = delta * (p - q);
                    }
                }
                self.acc_grad(*logits, &dl);
            }
            Node::SumAll { x, out } => {
                let Some(dout) = self.take_out_grad(*out) else { return };
                let dx = vec![dout[0]; self.numel(*x)];
                self.acc_grad(*x, &dx);
            }
        }
    }
}

/// Visit every lane along `axis`; the callback receives the flat indices of
/// one lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = o * axis_len * inner + k * inner + i;
            }
            f(&lane);
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum GemmKind {
    /// c += a[m,k] @ b[k,n]
    Nn,
    /// c += a[m,k] @ b[n,k]^T
    Nt,
    /// c += a[k,m]^T @ b[k,n]  (a stored with m as its column dim)
    Tn,
}

/// Under this many multiply-adds the packing overhead of the blocked kernel
/// outweighs its throughput; use plain loops instead.
const GEMM_NAIVE_LIMIT: usize = 16384;

/// `c[m,n] += op(a) @ op(b)`. `c` must already hold the values to
/// accumulate onto (zeros for a fresh product).
fn gemm(c: &mut [f32], m: usize, n: usize, k: usize, a: &[f32], b: &[f32], kind: GemmKind) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m * n * k < GEMM_NAIVE_LIMIT {
        match kind {
            GemmKind::Nn => {
                for i in 0..m {
                    let crow = &mut c[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            GemmKind::Nt => {
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b[j * k..(j + 1) * k];
                        let dot: f32 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        c[i * n + j] += dot;
                    }
                }
            }
            GemmKind::Tn => {
                // a physically [k, m].
                for p in 0..k {
                    let arow = &a[p * m..(p + 1) * m];
                    let brow = &b[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = arow[i];
                        if av == 0.0 {
                            continue;
                        }
                        let crow = &mut c[i * n..(i + 1) * n];
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }
        return;
    }
    let (rsa, csa) = match kind {
        GemmKind::Nn | GemmKind::Nt => (k as isize, 1),
        GemmKind::Tn => (1, m as isize),
    };
    let (rsb, csb) = match kind {
        GemmKind::Nn | GemmKind::Tn => (n as isize, 1),
        GemmKind::Nt => (1, k as isize),
    };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], &[4, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut t = Tape::new();
        let a = t.constant((0..6).map(|v| v as f32).collect(), &[2, 3]).unwrap();
        let b = t.constant((0..12).map(|v| (v as f32) * 0.5).collect(), &[4, 3]).unwrap();
        let via_nt = t.matmul_nt(a, b).unwrap();
        let bt = t.transpose_last(b).unwrap();
        let via_t = t.matmul(a, bt).unwrap();
        assert_eq!(t.data(via_nt), t.data(via_t));
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_extreme_inputs_are_stable() {
        let mut t = Tape::new();
        let x = t.constant(vec![1000.0, 0.0, -1000.0], &[3]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        let d = t.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1].abs() < 1e-6 && d[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream_rng(3, Stream::Data);
        let mut t = Tape::new();
        let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = t.constant(data, &[2, 3, 4]).unwrap();
        let y = t.softmax(x, 2).unwrap();
        for lane in t.data(y).chunks_exact(4) {
            let s: f32 = lane.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0, -1.0, 0.5], &[3]).unwrap();
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(t.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn grads_accumulate_across_uses() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], &[1]).unwrap();
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = t.relu(x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn record_after_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], &[1]).unwrap();
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.relu(x).is_err());
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut rng = stream_rng(1, Stream::Dropout);
        let mut t = Tape::new();
        let x = t.constant(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let y = t.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(t.data(x), t.data(y));
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut rng = stream_rng(9, Stream::Dropout);
        let mut t = Tape::new();
        let x = t.constant(vec![1.0; 1000], &[1000]).unwrap();
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        for &v in t.data(y) {
            assert!(v == 0.0 || v == 2.0);
        }
        let kept = t.data(y).iter().filter(|&&v| v != 0.0).count();
        assert!((300..700).contains(&kept));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0], &[2, 3]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = t.slice_last(c, 2, 3).unwrap();
        assert_eq!(t.data(back), t.data(b));
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut t = Tape::new();
        let table = t.leaf(vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0], &[3, 2]).unwrap();
        let e = t.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.data(e), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = t.sum_all(e).unwrap();
        t.backward(s).unwrap();
        // Row 2 used twice, row 1 never.
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut t = Tape::new();
        let table = t.leaf(vec![0.0; 6], &[3, 2]).unwrap();
        assert!(t.embedding(table, &[3]).is_err());
    }

    #[test]
    fn smoothed_ce_skips_pad_rows() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![2.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[2, 3]).unwrap();
        let loss = t.smoothed_ce(logits, &[1, 0], 0, 0.1).unwrap();
        let d = t.data(loss);
        assert!(d[0] > 0.0);
        assert_eq!(d[1], 0.0);
        let s = t.sum_all(loss).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(logits).unwrap();
        assert!(g[..3].iter().any(|&v| v != 0.0));
        assert!(g[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_rows_gradient_is_row_contraction() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let g = t.leaf(vec![1.0, 0.5], &[2]).unwrap();
        let y = t.scale_rows(x, g).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 1.5, 2.0]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(g).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn gemm_paths_agree() {
        // Same product through the naive and blocked kernels.
        let mut rng = stream_rng(5, Stream::Data);
        let (m, n, k) = (40, 40, 40); // m*n*k = 64000 > naive limit
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c_big = vec![0.0f32; m * n];
        gemm(&mut c_big, m, n, k, &a, &b, GemmKind::Nn);
        // Naive reference.
        let mut c_ref = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c_ref[i * n + j] = s;
            }
        }
        for (x, y) in c_big.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-3, "{} vs {}", x, y);
        }
    }
}
