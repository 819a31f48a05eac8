//! Reverse-mode differentiation over a linear operation tape.
//!
//! Operations append nodes to the tape; every node's inputs precede it,
//! so the record is topologically ordered by construction and cycles are
//! unrepresentable. `backward` walks the record in reverse, accumulating
//! vector-Jacobian products into the leaves.

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Scalar, Tensor};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    /// `a @ b^T` where `a` is `m x k` and `b` is `n x k`.
    MatMulTransB { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: T },
    AddBias { x: TensorId, bias: TensorId },
    MulBias { x: TensorId, gain: TensorId },
    Silu { x: TensorId },
    SumAll { x: TensorId },
    RowSums { x: TensorId },
    TrilMask { x: TensorId },
    DivRows { num: TensorId, den: TensorId },
    SoftmaxCausalRows { logits: TensorId },
    CumSoftmax { scores: TensorId },
    ScoresBroadcastCausal { scores: TensorId },
    RmsNorm { x: TensorId, gain: TensorId, inv_rms: Vec<T> },
    Rope { x: TensorId, base: T, positions: Vec<usize> },
    Embedding { table: TensorId, ids: Vec<u32> },
    SliceCols { x: TensorId, start: usize, len: usize },
    SliceRows { x: TensorId, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    CrossEntropy { logits: TensorId, targets: Vec<u32>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a differentiable input if it has
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        let value = value.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Clone of the leaf tensor with its gradient populated (if any).
    pub fn leaf_with_grad(&self, id: TensorId) -> Tensor<T> {
        let mut t = self.nodes[id.0].value.clone();
        if let Some(g) = self.grad(id) {
            t.set_grad(g.to_vec());
        }
        t
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check2d(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch {
                op,
                expected: "rank 1 or 2".into(),
                got: format!("{s:?}"),
            }),
        }
    }

    // ─── forward ops ────────────────────────────────────────────────

    /// Standard matrix product `[m x k] @ [k x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check2d("matmul", a)?;
        let (kb, n) = self.check2d("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dims equal, lhs {m}x{ka}"),
                got: format!("rhs {kb}x{n}"),
            });
        }
        let mut out = crate::tensor::uninit_vec(m * n);
        T::gemm(false, false, m, ka, n, self.data(a), self.data(b), &mut out);
        ensure_finite("matmul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new_unchecked(vec![m, n], out), Op::MatMul { a, b }, needs))
    }

    /// `a @ b^T` with `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_trans_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check2d("matmul_trans_b", a)?;
        let (n, kb) = self.check2d("matmul_trans_b", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_trans_b",
                expected: format!("shared inner dim, lhs {m}x{ka}"),
                got: format!("rhs {n}x{kb}"),
            });
        }
        let mut out = crate::tensor::uninit_vec(m * n);
        T::gemm(false, true, m, ka, n, self.data(a), self.data(b), &mut out);
        ensure_finite("matmul_trans_b", &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new_unchecked(vec![m, n], out),
            Op::MatMulTransB { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        ensure_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new_unchecked(shape, out), Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        ensure_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new_unchecked(shape, out), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        ensure_finite("scale", &out)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new_unchecked(shape, out), Op::Scale { a, c }, needs))
    }

    /// `[r x c] + [c]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("add_bias", x)?;
        if self.data(bias).len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                expected: format!("bias of length {c}"),
                got: format!("{:?}", self.shape(bias)),
            });
        }
        let xs = self.data(x);
        let bs = self.data(bias);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xs[i * c + j] + bs[j]);
            }
        }
        ensure_finite("add_bias", &out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new_unchecked(vec![r, c], out), Op::AddBias { x, bias }, needs))
    }

    /// `[r x c] * [c]`, gain broadcast over rows.
    pub fn mul_bias(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("mul_bias", x)?;
        if self.data(gain).len() != c {
            return Err(Error::ShapeMismatch {
                op: "mul_bias",
                expected: format!("gain of length {c}"),
                got: format!("{:?}", self.shape(gain)),
            });
        }
        let xs = self.data(x);
        let gs = self.data(gain);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xs[i * c + j] * gs[j]);
            }
        }
        ensure_finite("mul_bias", &out)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(Tensor::new_unchecked(vec![r, c], out), Op::MulBias { x, gain }, needs))
    }

    /// Element-wise `x * sigmoid(x)`.
    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        ensure_finite("silu", &out)?;
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new_unchecked(shape, out), Op::Silu { x }, needs))
    }

    /// Sum of all elements, producing a scalar `[1]`.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        ensure_finite("sum_all", &[acc])?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![1], vec![acc])?, Op::SumAll { x }, needs))
    }

    /// Per-row sums: `[r x c] -> [r x 1]`.
    pub fn row_sums(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("row_sums", x)?;
        let xs = self.data(x);
        let out: Vec<T> = (0..r)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..c {
                    acc += xs[i * c + j];
                }
                acc
            })
            .collect();
        ensure_finite("row_sums", &out)?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new_unchecked(vec![r, 1], out), Op::RowSums { x }, needs))
    }

    /// Zero the strict upper triangle of a square matrix.
    pub fn tril_mask(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("tril_mask", x)?;
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "tril_mask",
                expected: "square matrix".into(),
                got: format!("{r}x{c}"),
            });
        }
        let xs = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            out[i * c..i * c + i + 1].copy_from_slice(&xs[i * c..i * c + i + 1]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new_unchecked(vec![r, c], out), Op::TrilMask { x }, needs))
    }

    /// Per-row division `num[i, j] / den[i, 0]`, failing when any
    /// denominator magnitude drops below `guard_eps`. The guard is an
    /// error, not a clamp, so instability stays visible.
    pub fn div_rows_guarded(
        &mut self,
        num: TensorId,
        den: TensorId,
        guard_eps: T,
        layer: usize,
        head: usize,
    ) -> Result<TensorId> {
        let (r, c) = self.check2d("div_rows", num)?;
        let (rd, cd) = self.check2d("div_rows", den)?;
        if rd != r || cd != 1 {
            return Err(Error::ShapeMismatch {
                op: "div_rows",
                expected: format!("{r}x1 denominator"),
                got: format!("{rd}x{cd}"),
            });
        }
        for (i, &d) in self.data(den).iter().enumerate() {
            if d.abs() < guard_eps {
                return Err(Error::DenominatorUnderflow {
                    layer,
                    head,
                    position: i,
                    eps: guard_eps.to_f64_lossy(),
                });
            }
        }
        let ns = self.data(num);
        let ds = self.data(den);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let inv = T::one() / ds[i];
            for j in 0..c {
                out.push(ns[i * c + j] * inv);
            }
        }
        ensure_finite("div_rows", &out)?;
        let needs = self.needs(num) || self.needs(den);
        Ok(self.push(Tensor::new_unchecked(vec![r, c], out), Op::DivRows { num, den }, needs))
    }

    /// Causal row softmax of a square logit matrix: row `i` is a
    /// probability distribution over columns `0..=i`, stabilized by
    /// row-max subtraction; the strict upper triangle is exactly zero.
    pub fn softmax_causal_rows(&mut self, logits: TensorId) -> Result<TensorId> {
        let (r, c) = self.check2d("softmax_causal_rows", logits)?;
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "softmax_causal_rows",
                expected: "square matrix".into(),
                got: format!("{r}x{c}"),
            });
        }
        let xs = self.data(logits);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..i * c + i + 1];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            let inv = T::one() / z;
            for j in 0..=i {
                out[i * c + j] *= inv;
            }
        }
        ensure_finite("softmax_causal_rows", &out)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new_unchecked(vec![r, c], out),
            Op::SoftmaxCausalRows { logits },
            needs,
        ))
    }

    /// Causal cumulative softmax over per-position scores: given scores
    /// `s[j]`, produces `A[i, j] = exp(s_j) / sum_{j' <= i} exp(s_j')`
    /// for `j <= i`, stabilized per row by the running maximum.
    pub fn cum_softmax(&mut self, scores: TensorId) -> Result<TensorId> {
        let n = self.data(scores).len();
        let s = self.data(scores).to_vec();
        let mut out = vec![T::zero(); n * n];
        let mut run_max = T::neg_infinity();
        for i in 0..n {
            if s[i] > run_max {
                run_max = s[i];
            }
            let mut z = T::zero();
            for (j, &v) in s.iter().take(i + 1).enumerate() {
                let e = (v - run_max).exp();
                out[i * n + j] = e;
                z += e;
            }
            let inv = T::one() / z;
            for j in 0..=i {
                out[i * n + j] *= inv;
            }
        }
        ensure_finite("cum_softmax", &out)?;
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::new_unchecked(vec![n, n], out),
            Op::CumSoftmax { scores },
            needs,
        ))
    }

    /// Broadcast per-position scores over the causal support:
    /// `Y[i, j] = s_j` for `j <= i`, zero above the diagonal.
    pub fn scores_broadcast_causal(&mut self, scores: TensorId) -> Result<TensorId> {
        let n = self.data(scores).len();
        let s = self.data(scores);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            out[i * n..i * n + i + 1].copy_from_slice(&s[..i + 1]);
        }
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::new_unchecked(vec![n, n], out),
            Op::ScoresBroadcastCausal { scores },
            needs,
        ))
    }

    /// Root-mean-square normalization over the last dimension with a
    /// learned gain: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId, eps: T) -> Result<TensorId> {
        let (r, c) = self.check2d("rms_norm", x)?;
        if self.data(gain).len() != c {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                expected: format!("gain of length {c}"),
                got: format!("{:?}", self.shape(gain)),
            });
        }
        let xs = self.data(x);
        let gs = self.data(gain);
        let mut inv_rms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        let dim = T::from_f64(c as f64);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mut ms = T::zero();
            for &v in row {
                ms += v * v;
            }
            let inv = T::one() / (ms / dim + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out.push(row[j] * inv * gs[j]);
            }
        }
        ensure_finite("rms_norm", &out)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(
            Tensor::new_unchecked(vec![r, c], out),
            Op::RmsNorm { x, gain, inv_rms },
            needs,
        ))
    }

    /// Rotary position embedding over adjacent feature pairs. Row `r`
    /// of `x` is rotated by angles `positions[r] * base^(-2p/d)` for
    /// pair index `p`. Position 0 is the identity.
    pub fn rope(&mut self, x: TensorId, base: T, positions: &[usize]) -> Result<TensorId> {
        let (r, d) = self.check2d("rope", x)?;
        if d % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                expected: "even feature dimension".into(),
                got: format!("{d}"),
            });
        }
        if positions.len() != r {
            return Err(Error::ShapeMismatch {
                op: "rope",
                expected: format!("{r} positions"),
                got: format!("{}", positions.len()),
            });
        }
        let out = rope_forward(self.data(x), r, d, base, positions, false);
        ensure_finite("rope", &out)?;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new_unchecked(vec![r, d], out),
            Op::Rope { x, base, positions: positions.to_vec() },
            needs,
        ))
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (v, d) = self.check2d("embedding", table)?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let ts = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&ts[id as usize * d..(id as usize + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new_unchecked(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            needs,
        ))
    }

    /// Column slice `[.., start..start+len]`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.check2d("slice_cols", x)?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                expected: format!("start+len <= {c}"),
                got: format!("{start}+{len}"),
            });
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new_unchecked(vec![r, len], out),
            Op::SliceCols { x, start, len },
            needs,
        ))
    }

    /// Keep the first `len` rows.
    pub fn slice_rows(&mut self, x: TensorId, len: usize) -> Result<TensorId> {
        let (r, c) = self.check2d("slice_rows", x)?;
        if len > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                expected: format!("len <= {r}"),
                got: format!("{len}"),
            });
        }
        let out = self.data(x)[..len * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new_unchecked(vec![len, c], out),
            Op::SliceRows { x, len },
            needs,
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                expected: "at least one part".into(),
                got: "0".into(),
            });
        }
        let (r, _) = self.check2d("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.check2d("concat_cols", p)?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{r} rows"),
                    got: format!("{rp}"),
                });
            }
            widths.push(cp);
            total += cp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (pi, &p) in parts.iter().enumerate() {
                let c = widths[pi];
                let xs = self.data(p);
                out.extend_from_slice(&xs[i * c..(i + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new_unchecked(vec![r, total], out),
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, in nats. Produces a scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let (r, c) = self.check2d("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("{r} targets"),
                got: format!("{}", targets.len()),
            });
        }
        for &t in targets {
            if t as usize >= c {
                return Err(Error::TokenOutOfRange { id: t, vocab: c });
            }
        }
        let xs = self.data(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            let inv = T::one() / z;
            for j in 0..c {
                probs[i * c + j] *= inv;
            }
            let t = targets[i] as usize;
            loss += -(row[t] - max - z.ln());
        }
        loss = loss / T::from_f64(r as f64);
        ensure_finite("cross_entropy", &[loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    // ─── backward ───────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Populates gradients for every reachable node that needs one; leaf
    /// tensors also receive their gradient in `Tensor::grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::LossNotScalar {
                got: format!("{:?}", self.shape(loss)),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.apply_vjp(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        // Populate leaf tensor gradients per the tensor contract.
        for idx in 0..n {
            if let (Op::Leaf, Some(g)) = (&self.nodes[idx].op, &grads[idx]) {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.set_grad(g.clone());
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: TensorId, delta: Vec<T>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = crate::tensor::uninit_vec(m * k);
                    T::gemm(false, true, m, n, k, dy, self.data(*b), &mut da);
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = crate::tensor::uninit_vec(k * n);
                    T::gemm(true, false, k, m, n, self.data(*a), dy, &mut db);
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::MatMulTransB { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    let mut da = crate::tensor::uninit_vec(m * k);
                    T::gemm(false, false, m, n, k, dy, self.data(*b), &mut da);
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = crate::tensor::uninit_vec(n * k);
                    T::gemm(true, false, n, m, k, dy, self.data(*a), &mut db);
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, dy.to_vec());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<T> = dy.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = dy.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let da: Vec<T> = dy.iter().map(|&g| g * *c).collect();
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::AddBias { x, bias } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                if self.needs(*x) {
                    Self::accumulate(grads, *x, dy.to_vec());
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                    Self::accumulate(grads, *bias, db);
                }
            }
            Op::MulBias { x, gain } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gs = self.data(*gain);
                let xs = self.data(*x);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dy[i * c + j] * gs[j];
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xs[i * c + j];
                        }
                    }
                    Self::accumulate(grads, *gain, dg);
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let dx = vec![dy[0]; self.data(*x).len()];
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::RowSums { x } => {
                if self.needs(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dy[i];
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::TrilMask { x } => {
                if self.needs(*x) {
                    let n = node.value.shape()[0];
                    let mut dx = vec![T::zero(); n * n];
                    for i in 0..n {
                        dx[i * n..i * n + i + 1].copy_from_slice(&dy[i * n..i * n + i + 1]);
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::DivRows { num, den } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let ds = self.data(*den);
                if self.needs(*num) {
                    let mut dn = vec![T::zero(); r * c];
                    for i in 0..r {
                        let inv = T::one() / ds[i];
                        for j in 0..c {
                            dn[i * c + j] = dy[i * c + j] * inv;
                        }
                    }
                    Self::accumulate(grads, *num, dn);
                }
                if self.needs(*den) {
                    let ys = node.value.data();
                    let mut dd = vec![T::zero(); r];
                    for i in 0..r {
                        let mut acc = T::zero();
                        for j in 0..c {
                            acc += dy[i * c + j] * ys[i * c + j];
                        }
                        dd[i] = -acc / ds[i];
                    }
                    Self::accumulate(grads, *den, dd);
                }
            }
            Op::SoftmaxCausalRows { logits } => {
                if self.needs(*logits) {
                    let n = node.value.shape()[0];
                    let ys = node.value.data();
                    let mut dx = vec![T::zero(); n * n];
                    for i in 0..n {
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += dy[i * n + j] * ys[i * n + j];
                        }
                        for j in 0..=i {
                            dx[i * n + j] = ys[i * n + j] * (dy[i * n + j] - dot);
                        }
                    }
                    Self::accumulate(grads, *logits, dx);
                }
            }
            Op::CumSoftmax { scores } => {
                if self.needs(*scores) {
                    let n = node.value.shape()[0];
                    let ys = node.value.data();
                    let sn = self.data(*scores).len();
                    let mut ds = vec![T::zero(); sn];
                    for i in 0..n {
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += dy[i * n + j] * ys[i * n + j];
                        }
                        for j in 0..=i {
                            ds[j] += ys[i * n + j] * (dy[i * n + j] - dot);
                        }
                    }
                    Self::accumulate(grads, *scores, ds);
                }
            }
            Op::ScoresBroadcastCausal { scores } => {
                if self.needs(*scores) {
                    let n = node.value.shape()[0];
                    let sn = self.data(*scores).len();
                    let mut ds = vec![T::zero(); sn];
                    for i in 0..n {
                        for j in 0..=i {
                            ds[j] += dy[i * n + j];
                        }
                    }
                    Self::accumulate(grads, *scores, ds);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let xs = self.data(*x);
                let gs = self.data(*gain);
                let dim = T::from_f64(c as f64);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += dy[i * c + j] * gs[j] * xs[i * c + j];
                        }
                        let coef = inv * inv * inv * dot / dim;
                        for j in 0..c {
                            dx[i * c + j] = dy[i * c + j] * gs[j] * inv - xs[i * c + j] * coef;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for i in 0..r {
                        let inv = inv_rms[i];
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xs[i * c + j] * inv;
                        }
                    }
                    Self::accumulate(grads, *gain, dg);
                }
            }
            Op::Rope { x, base, positions } => {
                if self.needs(*x) {
                    let (r, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let dx = rope_forward(dy, r, d, *base, positions, true);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                    let mut dt = vec![T::zero(); v * d];
                    for (i, &id) in ids.iter().enumerate() {
                        let row = id as usize * d;
                        for j in 0..d {
                            dt[row + j] += dy[i * d + j];
                        }
                    }
                    Self::accumulate(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..*len {
                            dx[i * c + start + j] = dy[i * len + j];
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SliceRows { x, len } => {
                if self.needs(*x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![T::zero(); r * c];
                    dx[..len * c].copy_from_slice(dy);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let r = node.value.shape()[0];
                let mut start = 0usize;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![T::zero(); r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&dy[i * total + start..i * total + start + c]);
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    start += c;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let (r, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let scale = dy[0] / T::from_f64(r as f64);
                    let mut dl = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dl[i * c + j] = probs[i * c + j] * scale;
                        }
                        dl[i * c + targets[i] as usize] -= scale;
                    }
                    Self::accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Shared rotary kernel: `invert` rotates by the negative angle, which
/// is both the inverse rotation and the VJP of the forward op.
fn rope_forward<T: Scalar>(
    xs: &[T],
    rows: usize,
    d: usize,
    base: T,
    positions: &[usize],
    invert: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    let half = d / 2;
    for (r, &pos) in positions.iter().enumerate().take(rows) {
        for p in 0..half {
            let exponent = -2.0 * (p as f64) / (d as f64);
            let freq = base.to_f64_lossy().powf(exponent);
            let mut angle = T::from_f64(pos as f64 * freq);
            if invert {
                angle = -angle;
            }
            let (sin, cos) = (angle.sin(), angle.cos());
            let a = xs[r * d + 2 * p];
            let b = xs[r * d + 2 * p + 1];
            out[r * d + 2 * p] = a * cos - b * sin;
            out[r * d + 2 * p + 1] = a * sin + b * cos;
        }
    }
    out
}
