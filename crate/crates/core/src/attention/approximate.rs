//! Taylor-approximate attention.
//!
//! The softmax weighting is replaced by a second-order Taylor expansion
//! of the exponential. Two normalizations are supported:
//!
//! * `Split` (default): the zeroth/first/second-order terms are each
//!   normalized by their own causal denominator and summed. The
//!   second-order feature is the element-wise square `k^2/sqrt(2)`, so
//!   the per-token state stays `O(d_h^2)` per head.
//! * `Shared`: weights `phi(x) = 1 + x + x^2/2` with the true scalar
//!   `x = q.k/sqrt(d_h)`, normalized by one causal row denominator.
//!   Since `phi(x) >= 1/2`, this denominator can never vanish.
//!
//! Both modes have an exact recurrent form evaluated token by token,
//! used as the equivalence oracle for the parallel path.

use crate::attention::{
    matvec, project_split_rope, rope_row_inplace, split_heads, AttentionOutput, AttnIds,
    AttnParams, Capture,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Magnitude guard for the per-term causal denominators. Falling below
/// it is an error, never a clamp, so instability stays visible.
pub const EPS_DEN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxMode {
    #[default]
    Split,
    Shared,
}

impl ApproxMode {
    pub fn tag(self) -> &'static str {
        match self {
            ApproxMode::Split => "split",
            ApproxMode::Shared => "shared",
        }
    }
}

/// Uniform causal weights: row `i` holds `1/(i+1)` over columns `0..=i`.
fn uniform_causal<T: Scalar>(l: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); l * l];
    for i in 0..l {
        let w = T::one() / T::from_f64((i + 1) as f64);
        for j in 0..=i {
            data[i * l + j] = w;
        }
    }
    Tensor::new(vec![l, l], data).expect("uniform causal weights are finite")
}

/// Lower-triangular ones (inclusive diagonal).
fn tril_ones<T: Scalar>(l: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); l * l];
    for i in 0..l {
        for j in 0..=i {
            data[i * l + j] = T::one();
        }
    }
    Tensor::new(vec![l, l], data).expect("ones are finite")
}

/// Parallel (full-sequence) Taylor-approximate attention.
pub fn approximate_attention_parallel<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    p: &AttnIds,
    mode: ApproxMode,
    capture: Capture,
    layer: usize,
) -> Result<AttentionOutput> {
    let l = tape.value(hidden).rows();
    let qs = project_split_rope(tape, hidden, p.w_q, p.n_heads, p.rope_base)?;
    let ks = project_split_rope(tape, hidden, p.w_k, p.n_heads, p.rope_base)?;
    let v_full = tape.matmul(hidden, p.w_v)?;
    let vs = split_heads(tape, v_full, p.n_heads)?;

    let d_h = tape.value(qs[0]).cols();
    let eps = T::from_f64(EPS_DEN);
    let inv_sqrt2 = T::from_f64(1.0 / 2.0f64.sqrt());
    let inv_sqrt_dh = T::from_f64(1.0 / (d_h as f64).sqrt());

    let mut outs = Vec::with_capacity(p.n_heads);
    let mut attn = capture.attn.then(Vec::new);
    for h in 0..p.n_heads {
        let weights = match mode {
            ApproxMode::Split => {
                let a0 = tape.constant(uniform_causal::<T>(l));
                let s1 = tape.matmul_trans_b(qs[h], ks[h])?;
                let s1m = tape.tril_mask(s1)?;
                let den1 = tape.row_sums(s1m)?;
                let a1 = tape.div_rows_guarded(s1m, den1, eps, layer, h)?;
                let q_sq = tape.mul(qs[h], qs[h])?;
                let k_sq = tape.mul(ks[h], ks[h])?;
                let phi_q = tape.scale(q_sq, inv_sqrt2)?;
                let phi_k = tape.scale(k_sq, inv_sqrt2)?;
                let s2 = tape.matmul_trans_b(phi_q, phi_k)?;
                let s2m = tape.tril_mask(s2)?;
                let den2 = tape.row_sums(s2m)?;
                let a2 = tape.div_rows_guarded(s2m, den2, eps, layer, h)?;
                let a01 = tape.add(a0, a1)?;
                tape.add(a01, a2)?
            }
            ApproxMode::Shared => {
                let s = tape.matmul_trans_b(qs[h], ks[h])?;
                let x = tape.scale(s, inv_sqrt_dh)?;
                let xm = tape.tril_mask(x)?;
                let x_sq = tape.mul(xm, xm)?;
                let half_sq = tape.scale(x_sq, T::from_f64(0.5))?;
                let ones = tape.constant(tril_ones::<T>(l));
                let lin = tape.add(ones, xm)?;
                let phi = tape.add(lin, half_sq)?;
                let den = tape.row_sums(phi)?;
                tape.div_rows_guarded(phi, den, eps, layer, h)?
            }
        };
        if let Some(av) = attn.as_mut() {
            av.push(weights);
        }
        outs.push(tape.matmul(weights, vs[h])?);
    }
    let concat = tape.concat_cols(&outs)?;
    let out = tape.matmul(concat, p.w_o)?;
    Ok(AttentionOutput { out, attn, prelogits: None })
}

/// Per-head running sums for the recurrent form.
#[derive(Debug, Clone)]
struct HeadState<T> {
    sum_v: Vec<T>,
    sum_k: Vec<T>,
    /// Sum of k^2/sqrt(2) feature rows (split mode).
    sum_k2: Vec<T>,
    /// Sum of k (outer) v, `d_h x d_h`.
    sum_kv: Vec<T>,
    /// Sum of (k^2/sqrt(2)) (outer) v, `d_h x d_h` (split mode).
    sum_k2v: Vec<T>,
    /// Sum of k (kron) k, `d_h^2` (shared mode).
    sum_kk: Vec<T>,
    /// Sum of (k kron k) (outer) v, `d_h^2 x d_h` (shared mode).
    sum_kkv: Vec<T>,
}

impl<T: Scalar> HeadState<T> {
    fn new(d_h: usize, mode: ApproxMode) -> Self {
        let (kk, kkv) = match mode {
            ApproxMode::Split => (0, 0),
            ApproxMode::Shared => (d_h * d_h, d_h * d_h * d_h),
        };
        HeadState {
            sum_v: vec![T::zero(); d_h],
            sum_k: vec![T::zero(); d_h],
            sum_k2: vec![T::zero(); d_h],
            sum_kv: vec![T::zero(); d_h * d_h],
            sum_k2v: vec![T::zero(); d_h * d_h],
            sum_kk: vec![T::zero(); kk],
            sum_kkv: vec![T::zero(); kkv],
        }
    }
}

/// Constant-size state advanced one token at a time.
#[derive(Debug, Clone)]
pub struct ApproxRecurrentState<T> {
    mode: ApproxMode,
    n_heads: usize,
    d_head: usize,
    tokens_seen: usize,
    heads: Vec<HeadState<T>>,
}

impl<T: Scalar> ApproxRecurrentState<T> {
    pub fn new(n_heads: usize, d_head: usize, mode: ApproxMode) -> Self {
        ApproxRecurrentState {
            mode,
            n_heads,
            d_head,
            tokens_seen: 0,
            heads: (0..n_heads).map(|_| HeadState::new(d_head, mode)).collect(),
        }
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn mode(&self) -> ApproxMode {
        self.mode
    }
}

/// One recurrent step: consumes the next hidden-state row, updates the
/// running sums, and returns the mixed output row (after W_O).
pub fn approximate_attention_recurrent<T: Scalar>(
    x_t: &[T],
    p: &AttnParams<T>,
    state: &mut ApproxRecurrentState<T>,
) -> Result<Vec<T>> {
    p.validate()?;
    let d_h = p.d_head();
    if state.n_heads != p.n_heads || state.d_head != d_h {
        return Err(Error::ShapeMismatch {
            op: "approximate_attention_recurrent",
            expected: format!("state for {} heads x {d_h}", p.n_heads),
            got: format!("{} heads x {}", state.n_heads, state.d_head),
        });
    }
    let pos = state.tokens_seen;
    let q_full = matvec(x_t, &p.w_q);
    let k_full = matvec(x_t, &p.w_k);
    let v_full = matvec(x_t, &p.w_v);

    let inv_sqrt2 = T::from_f64(1.0 / 2.0f64.sqrt());
    let inv_sqrt_dh = T::from_f64(1.0 / (d_h as f64).sqrt());
    let eps = T::from_f64(EPS_DEN);
    let count = T::from_f64((pos + 1) as f64);

    let mut mixed = vec![T::zero(); p.d_model()];
    for h in 0..p.n_heads {
        let mut q = q_full[h * d_h..(h + 1) * d_h].to_vec();
        let mut k = k_full[h * d_h..(h + 1) * d_h].to_vec();
        let v = &v_full[h * d_h..(h + 1) * d_h];
        if let Some(base) = p.rope_base {
            rope_row_inplace(&mut q, pos, base);
            rope_row_inplace(&mut k, pos, base);
        }
        let hs = &mut state.heads[h];

        for (acc, &vj) in hs.sum_v.iter_mut().zip(v) {
            *acc += vj;
        }
        for (acc, &kj) in hs.sum_k.iter_mut().zip(&k) {
            *acc += kj;
        }
        for a in 0..d_h {
            for b in 0..d_h {
                hs.sum_kv[a * d_h + b] += k[a] * v[b];
            }
        }
        match state.mode {
            ApproxMode::Split => {
                let phi_k: Vec<T> = k.iter().map(|&x| x * x * inv_sqrt2).collect();
                for (acc, &f) in hs.sum_k2.iter_mut().zip(&phi_k) {
                    *acc += f;
                }
                for a in 0..d_h {
                    for b in 0..d_h {
                        hs.sum_k2v[a * d_h + b] += phi_k[a] * v[b];
                    }
                }
            }
            ApproxMode::Shared => {
                for a in 0..d_h {
                    for b in 0..d_h {
                        let kk = k[a] * k[b];
                        hs.sum_kk[a * d_h + b] += kk;
                        for c in 0..d_h {
                            hs.sum_kkv[(a * d_h + b) * d_h + c] += kk * v[c];
                        }
                    }
                }
            }
        }

        let o_head = match state.mode {
            ApproxMode::Split => {
                // Zeroth-order term: running mean of values.
                let o0: Vec<T> = hs.sum_v.iter().map(|&s| s / count).collect();
                // First-order term.
                let mut num1 = vec![T::zero(); d_h];
                let mut den1 = T::zero();
                for a in 0..d_h {
                    den1 += q[a] * hs.sum_k[a];
                    for b in 0..d_h {
                        num1[b] += q[a] * hs.sum_kv[a * d_h + b];
                    }
                }
                if den1.abs() < eps {
                    return Err(Error::DenominatorUnderflow {
                        layer: 0,
                        head: h,
                        position: pos,
                        eps: EPS_DEN,
                    });
                }
                // Second-order term with element-wise squared features.
                let phi_q: Vec<T> = q.iter().map(|&x| x * x * inv_sqrt2).collect();
                let mut num2 = vec![T::zero(); d_h];
                let mut den2 = T::zero();
                for a in 0..d_h {
                    den2 += phi_q[a] * hs.sum_k2[a];
                    for b in 0..d_h {
                        num2[b] += phi_q[a] * hs.sum_k2v[a * d_h + b];
                    }
                }
                if den2.abs() < eps {
                    return Err(Error::DenominatorUnderflow {
                        layer: 0,
                        head: h,
                        position: pos,
                        eps: EPS_DEN,
                    });
                }
                (0..d_h)
                    .map(|b| o0[b] + num1[b] / den1 + num2[b] / den2)
                    .collect::<Vec<T>>()
            }
            ApproxMode::Shared => {
                let mut num: Vec<T> = hs.sum_v.clone();
                let mut den = count;
                let mut q_dot_sumk = T::zero();
                for a in 0..d_h {
                    q_dot_sumk += q[a] * hs.sum_k[a];
                    for b in 0..d_h {
                        num[b] += q[a] * hs.sum_kv[a * d_h + b] * inv_sqrt_dh;
                    }
                }
                den += q_dot_sumk * inv_sqrt_dh;
                let half_inv_dh = T::from_f64(0.5 / d_h as f64);
                for a in 0..d_h {
                    for b in 0..d_h {
                        let qq = q[a] * q[b];
                        den += qq * hs.sum_kk[a * d_h + b] * half_inv_dh;
                        for c in 0..d_h {
                            num[c] += qq * hs.sum_kkv[(a * d_h + b) * d_h + c] * half_inv_dh;
                        }
                    }
                }
                if den.abs() < eps {
                    return Err(Error::DenominatorUnderflow {
                        layer: 0,
                        head: h,
                        position: pos,
                        eps: EPS_DEN,
                    });
                }
                num.iter().map(|&n| n / den).collect::<Vec<T>>()
            }
        };
        mixed[h * d_h..(h + 1) * d_h].copy_from_slice(&o_head);
    }
    state.tokens_seen += 1;
    Ok(matvec(&mixed, &p.w_o))
}
