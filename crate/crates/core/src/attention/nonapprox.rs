//! Non-approximate attention: element-wise self-gating instead of
//! pairwise similarity.
//!
//! Each position gets one scalar score `s_j = (q_j . k_j)/sqrt(d_h)`
//! per head (with `q = SiLU(H W^Q)` for non-linearity), and row `i` of
//! the attention matrix is the softmax of the first `i+1` scores. The
//! softmax denominator therefore grows monotonically along the
//! sequence, which is exactly what the recurrent form exploits: the
//! state is one running max, one scaled exponential sum, and one scaled
//! exponential-weighted value sum per head.

use crate::attention::{
    matvec, rope_row_inplace, split_heads, AttentionOutput, AttnIds,
    AttnParams, Capture,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// Parallel (full-sequence) non-approximate attention.
pub fn nonapprox_attention_parallel<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    p: &AttnIds,
    capture: Capture,
) -> Result<AttentionOutput> {
    // SiLU on the full Q projection, before head splitting.
    let q_proj = tape.matmul(hidden, p.w_q)?;
    let q_act = tape.silu(q_proj)?;
    let qs = split_heads_roped(tape, q_act, p)?;
    let k_proj = tape.matmul(hidden, p.w_k)?;
    let ks = split_heads_roped(tape, k_proj, p)?;
    let v_full = tape.matmul(hidden, p.w_v)?;
    let vs = split_heads(tape, v_full, p.n_heads)?;

    let d_h = tape.value(qs[0]).cols();
    let inv_sqrt = T::from_f64(1.0 / (d_h as f64).sqrt());

    let mut outs = Vec::with_capacity(p.n_heads);
    let mut attn = capture.attn.then(Vec::new);
    let mut prelogits = capture.prelogits.then(Vec::new);
    for h in 0..p.n_heads {
        let gated = tape.mul(qs[h], ks[h])?;
        let raw = tape.row_sums(gated)?;
        let scores = tape.scale(raw, inv_sqrt)?;
        if let Some(pl) = prelogits.as_mut() {
            // The raw activations are the per-position scores,
            // broadcast over the causal support for the diagnostics.
            pl.push(tape.scores_broadcast_causal(scores)?);
        }
        let a = tape.cum_softmax(scores)?;
        if let Some(av) = attn.as_mut() {
            av.push(a);
        }
        outs.push(tape.matmul(a, vs[h])?);
    }
    let concat = tape.concat_cols(&outs)?;
    let out = tape.matmul(concat, p.w_o)?;
    Ok(AttentionOutput { out, attn, prelogits })
}

fn split_heads_roped<T: Scalar>(
    tape: &mut Tape<T>,
    full: TensorId,
    p: &AttnIds,
) -> Result<Vec<TensorId>> {
    crate::attention::split_heads_rope(tape, full, p.n_heads, p.rope_base)
}

#[derive(Debug, Clone)]
struct HeadState<T> {
    run_max: T,
    sum_exp: T,
    sum_exp_v: Vec<T>,
}

/// Constant-size recurrent state: `{sum e^s v, sum e^s}` per head with
/// a running maximum for log-sum-exp stabilization.
#[derive(Debug, Clone)]
pub struct NonApproxRecurrentState<T> {
    n_heads: usize,
    d_head: usize,
    tokens_seen: usize,
    heads: Vec<HeadState<T>>,
}

impl<T: Scalar> NonApproxRecurrentState<T> {
    pub fn new(n_heads: usize, d_head: usize) -> Self {
        NonApproxRecurrentState {
            n_heads,
            d_head,
            tokens_seen: 0,
            heads: (0..n_heads)
                .map(|_| HeadState {
                    run_max: T::neg_infinity(),
                    sum_exp: T::zero(),
                    sum_exp_v: vec![T::zero(); d_head],
                })
                .collect(),
        }
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Logarithm of the mathematical softmax denominator
    /// `sum_{j<=t} e^{s_j}` for one head. Strictly increases with every
    /// consumed token.
    pub fn log_denominator(&self, head: usize) -> f64 {
        let h = &self.heads[head];
        h.run_max.to_f64_lossy() + h.sum_exp.to_f64_lossy().ln()
    }
}

/// One recurrent step: consumes the next hidden-state row and returns
/// the mixed output row (after W_O). Log-sum-exp stabilization makes
/// overflow impossible for finite scores.
pub fn nonapprox_attention_recurrent<T: Scalar>(
    x_t: &[T],
    p: &AttnParams<T>,
    state: &mut NonApproxRecurrentState<T>,
) -> Result<Vec<T>> {
    p.validate()?;
    let d_h = p.d_head();
    if state.n_heads != p.n_heads || state.d_head != d_h {
        return Err(Error::ShapeMismatch {
            op: "nonapprox_attention_recurrent",
            expected: format!("state for {} heads x {d_h}", p.n_heads),
            got: format!("{} heads x {}", state.n_heads, state.d_head),
        });
    }
    let pos = state.tokens_seen;
    let q_proj = matvec(x_t, &p.w_q);
    // Same arithmetic as the tape silu op: x * sigmoid(x).
    let q_full: Vec<T> = q_proj
        .iter()
        .map(|&v| v * (T::one() / (T::one() + (-v).exp())))
        .collect();
    let k_full = matvec(x_t, &p.w_k);
    let v_full = matvec(x_t, &p.w_v);

    let inv_sqrt = T::from_f64(1.0 / (d_h as f64).sqrt());
    let mut mixed = vec![T::zero(); p.d_model()];
    for h in 0..p.n_heads {
        let mut q = q_full[h * d_h..(h + 1) * d_h].to_vec();
        let mut k = k_full[h * d_h..(h + 1) * d_h].to_vec();
        let v = &v_full[h * d_h..(h + 1) * d_h];
        if let Some(base) = p.rope_base {
            rope_row_inplace(&mut q, pos, base);
            rope_row_inplace(&mut k, pos, base);
        }
        let mut s = T::zero();
        for a in 0..d_h {
            s += q[a] * k[a];
        }
        s *= inv_sqrt;

        let hs = &mut state.heads[h];
        let new_max = if s > hs.run_max { s } else { hs.run_max };
        let rescale = if hs.run_max.is_finite() {
            (hs.run_max - new_max).exp()
        } else {
            T::zero()
        };
        let e = (s - new_max).exp();
        hs.sum_exp = hs.sum_exp * rescale + e;
        for (acc, &vj) in hs.sum_exp_v.iter_mut().zip(v) {
            *acc = *acc * rescale + e * vj;
        }
        hs.run_max = new_max;

        let out = &mut mixed[h * d_h..(h + 1) * d_h];
        for (o, &n) in out.iter_mut().zip(&hs.sum_exp_v) {
            *o = n / hs.sum_exp;
        }
    }
    state.tokens_seen += 1;
    Ok(matvec(&mixed, &p.w_o))
}
