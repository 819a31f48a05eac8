//! Multi-head causal softmax attention, with Q/K taken either from the
//! layer hidden states (standard), from an external shadow stream, or
//! from the uncontextualized input embeddings.

use crate::attention::{project_split_rope, split_heads, AttentionOutput, AttnIds, Capture};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// Shared core: Q,K from `qk_src`, V from `v_src`, causal softmax per
/// head, heads concatenated then projected by W_O.
pub(crate) fn softmax_attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    qk_src: TensorId,
    v_src: TensorId,
    p: &AttnIds,
    capture: Capture,
) -> Result<AttentionOutput> {
    let l = tape.value(v_src).rows();
    if tape.value(qk_src).rows() != l {
        return Err(Error::ShapeMismatch {
            op: "softmax_attention",
            expected: format!("{l} Q/K rows"),
            got: format!("{}", tape.value(qk_src).rows()),
        });
    }
    let qs = project_split_rope(tape, qk_src, p.w_q, p.n_heads, p.rope_base)?;
    let ks = project_split_rope(tape, qk_src, p.w_k, p.n_heads, p.rope_base)?;
    let v_full = tape.matmul(v_src, p.w_v)?;
    let vs = split_heads(tape, v_full, p.n_heads)?;

    let d_h = tape.value(qs[0]).cols();
    let inv_sqrt = T::from_f64(1.0 / (d_h as f64).sqrt());

    let mut outs = Vec::with_capacity(p.n_heads);
    let mut attn = capture.attn.then(Vec::new);
    let mut prelogits = capture.prelogits.then(Vec::new);
    for h in 0..p.n_heads {
        let scores = tape.matmul_trans_b(qs[h], ks[h])?;
        let scaled = tape.scale(scores, inv_sqrt)?;
        if let Some(pl) = prelogits.as_mut() {
            pl.push(tape.tril_mask(scaled)?);
        }
        let a = tape.softmax_causal_rows(scaled)?;
        if let Some(av) = attn.as_mut() {
            av.push(a);
        }
        outs.push(tape.matmul(a, vs[h])?);
    }
    let concat = tape.concat_cols(&outs)?;
    let out = tape.matmul(concat, p.w_o)?;
    Ok(AttentionOutput { out, attn, prelogits })
}

/// Standard scaled dot-product attention over the layer hidden states.
pub fn standard_attention<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    p: &AttnIds,
    capture: Capture,
) -> Result<AttentionOutput> {
    softmax_attention_core(tape, hidden, hidden, p, capture)
}

/// Q,K from an external stream `x` (first L rows), V from the hidden
/// states. The attention map is independent of the layer input.
pub fn external_qk_attention<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    x: TensorId,
    p: &AttnIds,
    capture: Capture,
) -> Result<AttentionOutput> {
    let l = tape.value(hidden).rows();
    let x_rows = tape.value(x).rows();
    if x_rows < l {
        return Err(Error::ShapeMismatch {
            op: "external_qk_attention",
            expected: format!("external stream with >= {l} rows"),
            got: format!("{x_rows}"),
        });
    }
    let x_used = if x_rows == l { x } else { tape.slice_rows(x, l)? };
    softmax_attention_core(tape, x_used, hidden, p, capture)
}

/// Q,K from the uncontextualized embeddings `e` of the same token
/// sequence, V from the hidden states.
pub fn static_emb_qk_attention<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    embeddings: TensorId,
    p: &AttnIds,
    capture: Capture,
) -> Result<AttentionOutput> {
    if tape.value(embeddings).shape() != tape.value(hidden).shape() {
        return Err(Error::ShapeMismatch {
            op: "static_emb_qk_attention",
            expected: format!("{:?} embeddings", tape.value(hidden).shape()),
            got: format!("{:?}", tape.value(embeddings).shape()),
        });
    }
    softmax_attention_core(tape, embeddings, hidden, p, capture)
}
