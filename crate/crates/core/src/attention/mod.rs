//! The seven token-mixing mechanisms.
//!
//! Every variant is a pure function over tape tensors so the same code
//! path serves training (differentiable) and evaluation. The two
//! linear-time variants additionally have recurrent forms with
//! constant-size per-token state, used as independent oracles for the
//! parallel implementations.

pub mod approximate;
pub mod gated_mlp;
pub mod nonapprox;
pub mod standard;

pub use approximate::{
    approximate_attention_parallel, approximate_attention_recurrent, ApproxMode,
    ApproxRecurrentState, EPS_DEN,
};
pub use gated_mlp::{gated_mlp, gated_mlp_ff_width, GatedMlpIds, GatedMlpParams};
pub use nonapprox::{
    nonapprox_attention_parallel, nonapprox_attention_recurrent, NonApproxRecurrentState,
};
pub use standard::{external_qk_attention, standard_attention, static_emb_qk_attention};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Per-layer token-mixing mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Mlp,
    Approx,
    Nonapprox,
    RndEmbQk,
    FixedSeqQk,
    StaticEmbQk,
}

pub const ALL_VARIANTS: [Variant; 7] = [
    Variant::Standard,
    Variant::Mlp,
    Variant::Approx,
    Variant::Nonapprox,
    Variant::RndEmbQk,
    Variant::FixedSeqQk,
    Variant::StaticEmbQk,
];

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Mlp => "mlp",
            Variant::Approx => "approx",
            Variant::Nonapprox => "nonapprox",
            Variant::RndEmbQk => "rnd_emb_qk",
            Variant::FixedSeqQk => "fixed_seq_qk",
            Variant::StaticEmbQk => "static_emb_qk",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::UnknownName { kind: "variant", name: tag.to_string() })
    }

    /// Variants whose attention matrix is row-stochastic causal.
    pub fn is_softmax(self) -> bool {
        matches!(
            self,
            Variant::Standard | Variant::Nonapprox | Variant::RndEmbQk
                | Variant::FixedSeqQk | Variant::StaticEmbQk
        )
    }

    /// Variants whose Q/K come from a shadow stream.
    pub fn uses_shadow(self) -> bool {
        matches!(self, Variant::RndEmbQk | Variant::FixedSeqQk)
    }

    /// All variants except the gated MLP carry Q/K/V/O projections.
    pub fn has_qkvo(self) -> bool {
        self != Variant::Mlp
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Q/K/V/O projection weights plus head layout, value-level.
#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub n_heads: usize,
    /// Rotary base applied to Q and K; `None` disables rotation.
    pub rope_base: Option<f64>,
}

impl<T: Scalar> AttnParams<T> {
    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "AttnParams",
                    expected: format!("{d}x{d} {name}"),
                    got: format!("{:?}", w.shape()),
                });
            }
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by n_heads {}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Tape handles for one layer's Q/K/V/O weights.
#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub n_heads: usize,
    pub rope_base: Option<f64>,
}

impl AttnIds {
    pub fn from_params<T: Scalar>(tape: &mut Tape<T>, p: &AttnParams<T>, trainable: bool) -> Self {
        let mut load = |t: &Tensor<T>| {
            let t = t.clone().with_requires_grad(trainable);
            tape.leaf(t)
        };
        AttnIds {
            w_q: load(&p.w_q),
            w_k: load(&p.w_k),
            w_v: load(&p.w_v),
            w_o: load(&p.w_o),
            n_heads: p.n_heads,
            rope_base: p.rope_base,
        }
    }
}

/// What to materialize alongside the mixed output.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    pub attn: bool,
    pub prelogits: bool,
}

impl Capture {
    pub fn all() -> Self {
        Capture { attn: true, prelogits: true }
    }
}

/// Output of one token-mixing layer on the tape.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Mixed hidden states after the output projection, `[L x d_m]`.
    pub out: TensorId,
    /// Per-head attention matrices `[L x L]` when materializable and
    /// requested. For the split-mode approximate variant these are the
    /// effective (non-stochastic) weights.
    pub attn: Option<Vec<TensorId>>,
    /// Per-head raw pre-softmax activations on the causal support.
    pub prelogits: Option<Vec<TensorId>>,
}

/// Project `src` with `w` and split the result into per-head column
/// blocks, optionally applying rotary embeddings per head.
pub(crate) fn project_split_rope<T: Scalar>(
    tape: &mut Tape<T>,
    src: TensorId,
    w: TensorId,
    n_heads: usize,
    rope_base: Option<f64>,
) -> Result<Vec<TensorId>> {
    let full = tape.matmul(src, w)?;
    split_heads_rope(tape, full, n_heads, rope_base)
}

/// Split an `[L x d_m]` tensor into head blocks, optionally rotating.
pub(crate) fn split_heads_rope<T: Scalar>(
    tape: &mut Tape<T>,
    full: TensorId,
    n_heads: usize,
    rope_base: Option<f64>,
) -> Result<Vec<TensorId>> {
    let d_m = tape.value(full).cols();
    let rows = tape.value(full).rows();
    let d_h = d_m / n_heads;
    let positions: Vec<usize> = (0..rows).collect();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut part = tape.slice_cols(full, h * d_h, d_h)?;
        if let Some(base) = rope_base {
            part = tape.rope(part, T::from_f64(base), &positions)?;
        }
        heads.push(part);
    }
    Ok(heads)
}

/// Split without rotation (for V and for score-only paths).
pub(crate) fn split_heads<T: Scalar>(
    tape: &mut Tape<T>,
    full: TensorId,
    n_heads: usize,
) -> Result<Vec<TensorId>> {
    split_heads_rope(tape, full, n_heads, None)
}

/// Matrix-vector product `x[1 x k] @ w[k x n]` on plain slices.
pub(crate) fn matvec<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), k);
    let mut out = vec![T::zero(); n];
    T::gemm(false, false, 1, k, n, x, w.data(), &mut out);
    out
}

/// Value-level parameters for any mixer.
#[derive(Debug, Clone)]
pub enum MixerParams<T> {
    Attn(AttnParams<T>),
    Mlp(GatedMlpParams<T>),
}

impl<T: Scalar> MixerParams<T> {
    pub fn param_count(&self) -> usize {
        match self {
            MixerParams::Attn(p) => {
                p.w_q.numel() + p.w_k.numel() + p.w_v.numel() + p.w_o.numel()
            }
            MixerParams::Mlp(p) => p.param_count(),
        }
    }

    pub fn attn(&self) -> Option<&AttnParams<T>> {
        match self {
            MixerParams::Attn(p) => Some(p),
            MixerParams::Mlp(_) => None,
        }
    }
}

/// Materialized (off-tape) result of a standalone variant evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutput<T> {
    pub out: Tensor<T>,
    pub attn: Option<Vec<Tensor<T>>>,
    pub prelogits: Option<Vec<Tensor<T>>>,
}

/// Run one variant over plain tensors on a throwaway tape.
///
/// `aux` is the external stream X for the fixed-QK variants and the
/// static embedding E for `StaticEmbQk`; it is ignored elsewhere.
pub fn evaluate_variant<T: Scalar>(
    variant: Variant,
    hidden: &Tensor<T>,
    aux: Option<&Tensor<T>>,
    params: &MixerParams<T>,
    approx_mode: ApproxMode,
    capture: Capture,
) -> Result<EvalOutput<T>> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = match (variant, params) {
        (Variant::Mlp, MixerParams::Mlp(p)) => {
            let ids = GatedMlpIds::from_params(&mut tape, p, false);
            gated_mlp(&mut tape, h, &ids)?
        }
        (Variant::Mlp, MixerParams::Attn(_)) => {
            return Err(Error::InvalidConfig("mlp variant needs MLP parameters".into()))
        }
        (v, MixerParams::Attn(p)) => {
            p.validate()?;
            let ids = AttnIds::from_params(&mut tape, p, false);
            match v {
                Variant::Standard => standard_attention(&mut tape, h, &ids, capture)?,
                Variant::Approx => {
                    approximate_attention_parallel(&mut tape, h, &ids, approx_mode, capture, 0)?
                }
                Variant::Nonapprox => nonapprox_attention_parallel(&mut tape, h, &ids, capture)?,
                Variant::RndEmbQk | Variant::FixedSeqQk => {
                    let x = aux.ok_or_else(|| {
                        Error::InvalidConfig("fixed-QK variant needs an external stream".into())
                    })?;
                    let xid = tape.constant(x.clone());
                    external_qk_attention(&mut tape, h, xid, &ids, capture)?
                }
                Variant::StaticEmbQk => {
                    let e = aux.ok_or_else(|| {
                        Error::InvalidConfig("static-QK variant needs embeddings".into())
                    })?;
                    let eid = tape.constant(e.clone());
                    static_emb_qk_attention(&mut tape, h, eid, &ids, capture)?
                }
                Variant::Mlp => unreachable!(),
            }
        }
        (v, MixerParams::Mlp(_)) => {
            return Err(Error::InvalidConfig(format!(
                "variant {v} needs attention parameters"
            )))
        }
    };
    let grab = |ids: &Option<Vec<TensorId>>| {
        ids.as_ref()
            .map(|v| v.iter().map(|&id| tape.value(id).clone()).collect())
    };
    Ok(EvalOutput {
        out: tape.value(out.out).clone(),
        attn: grab(&out.attn),
        prelogits: grab(&out.prelogits),
    })
}

/// Rotary rotation of a plain head-slice at one position (recurrent
/// forms). Matches the tape `rope` op bit for bit.
pub(crate) fn rope_row_inplace<T: Scalar>(row: &mut [T], pos: usize, base: f64) {
    let d = row.len();
    let half = d / 2;
    for p in 0..half {
        let exponent = -2.0 * (p as f64) / (d as f64);
        let freq = T::from_f64(base).to_f64_lossy().powf(exponent);
        let angle = T::from_f64(pos as f64 * freq);
        let (sin, cos) = (angle.sin(), angle.cos());
        let a = row[2 * p];
        let b = row[2 * p + 1];
        row[2 * p] = a * cos - b * sin;
        row[2 * p + 1] = a * sin + b * cos;
    }
}
