//! Gated MLP token mixer: no token mixing at all, each position is
//! processed independently through a SiLU-gated feed-forward path whose
//! parameter count matches the attention variants' 4*d_m^2 budget.

use crate::attention::AttentionOutput;
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Value-level parameters for the gated-MLP mixer.
///
/// The feed-forward width is `ceil(4*d_m/3)` rounded down to
/// `floor(4*d_m/3)`, which leaves a gap of `d_m * (d_m mod 3)`
/// parameters against the 4*d_m^2 budget; the gap is absorbed exactly
/// by an optional down-projection bias and an optional output gain so
/// the parameter count matches the attention variants to the integer.
#[derive(Debug, Clone)]
pub struct GatedMlpParams<T> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_down: Option<Tensor<T>>,
    pub out_gain: Option<Tensor<T>>,
}

/// Mixer feed-forward width and parity absorbers for a model width:
/// returns `(d_ff', use_bias, use_gain)` such that
/// `3*d_m*d_ff' + (bias + gain) * d_m == 4*d_m^2` exactly.
pub fn gated_mlp_ff_width(d_model: usize) -> (usize, bool, bool) {
    let d_ff = 4 * d_model / 3;
    let remainder = d_model % 3;
    (d_ff, remainder >= 1, remainder == 2)
}

impl<T: Scalar> GatedMlpParams<T> {
    pub fn d_model(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn ff_width(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.numel()
            + self.w_up.numel()
            + self.w_down.numel()
            + self.b_down.as_ref().map_or(0, Tensor::numel)
            + self.out_gain.as_ref().map_or(0, Tensor::numel)
    }
}

/// Tape handles for one gated-MLP mixer.
#[derive(Debug, Clone, Copy)]
pub struct GatedMlpIds {
    pub w_gate: TensorId,
    pub w_up: TensorId,
    pub w_down: TensorId,
    pub b_down: Option<TensorId>,
    pub out_gain: Option<TensorId>,
}

impl GatedMlpIds {
    pub fn from_params<T: Scalar>(
        tape: &mut Tape<T>,
        p: &GatedMlpParams<T>,
        trainable: bool,
    ) -> Self {
        let mut load = |t: &Tensor<T>| tape.leaf(t.clone().with_requires_grad(trainable));
        GatedMlpIds {
            w_gate: load(&p.w_gate),
            w_up: load(&p.w_up),
            w_down: load(&p.w_down),
            b_down: p.b_down.as_ref().map(&mut load),
            out_gain: p.out_gain.as_ref().map(&mut load),
        }
    }
}

/// Position-wise gated MLP: `Dn(SiLU(Gt(h)) * Up(h))`. Output row `i`
/// depends only on input row `i`; no attention matrix exists.
pub fn gated_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    p: &GatedMlpIds,
) -> Result<AttentionOutput> {
    let gate = tape.matmul(hidden, p.w_gate)?;
    let up = tape.matmul(hidden, p.w_up)?;
    let act = tape.silu(gate)?;
    let gated = tape.mul(act, up)?;
    let mut out = tape.matmul(gated, p.w_down)?;
    if let Some(b) = p.b_down {
        out = tape.add_bias(out, b)?;
    }
    if let Some(g) = p.out_gain {
        out = tape.mul_bias(out, g)?;
    }
    Ok(AttentionOutput { out, attn: None, prelogits: None })
}
