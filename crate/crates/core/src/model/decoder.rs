//! The decoder stack: pre-norm blocks with a per-layer token mixer, a
//! gated feed-forward, tied embeddings, and the shadow stream feeding
//! fixed-QK layers.

use crate::attention::{
    approximate_attention_parallel, external_qk_attention, gated_mlp, gated_mlp_ff_width,
    nonapprox_attention_parallel, standard_attention, static_emb_qk_attention, AttentionOutput,
    AttnIds, AttnParams, Capture, GatedMlpIds, GatedMlpParams, MixerParams, Variant,
};
use crate::error::{Error, Result};
use crate::model::{LayerMap, ModelConfig, ShadowKind, ShadowSpec, BOS_TOKEN};
use crate::tensor::random::normal_tensor;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::{Arc, Mutex};

/// Initialization std-dev for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct FfnParams<T> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub variant: Variant,
    pub attn_norm: Tensor<T>,
    pub mixer: MixerParams<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Debug, Clone)]
enum ShadowInput<T> {
    /// Fixed random embeddings, regenerated deterministically from the
    /// shadow seed.
    Random(Tensor<T>),
    /// Fixed token sequence, embedded through the model's table.
    FixedText(Vec<u32>),
}

/// A built decoder stack.
#[derive(Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Option<Tensor<T>>,
    param_version: u64,
    shadow_input: Option<ShadowInput<T>>,
    shadow_cache: Mutex<Option<(u64, Arc<Vec<Tensor<T>>>)>>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            cfg: self.cfg.clone(),
            seed: self.seed,
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
            param_version: self.param_version,
            shadow_input: self.shadow_input.clone(),
            shadow_cache: Mutex::new(self.shadow_cache.lock().unwrap().clone()),
        }
    }
}

/// Tape handles for every parameter, in canonical traversal order.
pub(crate) struct Bindings {
    pub embed: TensorId,
    pub layers: Vec<LayerIds>,
    pub final_norm: TensorId,
    pub lm_head: Option<TensorId>,
}

pub(crate) struct LayerIds {
    pub attn_norm: TensorId,
    pub mixer: MixerIds,
    pub ffn_norm: TensorId,
    pub ffn_gate: TensorId,
    pub ffn_up: TensorId,
    pub ffn_down: TensorId,
}

pub(crate) enum MixerIds {
    Attn(AttnIds),
    Mlp(GatedMlpIds),
}

impl Bindings {
    /// Parameter ids in the same order as `Model::for_each_param`.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = vec![self.embed];
        for l in &self.layers {
            ids.push(l.attn_norm);
            match &l.mixer {
                MixerIds::Attn(a) => ids.extend([a.w_q, a.w_k, a.w_v, a.w_o]),
                MixerIds::Mlp(m) => {
                    ids.extend([m.w_gate, m.w_up, m.w_down]);
                    ids.extend(m.b_down);
                    ids.extend(m.out_gain);
                }
            }
            ids.extend([l.ffn_norm, l.ffn_gate, l.ffn_up, l.ffn_down]);
        }
        ids.push(self.final_norm);
        ids.extend(self.lm_head);
        ids
    }
}

/// Captured per-layer tensors from one forward pass.
#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub variant: Variant,
    pub attn: Option<Vec<Tensor<T>>>,
    pub prelogits: Option<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    pub logits: Tensor<T>,
    pub layers: Vec<LayerCapture<T>>,
}

pub(crate) struct ForwardIds {
    pub logits: TensorId,
    pub layers: Vec<LayerCaptureIds>,
}

pub(crate) struct LayerCaptureIds {
    pub attn: Option<Vec<TensorId>>,
    pub prelogits: Option<Vec<TensorId>>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from a seed: weight matrices are
    /// Normal(0, 0.02) drawn in canonical parameter order, norm gains
    /// start at one, parity absorbers at zero/one.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut cfg = cfg;
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let embed = normal_tensor(vec![cfg.vocab_size, d], INIT_STD, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let variant = cfg.variant_map.variant_at(l);
            let attn_norm = Tensor::filled(vec![d], T::one());
            let mixer = if variant.has_qkvo() {
                MixerParams::Attn(AttnParams {
                    w_q: normal_tensor(vec![d, d], INIT_STD, &mut rng),
                    w_k: normal_tensor(vec![d, d], INIT_STD, &mut rng),
                    w_v: normal_tensor(vec![d, d], INIT_STD, &mut rng),
                    w_o: normal_tensor(vec![d, d], INIT_STD, &mut rng),
                    n_heads: cfg.n_heads,
                    rope_base: Some(cfg.rope_base),
                })
            } else {
                let (ff, bias, gain) = gated_mlp_ff_width(d);
                MixerParams::Mlp(GatedMlpParams {
                    w_gate: normal_tensor(vec![d, ff], INIT_STD, &mut rng),
                    w_up: normal_tensor(vec![d, ff], INIT_STD, &mut rng),
                    w_down: normal_tensor(vec![ff, d], INIT_STD, &mut rng),
                    b_down: bias.then(|| Tensor::zeros(vec![d])),
                    out_gain: gain.then(|| Tensor::filled(vec![d], T::one())),
                })
            };
            let ffn_norm = Tensor::filled(vec![d], T::one());
            let ffn = FfnParams {
                w_gate: normal_tensor(vec![d, cfg.d_ff], INIT_STD, &mut rng),
                w_up: normal_tensor(vec![d, cfg.d_ff], INIT_STD, &mut rng),
                w_down: normal_tensor(vec![cfg.d_ff, d], INIT_STD, &mut rng),
            };
            layers.push(LayerParams { variant, attn_norm, mixer, ffn_norm, ffn });
        }
        let final_norm = Tensor::filled(vec![d], T::one());
        let lm_head = if cfg.tie_embeddings {
            None
        } else {
            Some(normal_tensor(vec![d, cfg.vocab_size], INIT_STD, &mut rng))
        };

        let shadow_input = match &mut cfg.shadow {
            None => None,
            Some(spec) => Some(Self::resolve_shadow(spec, cfg.max_seq_len, d)?),
        };

        Ok(Model {
            cfg,
            seed,
            embed,
            layers,
            final_norm,
            lm_head,
            param_version: 0,
            shadow_input,
            shadow_cache: Mutex::new(None),
        })
    }

    /// Resolve the shadow input once at build time. Fixed-text tokens
    /// are written back into the spec so checkpoints stay portable.
    fn resolve_shadow(
        spec: &mut ShadowSpec,
        max_seq_len: usize,
        d_model: usize,
    ) -> Result<ShadowInput<T>> {
        let len = spec.length.unwrap_or(max_seq_len);
        if len < max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "shadow length {len} shorter than max_seq_len {max_seq_len}"
            )));
        }
        match spec.kind {
            ShadowKind::RandomEmbeddings => {
                let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
                Ok(ShadowInput::Random(normal_tensor(
                    vec![len, d_model],
                    spec.sigma,
                    &mut rng,
                )))
            }
            ShadowKind::FixedText => {
                let tokens = match &spec.resolved_tokens {
                    Some(tokens) => tokens.clone(),
                    None => {
                        let path = spec.source_path.as_ref().ok_or_else(|| {
                            Error::InvalidConfig("fixed-text shadow needs a source".into())
                        })?;
                        let bytes = std::fs::read(path)?;
                        let need = spec.offset + len.saturating_sub(1);
                        if bytes.len() < need {
                            return Err(Error::InvalidConfig(format!(
                                "shadow source {} has {} bytes, need {need}",
                                path.display(),
                                bytes.len()
                            )));
                        }
                        let mut tokens = Vec::with_capacity(len);
                        tokens.push(BOS_TOKEN);
                        tokens.extend(
                            bytes[spec.offset..spec.offset + len - 1]
                                .iter()
                                .map(|&b| b as u32),
                        );
                        tokens
                    }
                };
                if tokens.len() < max_seq_len {
                    return Err(Error::InvalidConfig(format!(
                        "shadow token sequence has {} tokens, need {max_seq_len}",
                        tokens.len()
                    )));
                }
                spec.resolved_tokens = Some(tokens.clone());
                Ok(ShadowInput::FixedText(tokens))
            }
        }
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    /// Invalidate caches after a parameter update.
    pub fn bump_version(&mut self) {
        self.param_version += 1;
    }

    /// Canonical parameter traversal, used by the optimizer, the
    /// checkpoint format, and gradient extraction.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("embed.weight", &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.attn_norm.gain"), &l.attn_norm);
            match &l.mixer {
                MixerParams::Attn(a) => {
                    f(&format!("layers.{i}.mixer.w_q"), &a.w_q);
                    f(&format!("layers.{i}.mixer.w_k"), &a.w_k);
                    f(&format!("layers.{i}.mixer.w_v"), &a.w_v);
                    f(&format!("layers.{i}.mixer.w_o"), &a.w_o);
                }
                MixerParams::Mlp(m) => {
                    f(&format!("layers.{i}.mixer.w_gate"), &m.w_gate);
                    f(&format!("layers.{i}.mixer.w_up"), &m.w_up);
                    f(&format!("layers.{i}.mixer.w_down"), &m.w_down);
                    if let Some(b) = &m.b_down {
                        f(&format!("layers.{i}.mixer.b_down"), b);
                    }
                    if let Some(g) = &m.out_gain {
                        f(&format!("layers.{i}.mixer.out_gain"), g);
                    }
                }
            }
            f(&format!("layers.{i}.ffn_norm.gain"), &l.ffn_norm);
            f(&format!("layers.{i}.ffn.w_gate"), &l.ffn.w_gate);
            f(&format!("layers.{i}.ffn.w_up"), &l.ffn.w_up);
            f(&format!("layers.{i}.ffn.w_down"), &l.ffn.w_down);
        }
        f("final_norm.gain", &self.final_norm);
        if let Some(head) = &self.lm_head {
            f("lm_head.weight", head);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("embed.weight", &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.attn_norm.gain"), &mut l.attn_norm);
            match &mut l.mixer {
                MixerParams::Attn(a) => {
                    f(&format!("layers.{i}.mixer.w_q"), &mut a.w_q);
                    f(&format!("layers.{i}.mixer.w_k"), &mut a.w_k);
                    f(&format!("layers.{i}.mixer.w_v"), &mut a.w_v);
                    f(&format!("layers.{i}.mixer.w_o"), &mut a.w_o);
                }
                MixerParams::Mlp(m) => {
                    f(&format!("layers.{i}.mixer.w_gate"), &mut m.w_gate);
                    f(&format!("layers.{i}.mixer.w_up"), &mut m.w_up);
                    f(&format!("layers.{i}.mixer.w_down"), &mut m.w_down);
                    if let Some(b) = &mut m.b_down {
                        f(&format!("layers.{i}.mixer.b_down"), b);
                    }
                    if let Some(g) = &mut m.out_gain {
                        f(&format!("layers.{i}.mixer.out_gain"), g);
                    }
                }
            }
            f(&format!("layers.{i}.ffn_norm.gain"), &mut l.ffn_norm);
            f(&format!("layers.{i}.ffn.w_gate"), &mut l.ffn.w_gate);
            f(&format!("layers.{i}.ffn.w_up"), &mut l.ffn.w_up);
            f(&format!("layers.{i}.ffn.w_down"), &mut l.ffn.w_down);
        }
        f("final_norm.gain", &mut self.final_norm);
        if let Some(head) = &mut self.lm_head {
            f("lm_head.weight", head);
        }
    }

    /// Total trainable parameter count. Equal across variant maps of
    /// the same configuration (exact integer parity).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let mut load = |t: &Tensor<T>| tape.leaf(t.clone().with_requires_grad(trainable));
        let embed = load(&self.embed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let attn_norm = load(&l.attn_norm);
            let mixer = match &l.mixer {
                MixerParams::Attn(a) => MixerIds::Attn(AttnIds {
                    w_q: load(&a.w_q),
                    w_k: load(&a.w_k),
                    w_v: load(&a.w_v),
                    w_o: load(&a.w_o),
                    n_heads: a.n_heads,
                    rope_base: a.rope_base,
                }),
                MixerParams::Mlp(m) => MixerIds::Mlp(GatedMlpIds {
                    w_gate: load(&m.w_gate),
                    w_up: load(&m.w_up),
                    w_down: load(&m.w_down),
                    b_down: m.b_down.as_ref().map(&mut load),
                    out_gain: m.out_gain.as_ref().map(&mut load),
                }),
            };
            let ffn_norm = load(&l.ffn_norm);
            let ffn_gate = load(&l.ffn.w_gate);
            let ffn_up = load(&l.ffn.w_up);
            let ffn_down = load(&l.ffn.w_down);
            layers.push(LayerIds { attn_norm, mixer, ffn_norm, ffn_gate, ffn_up, ffn_down });
        }
        let final_norm = load(&self.final_norm);
        let lm_head = self.lm_head.as_ref().map(&mut load);
        Bindings { embed, layers, final_norm, lm_head }
    }

    fn gated_ffn(
        &self,
        tape: &mut Tape<T>,
        x: TensorId,
        ids: &LayerIds,
    ) -> Result<TensorId> {
        let gate = tape.matmul(x, ids.ffn_gate)?;
        let up = tape.matmul(x, ids.ffn_up)?;
        let act = tape.silu(gate)?;
        let gated = tape.mul(act, up)?;
        tape.matmul(gated, ids.ffn_down)
    }

    /// The shadow stream: its own input processed through the stack
    /// with standard attention (its own Q, K and V at every layer,
    /// shared parameters), recording the hidden state entering each
    /// layer. Gated-MLP layers, which carry no Q/K/V weights, apply
    /// their own position-wise mixer.
    pub(crate) fn shadow_ids_on_tape(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
    ) -> Result<Vec<TensorId>> {
        let input = self.shadow_input.as_ref().ok_or_else(|| {
            Error::InvalidConfig("model has no shadow input configured".into())
        })?;
        let x0 = match input {
            ShadowInput::Random(eps) => tape.constant(eps.clone()),
            ShadowInput::FixedText(tokens) => tape.embedding(b.embed, tokens)?,
        };
        let eps = T::from_f64(self.cfg.norm_eps);
        let mut xs = Vec::with_capacity(self.layers.len());
        let mut x = x0;
        xs.push(x);
        for l in 0..self.layers.len().saturating_sub(1) {
            let ids = &b.layers[l];
            let normed = tape.rms_norm(x, ids.attn_norm, eps)?;
            let mixed = match &ids.mixer {
                MixerIds::Attn(a) => {
                    standard_attention(tape, normed, a, Capture::default())?.out
                }
                MixerIds::Mlp(m) => gated_mlp(tape, normed, m)?.out,
            };
            let after_attn = tape.add(x, mixed)?;
            let fnormed = tape.rms_norm(after_attn, ids.ffn_norm, eps)?;
            let ffn_out = self.gated_ffn(tape, fnormed, ids)?;
            x = tape.add(after_attn, ffn_out)?;
            xs.push(x);
        }
        Ok(xs)
    }

    /// Per-layer shadow hidden states, cached and keyed by the
    /// parameter version counter.
    pub fn shadow_forward(&self) -> Result<Arc<Vec<Tensor<T>>>> {
        {
            let cache = self.shadow_cache.lock().unwrap();
            if let Some((version, xs)) = cache.as_ref() {
                if *version == self.param_version {
                    return Ok(Arc::clone(xs));
                }
            }
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let ids = self.shadow_ids_on_tape(&mut tape, &b)?;
        let xs: Vec<Tensor<T>> = ids.iter().map(|&id| tape.value(id).clone()).collect();
        let arc = Arc::new(xs);
        *self.shadow_cache.lock().unwrap() = Some((self.param_version, Arc::clone(&arc)));
        Ok(arc)
    }

    /// Build the forward graph on a caller-owned tape. `shadow` must
    /// hold per-layer stream ids when the map uses fixed-QK variants.
    pub(crate) fn forward_ids(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        tokens: &[u32],
        capture: Capture,
        shadow: Option<&[TensorId]>,
    ) -> Result<ForwardIds> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        let eps = T::from_f64(self.cfg.norm_eps);
        let emb = tape.embedding(b.embed, tokens)?;
        let mut h = emb;
        let mut captures = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let ids = &b.layers[l];
            let normed = tape.rms_norm(h, ids.attn_norm, eps)?;
            let out: AttentionOutput = match (&ids.mixer, layer.variant) {
                (MixerIds::Mlp(m), Variant::Mlp) => gated_mlp(tape, normed, m)?,
                (MixerIds::Attn(a), Variant::Standard) => {
                    standard_attention(tape, normed, a, capture)?
                }
                (MixerIds::Attn(a), Variant::Approx) => approximate_attention_parallel(
                    tape,
                    normed,
                    a,
                    self.cfg.approx_mode,
                    capture,
                    l,
                )?,
                (MixerIds::Attn(a), Variant::Nonapprox) => {
                    nonapprox_attention_parallel(tape, normed, a, capture)?
                }
                (MixerIds::Attn(a), Variant::RndEmbQk | Variant::FixedSeqQk) => {
                    let xs = shadow.ok_or_else(|| {
                        Error::InvalidConfig("forward needs shadow stream ids".into())
                    })?;
                    external_qk_attention(tape, normed, xs[l], a, capture)?
                }
                (MixerIds::Attn(a), Variant::StaticEmbQk) => {
                    static_emb_qk_attention(tape, normed, emb, a, capture)?
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l} parameter kind does not match variant {}",
                        layer.variant
                    )))
                }
            };
            h = tape.add(h, out.out)?;
            let fnormed = tape.rms_norm(h, ids.ffn_norm, eps)?;
            let ffn_out = self.gated_ffn(tape, fnormed, ids)?;
            h = tape.add(h, ffn_out)?;
            captures.push(LayerCaptureIds { attn: out.attn, prelogits: out.prelogits });
        }
        let hf = tape.rms_norm(h, b.final_norm, eps)?;
        let logits = match b.lm_head {
            Some(head) => tape.matmul(hf, head)?,
            None => tape.matmul_trans_b(hf, b.embed)?,
        };
        Ok(ForwardIds { logits, layers: captures })
    }

    /// Shadow handles for an evaluation tape (cached values loaded as
    /// constants), when the map needs them.
    pub(crate) fn shadow_constants(&self, tape: &mut Tape<T>) -> Result<Option<Vec<TensorId>>> {
        if !self.cfg.variant_map.any_shadow() {
            return Ok(None);
        }
        let xs = self.shadow_forward()?;
        Ok(Some(xs.iter().map(|x| tape.constant(x.clone())).collect()))
    }

    /// Per-position next-token logits, `[L x vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.forward_captured(tokens, Capture::default())?.logits)
    }

    /// Forward pass materializing per-layer attention matrices and
    /// pre-softmax activations as requested.
    pub fn forward_captured(&self, tokens: &[u32], capture: Capture) -> Result<ForwardRecord<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let shadow = self.shadow_constants(&mut tape)?;
        let ids = self.forward_ids(&mut tape, &b, tokens, capture, shadow.as_deref())?;
        let grab = |ids: &Option<Vec<TensorId>>| {
            ids.as_ref()
                .map(|v| v.iter().map(|&id| tape.value(id).clone()).collect())
        };
        Ok(ForwardRecord {
            logits: tape.value(ids.logits).clone(),
            layers: ids
                .layers
                .iter()
                .zip(&self.layers)
                .map(|(c, l)| LayerCapture {
                    variant: l.variant,
                    attn: grab(&c.attn),
                    prelogits: grab(&c.prelogits),
                })
                .collect(),
        })
    }

    /// Delete every non-standard layer (the residual stream passes
    /// straight through), keeping weights unchanged. No retraining.
    pub fn skip_transform(&self) -> Result<Model<T>> {
        let kept: Vec<&LayerParams<T>> = self
            .layers
            .iter()
            .filter(|l| l.variant == Variant::Standard)
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidConfig(
                "skip transform needs at least one standard layer".into(),
            ));
        }
        let mut cfg = self.cfg.clone();
        cfg.n_layers = kept.len();
        cfg.variant_map = LayerMap::uniform(Variant::Standard, kept.len());
        cfg.shadow = None;
        Ok(Model {
            cfg,
            seed: self.seed,
            embed: self.embed.clone(),
            layers: kept.into_iter().cloned().collect(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
            param_version: self.param_version,
            shadow_input: None,
            shadow_cache: Mutex::new(None),
        })
    }
}
