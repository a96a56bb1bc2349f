//! The transformer backbone: configuration, pretraining, frozen weights, and
//! the differentiable forward pass.
//!
//! The backbone is a small pre-norm vision-transformer-style encoder. An
//! example's feature vector is reshaped into a fixed number of tokens, embedded
//! linearly, and prefixed with a learned class token whose final hidden state
//! feeds the classifier head. After pretraining on a base split the backbone is
//! frozen for good; everything learned afterwards (masks, prompts, heads) lives
//! outside this struct and is attached at forward time through [`ModelNodes`].

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamSet};
use crate::par;
use crate::seeds;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input dimensionality of each token.
    pub input_dim: usize,
    /// Tokens one example is reshaped into (the class token comes extra).
    pub feature_tokens: usize,
    /// Hidden width D.
    pub d_model: usize,
    /// Encoder layers.
    pub n_layers: usize,
    /// Attention heads per layer; must divide `d_model`.
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    /// Layer-norm stabilizer.
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_dim: 8,
            feature_tokens: 8,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Sequence length seen by attention before any prompt prefix.
    pub fn seq_len(&self) -> usize {
        self.feature_tokens + 1
    }

    /// Raw feature dimensionality one example must have.
    pub fn feature_dim(&self) -> usize {
        self.input_dim * self.feature_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::contract("backbone dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_dim == 0 || self.feature_tokens == 0 {
            return Err(Error::contract("input_dim and feature_tokens must be positive"));
        }
        Ok(())
    }
}

/// Reshapes one raw feature vector into the backbone's token matrix.
pub fn tokenize(features: &[f64], cfg: &BackboneConfig) -> Result<Tensor> {
    if features.len() != cfg.feature_dim() {
        return Err(Error::contract(format!(
            "tokenize: backbone expects {} features, example has {}",
            cfg.feature_dim(),
            features.len()
        )));
    }
    Tensor::from_vec(&[cfg.feature_tokens, cfg.input_dim], features.to_vec())
}

/// Linear classifier over class-token features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[d_model, n_classes]`.
    pub w: Tensor,
    /// `[n_classes]`.
    pub b: Tensor,
}

impl ClassifierHead {
    pub fn init<R: rand::Rng>(rng: &mut R, d_model: usize, n_classes: usize) -> ClassifierHead {
        ClassifierHead { w: Tensor::randn(rng, &[d_model, n_classes], INIT_STD), b: Tensor::zeros(&[n_classes]) }
    }

    pub fn n_classes(&self) -> usize {
        self.b.numel()
    }
}

const INIT_STD: f64 = 0.02;

/// One encoder layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1: Tensor,
    pub fc1_b: Tensor,
    pub fc2: Tensor,
    pub fc2_b: Tensor,
}

/// The frozen backbone. Weights are private; they can be read through
/// [`PretrainedBackbone::named_tensors`] but never mutated once built, which is
/// what keeps the content hash constant for the lifetime of a run.
#[derive(Debug, Clone)]
pub struct PretrainedBackbone {
    config: BackboneConfig,
    embed_w: Tensor,
    embed_b: Tensor,
    class_token: Tensor,
    layers: Vec<LayerWeights>,
    /// Final layer norm applied to the class-token readout (standard ViT
    /// ordering). Without it the pre-norm residual stream's scale is
    /// unbounded, which destabilizes every consumer of the feature.
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    /// Head used during pretraining; kept for completeness, unused afterwards.
    base_head: ClassifierHead,
}

impl PretrainedBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn base_head(&self) -> &ClassifierHead {
        &self.base_head
    }

    /// Fixed-order enumeration of every frozen tensor, used by the content
    /// hash and the checkpoint writer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.w".into(), &self.embed_w),
            ("embed.b".into(), &self.embed_b),
            ("cls".into(), &self.class_token),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            for (suffix, t) in layer_tensor_refs(lw) {
                out.push((format!("layer{l}.{suffix}"), t));
            }
        }
        out.push(("ln_f.g".into(), &self.ln_f_g));
        out.push(("ln_f.b".into(), &self.ln_f_b));
        out.push(("base_head.w".into(), &self.base_head.w));
        out.push(("base_head.b".into(), &self.base_head.b));
        out
    }

    /// SHA-256 over all frozen tensors in enumeration order. Constant for the
    /// lifetime of the value; recomputing after any amount of task training
    /// must give the same digest.
    pub fn theta_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in &t.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Hex form of [`PretrainedBackbone::theta_hash`].
    pub fn theta_hash_hex(&self) -> String {
        self.theta_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rebuilds a backbone from checkpointed tensors.
    pub fn from_named_tensors(
        config: BackboneConfig,
        mut lookup: impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<PretrainedBackbone> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_g: lookup(&format!("layer{l}.ln1.g"))?,
                ln1_b: lookup(&format!("layer{l}.ln1.b"))?,
                wq: lookup(&format!("layer{l}.attn.wq"))?,
                bq: lookup(&format!("layer{l}.attn.bq"))?,
                wk: lookup(&format!("layer{l}.attn.wk"))?,
                bk: lookup(&format!("layer{l}.attn.bk"))?,
                wv: lookup(&format!("layer{l}.attn.wv"))?,
                bv: lookup(&format!("layer{l}.attn.bv"))?,
                wo: lookup(&format!("layer{l}.attn.wo"))?,
                bo: lookup(&format!("layer{l}.attn.bo"))?,
                ln2_g: lookup(&format!("layer{l}.ln2.g"))?,
                ln2_b: lookup(&format!("layer{l}.ln2.b"))?,
                fc1: lookup(&format!("layer{l}.ff.fc1"))?,
                fc1_b: lookup(&format!("layer{l}.ff.fc1_b"))?,
                fc2: lookup(&format!("layer{l}.ff.fc2"))?,
                fc2_b: lookup(&format!("layer{l}.ff.fc2_b"))?,
            });
        }
        Ok(PretrainedBackbone {
            embed_w: lookup("embed.w")?,
            embed_b: lookup("embed.b")?,
            class_token: lookup("cls")?,
            ln_f_g: lookup("ln_f.g")?,
            ln_f_b: lookup("ln_f.b")?,
            base_head: ClassifierHead { w: lookup("base_head.w")?, b: lookup("base_head.b")? },
            config,
            layers,
        })
    }

    /// Registers every frozen tensor on a tape as constants.
    pub fn register(&self, tape: &mut Tape) -> RawBackboneNodes {
        RawBackboneNodes {
            embed_w: tape.constant(self.embed_w.clone()),
            embed_b: tape.constant(self.embed_b.clone()),
            class_token: tape.constant(self.class_token.clone()),
            ln_f_g: tape.constant(self.ln_f_g.clone()),
            ln_f_b: tape.constant(self.ln_f_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|lw| RawLayerNodes {
                    ln1_g: tape.constant(lw.ln1_g.clone()),
                    ln1_b: tape.constant(lw.ln1_b.clone()),
                    wq: tape.constant(lw.wq.clone()),
                    bq: tape.constant(lw.bq.clone()),
                    wk: tape.constant(lw.wk.clone()),
                    bk: tape.constant(lw.bk.clone()),
                    wv: tape.constant(lw.wv.clone()),
                    bv: tape.constant(lw.bv.clone()),
                    wo: tape.constant(lw.wo.clone()),
                    bo: tape.constant(lw.bo.clone()),
                    ln2_g: tape.constant(lw.ln2_g.clone()),
                    ln2_b: tape.constant(lw.ln2_b.clone()),
                    fc1: tape.constant(lw.fc1.clone()),
                    fc1_b: tape.constant(lw.fc1_b.clone()),
                    fc2: tape.constant(lw.fc2.clone()),
                    fc2_b: tape.constant(lw.fc2_b.clone()),
                })
                .collect(),
        }
    }

    /// Class-token feature of one raw example under the frozen backbone alone:
    /// no masks, no prompts, no head. This is the query function used for
    /// key matching and it never changes after pretraining.
    pub fn class_token_feature(&self, features: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let raw = self.register(&mut tape);
        let model = raw.into_model(None);
        let x = tokenize(features, &self.config)?;
        let cls = forward_features(&mut tape, &model, &self.config, &x, &mut None)?;
        let mut t = tape.value(cls).clone();
        t.shape = vec![self.config.d_model];
        Ok(t)
    }
}

fn layer_tensor_refs(lw: &LayerWeights) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("ln1.g", &lw.ln1_g),
        ("ln1.b", &lw.ln1_b),
        ("attn.wq", &lw.wq),
        ("attn.bq", &lw.bq),
        ("attn.wk", &lw.wk),
        ("attn.bk", &lw.bk),
        ("attn.wv", &lw.wv),
        ("attn.bv", &lw.bv),
        ("attn.wo", &lw.wo),
        ("attn.bo", &lw.bo),
        ("ln2.g", &lw.ln2_g),
        ("ln2.b", &lw.ln2_b),
        ("ff.fc1", &lw.fc1),
        ("ff.fc1_b", &lw.fc1_b),
        ("ff.fc2", &lw.fc2),
        ("ff.fc2_b", &lw.fc2_b),
    ]
}

// ── Tape-side model wiring ──────────────────────────────────────────────────

/// Plain backbone tensors registered on a tape, before any adaptation.
pub struct RawBackboneNodes {
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub class_token: NodeId,
    pub ln_f_g: NodeId,
    pub ln_f_b: NodeId,
    pub layers: Vec<RawLayerNodes>,
}

pub struct RawLayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub fc1: NodeId,
    pub fc1_b: NodeId,
    pub fc2: NodeId,
    pub fc2_b: NodeId,
}

impl RawBackboneNodes {
    /// Wraps raw nodes into a [`ModelNodes`] with no adaptation attached.
    pub fn into_model(self, head: Option<(NodeId, NodeId)>) -> ModelNodes {
        ModelNodes {
            embed_w: self.embed_w,
            embed_b: self.embed_b,
            class_token: self.class_token,
            ln_f_g: self.ln_f_g,
            ln_f_b: self.ln_f_b,
            layers: self
                .layers
                .into_iter()
                .map(|raw| ModelLayerNodes {
                    wq: raw.wq,
                    wk: raw.wk,
                    wv: raw.wv,
                    wo: raw.wo,
                    fc1: raw.fc1,
                    fc2: raw.fc2,
                    ln1_g: raw.ln1_g,
                    ln1_b: raw.ln1_b,
                    bq: raw.bq,
                    bk: raw.bk,
                    bv: raw.bv,
                    bo: raw.bo,
                    ln2_g: raw.ln2_g,
                    ln2_b: raw.ln2_b,
                    fc1_b: raw.fc1_b,
                    fc2_b: raw.fc2_b,
                    adapter_attn: None,
                    adapter_ff: None,
                    prompt: None,
                })
                .collect(),
            head,
        }
    }
}

/// Prefix rows prepended to one layer's key and value sequences.
#[derive(Debug, Clone, Copy)]
pub struct PromptNodes {
    /// `[prefix_len, d_model]` rows for the key path.
    pub key_prefix: NodeId,
    /// `[prefix_len, d_model]` rows for the value path.
    pub value_prefix: NodeId,
}

/// Bottleneck adapter weights for one insertion point.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    pub down_w: NodeId,
    pub down_b: NodeId,
    pub up_w: NodeId,
    pub up_b: NodeId,
}

/// One layer as the forward pass sees it. The six weight ids are *effective*
/// weights: callers that mask or low-rank-update a matrix bake that into the
/// node before building this struct, so the forward itself stays oblivious to
/// which adaptation mechanism is active.
pub struct ModelLayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub fc1: NodeId,
    pub fc1_b: NodeId,
    pub fc2: NodeId,
    pub fc2_b: NodeId,
    pub adapter_attn: Option<AdapterNodes>,
    pub adapter_ff: Option<AdapterNodes>,
    pub prompt: Option<PromptNodes>,
}

/// The full classifier as wired onto one tape.
pub struct ModelNodes {
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub class_token: NodeId,
    pub ln_f_g: NodeId,
    pub ln_f_b: NodeId,
    pub layers: Vec<ModelLayerNodes>,
    /// `(weights, bias)` of the classification head; `None` for feature-only
    /// forward passes.
    pub head: Option<(NodeId, NodeId)>,
}

/// Per-layer, per-head attention matrices recorded during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `attention[layer][head]` has shape `[seq_len, seq_len + prefix_len]`;
    /// every row sums to 1.
    pub attention: Vec<Vec<Tensor>>,
}

/// Runs the encoder on one tokenized example and returns the class-token
/// feature node of shape `[1, d_model]`.
pub fn forward_features(
    tape: &mut Tape,
    model: &ModelNodes,
    cfg: &BackboneConfig,
    x_tokens: &Tensor,
    trace: &mut Option<ForwardTrace>,
) -> Result<NodeId> {
    if x_tokens.shape != vec![cfg.feature_tokens, cfg.input_dim] {
        return Err(Error::ShapeMismatch {
            op: "forward_features",
            expected: vec![cfg.feature_tokens, cfg.input_dim],
            got: x_tokens.shape.clone(),
        });
    }
    let x = tape.constant(x_tokens.clone());
    let embedded = tape.matmul(x, model.embed_w)?;
    let embedded = tape.add_row_broadcast(embedded, model.embed_b)?;
    let mut h = tape.concat_rows(model.class_token, embedded)?;

    let d_h = cfg.head_dim();
    let scale = 1.0 / (d_h as f64).sqrt();
    if let Some(t) = trace.as_mut() {
        t.attention.clear();
    }
    for layer in &model.layers {
        // Attention sublayer, pre-norm.
        let n1 = tape.layer_norm_rows(h, layer.ln1_g, layer.ln1_b, cfg.ln_eps)?;
        let (k_in, v_in) = match layer.prompt {
            Some(p) => (tape.concat_rows(p.key_prefix, n1)?, tape.concat_rows(p.value_prefix, n1)?),
            None => (n1, n1),
        };
        let q = tape.matmul(n1, layer.wq)?;
        let q = tape.add_row_broadcast(q, layer.bq)?;
        let k = tape.matmul(k_in, layer.wk)?;
        let k = tape.add_row_broadcast(k, layer.bk)?;
        let v = tape.matmul(v_in, layer.wv)?;
        let v = tape.add_row_broadcast(v, layer.bv)?;

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut layer_trace = Vec::new();
        for i in 0..cfg.n_heads {
            let qi = tape.slice_cols(q, i * d_h, d_h)?;
            let ki = tape.slice_cols(k, i * d_h, d_h)?;
            let vi = tape.slice_cols(v, i * d_h, d_h)?;
            let kt = tape.transpose(ki)?;
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale_const(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            if trace.is_some() {
                layer_trace.push(tape.value(attn).clone());
            }
            head_outs.push(tape.matmul(attn, vi)?);
        }
        if let Some(t) = trace.as_mut() {
            t.attention.push(layer_trace);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let mut attn_out = tape.matmul(merged, layer.wo)?;
        attn_out = tape.add_row_broadcast(attn_out, layer.bo)?;
        if let Some(a) = layer.adapter_attn {
            attn_out = apply_adapter(tape, attn_out, a)?;
        }
        h = tape.add(h, attn_out)?;

        // Feed-forward sublayer, pre-norm.
        let n2 = tape.layer_norm_rows(h, layer.ln2_g, layer.ln2_b, cfg.ln_eps)?;
        let mid = tape.matmul(n2, layer.fc1)?;
        let mid = tape.add_row_broadcast(mid, layer.fc1_b)?;
        let mid = tape.gelu(mid);
        let mut ff_out = tape.matmul(mid, layer.fc2)?;
        ff_out = tape.add_row_broadcast(ff_out, layer.fc2_b)?;
        if let Some(a) = layer.adapter_ff {
            ff_out = apply_adapter(tape, ff_out, a)?;
        }
        h = tape.add(h, ff_out)?;
    }
    let cls = tape.slice_rows(h, 0, 1)?;
    tape.layer_norm_rows(cls, model.ln_f_g, model.ln_f_b, cfg.ln_eps)
}

/// Residual bottleneck: `z + up(gelu(down(z)))`.
fn apply_adapter(tape: &mut Tape, z: NodeId, a: AdapterNodes) -> Result<NodeId> {
    let mid = tape.matmul(z, a.down_w)?;
    let mid = tape.add_row_broadcast(mid, a.down_b)?;
    let mid = tape.gelu(mid);
    let back = tape.matmul(mid, a.up_w)?;
    let back = tape.add_row_broadcast(back, a.up_b)?;
    tape.add(z, back)
}

/// Full forward to logits, shape `[1, n_classes]`.
pub fn forward_logits(
    tape: &mut Tape,
    model: &ModelNodes,
    cfg: &BackboneConfig,
    x_tokens: &Tensor,
    trace: &mut Option<ForwardTrace>,
) -> Result<NodeId> {
    let (head_w, head_b) = model
        .head
        .ok_or_else(|| Error::contract("forward_logits: model was wired without a head"))?;
    let cls = forward_features(tape, model, cfg, x_tokens, trace)?;
    let logits = tape.matmul(cls, head_w)?;
    tape.add_row_broadcast(logits, head_b)
}

// ── Pretraining ─────────────────────────────────────────────────────────────

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop as soon as held-out accuracy reaches this level.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 60, batch_size: 16, lr: 3e-3, target_accuracy: 0.999 }
    }
}

/// What pretraining did.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub heldout_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Canonical trainable parameter set of a fresh backbone.
fn init_params(cfg: &BackboneConfig, n_base_classes: usize, seed: u64) -> ParamSet {
    let mut rng = seeds::stream_rng(seed, seeds::PRETRAIN_INIT);
    let mut p = ParamSet::new();
    let d = cfg.d_model;
    p.push("embed.w", Tensor::randn(&mut rng, &[cfg.input_dim, d], INIT_STD));
    p.push("embed.b", Tensor::zeros(&[d]));
    p.push("cls", Tensor::randn(&mut rng, &[1, d], INIT_STD));
    for l in 0..cfg.n_layers {
        p.push(format!("layer{l}.ln1.g"), Tensor::ones(&[d]));
        p.push(format!("layer{l}.ln1.b"), Tensor::zeros(&[d]));
        for m in ["wq", "wk", "wv", "wo"] {
            p.push(format!("layer{l}.attn.{m}"), Tensor::randn(&mut rng, &[d, d], INIT_STD));
        }
        for m in ["bq", "bk", "bv", "bo"] {
            p.push(format!("layer{l}.attn.{m}"), Tensor::zeros(&[d]));
        }
        p.push(format!("layer{l}.ln2.g"), Tensor::ones(&[d]));
        p.push(format!("layer{l}.ln2.b"), Tensor::zeros(&[d]));
        p.push(format!("layer{l}.ff.fc1"), Tensor::randn(&mut rng, &[d, cfg.d_ff], INIT_STD));
        p.push(format!("layer{l}.ff.fc1_b"), Tensor::zeros(&[cfg.d_ff]));
        p.push(format!("layer{l}.ff.fc2"), Tensor::randn(&mut rng, &[cfg.d_ff, d], INIT_STD));
        p.push(format!("layer{l}.ff.fc2_b"), Tensor::zeros(&[d]));
    }
    p.push("ln_f.g", Tensor::ones(&[d]));
    p.push("ln_f.b", Tensor::zeros(&[d]));
    p.push("base_head.w", Tensor::randn(&mut rng, &[d, n_base_classes], INIT_STD));
    p.push("base_head.b", Tensor::zeros(&[n_base_classes]));
    p
}

/// Builds a [`ModelNodes`] from backbone parameters registered in
/// [`init_params`] slot order.
fn model_from_param_nodes(cfg: &BackboneConfig, ids: &[NodeId]) -> ModelNodes {
    let mut it = ids.iter().copied();
    let mut next = || it.next().expect("param slot order out of sync");
    let embed_w = next();
    let embed_b = next();
    let class_token = next();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let ln1_g = next();
        let ln1_b = next();
        let wq = next();
        let wk = next();
        let wv = next();
        let wo = next();
        let bq = next();
        let bk = next();
        let bv = next();
        let bo = next();
        let ln2_g = next();
        let ln2_b = next();
        let fc1 = next();
        let fc1_b = next();
        let fc2 = next();
        let fc2_b = next();
        layers.push(ModelLayerNodes {
            ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1, fc1_b, fc2, fc2_b,
            adapter_attn: None,
            adapter_ff: None,
            prompt: None,
        });
    }
    let ln_f_g = next();
    let ln_f_b = next();
    let head_w = next();
    let head_b = next();
    ModelNodes { embed_w, embed_b, class_token, ln_f_g, ln_f_b, layers, head: Some((head_w, head_b)) }
}

/// Trains a fresh backbone on the base split and freezes it.
///
/// Deterministic in `(cfg, pc, seed, data)`: two calls with identical inputs
/// produce backbones with identical content hashes.
pub fn pretrain(
    cfg: &BackboneConfig,
    pc: &PretrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    n_base_classes: usize,
    seed: u64,
) -> Result<(PretrainedBackbone, PretrainReport)> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::contract("pretrain: empty train or held-out split"));
    }
    if pc.batch_size == 0 || pc.epochs == 0 {
        return Err(Error::contract("pretrain: batch_size and epochs must be positive"));
    }
    let mut params = init_params(cfg, n_base_classes, seed);
    let mut adam = AdamState::for_params(AdamConfig::with_lr(pc.lr), &params);
    let mut shuffle_rng = seeds::stream_rng(seed, seeds::PRETRAIN_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut heldout_accuracy = 0.0;
    let mut epochs_run = 0;

    for _epoch in 0..pc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(pc.batch_size) {
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let model = model_from_param_nodes(cfg, &ids);
            let mut example_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tokenize(train.feature(i), cfg)?;
                let logits = forward_logits(&mut tape, &model, cfg, &x, &mut None)?;
                let loss = tape.cross_entropy_row(logits, train.label(i), 0, n_base_classes)?;
                example_losses.push(loss);
            }
            let batch_loss = tape.mean_scalars(&example_losses)?;
            let loss_value = tape.value(batch_loss).data[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { context: "pretrain batch loss (try a lower lr)".into() });
            }
            loss_sum += loss_value;
            batches += 1;
            tape.backward(batch_loss)?;
            let grads: Vec<Option<Tensor>> =
                ids.iter().map(|&id| tape.grad(id).map(|_| tape.grad_tensor(id))).collect();
            adam.step(&mut params, &grads)?;
        }
        epoch_losses.push(loss_sum / batches as f64);
        epochs_run += 1;
        heldout_accuracy = eval_params_accuracy(cfg, &params, heldout, n_base_classes)?;
        if heldout_accuracy >= pc.target_accuracy {
            break;
        }
    }

    let backbone = backbone_from_params(cfg.clone(), &params);
    Ok((backbone, PretrainReport { epochs_run, heldout_accuracy, epoch_losses }))
}

fn backbone_from_params(config: BackboneConfig, params: &ParamSet) -> PretrainedBackbone {
    let take = |name: &str| params.get(name).expect("missing backbone param").clone();
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1_g: take(&format!("layer{l}.ln1.g")),
            ln1_b: take(&format!("layer{l}.ln1.b")),
            wq: take(&format!("layer{l}.attn.wq")),
            bq: take(&format!("layer{l}.attn.bq")),
            wk: take(&format!("layer{l}.attn.wk")),
            bk: take(&format!("layer{l}.attn.bk")),
            wv: take(&format!("layer{l}.attn.wv")),
            bv: take(&format!("layer{l}.attn.bv")),
            wo: take(&format!("layer{l}.attn.wo")),
            bo: take(&format!("layer{l}.attn.bo")),
            ln2_g: take(&format!("layer{l}.ln2.g")),
            ln2_b: take(&format!("layer{l}.ln2.b")),
            fc1: take(&format!("layer{l}.ff.fc1")),
            fc1_b: take(&format!("layer{l}.ff.fc1_b")),
            fc2: take(&format!("layer{l}.ff.fc2")),
            fc2_b: take(&format!("layer{l}.ff.fc2_b")),
        });
    }
    let mut b = PretrainedBackbone {
        embed_w: take("embed.w"),
        embed_b: take("embed.b"),
        class_token: take("cls"),
        ln_f_g: take("ln_f.g"),
        ln_f_b: take("ln_f.b"),
        base_head: ClassifierHead { w: take("base_head.w"), b: take("base_head.b") },
        config,
        layers,
    };
    // Strip gradient flags; nothing downstream may treat these as trainable.
    b.embed_w.requires_grad = false;
    b.embed_b.requires_grad = false;
    b.class_token.requires_grad = false;
    b.ln_f_g.requires_grad = false;
    b.ln_f_b.requires_grad = false;
    b.base_head.w.requires_grad = false;
    b.base_head.b.requires_grad = false;
    for lw in &mut b.layers {
        for (_, t) in layer_tensor_refs(lw) {
            debug_assert!(t.all_finite());
        }
        lw.ln1_g.requires_grad = false;
        lw.ln1_b.requires_grad = false;
        lw.wq.requires_grad = false;
        lw.bq.requires_grad = false;
        lw.wk.requires_grad = false;
        lw.bk.requires_grad = false;
        lw.wv.requires_grad = false;
        lw.bv.requires_grad = false;
        lw.wo.requires_grad = false;
        lw.bo.requires_grad = false;
        lw.ln2_g.requires_grad = false;
        lw.ln2_b.requires_grad = false;
        lw.fc1.requires_grad = false;
        lw.fc1_b.requires_grad = false;
        lw.fc2.requires_grad = false;
        lw.fc2_b.requires_grad = false;
    }
    b
}

/// Accuracy of in-progress pretraining parameters on a dataset.
fn eval_params_accuracy(cfg: &BackboneConfig, params: &ParamSet, data: &Dataset, n_classes: usize) -> Result<f64> {
    let hits = par::map_range(data.len(), |i| {
        let mut tape = Tape::new();
        let mut frozen = ParamSet::new();
        for (name, t) in params.iter() {
            let mut c = t.clone();
            c.requires_grad = false;
            frozen.push(name, c);
        }
        let ids = frozen.register(&mut tape);
        let model = model_from_param_nodes(cfg, &ids);
        let x = tokenize(data.feature(i), cfg)?;
        let logits = forward_logits(&mut tape, &model, cfg, &x, &mut None)?;
        let row = &tape.value(logits).data[..n_classes];
        Ok::<bool, Error>(argmax(row) == data.label(i))
    });
    let mut correct = 0;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
