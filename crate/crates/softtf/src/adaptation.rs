//! Per-task adaptation mechanisms over the frozen backbone.
//!
//! Four mechanisms share one interface: they contribute trainable tensors to a
//! task's parameter set and, at forward time, rewrite the raw frozen weight
//! nodes into *effective* weights (or attach adapter stacks). The headline
//! mechanism multiplies selected weight matrices elementwise by real-valued
//! soft masks initialized at exactly 1, so a fresh task starts as the identity
//! over the backbone; the alternatives are learned binary masks over scores,
//! low-rank additive factors, and residual bottleneck adapters, which start as
//! the identity too (zero-initialized second factor / up-projection).

use crate::backbone::{AdapterNodes, BackboneConfig, ModelNodes};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Weight matrices a mechanism may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMatrix {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl TargetMatrix {
    pub const ALL: [TargetMatrix; 6] =
        [TargetMatrix::Q, TargetMatrix::K, TargetMatrix::V, TargetMatrix::O, TargetMatrix::Fc1, TargetMatrix::Fc2];

    /// Attention projections only, the default target set.
    pub const ATTENTION: [TargetMatrix; 4] =
        [TargetMatrix::Q, TargetMatrix::K, TargetMatrix::V, TargetMatrix::O];

    pub fn name(&self) -> &'static str {
        match self {
            TargetMatrix::Q => "q",
            TargetMatrix::K => "k",
            TargetMatrix::V => "v",
            TargetMatrix::O => "o",
            TargetMatrix::Fc1 => "fc1",
            TargetMatrix::Fc2 => "fc2",
        }
    }

    /// `[rows, cols]` of this matrix in a given architecture.
    pub fn shape(&self, cfg: &BackboneConfig) -> [usize; 2] {
        let d = cfg.d_model;
        match self {
            TargetMatrix::Q | TargetMatrix::K | TargetMatrix::V | TargetMatrix::O => [d, d],
            TargetMatrix::Fc1 => [d, cfg.d_ff],
            TargetMatrix::Fc2 => [cfg.d_ff, d],
        }
    }
}

/// How soft masks are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum MaskInit {
    /// Every entry exactly 1.0; the masked model starts as the identity.
    UniformOnes,
    /// Glorot uniform over `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// He normal, stddev `sqrt(2 / fan_in)`.
    Kaiming,
    Normal { mean: f64, std: f64 },
}

/// Which adaptation mechanism a run trains per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// Real-valued elementwise masks over selected weight matrices.
    SoftMask { init: MaskInit },
    /// Binary masks keeping the top `keep_percent` of score magnitudes.
    Wsn { keep_percent: f64 },
    /// Additive low-rank factors `w + a*b`.
    Lora { rank: usize },
    /// Residual bottleneck adapters after the attention and feed-forward
    /// sublayers; weight matrices themselves stay untouched.
    Adapter { rank: usize },
    /// Prompts and head only.
    PromptOnly,
}

impl Mechanism {
    pub fn validate(&self) -> Result<()> {
        match self {
            Mechanism::Wsn { keep_percent } => {
                if !(0.0..=100.0).contains(keep_percent) {
                    return Err(Error::contract(format!(
                        "wsn keep_percent {keep_percent} outside [0, 100]"
                    )));
                }
            }
            Mechanism::Lora { rank } | Mechanism::Adapter { rank } => {
                if *rank == 0 {
                    return Err(Error::contract("rank must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One (layer, matrix) slot holding a trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    /// Zero-based layer index.
    pub layer: usize,
    pub target: TargetMatrix,
    pub tensor: Tensor,
}

/// Per-matrix soft masks (also reused as WSN score storage).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub entries: Vec<MaskEntry>,
}

impl MaskSet {
    /// Total scalars across all entries.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    pub fn entry(&self, layer: usize, target: TargetMatrix) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.target == target)
            .map(|e| &e.tensor)
    }
}

/// Draws one mask tensor under a scheme.
fn init_mask_tensor<R: Rng>(rng: &mut R, shape: [usize; 2], scheme: MaskInit) -> Tensor {
    let [rows, cols] = shape;
    match scheme {
        MaskInit::UniformOnes => Tensor::ones(&[rows, cols]),
        MaskInit::Xavier => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::from_vec(&[rows, cols], data).unwrap()
        }
        MaskInit::Kaiming => {
            let std = (2.0 / rows as f64).sqrt();
            Tensor::randn(rng, &[rows, cols], std)
        }
        MaskInit::Normal { mean, std } => {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + z * std
                })
                .collect();
            Tensor::from_vec(&[rows, cols], data).unwrap()
        }
    }
}

/// Builds a mask set over `layers` x `targets` (layers are zero-based). An
/// empty layer list is legal but almost certainly a misconfiguration, so it
/// is logged.
pub fn init_masks<R: Rng>(
    rng: &mut R,
    cfg: &BackboneConfig,
    layers: &[usize],
    targets: &[TargetMatrix],
    scheme: MaskInit,
) -> Result<MaskSet> {
    if layers.is_empty() || targets.is_empty() {
        log::warn!("init_masks: empty layer or target list produces an empty mask set");
    }
    let mut entries = Vec::new();
    for &layer in layers {
        if layer >= cfg.n_layers {
            return Err(Error::contract(format!(
                "init_masks: layer {layer} out of range for {} layers",
                cfg.n_layers
            )));
        }
        for &target in targets {
            entries.push(MaskEntry { layer, target, tensor: init_mask_tensor(rng, target.shape(cfg), scheme) });
        }
    }
    Ok(MaskSet { entries })
}

/// Low-rank factors for one matrix: effective weight is `w + a*b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub layer: usize,
    pub target: TargetMatrix,
    /// `[rows, rank]`, random at init.
    pub a: Tensor,
    /// `[rank, cols]`, zero at init so the update starts as zero.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraParams {
    pub entries: Vec<LoraEntry>,
}

pub fn init_lora<R: Rng>(
    rng: &mut R,
    cfg: &BackboneConfig,
    layers: &[usize],
    targets: &[TargetMatrix],
    rank: usize,
) -> Result<LoraParams> {
    if rank == 0 {
        return Err(Error::contract("init_lora: rank must be positive"));
    }
    let mut entries = Vec::new();
    for &layer in layers {
        if layer >= cfg.n_layers {
            return Err(Error::contract(format!("init_lora: layer {layer} out of range")));
        }
        for &target in targets {
            let [rows, cols] = target.shape(cfg);
            entries.push(LoraEntry {
                layer,
                target,
                a: Tensor::randn(rng, &[rows, rank], (1.0 / rows as f64).sqrt()),
                b: Tensor::zeros(&[rank, cols]),
            });
        }
    }
    Ok(LoraParams { entries })
}

/// One bottleneck adapter: `z + up(gelu(down(z)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub down_w: Tensor,
    pub down_b: Tensor,
    /// Zero at init so the adapter starts as the identity.
    pub up_w: Tensor,
    pub up_b: Tensor,
}

/// Adapters for one layer: one after attention, one after the feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub layer: usize,
    pub attn: AdapterStack,
    pub ff: AdapterStack,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterParams {
    pub entries: Vec<AdapterEntry>,
}

fn init_adapter_stack<R: Rng>(rng: &mut R, d: usize, rank: usize) -> AdapterStack {
    AdapterStack {
        down_w: Tensor::randn(rng, &[d, rank], (1.0 / d as f64).sqrt()),
        down_b: Tensor::zeros(&[rank]),
        up_w: Tensor::zeros(&[rank, d]),
        up_b: Tensor::zeros(&[d]),
    }
}

pub fn init_adapters<R: Rng>(
    rng: &mut R,
    cfg: &BackboneConfig,
    layers: &[usize],
    rank: usize,
) -> Result<AdapterParams> {
    if rank == 0 {
        return Err(Error::contract("init_adapters: rank must be positive"));
    }
    let mut entries = Vec::new();
    for &layer in layers {
        if layer >= cfg.n_layers {
            return Err(Error::contract(format!("init_adapters: layer {layer} out of range")));
        }
        entries.push(AdapterEntry {
            layer,
            attn: init_adapter_stack(rng, cfg.d_model, rank),
            ff: init_adapter_stack(rng, cfg.d_model, rank),
        });
    }
    Ok(AdapterParams { entries })
}

/// The trainable per-task adaptation state for one mechanism.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptationParams {
    SoftMask(MaskSet),
    /// Scores plus the kept fraction (percent of entries per matrix).
    Wsn { scores: MaskSet, keep_percent: f64 },
    Lora(LoraParams),
    Adapter(AdapterParams),
    PromptOnly,
}

impl AdaptationParams {
    /// Initializes parameters for `mechanism` over zero-based `layers`.
    pub fn init<R: Rng>(
        rng: &mut R,
        cfg: &BackboneConfig,
        mechanism: &Mechanism,
        layers: &[usize],
        targets: &[TargetMatrix],
    ) -> Result<AdaptationParams> {
        mechanism.validate()?;
        Ok(match mechanism {
            Mechanism::SoftMask { init } => {
                AdaptationParams::SoftMask(init_masks(rng, cfg, layers, targets, *init)?)
            }
            Mechanism::Wsn { keep_percent } => AdaptationParams::Wsn {
                // Scores draw from N(0, 0.1); only their magnitude ranking matters.
                scores: init_masks(rng, cfg, layers, targets, MaskInit::Normal { mean: 0.0, std: 0.1 })?,
                keep_percent: *keep_percent,
            },
            Mechanism::Lora { rank } => AdaptationParams::Lora(init_lora(rng, cfg, layers, targets, *rank)?),
            Mechanism::Adapter { rank } => AdaptationParams::Adapter(init_adapters(rng, cfg, layers, *rank)?),
            Mechanism::PromptOnly => AdaptationParams::PromptOnly,
        })
    }

    /// Appends every trainable tensor to `ps` under canonical names and in a
    /// canonical order; [`AdaptationParams::read_back`] and
    /// [`AdaptationParams::apply_to_model`] rely on that order.
    pub fn append_params(&self, ps: &mut ParamSet) {
        match self {
            AdaptationParams::SoftMask(set) => {
                for e in &set.entries {
                    ps.push(format!("adapt.layer{}.{}.mask", e.layer, e.target.name()), e.tensor.clone());
                }
            }
            AdaptationParams::Wsn { scores, .. } => {
                for e in &scores.entries {
                    ps.push(format!("adapt.layer{}.{}.score", e.layer, e.target.name()), e.tensor.clone());
                }
            }
            AdaptationParams::Lora(lora) => {
                for e in &lora.entries {
                    ps.push(format!("adapt.layer{}.{}.lora_a", e.layer, e.target.name()), e.a.clone());
                    ps.push(format!("adapt.layer{}.{}.lora_b", e.layer, e.target.name()), e.b.clone());
                }
            }
            AdaptationParams::Adapter(ad) => {
                for e in &ad.entries {
                    for (site, stack) in [("attn", &e.attn), ("ff", &e.ff)] {
                        ps.push(format!("adapt.layer{}.{site}.down_w", e.layer), stack.down_w.clone());
                        ps.push(format!("adapt.layer{}.{site}.down_b", e.layer), stack.down_b.clone());
                        ps.push(format!("adapt.layer{}.{site}.up_w", e.layer), stack.up_w.clone());
                        ps.push(format!("adapt.layer{}.{site}.up_b", e.layer), stack.up_b.clone());
                    }
                }
            }
            AdaptationParams::PromptOnly => {}
        }
    }

    /// Number of [`ParamSet`] slots [`AdaptationParams::append_params`] adds.
    pub fn slot_count(&self) -> usize {
        match self {
            AdaptationParams::SoftMask(set) => set.entries.len(),
            AdaptationParams::Wsn { scores, .. } => scores.entries.len(),
            AdaptationParams::Lora(l) => l.entries.len() * 2,
            AdaptationParams::Adapter(a) => a.entries.len() * 8,
            AdaptationParams::PromptOnly => 0,
        }
    }

    /// Copies trained values back from `ps`, starting at `start` and consuming
    /// [`AdaptationParams::slot_count`] slots.
    pub fn read_back(&mut self, ps: &ParamSet, start: usize) {
        let mut slot = start;
        let next = |slot: &mut usize| {
            let t = ps.tensor(*slot).clone();
            *slot += 1;
            t
        };
        match self {
            AdaptationParams::SoftMask(set) => {
                for e in &mut set.entries {
                    e.tensor = next(&mut slot);
                }
            }
            AdaptationParams::Wsn { scores, .. } => {
                for e in &mut scores.entries {
                    e.tensor = next(&mut slot);
                }
            }
            AdaptationParams::Lora(l) => {
                for e in &mut l.entries {
                    e.a = next(&mut slot);
                    e.b = next(&mut slot);
                }
            }
            AdaptationParams::Adapter(a) => {
                for e in &mut a.entries {
                    e.attn.down_w = next(&mut slot);
                    e.attn.down_b = next(&mut slot);
                    e.attn.up_w = next(&mut slot);
                    e.attn.up_b = next(&mut slot);
                    e.ff.down_w = next(&mut slot);
                    e.ff.down_b = next(&mut slot);
                    e.ff.up_w = next(&mut slot);
                    e.ff.up_b = next(&mut slot);
                }
            }
            AdaptationParams::PromptOnly => {}
        }
    }

    /// Registers every adaptation tensor as a tape constant, in the same order
    /// as [`AdaptationParams::append_params`]; used for evaluation passes.
    pub fn register_const(&self, tape: &mut Tape) -> Vec<NodeId> {
        let mut ps = ParamSet::new();
        self.append_params(&mut ps);
        (0..ps.len()).map(|i| tape.constant(ps.tensor(i).clone())).collect()
    }

    /// Rewrites `model`'s raw weight nodes into adapted ones. `ids` must hold
    /// this adaptation's tensors in [`AdaptationParams::append_params`] order
    /// (for soft masks that means one node per entry, and so on).
    pub fn apply_to_model(&self, tape: &mut Tape, model: &mut ModelNodes, ids: &[NodeId]) -> Result<()> {
        if ids.len() != self.slot_count() {
            return Err(Error::contract(format!(
                "apply_to_model: {} node ids for {} slots",
                ids.len(),
                self.slot_count()
            )));
        }
        match self {
            AdaptationParams::SoftMask(set) => {
                for (e, &mask) in set.entries.iter().zip(ids) {
                    let raw = *target_node(model, e.layer, e.target)?;
                    let effective = tape.mul(raw, mask)?;
                    *target_node(model, e.layer, e.target)? = effective;
                }
            }
            AdaptationParams::Wsn { scores, keep_percent } => {
                for (e, &score) in scores.entries.iter().zip(ids) {
                    let keep = wsn_keep_count(e.tensor.numel(), *keep_percent);
                    let binary = tape.wsn_binarize(score, keep)?;
                    let raw = *target_node(model, e.layer, e.target)?;
                    let effective = tape.mul(raw, binary)?;
                    *target_node(model, e.layer, e.target)? = effective;
                }
            }
            AdaptationParams::Lora(l) => {
                for (e, pair) in l.entries.iter().zip(ids.chunks(2)) {
                    let (a, b) = (pair[0], pair[1]);
                    let update = tape.matmul(a, b)?;
                    let raw = *target_node(model, e.layer, e.target)?;
                    let effective = tape.add(raw, update)?;
                    *target_node(model, e.layer, e.target)? = effective;
                }
            }
            AdaptationParams::Adapter(a) => {
                for (e, chunk) in a.entries.iter().zip(ids.chunks(8)) {
                    let layer = model
                        .layers
                        .get_mut(e.layer)
                        .ok_or_else(|| Error::contract(format!("adapter layer {} out of range", e.layer)))?;
                    layer.adapter_attn =
                        Some(AdapterNodes { down_w: chunk[0], down_b: chunk[1], up_w: chunk[2], up_b: chunk[3] });
                    layer.adapter_ff =
                        Some(AdapterNodes { down_w: chunk[4], down_b: chunk[5], up_w: chunk[6], up_b: chunk[7] });
                }
            }
            AdaptationParams::PromptOnly => {}
        }
        Ok(())
    }

    /// The soft or binary masks this adaptation effectively applies, for
    /// reporting; LoRA/Adapter/PromptOnly have none.
    pub fn effective_masks(&self) -> Option<MaskSet> {
        match self {
            AdaptationParams::SoftMask(set) => Some(set.clone()),
            AdaptationParams::Wsn { scores, keep_percent } => {
                let entries = scores
                    .entries
                    .iter()
                    .map(|e| {
                        let keep = wsn_keep_count(e.tensor.numel(), *keep_percent);
                        MaskEntry { layer: e.layer, target: e.target, tensor: binarize_tensor(&e.tensor, keep) }
                    })
                    .collect();
                Some(MaskSet { entries })
            }
            _ => None,
        }
    }
}

pub(crate) fn target_node<'m>(
    model: &'m mut ModelNodes,
    layer: usize,
    target: TargetMatrix,
) -> Result<&'m mut NodeId> {
    let l = model
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::contract(format!("layer {layer} out of range for model")))?;
    Ok(match target {
        TargetMatrix::Q => &mut l.wq,
        TargetMatrix::K => &mut l.wk,
        TargetMatrix::V => &mut l.wv,
        TargetMatrix::O => &mut l.wo,
        TargetMatrix::Fc1 => &mut l.fc1,
        TargetMatrix::Fc2 => &mut l.fc2,
    })
}

/// Entries kept by a WSN mask over `numel` scores at `keep_percent`.
pub fn wsn_keep_count(numel: usize, keep_percent: f64) -> usize {
    (keep_percent / 100.0 * numel as f64).round() as usize
}

/// Eager top-k binarization matching the tape op's tie rule.
fn binarize_tensor(scores: &Tensor, keep: usize) -> Tensor {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let b = tape.wsn_binarize(s, keep).expect("keep count within bounds");
    tape.value(b).clone()
}

// ── Parameter accounting ────────────────────────────────────────────────────

/// Dimensions used for parameter counting, decoupled from the runtime
/// architecture so counts can be computed for larger reference models.
#[derive(Debug, Clone, Copy)]
pub struct CountDims {
    pub d_model: usize,
    pub d_ff: usize,
    /// Count Q, K, V as one fused `[d, 3d]` projection, the convention of the
    /// large vision-transformer implementations this crate miniaturizes.
    pub fused_qkv: bool,
}

/// Exact number of learnable scalars a mechanism trains per task, over
/// `n_layers` adapted layers and the given target matrices.
///
/// With `fused_qkv` the Q/K/V targets must be requested together and count as
/// a single `[d, 3d]` matrix.
pub fn count_trainable_params(
    mechanism: &Mechanism,
    targets: &[TargetMatrix],
    n_layers: usize,
    dims: &CountDims,
) -> Result<u64> {
    mechanism.validate()?;
    if n_layers == 0 {
        log::warn!("count_trainable_params: zero adapted layers counts zero parameters");
    }
    let shapes = target_shapes(targets, dims)?;
    let per_layer: u64 = match mechanism {
        Mechanism::SoftMask { .. } | Mechanism::Wsn { .. } => {
            shapes.iter().map(|[r, c]| (r * c) as u64).sum()
        }
        Mechanism::Lora { rank } => {
            shapes.iter().map(|[r, c]| (*rank as u64) * (r + c) as u64).sum()
        }
        Mechanism::Adapter { rank } => {
            let d = dims.d_model as u64;
            let r = *rank as u64;
            // Two bottlenecks per layer, each: down (d*r + r) + up (r*d + d).
            2 * (d * r + r + r * d + d)
        }
        Mechanism::PromptOnly => 0,
    };
    Ok(per_layer * n_layers as u64)
}

/// Resolves target matrices to shapes, folding Q/K/V into one fused matrix
/// when requested.
fn target_shapes(targets: &[TargetMatrix], dims: &CountDims) -> Result<Vec<[usize; 2]>> {
    let d = dims.d_model;
    let mut shapes = Vec::new();
    if dims.fused_qkv {
        let has_q = targets.contains(&TargetMatrix::Q);
        let has_k = targets.contains(&TargetMatrix::K);
        let has_v = targets.contains(&TargetMatrix::V);
        if has_q != has_k || has_k != has_v {
            return Err(Error::contract(
                "fused qkv counting requires either all or none of q, k, v as targets",
            ));
        }
        if has_q {
            shapes.push([d, 3 * d]);
        }
        for t in targets {
            match t {
                TargetMatrix::Q | TargetMatrix::K | TargetMatrix::V => {}
                TargetMatrix::O => shapes.push([d, d]),
                TargetMatrix::Fc1 => shapes.push([d, dims.d_ff]),
                TargetMatrix::Fc2 => shapes.push([dims.d_ff, d]),
            }
        }
    } else {
        for t in targets {
            shapes.push(match t {
                TargetMatrix::Q | TargetMatrix::K | TargetMatrix::V | TargetMatrix::O => [d, d],
                TargetMatrix::Fc1 => [d, dims.d_ff],
                TargetMatrix::Fc2 => [dims.d_ff, d],
            });
        }
    }
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_logits, tokenize, ClassifierHead};
    use crate::seeds;
    use crate::testutil::{tiny_backbone, tiny_config};

    const VIT_B: CountDims = CountDims { d_model: 768, d_ff: 3072, fused_qkv: true };

    #[test]
    fn one_fused_attention_layer_of_masks_counts_exactly() {
        let n = count_trainable_params(
            &Mechanism::SoftMask { init: MaskInit::UniformOnes },
            &[TargetMatrix::Q, TargetMatrix::K, TargetMatrix::V],
            1,
            &VIT_B,
        )
        .unwrap();
        assert_eq!(n, 1_769_472);
    }

    #[test]
    fn lora_rank_four_over_three_layers_counts_exactly() {
        let n = count_trainable_params(
            &Mechanism::Lora { rank: 4 },
            &[TargetMatrix::Q, TargetMatrix::K, TargetMatrix::V, TargetMatrix::O],
            3,
            &VIT_B,
        )
        .unwrap();
        assert_eq!(n, 55_296);
    }

    #[test]
    fn fused_counting_rejects_partial_qkv() {
        let r = count_trainable_params(
            &Mechanism::SoftMask { init: MaskInit::UniformOnes },
            &[TargetMatrix::Q, TargetMatrix::O],
            1,
            &VIT_B,
        );
        assert!(r.is_err());
    }

    #[test]
    fn empty_target_set_counts_zero() {
        let n = count_trainable_params(
            &Mechanism::SoftMask { init: MaskInit::UniformOnes },
            &[],
            4,
            &VIT_B,
        )
        .unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn count_matches_initialized_tensors_for_the_desk_architecture() {
        let cfg = tiny_config();
        let dims = CountDims { d_model: cfg.d_model, d_ff: cfg.d_ff, fused_qkv: false };
        let mut rng = seeds::stream_rng(1, 1);
        for mechanism in [
            Mechanism::SoftMask { init: MaskInit::UniformOnes },
            Mechanism::Wsn { keep_percent: 87.0 },
            Mechanism::Lora { rank: 3 },
            Mechanism::Adapter { rank: 5 },
            Mechanism::PromptOnly,
        ] {
            let params = AdaptationParams::init(
                &mut rng,
                &cfg,
                &mechanism,
                &[0, 1],
                &TargetMatrix::ATTENTION,
            )
            .unwrap();
            let mut ps = ParamSet::new();
            params.append_params(&mut ps);
            let counted =
                count_trainable_params(&mechanism, &TargetMatrix::ATTENTION, 2, &dims).unwrap();
            assert_eq!(ps.scalar_count(), counted, "mechanism {mechanism:?}");
            assert_eq!(ps.len(), params.slot_count());
        }
    }

    #[test]
    fn mask_init_schemes_have_expected_statistics() {
        let cfg = tiny_config();
        let mut rng = seeds::stream_rng(2, 9);
        let ones = init_masks(&mut rng, &cfg, &[0], &[TargetMatrix::Q], MaskInit::UniformOnes).unwrap();
        assert!(ones.entries[0].tensor.data.iter().all(|&v| v == 1.0));
        let xavier = init_masks(&mut rng, &cfg, &[0], &[TargetMatrix::Q], MaskInit::Xavier).unwrap();
        let bound = (6.0 / 32.0f64).sqrt();
        assert!(xavier.entries[0].tensor.data.iter().all(|&v| v.abs() < bound));
        let normal =
            init_masks(&mut rng, &cfg, &[0], &[TargetMatrix::Q], MaskInit::Normal { mean: 1.0, std: 0.1 }).unwrap();
        assert!((normal.entries[0].tensor.mean() - 1.0).abs() < 0.05);
    }

    #[test]
    fn init_rejects_out_of_range_layers() {
        let cfg = tiny_config();
        let mut rng = seeds::stream_rng(3, 1);
        assert!(init_masks(&mut rng, &cfg, &[99], &[TargetMatrix::Q], MaskInit::UniformOnes).is_err());
        assert!(init_lora(&mut rng, &cfg, &[99], &[TargetMatrix::Q], 2).is_err());
        assert!(init_adapters(&mut rng, &cfg, &[99], 2).is_err());
    }

    /// Logits under a mechanism at initialization, on a shared head.
    fn logits_with(adapt: &AdaptationParams, head: &ClassifierHead, x: &[f64]) -> Vec<f64> {
        let b = tiny_backbone();
        let cfg = b.config();
        let mut tape = Tape::new();
        let raw = b.register(&mut tape);
        let hw = tape.constant(head.w.clone());
        let hb = tape.constant(head.b.clone());
        let mut model = raw.into_model(Some((hw, hb)));
        let ids = adapt.register_const(&mut tape);
        adapt.apply_to_model(&mut tape, &mut model, &ids).unwrap();
        let tokens = tokenize(x, cfg).unwrap();
        let logits = forward_logits(&mut tape, &model, cfg, &tokens, &mut None).unwrap();
        tape.value(logits).data.clone()
    }

    #[test]
    fn every_mechanism_is_the_identity_at_initialization() {
        let b = tiny_backbone();
        let cfg = b.config();
        let mut rng = seeds::stream_rng(11, 4);
        let head = ClassifierHead::init(&mut seeds::stream_rng(11, 5), cfg.d_model, 4);
        let x: Vec<f64> = (0..cfg.feature_dim()).map(|i| (i as f64 * 0.73).sin() * 3.0).collect();
        let baseline = logits_with(&AdaptationParams::PromptOnly, &head, &x);

        let mechanisms = [
            Mechanism::SoftMask { init: MaskInit::UniformOnes },
            Mechanism::Lora { rank: 4 },
            Mechanism::Adapter { rank: 4 },
        ];
        for mechanism in mechanisms {
            let adapt =
                AdaptationParams::init(&mut rng, cfg, &mechanism, &[0, 1], &TargetMatrix::ATTENTION).unwrap();
            let adapted = logits_with(&adapt, &head, &x);
            for (u, v) in baseline.iter().zip(&adapted) {
                assert_eq!(u.to_bits(), v.to_bits(), "mechanism {mechanism:?} must start as the identity");
            }
        }
    }

    #[test]
    fn wsn_keep_counts_round_per_matrix() {
        assert_eq!(wsn_keep_count(256, 87.0), 223); // 222.72 rounds up
        assert_eq!(wsn_keep_count(256, 80.0), 205); // 204.8 rounds up
        assert_eq!(wsn_keep_count(256, 90.0), 230); // 230.4 rounds down
        assert_eq!(wsn_keep_count(256, 0.0), 0);
        assert_eq!(wsn_keep_count(256, 100.0), 256);
    }

    #[test]
    fn wsn_effective_masks_have_exact_ones_counts() {
        let cfg = tiny_config();
        let mut rng = seeds::stream_rng(7, 2);
        for keep_percent in [0.0, 80.0, 87.0, 90.0, 100.0] {
            let adapt = AdaptationParams::init(
                &mut rng,
                &cfg,
                &Mechanism::Wsn { keep_percent },
                &[0, 1],
                &TargetMatrix::ATTENTION,
            )
            .unwrap();
            let masks = adapt.effective_masks().unwrap();
            for e in &masks.entries {
                let ones = e.tensor.data.iter().filter(|&&v| v == 1.0).count();
                let zeros = e.tensor.data.iter().filter(|&&v| v == 0.0).count();
                assert_eq!(ones + zeros, e.tensor.numel(), "mask must be binary");
                assert_eq!(ones, wsn_keep_count(e.tensor.numel(), keep_percent));
            }
        }
    }
}
