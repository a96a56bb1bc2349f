//! Dual prompt pools attached by prefix-tuning.
//!
//! Two kinds of learned prompt rows are prepended to the key/value inputs of
//! selected attention layers: a *global* prompt shared by every task and kept
//! training across the whole sequence, and a *task* prompt trained only during
//! its own task and frozen afterwards. Each task prompt carries a learned key
//! vector; at test time an input's frozen backbone feature is matched against
//! the stored keys by cosine distance to pick which task's prompt (and
//! adaptation) to apply.

use crate::backbone::{BackboneConfig, ModelNodes, PromptNodes};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where the two prompt pools attach. Layer ranges are 1-indexed and
/// inclusive, matching how transformer depths are usually quoted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentPlan {
    /// Layers receiving the shared global prompt.
    pub g_layers: (usize, usize),
    /// Layers receiving the per-task prompt.
    pub e_layers: (usize, usize),
    /// Row count of the global prompt; must be even (half key, half value).
    pub g_len: usize,
    /// Row count of each task prompt; must be even.
    pub e_len: usize,
}

impl Default for AttachmentPlan {
    fn default() -> Self {
        AttachmentPlan { g_layers: (1, 2), e_layers: (3, 4), g_len: 4, e_len: 4 }
    }
}

impl AttachmentPlan {
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        for (name, (lo, hi), len) in [
            ("global", self.g_layers, self.g_len),
            ("task", self.e_layers, self.e_len),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::contract(format!(
                    "{name} prompt layer range ({lo}, {hi}) must be 1-indexed and non-empty"
                )));
            }
            if hi > cfg.n_layers {
                return Err(Error::contract(format!(
                    "{name} prompt range ends at layer {hi} but the backbone has {} layers",
                    cfg.n_layers
                )));
            }
            if len == 0 || len % 2 != 0 {
                return Err(Error::contract(format!(
                    "{name} prompt length {len} must be positive and even"
                )));
            }
        }
        let (g_lo, g_hi) = self.g_layers;
        let (e_lo, e_hi) = self.e_layers;
        if g_lo <= e_hi && e_lo <= g_hi {
            return Err(Error::contract(format!(
                "global layers ({g_lo}, {g_hi}) and task layers ({e_lo}, {e_hi}) overlap"
            )));
        }
        Ok(())
    }

    /// Whether zero-based `layer` receives the global prompt.
    pub fn g_attaches(&self, layer: usize) -> bool {
        (self.g_layers.0..=self.g_layers.1).contains(&(layer + 1))
    }

    /// Whether zero-based `layer` receives the task prompt.
    pub fn e_attaches(&self, layer: usize) -> bool {
        (self.e_layers.0..=self.e_layers.1).contains(&(layer + 1))
    }
}

/// The shared prompt: one `[g_len, d_model]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrompt {
    pub rows: Tensor,
}

impl GlobalPrompt {
    pub fn init<R: Rng>(rng: &mut R, plan: &AttachmentPlan, cfg: &BackboneConfig) -> GlobalPrompt {
        GlobalPrompt { rows: Tensor::randn(rng, &[plan.g_len, cfg.d_model], PROMPT_INIT_STD) }
    }
}

/// One task's prompt rows plus its matching key.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    /// `[e_len, d_model]`.
    pub rows: Tensor,
    /// `[d_model]`, matched against frozen backbone features.
    pub key: Tensor,
}

impl TaskPrompt {
    pub fn init<R: Rng>(rng: &mut R, plan: &AttachmentPlan, cfg: &BackboneConfig) -> TaskPrompt {
        TaskPrompt {
            rows: Tensor::randn(rng, &[plan.e_len, cfg.d_model], PROMPT_INIT_STD),
            key: Tensor::randn(rng, &[cfg.d_model], PROMPT_INIT_STD),
        }
    }
}

const PROMPT_INIT_STD: f64 = 0.02;

/// Splits a registered `[len, d]` prompt node into its key/value prefix
/// halves: rows `[0, len/2)` feed the key path, rows `[len/2, len)` the value
/// path.
pub fn split_prompt(tape: &mut Tape, prompt: NodeId, len: usize) -> Result<PromptNodes> {
    if len % 2 != 0 {
        return Err(Error::contract(format!("prompt length {len} must be even to split")));
    }
    let half = len / 2;
    Ok(PromptNodes {
        key_prefix: tape.slice_rows(prompt, 0, half)?,
        value_prefix: tape.slice_rows(prompt, half, half)?,
    })
}

/// Attaches global and/or task prompt nodes to each planned layer. When a
/// layer is in both no-range, its `prompt` stays `None`. Layers never receive
/// both pools (the plan's validation keeps the ranges disjoint).
pub fn attach_prompts(
    tape: &mut Tape,
    model: &mut ModelNodes,
    plan: &AttachmentPlan,
    g_prompt: Option<NodeId>,
    e_prompt: Option<NodeId>,
) -> Result<()> {
    for layer in 0..model.layers.len() {
        let slot = if plan.g_attaches(layer) {
            g_prompt.map(|p| (p, plan.g_len))
        } else if plan.e_attaches(layer) {
            e_prompt.map(|p| (p, plan.e_len))
        } else {
            None
        };
        if let Some((prompt, len)) = slot {
            model.layers[layer].prompt = Some(split_prompt(tape, prompt, len)?);
        }
    }
    Ok(())
}

/// Appends prompt tensors to a parameter set: the global prompt (if given)
/// first, then the task prompt rows and key.
pub fn append_prompt_params(
    ps: &mut ParamSet,
    g: Option<&GlobalPrompt>,
    e: Option<&TaskPrompt>,
) {
    if let Some(g) = g {
        ps.push("prompt.global", g.rows.clone());
    }
    if let Some(e) = e {
        ps.push("prompt.task.rows", e.rows.clone());
        ps.push("prompt.task.key", e.key.clone());
    }
}

/// Cosine distance `1 - cos(a, b)` between two plain vectors; a zero-norm
/// side yields distance 1 by convention.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Index of the stored key closest to `query` under cosine distance; ties go
/// to the lowest index. Errors on an empty key list.
pub fn match_key(keys: &[Tensor], query: &[f64]) -> Result<usize> {
    if keys.is_empty() {
        return Err(Error::contract("match_key: no keys to match against"));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, k) in keys.iter().enumerate() {
        let d = cosine_distance(&k.data, query);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_logits, tokenize, ClassifierHead};
    use crate::seeds;
    use crate::testutil::{tiny_backbone, tiny_config};

    fn tiny_plan() -> AttachmentPlan {
        AttachmentPlan { g_layers: (1, 1), e_layers: (2, 2), g_len: 4, e_len: 4 }
    }

    #[test]
    fn default_plan_validates_on_a_four_layer_backbone() {
        let cfg = BackboneConfig::default();
        AttachmentPlan::default().validate(&cfg).unwrap();
    }

    #[test]
    fn plan_rejects_overlap_zero_index_odd_length_and_depth_overflow() {
        let cfg = tiny_config();
        let bad_overlap =
            AttachmentPlan { g_layers: (1, 2), e_layers: (2, 2), g_len: 4, e_len: 4 };
        assert!(bad_overlap.validate(&cfg).is_err());
        let bad_zero = AttachmentPlan { g_layers: (0, 1), ..tiny_plan() };
        assert!(bad_zero.validate(&cfg).is_err());
        let bad_odd = AttachmentPlan { g_len: 3, ..tiny_plan() };
        assert!(bad_odd.validate(&cfg).is_err());
        let bad_deep = AttachmentPlan { e_layers: (2, 9), ..tiny_plan() };
        assert!(bad_deep.validate(&cfg).is_err());
        tiny_plan().validate(&cfg).unwrap();
    }

    #[test]
    fn attachment_predicates_are_one_indexed_inclusive() {
        let plan = AttachmentPlan::default();
        assert!(plan.g_attaches(0) && plan.g_attaches(1));
        assert!(!plan.g_attaches(2) && !plan.g_attaches(3));
        assert!(plan.e_attaches(2) && plan.e_attaches(3));
        assert!(!plan.e_attaches(0) && !plan.e_attaches(1));
    }

    #[test]
    fn split_prompt_halves_rows_in_order() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let p = tape.constant(Tensor::from_vec(&[4, 3], data).unwrap());
        let nodes = split_prompt(&mut tape, p, 4).unwrap();
        assert_eq!(tape.value(nodes.key_prefix).data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(tape.value(nodes.value_prefix).data, vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn cosine_distance_hits_the_three_reference_angles() {
        let e1 = [1.0, 0.0];
        assert!((cosine_distance(&e1, &[2.0, 0.0]) - 0.0).abs() < 1e-15);
        assert!((cosine_distance(&e1, &[-3.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&e1, &[0.0, 0.5]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&e1, &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn match_key_picks_nearest_and_breaks_ties_low() {
        let keys = vec![
            Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(),
            Tensor::from_vec(&[2], vec![1.0, 0.1]).unwrap(),
            Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap(),
        ];
        assert_eq!(match_key(&keys, &[1.0, 0.05]).unwrap(), 1);
        // Duplicate keys tie; the first wins.
        let dup = vec![keys[2].clone(), keys[2].clone()];
        assert_eq!(match_key(&dup, &[1.0, 0.0]).unwrap(), 0);
        assert!(match_key(&[], &[1.0]).is_err());
    }

    #[test]
    fn attached_prompts_change_logits_and_lengthen_attention_rows() {
        let b = tiny_backbone();
        let cfg = b.config();
        let plan = tiny_plan();
        plan.validate(cfg).unwrap();
        let mut rng = seeds::stream_rng(21, 3);
        let g = GlobalPrompt::init(&mut rng, &plan, cfg);
        let e = TaskPrompt::init(&mut rng, &plan, cfg);
        let head = ClassifierHead::init(&mut seeds::stream_rng(21, 4), cfg.d_model, 4);
        let x: Vec<f64> = (0..cfg.feature_dim()).map(|i| (i as f64 * 0.31).cos()).collect();
        let tokens = tokenize(&x, cfg).unwrap();

        let run = |with_prompts: bool| {
            let mut tape = Tape::new();
            let raw = b.register(&mut tape);
            let hw = tape.constant(head.w.clone());
            let hb = tape.constant(head.b.clone());
            let mut model = raw.into_model(Some((hw, hb)));
            if with_prompts {
                let gp = tape.constant(g.rows.clone());
                let ep = tape.constant(e.rows.clone());
                attach_prompts(&mut tape, &mut model, &plan, Some(gp), Some(ep)).unwrap();
            }
            let mut trace = Some(crate::backbone::ForwardTrace::default());
            let logits = forward_logits(&mut tape, &model, cfg, &tokens, &mut trace).unwrap();
            (tape.value(logits).data.clone(), trace.unwrap())
        };

        let (bare, trace_bare) = run(false);
        let (prompted, trace_prompted) = run(true);
        assert!(bare.iter().zip(&prompted).any(|(u, v)| u != v), "prompts must influence the logits");

        let seq = cfg.seq_len();
        // Layer 0 gets the global prompt: keys lengthen by g_len/2.
        assert_eq!(trace_bare.attention[0][0].shape, vec![seq, seq]);
        assert_eq!(trace_prompted.attention[0][0].shape, vec![seq, seq + plan.g_len / 2]);
        // Layer 1 gets the task prompt.
        assert_eq!(trace_prompted.attention[1][0].shape, vec![seq, seq + plan.e_len / 2]);
        // Attention rows still sum to 1 with prefixes attached.
        for head_map in &trace_prompted.attention[0] {
            for r in 0..head_map.rows() {
                let s: f64 = (0..head_map.cols()).map(|c| head_map.at(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompt_init_is_seed_deterministic() {
        let cfg = tiny_config();
        let plan = tiny_plan();
        let a = GlobalPrompt::init(&mut seeds::stream_rng(9, 1), &plan, &cfg);
        let b = GlobalPrompt::init(&mut seeds::stream_rng(9, 1), &plan, &cfg);
        assert_eq!(a, b);
        let c = GlobalPrompt::init(&mut seeds::stream_rng(9, 2), &plan, &cfg);
        assert_ne!(a, c);
    }
}
