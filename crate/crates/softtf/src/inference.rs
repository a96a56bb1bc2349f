//! Task-identity inference and the end-to-end prediction pipeline.
//!
//! At test time the task an input belongs to is unknown. Two inference
//! procedures recover it: *key matching* compares the frozen backbone's
//! class-token feature against each task's learned key (one decision per
//! example), and *entropy-gradient* inference builds a single classifier
//! whose per-task parts are blended by mixture coefficients, differentiates
//! the prediction entropy of a small batch with respect to those
//! coefficients, and picks the task whose coefficient most steeply *reduces*
//! entropy (one decision per batch). An oracle mode that is handed the true
//! identity exists for measuring the upper bound and the forgetting metric.

use crate::adaptation::{target_node, AdaptationParams};
use crate::backbone::{argmax, forward_logits, tokenize, PretrainedBackbone};
use crate::cl_engine::{batched_results, ClRun, EvalBundle, TaskState};
use crate::cl_engine::{logits_chunk, predict_chunk};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::metrics::EvalMatrix;
use crate::par;
use crate::prompts::{attach_prompts, match_key, AttachmentPlan};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// How task identity is decided at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdMode {
    /// True identity supplied by the harness; measures the isolation ceiling.
    Oracle,
    /// Cosine key matching per example.
    Prompt,
    /// Entropy-gradient over mixture coefficients per batch.
    Gradient,
}

/// How many leading examples of a batch feed the gradient decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShotsRepr", into = "ShotsRepr")]
pub enum Shots {
    K(usize),
    Batch,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotsRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<ShotsRepr> for Shots {
    type Error = String;
    fn try_from(r: ShotsRepr) -> std::result::Result<Shots, String> {
        match r {
            ShotsRepr::Count(0) => Err("shots must be at least 1".into()),
            ShotsRepr::Count(k) => Ok(Shots::K(k)),
            ShotsRepr::Word(w) if w == "batch" => Ok(Shots::Batch),
            ShotsRepr::Word(w) => Err(format!("shots must be a count or \"batch\", got {w:?}")),
        }
    }
}

impl From<Shots> for ShotsRepr {
    fn from(s: Shots) -> ShotsRepr {
        match s {
            Shots::K(k) => ShotsRepr::Count(k),
            Shots::Batch => ShotsRepr::Word("batch".into()),
        }
    }
}

/// Which prompts are attached during the mixture forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMixing {
    /// Coefficient-weighted blend of every task's prompt rows.
    MixTaskPrompts,
    /// Shared prompt only; no per-task prompt during the decision forward.
    SharedOnly,
}

/// Which snapshot of the cross-task shared state (shared prompt and head)
/// the mixture forward uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedState {
    /// The newest candidate's snapshot, held fixed.
    #[default]
    Newest,
    /// Coefficient-weighted blend of every candidate's snapshot, so each
    /// simplex corner reproduces that task's complete frozen bundle.
    Blended,
}

/// Settings for entropy-gradient identity inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientIdConfig {
    pub shots: Shots,
    pub prompt_mixing: PromptMixing,
    #[serde(default)]
    pub shared: SharedState,
}

impl Default for GradientIdConfig {
    fn default() -> Self {
        GradientIdConfig {
            shots: Shots::Batch,
            prompt_mixing: PromptMixing::MixTaskPrompts,
            shared: SharedState::default(),
        }
    }
}

/// Examples per evaluation batch (one gradient-identity decision each).
pub const DEFAULT_EVAL_BATCH: usize = 20;

// ── Prompt ID ───────────────────────────────────────────────────────────────

/// Key-matching identity for one example: nearest task key (cosine distance)
/// to the frozen backbone's class-token feature.
pub fn infer_task_prompt_id(
    backbone: &PretrainedBackbone,
    candidates: &[TaskState],
    features: &[f64],
) -> Result<usize> {
    ensure_candidates(candidates)?;
    let q = backbone.class_token_feature(features)?;
    let keys: Vec<Tensor> = candidates.iter().map(|t| t.prompt.key.clone()).collect();
    match_key(&keys, &q.data)
}

// ── Gradient ID ─────────────────────────────────────────────────────────────

/// Entropy-gradient identity for one batch under `cfg`. The decision uses the
/// first `shots` examples; `shots` must not exceed the batch.
pub fn infer_task_gradient_id(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    candidates: &[TaskState],
    batch: &[Vec<f64>],
    cfg: &GradientIdConfig,
) -> Result<usize> {
    ensure_candidates(candidates)?;
    if batch.is_empty() {
        return Err(Error::contract("gradient id: empty batch"));
    }
    let s = match cfg.shots {
        Shots::Batch => batch.len(),
        Shots::K(k) => {
            if k == 0 || k > batch.len() {
                return Err(Error::contract(format!(
                    "gradient id: shots {k} outside [1, {}]",
                    batch.len()
                )));
            }
            k
        }
    };
    if candidates.len() == 1 {
        return Ok(0);
    }
    let uniform = vec![1.0 / candidates.len() as f64; candidates.len()];
    let partials = mixture_entropy_partials(
        backbone,
        plan,
        candidates,
        &batch[..s],
        cfg.prompt_mixing,
        cfg.shared,
        &uniform,
    )?;
    Ok(argmin(&partials))
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn ensure_candidates(candidates: &[TaskState]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("identity inference requires at least one trained task"));
    }
    for t in candidates {
        if !t.frozen {
            return Err(Error::contract(format!("task {} is not frozen", t.task_id)));
        }
    }
    Ok(())
}

/// One blended-tensor term: coefficient-weighted sum of per-task constants.
fn mix_tensors(tape: &mut Tape, parts: &[&Tensor], alpha: &[NodeId]) -> Result<NodeId> {
    debug_assert_eq!(parts.len(), alpha.len());
    let terms: Vec<NodeId> = parts
        .iter()
        .zip(alpha)
        .map(|(t, &a)| {
            let c = tape.constant((*t).clone());
            tape.scale_by_scalar(c, a)
        })
        .collect::<Result<_>>()?;
    tape.add_n(&terms)
}

/// Wires the coefficient-blended classifier onto a tape and returns the mean
/// prediction entropy over `batch` plus the coefficient node ids.
///
/// Task-specific parts always carry coefficients: each task's effective
/// weight-space adaptation and (under [`PromptMixing::MixTaskPrompts`]) its
/// prompt rows enter as coefficient-weighted sums. The cross-task shared
/// state (shared prompt and head) follows `shared`: either the newest
/// candidate's snapshot held fixed, or the same coefficient-weighted blend as
/// everything else, which makes each simplex corner reproduce that task's
/// complete frozen bundle.
fn mixture_entropy_node(
    tape: &mut Tape,
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    candidates: &[TaskState],
    batch: &[Vec<f64>],
    mixing: PromptMixing,
    shared: SharedState,
    alpha_values: &[f64],
) -> Result<(NodeId, Vec<NodeId>)> {
    if alpha_values.len() != candidates.len() {
        return Err(Error::contract("mixture: one coefficient per candidate task"));
    }
    let cfg = backbone.config();
    let alpha: Vec<NodeId> =
        alpha_values.iter().map(|&v| tape.param(Tensor::filled(&[1], v))).collect();

    let (head_w, head_b, g_node) = match shared {
        SharedState::Newest => {
            let newest = candidates.last().expect("candidates checked non-empty");
            (
                tape.constant(newest.head_snapshot.w.clone()),
                tape.constant(newest.head_snapshot.b.clone()),
                tape.constant(newest.g_snapshot.rows.clone()),
            )
        }
        SharedState::Blended => {
            let w_parts: Vec<&Tensor> = candidates.iter().map(|t| &t.head_snapshot.w).collect();
            let b_parts: Vec<&Tensor> = candidates.iter().map(|t| &t.head_snapshot.b).collect();
            let g_parts: Vec<&Tensor> = candidates.iter().map(|t| &t.g_snapshot.rows).collect();
            congruent_shapes(&w_parts, "head weights")?;
            congruent_shapes(&b_parts, "head biases")?;
            congruent_shapes(&g_parts, "shared prompt rows")?;
            (
                mix_tensors(tape, &w_parts, &alpha)?,
                mix_tensors(tape, &b_parts, &alpha)?,
                mix_tensors(tape, &g_parts, &alpha)?,
            )
        }
    };

    let raw = backbone.register(tape);
    let mut model = raw.into_model(Some((head_w, head_b)));

    apply_mixed_adaptation(tape, &mut model, candidates, &alpha)?;

    let e_mix = match mixing {
        PromptMixing::SharedOnly => None,
        PromptMixing::MixTaskPrompts => {
            let parts: Vec<&Tensor> = candidates.iter().map(|t| &t.prompt.rows).collect();
            congruent_shapes(&parts, "task prompt rows")?;
            Some(mix_tensors(tape, &parts, &alpha)?)
        }
    };
    attach_prompts(tape, &mut model, plan, Some(g_node), e_mix)?;

    let mut entropies = Vec::with_capacity(batch.len());
    for f in batch {
        let x = tokenize(f, cfg)?;
        let logits = forward_logits(tape, &model, cfg, &x, &mut None)?;
        entropies.push(tape.entropy_row(logits)?);
    }
    let h = tape.mean_scalars(&entropies)?;
    Ok((h, alpha))
}

/// Blends each task's weight-space adaptation into the model under shared
/// coefficients. Mask mechanisms blend their (binarized, for score-based
/// masks) mask tensors; low-rank mechanisms blend their update products;
/// bottleneck adapters blend parameter tensors site by site.
fn apply_mixed_adaptation(
    tape: &mut Tape,
    model: &mut crate::backbone::ModelNodes,
    candidates: &[TaskState],
    alpha: &[NodeId],
) -> Result<()> {
    let first = &candidates[0].adaptation;
    let same_kind = candidates
        .iter()
        .all(|t| std::mem::discriminant(&t.adaptation) == std::mem::discriminant(first));
    if !same_kind {
        return Err(Error::contract("mixture: tasks use different adaptation mechanisms"));
    }
    match first {
        AdaptationParams::SoftMask(_) | AdaptationParams::Wsn { .. } => {
            let masks: Vec<_> = candidates
                .iter()
                .map(|t| t.adaptation.effective_masks().expect("mask mechanism has masks"))
                .collect();
            let n = masks[0].entries.len();
            if masks.iter().any(|m| m.entries.len() != n) {
                return Err(Error::contract("mixture: mask sets differ in structure"));
            }
            for j in 0..n {
                let (layer, target) = (masks[0].entries[j].layer, masks[0].entries[j].target);
                let parts: Vec<&Tensor> = masks
                    .iter()
                    .map(|m| {
                        let e = &m.entries[j];
                        if e.layer != layer || e.target != target {
                            return Err(Error::contract("mixture: mask sets differ in structure"));
                        }
                        Ok(&e.tensor)
                    })
                    .collect::<Result<_>>()?;
                congruent_shapes(&parts, "mask")?;
                let mix = mix_tensors(tape, &parts, alpha)?;
                let raw = *target_node(model, layer, target)?;
                *target_node(model, layer, target)? = tape.mul(raw, mix)?;
            }
        }
        AdaptationParams::Lora(first_lora) => {
            for j in 0..first_lora.entries.len() {
                let (layer, target) = (first_lora.entries[j].layer, first_lora.entries[j].target);
                let updates: Vec<Tensor> = candidates
                    .iter()
                    .map(|t| match &t.adaptation {
                        AdaptationParams::Lora(l) => {
                            let e = l
                                .entries
                                .get(j)
                                .filter(|e| e.layer == layer && e.target == target)
                                .ok_or_else(|| {
                                    Error::contract("mixture: low-rank sets differ in structure")
                                })?;
                            e.a.matmul(&e.b)
                        }
                        _ => unreachable!("kind checked above"),
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = updates.iter().collect();
                let mix = mix_tensors(tape, &refs, alpha)?;
                let raw = *target_node(model, layer, target)?;
                *target_node(model, layer, target)? = tape.add(raw, mix)?;
            }
        }
        AdaptationParams::Adapter(first_ad) => {
            for j in 0..first_ad.entries.len() {
                let layer = first_ad.entries[j].layer;
                let mut site_nodes = Vec::with_capacity(2);
                for site in 0..2 {
                    let mut mixed = Vec::with_capacity(4);
                    for field in 0..4 {
                        let parts: Vec<&Tensor> = candidates
                            .iter()
                            .map(|t| match &t.adaptation {
                                AdaptationParams::Adapter(a) => {
                                    let e = a.entries.get(j).filter(|e| e.layer == layer).ok_or_else(
                                        || Error::contract("mixture: adapter sets differ in structure"),
                                    )?;
                                    let stack = if site == 0 { &e.attn } else { &e.ff };
                                    Ok(match field {
                                        0 => &stack.down_w,
                                        1 => &stack.down_b,
                                        2 => &stack.up_w,
                                        _ => &stack.up_b,
                                    })
                                }
                                _ => unreachable!("kind checked above"),
                            })
                            .collect::<Result<_>>()?;
                        congruent_shapes(&parts, "adapter")?;
                        mixed.push(mix_tensors(tape, &parts, alpha)?);
                    }
                    site_nodes.push(crate::backbone::AdapterNodes {
                        down_w: mixed[0],
                        down_b: mixed[1],
                        up_w: mixed[2],
                        up_b: mixed[3],
                    });
                }
                let l = model
                    .layers
                    .get_mut(layer)
                    .ok_or_else(|| Error::contract("mixture: adapter layer out of range"))?;
                l.adapter_attn = Some(site_nodes[0]);
                l.adapter_ff = Some(site_nodes[1]);
            }
        }
        AdaptationParams::PromptOnly => {}
    }
    Ok(())
}

fn congruent_shapes(parts: &[&Tensor], what: &str) -> Result<()> {
    if parts.iter().any(|p| p.shape != parts[0].shape) {
        return Err(Error::contract(format!("mixture: {what} tensors differ in shape")));
    }
    Ok(())
}

/// Mean prediction entropy of the blended classifier at given coefficients.
/// Exposed for finite-difference verification of the gradient decision.
pub fn mixture_entropy(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    candidates: &[TaskState],
    batch: &[Vec<f64>],
    mixing: PromptMixing,
    shared: SharedState,
    alpha_values: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let (h, _) = mixture_entropy_node(
        &mut tape,
        backbone,
        plan,
        candidates,
        batch,
        mixing,
        shared,
        alpha_values,
    )?;
    Ok(tape.value(h).data[0])
}

/// Reverse-mode partial derivatives of the mean prediction entropy with
/// respect to each mixture coefficient.
pub fn mixture_entropy_partials(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    candidates: &[TaskState],
    batch: &[Vec<f64>],
    mixing: PromptMixing,
    shared: SharedState,
    alpha_values: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (h, alpha) = mixture_entropy_node(
        &mut tape,
        backbone,
        plan,
        candidates,
        batch,
        mixing,
        shared,
        alpha_values,
    )?;
    tape.backward(h)?;
    Ok(alpha.iter().map(|&a| tape.grad(a).map_or(0.0, |g| g[0])).collect())
}

// ── Prediction and evaluation ───────────────────────────────────────────────

/// Splits `feats` into chunks and predicts each in parallel under one bundle.
fn predict_parallel(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    bundle: &EvalBundle,
    feats: &[Vec<f64>],
    chunk: usize,
) -> Result<Vec<usize>> {
    let chunks: Vec<&[Vec<f64>]> = feats.chunks(chunk.max(1)).collect();
    let out = par::map_slice(&chunks, |c| predict_chunk(backbone, plan, bundle, c));
    let mut preds = Vec::with_capacity(feats.len());
    for r in out {
        preds.extend(r?);
    }
    Ok(preds)
}

/// Accuracy and identity decisions for one task's test split at one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageEval {
    pub accuracy: f64,
    /// Examples whose inferred identity matched the true task.
    pub id_hits: usize,
    pub id_total: usize,
}

/// Evaluates `data`'s test split with identity restricted to `candidates`
/// (the tasks seen so far). `data.task_id` must be among the candidates.
pub fn eval_task_at_stage(
    run: &ClRun,
    data: &TaskData,
    candidates: &[TaskState],
    mode: IdMode,
    gcfg: &GradientIdConfig,
    eval_batch: usize,
) -> Result<StageEval> {
    ensure_candidates(candidates)?;
    if data.task_id >= candidates.len() {
        return Err(Error::contract(format!(
            "task {} not among the {} candidates at this stage",
            data.task_id,
            candidates.len()
        )));
    }
    if data.test.is_empty() {
        return Err(Error::contract("eval: empty test split"));
    }
    let n = data.test.len();
    let feats: Vec<Vec<f64>> = (0..n).map(|i| data.test.feature(i).to_vec()).collect();
    let labels = data.test.labels();
    let backbone = &run.backbone;
    let plan = &run.plan;

    let (preds, id_hits) = match mode {
        IdMode::Oracle => {
            let bundle = EvalBundle::for_task(&candidates[data.task_id]);
            (predict_parallel(backbone, plan, &bundle, &feats, eval_batch)?, n)
        }
        IdMode::Prompt => {
            let ids =
                batched_results(n, |i| infer_task_prompt_id(backbone, candidates, &feats[i]))?;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); candidates.len()];
            for (i, &t) in ids.iter().enumerate() {
                groups[t].push(i);
            }
            let mut preds = vec![0usize; n];
            for (t, idxs) in groups.iter().enumerate() {
                if idxs.is_empty() {
                    continue;
                }
                let sub: Vec<Vec<f64>> = idxs.iter().map(|&i| feats[i].clone()).collect();
                let bundle = EvalBundle::for_task(&candidates[t]);
                let p = predict_parallel(backbone, plan, &bundle, &sub, eval_batch)?;
                for (&i, &pi) in idxs.iter().zip(&p) {
                    preds[i] = pi;
                }
            }
            let hits = ids.iter().filter(|&&t| t == data.task_id).count();
            (preds, hits)
        }
        IdMode::Gradient => {
            let chunks: Vec<&[Vec<f64>]> = feats.chunks(eval_batch.max(1)).collect();
            let outcomes = par::map_slice(&chunks, |c| -> Result<(usize, Vec<usize>)> {
                let s = match gcfg.shots {
                    Shots::Batch => c.len(),
                    Shots::K(k) => k.min(c.len()),
                };
                let local = GradientIdConfig { shots: Shots::K(s), ..*gcfg };
                let t_hat = infer_task_gradient_id(backbone, plan, candidates, c, &local)?;
                let p = predict_chunk(backbone, plan, &EvalBundle::for_task(&candidates[t_hat]), c)?;
                Ok((t_hat, p))
            });
            let mut preds = Vec::with_capacity(n);
            let mut hits = 0usize;
            for (chunk, r) in chunks.iter().zip(outcomes) {
                let (t_hat, p) = r?;
                if t_hat == data.task_id {
                    hits += chunk.len();
                }
                preds.extend(p);
            }
            (preds, hits)
        }
    };

    let correct = preds.iter().zip(labels).filter(|(p, y)| *p == *y).count();
    Ok(StageEval { accuracy: correct as f64 / n as f64, id_hits, id_total: n })
}

/// A full evaluation sweep: after each stage `l`, every task `t <= l` is
/// evaluated with identity restricted to the first `l + 1` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub matrix: EvalMatrix,
    /// Identity decisions at the final stage, summed over tasks.
    pub final_id_hits: usize,
    pub final_id_total: usize,
}

impl EvalOutcome {
    /// Fraction of final-stage examples whose task identity was inferred
    /// correctly.
    pub fn final_id_accuracy(&self) -> f64 {
        if self.final_id_total == 0 {
            return 0.0;
        }
        self.final_id_hits as f64 / self.final_id_total as f64
    }
}

/// Builds the stage to task accuracy matrix for a finished run.
pub fn build_eval_matrix(
    run: &ClRun,
    tasks_data: &[TaskData],
    mode: IdMode,
    gcfg: &GradientIdConfig,
    eval_batch: usize,
) -> Result<EvalOutcome> {
    let t_count = run.tasks.len();
    if t_count == 0 {
        return Err(Error::contract("eval: run has no trained tasks"));
    }
    if tasks_data.len() < t_count {
        return Err(Error::contract(format!(
            "eval: {} task datasets for {} trained tasks",
            tasks_data.len(),
            t_count
        )));
    }
    let mut rows = Vec::with_capacity(t_count);
    let mut final_hits = 0;
    let mut final_total = 0;
    for l in 0..t_count {
        let candidates = &run.tasks[..=l];
        let mut row = Vec::with_capacity(l + 1);
        for t in 0..=l {
            let cell = eval_task_at_stage(run, &tasks_data[t], candidates, mode, gcfg, eval_batch)?;
            row.push(cell.accuracy);
            if l == t_count - 1 {
                final_hits += cell.id_hits;
                final_total += cell.id_total;
            }
        }
        rows.push(row);
    }
    Ok(EvalOutcome {
        matrix: EvalMatrix::from_rows(rows)?,
        final_id_hits: final_hits,
        final_id_total: final_total,
    })
}

/// Predicts union-space labels for one batch, inferring identity per `mode`.
pub fn predict(
    run: &ClRun,
    batch: &[Vec<f64>],
    mode: IdMode,
    oracle_task: Option<usize>,
    gcfg: &GradientIdConfig,
) -> Result<Vec<usize>> {
    ensure_candidates(&run.tasks)?;
    if batch.is_empty() {
        return Err(Error::contract("predict: empty batch"));
    }
    match mode {
        IdMode::Oracle => {
            let t = oracle_task
                .ok_or_else(|| Error::contract("oracle prediction needs the true task id"))?;
            let state = run.task(t)?;
            predict_chunk(&run.backbone, &run.plan, &EvalBundle::for_task(state), batch)
        }
        IdMode::Prompt => {
            batched_results(batch.len(), |i| {
                let t = infer_task_prompt_id(&run.backbone, &run.tasks, &batch[i])?;
                let state = &run.tasks[t];
                let l = logits_chunk(
                    &run.backbone,
                    &run.plan,
                    &EvalBundle::for_task(state),
                    std::slice::from_ref(&batch[i]),
                )?;
                Ok(argmax(&l[0].data))
            })
        }
        IdMode::Gradient => {
            let t = infer_task_gradient_id(&run.backbone, &run.plan, &run.tasks, batch, gcfg)?;
            predict_chunk(&run.backbone, &run.plan, &EvalBundle::for_task(&run.tasks[t]), batch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_cl_run, tiny_split};

    fn batch_of(task: usize, n: usize) -> Vec<Vec<f64>> {
        let split = tiny_split();
        (0..n.min(split.tasks[task].test.len()))
            .map(|i| split.tasks[task].test.feature(i).to_vec())
            .collect()
    }

    #[test]
    fn prompt_id_recovers_the_true_task_most_of_the_time() {
        let run = tiny_cl_run();
        let split = tiny_split();
        let mut hits = 0;
        let mut total = 0;
        for (t, task) in split.tasks.iter().enumerate() {
            for i in 0..task.test.len() {
                let id = infer_task_prompt_id(&run.backbone, &run.tasks, task.test.feature(i)).unwrap();
                hits += usize::from(id == t);
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.9, "key matching should identify tasks, got {acc}");
    }

    #[test]
    fn single_candidate_always_wins_both_modes() {
        let run = tiny_cl_run();
        let batch = batch_of(0, 4);
        let one = &run.tasks[..1];
        assert_eq!(
            infer_task_prompt_id(&run.backbone, one, &batch[0]).unwrap(),
            0
        );
        let id = infer_task_gradient_id(
            &run.backbone,
            &run.plan,
            one,
            &batch,
            &GradientIdConfig::default(),
        )
        .unwrap();
        assert_eq!(id, 0);
    }

    #[test]
    fn gradient_id_finds_each_task_on_its_own_batches() {
        let run = tiny_cl_run();
        for t in 0..2 {
            let batch = batch_of(t, 10);
            let id = infer_task_gradient_id(
                &run.backbone,
                &run.plan,
                &run.tasks,
                &batch,
                &GradientIdConfig::default(),
            )
            .unwrap();
            assert_eq!(id, t, "entropy gradient should pick task {t}");
        }
    }

    #[test]
    fn gradient_id_depends_only_on_the_first_k_examples() {
        let run = tiny_cl_run();
        let mut batch = batch_of(0, 8);
        let cfg = GradientIdConfig { shots: Shots::K(4), ..Default::default() };
        let id_a =
            infer_task_gradient_id(&run.backbone, &run.plan, &run.tasks, &batch, &cfg).unwrap();
        // Mutate examples past the shot horizon; the decision must not move.
        for f in batch.iter_mut().skip(4) {
            for v in f.iter_mut() {
                *v = -*v + 3.0;
            }
        }
        let id_b =
            infer_task_gradient_id(&run.backbone, &run.plan, &run.tasks, &batch, &cfg).unwrap();
        assert_eq!(id_a, id_b);
    }

    #[test]
    fn gradient_id_rejects_oversized_shots_and_empty_batches() {
        let run = tiny_cl_run();
        let batch = batch_of(0, 3);
        let cfg = GradientIdConfig { shots: Shots::K(10), ..Default::default() };
        assert!(infer_task_gradient_id(&run.backbone, &run.plan, &run.tasks, &batch, &cfg).is_err());
        assert!(infer_task_gradient_id(
            &run.backbone,
            &run.plan,
            &run.tasks,
            &[],
            &GradientIdConfig::default()
        )
        .is_err());
    }

    #[test]
    fn identical_candidate_bundles_tie_to_the_lowest_index() {
        let run = tiny_cl_run();
        // Two copies of the same task state: every coefficient plays the same
        // role, so the partials coincide and the tie rule picks index 0.
        let twin = vec![run.tasks[0].clone(), run.tasks[0].clone()];
        let batch = batch_of(1, 6);
        let id = infer_task_gradient_id(
            &run.backbone,
            &run.plan,
            &twin,
            &batch,
            &GradientIdConfig::default(),
        )
        .unwrap();
        assert_eq!(id, 0);
        let uniform = [0.5, 0.5];
        let p = mixture_entropy_partials(
            &run.backbone,
            &run.plan,
            &twin,
            &batch,
            PromptMixing::MixTaskPrompts,
            SharedState::Newest,
            &uniform,
        )
        .unwrap();
        assert_eq!(p[0], p[1], "symmetric mixture must have exactly equal partials");
    }

    #[test]
    fn entropy_partials_match_renormalized_finite_differences() {
        let run = tiny_cl_run();
        let batch = batch_of(0, 5);
        let t_count = run.tasks.len();
        let uniform = vec![1.0 / t_count as f64; t_count];
        let partials = mixture_entropy_partials(
            &run.backbone,
            &run.plan,
            &run.tasks,
            &batch,
            PromptMixing::MixTaskPrompts,
            SharedState::Newest,
            &uniform,
        )
        .unwrap();
        // Renormalized perturbation: the finite difference of H(α/Σα) equals
        // the projected gradient gᵗ − mean-weighted sum at uniform α.
        let weighted: f64 = uniform.iter().zip(&partials).map(|(a, g)| a * g).sum();
        let h = 1e-5;
        for t in 0..t_count {
            let fd = {
                let mut up = uniform.clone();
                up[t] += h;
                let su: f64 = up.iter().sum();
                let up_n: Vec<f64> = up.iter().map(|v| v / su).collect();
                let mut dn = uniform.clone();
                dn[t] -= h;
                let sd: f64 = dn.iter().sum();
                let dn_n: Vec<f64> = dn.iter().map(|v| v / sd).collect();
                let hp = mixture_entropy(
                    &run.backbone,
                    &run.plan,
                    &run.tasks,
                    &batch,
                    PromptMixing::MixTaskPrompts,
                    SharedState::Newest,
                    &up_n,
                )
                .unwrap();
                let hm = mixture_entropy(
                    &run.backbone,
                    &run.plan,
                    &run.tasks,
                    &batch,
                    PromptMixing::MixTaskPrompts,
                    SharedState::Newest,
                    &dn_n,
                )
                .unwrap();
                (hp - hm) / (2.0 * h)
            };
            let projected = partials[t] - weighted;
            let denom = fd.abs().max(projected.abs()).max(1e-10);
            let rel = (fd - projected).abs() / denom;
            assert!(
                rel < 1e-3,
                "coefficient {t}: finite difference {fd} vs projected partial {projected} (rel {rel})"
            );
        }
    }

    #[test]
    fn gradient_id_mutates_no_task_state() {
        let run = tiny_cl_run();
        let before: Vec<_> = run.tasks.iter().map(|t| t.prompt.clone()).collect();
        let hash_before = run.backbone.theta_hash();
        let batch = batch_of(1, 6);
        infer_task_gradient_id(
            &run.backbone,
            &run.plan,
            &run.tasks,
            &batch,
            &GradientIdConfig::default(),
        )
        .unwrap();
        assert_eq!(run.backbone.theta_hash(), hash_before);
        for (a, b) in before.iter().zip(run.tasks.iter().map(|t| &t.prompt)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oracle_eval_matrix_rows_are_constant_per_task() {
        let run = tiny_cl_run();
        let split = tiny_split();
        let out = build_eval_matrix(
            run,
            &split.tasks,
            IdMode::Oracle,
            &GradientIdConfig::default(),
            DEFAULT_EVAL_BATCH,
        )
        .unwrap();
        let m = &out.matrix;
        for t in 0..m.num_tasks() {
            for l in t..m.num_tasks() {
                assert_eq!(
                    m.at(l, t),
                    m.at(t, t),
                    "oracle accuracy for task {t} must not change after stage {l}"
                );
            }
        }
        assert_eq!(out.final_id_accuracy(), 1.0);
    }

    #[test]
    fn inferred_modes_produce_sane_matrices_and_id_rates() {
        let run = tiny_cl_run();
        let split = tiny_split();
        for mode in [IdMode::Prompt, IdMode::Gradient] {
            let out = build_eval_matrix(
                run,
                &split.tasks,
                mode,
                &GradientIdConfig::default(),
                DEFAULT_EVAL_BATCH,
            )
            .unwrap();
            assert_eq!(out.matrix.num_tasks(), 2);
            assert!(
                out.final_id_accuracy() >= 0.9,
                "{mode:?} id accuracy {}",
                out.final_id_accuracy()
            );
        }
    }

    #[test]
    fn shots_serialize_as_count_or_word() {
        let k: Shots = serde_json::from_str("5").unwrap();
        assert_eq!(k, Shots::K(5));
        let b: Shots = serde_json::from_str("\"batch\"").unwrap();
        assert_eq!(b, Shots::Batch);
        assert!(serde_json::from_str::<Shots>("0").is_err());
        assert!(serde_json::from_str::<Shots>("\"sometimes\"").is_err());
        assert_eq!(serde_json::to_string(&Shots::K(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Shots::Batch).unwrap(), "\"batch\"");
    }

    #[test]
    fn predict_requires_oracle_task_for_oracle_mode() {
        let run = tiny_cl_run();
        let batch = batch_of(0, 3);
        assert!(predict(run, &batch, IdMode::Oracle, None, &GradientIdConfig::default()).is_err());
        let preds =
            predict(run, &batch, IdMode::Oracle, Some(0), &GradientIdConfig::default()).unwrap();
        assert_eq!(preds.len(), 3);
    }
}

