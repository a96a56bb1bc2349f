//! Sequential task training over the frozen backbone.
//!
//! One [`ClRun`] owns the frozen backbone, the shared (live) global prompt and
//! classifier head, and a growing list of frozen [`TaskState`]s. Training task
//! `t` jointly optimizes that task's adaptation tensors, its prompt rows and
//! key, the shared prompt, and the head, against a loss of cross-entropy plus
//! a weighted key-matching term; everything belonging to earlier tasks stays
//! bitwise untouched. When a task finishes, the live shared state is
//! snapshotted into its [`TaskState`], so evaluating that task later (with its
//! identity known) replays exactly the classifier that existed then — which is
//! what makes measured forgetting exactly zero under oracle identities.

use crate::adaptation::{AdaptationParams, Mechanism, TargetMatrix};
use crate::backbone::{
    forward_logits, tokenize, BackboneConfig, ClassifierHead, ModelNodes, PretrainedBackbone,
};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, ParamSet};
use crate::prompts::{append_prompt_params, attach_prompts, AttachmentPlan, GlobalPrompt, TaskPrompt};
use crate::seeds;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Hyperparameters for one continual-learning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the key-matching term in the loss (its balancing factor).
    pub match_weight: f64,
    pub mechanism: Mechanism,
    /// Weight matrices the mechanism adapts in each adapted layer.
    pub targets: Vec<TargetMatrix>,
    /// 1-indexed inclusive range of layers the mechanism adapts; defaults to
    /// the task-prompt layers.
    pub adapt_layers: (usize, usize),
    /// Restrict the training loss to the task's own classes. Off by default:
    /// prediction always runs over the full union label space, and a loss
    /// windowed to two classes leaves in-window logits uncalibrated against
    /// the columns earlier tasks trained, which sinks union-space accuracy at
    /// this scale.
    pub logit_masking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            match_weight: 0.1,
            mechanism: Mechanism::SoftMask { init: crate::adaptation::MaskInit::UniformOnes },
            targets: TargetMatrix::ATTENTION.to_vec(),
            adapt_layers: (3, 4),
            logit_masking: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("train config: epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("train config: lr must be positive"));
        }
        if !(self.match_weight >= 0.0) {
            return Err(Error::contract("train config: match_weight must be non-negative"));
        }
        self.mechanism.validate()?;
        let (lo, hi) = self.adapt_layers;
        if lo == 0 || hi < lo || hi > cfg.n_layers {
            return Err(Error::contract(format!(
                "train config: adapt_layers ({lo}, {hi}) must be 1-indexed, non-empty, and within {} layers",
                cfg.n_layers
            )));
        }
        Ok(())
    }

    /// Zero-based layer indices the mechanism adapts.
    pub fn adapt_layer_indices(&self) -> Vec<usize> {
        (self.adapt_layers.0..=self.adapt_layers.1).map(|l| l - 1).collect()
    }
}

/// Everything task `t` owns once its training is done.
#[derive(Debug, Clone)]
pub struct TaskState {
    pub task_id: usize,
    pub adaptation: AdaptationParams,
    pub prompt: TaskPrompt,
    /// Union-space class range `[class_lo, class_hi)` of this task.
    pub class_lo: usize,
    pub class_hi: usize,
    /// The shared prompt as it stood when this task finished.
    pub g_snapshot: GlobalPrompt,
    /// The head as it stood when this task finished.
    pub head_snapshot: ClassifierHead,
    pub frozen: bool,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task_id: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// One full continual-learning run.
#[derive(Debug, Clone)]
pub struct ClRun {
    pub backbone: PretrainedBackbone,
    pub plan: AttachmentPlan,
    pub config: TrainConfig,
    pub n_union_classes: usize,
    pub seed: u64,
    /// Shared prompt, trained across every task.
    pub g: GlobalPrompt,
    /// Shared head over the union label space, trained across every task.
    pub head: ClassifierHead,
    pub tasks: Vec<TaskState>,
    pub records: Vec<EpochRecord>,
}

impl ClRun {
    pub fn new(
        backbone: PretrainedBackbone,
        plan: AttachmentPlan,
        config: TrainConfig,
        n_union_classes: usize,
        seed: u64,
    ) -> Result<ClRun> {
        plan.validate(backbone.config())?;
        config.validate(backbone.config())?;
        if n_union_classes == 0 {
            return Err(Error::contract("a run needs at least one class"));
        }
        let g = GlobalPrompt::init(&mut seeds::stream_rng(seed, seeds::G_PROMPT_INIT), &plan, backbone.config());
        let head = ClassifierHead::init(
            &mut seeds::stream_rng(seed, seeds::HEAD_INIT),
            backbone.config().d_model,
            n_union_classes,
        );
        Ok(ClRun {
            backbone,
            plan,
            config,
            n_union_classes,
            seed,
            g,
            head,
            tasks: Vec::new(),
            records: Vec::new(),
        })
    }

    /// Trains the next task and freezes its state. Returns the end-of-task
    /// accuracy on the task's own training data (own adaptation and prompt,
    /// full union logits).
    pub fn train_task(&mut self, data: &TaskData) -> Result<f64> {
        self.train_task_observed(data, |_| ())
    }

    /// [`ClRun::train_task`] with a callback invoked after every optimizer
    /// step, receiving the adaptation state as of that step.
    pub fn train_task_observed(
        &mut self,
        data: &TaskData,
        mut after_step: impl FnMut(&AdaptationParams),
    ) -> Result<f64> {
        let t = self.tasks.len();
        if data.task_id != t {
            return Err(Error::contract(format!(
                "train_task: expected task {t} next, got task {}",
                data.task_id
            )));
        }
        if data.train.is_empty() {
            return Err(Error::contract("train_task: empty training split"));
        }
        if data.class_hi > self.n_union_classes || data.class_lo >= data.class_hi {
            return Err(Error::contract(format!(
                "train_task: class range [{}, {}) outside union space of {} classes",
                data.class_lo, data.class_hi, self.n_union_classes
            )));
        }
        for i in 0..data.train.len() {
            let y = data.train.label(i);
            if y >= self.n_union_classes {
                return Err(Error::contract(format!(
                    "train_task: label {y} outside the union space of {} classes",
                    self.n_union_classes
                )));
            }
            if self.config.logit_masking && !(data.class_lo..data.class_hi).contains(&y) {
                return Err(Error::contract(format!(
                    "train_task: label {y} outside task range [{}, {})",
                    data.class_lo, data.class_hi
                )));
            }
        }
        let cfg = self.backbone.config().clone();

        // Fresh per-task parameters.
        let mut init_rng = seeds::stream_rng(self.seed, seeds::task_init(t));
        let mut adaptation = AdaptationParams::init(
            &mut init_rng,
            &cfg,
            &self.config.mechanism,
            &self.config.adapt_layer_indices(),
            &self.config.targets,
        )?;
        let mut e_prompt = TaskPrompt::init(&mut init_rng, &self.plan, &cfg);

        // Query features come from the frozen backbone with no prompts and no
        // adaptation; they are constant across training, so compute them once.
        let q_feats = batched_results(data.train.len(), |i| {
            self.backbone.class_token_feature(data.train.feature(i))
        })?;

        // Canonical slot order: adaptation, shared prompt, task prompt rows,
        // task key, head weight, head bias.
        let n_adapt = adaptation.slot_count();
        let mut params = ParamSet::new();
        adaptation.append_params(&mut params);
        append_prompt_params(&mut params, Some(&self.g), Some(&e_prompt));
        params.push("head.w", self.head.w.clone());
        params.push("head.b", self.head.b.clone());

        let mut adam = AdamState::for_params(AdamConfig::with_lr(self.config.lr), &params);
        let mut shuffle_rng = seeds::stream_rng(self.seed, seeds::task_shuffle(t));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let (ce_lo, ce_hi) = if self.config.logit_masking {
            (data.class_lo, data.class_hi)
        } else {
            (0, self.n_union_classes)
        };

        for epoch in 0..self.config.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let mut tape = Tape::new();
                let ids = params.register(&mut tape);
                let key_node = ids[n_adapt + 2];
                let model = wire_model(
                    &mut tape,
                    &self.backbone,
                    &self.plan,
                    &adaptation,
                    &ids[0..n_adapt],
                    Some(ids[n_adapt]),
                    Some(ids[n_adapt + 1]),
                    Some((ids[n_adapt + 3], ids[n_adapt + 4])),
                )?;
                let mut example_losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let x = tokenize(data.train.feature(i), &cfg)?;
                    let logits = forward_logits(&mut tape, &model, &cfg, &x, &mut None)?;
                    let q = tape.constant(q_feats[i].clone());
                    let loss = total_loss(
                        &mut tape,
                        logits,
                        data.train.label(i),
                        (ce_lo, ce_hi),
                        q,
                        key_node,
                        self.config.match_weight,
                    )?;
                    example_losses.push(loss);
                }
                let batch_loss = tape.mean_scalars(&example_losses)?;
                let loss_value = tape.value(batch_loss).data[0];
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!(
                            "task {t} epoch {epoch} batch loss (lr {} may be too high)",
                            self.config.lr
                        ),
                    });
                }
                loss_sum += loss_value;
                batches += 1;
                tape.backward(batch_loss)?;
                let mut grads: Vec<Option<Tensor>> =
                    ids.iter().map(|&id| tape.grad(id).map(|_| tape.grad_tensor(id))).collect();
                restrict_head_grads(
                    &mut grads[n_adapt + 3..n_adapt + 5],
                    data.class_lo,
                    data.class_hi,
                    self.n_union_classes,
                );
                adam.step(&mut params, &grads)?;
                adaptation.read_back(&params, 0);
                after_step(&adaptation);
            }
            self.records.push(EpochRecord { task_id: t, epoch, mean_loss: loss_sum / batches as f64 });
        }

        // Fold trained values back into live and per-task state.
        adaptation.read_back(&params, 0);
        e_prompt.rows = params.tensor(n_adapt + 1).clone();
        e_prompt.key = params.tensor(n_adapt + 2).clone();
        self.g.rows = params.tensor(n_adapt).clone();
        self.head.w = params.tensor(n_adapt + 3).clone();
        self.head.b = params.tensor(n_adapt + 4).clone();

        let state = TaskState {
            task_id: t,
            adaptation,
            prompt: e_prompt,
            class_lo: data.class_lo,
            class_hi: data.class_hi,
            g_snapshot: self.g.clone(),
            head_snapshot: self.head.clone(),
            frozen: true,
        };
        let train_acc = {
            let bundle = EvalBundle::for_task(&state);
            let preds = predict_chunk(
                &self.backbone,
                &self.plan,
                &bundle,
                &(0..data.train.len())
                    .map(|i| data.train.feature(i).to_vec())
                    .collect::<Vec<_>>(),
            )?;
            let correct =
                preds.iter().zip(data.train.labels()).filter(|(p, y)| *p == *y).count();
            correct as f64 / data.train.len() as f64
        };
        self.tasks.push(state);
        Ok(train_acc)
    }

    pub fn task(&self, t: usize) -> Result<&TaskState> {
        self.tasks
            .get(t)
            .ok_or_else(|| Error::contract(format!("task {t} not trained yet ({} done)", self.tasks.len())))
    }
}

/// Zeroes head gradients for classes outside `[lo, hi)`. Each task updates
/// only its own classes' output columns: the full softmax still calibrates
/// them against every earlier task's columns, but those stay exactly as their
/// own training left them, so evaluating an earlier bundle under the current
/// head sees unperturbed class scores.
fn restrict_head_grads(head_grads: &mut [Option<Tensor>], lo: usize, hi: usize, n_classes: usize) {
    if let Some(gw) = head_grads[0].as_mut() {
        let d = gw.shape[0];
        for i in 0..d {
            for c in 0..n_classes {
                if c < lo || c >= hi {
                    gw.data[i * n_classes + c] = 0.0;
                }
            }
        }
    }
    if let Some(gb) = head_grads[1].as_mut() {
        for c in 0..n_classes {
            if c < lo || c >= hi {
                gb.data[c] = 0.0;
            }
        }
    }
}

/// Runs fallible per-index work through the maybe-parallel mapper.
pub(crate) fn batched_results<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    crate::par::map_range(n, f).into_iter().collect()
}

/// Cross-entropy over a `[ce_lo, ce_hi)` class window plus the weighted
/// key-matching distance: the full per-example training objective.
pub fn total_loss(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
    (ce_lo, ce_hi): (usize, usize),
    q_feature: NodeId,
    key: NodeId,
    match_weight: f64,
) -> Result<NodeId> {
    let ce = tape.cross_entropy_row(logits, label, ce_lo, ce_hi)?;
    if match_weight == 0.0 {
        return Ok(ce);
    }
    let gamma = tape.cosine_distance(q_feature, key)?;
    let weighted = tape.scale_const(gamma, match_weight);
    tape.add(ce, weighted)
}

/// Registers the backbone plus one adaptation/prompt/head configuration on a
/// tape. `adapt_ids` must follow the adaptation's canonical slot order;
/// `head` defaults to wiring no head (features only).
#[allow(clippy::too_many_arguments)]
pub fn wire_model(
    tape: &mut Tape,
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    adaptation: &AdaptationParams,
    adapt_ids: &[NodeId],
    g_prompt: Option<NodeId>,
    e_prompt: Option<NodeId>,
    head: Option<(NodeId, NodeId)>,
) -> Result<ModelNodes> {
    let raw = backbone.register(tape);
    let mut model = raw.into_model(head);
    adaptation.apply_to_model(tape, &mut model, adapt_ids)?;
    attach_prompts(tape, &mut model, plan, g_prompt, e_prompt)?;
    Ok(model)
}

/// A frozen classifier configuration for evaluation: one task's adaptation
/// and prompt with the shared state as of some stage.
#[derive(Debug, Clone, Copy)]
pub struct EvalBundle<'a> {
    pub adaptation: &'a AdaptationParams,
    pub e_prompt: Option<&'a TaskPrompt>,
    pub g: &'a GlobalPrompt,
    pub head: &'a ClassifierHead,
}

impl<'a> EvalBundle<'a> {
    /// The bundle that replays task `t` exactly as it stood when its training
    /// finished.
    pub fn for_task(state: &'a TaskState) -> EvalBundle<'a> {
        EvalBundle {
            adaptation: &state.adaptation,
            e_prompt: Some(&state.prompt),
            g: &state.g_snapshot,
            head: &state.head_snapshot,
        }
    }
}

/// Wires a bundle onto a tape as constants and returns the model.
pub fn wire_bundle(
    tape: &mut Tape,
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    bundle: &EvalBundle,
) -> Result<ModelNodes> {
    let adapt_ids = bundle.adaptation.register_const(tape);
    let g_node = tape.constant(bundle.g.rows.clone());
    let e_node = bundle.e_prompt.map(|e| tape.constant(e.rows.clone()));
    let head_w = tape.constant(bundle.head.w.clone());
    let head_b = tape.constant(bundle.head.b.clone());
    wire_model(tape, backbone, plan, bundle.adaptation, &adapt_ids, Some(g_node), e_node, Some((head_w, head_b)))
}

/// Logits for a chunk of feature rows under one bundle, sharing one tape.
pub fn logits_chunk(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    bundle: &EvalBundle,
    features: &[Vec<f64>],
) -> Result<Vec<Tensor>> {
    let cfg = backbone.config();
    let mut tape = Tape::new();
    let model = wire_bundle(&mut tape, backbone, plan, bundle)?;
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let x = tokenize(f, cfg)?;
        let logits = forward_logits(&mut tape, &model, cfg, &x, &mut None)?;
        out.push(tape.value(logits).clone());
    }
    Ok(out)
}

/// Predicted union-space labels for a chunk of feature rows (argmax over the
/// full logits).
pub fn predict_chunk(
    backbone: &PretrainedBackbone,
    plan: &AttachmentPlan,
    bundle: &EvalBundle,
    features: &[Vec<f64>],
) -> Result<Vec<usize>> {
    Ok(logits_chunk(backbone, plan, bundle, features)?
        .iter()
        .map(|l| crate::backbone::argmax(&l.data))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_backbone, tiny_plan, tiny_split, tiny_train_config};

    fn tiny_run() -> ClRun {
        ClRun::new(
            tiny_backbone().clone(),
            tiny_plan(),
            tiny_train_config(),
            crate::testutil::tiny_spec().union_classes(),
            991,
        )
        .unwrap()
    }

    #[test]
    fn total_loss_reduces_to_cross_entropy_at_zero_weight() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap());
        let q = tape.constant(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let loss = total_loss(&mut tape, logits, 1, (0, 4), q, k, 0.0).unwrap();
        assert!((tape.value(loss).data[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_adds_weighted_matching_distance() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap());
        let q = tape.constant(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::from_vec(&[2], vec![-2.0, 0.0]).unwrap());
        // Anti-parallel key: distance 2, weighted by 0.5 → +1.
        let loss = total_loss(&mut tape, logits, 0, (0, 4), q, k, 0.5).unwrap();
        assert!((tape.value(loss).data[0] - (4.0f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn masked_window_cross_entropy_matches_reduced_class_count() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(&[1, 4], vec![7.0, 7.0, 3.0, 3.0]).unwrap());
        let q = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let k = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        // Windowed to classes [0,2) with equal in-window logits → ln 2.
        let loss = total_loss(&mut tape, logits, 0, (0, 2), q, k, 0.0).unwrap();
        assert!((tape.value(loss).data[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn train_config_validation_rejects_bad_ranges() {
        let cfg = crate::testutil::tiny_config();
        let mut tc = tiny_train_config();
        tc.adapt_layers = (0, 1);
        assert!(tc.validate(&cfg).is_err());
        tc.adapt_layers = (1, 99);
        assert!(tc.validate(&cfg).is_err());
        tc.adapt_layers = (2, 2);
        tc.match_weight = -0.5;
        assert!(tc.validate(&cfg).is_err());
    }

    #[test]
    fn tasks_must_arrive_in_order() {
        let split = tiny_split();
        let mut run = tiny_run();
        assert!(run.train_task(&split.tasks[1]).is_err());
    }

    #[test]
    fn training_a_task_learns_it_and_freezes_earlier_state() {
        let split = tiny_split();
        let mut run = tiny_run();
        let acc0 = run.train_task(&split.tasks[0]).unwrap();
        assert!(acc0 > 0.9, "first task should be learnable, got {acc0}");

        let state0 = run.tasks[0].clone();
        let acc1 = run.train_task(&split.tasks[1]).unwrap();
        assert!(acc1 > 0.9, "second task should be learnable, got {acc1}");

        // Task 0's state is bitwise untouched by task 1's training.
        let again = &run.tasks[0];
        assert_eq!(state0.prompt, again.prompt);
        assert_eq!(state0.adaptation, again.adaptation);
        assert_eq!(state0.g_snapshot, again.g_snapshot);
        assert_eq!(state0.head_snapshot.w, again.head_snapshot.w);
        assert!(again.frozen);

        // The shared prompt kept training: the live copy moved on.
        assert_ne!(run.g, state0.g_snapshot);
    }

    #[test]
    fn oracle_replay_is_bitwise_stable_across_later_training() {
        let split = tiny_split();
        let mut run = tiny_run();
        run.train_task(&split.tasks[0]).unwrap();
        let feats: Vec<Vec<f64>> =
            (0..split.tasks[0].test.len()).map(|i| split.tasks[0].test.feature(i).to_vec()).collect();
        let before = {
            let b = EvalBundle::for_task(&run.tasks[0]);
            logits_chunk(&run.backbone, &run.plan, &b, &feats).unwrap()
        };
        run.train_task(&split.tasks[1]).unwrap();
        let after = {
            let b = EvalBundle::for_task(&run.tasks[0]);
            logits_chunk(&run.backbone, &run.plan, &b, &feats).unwrap()
        };
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x, y, "frozen-task logits must not move at all");
        }
    }

    #[test]
    fn backbone_hash_is_constant_across_a_run() {
        let split = tiny_split();
        let mut run = tiny_run();
        let h0 = run.backbone.theta_hash();
        run.train_task(&split.tasks[0]).unwrap();
        run.train_task(&split.tasks[1]).unwrap();
        assert_eq!(run.backbone.theta_hash(), h0);
    }

    #[test]
    fn epoch_loss_decreases_from_first_to_last() {
        let split = tiny_split();
        let mut run = tiny_run();
        run.train_task(&split.tasks[0]).unwrap();
        let losses: Vec<f64> =
            run.records.iter().filter(|r| r.task_id == 0).map(|r| r.mean_loss).collect();
        assert!(
            losses.last().unwrap() <= losses.first().unwrap(),
            "loss should not increase over training: {losses:?}"
        );
    }

    #[test]
    fn windowed_loss_mode_learns_within_its_own_class_window() {
        let split = tiny_split();
        let mut cfg = tiny_train_config();
        cfg.logit_masking = true;
        let mut run = ClRun::new(
            tiny_backbone().clone(),
            tiny_plan(),
            cfg,
            crate::testutil::tiny_spec().union_classes(),
            991,
        )
        .unwrap();
        run.train_task(&split.tasks[0]).unwrap();
        let state = &run.tasks[0];
        let feats: Vec<Vec<f64>> =
            (0..split.tasks[0].test.len()).map(|i| split.tasks[0].test.feature(i).to_vec()).collect();
        let logits =
            logits_chunk(&run.backbone, &run.plan, &EvalBundle::for_task(state), &feats).unwrap();
        let correct = logits
            .iter()
            .zip(split.tasks[0].test.labels())
            .filter(|(l, &y)| {
                let window = &l.data[state.class_lo..state.class_hi];
                state.class_lo + crate::backbone::argmax(window) == y
            })
            .count();
        let acc = correct as f64 / feats.len() as f64;
        assert!(acc > 0.9, "windowed training should discriminate within the window, got {acc}");
    }

    #[test]
    fn windowed_loss_mode_rejects_out_of_window_labels() {
        let split = tiny_split();
        let mut cfg = tiny_train_config();
        cfg.logit_masking = true;
        let mut run = ClRun::new(
            tiny_backbone().clone(),
            tiny_plan(),
            cfg,
            crate::testutil::tiny_spec().union_classes(),
            991,
        )
        .unwrap();
        // Feed task-1 data as if it were task 0: labels fall outside the range.
        let mut wrong = split.tasks[1].clone();
        wrong.task_id = 0;
        wrong.class_lo = split.tasks[0].class_lo;
        wrong.class_hi = split.tasks[0].class_hi;
        assert!(run.train_task(&wrong).is_err());
    }

    #[test]
    fn prompt_only_mechanism_trains_no_adaptation_tensors() {
        let split = tiny_split();
        let mut cfg = tiny_train_config();
        cfg.mechanism = Mechanism::PromptOnly;
        // No weight-space degrees of freedom: prompts need a longer schedule.
        cfg.epochs = 40;
        cfg.lr = 1e-2;
        let mut run = ClRun::new(
            tiny_backbone().clone(),
            tiny_plan(),
            cfg,
            crate::testutil::tiny_spec().union_classes(),
            991,
        )
        .unwrap();
        let acc = run.train_task(&split.tasks[0]).unwrap();
        assert!(acc > 0.8, "prompts and head alone should manage the first task, got {acc}");
        assert_eq!(run.tasks[0].adaptation, AdaptationParams::PromptOnly);
    }
}

