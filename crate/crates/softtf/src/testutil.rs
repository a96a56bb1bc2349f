//! Shared fixtures for unit tests: one lazily pretrained tiny backbone and its
//! data split, reused across modules to keep the suite fast.

use crate::adaptation::{MaskInit, Mechanism, TargetMatrix};
use crate::backbone::{pretrain, BackboneConfig, PretrainConfig, PretrainedBackbone};
use crate::cl_engine::{ClRun, TrainConfig};
use crate::data::{gen_split_tasks, SplitTasks, TaskSequenceSpec};
use crate::prompts::AttachmentPlan;
use std::sync::OnceLock;

pub(crate) fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        input_dim: 8,
        feature_tokens: 2,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        ln_eps: 1e-5,
    }
}

pub(crate) fn tiny_spec() -> TaskSequenceSpec {
    TaskSequenceSpec {
        seed: 5,
        num_tasks: 2,
        classes_per_task: 2,
        train_per_class: 40,
        test_per_class: 10,
        feature_dim: 16,
        sigma_between: 5.0,
        sigma_within: 0.5,
        base_classes: 8,
    }
}

pub(crate) fn tiny_split() -> &'static SplitTasks {
    static SPLIT: OnceLock<SplitTasks> = OnceLock::new();
    SPLIT.get_or_init(|| gen_split_tasks(&tiny_spec()).unwrap())
}

pub(crate) fn tiny_backbone() -> &'static PretrainedBackbone {
    static BACKBONE: OnceLock<PretrainedBackbone> = OnceLock::new();
    BACKBONE.get_or_init(|| {
        let split = tiny_split();
        let pc = PretrainConfig { epochs: 20, batch_size: 16, lr: 3e-3, target_accuracy: 0.95 };
        let n_base = tiny_spec().base_classes;
        pretrain(&tiny_config(), &pc, &split.base_train, &split.base_test, n_base, 5).unwrap().0
    })
}

pub(crate) fn tiny_plan() -> AttachmentPlan {
    AttachmentPlan { g_layers: (1, 1), e_layers: (2, 2), g_len: 4, e_len: 4 }
}

pub(crate) fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 8,
        lr: 3e-3,
        match_weight: 0.1,
        mechanism: Mechanism::SoftMask { init: MaskInit::UniformOnes },
        targets: TargetMatrix::ATTENTION.to_vec(),
        adapt_layers: (2, 2),
        logit_masking: false,
    }
}

/// A fully trained two-task run on the tiny fixtures, shared across suites.
pub(crate) fn tiny_cl_run() -> &'static ClRun {
    static RUN: OnceLock<ClRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let split = tiny_split();
        let mut run = ClRun::new(
            tiny_backbone().clone(),
            tiny_plan(),
            tiny_train_config(),
            tiny_spec().union_classes(),
            991,
        )
        .unwrap();
        for task in &split.tasks {
            run.train_task(task).unwrap();
        }
        run
    })
}
