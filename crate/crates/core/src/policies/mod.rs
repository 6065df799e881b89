//! Policy layer: the learning procedures built on consolidation edits,
//! network growth, and rehearsal.

mod ablation;
mod engine;
mod random_net;
mod similarity;
pub mod train;

pub use ablation::SharedColumnAblation;
pub use engine::{Engine, TaskData};
pub use random_net::{ActSample, RandomFeatureEngine};
pub use similarity::{estimate_similarity, ProbeBudget, SimilarityVector};
pub use train::{joint_epoch, train_linear_head, train_task, SparsityOpts, TrainLog, TrainOpts};

use std::collections::BTreeMap;

use crate::net::TaskId;

/// How previous tasks are frozen while something else trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Mask: excluded from updates entirely; bit-exact non-forgetting.
    Hard,
    /// Large finite consolidation with snapshot targets.
    Soft,
}

/// Transfer-link policy for new tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferPolicy {
    /// Initialize links from each earlier task by its similarity
    /// (copy / partial / open / blocked).
    Normal,
    /// Mask every transfer link at zero: no forward transfer at all.
    BlockAll,
}

/// Graceful-forgetting method.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum ForgetMode {
    /// Retrain under node-group sparsity, then prune to the smallest keep
    /// fraction whose held-out accuracy stays at or above the floor.
    Prune,
    /// Just lower the consolidation strength of the task's weights.
    LowerB { b: f64 },
    /// Shrink the task's rehearsal buffer.
    ShrinkBuffer { capacity: usize },
}

/// Every knob the policies read. Collected in one place so experiment
/// configs and presets can override them uniformly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub seed: u64,

    // Optimization.
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub early_stop_acc: Option<f64>,

    // Consolidation strengths and similarity thresholds.
    pub b_large: f64,
    pub b_small: f64,
    pub sim_copy: f64,
    pub sim_partial: f64,
    pub sim_block: f64,
    pub freeze: FreezeMode,
    pub transfer: TransferPolicy,

    // Expansion sizing.
    pub base_width: usize,
    pub base_depth: usize,
    pub max_width: usize,
    pub stage_width: usize,
    pub max_stages: usize,
    pub residual_stop_frac: f64,
    /// Per-task width multiplier applied as tasks accumulate (<1 shrinks).
    pub width_decay: f64,

    // Pruning.
    pub prune_after_learn: Option<f64>,
    pub prune_previous: Option<f64>,

    // Rehearsal and refinement.
    pub rehearsal_capacity: usize,
    pub refine_epochs: usize,
    pub skip_refinement: bool,

    // Confusion reduction.
    pub confusion_threshold: f64,
    pub confusion_epochs: usize,
    pub confusion_width: usize,
    pub skip_confusion: bool,

    // Drift adaptation.
    pub drift_phase_epochs: usize,
    pub drift_expand_epochs: usize,
    pub drift_recover_frac: f64,

    // Graceful forgetting.
    pub forget_epochs: usize,
    pub sparsity_lambda: f64,

    // Probes.
    pub probe_epochs: usize,
    pub curriculum_probe_epochs: usize,

    // Transparency audit.
    pub audit_transparency: bool,
    pub transparency_probe: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 0.05,
            momentum: 0.0,
            epochs: 200,
            batch_size: None,
            early_stop_acc: None,
            b_large: 1e3,
            b_small: 0.0,
            sim_copy: 0.9,
            sim_partial: 0.3,
            sim_block: 0.0,
            freeze: FreezeMode::Soft,
            transfer: TransferPolicy::Normal,
            base_width: 16,
            base_depth: 2,
            max_width: 64,
            stage_width: 4,
            max_stages: 5,
            residual_stop_frac: 0.01,
            width_decay: 1.0,
            prune_after_learn: None,
            prune_previous: None,
            rehearsal_capacity: 40,
            refine_epochs: 30,
            skip_refinement: false,
            confusion_threshold: 0.10,
            confusion_epochs: 80,
            confusion_width: 8,
            skip_confusion: false,
            drift_phase_epochs: 30,
            drift_expand_epochs: 80,
            drift_recover_frac: 0.9,
            forget_epochs: 30,
            sparsity_lambda: 1e-3,
            probe_epochs: 60,
            curriculum_probe_epochs: 15,
            audit_transparency: true,
            transparency_probe: 100,
        }
    }
}

impl PolicyConfig {
    pub fn train_opts(&self) -> TrainOpts {
        TrainOpts {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            early_stop_acc: self.early_stop_acc,
            sparsity: None,
        }
    }

    pub fn probe_budget(&self) -> ProbeBudget {
        ProbeBudget {
            epochs: self.probe_epochs,
            lr: self.lr,
        }
    }
}

// ---------------------------------------------------------------------------
// Structured reports, one per policy operation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct LearnReport {
    pub task: TaskId,
    pub widths: Vec<usize>,
    pub copied_from: Option<TaskId>,
    pub similarity: BTreeMap<TaskId, f64>,
    pub train: TrainLog,
    pub freed: usize,
    pub accuracies: BTreeMap<TaskId, f64>,
    pub transparency_ok: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RefineReport {
    pub skipped: bool,
    pub epochs: usize,
    pub before: BTreeMap<TaskId, f64>,
    pub after: BTreeMap<TaskId, f64>,
    /// `after − before`; positive values are backward transfer.
    pub backward: BTreeMap<TaskId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftPhase {
    Head,
    HeadTop,
    Column,
    Expand,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DriftPhaseOutcome {
    pub phase: DriftPhase,
    pub epochs: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DriftReport {
    pub task: TaskId,
    pub pre_drift_accuracy: f64,
    pub floor: f64,
    pub phases: Vec<DriftPhaseOutcome>,
    pub recovered: bool,
    pub accuracies: BTreeMap<TaskId, f64>,
    pub transparency_ok: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfusionReport {
    pub skipped: bool,
    pub confused: Vec<TaskId>,
    /// Worst single off-diagonal cell mass per ordered task pair, before.
    pub before: BTreeMap<String, f64>,
    pub after_finetune: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
    pub expanded: bool,
    pub accuracies: BTreeMap<TaskId, f64>,
    pub transparency_ok: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ForgetReport {
    pub task: TaskId,
    pub mode: ForgetMode,
    pub floor: f64,
    pub freed: usize,
    pub kept_fraction: f64,
    pub held_out_accuracy: f64,
    pub accuracies: BTreeMap<TaskId, f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CurriculumReport {
    pub order: Vec<TaskId>,
    pub difficulties: BTreeMap<TaskId, f64>,
    pub total_epochs: usize,
    pub final_accuracies: BTreeMap<TaskId, f64>,
}

/// One entry in the engine's event log.
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum PolicyReport {
    Learn(LearnReport),
    Refine(RefineReport),
    Drift(DriftReport),
    Confusion(ConfusionReport),
    Forget(ForgetReport),
    Curriculum(CurriculumReport),
}
