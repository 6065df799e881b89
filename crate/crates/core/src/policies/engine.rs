//! The lifelong-learning driver: owns the network, consolidation state,
//! rehearsal buffers, and the accuracy history, and runs the policy
//! operations in order.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consolidation::{
    ConsolidationState, ConsolidationValue, FreezeLevel, LinkClass, ParamSelector, TargetMode,
};
use crate::error::{Error, Result};
use crate::expansion::{
    attach_head, compute_importance, extend_head_input, prune_nodes, recruit_column,
    TransferSources,
};
use crate::matrix::Matrix;
use crate::metrics::{self, evaluate_single_head, AccuracyMatrix, ConfusionMatrix, TransferScores};
use crate::net::{ColumnarNetwork, Owner, Site, TaskId};
use crate::seed;
use crate::tasks::{gen_task, Dataset, RehearsalBuffer, Sample, TaskSpec};

use super::similarity::estimate_similarity;
use super::train::{joint_epoch, misclassified_indices, train_task, SparsityOpts, TrainOpts};
use super::{
    ConfusionReport, CurriculumReport, DriftPhase, DriftPhaseOutcome, DriftReport, ForgetMode,
    ForgetReport, FreezeMode, LearnReport, PolicyConfig, PolicyReport, RefineReport,
    SimilarityVector, TransferPolicy,
};

/// Cached splits for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Experiment driver. Single-threaded by contract.
pub struct Engine {
    pub cfg: PolicyConfig,
    pub net: ColumnarNetwork<f64>,
    pub cstate: ConsolidationState<f64>,
    pub buffers: BTreeMap<TaskId, RehearsalBuffer<Sample>>,
    pub specs: BTreeMap<TaskId, TaskSpec>,
    pub history: AccuracyMatrix,
    pub reports: Vec<PolicyReport>,
    /// False if any structural event changed a prior head's probe logits.
    pub transparency_ok: bool,
    data: BTreeMap<TaskId, TaskData>,
    probe: Matrix<f64>,
    baselines: BTreeMap<TaskId, f64>,
}

impl Engine {
    pub fn new(input_width: usize, cfg: PolicyConfig) -> Self {
        let net = ColumnarNetwork::new(input_width, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 0xA0D17));
        let rows = cfg.transparency_probe.max(1);
        let mut probe = Matrix::zeros(rows, input_width);
        for v in probe.data_mut() {
            // Box-Muller; wide enough to exercise the generators' range.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            *v = 3.0 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        Self {
            cfg,
            net,
            cstate: ConsolidationState::new(),
            buffers: BTreeMap::new(),
            specs: BTreeMap::new(),
            history: AccuracyMatrix::new(),
            reports: Vec::new(),
            transparency_ok: true,
            data: BTreeMap::new(),
            probe,
            baselines: BTreeMap::new(),
        }
    }

    pub fn probe_inputs(&self) -> &Matrix<f64> {
        &self.probe
    }

    pub fn task_data(&mut self, task: TaskId) -> Result<&TaskData> {
        if !self.data.contains_key(&task) {
            let spec = self
                .specs
                .get(&task)
                .ok_or_else(|| Error::Lookup(format!("no spec for {task}")))?;
            let (train, val, test) = gen_task(spec)?;
            self.data.insert(task, TaskData { train, val, test });
        }
        Ok(&self.data[&task])
    }

    /// Multi-head test accuracy of every learned task.
    pub fn eval_all(&mut self) -> Result<BTreeMap<TaskId, f64>> {
        let tasks = self.net.tasks();
        let mut out = BTreeMap::new();
        for task in tasks {
            let test = self.task_data(task)?.test.clone();
            out.insert(task, metrics::accuracy(&self.net, task, &test)?);
        }
        Ok(out)
    }

    fn record_event(&mut self, label: String, learned: Option<TaskId>) -> Result<BTreeMap<TaskId, f64>> {
        let accs = self.eval_all()?;
        self.history.record(label, learned, accs.clone());
        Ok(accs)
    }

    /// Bit patterns of every existing head's logits on the probe inputs.
    fn probe_bits(&self) -> Result<BTreeMap<TaskId, Vec<u64>>> {
        let logits = self.net.all_logits(&self.probe)?;
        Ok(logits
            .into_iter()
            .map(|(t, m)| (t, m.data().iter().map(|v| v.to_bits()).collect()))
            .collect())
    }

    /// Compare prior heads' probe logits against a snapshot; record failures.
    fn audit_after(&mut self, before: &BTreeMap<TaskId, Vec<u64>>) -> Result<bool> {
        if !self.cfg.audit_transparency {
            return Ok(true);
        }
        let now = self.probe_bits()?;
        let ok = before
            .iter()
            .all(|(t, bits)| now.get(t).is_some_and(|n| n == bits));
        self.transparency_ok &= ok;
        Ok(ok)
    }

    fn freeze_level(&self) -> FreezeLevel<f64> {
        match self.cfg.freeze {
            FreezeMode::Hard => FreezeLevel::HardMask,
            FreezeMode::Soft => FreezeLevel::Soft(self.cfg.b_large),
        }
    }

    fn all_tasks_set(&self) -> BTreeSet<TaskId> {
        self.net.tasks().into_iter().collect()
    }

    /// Freeze everything, then reopen the listed tasks (columns and heads).
    fn isolate(&mut self, active: &BTreeSet<TaskId>) -> Result<()> {
        let all = self.all_tasks_set();
        self.cstate.freeze_tasks(&self.net, &all, self.freeze_level())?;
        self.cstate.unfreeze_tasks(&self.net, active)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Algorithm: continual learning of a new task (with non-forgetting and
    // forward transfer).
    // ------------------------------------------------------------------

    pub fn learn_new_task(&mut self, spec: &TaskSpec) -> Result<LearnReport> {
        let task = TaskId(spec.id);
        if self.net.has_task(task) {
            return Err(Error::State(format!("{task} was already learned")));
        }
        self.specs.insert(task, spec.clone());
        let data = self.task_data(task)?.clone();
        let mut notes = Vec::new();

        // Similarity of every earlier task to this one.
        let earlier = self.net.tasks();
        let mut simvec: SimilarityVector = BTreeMap::new();
        if self.cfg.transfer == TransferPolicy::Normal {
            for j in &earlier {
                let s = estimate_similarity(
                    &self.net,
                    *j,
                    &data.train,
                    &data.val,
                    self.cfg.probe_budget(),
                    seed::derive(self.cfg.seed, 0x517 ^ ((j.0 as u64) << 32) ^ spec.id as u64),
                )?;
                simvec.insert(*j, s);
            }
        }

        // Size the new column: copy-mode clones the most similar column's
        // shape; otherwise the base width is discounted by the best
        // similarity and decayed by capacity pressure.
        let best = simvec
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| b.0.cmp(a.0)))
            .map(|(t, s)| (*t, *s));
        let copy_source = match best {
            Some((j, s)) if s >= self.cfg.sim_copy => {
                let same_classes =
                    self.net.head(j)?.classes() == spec.classes;
                if same_classes {
                    Some(j)
                } else {
                    notes.push(format!("copy from {j} skipped: class count differs"));
                    None
                }
            }
            _ => None,
        };
        let widths: Vec<usize> = if let Some(j) = copy_source {
            self.net.column(self.net.column_of(j)?)?.widths()
        } else {
            let max_sim = best.map(|(_, s)| s.max(0.0)).unwrap_or(0.0);
            let decay = self.cfg.width_decay.powi(earlier.len() as i32);
            let w = ((self.cfg.base_width as f64) * (1.0 - max_sim) * decay).ceil() as usize;
            let w = w.max(2);
            let depth = best
                .map(|(j, _)| {
                    self.net
                        .column_of(j)
                        .and_then(|ci| self.net.column(ci).map(|c| c.depth()))
                        .unwrap_or(self.cfg.base_depth)
                })
                .unwrap_or(self.cfg.base_depth);
            vec![w; depth]
        };

        // Structural event: recruit the column and head.
        let before = self.probe_bits()?;
        let ci = recruit_column(
            &mut self.net,
            &mut self.cstate,
            Owner::Task(task),
            &widths,
            &TransferSources::All,
        )?;
        attach_head(&mut self.net, &mut self.cstate, task, spec.classes, ci)?;
        let transparency_ok = self.audit_after(&before)?;

        self.forward_transfer_init(task, &simvec, copy_source, &mut notes)?;

        // Non-forgetting: freeze everything previous, open the new task.
        let prev: BTreeSet<TaskId> = earlier.iter().copied().collect();
        self.cstate.freeze_tasks(&self.net, &prev, self.freeze_level())?;

        let train_log = train_task(&mut self.net, &self.cstate, task, &data.train, &self.cfg.train_opts())?;

        // Optional pruning.
        let mut freed = 0;
        if let Some(keep) = self.cfg.prune_after_learn {
            let imp = compute_importance(&self.net, task, &data.train.x)?;
            freed += prune_nodes(&mut self.net, &mut self.cstate, task, keep, &imp, false)?;
        }
        if let Some(keep) = self.cfg.prune_previous {
            for j in &earlier {
                let jd = self.task_data(*j)?.train.x.clone();
                let imp = compute_importance(&self.net, *j, &jd)?;
                freed += prune_nodes(&mut self.net, &mut self.cstate, *j, keep, &imp, true)?;
            }
        }

        // Rehearsal.
        let capacity = self.cfg.rehearsal_capacity;
        let buf_seed = seed::derive(self.cfg.seed, 0xB0F ^ spec.id as u64);
        self.buffers
            .entry(task)
            .or_insert_with(|| RehearsalBuffer::new(capacity, buf_seed))
            .update(data.train.to_samples());

        let accuracies = self.record_event(format!("learn:{task}"), Some(task))?;
        let report = LearnReport {
            task,
            widths,
            copied_from: copy_source,
            similarity: simvec,
            train: train_log,
            freed,
            accuracies,
            transparency_ok,
            notes,
        };
        self.reports.push(PolicyReport::Learn(report.clone()));
        Ok(report)
    }

    /// Initialize the new task's weights and link consolidation from the
    /// similarity vector: copy (≥ copy threshold), partial random
    /// (≥ partial), open-at-zero (between), or blocked (≤ block threshold).
    pub fn forward_transfer_init(
        &mut self,
        task: TaskId,
        simvec: &SimilarityVector,
        copy_source: Option<TaskId>,
        notes: &mut Vec<String>,
    ) -> Result<()> {
        let ci = self.net.column_of(task)?;

        if let Some(j) = copy_source {
            self.copy_column_weights(j, task, notes)?;
        }

        // Per-source link treatment.
        let link_specs: Vec<(usize, usize)> = self
            .net
            .column(ci)?
            .transfer_in
            .iter()
            .enumerate()
            .map(|(li, l)| (li, l.src_column))
            .collect();
        let mut rng = None;
        for (li, src_col) in link_specs {
            let src_tasks = crate::consolidation::column_tasks(&self.net, src_col);
            let sim = src_tasks
                .iter()
                .filter_map(|t| simvec.get(t))
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sim = if sim.is_finite() { sim } else { 0.0 };
            let blocked = self.cfg.transfer == TransferPolicy::BlockAll || sim <= self.cfg.sim_block;
            if blocked {
                crate::expansion::set_link_consolidation(
                    &self.net,
                    &mut self.cstate,
                    ci,
                    li,
                    ConsolidationValue::Mask,
                    TargetMode::Zero,
                );
            } else if sim >= self.cfg.sim_copy {
                crate::expansion::set_link_consolidation(
                    &self.net,
                    &mut self.cstate,
                    ci,
                    li,
                    ConsolidationValue::Finite(self.cfg.b_small),
                    TargetMode::Zero,
                );
            } else if sim >= self.cfg.sim_partial {
                // Small random init to break symmetry; fully trainable.
                let r = rng.get_or_insert_with(|| {
                    ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, 0xF17 ^ task.0 as u64))
                });
                let (rows, cols) = {
                    let w = &self.net.column(ci)?.transfer_in[li].weights;
                    (w.rows(), w.cols())
                };
                let limit = 0.1 * (6.0 / (rows + cols) as f64).sqrt();
                let values: Vec<f64> =
                    (0..rows * cols).map(|_| r.random_range(-limit..limit)).collect();
                let mut k = 0;
                let site = Site::Transfer { column: ci, link: li };
                self.net.for_each_param_mut(|pid, v| {
                    if pid.site == site {
                        *v = values[k];
                        k += 1;
                    }
                });
                crate::expansion::set_link_consolidation(
                    &self.net,
                    &mut self.cstate,
                    ci,
                    li,
                    ConsolidationValue::Finite(0.0),
                    TargetMode::Snapshot,
                );
            } else {
                // Neutral: open but start from zero.
                crate::expansion::set_link_consolidation(
                    &self.net,
                    &mut self.cstate,
                    ci,
                    li,
                    ConsolidationValue::Finite(0.0),
                    TargetMode::Snapshot,
                );
            }
        }
        Ok(())
    }

    /// Copy the source column's intra weights and head into the new task's
    /// column (identical-task transfer). Falls back to partial mode when
    /// shapes disagree.
    fn copy_column_weights(
        &mut self,
        from: TaskId,
        to: TaskId,
        notes: &mut Vec<String>,
    ) -> Result<()> {
        let src_ci = self.net.column_of(from)?;
        let dst_ci = self.net.column_of(to)?;
        let (src_widths, dst_widths) = (
            self.net.column(src_ci)?.widths(),
            self.net.column(dst_ci)?.widths(),
        );
        if src_widths != dst_widths {
            notes.push(format!(
                "copy from {from} fell back to partial: column shapes differ"
            ));
            return Ok(());
        }
        for li in 0..src_widths.len() {
            let (w, b) = {
                let l = &self.net.column(src_ci)?.layers[li];
                (l.weights.clone(), l.biases.clone())
            };
            let dst = &mut self.net.columns[dst_ci].layers[li];
            dst.weights = w;
            dst.biases = b;
        }
        // Head: copy the segment reading the source column's top layer.
        let src_head = self.net.head(from)?.clone();
        let seg = self
            .net
            .head_segments(&src_head)
            .into_iter()
            .find(|&(c, l, _, _)| c == src_ci && l == src_head.inputs[0].1);
        if let Some((_, _, offset, width)) = seg {
            let dst_head = self.net.heads.get_mut(&to).unwrap();
            for r in 0..dst_head.layer.weights.rows() {
                for c in 0..width {
                    dst_head
                        .layer
                        .weights
                        .set(r, c, src_head.layer.weights.get(r, offset + c));
                }
                dst_head.layer.biases[r] = src_head.layer.biases[r];
            }
        }
        self.net.bump_version();
        // Re-capture snapshot targets at the copied values.
        let sel = ParamSelector::column(dst_ci);
        self.cstate
            .set(&self.net, &sel, ConsolidationValue::Finite(0.0), TargetMode::Snapshot);
        let sel = ParamSelector::head_of(to);
        self.cstate
            .set(&self.net, &sel, ConsolidationValue::Finite(0.0), TargetMode::Snapshot);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Algorithm: overall refinement (backward transfer via rehearsal).
    // ------------------------------------------------------------------

    pub fn overall_refinement(&mut self) -> Result<RefineReport> {
        if self.cfg.skip_refinement {
            let report = RefineReport {
                skipped: true,
                epochs: 0,
                before: BTreeMap::new(),
                after: BTreeMap::new(),
                backward: BTreeMap::new(),
            };
            self.reports.push(PolicyReport::Refine(report.clone()));
            return Ok(report);
        }
        let tasks = self.net.tasks();
        for t in &tasks {
            if self.buffers.get(t).map_or(true, |b| b.is_empty()) {
                return Err(Error::Data(format!(
                    "refusing refinement: empty rehearsal buffer for {t} would silently forget it"
                )));
            }
        }
        let before = self.eval_all()?;

        // Unfreeze the whole network, all connections.
        self.cstate.set(
            &self.net,
            &ParamSelector::all(),
            ConsolidationValue::Finite(0.0),
            TargetMode::Snapshot,
        );

        let sets: Vec<(TaskId, Dataset)> = tasks
            .iter()
            .map(|t| {
                let classes = self.specs[t].classes;
                (*t, Dataset::from_samples(self.buffers[t].items(), classes))
            })
            .collect();
        let parts: Vec<(TaskId, &Dataset)> = sets.iter().map(|(t, d)| (*t, d)).collect();
        for _ in 0..self.cfg.refine_epochs {
            joint_epoch(&mut self.net, &self.cstate, &parts, self.cfg.lr)?;
        }

        // Back to the frozen regime, snapshotting the refined weights.
        let all = self.all_tasks_set();
        self.cstate.freeze_tasks(&self.net, &all, self.freeze_level())?;

        let after = self.record_event("refine".into(), None)?;
        let backward = after
            .iter()
            .map(|(t, a)| (*t, a - before.get(t).copied().unwrap_or(0.0)))
            .collect();
        let report = RefineReport {
            skipped: false,
            epochs: self.cfg.refine_epochs,
            before,
            after,
            backward,
        };
        self.reports.push(PolicyReport::Refine(report.clone()));
        Ok(report)
    }

    // ------------------------------------------------------------------
    // Algorithm: adapting to concept update/drift.
    // ------------------------------------------------------------------

    /// Adapt `task` to new data from `drifted`, unfreezing progressively
    /// deeper slices of its column (head → top layer → whole column) and,
    /// if that still fails, expanding it. All other tasks stay frozen.
    pub fn adapt_to_drift(&mut self, task: TaskId, drifted: &TaskSpec) -> Result<DriftReport> {
        if !self.net.has_task(task) {
            return Err(Error::Lookup(format!("{task} was never learned")));
        }
        if drifted.id != task.0 {
            return Err(Error::Config(format!(
                "drifted spec has id {} but adapts {task}",
                drifted.id
            )));
        }
        let pre_drift = {
            let test = self.task_data(task)?.test.clone();
            metrics::accuracy(&self.net, task, &test)?
        };
        let floor = self.cfg.drift_recover_frac * pre_drift;

        // The drifted distribution replaces the task from now on.
        self.specs.insert(task, drifted.clone());
        self.data.remove(&task);
        let data = self.task_data(task)?.clone();

        let ci = self.net.column_of(task)?;
        let top = self.net.column(ci)?.top_layer();
        let mut phases = Vec::new();
        let mut recovered = false;
        let mut transparency_ok = true;
        for phase in [DriftPhase::Head, DriftPhase::HeadTop, DriftPhase::Column, DriftPhase::Expand] {
            let epochs = match phase {
                DriftPhase::Expand => self.cfg.drift_expand_epochs,
                _ => self.cfg.drift_phase_epochs,
            };
            // Freeze the world, then open this phase's slice.
            let all = self.all_tasks_set();
            self.cstate.freeze_tasks(&self.net, &all, self.freeze_level())?;
            match phase {
                DriftPhase::Head => {
                    self.cstate.set(
                        &self.net,
                        &ParamSelector::head_of(task),
                        ConsolidationValue::Finite(0.0),
                        TargetMode::Snapshot,
                    );
                }
                DriftPhase::HeadTop => {
                    self.cstate.set(
                        &self.net,
                        &ParamSelector::head_of(task),
                        ConsolidationValue::Finite(0.0),
                        TargetMode::Snapshot,
                    );
                    let sel = ParamSelector::column(ci)
                        .with_classes([LinkClass::Intra, LinkClass::Transfer])
                        .with_layers(top, top);
                    self.cstate
                        .set(&self.net, &sel, ConsolidationValue::Finite(0.0), TargetMode::Snapshot);
                }
                DriftPhase::Column => {
                    let active: BTreeSet<TaskId> = [task].into();
                    self.cstate.unfreeze_tasks(&self.net, &active)?;
                }
                DriftPhase::Expand => {}
            }
            let val_acc = if phase == DriftPhase::Expand {
                // Grow in stages: fresh nodes train on the residual, the head
                // recalibrates over everything; stop when the floor is met.
                let mut acc = 0.0;
                for _ in 0..self.cfg.max_stages {
                    let residual = misclassified_indices(&self.net, task, &data.train)?;
                    if residual.len() <= (self.cfg.residual_stop_frac * data.train.len() as f64) as usize
                    {
                        break;
                    }
                    let before = self.probe_bits()?;
                    super::train::stage_cycle(
                        &mut self.net,
                        &mut self.cstate,
                        task,
                        &data.train,
                        self.cfg.stage_width,
                        self.cfg.max_width,
                        epochs,
                        self.cfg.lr,
                    )?;
                    transparency_ok &= self.audit_after(&before)?;
                    acc = metrics::accuracy(&self.net, task, &data.val)?;
                    if acc >= floor {
                        break;
                    }
                }
                acc
            } else {
                let opts = TrainOpts {
                    epochs,
                    early_stop_acc: None,
                    ..self.cfg.train_opts()
                };
                train_task(&mut self.net, &self.cstate, task, &data.train, &opts)?;
                metrics::accuracy(&self.net, task, &data.val)?
            };
            phases.push(DriftPhaseOutcome { phase, epochs, val_accuracy: val_acc });
            if val_acc >= floor {
                recovered = true;
                break;
            }
        }

        // Return the task to the frozen regime.
        let own: BTreeSet<TaskId> = [task].into();
        self.cstate.freeze_tasks(&self.net, &own, self.freeze_level())?;

        let accuracies = self.record_event(format!("drift:{task}"), None)?;
        let report = DriftReport {
            task,
            pre_drift_accuracy: pre_drift,
            floor,
            phases,
            recovered,
            accuracies,
            transparency_ok,
        };
        self.reports.push(PolicyReport::Drift(report.clone()));
        Ok(report)
    }

    // ------------------------------------------------------------------
    // Algorithm: confusion reduction (single-head).
    // ------------------------------------------------------------------

    fn buffer_datasets(&self, tasks: &[TaskId]) -> Result<Vec<(TaskId, Dataset)>> {
        tasks
            .iter()
            .map(|t| {
                let buf = self
                    .buffers
                    .get(t)
                    .filter(|b| !b.is_empty())
                    .ok_or_else(|| Error::Data(format!("no rehearsal samples for {t}")))?;
                Ok((*t, Dataset::from_samples(buf.items(), self.specs[t].classes)))
            })
            .collect()
    }

    fn worst_cells(&self, cm: &ConfusionMatrix, tasks: &[TaskId]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for a in tasks {
            for b in tasks {
                if a != b {
                    out.insert(format!("{a}->{b}"), cm.max_cross_cell(*a, *b));
                }
            }
        }
        out
    }

    /// Detect confused task pairs from the single-head confusion matrix over
    /// rehearsal data, fine-tune just those tasks on their buffers, and if
    /// confusion persists recruit shared units wired into the confused
    /// columns. Everything else stays frozen.
    pub fn reduce_confusion(&mut self) -> Result<ConfusionReport> {
        let tasks = self.net.tasks();
        if self.cfg.skip_confusion || tasks.len() < 2 {
            let report = ConfusionReport {
                skipped: true,
                confused: Vec::new(),
                before: BTreeMap::new(),
                after_finetune: BTreeMap::new(),
                after: BTreeMap::new(),
                expanded: false,
                accuracies: self.eval_all()?,
                transparency_ok: true,
            };
            self.reports.push(PolicyReport::Confusion(report.clone()));
            return Ok(report);
        }
        let sets = self.buffer_datasets(&tasks)?;
        let parts: Vec<(TaskId, &Dataset)> = sets.iter().map(|(t, d)| (*t, d)).collect();
        let cm = evaluate_single_head(&self.net, &parts)?;
        let before = self.worst_cells(&cm, &tasks);

        let mut confused: BTreeSet<TaskId> = BTreeSet::new();
        for a in &tasks {
            for b in &tasks {
                if a != b && cm.max_cross_cell(*a, *b) >= self.cfg.confusion_threshold {
                    confused.insert(*a);
                    confused.insert(*b);
                }
            }
        }
        if confused.is_empty() {
            let report = ConfusionReport {
                skipped: false,
                confused: Vec::new(),
                before: before.clone(),
                after_finetune: before.clone(),
                after: before,
                expanded: false,
                accuracies: self.eval_all()?,
                transparency_ok: true,
            };
            self.reports.push(PolicyReport::Confusion(report.clone()));
            return Ok(report);
        }

        // Fine-tune only the confused tasks on their rehearsal union.
        self.isolate(&confused)?;
        let confused_vec: Vec<TaskId> = confused.iter().copied().collect();
        let csets = self.buffer_datasets(&confused_vec)?;
        let cparts: Vec<(TaskId, &Dataset)> = csets.iter().map(|(t, d)| (*t, d)).collect();
        for _ in 0..self.cfg.confusion_epochs {
            joint_epoch(&mut self.net, &self.cstate, &cparts, self.cfg.lr)?;
        }

        let cm_mid = evaluate_single_head(&self.net, &parts)?;
        let after_finetune = self.worst_cells(&cm_mid, &tasks);
        let still = confused_vec.iter().any(|a| {
            confused_vec
                .iter()
                .any(|b| a != b && cm_mid.max_cross_cell(*a, *b) >= self.cfg.confusion_threshold)
        });

        // If fine-tuning was not enough, add shared free units wired to the
        // confused columns and feeding their heads.
        let mut transparency_ok = true;
        let mut expanded = false;
        if still {
            expanded = true;
            let src_cols: Vec<usize> = confused_vec
                .iter()
                .map(|t| self.net.column_of(*t))
                .collect::<Result<_>>()?;
            let before_bits = self.probe_bits()?;
            let shared_ci = recruit_column(
                &mut self.net,
                &mut self.cstate,
                Owner::Shared(confused.clone()),
                &[self.cfg.confusion_width],
                &TransferSources::Columns(src_cols),
            )?;
            let shared_top = self.net.column(shared_ci)?.top_layer();
            for t in &confused_vec {
                extend_head_input(&mut self.net, &mut self.cstate, *t, (shared_ci, shared_top))?;
            }
            transparency_ok = self.audit_after(&before_bits)?;

            self.isolate(&confused)?;
            for _ in 0..self.cfg.confusion_epochs {
                joint_epoch(&mut self.net, &self.cstate, &cparts, self.cfg.lr)?;
            }
        }

        // Freeze everything again.
        let all = self.all_tasks_set();
        self.cstate.freeze_tasks(&self.net, &all, self.freeze_level())?;

        let cm_post = evaluate_single_head(&self.net, &parts)?;
        let after = self.worst_cells(&cm_post, &tasks);
        let accuracies = self.record_event("reduce-confusion".into(), None)?;
        let report = ConfusionReport {
            skipped: false,
            confused: confused_vec,
            before,
            after_finetune,
            after,
            expanded,
            accuracies,
            transparency_ok,
        };
        self.reports.push(PolicyReport::Confusion(report.clone()));
        Ok(report)
    }

    // ------------------------------------------------------------------
    // Algorithm: graceful forgetting.
    // ------------------------------------------------------------------

    /// Deliberately sacrifice bounded accuracy on `task` to free capacity.
    /// The default method retrains under node-group sparsity and prunes to
    /// the smallest keep fraction whose held-out accuracy stays at or above
    /// `floor`; the alternatives lower `b` or shrink the rehearsal buffer.
    pub fn graceful_forget(
        &mut self,
        task: TaskId,
        floor: f64,
        mode: ForgetMode,
    ) -> Result<ForgetReport> {
        if !self.net.has_task(task) {
            return Err(Error::Lookup(format!("{task} was never learned")));
        }
        let data = self.task_data(task)?.clone();
        let ci = self.net.column_of(task)?;
        let mut freed = 0;
        let mut kept_fraction = 1.0;

        match mode {
            ForgetMode::LowerB { b } => {
                let sel = ParamSelector::tasks([task]);
                self.cstate
                    .set(&self.net, &sel, ConsolidationValue::Finite(b), TargetMode::Snapshot);
            }
            ForgetMode::ShrinkBuffer { capacity } => {
                let buf = self
                    .buffers
                    .get_mut(&task)
                    .ok_or_else(|| Error::Data(format!("no rehearsal buffer for {task}")))?;
                buf.shrink(capacity);
            }
            ForgetMode::Prune => {
                // Only this task trains; everything else stays frozen.
                let active: BTreeSet<TaskId> = [task].into();
                self.isolate(&active)?;
                let opts = TrainOpts {
                    epochs: self.cfg.forget_epochs,
                    early_stop_acc: None,
                    sparsity: Some(SparsityOpts {
                        lambda: self.cfg.sparsity_lambda,
                        column: ci,
                    }),
                    ..self.cfg.train_opts()
                };
                train_task(&mut self.net, &self.cstate, task, &data.train, &opts)?;

                let unpruned = metrics::accuracy(&self.net, task, &data.val)?;
                if unpruned < floor {
                    return Err(Error::Constraint(format!(
                        "accuracy floor {floor} unreachable for {task}: even unpruned it scores {unpruned:.3}"
                    )));
                }

                // Binary search the smallest keep count that holds the floor.
                let imp = compute_importance(&self.net, task, &data.train.x)?;
                let width = self.net.column(ci)?.widths().into_iter().max().unwrap();
                let (mut lo, mut hi) = (1usize, width);
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    let keep = mid as f64 / width as f64;
                    let ok = {
                        let mut net = self.net.clone();
                        let mut cs = self.cstate.clone();
                        match prune_nodes(&mut net, &mut cs, task, keep, &imp, false) {
                            Ok(_) => metrics::accuracy(&net, task, &data.val)? >= floor,
                            Err(Error::Constraint(_)) => false,
                            Err(e) => return Err(e),
                        }
                    };
                    if ok {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                kept_fraction = lo as f64 / width as f64;
                if lo < width {
                    freed = prune_nodes(&mut self.net, &mut self.cstate, task, kept_fraction, &imp, false)?;
                }
                let own: BTreeSet<TaskId> = [task].into();
                self.cstate.freeze_tasks(&self.net, &own, self.freeze_level())?;
            }
        }

        let held_out = metrics::accuracy(&self.net, task, &data.val)?;
        let accuracies = self.record_event(format!("forget:{task}"), None)?;
        let report = ForgetReport {
            task,
            mode,
            floor,
            freed,
            kept_fraction,
            held_out_accuracy: held_out,
            accuracies,
        };
        self.reports.push(PolicyReport::Forget(report.clone()));
        Ok(report)
    }

    // ------------------------------------------------------------------
    // Algorithm: curriculum learning.
    // ------------------------------------------------------------------

    /// Difficulty of a task alone: held-out error of a fixed-budget probe
    /// net trained on it in isolation.
    pub fn probe_difficulty(&self, spec: &TaskSpec) -> Result<f64> {
        let (train, val, _) = gen_task(spec)?;
        let mut net = ColumnarNetwork::new(
            spec.width,
            seed::derive(self.cfg.seed, 0xD1FF ^ spec.id as u64),
        );
        let mut cs = ConsolidationState::new();
        let widths = vec![self.cfg.base_width; self.cfg.base_depth];
        let ci = recruit_column(&mut net, &mut cs, Owner::Shared(Default::default()), &widths, &TransferSources::None)?;
        attach_head(&mut net, &mut cs, TaskId(spec.id), spec.classes, ci)?;
        let opts = TrainOpts {
            epochs: self.cfg.curriculum_probe_epochs,
            early_stop_acc: None,
            ..self.cfg.train_opts()
        };
        train_task(&mut net, &cs, TaskId(spec.id), &train, &opts)?;
        Ok(1.0 - metrics::accuracy(&net, TaskId(spec.id), &val)?)
    }

    /// Learn a pool of tasks easiest-first (ties go to the lowest id),
    /// reducing confusion after each, then run one overall refinement.
    pub fn run_curriculum(&mut self, pool: &[TaskSpec]) -> Result<CurriculumReport> {
        let mut difficulties = BTreeMap::new();
        for spec in pool {
            let d = match spec.difficulty {
                Some(d) => d,
                None => self.probe_difficulty(spec)?,
            };
            difficulties.insert(TaskId(spec.id), d);
        }
        let mut remaining: Vec<&TaskSpec> = pool.iter().collect();
        let mut order = Vec::new();
        let mut total_epochs = 0;
        while !remaining.is_empty() {
            let (idx, _) = remaining
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = difficulties[&TaskId(a.id)];
                    let db = difficulties[&TaskId(b.id)];
                    da.partial_cmp(&db).unwrap().then_with(|| a.id.cmp(&b.id))
                })
                .unwrap();
            let spec = remaining.remove(idx);
            order.push(TaskId(spec.id));
            let report = self.learn_new_task(spec)?;
            total_epochs += report.train.epochs_run;
            if !self.cfg.skip_confusion && self.net.tasks().len() >= 2 {
                self.reduce_confusion()?;
            }
        }
        self.overall_refinement()?;
        let final_accuracies = self.eval_all()?;
        let report = CurriculumReport {
            order,
            difficulties,
            total_epochs,
            final_accuracies,
        };
        self.reports.push(PolicyReport::Curriculum(report.clone()));
        Ok(report)
    }

    // ------------------------------------------------------------------
    // Transfer metrics.
    // ------------------------------------------------------------------

    /// The same task trained in isolation with an identical budget, for
    /// forward-transfer baselines. Seed-matched through the config seed.
    pub fn isolated_baseline(&mut self, task: TaskId) -> Result<f64> {
        if let Some(b) = self.baselines.get(&task) {
            return Ok(*b);
        }
        let spec = self
            .specs
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("no spec for {task}")))?
            .clone();
        let data = self.task_data(task)?.clone();
        let mut net = ColumnarNetwork::new(
            spec.width,
            seed::derive(self.cfg.seed, 0x150 ^ spec.id as u64),
        );
        let mut cs = ConsolidationState::new();
        let widths = vec![self.cfg.base_width; self.cfg.base_depth];
        let ci = recruit_column(&mut net, &mut cs, Owner::Task(task), &widths, &TransferSources::None)?;
        attach_head(&mut net, &mut cs, task, spec.classes, ci)?;
        train_task(&mut net, &cs, task, &data.train, &self.cfg.train_opts())?;
        let acc = metrics::accuracy(&net, task, &data.test)?;
        self.baselines.insert(task, acc);
        Ok(acc)
    }

    /// Forward/backward transfer from the recorded history, with isolation
    /// baselines computed on demand.
    pub fn transfer_scores(&mut self) -> Result<TransferScores> {
        for task in self.net.tasks() {
            self.isolated_baseline(task)?;
        }
        Ok(metrics::transfer_scores(&self.history, &self.baselines))
    }

    pub fn baselines(&self) -> &BTreeMap<TaskId, f64> {
        &self.baselines
    }
}
