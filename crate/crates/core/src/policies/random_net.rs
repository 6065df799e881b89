//! Frozen deep random network mode.
//!
//! One wide Gaussian-initialized network is built up front and every hidden
//! weight is masked; each task is learned as a fresh linear head on the last
//! hidden layer. Rehearsal stores the activation vectors at that layer
//! instead of raw samples, which skips the frozen forward pass entirely and
//! is bit-identical to recomputing them. An optional schedule progressively
//! unfreezes layers from the output side as tasks accumulate.

use std::collections::BTreeMap;

use crate::consolidation::{ConsolidationState, ConsolidationValue, ParamSelector, TargetMode};
use crate::error::{Error, Result};
use crate::expansion::{attach_head, recruit_column, TransferSources};
use crate::matrix::Matrix;
use crate::metrics::{self, AccuracyMatrix};
use crate::net::{ColumnarNetwork, Owner, Site, SourceId, TaskId};
use crate::tasks::{gen_task, Dataset, RehearsalBuffer, TaskSpec};

use super::train::{train_linear_head, train_task, TrainOpts};
use super::PolicyConfig;

/// A rehearsal item in random-network mode: the last-hidden-layer
/// activation vector and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ActSample {
    pub activation: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RandomLearnReport {
    pub task: TaskId,
    pub used_activation_path: bool,
    pub accuracies: BTreeMap<TaskId, f64>,
}

pub struct RandomFeatureEngine {
    pub cfg: PolicyConfig,
    pub net: ColumnarNetwork<f64>,
    pub cstate: ConsolidationState<f64>,
    pub act_buffers: BTreeMap<TaskId, RehearsalBuffer<ActSample>>,
    pub specs: BTreeMap<TaskId, TaskSpec>,
    pub history: AccuracyMatrix,
    data: BTreeMap<TaskId, (Dataset, Dataset, Dataset)>,
    /// Unfreeze one more layer (output side first) after every N tasks.
    unfreeze_every: Option<usize>,
    layers_unfrozen: usize,
    tasks_done: usize,
}

impl RandomFeatureEngine {
    pub fn new(
        input_width: usize,
        widths: &[usize],
        cfg: PolicyConfig,
        unfreeze_every: Option<usize>,
    ) -> Result<Self> {
        let mut net = ColumnarNetwork::new(input_width, cfg.seed);
        let mut cstate = ConsolidationState::new();
        recruit_column(
            &mut net,
            &mut cstate,
            Owner::Shared(Default::default()),
            widths,
            &TransferSources::None,
        )?;
        // Gaussian weights scaled by fan-in, as random-projection features.
        let mut rng = net.next_rng();
        let fan_in: Vec<usize> = (0..widths.len())
            .map(|l| if l == 0 { input_width } else { widths[l - 1] })
            .collect();
        net.for_each_param_mut(|pid, v| {
            if let (Site::Hidden { layer, .. }, SourceId::Node(_)) = (pid.site, pid.col) {
                use rand::Rng;
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random::<f64>();
                let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v = g / (fan_in[layer] as f64).sqrt();
            }
        });
        cstate.sync(&net);
        cstate.set(
            &net,
            &ParamSelector::column(0),
            ConsolidationValue::Mask,
            TargetMode::Snapshot,
        );
        Ok(Self {
            cfg,
            net,
            cstate,
            act_buffers: BTreeMap::new(),
            specs: BTreeMap::new(),
            history: AccuracyMatrix::new(),
            data: BTreeMap::new(),
            unfreeze_every,
            layers_unfrozen: 0,
            tasks_done: 0,
        })
    }

    pub fn layers_unfrozen(&self) -> usize {
        self.layers_unfrozen
    }

    fn task_data(&mut self, task: TaskId) -> Result<&(Dataset, Dataset, Dataset)> {
        if !self.data.contains_key(&task) {
            let spec = self
                .specs
                .get(&task)
                .ok_or_else(|| Error::Lookup(format!("no spec for {task}")))?;
            self.data.insert(task, gen_task(spec)?);
        }
        Ok(&self.data[&task])
    }

    /// Last-hidden-layer activations of the frozen column.
    pub fn top_activations(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        let (_, acts) = self.net.column_activations(x)?;
        let top = self.net.column(0)?.top_layer();
        Ok(acts[0][top].clone())
    }

    pub fn eval_all(&mut self) -> Result<BTreeMap<TaskId, f64>> {
        let tasks = self.net.tasks();
        let mut out = BTreeMap::new();
        for task in tasks {
            let test = self.task_data(task)?.2.clone();
            out.insert(task, metrics::accuracy(&self.net, task, &test)?);
        }
        Ok(out)
    }

    /// Learn one task. While the column is fully frozen this trains the head
    /// directly on cached activations; once layers are unfrozen it falls
    /// back to the general path on raw samples.
    pub fn learn_task(&mut self, spec: &TaskSpec) -> Result<RandomLearnReport> {
        let task = TaskId(spec.id);
        if self.net.has_task(task) {
            return Err(Error::State(format!("{task} was already learned")));
        }
        self.specs.insert(task, spec.clone());
        let (train, _, _) = self.task_data(task)?.clone();

        attach_head(&mut self.net, &mut self.cstate, task, spec.classes, 0)?;

        let frozen = self.layers_unfrozen == 0;
        if frozen {
            let acts = self.top_activations(&train.x)?;
            let mut head = self.net.head(task)?.layer.clone();
            train_linear_head(&mut head, &acts, &train.y, self.cfg.epochs, self.cfg.lr)?;
            self.net.heads.get_mut(&task).unwrap().layer = head;
            self.net.bump_version();
            // Rehearsal stores activations, not samples.
            let buf_seed = crate::seed::derive(self.cfg.seed, 0xAC7 ^ spec.id as u64);
            let items: Vec<ActSample> = (0..train.len())
                .map(|i| ActSample {
                    activation: acts.row(i).to_vec(),
                    label: train.y[i],
                })
                .collect();
            self.act_buffers
                .entry(task)
                .or_insert_with(|| RehearsalBuffer::new(self.cfg.rehearsal_capacity, buf_seed))
                .update(items);
        } else {
            let opts = TrainOpts { early_stop_acc: None, ..self.cfg.train_opts() };
            train_task(&mut self.net, &self.cstate, task, &train, &opts)?;
        }

        self.tasks_done += 1;
        if let Some(every) = self.unfreeze_every {
            let depth = self.net.column(0)?.depth();
            if self.tasks_done % every == 0 && self.layers_unfrozen < depth {
                self.layers_unfrozen += 1;
                let top = depth - 1;
                let lo = top + 1 - self.layers_unfrozen;
                let sel = ParamSelector::column(0).with_layers(lo, top);
                self.cstate
                    .set(&self.net, &sel, ConsolidationValue::Finite(0.0), TargetMode::Snapshot);
            }
        }

        let accuracies = self.eval_all()?;
        self.history
            .record(format!("learn:{task}"), Some(task), accuracies.clone());
        Ok(RandomLearnReport {
            task,
            used_activation_path: frozen,
            accuracies,
        })
    }

    /// Retrain every head from its activation cache (valid only while the
    /// hidden layers are frozen, where cached and recomputed activations are
    /// identical).
    pub fn rehearsal_refinement(&mut self) -> Result<()> {
        if self.layers_unfrozen > 0 {
            return Err(Error::State(
                "activation-cache rehearsal is only exact while hidden layers are frozen".into(),
            ));
        }
        let tasks = self.net.tasks();
        for task in tasks {
            let buf = match self.act_buffers.get(&task) {
                Some(b) if !b.is_empty() => b,
                _ => continue,
            };
            let rows: Vec<Vec<f64>> = buf.items().iter().map(|a| a.activation.clone()).collect();
            let labels: Vec<usize> = buf.items().iter().map(|a| a.label).collect();
            let acts = Matrix::from_rows(&rows);
            let mut head = self.net.head(task)?.layer.clone();
            train_linear_head(&mut head, &acts, &labels, self.cfg.refine_epochs, self.cfg.lr)?;
            self.net.heads.get_mut(&task).unwrap().layer = head;
        }
        self.net.bump_version();
        Ok(())
    }

    /// Bit patterns of every hidden parameter, for non-forgetting checks.
    pub fn hidden_bits(&self) -> Vec<u64> {
        let mut out = Vec::new();
        self.net.for_each_param(|pid, v| {
            if matches!(pid.site, Site::Hidden { .. }) {
                out.push(v.to_bits());
            }
        });
        out
    }
}
