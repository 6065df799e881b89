//! Ablation baseline: one shared column, no consolidation (`b ≡ 0`).
//!
//! Sequentially training tasks in this mode is exactly the setting where
//! catastrophic forgetting appears; it establishes the baseline the
//! consolidation mechanism has to beat.

use std::collections::BTreeMap;

use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::expansion::{attach_head, recruit_column, TransferSources};
use crate::metrics::{self, AccuracyMatrix};
use crate::net::{ColumnarNetwork, Owner, TaskId};
use crate::tasks::{gen_task, Dataset, TaskSpec};

use super::train::{train_task, TrainOpts};
use super::PolicyConfig;

pub struct SharedColumnAblation {
    pub cfg: PolicyConfig,
    pub net: ColumnarNetwork<f64>,
    pub cstate: ConsolidationState<f64>,
    pub specs: BTreeMap<TaskId, TaskSpec>,
    pub history: AccuracyMatrix,
    data: BTreeMap<TaskId, (Dataset, Dataset, Dataset)>,
}

impl SharedColumnAblation {
    pub fn new(input_width: usize, widths: &[usize], cfg: PolicyConfig) -> Result<Self> {
        let mut net = ColumnarNetwork::new(input_width, cfg.seed);
        let mut cstate = ConsolidationState::new();
        recruit_column(
            &mut net,
            &mut cstate,
            Owner::Shared(Default::default()),
            widths,
            &TransferSources::None,
        )?;
        Ok(Self {
            cfg,
            net,
            cstate,
            specs: BTreeMap::new(),
            history: AccuracyMatrix::new(),
            data: BTreeMap::new(),
        })
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

    pub fn eval_all(&mut self) -> Result<BTreeMap<TaskId, f64>> {
        let tasks = self.net.tasks();
        let mut out = BTreeMap::new();
        for task in tasks {
            let test = self.task_data(task)?.2.clone();
            out.insert(task, metrics::accuracy(&self.net, task, &test)?);
        }
        Ok(out)
    }

    /// Train the task on the shared column with everything unfrozen:
    /// plain sequential SGD, the textbook forgetting setting.
    pub fn learn_task(&mut self, spec: &TaskSpec) -> Result<BTreeMap<TaskId, f64>> {
        let task = TaskId(spec.id);
        if self.net.has_task(task) {
            return Err(Error::State(format!("{task} was already learned")));
        }
        self.specs.insert(task, spec.clone());
        let (train, _, _) = self.task_data(task)?.clone();
        attach_head(&mut self.net, &mut self.cstate, task, spec.classes, 0)?;
        let opts = TrainOpts { early_stop_acc: None, ..self.cfg.train_opts() };
        train_task(&mut self.net, &self.cstate, task, &train, &opts)?;
        let accs = self.eval_all()?;
        self.history
            .record(format!("learn:{task}"), Some(task), accs.clone());
        Ok(accs)
    }
}
