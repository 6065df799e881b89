//! Accuracy matrix, forgetting, transfer scores, and single-head confusion.
//!
//! All metrics are pure functions of logged predictions and can be recomputed
//! from a persisted report without the model.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{ColumnarNetwork, TaskId};
use crate::scalar::Scalar;
use crate::tasks::Dataset;

/// Multi-head accuracy of a task's own head on a dataset.
pub fn accuracy(net: &ColumnarNetwork<f64>, task: TaskId, ds: &Dataset) -> Result<f64> {
    let logits = net.logits(&ds.x, task)?;
    let mut correct = 0usize;
    for (i, &label) in ds.y.iter().enumerate() {
        if argmax(logits.row(i)) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Task × checkpoint accuracy record. Row `i` holds the test accuracy of
/// every task seen so far, measured immediately after learning event `i`.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct AccuracyMatrix {
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EventRecord {
    pub label: String,
    /// Task whose learning this event completed, if any.
    pub learned: Option<TaskId>,
    pub accuracies: BTreeMap<TaskId, f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: impl Into<String>, learned: Option<TaskId>, accuracies: BTreeMap<TaskId, f64>) {
        for v in accuracies.values() {
            debug_assert!((0.0..=1.0).contains(v));
        }
        self.events.push(EventRecord {
            label: label.into(),
            learned,
            accuracies,
        });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn entry(&self, event: usize, task: TaskId) -> Option<f64> {
        self.events.get(event)?.accuracies.get(&task).copied()
    }

    /// Last recorded accuracy of a task.
    pub fn final_accuracy(&self, task: TaskId) -> Option<f64> {
        self.events
            .iter()
            .rev()
            .find_map(|e| e.accuracies.get(&task).copied())
    }

    /// Accuracy right after the event that finished learning `task`
    /// (the diagonal entry).
    pub fn after_learning(&self, task: TaskId) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.learned == Some(task))
            .and_then(|e| e.accuracies.get(&task).copied())
    }

    /// Forgetting of one task: historical maximum minus final accuracy,
    /// clamped at zero (a final value above the maximum counts as backward
    /// transfer, not negative forgetting).
    pub fn forgetting(&self, task: TaskId) -> Option<f64> {
        let max = self
            .events
            .iter()
            .filter_map(|e| e.accuracies.get(&task))
            .fold(None, |m: Option<f64>, &v| Some(m.map_or(v, |m| m.max(v))))?;
        let last = self.final_accuracy(task)?;
        Some((max - last).max(0.0))
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut out: Vec<TaskId> = self
            .events
            .iter()
            .flat_map(|e| e.accuracies.keys().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// One row per event, one column per task ever seen; unseen cells are
    /// empty. Deterministic formatting for byte-identical reruns.
    pub fn to_csv(&self) -> String {
        let tasks = self.tasks();
        let mut out = String::from("event,label");
        for t in &tasks {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for (i, e) in self.events.iter().enumerate() {
            out.push_str(&format!("{i},{}", e.label));
            for t in &tasks {
                match e.accuracies.get(t) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Forward/backward transfer per task.
///
/// `forward = R[j][j] − baseline_j` where the baseline is the same task
/// trained in isolation with an identical budget; missing baselines yield
/// `None` (undefined, not zero). `backward = R[last][j] − R[j][j]`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TransferScores {
    pub forward: BTreeMap<TaskId, Option<f64>>,
    pub backward: BTreeMap<TaskId, f64>,
}

pub fn transfer_scores(
    matrix: &AccuracyMatrix,
    baselines: &BTreeMap<TaskId, f64>,
) -> TransferScores {
    let mut forward = BTreeMap::new();
    let mut backward = BTreeMap::new();
    for task in matrix.tasks() {
        let own = matrix.after_learning(task);
        let last = matrix.final_accuracy(task);
        forward.insert(
            task,
            match (own, baselines.get(&task)) {
                (Some(own), Some(base)) => Some(own - base),
                _ => None,
            },
        );
        if let (Some(own), Some(last)) = (own, last) {
            backward.insert(task, last - own);
        }
    }
    TransferScores { forward, backward }
}

/// A class in the union label space used for single-head evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub struct GlobalClass {
    pub task: TaskId,
    pub class: usize,
}

/// Joint confusion matrix over every task's classes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<GlobalClass>,
    /// Row-major counts: `counts[true][predicted]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    fn index_of(&self, g: GlobalClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == g)
    }

    pub fn count(&self, truth: GlobalClass, predicted: GlobalClass) -> u64 {
        match (self.index_of(truth), self.index_of(predicted)) {
            (Some(a), Some(b)) => self.counts[a * self.classes.len() + b],
            _ => 0,
        }
    }

    pub fn row_sum(&self, truth: GlobalClass) -> u64 {
        match self.index_of(truth) {
            Some(a) => {
                let n = self.classes.len();
                self.counts[a * n..(a + 1) * n].iter().sum()
            }
            None => 0,
        }
    }

    /// Fraction of task `a`'s samples predicted into any class of task `b`.
    pub fn block_mass(&self, a: TaskId, b: TaskId) -> f64 {
        let n = self.classes.len();
        let mut total = 0u64;
        let mut into_b = 0u64;
        for (i, ci) in self.classes.iter().enumerate() {
            if ci.task != a {
                continue;
            }
            for (j, cj) in self.classes.iter().enumerate() {
                let c = self.counts[i * n + j];
                total += c;
                if cj.task == b {
                    into_b += c;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            into_b as f64 / total as f64
        }
    }

    /// Largest single off-diagonal cell from task `a` into task `b`,
    /// as a fraction of task `a`'s samples.
    pub fn max_cross_cell(&self, a: TaskId, b: TaskId) -> f64 {
        let n = self.classes.len();
        let mut total = 0u64;
        let mut worst = 0u64;
        for (i, ci) in self.classes.iter().enumerate() {
            if ci.task != a {
                continue;
            }
            for (j, cj) in self.classes.iter().enumerate() {
                let c = self.counts[i * n + j];
                total += c;
                if cj.task == b {
                    worst = worst.max(c);
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            worst as f64 / total as f64
        }
    }

    /// Per-task accuracy recomputed from the joint matrix: diagonal mass of
    /// the task's classes over its row mass.
    pub fn task_accuracy(&self, task: TaskId) -> f64 {
        let n = self.classes.len();
        let mut total = 0u64;
        let mut correct = 0u64;
        for (i, ci) in self.classes.iter().enumerate() {
            if ci.task != task {
                continue;
            }
            for j in 0..n {
                total += self.counts[i * n + j];
            }
            correct += self.counts[i * n + i];
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Score every sample by the maximum logit across the union of all heads'
/// classes, with task identity withheld. Ties break toward the lowest
/// `(task, class)`.
pub fn evaluate_single_head(
    net: &ColumnarNetwork<f64>,
    data: &[(TaskId, &Dataset)],
) -> Result<ConfusionMatrix> {
    let mut classes = Vec::new();
    for head in net.heads() {
        for c in 0..head.classes() {
            classes.push(GlobalClass { task: head.task, class: c });
        }
    }
    if classes.is_empty() {
        return Err(Error::State("no heads to evaluate".into()));
    }
    let n = classes.len();
    let mut counts = vec![0u64; n * n];
    for (task, ds) in data {
        if !net.has_task(*task) {
            return Err(Error::Lookup(format!("unknown task {task}")));
        }
        let per_head = net.all_logits(&ds.x)?;
        for i in 0..ds.len() {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            let mut at = 0usize;
            for (_, logits) in per_head.iter() {
                for j in 0..logits.cols() {
                    let v = logits.get(i, j);
                    if v > best_v {
                        best_v = v;
                        best = at;
                    }
                    at += 1;
                }
            }
            let truth = classes
                .iter()
                .position(|c| c.task == *task && c.class == ds.y[i])
                .ok_or_else(|| {
                    Error::Data(format!("label {} out of range for {task}", ds.y[i]))
                })?;
            counts[truth * n + best] += 1;
        }
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// Single-head per-task accuracies for a batch of datasets, via the joint
/// confusion matrix.
pub fn single_head_accuracies(
    net: &ColumnarNetwork<f64>,
    data: &[(TaskId, &Dataset)],
) -> Result<BTreeMap<TaskId, f64>> {
    let cm = evaluate_single_head(net, data)?;
    Ok(data
        .iter()
        .map(|(t, _)| (*t, cm.task_accuracy(*t)))
        .collect())
}

/// Raw per-sample predictions of one head, for bit-identity style checks.
pub fn head_predictions(
    net: &ColumnarNetwork<f64>,
    task: TaskId,
    x: &Matrix<f64>,
) -> Result<Vec<usize>> {
    let logits = net.logits(x, task)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consolidation::ConsolidationState;
    use crate::expansion::{attach_head, recruit_column, TransferSources};
    use crate::net::{Owner, TaskId};
    use crate::policies::{train_task, TrainOpts};
    use crate::tasks::{gen_task, TaskSpec};

    fn two_orthogonal_tasks() -> (ColumnarNetwork<f64>, Vec<(TaskId, Dataset)>) {
        // The tasks live in orthogonal feature planes; long training gives
        // each head a margin on its own samples that dwarfs the untrained
        // response to the other plane.
        let s0 = TaskSpec::blobs(0, 4, 2, 6.0, 0.3, 1).with_sizes(200, 50, 100);
        let mut s1 = TaskSpec::blobs(1, 4, 2, 6.0, 0.3, 2).with_sizes(200, 50, 100);
        s1.plane = 2;
        let mut net = ColumnarNetwork::new(4, 7);
        let mut cs = ConsolidationState::new();
        let mut data = Vec::new();
        for (i, spec) in [s0, s1].iter().enumerate() {
            let (train, _, test) = gen_task(spec).unwrap();
            recruit_column(&mut net, &mut cs, Owner::Task(TaskId(i as u32)), &[8], &TransferSources::None)
                .unwrap();
            attach_head(&mut net, &mut cs, TaskId(i as u32), 2, i).unwrap();
            train_task(&mut net, &cs, TaskId(i as u32), &train, &TrainOpts { epochs: 400, ..Default::default() })
                .unwrap();
            data.push((TaskId(i as u32), test));
        }
        (net, data)
    }

    #[test]
    fn single_head_equals_multi_head_for_one_task() {
        let spec = TaskSpec::blobs(0, 4, 3, 5.0, 0.4, 3).with_sizes(200, 50, 120);
        let (train, _, test) = gen_task(&spec).unwrap();
        let mut net = ColumnarNetwork::new(4, 9);
        let mut cs = ConsolidationState::new();
        recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &[8], &TransferSources::None).unwrap();
        attach_head(&mut net, &mut cs, TaskId(0), 3, 0).unwrap();
        train_task(&mut net, &cs, TaskId(0), &train, &TrainOpts { epochs: 150, ..Default::default() }).unwrap();
        let multi = accuracy(&net, TaskId(0), &test).unwrap();
        let cm = evaluate_single_head(&net, &[(TaskId(0), &test)]).unwrap();
        assert_eq!(cm.task_accuracy(TaskId(0)), multi);
        // Row sums equal per-class sample counts.
        for c in 0..3 {
            let expected = test.y.iter().filter(|&&y| y == c).count() as u64;
            assert_eq!(cm.row_sum(GlobalClass { task: TaskId(0), class: c }), expected);
        }
    }

    #[test]
    fn orthogonal_tasks_have_zero_cross_confusion() {
        let (net, data) = two_orthogonal_tasks();
        let parts: Vec<(TaskId, &Dataset)> = data.iter().map(|(t, d)| (*t, d)).collect();
        let cm = evaluate_single_head(&net, &parts).unwrap();
        assert_eq!(cm.block_mass(TaskId(0), TaskId(1)), 0.0);
        assert_eq!(cm.block_mass(TaskId(1), TaskId(0)), 0.0);
        assert!(cm.task_accuracy(TaskId(0)) >= 0.95);
    }

    #[test]
    fn accuracy_from_confusion_matches_accuracy_matrix_entry() {
        let (net, data) = two_orthogonal_tasks();
        let parts: Vec<(TaskId, &Dataset)> = data.iter().map(|(t, d)| (*t, d)).collect();
        let cm = evaluate_single_head(&net, &parts).unwrap();
        let mut matrix = AccuracyMatrix::new();
        let accs: std::collections::BTreeMap<TaskId, f64> = parts
            .iter()
            .map(|(t, d)| (*t, cm.task_accuracy(*t)))
            .map(|(t, a)| (t, a))
            .collect();
        let _ = &parts;
        matrix.record("single-head-eval", None, accs.clone());
        for (t, _) in &parts {
            assert_eq!(matrix.entry(0, *t).unwrap(), cm.task_accuracy(*t));
        }
    }

    #[test]
    fn forgetting_arithmetic() {
        let mut m = AccuracyMatrix::new();
        m.record("e1", Some(TaskId(1)), [(TaskId(1), 0.95)].into());
        m.record("e2", Some(TaskId(2)), [(TaskId(1), 0.60), (TaskId(2), 0.9)].into());
        assert!((m.forgetting(TaskId(1)).unwrap() - 0.35).abs() < 1e-12);
        // Constant column forgets nothing.
        assert_eq!(m.forgetting(TaskId(2)).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_clamps_at_zero_when_final_exceeds_max() {
        let mut m = AccuracyMatrix::new();
        m.record("e1", Some(TaskId(1)), [(TaskId(1), 0.7)].into());
        m.record("e2", None, [(TaskId(1), 0.8)].into());
        assert_eq!(m.forgetting(TaskId(1)).unwrap(), 0.0);
    }

    #[test]
    fn transfer_scores_handle_missing_baselines() {
        let mut m = AccuracyMatrix::new();
        m.record("e1", Some(TaskId(1)), [(TaskId(1), 0.9)].into());
        m.record("e2", Some(TaskId(2)), [(TaskId(1), 0.9), (TaskId(2), 0.8)].into());
        m.record("refine", None, [(TaskId(1), 0.95), (TaskId(2), 0.8)].into());
        let baselines = [(TaskId(1), 0.85)].into();
        let scores = transfer_scores(&m, &baselines);
        assert!((scores.forward[&TaskId(1)].unwrap() - 0.05).abs() < 1e-12);
        assert!(scores.forward[&TaskId(2)].is_none());
        assert!((scores.backward[&TaskId(1)] - 0.05).abs() < 1e-12);
        assert_eq!(scores.backward[&TaskId(2)], 0.0);
    }

    #[test]
    fn csv_has_one_row_per_event_and_empty_unseen_cells() {
        let mut m = AccuracyMatrix::new();
        m.record("learn:t1", Some(TaskId(1)), [(TaskId(1), 0.5)].into());
        m.record("learn:t2", Some(TaskId(2)), [(TaskId(1), 0.5), (TaskId(2), 0.25)].into());
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "event,label,t1,t2");
        assert_eq!(lines[1], "0,learn:t1,0.5,");
        assert_eq!(lines[2], "1,learn:t2,0.5,0.25");
    }
}
