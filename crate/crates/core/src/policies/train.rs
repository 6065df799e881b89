//! Training loops over the consolidated loss.
//!
//! Plain SGD with a fixed learning rate; optional classical momentum
//! (off by default) accumulates the data-loss gradient while the
//! consolidation pull is applied directly each step. Batches are taken in
//! data order (no shuffling), so a run is a pure function of seed, config,
//! and data order.

use std::collections::BTreeMap;

use crate::consolidation::ConsolidationState;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::metrics;
use crate::net::{
    apply_step, backward, logit_gradient, task_loss, ColumnarNetwork, DenseLayer, Gradient,
    Site, SourceId, TaskId,
};
use crate::tasks::Dataset;

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub lr: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub momentum: f64,
    /// Stop once training accuracy reaches this level (checked per epoch).
    pub early_stop_acc: Option<f64>,
    /// Rescale the data gradient when its global L2 norm exceeds this;
    /// keeps narrow columns fed by wide transfer links from diverging.
    pub grad_clip: Option<f64>,
    /// Group-lasso pressure on a column's incoming node weights
    /// (graceful forgetting).
    pub sparsity: Option<SparsityOpts>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 100,
            batch_size: None,
            momentum: 0.0,
            early_stop_acc: None,
            grad_clip: None,
            sparsity: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SparsityOpts {
    pub lambda: f64,
    pub column: usize,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TrainLog {
    pub epochs_run: usize,
    /// Mean data loss per epoch (before that epoch's updates).
    pub losses: Vec<f64>,
}

/// Train one task on its own data, minimizing the consolidated loss.
pub fn train_task(
    net: &mut ColumnarNetwork<f64>,
    cstate: &ConsolidationState<f64>,
    task: TaskId,
    ds: &Dataset,
    opts: &TrainOpts,
) -> Result<TrainLog> {
    let n = ds.len();
    let batch = opts.batch_size.unwrap_or(n).max(1);
    let mut log = TrainLog::default();
    let mut velocity: Option<Gradient<f64>> = None;
    for _ in 0..opts.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let bx = ds.x.select_rows(&idx);
            let by = &ds.y[start..end];
            let (logits, trace) = net.forward(&bx, task)?;
            loss_sum += task_loss(&logits, by)?;
            batches += 1.0;
            let mut grad = backward(net, &trace, by, cstate)?;
            if let Some(c) = opts.grad_clip {
                clip_gradient(&mut grad, c);
            }
            if let Some(sp) = &opts.sparsity {
                add_group_sparsity(net, &mut grad, sp);
            }
            if opts.momentum > 0.0 {
                let v = velocity.get_or_insert_with(Gradient::new);
                v.scale(opts.momentum);
                v.accumulate(&grad);
                grad = v.clone();
            }
            apply_step(net, &grad, cstate, opts.lr)?;
            start = end;
        }
        log.losses.push(loss_sum / batches);
        log.epochs_run += 1;
        if let Some(target) = opts.early_stop_acc {
            if metrics::accuracy(net, task, ds)? >= target {
                break;
            }
        }
    }
    Ok(log)
}

/// One full-batch step on the summed multi-head loss over all parts:
/// ordinary batch multi-task learning, one epoch. Returns the summed data
/// loss before the step.
pub fn joint_epoch(
    net: &mut ColumnarNetwork<f64>,
    cstate: &ConsolidationState<f64>,
    parts: &[(TaskId, &Dataset)],
    lr: f64,
) -> Result<f64> {
    let mut total = Gradient::new();
    let mut loss_sum = 0.0;
    for (task, ds) in parts {
        let (logits, trace) = net.forward(&ds.x, *task)?;
        loss_sum += task_loss(&logits, &ds.y)?;
        total.accumulate(&backward(net, &trace, &ds.y, cstate)?);
    }
    apply_step(net, &total, cstate, lr)?;
    Ok(loss_sum)
}

/// Group-lasso pull `λ·θ/‖row‖₂` on the incoming weights of every node in
/// one column, nudging whole nodes toward zero so pruning can free them.
fn add_group_sparsity(net: &ColumnarNetwork<f64>, grad: &mut Gradient<f64>, sp: &SparsityOpts) {
    let mut norms: BTreeMap<(Site, crate::net::NodeId), f64> = BTreeMap::new();
    net.for_each_param(|pid, theta| {
        if let (Site::Hidden { column, .. }, SourceId::Node(_)) = (pid.site, pid.col) {
            if column == sp.column {
                *norms.entry((pid.site, pid.row)).or_insert(0.0) += theta * theta;
            }
        }
    });
    for v in norms.values_mut() {
        *v = v.sqrt();
    }
    net.for_each_param(|pid, theta| {
        if let (Site::Hidden { column, .. }, SourceId::Node(_)) = (pid.site, pid.col) {
            if column == sp.column {
                let norm = norms[&(pid.site, pid.row)];
                if norm > 1e-12 {
                    grad.nudge(pid, sp.lambda * theta / norm);
                }
            }
        }
    });
}

/// Plain SGD on a standalone linear head over fixed feature activations.
/// Shared by the similarity probe and the frozen-random-network mode, where
/// rehearsal stores activation vectors; training from cached activations is
/// bit-identical to recomputing them through the frozen network.
pub fn train_linear_head(
    layer: &mut DenseLayer<f64>,
    acts: &Matrix<f64>,
    labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let logits = layer.affine(acts);
        losses.push(task_loss(&logits, labels)?);
        let dlogits = logit_gradient(&logits, labels);
        let dw = dlogits.transpose_mul(acts);
        for r in 0..layer.weights.rows() {
            for c in 0..layer.weights.cols() {
                let v = layer.weights.get(r, c) - lr * dw.get(r, c);
                layer.weights.set(r, c, v);
            }
            let mut db = 0.0;
            for i in 0..labels.len() {
                db += dlogits.get(i, r);
            }
            layer.biases[r] -= lr * db;
        }
    }
    Ok(losses)
}

/// Predicted class indices of a standalone head on activations.
pub fn head_argmax(layer: &DenseLayer<f64>, acts: &Matrix<f64>) -> Vec<usize> {
    let logits = layer.affine(acts);
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Convenience: accuracy of a standalone head on activations.
pub fn head_accuracy(layer: &DenseLayer<f64>, acts: &Matrix<f64>, labels: &[usize]) -> f64 {
    let preds = head_argmax(layer, acts);
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

/// Proportion of `ds` the head currently misclassifies, as indices.
pub fn misclassified_indices(
    net: &ColumnarNetwork<f64>,
    task: TaskId,
    ds: &Dataset,
) -> Result<Vec<usize>> {
    let preds = metrics::head_predictions(net, task, &ds.x)?;
    Ok((0..ds.len()).filter(|&i| preds[i] != ds.y[i]).collect())
}

/// One staged-growth cycle: expand the task's column, train the fresh stage
/// on the still-misclassified residual, then recalibrate the head over all
/// features on the full training set (the column stays frozen, so the
/// recalibration is a convex head-only pass on the task's own data).
/// Returns the training accuracy after the cycle.
pub fn stage_cycle(
    net: &mut ColumnarNetwork<f64>,
    cstate: &mut ConsolidationState<f64>,
    task: TaskId,
    train: &Dataset,
    stage_width: usize,
    max_width: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    use crate::consolidation::{ConsolidationValue, ParamSelector, TargetMode};

    let residual = misclassified_indices(net, task, train)?;
    crate::expansion::staged_expand(net, cstate, task, residual.len(), stage_width, max_width)?;
    let res_ds = train.subset(&residual);
    let opts = TrainOpts { lr, epochs, ..Default::default() };
    train_task(net, cstate, task, &res_ds, &opts)?;

    let mut head_only = cstate.clone();
    head_only.set(net, &ParamSelector::all(), ConsolidationValue::Mask, TargetMode::Snapshot);
    head_only.set(
        net,
        &ParamSelector::head_of(task),
        ConsolidationValue::Finite(0.0),
        TargetMode::Snapshot,
    );
    train_task(net, &head_only, task, train, &opts)?;
    metrics::accuracy(net, task, train)
}
