//! Dynamic architecture: recruiting columns, staged growth, node pruning.
//!
//! Structural edits never disturb what the network already computes: new
//! transfer links and new head columns start at zero, new nodes never feed
//! old nodes, and pruning only deletes weights. Previously learned heads
//! therefore produce bit-identical logits across every edit here.

use std::collections::{BTreeMap, BTreeSet};

use crate::consolidation::{ConsolidationState, ConsolidationValue, Entry, TargetMode};
use rand::Rng;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{
    Activation, ColumnarNetwork, Column, DenseLayer, Head, NodeId, Owner, ParamId, Site, SourceId,
    TaskId, TransferLink,
};
use crate::scalar::Scalar;

/// Which earlier columns feed a newly recruited column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferSources {
    None,
    All,
    Columns(Vec<usize>),
}

impl TransferSources {
    fn resolve(&self, existing: usize) -> Result<Vec<usize>> {
        match self {
            TransferSources::None => Ok(Vec::new()),
            TransferSources::All => Ok((0..existing).collect()),
            TransferSources::Columns(cols) => {
                for &c in cols {
                    if c >= existing {
                        return Err(Error::Lookup(format!("no column {c} to transfer from")));
                    }
                }
                Ok(cols.clone())
            }
        }
    }
}

/// Append a fresh column. Intra-column weights are randomly initialized and
/// unfrozen (`b = 0`); transfer links from the selected source columns are
/// created at zero (their initial values belong to the forward-transfer
/// policy). Pre-existing parameters are untouched.
///
/// Links pair layer `ℓ` of the source with layer `ℓ` of the new column, up
/// to the shallower of the two depths.
pub fn recruit_column<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    owner: Owner,
    widths: &[usize],
    sources: &TransferSources,
) -> Result<usize> {
    if widths.is_empty() {
        return Err(Error::Config("column depth must be at least 1".into()));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("layer widths must be at least 1".into()));
    }
    let srcs = sources.resolve(net.columns().len())?;

    let mut rng = net.next_rng();
    let mut layers = Vec::with_capacity(widths.len());
    let mut node_ids = Vec::with_capacity(widths.len());
    let mut stage_of = Vec::with_capacity(widths.len());
    for (li, &w) in widths.iter().enumerate() {
        let in_width = if li == 0 { net.input_width() } else { widths[li - 1] };
        layers.push(DenseLayer::glorot(w, in_width, Activation::Relu, &mut rng));
        node_ids.push(net.alloc_nodes(w));
        stage_of.push(vec![0u16; w]);
    }

    let mut transfer_in = Vec::new();
    for &sc in &srcs {
        let src_depth = net.columns()[sc].depth();
        for l in 0..src_depth.min(widths.len()) {
            let src_width = net.columns()[sc].layers[l].out_width();
            transfer_in.push(TransferLink {
                src_column: sc,
                src_layer: l,
                dst_layer: l,
                weights: Matrix::zeros(widths[l], src_width),
            });
        }
    }

    net.columns.push(Column {
        owner,
        layers,
        node_ids,
        stage_of,
        transfer_in,
        stages: 0,
    });
    net.bump_version();
    net.assert_dag();
    cstate.sync(net);
    Ok(net.columns().len() - 1)
}

/// Attach the output head for `task`, reading the top layer of `column`.
/// If the column is shared, the task joins its owner set.
pub fn attach_head<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    task: TaskId,
    classes: usize,
    column: usize,
) -> Result<()> {
    if net.has_task(task) {
        return Err(Error::State(format!("{task} already has a head")));
    }
    if classes < 2 {
        return Err(Error::Config("a head needs at least 2 classes".into()));
    }
    let top = net.column(column)?.top_layer();
    let in_width = net.column(column)?.layers[top].out_width();
    let mut rng = net.next_rng();
    let layer = DenseLayer::glorot(classes, in_width, Activation::Identity, &mut rng);
    let class_ids = net.alloc_nodes(classes);
    if let Owner::Shared(set) = &mut net.columns[column].owner {
        set.insert(task);
    }
    net.heads.insert(
        task,
        Head {
            task,
            own_column: column,
            inputs: vec![(column, top)],
            layer,
            class_ids,
        },
    );
    net.bump_version();
    net.assert_dag();
    cstate.sync(net);
    Ok(())
}

/// Give an existing head an extra input segment, initialized to zero so its
/// logits are unchanged. Used when shared units are recruited to resolve
/// confusion between tasks.
pub fn extend_head_input<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    task: TaskId,
    source: (usize, usize),
) -> Result<()> {
    let (sc, sl) = source;
    let src_width = {
        let col = net.column(sc)?;
        col.layers
            .get(sl)
            .ok_or_else(|| Error::Lookup(format!("column {sc} has no layer {sl}")))?
            .out_width()
    };
    let head = net
        .heads
        .get_mut(&task)
        .ok_or_else(|| Error::Lookup(format!("no head for {task}")))?;
    if head.inputs.contains(&source) {
        return Err(Error::State(format!("{task} already reads {source:?}")));
    }
    let old = head.layer.weights.clone();
    head.layer.weights = old.grown(old.rows(), old.cols() + src_width, F::zero());
    head.inputs.push(source);
    net.bump_version();
    net.assert_dag();
    cstate.sync(net);
    Ok(())
}

/// Grow the task's column by `stage_width` nodes per hidden layer for one
/// more training stage on the still-unlearned residual.
///
/// Earlier-stage weights of the column (and the task's current head weights)
/// are masked; the new nodes read the full previous layer with fresh random
/// weights at `b = 0`, and feed the head through new zero columns. Old nodes
/// never read new nodes, so every head's logits are unchanged until the
/// residual training runs.
pub fn staged_expand<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    task: TaskId,
    residual_samples: usize,
    stage_width: usize,
    max_width: usize,
) -> Result<()> {
    if residual_samples == 0 {
        return Err(Error::Data("empty residual: nothing left to learn".into()));
    }
    if stage_width == 0 {
        return Err(Error::Config("stage width must be at least 1".into()));
    }
    let ci = net.column_of(task)?;
    for layer in &net.columns()[ci].layers {
        if layer.out_width() + stage_width > max_width {
            return Err(Error::Capacity(format!(
                "stage would grow a layer of column {ci} past the width limit {max_width}"
            )));
        }
    }

    let stage = net.columns()[ci].stages + 1;
    let depth = net.columns()[ci].depth();
    let mut rng = net.next_rng();
    let mut new_nodes: BTreeSet<NodeId> = BTreeSet::new();

    // Grow each layer: old block intact, old-row×new-col zero (structural),
    // new rows randomly initialized over the full widened previous layer.
    for li in 0..depth {
        let ids = net.alloc_nodes(stage_width);
        new_nodes.extend(ids.iter().copied());
        let col = &mut net.columns[ci];
        let layer = &mut col.layers[li];
        let old_out = layer.out_width();
        let old_in = layer.in_width();
        let new_in = if li == 0 { old_in } else { old_in + stage_width };
        let mut w = layer.weights.grown(old_out + stage_width, new_in, F::zero());
        let limit = (6.0 / (new_in + old_out + stage_width) as f64).sqrt();
        for r in old_out..old_out + stage_width {
            for v in w.row_mut(r) {
                *v = F::from_f64(rng.random_range(-limit..limit));
            }
        }
        layer.weights = w;
        layer.biases.extend(std::iter::repeat(F::zero()).take(stage_width));
        col.node_ids[li].extend(ids);
        col.stage_of[li].extend(std::iter::repeat(stage).take(stage_width));
        for link in &mut col.transfer_in {
            if link.dst_layer == li {
                link.weights = link
                    .weights
                    .grown(link.weights.rows() + stage_width, link.weights.cols(), F::zero());
            }
        }
    }
    net.columns[ci].stages = stage;

    // Later columns reading this one see wider sources; new columns are zero.
    let grown_widths: Vec<usize> = net.columns[ci].widths();
    for later in ci + 1..net.columns.len() {
        for link in &mut net.columns[later].transfer_in {
            if link.src_column == ci {
                link.weights = link
                    .weights
                    .grown(link.weights.rows(), grown_widths[link.src_layer], F::zero());
            }
        }
    }

    // Heads reading any layer of this column gain zero columns, inserted at
    // the end of the affected segment.
    let heads: Vec<TaskId> = net.heads.keys().copied().collect();
    for t in heads {
        let segments: Vec<(usize, usize)> = net.heads[&t].inputs.clone();
        if !segments.iter().any(|&(c, _)| c == ci) {
            continue;
        }
        let h = &net.heads[&t];
        let rows = h.layer.out_width();
        let old_w = h.layer.weights.clone();
        // Old per-segment widths: this column's segments grew by stage_width.
        let mut new_cols = 0;
        let seg_widths: Vec<(usize, usize)> = segments
            .iter()
            .map(|&(c, l)| {
                let now = net.columns[c].layers[l].out_width();
                if c == ci {
                    new_cols += stage_width;
                    (now - stage_width, now)
                } else {
                    (now, now)
                }
            })
            .collect();
        let mut w = Matrix::zeros(rows, old_w.cols() + new_cols);
        for r in 0..rows {
            let (mut from, mut to) = (0, 0);
            for &(old_width, new_width) in &seg_widths {
                for k in 0..old_width {
                    w.set(r, to + k, old_w.get(r, from + k));
                }
                from += old_width;
                to += new_width;
            }
        }
        net.heads.get_mut(&t).unwrap().layer.weights = w;
    }

    net.bump_version();
    net.assert_dag();
    cstate.sync(net);

    // Consolidation: freeze the earlier stages, open the new ones.
    let own_head = task;
    let mut edits: Vec<(ParamId, Entry<F>)> = Vec::new();
    net.for_each_param(|pid, theta| {
        let masked = Entry { value: ConsolidationValue::Mask, target: theta };
        let open = Entry { value: ConsolidationValue::Finite(F::zero()), target: theta };
        match pid.site {
            Site::Hidden { column, .. } | Site::Transfer { column, .. } if column == ci => {
                if new_nodes.contains(&pid.row) {
                    edits.push((pid, open));
                } else {
                    edits.push((pid, masked));
                }
            }
            Site::Head { task: t } if t == own_head => {
                let is_new = matches!(pid.col, SourceId::Node(n) if new_nodes.contains(&n));
                edits.push((pid, if is_new { open } else { masked }));
            }
            _ => {
                // New columns of later links / other heads inherit the
                // freezing of their site.
                if let SourceId::Node(n) = pid.col {
                    if new_nodes.contains(&n) {
                        let frozen = site_is_masked(cstate, net, pid.site);
                        edits.push((pid, if frozen { masked } else { open }));
                    }
                }
            }
        }
    });
    for (pid, entry) in edits {
        cstate.put(pid, entry);
    }
    Ok(())
}

fn site_is_masked<F: Scalar>(
    cstate: &ConsolidationState<F>,
    net: &ColumnarNetwork<F>,
    site: Site,
) -> bool {
    let mut masked = false;
    let mut seen = false;
    net.for_each_param(|pid, _| {
        if !seen && pid.site == site {
            seen = true;
            masked = cstate.is_masked(pid);
        }
    });
    masked
}

/// Per-node importance for one task's column.
#[derive(Debug, Clone, Default)]
pub struct NodeImportance {
    /// `(column, layer, node) → score`.
    pub scores: BTreeMap<(usize, usize, NodeId), f64>,
}

impl NodeImportance {
    pub fn score(&self, column: usize, layer: usize, node: NodeId) -> Option<f64> {
        self.scores.get(&(column, layer, node)).copied()
    }
}

/// Importance of every node in the task's column on `data`:
/// mean absolute activation times the L1 norm of outgoing weights
/// (next layer, outgoing transfer links, and head columns reading the node).
/// Deterministic for a fixed data order.
pub fn compute_importance<F: Scalar>(
    net: &ColumnarNetwork<F>,
    task: TaskId,
    data: &Matrix<F>,
) -> Result<NodeImportance> {
    if data.rows() == 0 {
        return Err(Error::Data("importance needs at least one sample".into()));
    }
    let ci = net.column_of(task)?;
    let (_, acts) = net.column_activations(data)?;
    let n = data.rows() as f64;
    let mut out = NodeImportance::default();
    let col = &net.columns()[ci];
    for (li, layer) in col.layers.iter().enumerate() {
        for p in 0..layer.out_width() {
            let mut mean_abs = 0.0;
            for r in 0..data.rows() {
                mean_abs += acts[ci][li].get(r, p).abs().to_f64_lossy();
            }
            mean_abs /= n;

            let mut l1 = 0.0;
            if li + 1 < col.layers.len() {
                let next = &col.layers[li + 1].weights;
                for r in 0..next.rows() {
                    l1 += next.get(r, p).abs().to_f64_lossy();
                }
            }
            for later in net.columns().iter().skip(ci + 1) {
                for link in &later.transfer_in {
                    if link.src_column == ci && link.src_layer == li {
                        for r in 0..link.weights.rows() {
                            l1 += link.weights.get(r, p).abs().to_f64_lossy();
                        }
                    }
                }
            }
            for head in net.heads() {
                for (c, l, offset, _) in net.head_segments(head) {
                    if c == ci && l == li {
                        for r in 0..head.layer.weights.rows() {
                            l1 += head.layer.weights.get(r, offset + p).abs().to_f64_lossy();
                        }
                    }
                }
            }
            out.scores.insert((ci, li, col.node_ids[li][p]), mean_abs * l1);
        }
    }
    Ok(out)
}

/// Remove the lowest-importance nodes of the task's column until
/// `keep_fraction` (ceiling, at least one node) remains in each hidden
/// layer. Nodes feeding later columns' transfer links or other tasks' heads
/// through nonzero weights are exempt unless `override_transfer` is set.
/// Returns the number of nodes freed.
pub fn prune_nodes<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    task: TaskId,
    keep_fraction: f64,
    importance: &NodeImportance,
    override_transfer: bool,
) -> Result<usize> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let ci = net.column_of(task)?;
    let depth = net.columns()[ci].depth();

    // Plan every layer before touching anything.
    let mut keep_lists: Vec<Vec<usize>> = Vec::with_capacity(depth);
    let mut freed = 0;
    for li in 0..depth {
        let col = &net.columns()[ci];
        let width = col.layers[li].out_width();
        let keep_n = ((keep_fraction * width as f64).ceil() as usize).clamp(1, width);
        let remove_n = width - keep_n;
        if remove_n == 0 {
            keep_lists.push((0..width).collect());
            continue;
        }
        let mut removable: Vec<(f64, NodeId, usize)> = Vec::new();
        for p in 0..width {
            let id = col.node_ids[li][p];
            if !override_transfer && node_is_consumed(net, task, ci, li, p) {
                continue;
            }
            let score = importance.score(ci, li, id).ok_or_else(|| {
                Error::State(format!("importance does not cover node {id:?} in column {ci}"))
            })?;
            removable.push((score, id, p));
        }
        if removable.len() < remove_n {
            return Err(Error::Constraint(format!(
                "pruning layer {li} of column {ci} to {keep_fraction} would remove \
                 transfer-consumed nodes; pass the override to allow it"
            )));
        }
        removable.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| b.1.cmp(&a.1))
        });
        let removed: BTreeSet<usize> = removable[..remove_n].iter().map(|r| r.2).collect();
        keep_lists.push((0..width).filter(|p| !removed.contains(p)).collect());
        freed += remove_n;
    }
    if freed == 0 {
        return Ok(0);
    }

    // Heads first: their segment offsets depend on pre-prune widths.
    let heads: Vec<TaskId> = net.heads.keys().copied().collect();
    for t in heads {
        let head = &net.heads[&t];
        let segments = net.head_segments(head);
        if !segments.iter().any(|&(c, _, _, _)| c == ci) {
            continue;
        }
        let mut keep_cols = Vec::new();
        for (c, l, offset, width) in segments {
            if c == ci {
                keep_cols.extend(keep_lists[l].iter().map(|&p| offset + p));
            } else {
                keep_cols.extend(offset..offset + width);
            }
        }
        let h = net.heads.get_mut(&t).unwrap();
        h.layer.weights = h.layer.weights.select_cols(&keep_cols);
    }

    // Later columns' links out of this column.
    for later in ci + 1..net.columns.len() {
        for link in &mut net.columns[later].transfer_in {
            if link.src_column == ci {
                link.weights = link.weights.select_cols(&keep_lists[link.src_layer]);
            }
        }
    }

    // The column itself.
    for li in 0..depth {
        let col = &mut net.columns[ci];
        let keep = &keep_lists[li];
        let layer = &mut col.layers[li];
        layer.weights = layer.weights.select_rows(keep);
        if li > 0 {
            layer.weights = layer.weights.select_cols(&keep_lists[li - 1]);
        }
        layer.biases = keep.iter().map(|&p| layer.biases[p]).collect();
        col.node_ids[li] = keep.iter().map(|&p| col.node_ids[li][p]).collect();
        col.stage_of[li] = keep.iter().map(|&p| col.stage_of[li][p]).collect();
        for link in &mut col.transfer_in {
            if link.dst_layer == li {
                link.weights = link.weights.select_rows(keep);
            }
        }
    }

    net.bump_version();
    net.assert_dag();
    cstate.sync(net);
    Ok(freed)
}

/// Does some later column's transfer link or another task's head consume
/// this node through a nonzero weight?
fn node_is_consumed<F: Scalar>(
    net: &ColumnarNetwork<F>,
    task: TaskId,
    ci: usize,
    li: usize,
    p: usize,
) -> bool {
    for later in net.columns().iter().skip(ci + 1) {
        for link in &later.transfer_in {
            if link.src_column == ci && link.src_layer == li {
                for r in 0..link.weights.rows() {
                    if link.weights.get(r, p) != F::zero() {
                        return true;
                    }
                }
            }
        }
    }
    for head in net.heads() {
        if head.task == task {
            continue;
        }
        for (c, l, offset, _) in net.head_segments(head) {
            if c == ci && l == li {
                for r in 0..head.layer.weights.rows() {
                    if head.layer.weights.get(r, offset + p) != F::zero() {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Re-capture snapshot targets for a whole column (used after copying
/// weights during forward transfer).
pub fn snapshot_column<F: Scalar>(
    net: &ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    column: usize,
) {
    let sel = crate::consolidation::ParamSelector::column(column);
    let mut edits = Vec::new();
    net.for_each_param(|pid, theta| {
        if sel.matches(net, pid) {
            if let Some(e) = cstate.entry(pid) {
                edits.push((pid, Entry { value: e.value, target: theta }));
            }
        }
    });
    for (pid, entry) in edits {
        cstate.put(pid, entry);
    }
}

#[cfg(test)]
mod tests;

/// Convenience wrapper matching the policy flow: set consolidation on a
/// transfer link site.
pub fn set_link_consolidation<F: Scalar>(
    net: &ColumnarNetwork<F>,
    cstate: &mut ConsolidationState<F>,
    column: usize,
    link: usize,
    value: ConsolidationValue<F>,
    mode: TargetMode,
) {
    let mut edits = Vec::new();
    net.for_each_param(|pid, theta| {
        if pid.site == (Site::Transfer { column, link }) {
            let target = match mode {
                TargetMode::Snapshot => theta,
                TargetMode::Zero => F::zero(),
            };
            edits.push((pid, Entry { value, target }));
        }
    });
    for (pid, entry) in edits {
        cstate.put(pid, entry);
    }
}
