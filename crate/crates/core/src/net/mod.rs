//! Dense columnar network: parameter identity, topology, and the forward pass.
//!
//! The network is organized as an ordered list of columns. Each column is a
//! small dense feed-forward stack reading the shared input; transfer links
//! carry activations from earlier columns into later ones (never backwards),
//! and each task owns an output head. Every scalar weight and bias has a
//! stable [`ParamId`] built from node identities that are never reused, so
//! consolidation state and gradients survive structural edits like pruning.

mod backward;
mod step;
#[cfg(test)]
pub(crate) mod tests;

pub use backward::{backward, task_loss, Gradient};
pub(crate) use backward::logit_gradient;
pub use step::apply_step;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Identity of one task across the whole engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Stable identity of one node (unit). Allocated from a monotone counter and
/// never reused, including after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

/// Which weight matrix (or bias vector) a parameter lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    /// Intra-column dense layer `layer` of column `column`.
    Hidden { column: usize, layer: usize },
    /// Transfer link `link` (index into the column's incoming links).
    Transfer { column: usize, link: usize },
    /// Output head of `task`.
    Head { task: TaskId },
}

/// Column coordinate of a parameter: an incoming node, or the bias slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceId {
    Node(NodeId),
    Bias,
}

/// Identity of one scalar parameter for its entire lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub site: Site,
    pub row: NodeId,
    pub col: SourceId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    z
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed from the pre-activation `z` and activation `a`.
    #[inline]
    pub fn derivative<F: Scalar>(self, z: F, a: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - a * a,
            Activation::Identity => F::one(),
        }
    }
}

/// One dense layer: `weights` is `out×in`, biases one per output node.
#[derive(Debug, Clone)]
pub struct DenseLayer<F> {
    pub weights: Matrix<F>,
    pub biases: Vec<F>,
    pub activation: Activation,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn zeros(out: usize, input: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(out, input),
            biases: vec![F::zero(); out],
            activation,
        }
    }

    /// Glorot-uniform initialization, biases zero.
    pub fn glorot(out: usize, input: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(out, input, activation);
        let limit = (6.0 / (input + out) as f64).sqrt();
        for v in layer.weights.data_mut() {
            *v = F::from_f64(rng.random_range(-limit..limit));
        }
        layer
    }

    pub fn out_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_width(&self) -> usize {
        self.weights.cols()
    }

    /// Affine part only: `input·Wᵀ + b`.
    pub fn affine(&self, input: &Matrix<F>) -> Matrix<F> {
        let mut z = input.mul_transpose(&self.weights);
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, b) in row.iter_mut().zip(&self.biases) {
                *v += *b;
            }
        }
        z
    }
}

/// One-directional link from an earlier column's layer into a later column's
/// layer. Contributes additively to the destination pre-activation.
#[derive(Debug, Clone)]
pub struct TransferLink<F> {
    pub src_column: usize,
    pub src_layer: usize,
    pub dst_layer: usize,
    /// `dst_width × src_width`.
    pub weights: Matrix<F>,
}

/// Column ownership. Shared columns (e.g. units recruited to resolve
/// confusion between tasks) belong to every task in the set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Owner {
    Task(TaskId),
    Shared(BTreeSet<TaskId>),
}

impl Owner {
    pub fn contains(&self, task: TaskId) -> bool {
        match self {
            Owner::Task(t) => *t == task,
            Owner::Shared(set) => set.contains(&task),
        }
    }

    pub fn overlaps(&self, tasks: &BTreeSet<TaskId>) -> bool {
        match self {
            Owner::Task(t) => tasks.contains(t),
            Owner::Shared(set) => set.iter().any(|t| tasks.contains(t)),
        }
    }
}

/// A task's sub-network: dense layers plus incoming transfer links.
#[derive(Debug, Clone)]
pub struct Column<F> {
    pub owner: Owner,
    pub layers: Vec<DenseLayer<F>>,
    /// Stable node ids, one vec per layer, parallel to matrix rows.
    pub node_ids: Vec<Vec<NodeId>>,
    /// Growth stage each node was recruited in (0 = initial).
    pub stage_of: Vec<Vec<u16>>,
    pub transfer_in: Vec<TransferLink<F>>,
    pub stages: u16,
}

impl<F: Scalar> Column<F> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::out_width).collect()
    }

    pub fn top_layer(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Per-task output head. Reads the concatenation of the listed
/// `(column, layer)` activations; the first input is the task's own column
/// top layer, later entries are declared extra inputs (e.g. shared
/// confusion-reduction units).
#[derive(Debug, Clone)]
pub struct Head<F> {
    pub task: TaskId,
    pub own_column: usize,
    pub inputs: Vec<(usize, usize)>,
    pub layer: DenseLayer<F>,
    /// Stable ids for the class outputs, parallel to matrix rows.
    pub class_ids: Vec<NodeId>,
}

impl<F: Scalar> Head<F> {
    pub fn classes(&self) -> usize {
        self.layer.out_width()
    }
}

/// Cached forward pass for one batch. Valid only for the exact parameter
/// values it was computed with (checked through the network version).
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub(crate) version: u64,
    pub(crate) head: TaskId,
    pub(crate) input: Matrix<F>,
    pub(crate) pres: Vec<Vec<Matrix<F>>>,
    pub(crate) acts: Vec<Vec<Matrix<F>>>,
    pub(crate) head_input: Matrix<F>,
    pub(crate) logits: Matrix<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn logits(&self) -> &Matrix<F> {
        &self.logits
    }

    pub fn activations(&self, column: usize, layer: usize) -> &Matrix<F> {
        &self.acts[column][layer]
    }
}

/// The dynamically expanding columnar network.
#[derive(Debug, Clone)]
pub struct ColumnarNetwork<F> {
    pub(crate) input_width: usize,
    pub(crate) input_ids: Vec<NodeId>,
    pub(crate) columns: Vec<Column<F>>,
    pub(crate) heads: BTreeMap<TaskId, Head<F>>,
    pub(crate) next_node: u32,
    pub(crate) version: u64,
    pub(crate) master_seed: u64,
    pub(crate) rng_events: u64,
}

impl<F: Scalar> ColumnarNetwork<F> {
    pub fn new(input_width: usize, master_seed: u64) -> Self {
        assert!(input_width >= 1, "input width must be at least 1");
        let input_ids = (0..input_width as u32).map(NodeId).collect();
        Self {
            input_width,
            input_ids,
            columns: Vec::new(),
            heads: BTreeMap::new(),
            next_node: input_width as u32,
            version: 0,
            master_seed,
            rng_events: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn columns(&self) -> &[Column<F>] {
        &self.columns
    }

    pub fn column(&self, index: usize) -> Result<&Column<F>> {
        self.columns
            .get(index)
            .ok_or_else(|| Error::Lookup(format!("no column {index}")))
    }

    pub fn heads(&self) -> impl Iterator<Item = &Head<F>> {
        self.heads.values()
    }

    pub fn head(&self, task: TaskId) -> Result<&Head<F>> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("no head for {task}")))
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.heads.keys().copied().collect()
    }

    /// The column recruited for `task` (its primary column).
    pub fn column_of(&self, task: TaskId) -> Result<usize> {
        self.heads
            .get(&task)
            .map(|h| h.own_column)
            .or_else(|| {
                self.columns
                    .iter()
                    .position(|c| matches!(c.owner, Owner::Task(t) if t == task))
            })
            .ok_or_else(|| Error::Lookup(format!("unknown task {task}")))
    }

    pub(crate) fn alloc_node(&mut self) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        id
    }

    pub(crate) fn alloc_nodes(&mut self, n: usize) -> Vec<NodeId> {
        (0..n).map(|_| self.alloc_node()).collect()
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Deterministic RNG for the next structural event.
    pub(crate) fn next_rng(&mut self) -> ChaCha8Rng {
        let seed = crate::seed::derive(self.master_seed, self.rng_events.wrapping_add(1));
        self.rng_events += 1;
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Activations (and pre-activations) of every column layer on `batch`.
    pub fn column_activations(
        &self,
        batch: &Matrix<F>,
    ) -> Result<(Vec<Vec<Matrix<F>>>, Vec<Vec<Matrix<F>>>)> {
        if batch.cols() != self.input_width {
            return Err(Error::Topology(format!(
                "batch width {} does not match input width {}",
                batch.cols(),
                self.input_width
            )));
        }
        let mut pres: Vec<Vec<Matrix<F>>> = Vec::with_capacity(self.columns.len());
        let mut acts: Vec<Vec<Matrix<F>>> = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let mut col_pres = Vec::with_capacity(col.layers.len());
            let mut col_acts: Vec<Matrix<F>> = Vec::with_capacity(col.layers.len());
            for (li, layer) in col.layers.iter().enumerate() {
                let prev = if li == 0 { batch } else { &col_acts[li - 1] };
                let mut z = layer.affine(prev);
                for link in col.transfer_in.iter().filter(|l| l.dst_layer == li) {
                    let src = &acts[link.src_column][link.src_layer];
                    z.add_assign(&src.mul_transpose(&link.weights));
                }
                let mut a = z.clone();
                for v in a.data_mut() {
                    *v = layer.activation.apply(*v);
                }
                col_pres.push(z);
                col_acts.push(a);
            }
            pres.push(col_pres);
            acts.push(col_acts);
        }
        Ok((pres, acts))
    }

    fn head_input_from(&self, head: &Head<F>, acts: &[Vec<Matrix<F>>]) -> Matrix<F> {
        let parts: Vec<&Matrix<F>> = head
            .inputs
            .iter()
            .map(|&(c, l)| &acts[c][l])
            .collect();
        Matrix::hcat(&parts)
    }

    /// Full forward pass for one head, returning logits and the trace needed
    /// by [`backward`].
    pub fn forward(&self, batch: &Matrix<F>, head: TaskId) -> Result<(Matrix<F>, ForwardTrace<F>)> {
        let h = self.head(head)?;
        let (pres, acts) = self.column_activations(batch)?;
        let head_input = self.head_input_from(h, &acts);
        let logits = h.layer.affine(&head_input);
        let trace = ForwardTrace {
            version: self.version,
            head,
            input: batch.clone(),
            pres,
            acts,
            head_input,
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Logits only (no trace).
    pub fn logits(&self, batch: &Matrix<F>, head: TaskId) -> Result<Matrix<F>> {
        let h = self.head(head)?;
        let (_, acts) = self.column_activations(batch)?;
        let head_input = self.head_input_from(h, &acts);
        Ok(h.layer.affine(&head_input))
    }

    /// Logits for every head, computing the columns once.
    pub fn all_logits(&self, batch: &Matrix<F>) -> Result<BTreeMap<TaskId, Matrix<F>>> {
        let (_, acts) = self.column_activations(batch)?;
        let mut out = BTreeMap::new();
        for (task, h) in &self.heads {
            let head_input = self.head_input_from(h, &acts);
            out.insert(*task, h.layer.affine(&head_input));
        }
        Ok(out)
    }

    /// Column offsets of each head-input segment: `(column, layer, offset, width)`.
    pub fn head_segments(&self, head: &Head<F>) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(head.inputs.len());
        let mut at = 0;
        for &(c, l) in &head.inputs {
            let w = self.columns[c].layers[l].out_width();
            out.push((c, l, at, w));
            at += w;
        }
        out
    }

    /// Node ids feeding a site's columns, in matrix column order.
    pub(crate) fn site_col_ids(&self, site: Site) -> Vec<NodeId> {
        match site {
            Site::Hidden { column, layer } => {
                if layer == 0 {
                    self.input_ids.clone()
                } else {
                    self.columns[column].node_ids[layer - 1].clone()
                }
            }
            Site::Transfer { column, link } => {
                let l = &self.columns[column].transfer_in[link];
                self.columns[l.src_column].node_ids[l.src_layer].clone()
            }
            Site::Head { task } => {
                let h = &self.heads[&task];
                let mut ids = Vec::new();
                for &(c, l) in &h.inputs {
                    ids.extend_from_slice(&self.columns[c].node_ids[l]);
                }
                ids
            }
        }
    }

    /// Node ids of a site's rows.
    pub(crate) fn site_row_ids(&self, site: Site) -> Vec<NodeId> {
        match site {
            Site::Hidden { column, layer } => self.columns[column].node_ids[layer].clone(),
            Site::Transfer { column, link } => {
                let l = &self.columns[column].transfer_in[link];
                self.columns[column].node_ids[l.dst_layer].clone()
            }
            Site::Head { task } => self.heads[&task].class_ids.clone(),
        }
    }

    /// Every weight-matrix site in deterministic order.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::new();
        for (ci, col) in self.columns.iter().enumerate() {
            for li in 0..col.layers.len() {
                out.push(Site::Hidden { column: ci, layer: li });
            }
            for ti in 0..col.transfer_in.len() {
                out.push(Site::Transfer { column: ci, link: ti });
            }
        }
        for task in self.heads.keys() {
            out.push(Site::Head { task: *task });
        }
        out
    }

    fn site_matrix(&self, site: Site) -> &Matrix<F> {
        match site {
            Site::Hidden { column, layer } => &self.columns[column].layers[layer].weights,
            Site::Transfer { column, link } => &self.columns[column].transfer_in[link].weights,
            Site::Head { task } => &self.heads[&task].layer.weights,
        }
    }

    fn site_biases(&self, site: Site) -> Option<&[F]> {
        match site {
            Site::Hidden { column, layer } => Some(&self.columns[column].layers[layer].biases),
            Site::Transfer { .. } => None,
            Site::Head { task } => Some(&self.heads[&task].layer.biases),
        }
    }

    /// Visit every live parameter with its id. Iteration order is the site
    /// order from [`sites`], rows outer, matrix columns then bias inner.
    pub fn for_each_param(&self, mut f: impl FnMut(ParamId, F)) {
        for site in self.sites() {
            let row_ids = self.site_row_ids(site);
            let col_ids = self.site_col_ids(site);
            let m = self.site_matrix(site);
            let biases = self.site_biases(site);
            for (r, &row) in row_ids.iter().enumerate() {
                for (c, &col) in col_ids.iter().enumerate() {
                    f(
                        ParamId { site, row, col: SourceId::Node(col) },
                        m.get(r, c),
                    );
                }
                if let Some(b) = biases {
                    f(ParamId { site, row, col: SourceId::Bias }, b[r]);
                }
            }
        }
    }

    /// Mutable variant of [`for_each_param`]. Bumps the network version.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamId, &mut F)) {
        self.bump_version();
        for site in self.sites() {
            let row_ids = self.site_row_ids(site);
            let col_ids = self.site_col_ids(site);
            match site {
                Site::Hidden { column, layer } => {
                    let l = &mut self.columns[column].layers[layer];
                    Self::visit_layer_mut(site, &row_ids, &col_ids, l, &mut f);
                }
                Site::Transfer { column, link } => {
                    let m = &mut self.columns[column].transfer_in[link].weights;
                    for (r, &row) in row_ids.iter().enumerate() {
                        for (c, &col) in col_ids.iter().enumerate() {
                            f(
                                ParamId { site, row, col: SourceId::Node(col) },
                                &mut m.data_mut()[r * col_ids.len() + c],
                            );
                        }
                    }
                }
                Site::Head { task } => {
                    let l = &mut self.heads.get_mut(&task).unwrap().layer;
                    Self::visit_layer_mut(site, &row_ids, &col_ids, l, &mut f);
                }
            }
        }
    }

    fn visit_layer_mut(
        site: Site,
        row_ids: &[NodeId],
        col_ids: &[NodeId],
        layer: &mut DenseLayer<F>,
        f: &mut impl FnMut(ParamId, &mut F),
    ) {
        let cols = col_ids.len();
        for (r, &row) in row_ids.iter().enumerate() {
            for (c, &col) in col_ids.iter().enumerate() {
                f(
                    ParamId { site, row, col: SourceId::Node(col) },
                    &mut layer.weights.data_mut()[r * cols + c],
                );
            }
            f(
                ParamId { site, row, col: SourceId::Bias },
                &mut layer.biases[r],
            );
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _| n += 1);
        n
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.for_each_param(|pid, _| out.push(pid));
        out
    }

    /// Value of one parameter, or `None` if the id is stale.
    pub fn param(&self, pid: ParamId) -> Option<F> {
        let row_ids = self.site_row_ids_checked(pid.site)?;
        let r = row_ids.iter().position(|&id| id == pid.row)?;
        match pid.col {
            SourceId::Bias => self.site_biases(pid.site).map(|b| b[r]),
            SourceId::Node(col) => {
                let col_ids = self.site_col_ids(pid.site);
                let c = col_ids.iter().position(|&id| id == col)?;
                Some(self.site_matrix(pid.site).get(r, c))
            }
        }
    }

    /// Overwrite one parameter. Intended for tests and finite-difference
    /// probes; bumps the version.
    pub fn set_param(&mut self, pid: ParamId, value: F) -> Result<()> {
        let mut found = false;
        self.for_each_param_mut(|id, v| {
            if id == pid {
                *v = value;
                found = true;
            }
        });
        if found {
            Ok(())
        } else {
            Err(Error::Lookup(format!("no parameter {pid:?}")))
        }
    }

    fn site_row_ids_checked(&self, site: Site) -> Option<Vec<NodeId>> {
        match site {
            Site::Hidden { column, layer } => {
                self.columns.get(column)?.node_ids.get(layer).cloned()
            }
            Site::Transfer { column, link } => {
                let col = self.columns.get(column)?;
                let l = col.transfer_in.get(link)?;
                col.node_ids.get(l.dst_layer).cloned()
            }
            Site::Head { task } => self.heads.get(&task).map(|h| h.class_ids.clone()),
        }
    }

    /// Structural sanity: transfer links only flow forward, widths are
    /// positive, head inputs exist. Called after every mutation.
    pub fn assert_dag(&self) {
        for (ci, col) in self.columns.iter().enumerate() {
            assert!(!col.layers.is_empty(), "column {ci} has no layers");
            for (li, layer) in col.layers.iter().enumerate() {
                assert!(layer.out_width() >= 1, "column {ci} layer {li} is empty");
                assert_eq!(
                    layer.out_width(),
                    col.node_ids[li].len(),
                    "node id list out of sync at column {ci} layer {li}"
                );
                let expect_in = if li == 0 {
                    self.input_width
                } else {
                    col.layers[li - 1].out_width()
                };
                assert_eq!(layer.in_width(), expect_in, "width mismatch at column {ci} layer {li}");
            }
            for link in &col.transfer_in {
                assert!(link.src_column < ci, "transfer link into column {ci} flows backwards");
                assert_eq!(
                    link.weights.rows(),
                    col.layers[link.dst_layer].out_width(),
                    "transfer link row mismatch"
                );
                assert_eq!(
                    link.weights.cols(),
                    self.columns[link.src_column].layers[link.src_layer].out_width(),
                    "transfer link col mismatch"
                );
            }
        }
        for h in self.heads.values() {
            let in_width: usize = h
                .inputs
                .iter()
                .map(|&(c, l)| self.columns[c].layers[l].out_width())
                .sum();
            assert_eq!(h.layer.in_width(), in_width, "head {} input mismatch", h.task);
        }
    }
}
