//! Cross-entropy loss and exact backpropagation through the columnar DAG.

use std::collections::BTreeMap;

use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

use super::{ColumnarNetwork, ForwardTrace, ParamId, Site, SourceId};

/// Partial derivatives of the data loss, keyed by parameter identity.
/// Every unmasked parameter has exactly one entry (zero when the parameter
/// is on no path to the trained head); masked parameters have none.
#[derive(Debug, Clone, Default)]
pub struct Gradient<F> {
    entries: BTreeMap<ParamId, F>,
}

impl<F: Scalar> Gradient<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn get(&self, pid: ParamId) -> Option<F> {
        self.entries.get(&pid).copied()
    }

    pub fn insert(&mut self, pid: ParamId, v: F) {
        self.entries.insert(pid, v);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &F)> {
        self.entries.iter()
    }

    /// Entry-wise sum; keys form the union.
    pub fn accumulate(&mut self, other: &Gradient<F>) {
        for (pid, v) in &other.entries {
            *self.entries.entry(*pid).or_insert_with(F::zero) += *v;
        }
    }

    /// Add `v` to the entry for `pid` if it exists (masked entries stay absent).
    pub fn nudge(&mut self, pid: ParamId, v: F) {
        if let Some(e) = self.entries.get_mut(&pid) {
            *e += v;
        }
    }

    pub fn scale(&mut self, k: F) {
        for v in self.entries.values_mut() {
            *v = *v * k;
        }
    }
}

/// Mean cross-entropy of `logits` against integer labels. Softmax is applied
/// here (heads are linear), with the usual max-shift for stability.
pub fn task_loss<F: Scalar>(logits: &Matrix<F>, labels: &[usize]) -> Result<F> {
    if logits.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let classes = logits.cols();
    let mut total = F::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - row[label];
    }
    Ok(total / F::from_f64(labels.len() as f64))
}

/// `(softmax(logits) − onehot(labels)) / n`, the logit gradient of [`task_loss`].
pub(crate) fn logit_gradient<F: Scalar>(logits: &Matrix<F>, labels: &[usize]) -> Matrix<F> {
    let n = logits.rows();
    let inv_n = F::one() / F::from_f64(n as f64);
    let mut out = Matrix::zeros(n, logits.cols());
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let y = if j == labels[i] { F::one() } else { F::zero() };
            out.set(i, j, (p - y) * inv_n);
        }
    }
    out
}

/// Exact gradient of the data loss for the head recorded in `trace`.
///
/// Gradient flows through every weight on the input→head path, including
/// transfer links and frozen weights (masking excludes a weight's own entry,
/// not its role in the chain rule). Parameters of other columns and heads
/// receive explicit zeros so the gradient stays total over unmasked
/// parameters.
pub fn backward<F: Scalar>(
    net: &ColumnarNetwork<F>,
    trace: &ForwardTrace<F>,
    labels: &[usize],
    cstate: &ConsolidationState<F>,
) -> Result<Gradient<F>> {
    if trace.version != net.version {
        return Err(Error::State(format!(
            "stale trace: network version {} vs trace version {}",
            net.version, trace.version
        )));
    }
    if trace.logits.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} traced rows vs {} labels",
            trace.logits.rows(),
            labels.len()
        )));
    }
    let head = net.head(trace.head)?;
    let n = trace.logits.rows();

    let dlogits = logit_gradient(&trace.logits, labels);

    // Activation-gradient accumulators for every column layer.
    let mut act_grads: Vec<Vec<Matrix<F>>> = trace
        .acts
        .iter()
        .map(|col| col.iter().map(|a| Matrix::zeros(n, a.cols())).collect())
        .collect();

    // Head of the trained task.
    let head_dw = dlogits.transpose_mul(&trace.head_input);
    let mut head_db = vec![F::zero(); head.classes()];
    for i in 0..n {
        for (j, db) in head_db.iter_mut().enumerate() {
            *db += dlogits.get(i, j);
        }
    }
    let dhead_input = dlogits.mul(&head.layer.weights);
    for (c, l, offset, width) in net.head_segments(head) {
        let seg: Vec<usize> = (offset..offset + width).collect();
        act_grads[c][l].add_assign(&dhead_input.select_cols(&seg));
    }

    // Walk columns last→first, layers top→bottom; by the time a layer is
    // processed every gradient flowing into its activations is accumulated.
    let mut hidden_dw: Vec<Vec<(Matrix<F>, Vec<F>)>> = Vec::with_capacity(net.columns.len());
    let mut transfer_dw: Vec<Vec<Matrix<F>>> = Vec::with_capacity(net.columns.len());
    for col in &net.columns {
        hidden_dw.push(
            col.layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.out_width(), l.in_width()),
                        vec![F::zero(); l.out_width()],
                    )
                })
                .collect(),
        );
        transfer_dw.push(
            col.transfer_in
                .iter()
                .map(|t| Matrix::zeros(t.weights.rows(), t.weights.cols()))
                .collect(),
        );
    }

    for ci in (0..net.columns.len()).rev() {
        let col = &net.columns[ci];
        for li in (0..col.layers.len()).rev() {
            let layer = &col.layers[li];
            let pre = &trace.pres[ci][li];
            let act = &trace.acts[ci][li];
            let mut dz = act_grads[ci][li].clone();
            for r in 0..n {
                let row = dz.row_mut(r);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * layer.activation.derivative(pre.get(r, j), act.get(r, j));
                }
            }
            let prev: &Matrix<F> = if li == 0 { &trace.input } else { &trace.acts[ci][li - 1] };
            let (dw, db) = &mut hidden_dw[ci][li];
            *dw = dz.transpose_mul(prev);
            for i in 0..n {
                for (j, b) in db.iter_mut().enumerate() {
                    *b += dz.get(i, j);
                }
            }
            if li > 0 {
                let back = dz.mul(&layer.weights);
                act_grads[ci][li - 1].add_assign(&back);
            }
            for (ti, link) in col.transfer_in.iter().enumerate() {
                if link.dst_layer != li {
                    continue;
                }
                let src = &trace.acts[link.src_column][link.src_layer];
                transfer_dw[ci][ti] = dz.transpose_mul(src);
                let back = dz.mul(&link.weights);
                act_grads[link.src_column][link.src_layer].add_assign(&back);
            }
        }
    }

    // Emit one entry per unmasked parameter; other heads get explicit zeros.
    let mut grad = Gradient::new();
    for site in net.sites() {
        let row_ids = net.site_row_ids(site);
        let col_ids = net.site_col_ids(site);
        let mut emit = |pid: ParamId, v: F| {
            if !cstate.is_masked(pid) {
                grad.insert(pid, v);
            }
        };
        match site {
            Site::Hidden { column, layer } => {
                let (dw, db) = &hidden_dw[column][layer];
                for (r, &row) in row_ids.iter().enumerate() {
                    for (c, &col) in col_ids.iter().enumerate() {
                        emit(ParamId { site, row, col: SourceId::Node(col) }, dw.get(r, c));
                    }
                    emit(ParamId { site, row, col: SourceId::Bias }, db[r]);
                }
            }
            Site::Transfer { column, link } => {
                let dw = &transfer_dw[column][link];
                for (r, &row) in row_ids.iter().enumerate() {
                    for (c, &col) in col_ids.iter().enumerate() {
                        emit(ParamId { site, row, col: SourceId::Node(col) }, dw.get(r, c));
                    }
                }
            }
            Site::Head { task } => {
                let trained = task == trace.head;
                for (r, &row) in row_ids.iter().enumerate() {
                    for (c, &col) in col_ids.iter().enumerate() {
                        let v = if trained { head_dw.get(r, c) } else { F::zero() };
                        emit(ParamId { site, row, col: SourceId::Node(col) }, v);
                    }
                    let v = if trained { head_db[r] } else { F::zero() };
                    emit(ParamId { site, row, col: SourceId::Bias }, v);
                }
            }
        }
    }
    Ok(grad)
}
