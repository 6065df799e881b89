//! Per-parameter consolidation: the one mechanism every policy edits.
//!
//! Each live parameter carries a strength `b ≥ 0` and a target value. The
//! training loss adds `Σ b_i (θ_i − θ_i_target)²`, so `b = 0` leaves a weight
//! free, a large `b` freezes it near its target, and [`ConsolidationValue::Mask`]
//! removes it from updates entirely (the limit of arbitrarily large `b`,
//! implemented as exclusion for efficiency).

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::net::{ColumnarNetwork, Gradient, Owner, ParamId, Site, TaskId};
use crate::scalar::Scalar;

/// Consolidation strength of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsolidationValue<F> {
    /// Penalty strength; must be nonnegative.
    Finite(F),
    /// Excluded from updates entirely.
    Mask,
}

/// How the target is captured when a selector is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Re-capture the parameter's current value as its target.
    Snapshot,
    /// Anchor to zero: actively pulls the weight out of use.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry<F> {
    pub value: ConsolidationValue<F>,
    pub target: F,
}

/// Freezing level used by task-granular edits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FreezeLevel<F> {
    HardMask,
    Soft(F),
}

/// Link class of a parameter, for selector predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinkClass {
    Intra,
    Transfer,
    Head,
}

/// Deterministic, side-effect-free predicate over parameter ids.
/// `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct ParamSelector {
    pub columns: Option<BTreeSet<usize>>,
    /// Inclusive layer range; applies to intra-column layers and to the
    /// destination layer of transfer links. Heads are unaffected.
    pub layers: Option<(usize, usize)>,
    pub classes: Option<BTreeSet<LinkClass>>,
    /// Ownership filter: columns whose owner overlaps the set, and heads of
    /// the listed tasks.
    pub tasks: Option<BTreeSet<TaskId>>,
}

impl ParamSelector {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn column(index: usize) -> Self {
        Self {
            columns: Some([index].into()),
            ..Self::default()
        }
    }

    pub fn columns(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            columns: Some(indices.into_iter().collect()),
            ..Self::default()
        }
    }

    pub fn tasks(tasks: impl IntoIterator<Item = TaskId>) -> Self {
        Self {
            tasks: Some(tasks.into_iter().collect()),
            ..Self::default()
        }
    }

    pub fn head_of(task: TaskId) -> Self {
        Self {
            tasks: Some([task].into()),
            classes: Some([LinkClass::Head].into()),
            ..Self::default()
        }
    }

    pub fn with_classes(mut self, classes: impl IntoIterator<Item = LinkClass>) -> Self {
        self.classes = Some(classes.into_iter().collect());
        self
    }

    pub fn with_layers(mut self, lo: usize, hi: usize) -> Self {
        self.layers = Some((lo, hi));
        self
    }

    pub fn matches<F: Scalar>(&self, net: &ColumnarNetwork<F>, pid: ParamId) -> bool {
        let (class, column, layer, head_task) = match pid.site {
            Site::Hidden { column, layer } => (LinkClass::Intra, Some(column), Some(layer), None),
            Site::Transfer { column, link } => {
                let dst = net.columns()[column].transfer_in[link].dst_layer;
                (LinkClass::Transfer, Some(column), Some(dst), None)
            }
            Site::Head { task } => (LinkClass::Head, None, None, Some(task)),
        };
        if let Some(classes) = &self.classes {
            if !classes.contains(&class) {
                return false;
            }
        }
        if let Some(cols) = &self.columns {
            match column {
                Some(c) if cols.contains(&c) => {}
                _ => return false,
            }
        }
        if let Some((lo, hi)) = self.layers {
            match layer {
                Some(l) if l >= lo && l <= hi => {}
                Some(_) => return false,
                None => {} // heads carry no layer
            }
        }
        if let Some(tasks) = &self.tasks {
            let owned = match (column, head_task) {
                (Some(c), _) => net.columns()[c].owner.overlaps(tasks),
                (None, Some(t)) => tasks.contains(&t),
                _ => false,
            };
            if !owned {
                return false;
            }
        }
        true
    }
}

/// Total map from live parameters to their consolidation entries.
#[derive(Debug, Clone, Default)]
pub struct ConsolidationState<F> {
    entries: BTreeMap<ParamId, Entry<F>>,
}

impl<F: Scalar> ConsolidationState<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Fresh state covering every parameter of `net` with `b = 0` and
    /// snapshot targets.
    pub fn unfrozen_for(net: &ColumnarNetwork<F>) -> Self {
        let mut s = Self::new();
        s.sync(net);
        s
    }

    /// Restore totality after structural edits: new parameters get
    /// `Finite(0)` with snapshot targets, entries for deleted parameters are
    /// dropped.
    pub fn sync(&mut self, net: &ColumnarNetwork<F>) {
        let mut live = BTreeSet::new();
        net.for_each_param(|pid, theta| {
            live.insert(pid);
            self.entries.entry(pid).or_insert(Entry {
                value: ConsolidationValue::Finite(F::zero()),
                target: theta,
            });
        });
        self.entries.retain(|pid, _| live.contains(pid));
    }

    pub fn entry(&self, pid: ParamId) -> Option<&Entry<F>> {
        self.entries.get(&pid)
    }

    pub fn is_masked(&self, pid: ParamId) -> bool {
        matches!(
            self.entries.get(&pid),
            Some(Entry { value: ConsolidationValue::Mask, .. })
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Entry<F>)> {
        self.entries.iter()
    }

    /// Direct single-entry edit; prefer [`set`] for policy work.
    pub fn put(&mut self, pid: ParamId, entry: Entry<F>) {
        self.entries.insert(pid, entry);
    }

    /// `Σ b_i (θ_i − θ_i_target)²` over unmasked parameters. Masked entries
    /// contribute nothing: they cannot move, so the pull is moot.
    pub fn penalty(&self, net: &ColumnarNetwork<F>) -> F {
        let mut total = F::zero();
        net.for_each_param(|pid, theta| {
            if let Some(Entry { value: ConsolidationValue::Finite(b), target }) =
                self.entries.get(&pid)
            {
                let d = theta - *target;
                total += *b * d * d;
            }
        });
        total
    }

    /// Analytic gradient of [`penalty`] for one parameter.
    pub fn penalty_gradient(&self, pid: ParamId, theta: F) -> F {
        match self.entries.get(&pid) {
            Some(Entry { value: ConsolidationValue::Finite(b), target }) => {
                F::from_f64(2.0) * *b * (theta - *target)
            }
            _ => F::zero(),
        }
    }

    /// Apply `value` to every parameter matched by `sel`. Snapshot mode
    /// re-captures the current parameter value as the target; zero mode
    /// anchors the target at zero. Returns the number of entries updated.
    pub fn set(
        &mut self,
        net: &ColumnarNetwork<F>,
        sel: &ParamSelector,
        value: ConsolidationValue<F>,
        mode: TargetMode,
    ) -> usize {
        if let ConsolidationValue::Finite(b) = value {
            assert!(b >= F::zero(), "consolidation strength must be nonnegative");
        }
        let mut count = 0;
        net.for_each_param(|pid, theta| {
            if sel.matches(net, pid) {
                let target = match mode {
                    TargetMode::Snapshot => theta,
                    TargetMode::Zero => F::zero(),
                };
                self.entries.insert(pid, Entry { value, target });
                count += 1;
            }
        });
        count
    }

    /// Freeze every parameter owned by the listed tasks: intra-column
    /// weights, incoming transfer links, and heads. Hard freezing masks;
    /// soft freezing sets `Finite(b)` with snapshot targets.
    pub fn freeze_tasks(
        &mut self,
        net: &ColumnarNetwork<F>,
        tasks: &BTreeSet<TaskId>,
        level: FreezeLevel<F>,
    ) -> Result<usize> {
        for t in tasks {
            if !net.has_task(*t) {
                return Err(Error::Lookup(format!("unknown task {t}")));
            }
        }
        if tasks.is_empty() {
            return Ok(0);
        }
        let sel = ParamSelector::tasks(tasks.iter().copied());
        let value = match level {
            FreezeLevel::HardMask => ConsolidationValue::Mask,
            FreezeLevel::Soft(b) => ConsolidationValue::Finite(b),
        };
        Ok(self.set(net, &sel, value, TargetMode::Snapshot))
    }

    /// Set every parameter owned by the listed tasks back to `Finite(0)`.
    pub fn unfreeze_tasks(
        &mut self,
        net: &ColumnarNetwork<F>,
        tasks: &BTreeSet<TaskId>,
    ) -> Result<usize> {
        for t in tasks {
            if !net.has_task(*t) {
                return Err(Error::Lookup(format!("unknown task {t}")));
            }
        }
        if tasks.is_empty() {
            return Ok(0);
        }
        let sel = ParamSelector::tasks(tasks.iter().copied());
        Ok(self.set(net, &sel, ConsolidationValue::Finite(F::zero()), TargetMode::Snapshot))
    }
}

/// Diagonal-Fisher style strengths from squared data gradients: an optional
/// plug-in policy for sizing `b` from a task's rehearsal data instead of a
/// single large constant.
pub fn fisher_strengths<F: Scalar>(grads: &[Gradient<F>]) -> BTreeMap<ParamId, F> {
    let mut acc: BTreeMap<ParamId, F> = BTreeMap::new();
    for g in grads {
        for (pid, v) in g.iter() {
            *acc.entry(*pid).or_insert_with(F::zero) += *v * *v;
        }
    }
    if !grads.is_empty() {
        let n = F::from_f64(grads.len() as f64);
        for v in acc.values_mut() {
            *v = *v / n;
        }
    }
    acc
}

/// Ownership helper: tasks that own column `index` (directly or shared).
pub fn column_tasks<F: Scalar>(net: &ColumnarNetwork<F>, index: usize) -> BTreeSet<TaskId> {
    match &net.columns()[index].owner {
        Owner::Task(t) => [*t].into(),
        Owner::Shared(set) => set.clone(),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::matrix::Matrix;
    use crate::net::tests::{fd_gradient, single_column_net};
    use crate::net::{apply_step, backward, task_loss, Site, SourceId};

    #[test]
    fn penalty_zero_when_b_zero_everywhere() {
        let (net, cs) = single_column_net(2, &[8], 2, 1);
        assert_eq!(cs.penalty(&net), 0.0);
        // Total loss equals the data loss exactly.
        let batch = Matrix::from_rows(&[vec![0.2, -0.4]]);
        let logits = net.logits(&batch, TaskId(0)).unwrap();
        let data = task_loss(&logits, &[1]).unwrap();
        assert_eq!(data + cs.penalty(&net), data);
    }

    #[test]
    fn penalty_single_weight_arithmetic() {
        // b = 2, θ = 1.5, target = 1.0 → 0.5.
        let (mut net, mut cs) = single_column_net(1, &[1], 2, 1);
        let pid = net.all_param_ids()[0];
        net.set_param(pid, 1.5).unwrap();
        cs.sync(&net);
        cs.put(pid, Entry { value: ConsolidationValue::Finite(2.0), target: 1.0 });
        assert!((cs.penalty(&net) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_matches_scalar_loop_oracle() {
        let (net, mut cs) = single_column_net(3, &[8], 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut expected = 0.0;
        let mut edits = Vec::new();
        net.for_each_param(|pid, theta| {
            let b: f64 = rng.random_range(0.0..3.0);
            let target: f64 = rng.random_range(-1.0..1.0);
            expected += b * (theta - target) * (theta - target);
            edits.push((pid, Entry { value: ConsolidationValue::Finite(b), target }));
        });
        for (pid, e) in edits {
            cs.put(pid, e);
        }
        let got = cs.penalty(&net);
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 9);
        let mut edits = Vec::new();
        net.for_each_param(|pid, theta| {
            edits.push((pid, Entry { value: ConsolidationValue::Finite(1.3), target: theta - 0.2 }));
        });
        for (pid, e) in edits {
            cs.put(pid, e);
        }
        for pid in net.all_param_ids().into_iter().step_by(7) {
            let theta = net.param(pid).unwrap();
            let analytic = cs.penalty_gradient(pid, theta);
            let fd = {
                let mut plus = net.clone();
                plus.set_param(pid, theta + 1e-6).unwrap();
                let mut minus = net.clone();
                minus.set_param(pid, theta - 1e-6).unwrap();
                (cs.penalty(&plus) - cs.penalty(&minus)) / 2e-6
            };
            assert!(
                (analytic - fd).abs() <= 1e-6 * analytic.abs().max(1.0),
                "{analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn set_consolidation_snapshot_and_count() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        let sel = ParamSelector::column(0);
        let n = cs.set(&net, &sel, ConsolidationValue::Finite(1e3), TargetMode::Snapshot);
        // 4×2 weights + 4 biases.
        assert_eq!(n, 12);
        net.for_each_param(|pid, theta| {
            if matches!(pid.site, Site::Hidden { .. }) {
                let e = cs.entry(pid).unwrap();
                assert_eq!(e.value, ConsolidationValue::Finite(1e3));
                assert_eq!(e.target, theta);
            }
        });
    }

    #[test]
    fn selector_matching_nothing_is_noop() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        let before: Vec<_> = cs.iter().map(|(p, e)| (*p, *e)).collect();
        let sel = ParamSelector::column(5);
        let n = cs.set(&net, &sel, ConsolidationValue::Mask, TargetMode::Zero);
        assert_eq!(n, 0);
        let after: Vec<_> = cs.iter().map(|(p, e)| (*p, *e)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_target_mode_anchors_at_zero() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        let sel = ParamSelector::column(0).with_classes([LinkClass::Intra]);
        cs.set(&net, &sel, ConsolidationValue::Finite(5.0), TargetMode::Zero);
        net.for_each_param(|pid, _| {
            if matches!(pid.site, Site::Hidden { .. }) {
                assert_eq!(cs.entry(pid).unwrap().target, 0.0);
            }
        });
    }

    #[test]
    fn freeze_unknown_task_is_lookup_error() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        let r = cs.freeze_tasks(&net, &[TaskId(9)].into(), FreezeLevel::HardMask);
        assert!(matches!(r, Err(Error::Lookup(_))));
    }

    #[test]
    fn freeze_empty_set_is_noop() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        assert_eq!(cs.freeze_tasks(&net, &BTreeSet::new(), FreezeLevel::HardMask).unwrap(), 0);
    }

    #[test]
    fn unfreeze_round_trip_restores_b_zero() {
        let (net, mut cs) = single_column_net(2, &[4], 2, 3);
        let tasks: BTreeSet<TaskId> = [TaskId(0)].into();
        cs.freeze_tasks(&net, &tasks, FreezeLevel::Soft(1e3)).unwrap();
        cs.unfreeze_tasks(&net, &tasks).unwrap();
        assert_eq!(cs.penalty(&net), 0.0);
        net.for_each_param(|pid, _| {
            assert_eq!(cs.entry(pid).unwrap().value, ConsolidationValue::Finite(0.0));
        });
    }

    #[test]
    fn mask_excluded_from_gradient_and_never_moves() {
        let (mut net, mut cs) = single_column_net(2, &[6], 2, 12);
        let tasks: BTreeSet<TaskId> = [TaskId(0)].into();
        // Mask the hidden layer, leave the head trainable.
        let sel = ParamSelector::column(0);
        cs.set(&net, &sel, ConsolidationValue::Mask, TargetMode::Snapshot);
        let mut masked_bits = Vec::new();
        net.for_each_param(|pid, v| {
            if cs.is_masked(pid) {
                masked_bits.push((pid, v.to_bits()));
            }
        });
        assert!(!masked_bits.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let batch = Matrix::from_rows(&rows);
        for _ in 0..25 {
            let (_, trace) = net.forward(&batch, TaskId(0)).unwrap();
            let grad = backward(&net, &trace, &labels, &cs).unwrap();
            for (pid, _) in &masked_bits {
                assert!(grad.get(*pid).is_none(), "masked param appeared in gradient");
            }
            apply_step(&mut net, &grad, &cs, 0.05).unwrap();
        }
        for (pid, bits) in masked_bits {
            assert_eq!(net.param(pid).unwrap().to_bits(), bits);
        }
        let _ = tasks;
    }

    #[test]
    fn full_loss_fd_through_penalty_after_soft_freeze() {
        // Freezing softly then nudging θ away from target: the analytic
        // data+penalty gradient still matches finite differences.
        let (mut net, mut cs) = single_column_net(2, &[4], 2, 21);
        let tasks: BTreeSet<TaskId> = [TaskId(0)].into();
        cs.freeze_tasks(&net, &tasks, FreezeLevel::Soft(10.0)).unwrap();
        net.for_each_param_mut(|_, v| *v += 0.03);
        let batch = Matrix::from_rows(&[vec![0.5, 0.1], vec![-0.4, 0.9]]);
        let labels = [0usize, 1];
        let (_, trace) = net.forward(&batch, TaskId(0)).unwrap();
        let mut grad = backward(&net, &trace, &labels, &cs).unwrap();
        let mut adds = Vec::new();
        net.for_each_param(|pid, theta| adds.push((pid, cs.penalty_gradient(pid, theta))));
        for (pid, g) in adds {
            grad.nudge(pid, g);
        }
        for pid in net.all_param_ids().into_iter().step_by(5) {
            let fd = fd_gradient(&net, &cs, &batch, &labels, TaskId(0), pid, 1e-5);
            let a = grad.get(pid).unwrap();
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3));
        }
    }

    #[test]
    fn sources_in_selector_pick_link_class() {
        let mut net = crate::net::ColumnarNetwork::<f64>::new(2, 5);
        let mut cs = ConsolidationState::new();
        crate::expansion::recruit_column(
            &mut net,
            &mut cs,
            Owner::Task(TaskId(0)),
            &[4],
            &crate::expansion::TransferSources::None,
        )
        .unwrap();
        crate::expansion::attach_head(&mut net, &mut cs, TaskId(0), 2, 0).unwrap();
        crate::expansion::recruit_column(
            &mut net,
            &mut cs,
            Owner::Task(TaskId(1)),
            &[4],
            &crate::expansion::TransferSources::All,
        )
        .unwrap();
        crate::expansion::attach_head(&mut net, &mut cs, TaskId(1), 2, 1).unwrap();
        let sel = ParamSelector::column(1).with_classes([LinkClass::Transfer]);
        let n = cs.set(&net, &sel, ConsolidationValue::Mask, TargetMode::Zero);
        assert_eq!(n, 16); // one 4×4 link matrix
        net.for_each_param(|pid, _| match pid.site {
            Site::Transfer { .. } => assert!(cs.is_masked(pid)),
            _ => assert!(!cs.is_masked(pid)),
        });
        // Bias entries only exist for intra layers and heads.
        let mut bias_links = 0;
        net.for_each_param(|pid, _| {
            if matches!(pid.site, Site::Transfer { .. }) && pid.col == SourceId::Bias {
                bias_links += 1;
            }
        });
        assert_eq!(bias_links, 0);
    }
}
