//! Unit tests for the numeric core: forward oracle, loss oracle,
//! finite-difference gradient checks, and the step contract.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consolidation::{
    ConsolidationState, ConsolidationValue, ParamSelector, TargetMode,
};
use crate::expansion::{attach_head, recruit_column, TransferSources};
use crate::matrix::Matrix;
use crate::net::{
    apply_step, backward, task_loss, Activation, ColumnarNetwork, Gradient, Owner, ParamId, Site,
    SourceId, TaskId,
};

pub(crate) fn single_column_net(
    input: usize,
    widths: &[usize],
    classes: usize,
    seed: u64,
) -> (ColumnarNetwork<f64>, ConsolidationState<f64>) {
    let mut net = ColumnarNetwork::new(input, seed);
    let mut cs = ConsolidationState::new();
    recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), widths, &TransferSources::None)
        .unwrap();
    attach_head(&mut net, &mut cs, TaskId(0), classes, 0).unwrap();
    (net, cs)
}

fn set_all_weights(net: &mut ColumnarNetwork<f64>, w: f64) {
    net.for_each_param_mut(|pid, v| {
        *v = match pid.col {
            SourceId::Bias => 0.0,
            SourceId::Node(_) => w,
        }
    });
}

#[test]
fn forward_identity_composition() {
    // 1→1→1 path, identity activations, all weights 1, biases 0: logit 2.0.
    let (mut net, _cs) = single_column_net(1, &[1], 2, 7);
    set_all_weights(&mut net, 1.0);
    for layer in &mut net.columns[0].layers {
        layer.activation = Activation::Identity;
    }
    let batch = Matrix::from_rows(&[vec![2.0]]);
    let logits = net.logits(&batch, TaskId(0)).unwrap();
    assert_eq!(logits.get(0, 0), 2.0);
    assert_eq!(logits.get(0, 1), 2.0);
}

#[test]
fn forward_zero_network() {
    let (mut net, _cs) = single_column_net(3, &[4, 4], 2, 7);
    set_all_weights(&mut net, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Matrix::from_rows(&[
        (0..3).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>(),
        (0..3).map(|_| rng.random_range(-5.0..5.0)).collect(),
    ]);
    let logits = net.logits(&batch, TaskId(0)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_matches_hand_rolled_matmul_oracle() {
    // Straight-line re-implementation of the 2-16-2 forward pass.
    let (net, _cs) = single_column_net(2, &[16], 2, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let batch = Matrix::from_rows(&rows);
    let logits = net.logits(&batch, TaskId(0)).unwrap();

    let l0 = &net.columns()[0].layers[0];
    let head = net.head(TaskId(0)).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let mut hidden = vec![0.0; 16];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut z = l0.biases[j];
            for (k, x) in row.iter().enumerate() {
                z += l0.weights.get(j, k) * x;
            }
            *h = z.max(0.0);
        }
        for c in 0..2 {
            let mut z = head.layer.biases[c];
            for (j, h) in hidden.iter().enumerate() {
                z += head.layer.weights.get(c, j) * h;
            }
            let got = logits.get(i, c);
            assert!(
                (got - z).abs() <= 1e-12 * z.abs().max(1.0),
                "logit mismatch: {got} vs {z}"
            );
        }
    }
}

#[test]
fn forward_rejects_bad_batch_and_unknown_head() {
    let (net, _cs) = single_column_net(3, &[4], 2, 7);
    let bad = Matrix::from_rows(&[vec![1.0, 2.0]]);
    assert!(matches!(
        net.logits(&bad, TaskId(0)),
        Err(crate::Error::Topology(_))
    ));
    let ok = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
    assert!(matches!(
        net.logits(&ok, TaskId(9)),
        Err(crate::Error::Lookup(_))
    ));
}

#[test]
fn loss_certain_prediction_is_zero() {
    let logits = Matrix::from_rows(&[vec![1000.0, 0.0]]);
    let loss = task_loss(&logits, &[0]).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn loss_uniform_is_ln_c() {
    for classes in [2usize, 3, 7] {
        let logits = Matrix::from_rows(&[vec![0.4; classes]]);
        let loss = task_loss(&logits, &[1.min(classes - 1)]).unwrap();
        assert!((loss - (classes as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn loss_matches_scalar_softmax_oracle() {
    let logits = Matrix::from_rows(&[
        vec![0.7, -1.2],
        vec![2.5, 2.4],
        vec![-0.3, 0.9],
    ]);
    let labels = [1usize, 0, 0];
    let loss = task_loss(&logits, &labels).unwrap();
    // Scalar oracle: direct softmax + log, no max-shift.
    let mut expected: f64 = 0.0;
    for i in 0..3 {
        let row: &[f64] = logits.row(i);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[labels[i]].exp() / denom).ln();
    }
    expected /= 3.0;
    assert!((loss - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn loss_label_out_of_range() {
    let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
    assert!(matches!(task_loss(&logits, &[2]), Err(crate::Error::Data(_))));
}

#[test]
fn backward_all_masked_network_gives_empty_gradient() {
    let (net, mut cs) = single_column_net(2, &[4], 2, 3);
    cs.set(&net, &ParamSelector::all(), ConsolidationValue::Mask, TargetMode::Snapshot);
    let batch = Matrix::from_rows(&[vec![0.5, -0.5]]);
    let (_, trace) = net.forward(&batch, TaskId(0)).unwrap();
    let grad = backward(&net, &trace, &[1], &cs).unwrap();
    assert!(grad.is_empty());
}

#[test]
fn backward_single_logistic_unit_closed_form() {
    // One 1→1 identity layer into a 2-class head with weights [w; 0] acts as
    // a logistic unit: p = σ(w·x) for class 0 vs 0. The data gradient on w
    // is (p − y)·x.
    let (mut net, cs) = single_column_net(1, &[1], 2, 5);
    net.for_each_param_mut(|pid, v| {
        *v = match (pid.site, pid.col) {
            (Site::Hidden { .. }, SourceId::Node(_)) => 1.0,
            (Site::Head { .. }, SourceId::Node(_)) if pid.row.0 % 2 == 0 => 0.8,
            _ => 0.0,
        }
    });
    net.columns[0].layers[0].activation = Activation::Identity;
    let x = 1.7;
    let batch = Matrix::from_rows(&[vec![x]]);
    let (_logits, trace) = net.forward(&batch, TaskId(0)).unwrap();
    let grad = backward(&net, &trace, &[0], &cs).unwrap();

    let w = 0.8;
    let p = 1.0 / (1.0 + (-(w * x)).exp());
    let expected = (p - 1.0) * x; // gradient on the head weight for class 0
    let head_w = ParamId {
        site: Site::Head { task: TaskId(0) },
        row: net.head(TaskId(0)).unwrap().class_ids[0],
        col: SourceId::Node(net.columns()[0].node_ids[0][0]),
    };
    let got = grad.get(head_w).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

/// Central finite differences of the full consolidated loss.
pub(crate) fn fd_gradient(
    net: &ColumnarNetwork<f64>,
    cs: &ConsolidationState<f64>,
    batch: &Matrix<f64>,
    labels: &[usize],
    task: TaskId,
    pid: ParamId,
    h: f64,
) -> f64 {
    let mut plus = net.clone();
    let theta = plus.param(pid).unwrap();
    plus.set_param(pid, theta + h).unwrap();
    let lp = task_loss(&plus.logits(batch, task).unwrap(), labels).unwrap() + cs.penalty(&plus);
    let mut minus = net.clone();
    minus.set_param(pid, theta - h).unwrap();
    let lm = task_loss(&minus.logits(batch, task).unwrap(), labels).unwrap() + cs.penalty(&minus);
    (lp - lm) / (2.0 * h)
}

fn analytic_full_gradient(
    net: &ColumnarNetwork<f64>,
    cs: &ConsolidationState<f64>,
    batch: &Matrix<f64>,
    labels: &[usize],
    task: TaskId,
) -> Gradient<f64> {
    let (_, trace) = net.forward(batch, task).unwrap();
    let mut grad = backward(net, &trace, labels, cs).unwrap();
    let mut adds = Vec::new();
    net.for_each_param(|pid, theta| adds.push((pid, cs.penalty_gradient(pid, theta))));
    for (pid, g) in adds {
        grad.nudge(pid, g);
    }
    grad
}

#[test]
fn backward_matches_finite_differences_2_8_4_2() {
    let (net, mut cs) = single_column_net(2, &[8, 4], 2, 11);
    // Mix in some consolidation so the penalty part is exercised too.
    let mut flip = false;
    let mut edits = Vec::new();
    net.for_each_param(|pid, theta| {
        flip = !flip;
        if flip {
            edits.push((pid, theta));
        }
    });
    for (pid, theta) in edits {
        cs.put(
            pid,
            crate::consolidation::Entry {
                value: ConsolidationValue::Finite(0.7),
                target: theta + 0.05,
            },
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let batch = Matrix::from_rows(&rows);

    let grad = analytic_full_gradient(&net, &cs, &batch, &labels, TaskId(0));
    let mut checked = 0;
    for pid in net.all_param_ids() {
        if cs.is_masked(pid) {
            assert!(grad.get(pid).is_none());
            continue;
        }
        let fd = fd_gradient(&net, &cs, &batch, &labels, TaskId(0), pid, 1e-5);
        let a = grad.get(pid).unwrap();
        let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-3);
        assert!(
            (a - fd).abs() <= tol,
            "param {pid:?}: analytic {a} vs fd {fd}"
        );
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn backward_stale_trace_rejected() {
    let (mut net, cs) = single_column_net(2, &[4], 2, 3);
    let batch = Matrix::from_rows(&[vec![0.1, 0.2]]);
    let (_, trace) = net.forward(&batch, TaskId(0)).unwrap();
    net.for_each_param_mut(|_, v| *v += 0.01);
    assert!(matches!(
        backward(&net, &trace, &[0], &cs),
        Err(crate::Error::State(_))
    ));
}

#[test]
fn path_soundness_unrelated_column_gets_zero_gradient() {
    // Two columns, no transfer links, separate heads: training head 1 gives
    // exactly zero data gradient on column 0 and head 0.
    let mut net = ColumnarNetwork::new(2, 17);
    let mut cs = ConsolidationState::new();
    recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &[4], &TransferSources::None).unwrap();
    attach_head(&mut net, &mut cs, TaskId(0), 2, 0).unwrap();
    recruit_column(&mut net, &mut cs, Owner::Task(TaskId(1)), &[4], &TransferSources::None).unwrap();
    attach_head(&mut net, &mut cs, TaskId(1), 2, 1).unwrap();

    let batch = Matrix::from_rows(&[vec![0.3, -0.9], vec![1.1, 0.4]]);
    let (_, trace) = net.forward(&batch, TaskId(1)).unwrap();
    let grad = backward(&net, &trace, &[0, 1], &cs).unwrap();
    let mut nonzero_off_path = 0;
    net.for_each_param(|pid, _| {
        let off_path = matches!(pid.site, Site::Hidden { column: 0, .. })
            || matches!(pid.site, Site::Head { task: TaskId(0) });
        if off_path && grad.get(pid).unwrap() != 0.0 {
            nonzero_off_path += 1;
        }
    });
    assert_eq!(nonzero_off_path, 0);
}

#[test]
fn apply_step_plain_gd_when_b_zero() {
    let (net, cs) = single_column_net(2, &[4], 2, 3);
    let mut stepped = net.clone();
    let batch = Matrix::from_rows(&[vec![0.4, -0.2], vec![-1.0, 0.8]]);
    let labels = [0usize, 1];
    let (_, trace) = stepped.forward(&batch, TaskId(0)).unwrap();
    let grad = backward(&stepped, &trace, &labels, &cs).unwrap();
    apply_step(&mut stepped, &grad, &cs, 0.1).unwrap();
    net.for_each_param(|pid, before| {
        let after = stepped.param(pid).unwrap();
        let expected = before - 0.1 * grad.get(pid).unwrap();
        assert_eq!(after, expected);
    });
}

#[test]
fn apply_step_consolidation_arithmetic() {
    // grad = 0, b = 2, θ = 1.5, target = 1.0, lr = 0.1 → θ' = 1.3.
    let (mut net, mut cs) = single_column_net(1, &[1], 2, 3);
    let pid = ParamId {
        site: Site::Hidden { column: 0, layer: 0 },
        row: net.columns()[0].node_ids[0][0],
        col: SourceId::Node(net.input_ids[0]),
    };
    net.set_param(pid, 1.5).unwrap();
    cs.sync(&net);
    cs.put(
        pid,
        crate::consolidation::Entry {
            value: ConsolidationValue::Finite(2.0),
            target: 1.0,
        },
    );
    let grad = Gradient::new();
    apply_step(&mut net, &grad, &cs, 0.1).unwrap();
    assert!((net.param(pid).unwrap() - 1.3).abs() < 1e-15);
}

#[test]
fn apply_step_masked_parameter_is_bit_identical() {
    let (net, mut cs) = single_column_net(2, &[4], 2, 3);
    let pid = net.all_param_ids()[0];
    cs.put(
        pid,
        crate::consolidation::Entry {
            value: ConsolidationValue::Mask,
            target: 0.0,
        },
    );
    let before_bits = net.param(pid).unwrap().to_bits();
    let mut grad = Gradient::new();
    grad.insert(pid, 1e9); // huge data gradient must be ignored
    let mut stepped = net.clone();
    apply_step(&mut stepped, &grad, &cs, 0.5).unwrap();
    assert_eq!(stepped.param(pid).unwrap().to_bits(), before_bits);
}

#[test]
fn apply_step_rejects_nonpositive_lr_and_nonfinite() {
    let (mut net, cs) = single_column_net(2, &[2], 2, 3);
    let grad = Gradient::new();
    assert!(matches!(
        apply_step(&mut net, &grad, &cs, 0.0),
        Err(crate::Error::Config(_))
    ));
    let pid = net.all_param_ids()[0];
    let mut bad = Gradient::new();
    bad.insert(pid, f64::INFINITY);
    match apply_step(&mut net, &bad, &cs, 0.1) {
        Err(crate::Error::Numerical { param, .. }) => assert_eq!(param, pid),
        other => panic!("expected numerical error, got {other:?}"),
    }
}

#[test]
fn training_is_deterministic_for_fixed_seed_and_order() {
    let run = || {
        let (mut net, cs) = single_column_net(2, &[6], 2, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| (i / 10) % 2).collect();
        let batch = Matrix::from_rows(&rows);
        for _ in 0..30 {
            let (_, trace) = net.forward(&batch, TaskId(0)).unwrap();
            let grad = backward(&net, &trace, &labels, &cs).unwrap();
            apply_step(&mut net, &grad, &cs, 0.05).unwrap();
        }
        let mut bits = Vec::new();
        net.for_each_param(|_, v| bits.push(v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn node_ids_are_never_reused() {
    let mut net = ColumnarNetwork::new(2, 1);
    let mut cs = ConsolidationState::new();
    recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &[4, 4], &TransferSources::None)
        .unwrap();
    attach_head(&mut net, &mut cs, TaskId(0), 2, 0).unwrap();
    let before: BTreeSet<u32> = net.columns()[0].node_ids.iter().flatten().map(|n| n.0).collect();
    // Prune half, then expand; fresh ids must not collide with pruned ones.
    let batch = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.25]]);
    let imp = crate::expansion::compute_importance(&net, TaskId(0), &batch).unwrap();
    crate::expansion::prune_nodes(&mut net, &mut cs, TaskId(0), 0.5, &imp, false).unwrap();
    let kept: BTreeSet<u32> = net.columns()[0].node_ids.iter().flatten().map(|n| n.0).collect();
    let removed: BTreeSet<u32> = before.difference(&kept).copied().collect();
    assert!(!removed.is_empty());
    crate::expansion::staged_expand(&mut net, &mut cs, TaskId(0), 10, 4, 64).unwrap();
    let after: BTreeSet<u32> = net.columns()[0].node_ids.iter().flatten().map(|n| n.0).collect();
    assert!(after.is_disjoint(&removed), "pruned node ids reappeared");
}
