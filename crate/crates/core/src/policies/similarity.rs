//! Probe-based task similarity.
//!
//! How much can the features learned for an earlier task be expected to help
//! a new one? The estimate freezes everything, trains a fresh linear head on
//! the earlier column's top activations for a fixed budget, and compares its
//! held-out accuracy `a` against `a0` from an equally sized fresh random
//! column: `score = clamp((a − a0) / (1 − a0), −1, 1)`. It is deterministic
//! given the seed and deliberately non-commutative.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::expansion::{recruit_column, TransferSources};
use crate::matrix::Matrix;
use crate::net::{Activation, ColumnarNetwork, DenseLayer, Owner, TaskId};
use crate::seed;
use crate::tasks::Dataset;

/// Similarity of each earlier task to a prospective new one, in `[-1, 1]`.
pub type SimilarityVector = std::collections::BTreeMap<TaskId, f64>;

/// Budget knobs for the probe, kept separate so callers can reuse them.
#[derive(Debug, Clone, Copy)]
pub struct ProbeBudget {
    pub epochs: usize,
    pub lr: f64,
}

/// Estimate how much `earlier`'s learned features help classify `new_data`.
pub fn estimate_similarity(
    net: &ColumnarNetwork<f64>,
    earlier: TaskId,
    train: &Dataset,
    val: &Dataset,
    budget: ProbeBudget,
    probe_seed: u64,
) -> Result<f64> {
    let head = net.head(earlier).map_err(|_| {
        Error::State(format!("{earlier} has not been trained; cannot probe similarity"))
    })?;
    let ci = head.own_column;
    let top = net.column(ci)?.top_layer();

    let (_, acts_train) = net.column_activations(&train.x)?;
    let (_, acts_val) = net.column_activations(&val.x)?;
    let a = probe_head_accuracy(
        &acts_train[ci][top],
        &train.y,
        &acts_val[ci][top],
        &val.y,
        train.classes,
        budget,
        seed::derive(probe_seed, 1),
    )?;

    // Baseline: a fresh, untrained column of the same shape.
    let widths = net.column(ci)?.widths();
    let mut fresh = ColumnarNetwork::<f64>::new(net.input_width(), seed::derive(probe_seed, 2));
    let mut cs = ConsolidationState::new();
    recruit_column(
        &mut fresh,
        &mut cs,
        Owner::Shared(Default::default()),
        &widths,
        &TransferSources::None,
    )?;
    let (_, racts_train) = fresh.column_activations(&train.x)?;
    let (_, racts_val) = fresh.column_activations(&val.x)?;
    let a0 = probe_head_accuracy(
        &racts_train[0][top.min(fresh.column(0)?.top_layer())],
        &train.y,
        &racts_val[0][top.min(fresh.column(0)?.top_layer())],
        &val.y,
        train.classes,
        budget,
        seed::derive(probe_seed, 3),
    )?;

    let score = (a - a0) / (1.0 - a0).max(1e-9);
    Ok(score.clamp(-1.0, 1.0))
}

fn probe_head_accuracy(
    train_acts: &Matrix<f64>,
    train_y: &[usize],
    val_acts: &Matrix<f64>,
    val_y: &[usize],
    classes: usize,
    budget: ProbeBudget,
    head_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
    let mut head = DenseLayer::glorot(classes, train_acts.cols(), Activation::Identity, &mut rng);
    super::train::train_linear_head(&mut head, train_acts, train_y, budget.epochs, budget.lr)?;
    Ok(super::train::head_accuracy(&head, val_acts, val_y))
}
