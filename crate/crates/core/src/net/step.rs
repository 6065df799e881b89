//! The consolidated gradient step.

use crate::consolidation::{ConsolidationState, ConsolidationValue};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ColumnarNetwork, Gradient};

/// One SGD step on the total loss: for every unmasked parameter,
/// `θ ← θ − lr·(g + 2·b·(θ − θ_target))`, where `g` is the data-loss
/// gradient and the second term is the consolidation pull. Masked
/// parameters are left untouched, bit for bit.
pub fn apply_step<F: Scalar>(
    net: &mut ColumnarNetwork<F>,
    grad: &Gradient<F>,
    cstate: &ConsolidationState<F>,
    lr: F,
) -> Result<()> {
    if !(lr > F::zero()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let mut failure = None;
    let two = F::from_f64(2.0);
    net.for_each_param_mut(|pid, theta| {
        if failure.is_some() {
            return;
        }
        let entry = match cstate.entry(pid) {
            Some(e) => e,
            None => {
                failure = Some(Error::State(format!(
                    "consolidation state has no entry for {pid:?}"
                )));
                return;
            }
        };
        let (b, target) = match entry.value {
            ConsolidationValue::Mask => return,
            ConsolidationValue::Finite(b) => (b, entry.target),
        };
        let g = grad.get(pid).unwrap_or_else(F::zero);
        let next = *theta - lr * (g + two * b * (*theta - target));
        if !next.is_finite() {
            failure = Some(Error::Numerical {
                param: pid,
                message: format!("update produced {next}"),
            });
            return;
        }
        *theta = next;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
