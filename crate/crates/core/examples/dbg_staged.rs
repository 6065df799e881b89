use lifelong_core::consolidation::{ConsolidationState, ConsolidationValue, ParamSelector, TargetMode};
use lifelong_core::expansion::*;
use lifelong_core::net::{ColumnarNetwork, Owner, TaskId};
use lifelong_core::policies::{train_task, TrainOpts};
use lifelong_core::tasks::{gen_task, TaskSpec};
use lifelong_core::metrics;

fn main() {
    let spec = TaskSpec::ring(0, 2, 2, 1.2, 0.22, 900).with_sizes(400, 150, 150);
    let (train, _, _) = gen_task(&spec).unwrap();

    let mut net = ColumnarNetwork::<f64>::new(2, 42);
    let mut cs = ConsolidationState::new();
    recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &[1], &TransferSources::None).unwrap();
    attach_head(&mut net, &mut cs, TaskId(0), 2, 0).unwrap();
    train_task(&mut net, &cs, TaskId(0), &train, &TrainOpts { epochs: 400, ..Default::default() }).unwrap();
    let mut acc = metrics::accuracy(&net, TaskId(0), &train).unwrap();
    println!("stage0 acc {acc:.4}");
    for stage in 1..=3 {
        if acc >= 0.95 { break; }
        let residual: Vec<usize> = lifelong_core::policies::train::misclassified_indices(&net, TaskId(0), &train).unwrap();
        println!("stage {stage}: residual {}", residual.len());
        staged_expand(&mut net, &mut cs, TaskId(0), residual.len(), 2, 64).unwrap();
        let res_ds = train.subset(&residual);
        train_task(&mut net, &cs, TaskId(0), &res_ds, &TrainOpts { epochs: 400, ..Default::default() }).unwrap();
        let mid = metrics::accuracy(&net, TaskId(0), &train).unwrap();
        // Head recalibration on the full training set: unfreeze only the head.
        let mut cs2 = cs.clone();
        cs2.set(&net, &ParamSelector::all(), ConsolidationValue::Mask, TargetMode::Snapshot);
        cs2.set(&net, &ParamSelector::head_of(TaskId(0)), ConsolidationValue::Finite(0.0), TargetMode::Snapshot);
        train_task(&mut net, &cs2, TaskId(0), &train, &TrainOpts { epochs: 200, ..Default::default() }).unwrap();
        acc = metrics::accuracy(&net, TaskId(0), &train).unwrap();
        println!("stage {stage}: after residual {mid:.4}, after head recal {acc:.4}");
    }
}
