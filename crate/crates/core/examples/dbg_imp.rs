use lifelong_core::consolidation::ConsolidationState;
use lifelong_core::expansion::*;
use lifelong_core::net::{ColumnarNetwork, Owner, TaskId, SourceId, Site};
use lifelong_core::policies::{train_task, TrainOpts};
use lifelong_core::tasks::{gen_task, TaskSpec};
use lifelong_core::metrics;

fn main() {
    for seed in [33u64, 34, 35, 77] {
        let spec = TaskSpec::ring(0, 2, 2, 1.5, 0.25, 17).with_sizes(400, 200, 100);
        let (train, val, _) = gen_task(&spec).unwrap();
        let mut net = ColumnarNetwork::<f64>::new(2, seed);
        let mut cs = ConsolidationState::new();
        recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &[6], &TransferSources::None).unwrap();
        attach_head(&mut net, &mut cs, TaskId(0), 2, 0).unwrap();
        train_task(&mut net, &cs, TaskId(0), &train, &TrainOpts { epochs: 500, ..Default::default() }).unwrap();
        let base_acc = metrics::accuracy(&net, TaskId(0), &val).unwrap();
        let imp = compute_importance(&net, TaskId(0), &train.x).unwrap();
        let ids = net.columns()[0].node_ids[0].clone();
        let scores: Vec<f64> = ids.iter().map(|id| imp.score(0, 0, *id).unwrap()).collect();
        let drops: Vec<f64> = (0..6).map(|p| {
            let mut ablated = net.clone();
            let node = ids[p];
            let mut edits = Vec::new();
            ablated.for_each_param(|pid, _| {
                if pid.col == SourceId::Node(node) && matches!(pid.site, Site::Head { .. }) {
                    edits.push(pid);
                }
            });
            for pid in edits { ablated.set_param(pid, 0.0).unwrap(); }
            base_acc - metrics::accuracy(&ablated, TaskId(0), &val).unwrap()
        }).collect();
        let rank = |v: &Vec<f64>| { let mut idx: Vec<usize> = (0..6).collect(); idx.sort_by(|&a,&b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b))); idx };
        let ri = rank(&scores); let rd = rank(&drops);
        let agree = ri.iter().zip(&rd).filter(|(a,b)| a==b).count();
        println!("seed {seed} base {base_acc:.3} agree {agree}\n  imp rank {ri:?}\n  drop rank {rd:?}\n  drops {drops:?}");
    }
}
