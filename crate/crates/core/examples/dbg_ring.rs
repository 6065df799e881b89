use lifelong_core::net::{TaskId, Activation, DenseLayer};
use lifelong_core::consolidation::ConsolidationState;
use lifelong_core::expansion::*;
use lifelong_core::net::{ColumnarNetwork, Owner};
use lifelong_core::policies::{train_task, train_linear_head, TrainOpts};
use lifelong_core::tasks::{gen_task, TaskSpec};
use lifelong_core::metrics;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    for (sep, noise, w, depth, ep) in [(1.0, 0.15, 16usize, 1usize, 400usize), (1.0, 0.15, 16, 2, 400), (1.0, 0.12, 16, 2, 600), (1.5, 0.2, 20, 2, 600)] {
        let spec = TaskSpec::ring(0, 16, 4, sep, noise, 5).with_sizes(600, 200, 200);
        let (train, _, test) = gen_task(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut head = DenseLayer::glorot(4, 16, Activation::Identity, &mut rng);
        train_linear_head(&mut head, &train.x, &train.y, 200, 0.05).unwrap();
        let linear = lifelong_core::policies::train::head_accuracy(&head, &test.x, &test.y);
        let widths = vec![w; depth];
        let mut net = ColumnarNetwork::<f64>::new(16, 8);
        let mut cs = ConsolidationState::new();
        recruit_column(&mut net, &mut cs, Owner::Task(TaskId(0)), &widths, &TransferSources::None).unwrap();
        attach_head(&mut net, &mut cs, TaskId(0), 4, 0).unwrap();
        train_task(&mut net, &cs, TaskId(0), &train, &TrainOpts { epochs: ep, ..Default::default() }).unwrap();
        let nn = metrics::accuracy(&net, TaskId(0), &test).unwrap();
        println!("sep {sep} noise {noise} w{w} d{depth} ep{ep}: linear {linear:.3} net {nn:.3}");
    }
}
