use lifelong_core::net::TaskId;
use lifelong_core::policies::*;
use lifelong_core::tasks::{gen_task, TaskSpec};

fn main() {
    let ring = TaskSpec::ring(0, 16, 4, 1.0, 0.12, 300).with_sizes(600, 200, 200);
    let cfg = PolicyConfig { seed: 0, epochs: 600, ..Default::default() };
    let mut eng = Engine::new(16, cfg.clone());
    eng.learn_new_task(&ring).unwrap();
    let own = eng.history.entry(0, TaskId(0)).unwrap();
    println!("ring acc {own:.3}");

    let identical = TaskSpec { id: 1, ..ring.clone() };
    let (train, val, _) = gen_task(&identical).unwrap();
    let s = estimate_similarity(&eng.net, TaskId(0), &train, &val, ProbeBudget { epochs: 60, lr: 0.05 }, 42).unwrap();
    println!("sim(identical) = {s}");
    let s2 = estimate_similarity(&eng.net, TaskId(0), &train, &val, ProbeBudget { epochs: 200, lr: 0.05 }, 42).unwrap();
    println!("sim(identical, 200ep) = {s2}");
    match eng.learn_new_task(&identical) { Ok(r) => println!("learn ok {:?}", r.copied_from), Err(e) => println!("learn err: {e}") }
}
