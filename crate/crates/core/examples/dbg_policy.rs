use lifelong_core::net::TaskId;
use lifelong_core::policies::*;
use lifelong_core::tasks::TaskSpec;

fn main() {
    // ---- Forgetting witness: overlapping pair on one shared column, b=0.
    for seed in 0..5u64 {
        let t0 = TaskSpec::blobs(0, 16, 2, 4.0, 0.5, 100 + seed).with_sizes(400, 100, 200);
        let mut t1 = TaskSpec::blobs(1, 16, 2, 4.0, 0.5, 200 + seed).with_sizes(400, 100, 200);
        t1.rotation = std::f64::consts::FRAC_PI_2; // 90°: same region, rotated boundary
        let cfg = PolicyConfig { seed, epochs: 150, ..Default::default() };
        let mut ab = SharedColumnAblation::new(16, &[16, 16], cfg).unwrap();
        ab.learn_task(&t0).unwrap();
        let after_t0 = ab.history.entry(0, TaskId(0)).unwrap();
        let accs = ab.learn_task(&t1).unwrap();
        println!("witness seed {seed}: t0 {after_t0:.3} -> {:.3} (drop {:.1} pts), t1 {:.3}",
            accs[&TaskId(0)], (after_t0 - accs[&TaskId(0)]) * 100.0, accs[&TaskId(1)]);
    }

    // ---- Same stream, columnar engine with soft freeze.
    for seed in 0..2u64 {
        let t0 = TaskSpec::blobs(0, 16, 2, 4.0, 0.5, 100 + seed).with_sizes(400, 100, 200);
        let mut t1 = TaskSpec::blobs(1, 16, 2, 4.0, 0.5, 200 + seed).with_sizes(400, 100, 200);
        t1.rotation = std::f64::consts::FRAC_PI_2;
        let cfg = PolicyConfig { seed, epochs: 150, ..Default::default() };
        let mut eng = Engine::new(16, cfg);
        eng.learn_new_task(&t0).unwrap();
        let after_t0 = eng.history.entry(0, TaskId(0)).unwrap();
        let r = eng.learn_new_task(&t1).unwrap();
        println!("engine seed {seed}: t0 {after_t0:.3} -> {:.3}, t1 {:.3} sim {:?}",
            r.accuracies[&TaskId(0)], r.accuracies[&TaskId(1)], r.similarity);
    }

    // ---- Similarity probe: identical ring, permuted labels, random labels.
    for seed in 0..3u64 {
        let ring = TaskSpec::ring(0, 16, 4, 1.0, 0.12, 300 + seed).with_sizes(600, 200, 200);
        let cfg = PolicyConfig { seed, epochs: 600, ..Default::default() };
        let mut eng = Engine::new(16, cfg);
        eng.learn_new_task(&ring).unwrap();
        let own = eng.history.entry(0, TaskId(0)).unwrap();

        let identical = TaskSpec { id: 1, ..ring.clone() };
        let r = eng.learn_new_task(&identical).unwrap();
        println!("sim seed {seed}: ring acc {own:.3}, sim(identical) {:?} copied {:?}, t1 acc {:.3}",
            r.similarity, r.copied_from, r.accuracies[&TaskId(1)]);
    }
}
