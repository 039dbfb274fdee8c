use lorck_core::synth::{gen_dataset, Difficulty};
use lorck_core::train::{train, ExperimentConfig};
use std::time::Instant;

#[test]
fn probe_batch1() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let ds = gen_dataset(42, 12, 9, 12, 64, Difficulty::Easy).unwrap();
    ds.save(&data_dir).unwrap();

    for (batch, iters) in [(1usize, 1200u64), (2, 800)] {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.batch_size = batch;
        cfg.iterations = iters;
        cfg.eval_period = 400;
        cfg.dataset = data_dir.clone();
        cfg.out_dir = dir.path().join(format!("run-b{}", batch));
        cfg.set("model", "UNetDilated").unwrap();
        let t0 = Instant::now();
        let report = train::<f32>(&cfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "batch {}: {:.3} s/iter; dice after {} iters = {:?}",
            batch, dt / iters as f64, iters, report.final_test_dice
        );
    }
}
