//! Learning-rate sweep behind the pinned rates of the directional surrogate
//! in the acceptance suite. Each loss gets the rate that maximizes its own
//! mean final global accuracy over seeds 0..3.
//!
//! cargo run --release --example surrogate_lr_sweep

use fedsim::data::SyntheticSpec;
use fedsim::engine::{run, FLConfig, MetricsCadence};
use fedsim::losses::{BaseLoss, LossSpec};
use fedsim::numerics::SeededRng;
use fedsim::partition::Partition;
use rayon::prelude::*;

const RATES: [f64; 4] = [0.05, 0.1, 0.2, 0.35];

fn final_accuracy(loss: LossSpec, lr: f64, seed: u64) -> f64 {
    let data = SyntheticSpec {
        classes: 10,
        input_dim: 32,
        samples_per_class: 200,
        center_scale: 0.3,
        noise: 1.0,
        seed,
    }
    .generate()
    .unwrap();
    let part = Partition::shard(data.train.labels(), 20, 2, &SeededRng::new(seed).derive("partition", 0)).unwrap();
    let cfg = FLConfig {
        n_clients: 20,
        rounds: 60,
        participation: 0.25,
        local_epochs: 3,
        batch_size: 50,
        lr,
        milestones: vec![],
        loss,
        layers: vec![32, 64, 32],
        seed,
        ..FLConfig::default()
    };
    let cadence = MetricsCadence {
        scalar: 60,
        alignment: 0,
        dynamics: 0,
        observed_threshold: 1,
    };
    let out = run(&cfg, &cadence, &part, &data, 1).unwrap();
    out.records.last().unwrap().global_accuracy.unwrap()
}

fn main() {
    let losses = [LossSpec::new(BaseLoss::Ce), LossSpec::new(BaseLoss::Dr), LossSpec::drplus(0.9)];
    let jobs: Vec<(LossSpec, f64)> = losses.iter().flat_map(|&l| RATES.map(|lr| (l, lr))).collect();
    let means: Vec<f64> = jobs
        .par_iter()
        .map(|&(l, lr)| (0..3).map(|s| final_accuracy(l, lr, s)).sum::<f64>() / 3.0)
        .collect();
    for ((l, lr), m) in jobs.iter().zip(&means) {
        println!("{:<12} lr {lr:<5} mean final accuracy {m:.4}", l.label());
    }
}
