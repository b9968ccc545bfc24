use proptest::prelude::*;

use fedsim::analysis::{personalization_sweep, FineTuneConfig};
use fedsim::data::SyntheticSpec;
use fedsim::engine::{aggregate, aggregation_weights, run, sample_clients, FLConfig, MetricsCadence};
use fedsim::losses::{BaseLoss, LossSpec};
use fedsim::model::ModelParams;
use fedsim::numerics::SeededRng;
use fedsim::partition::{partition_stats, Partition};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn lower_alpha_gives_more_skewed_clients() {
    let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let entropy = |alpha: f64| {
        let runs: Vec<f64> = (0..5)
            .map(|seed| {
                let p = Partition::lda(&labels, 20, alpha, &SeededRng::new(seed)).unwrap();
                mean(&partition_stats(&p, &labels, 10, 1).entropy)
            })
            .collect();
        mean(&runs)
    };
    let (low, mid, high) = (entropy(0.05), entropy(0.5), entropy(100.0));
    assert!(low < mid && mid < high, "{low} {mid} {high}");
    assert!(high > 0.95 * (10f64).ln());
}

#[test]
fn shard_clients_see_at_most_s_classes() {
    let labels: Vec<usize> = (0..1200).map(|i| i % 10).collect();
    for s in 1..=4 {
        let p = Partition::shard(&labels, 10, s, &SeededRng::new(s as u64)).unwrap();
        let stats = partition_stats(&p, &labels, 10, 1);
        assert!((0..10).all(|k| stats.distinct_classes(k) <= s));
        assert_eq!(stats.observed[0].len() + stats.unobserved[0].len(), 10);
    }
}

fn small_model(seed: u64) -> ModelParams {
    FLConfig {
        layers: vec![4, 6, 5],
        seed,
        ..FLConfig::default()
    }
    .initial_model(3)
    .unwrap()
}

proptest! {
    #[test]
    fn aggregate_stays_within_client_bounds(
        counts in proptest::collection::vec(1usize..500, 1..6),
        seed in any::<u64>(),
    ) {
        let base = small_model(0);
        let mut s = SeededRng::new(seed).stream();
        let locals: Vec<(usize, ModelParams, usize)> = counts
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let theta: Vec<f64> = base.flatten().iter().map(|w| w + rand::Rng::random_range(&mut s, -1.0..1.0)).collect();
                (k, base.unflatten(&theta).unwrap(), n)
            })
            .collect();
        let avg = aggregate(&locals).unwrap().flatten();
        for (j, a) in avg.iter().enumerate() {
            let vals: Vec<f64> = locals.iter().map(|(_, m, _)| m.flatten()[j]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*a >= lo - 1e-12 && *a <= hi + 1e-12);
        }
        let w = aggregation_weights(&counts).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_clients_are_sorted_distinct_and_sized(
        n in 1usize..300,
        ratio in 0.001f64..=1.0,
        round in 0usize..1000,
        seed in any::<u64>(),
    ) {
        let picked = sample_clients(round, n, ratio, &SeededRng::new(seed));
        let expect = ((ratio * n as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(picked.len(), expect);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&k| k < n));
    }
}

#[test]
fn fine_tuning_improves_local_accuracy_on_skewed_clients() {
    let data = SyntheticSpec {
        classes: 6,
        input_dim: 12,
        samples_per_class: 100,
        center_scale: 0.6,
        noise: 1.0,
        seed: 1,
    }
    .generate()
    .unwrap();
    let mut part = Partition::shard(data.train.labels(), 6, 2, &SeededRng::new(1)).unwrap();
    part.assign_test(data.train.labels(), data.test.labels(), &SeededRng::new(2)).unwrap();
    let cfg = FLConfig {
        n_clients: 6,
        rounds: 10,
        participation: 0.5,
        local_epochs: 1,
        batch_size: 20,
        lr: 0.2,
        milestones: vec![],
        loss: LossSpec::drplus(0.9),
        layers: vec![12, 16, 8],
        ..FLConfig::default()
    };
    let cadence = MetricsCadence {
        scalar: 0,
        alignment: 0,
        dynamics: 0,
        observed_threshold: 1,
    };
    let global = run(&cfg, &cadence, &part, &data, 2).unwrap().global;
    let ft = FineTuneConfig::new(LossSpec::new(BaseLoss::Dr), 5, 0.05);
    let report = personalization_sweep(&global, &part, &data.train, &data.test, &ft).unwrap();
    assert_eq!(report.clients.len(), 6);
    assert!(report.mean > report.mean_before, "{} vs {}", report.mean, report.mean_before);
    let zero = personalization_sweep(&global, &part, &data.train, &data.test, &FineTuneConfig { epochs: 0, ..ft })
        .unwrap();
    assert_eq!(zero.mean, zero.mean_before);
    assert_eq!(zero.mean_before, report.mean_before);
}
