use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use fedsim::analysis::FineTuneConfig;
use fedsim::classifier::{ClassifierKind, ClassifierMatrix};
use fedsim::data::SyntheticSpec;
use fedsim::engine::{FLConfig, MetricsCadence};
use fedsim::io::{
    checkpoint, load_partition, restore, save_partition, DataSource, ExperimentConfig, CHECKPOINT_VERSION,
};
use fedsim::losses::{BaseLoss, LossSpec, Regularizer};
use fedsim::model::ModelParams;
use fedsim::numerics::SeededRng;
use fedsim::partition::{Partition, Strategy as Split};
use fedsim::Error;

fn loss_strategy() -> impl Strategy<Value = LossSpec> {
    let base = prop_oneof![
        Just(BaseLoss::Ce),
        Just(BaseLoss::Dr),
        Just(BaseLoss::Drplus),
        Just(BaseLoss::Fd)
    ];
    let reg = prop_oneof![
        Just(None),
        (0.001f64..1.0).prop_map(|mu| Some(Regularizer::Prox { mu })),
        (0.0f64..2.0, 0.5f64..5.0).prop_map(|(weight, tau)| Some(Regularizer::Kd { weight, tau })),
        (0.0f64..2.0, 0.5f64..5.0).prop_map(|(weight, tau)| Some(Regularizer::Ntd { weight, tau })),
        (0.0f64..2.0).prop_map(|weight| Some(Regularizer::Ld { weight })),
    ];
    (base, 0.0f64..=1.0, reg).prop_map(|(base, beta, regularizer)| LossSpec {
        base,
        beta,
        regularizer,
    })
}

prop_compose! {
    fn config_strategy()(
        classes in 2usize..12,
        input_dim in 1usize..40,
        spc in 1usize..300,
        center_scale in 0.01f64..3.0,
        noise in 0.0f64..2.0,
        data_seed in any::<u64>(),
        shard in any::<bool>(),
        s in 1usize..4,
        alpha in 0.01f64..10.0,
        n_clients in 1usize..200,
        rounds in 1usize..400,
        participation in 0.01f64..=1.0,
        local_epochs in 1usize..6,
        batch_size in 1usize..128,
        lr in 1e-4f64..1.0,
        momentum in 0.0f64..0.99,
        weight_decay in 0.0f64..1e-2,
        m1 in 0.0f64..1.0,
        lr_factor in 0.01f64..1.0,
        loss in loss_strategy(),
        classifier in prop_oneof![Just(ClassifierKind::Etf), Just(ClassifierKind::Random), Just(ClassifierKind::Trainable)],
        hidden in proptest::collection::vec(1usize..64, 0..3),
        d in 2usize..64,
        fl_seed in any::<u64>(),
        cadence in (0usize..10, 0usize..10, 0usize..10, 1usize..5),
        seed in any::<u64>(),
        ft in proptest::option::of((loss_strategy(), 0usize..10, 0.0f64..1.0, 1usize..64, any::<u64>())),
    ) -> ExperimentConfig {
        let mut layers = vec![input_dim];
        layers.extend(hidden);
        layers.push(d);
        let first = ((rounds as f64) * m1) as usize;
        let milestones = if first + 1 < rounds { vec![first, first + 1] } else { vec![] };
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                classes, input_dim, samples_per_class: spc, center_scale, noise, seed: data_seed,
            }),
            partition: if shard { Split::Shard { shards_per_client: s } } else { Split::Lda { alpha } },
            fl: FLConfig {
                n_clients, rounds, participation, local_epochs, batch_size, lr, momentum,
                weight_decay, milestones, lr_factor, loss, classifier, layers, seed: fl_seed,
            },
            cadence: MetricsCadence {
                scalar: cadence.0, alignment: cadence.1, dynamics: cadence.2, observed_threshold: cadence.3,
            },
            output_dir: PathBuf::from(format!("out-{seed}")),
            seed,
            finetune: ft.map(|(loss, epochs, lr, batch_size, seed)| FineTuneConfig {
                batch_size, seed, ..FineTuneConfig::new(loss, epochs, lr)
            }),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn config_json_round_trip(cfg in config_strategy()) {
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

#[test]
fn sparse_config_takes_defaults() {
    let cfg = ExperimentConfig::from_json(
        r#"{"data": {"kind": "synthetic", "classes": 10, "input_dim": 32, "samples_per_class": 200,
                     "center_scale": 1.0, "noise": 1.0, "seed": 0},
            "partition": {"kind": "shard", "shards_per_client": 2}}"#,
    )
    .unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.fl.loss, LossSpec::drplus(0.9));
}

#[test]
fn unknown_and_invalid_fields_are_rejected() {
    let base = ExperimentConfig::default().to_json().unwrap();
    let unknown = base.replacen("\"rounds\"", "\"roundz\"", 1);
    assert!(ExperimentConfig::from_json(&unknown).is_err());
    let bad_lr = base.replacen("\"lr\": 0.35", "\"lr\": -1.0", 1);
    assert_ne!(bad_lr, base);
    let err = ExperimentConfig::from_json(&bad_lr).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

fn model(kind: ClassifierKind) -> ModelParams {
    let rng = SeededRng::new(7);
    let v = ClassifierMatrix::build(kind, 6, 4, &rng.derive("v", 0)).unwrap();
    ModelParams::init_mlp(&[5, 9, 6], v, &rng.derive("m", 0)).unwrap()
}

#[test]
fn checkpoint_restores_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ClassifierKind::Etf, ClassifierKind::Random, ClassifierKind::Trainable] {
        let m = model(kind);
        let path = dir.path().join("ckpt.json");
        checkpoint(&path, &m, 17).unwrap();
        let (back, rounds) = restore(&path).unwrap();
        assert_eq!(rounds, 17);
        assert_eq!(back, m);
        let bits = |p: &ModelParams| p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.classifier().vectors(), m.classifier().vectors());
    }
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint(&path, &model(ClassifierKind::Etf), 3).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    value["version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    fs::write(&path, value.to_string()).unwrap();
    match restore(&path) {
        Err(Error::Version { found, expected }) => {
            assert_eq!(found, CHECKPOINT_VERSION + 1);
            assert_eq!(expected, CHECKPOINT_VERSION);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn truncated_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint(&path, &model(ClassifierKind::Trainable), 3).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let err = restore(&path).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn partition_file_round_trip() {
    let labels: Vec<usize> = (0..120).map(|i| i % 6).collect();
    let test: Vec<usize> = (0..60).map(|i| i % 6).collect();
    let mut p = Partition::shard(&labels, 6, 2, &SeededRng::new(1)).unwrap();
    p.assign_test(&labels, &test, &SeededRng::new(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partition.json");
    save_partition(&path, &p).unwrap();
    assert_eq!(load_partition(&path).unwrap(), p);
}
