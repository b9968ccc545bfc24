//! Diagnostics on observed vs unobserved classes, local-vs-global feature
//! dynamics, and the personalized fine-tuning stage.
//!
//! A client's *observed* classes are the ones present in its training data;
//! every other class is *unobserved*. Reports split an evaluation set by that
//! mask and never fold an empty subset into a zero: it is reported as `None`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{local_train, LocalTrainOptions};
use crate::error::{Error, Result};
use crate::losses::{GlobalSnapshot, LossSpec};
use crate::model::ModelParams;
use crate::numerics::{cosine, norm, sub, SeededRng, NORM_FLOOR};
use crate::partition::{partition_stats, Partition};

/// Mean alignment `cos(f, v_y)` and accuracy over one class subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub alignment: f64,
    pub accuracy: f64,
    /// Samples that entered the means.
    pub evaluated: usize,
    /// Samples skipped because their feature was degenerate.
    pub skipped: usize,
}

/// Alignment and accuracy of one model on the observed and unobserved parts
/// of an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub observed: Option<SubsetScore>,
    pub unobserved: Option<SubsetScore>,
    /// Sizes of the two parts before skipping; they sum to the split size.
    pub observed_total: usize,
    pub unobserved_total: usize,
}

/// `local − global` for each statistic present in both reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub observed_alignment: Option<f64>,
    pub observed_accuracy: Option<f64>,
    pub unobserved_alignment: Option<f64>,
    pub unobserved_accuracy: Option<f64>,
}

/// Index of the largest logit; ties go to the lowest class.
pub fn predict(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of `data` classified correctly by `argmax f Vᵀ`.
pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let f = model.feature(data.x(i))?;
        if predict(&model.classifier().logits(&f)?) == data.y(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Default)]
struct Acc {
    align: f64,
    correct: usize,
    evaluated: usize,
    skipped: usize,
    total: usize,
}

impl Acc {
    fn finish(&self) -> Option<SubsetScore> {
        (self.evaluated > 0).then(|| SubsetScore {
            alignment: self.align / self.evaluated as f64,
            accuracy: self.correct as f64 / self.evaluated as f64,
            evaluated: self.evaluated,
            skipped: self.skipped,
        })
    }
}

/// Alignment and accuracy on the observed / unobserved subsets of `data`,
/// where `observed[c]` marks the client's observed classes.
pub fn alignment_and_accuracy(
    model: &ModelParams,
    data: &Dataset,
    observed: &[bool],
) -> Result<AlignmentReport> {
    if data.is_empty() {
        return Err(Error::Validation("empty evaluation split".into()));
    }
    if observed.len() != model.num_classes() {
        return Err(Error::Dimension(format!(
            "observed mask has {} entries for {} classes",
            observed.len(),
            model.num_classes()
        )));
    }
    let v = model.classifier();
    let (mut obs, mut unobs) = (Acc::default(), Acc::default());
    for i in 0..data.len() {
        let y = data.y(i);
        let bucket = if observed[y] { &mut obs } else { &mut unobs };
        bucket.total += 1;
        let f = model.feature(data.x(i))?;
        if norm(&f) < NORM_FLOOR {
            bucket.skipped += 1;
            continue;
        }
        bucket.align += cosine(&f, v.vector(y))?;
        if predict(&v.logits(&f)?) == y {
            bucket.correct += 1;
        }
        bucket.evaluated += 1;
    }
    Ok(AlignmentReport {
        observed: obs.finish(),
        unobserved: unobs.finish(),
        observed_total: obs.total,
        unobserved_total: unobs.total,
    })
}

/// `local − global`. Both reports must come from the same split.
pub fn gaps(local: &AlignmentReport, global: &AlignmentReport) -> Result<GapReport> {
    if local.observed_total != global.observed_total
        || local.unobserved_total != global.unobserved_total
    {
        return Err(Error::Contract(
            "alignment reports were computed on different splits".into(),
        ));
    }
    let diff = |a: Option<SubsetScore>, b: Option<SubsetScore>, pick: fn(&SubsetScore) -> f64| {
        a.zip(b).map(|(a, b)| pick(&a) - pick(&b))
    };
    Ok(GapReport {
        observed_alignment: diff(local.observed, global.observed, |s| s.alignment),
        observed_accuracy: diff(local.observed, global.observed, |s| s.accuracy),
        unobserved_alignment: diff(local.unobserved, global.unobserved, |s| s.alignment),
        unobserved_accuracy: diff(local.unobserved, global.unobserved, |s| s.accuracy),
    })
}

/// Means of `‖f_l − f_g‖`, `∠(f_l, f_g)` and `‖f_l‖ − ‖f_g‖` over a subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsScore {
    pub distance: f64,
    /// Radians; averaged over samples where both features are non-degenerate.
    pub angle: Option<f64>,
    pub norm_difference: f64,
    pub evaluated: usize,
    pub angle_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub observed: Option<DynamicsScore>,
    pub unobserved: Option<DynamicsScore>,
}

/// Per-sample feature movement from `global` to `local`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureShift {
    pub distance: f64,
    pub angle: Option<f64>,
    pub norm_difference: f64,
}

pub fn feature_shift(f_local: &[f64], f_global: &[f64]) -> FeatureShift {
    let nl = norm(f_local);
    let ng = norm(f_global);
    FeatureShift {
        distance: norm(&sub(f_local, f_global)),
        angle: (nl >= NORM_FLOOR && ng >= NORM_FLOOR)
            .then(|| cosine(f_local, f_global).map(f64::acos).ok())
            .flatten(),
        norm_difference: nl - ng,
    }
}

pub fn feature_dynamics(
    local: &ModelParams,
    global: &ModelParams,
    data: &Dataset,
    observed: &[bool],
) -> Result<DynamicsReport> {
    if !local.same_shape(global) {
        return Err(Error::Contract("local and global models differ in architecture".into()));
    }
    if observed.len() != local.num_classes() {
        return Err(Error::Dimension("observed mask length != class count".into()));
    }
    #[derive(Default)]
    struct Sum {
        distance: f64,
        angle: f64,
        angles: usize,
        norm_diff: f64,
        n: usize,
        skipped: usize,
    }
    let (mut obs, mut unobs) = (Sum::default(), Sum::default());
    for i in 0..data.len() {
        let shift = feature_shift(&local.feature(data.x(i))?, &global.feature(data.x(i))?);
        let s = if observed[data.y(i)] { &mut obs } else { &mut unobs };
        s.distance += shift.distance;
        s.norm_diff += shift.norm_difference;
        s.n += 1;
        match shift.angle {
            Some(a) => {
                s.angle += a;
                s.angles += 1;
            }
            None => s.skipped += 1,
        }
    }
    let finish = |s: &Sum| {
        (s.n > 0).then(|| DynamicsScore {
            distance: s.distance / s.n as f64,
            angle: (s.angles > 0).then(|| s.angle / s.angles as f64),
            norm_difference: s.norm_diff / s.n as f64,
            evaluated: s.n,
            angle_skipped: s.skipped,
        })
    };
    Ok(DynamicsReport {
        observed: finish(&obs),
        unobserved: finish(&unobs),
    })
}

/// Fine-tuning settings for the personalization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    /// Constant learning rate. Required: there is no universal default.
    pub lr: f64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ft_momentum")]
    pub momentum: f64,
    #[serde(default = "default_ft_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ft_batch() -> usize {
    50
}
fn default_ft_momentum() -> f64 {
    0.9
}
fn default_ft_wd() -> f64 {
    1e-5
}

impl FineTuneConfig {
    pub fn new(loss: LossSpec, epochs: usize, lr: f64) -> Self {
        FineTuneConfig {
            loss,
            epochs,
            lr,
            batch_size: default_ft_batch(),
            momentum: default_ft_momentum(),
            weight_decay: default_ft_wd(),
            seed: 0,
        }
    }

    fn options(&self) -> LocalTrainOptions {
        LocalTrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Trains a copy of `global` on one client's data. The feature-distillation
/// anchor is the pre-fine-tuning global model. Zero epochs or a zero
/// learning rate return `global` unchanged.
pub fn fine_tune(
    global: &ModelParams,
    train: &Dataset,
    indices: &[usize],
    cfg: &FineTuneConfig,
    rng: &SeededRng,
) -> Result<ModelParams> {
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok(global.clone());
    }
    let snapshot = GlobalSnapshot::new(global.clone());
    let out = local_train(global, train, indices, &cfg.loss, &cfg.options(), &snapshot, rng)?;
    Ok(out.params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub clients: Vec<ClientAccuracy>,
    /// Clients left out because they had no training or test data.
    pub excluded: Vec<usize>,
    /// Mean and population standard deviation of `after` across clients.
    pub mean: f64,
    pub std: f64,
    /// Mean of `before` (the global model on each client's test split).
    pub mean_before: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fine-tunes `global` on every client's training split and scores it on the
/// same client's test split.
pub fn personalization_sweep(
    global: &ModelParams,
    partition: &Partition,
    train: &Dataset,
    test: &Dataset,
    cfg: &FineTuneConfig,
) -> Result<PersonalizationReport> {
    let test_lists = partition
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("partition has no per-client test split".into()))?;
    let root = SeededRng::new(cfg.seed).derive("finetune", 0);
    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    for (k, (train_idx, test_idx)) in partition.train.iter().zip(test_lists).enumerate() {
        if train_idx.is_empty() || test_idx.is_empty() {
            log::warn!("client {k} has no train or test data; excluded from personalization");
            excluded.push(k);
            continue;
        }
        let local_test = test.subset(test_idx);
        let before = accuracy(global, &local_test)?;
        let tuned = fine_tune(global, train, train_idx, cfg, &root.derive("client", k as u64))?;
        let after = accuracy(&tuned, &local_test)?;
        clients.push(ClientAccuracy { client: k, before, after });
    }
    if clients.is_empty() {
        return Err(Error::Validation("no client has both train and test data".into()));
    }
    let (mean, std) = mean_std(&clients.iter().map(|c| c.after).collect::<Vec<_>>());
    let (mean_before, _) = mean_std(&clients.iter().map(|c| c.before).collect::<Vec<_>>());
    Ok(PersonalizationReport {
        clients,
        excluded,
        mean,
        std,
        mean_before,
    })
}

/// Observed-class masks for every client of `partition`.
pub fn observed_masks(
    partition: &Partition,
    train_labels: &[usize],
    num_classes: usize,
    threshold: usize,
) -> Vec<Vec<bool>> {
    let stats = partition_stats(partition, train_labels, num_classes, threshold);
    (0..partition.n_clients).map(|k| stats.observed_mask(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierMatrix;
    use crate::losses::BaseLoss;
    use crate::model::Layer;
    use crate::numerics::Matrix;

    fn identity_model(classes: usize, seed: u64) -> ModelParams {
        let v = ClassifierMatrix::build_etf(classes, classes, &SeededRng::new(seed)).unwrap();
        let layer = Layer {
            weight: Matrix::identity(classes),
            bias: vec![0.0; classes],
        };
        ModelParams::from_layers(vec![layer], v).unwrap()
    }

    #[test]
    fn features_on_class_vectors_are_perfect() {
        let m = identity_model(3, 1);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| m.classifier().vector(i % 3).to_vec()).collect();
        let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), (0..6).map(|i| i % 3).collect(), 3).unwrap();
        let r = alignment_and_accuracy(&m, &data, &[true, true, false]).unwrap();
        let o = r.observed.unwrap();
        assert!((o.alignment - 1.0).abs() < 1e-12);
        assert_eq!(o.accuracy, 1.0);
        assert_eq!(r.observed_total + r.unobserved_total, 6);
        assert_eq!(r.unobserved.unwrap().evaluated, 2);
    }

    #[test]
    fn zero_features_are_skipped_and_absent() {
        let m = identity_model(3, 1);
        let zero = m.unflatten(&vec![0.0; m.num_params()]).unwrap();
        let data = Dataset::new(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), vec![0], 3).unwrap();
        let r = alignment_and_accuracy(&zero, &data, &[true, false, false]).unwrap();
        assert!(r.observed.is_none() && r.unobserved.is_none());
        assert_eq!(r.observed_total, 1);
    }

    #[test]
    fn accuracy_matches_enumerated_argmax() {
        let v = ClassifierMatrix::build_random_frozen(4, 3, &SeededRng::new(5)).unwrap();
        let m = ModelParams::init_mlp(&[2, 6, 4], v, &SeededRng::new(6)).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let t = i as f64 / 29.0;
            rows.push(vec![(6.0 * t).cos() * (1.0 + t), (6.0 * t).sin() * (2.0 - t)]);
            labels.push(i % 3);
        }
        let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), labels.clone(), 3).unwrap();
        // Oracle: logits by explicit loops over the raw parameters.
        let mut correct = 0;
        for (x, &y) in rows.iter().zip(&labels) {
            let mut h = x.clone();
            for (l, layer) in m.layers().iter().enumerate() {
                let mut out = layer.bias.clone();
                for r in 0..layer.out_dim() {
                    for c in 0..layer.in_dim() {
                        out[r] += layer.weight[(r, c)] * h[c];
                    }
                }
                if l + 1 < m.layers().len() {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                h = out;
            }
            let z: Vec<f64> = (0..3)
                .map(|c| (0..4).map(|j| m.classifier().vector(c)[j] * h[j]).sum())
                .collect();
            let mut best = 0;
            for c in 1..3 {
                if z[c] > z[best] {
                    best = c;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&m, &data).unwrap(), correct as f64 / 30.0);
    }

    fn report(a: f64, acc: f64, total: usize) -> AlignmentReport {
        let s = SubsetScore {
            alignment: a,
            accuracy: acc,
            evaluated: total,
            skipped: 0,
        };
        AlignmentReport {
            observed: Some(s),
            unobserved: Some(s),
            observed_total: total,
            unobserved_total: total,
        }
    }

    #[test]
    fn gap_examples() {
        let g = gaps(&report(0.8, 0.5, 4), &report(0.6, 0.5, 4)).unwrap();
        assert!((g.observed_alignment.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(g.observed_accuracy, Some(0.0));
        let same = gaps(&report(0.3, 0.1, 4), &report(0.3, 0.1, 4)).unwrap();
        assert_eq!(same.unobserved_alignment, Some(0.0));
        let ab = gaps(&report(0.8, 0.7, 4), &report(0.1, 0.2, 4)).unwrap();
        let ba = gaps(&report(0.1, 0.2, 4), &report(0.8, 0.7, 4)).unwrap();
        assert_eq!(ab.observed_alignment.unwrap(), -ba.observed_alignment.unwrap());
        assert!(matches!(
            gaps(&report(0.1, 0.2, 4), &report(0.1, 0.2, 5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dynamics_examples() {
        let m = identity_model(3, 2);
        let data = Dataset::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 0.5, 0.0]]).unwrap(),
            vec![0, 2],
            3,
        )
        .unwrap();
        let same = feature_dynamics(&m, &m, &data, &[true, false, false]).unwrap();
        let o = same.observed.unwrap();
        assert_eq!((o.distance, o.norm_difference), (0.0, 0.0));
        assert!(o.angle.unwrap() < 1e-7);

        let doubled = m.unflatten(&m.flatten().iter().map(|v| 2.0 * v).collect::<Vec<_>>()).unwrap();
        let r = feature_dynamics(&doubled, &m, &data, &[true, false, false]).unwrap();
        let o = r.observed.unwrap();
        let fg = norm(&[1.0, 0.0, 2.0]);
        assert!(o.angle.unwrap().abs() < 1e-7);
        assert!((o.norm_difference - fg).abs() < 1e-12);
        assert!((o.distance - fg).abs() < 1e-12);
    }

    #[test]
    fn law_of_cosines_ties_the_three_statistics() {
        let mut s = SeededRng::new(3).stream();
        use rand::Rng;
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| s.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| s.random_range(-2.0..2.0)).collect();
            let shift = feature_shift(&a, &b);
            let (na, nb) = (norm(&a), norm(&b));
            let rhs = na * na + nb * nb - 2.0 * na * nb * shift.angle.unwrap().cos();
            assert!((shift.distance.powi(2) - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epoch_fine_tune_is_identity() {
        let m = identity_model(3, 4);
        let data = Dataset::new(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(), vec![0], 3).unwrap();
        let cfg = FineTuneConfig::new(LossSpec::new(BaseLoss::Dr), 0, 0.1);
        assert_eq!(fine_tune(&m, &data, &[0], &cfg, &SeededRng::new(0)).unwrap(), m);
        let cfg = FineTuneConfig::new(LossSpec::new(BaseLoss::Dr), 3, 0.0);
        assert_eq!(fine_tune(&m, &data, &[0], &cfg, &SeededRng::new(0)).unwrap(), m);
    }

    #[test]
    fn mean_std_single_value() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn scaling_features_never_changes_prediction() {
        let v = ClassifierMatrix::build_etf(6, 4, &SeededRng::new(7)).unwrap();
        let mut s = SeededRng::new(8).stream();
        use rand::Rng;
        for _ in 0..200 {
            let f: Vec<f64> = (0..6).map(|_| s.random_range(-1.0..1.0)).collect();
            let k = s.random_range(0.01..100.0);
            let scaled: Vec<f64> = f.iter().map(|x| k * x).collect();
            assert_eq!(predict(&v.logits(&f).unwrap()), predict(&v.logits(&scaled).unwrap()));
        }
    }
}
