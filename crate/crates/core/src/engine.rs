//! FedAvg orchestration: client sampling, local SGD, weighted aggregation
//! and the learning-rate schedule.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AlignmentReport, DynamicsReport, GapReport};
use crate::classifier::{ClassifierKind, ClassifierMatrix};
use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::losses::{
    parameter_gradient, prox_grad, sample_terms, GlobalSnapshot, LossSpec, Regularizer,
};
use crate::model::ModelParams;
use crate::numerics::{axpy, SeededRng};
use crate::partition::Partition;

fn default_clients() -> usize {
    100
}
fn default_rounds() -> usize {
    320
}
fn default_participation() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    50
}
fn default_lr() -> f64 {
    0.35
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_milestones() -> Vec<usize> {
    vec![160, 240]
}
fn default_lr_factor() -> f64 {
    0.1
}
fn default_classifier() -> ClassifierKind {
    ClassifierKind::Etf
}
fn default_layers() -> Vec<usize> {
    vec![32, 64, 32]
}

/// Federated training settings. Missing fields take the defaults of
/// [`FLConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FLConfig {
    #[serde(default = "default_clients")]
    pub n_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "default_lr_factor")]
    pub lr_factor: f64,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierKind,
    /// Input width, hidden widths, feature width `d`.
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            n_clients: default_clients(),
            rounds: default_rounds(),
            participation: default_participation(),
            local_epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            milestones: default_milestones(),
            lr_factor: default_lr_factor(),
            loss: LossSpec::default(),
            classifier: default_classifier(),
            layers: default_layers(),
            seed: 0,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_factor > 0.0) || !self.lr_factor.is_finite() {
            return bad(format!("lr_factor must be > 0, got {}", self.lr_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.rounds) {
            return bad(format!("milestone {m} is not below rounds = {}", self.rounds));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return bad("layers must be non-empty positive widths".into());
        }
        self.loss.validate()
    }

    /// `|S_r| = max(1, round(r·N))`.
    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.n_clients as f64).round() as usize).clamp(1, self.n_clients)
    }

    pub fn local_options(&self, round: usize) -> LocalTrainOptions {
        LocalTrainOptions {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: lr_at(round, self),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// The round-0 global model: classifier from `(seed, "classifier")`,
    /// extractor from `(seed, "model")`.
    pub fn initial_model(&self, num_classes: usize) -> Result<ModelParams> {
        let root = SeededRng::new(self.seed);
        let d = *self.layers.last().ok_or_else(|| Error::Config("empty layers".into()))?;
        let v = ClassifierMatrix::build(self.classifier, d, num_classes, &root.derive("classifier", 0))?;
        ModelParams::init_mlp(&self.layers, v, &root.derive("model", 0))
    }
}

/// `η · factor^(#milestones ≤ round)`.
pub fn lr_at(round: usize, cfg: &FLConfig) -> f64 {
    let decays = cfg.milestones.iter().filter(|&&m| m <= round).count();
    cfg.lr * cfg.lr_factor.powi(decays as i32)
}

/// Uniform sample of `max(1, round(ratio·n))` clients without replacement,
/// sorted ascending. The stream is `rng / ("sample", round)`.
pub fn sample_clients(round: usize, n: usize, ratio: f64, rng: &SeededRng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return (0..n).collect();
    }
    let mut ids = index::sample(&mut rng.derive("sample", round as u64).stream(), n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Optimizer settings for one local episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub samples: usize,
    /// Mean per-sample objective seen during the episode (proximal term
    /// excluded).
    pub mean_loss: f64,
}

/// `E` epochs of mini-batch SGD with momentum, starting from `global`.
///
/// Each epoch reshuffles `indices` with `rng / ("epoch", e)`. The batch
/// gradient is the mean of the per-sample gradients, plus the proximal
/// gradient once, plus `λθ`. The momentum buffer starts at zero:
/// `buf ← m·buf + g`, `θ ← θ − η·buf`.
pub fn local_train(
    global: &ModelParams,
    train: &Dataset,
    indices: &[usize],
    loss: &LossSpec,
    opts: &LocalTrainOptions,
    snapshot: &GlobalSnapshot,
    rng: &SeededRng,
) -> Result<LocalOutcome> {
    if indices.is_empty() {
        return Err(Error::Client {
            client: usize::MAX,
            reason: "empty local dataset".into(),
        });
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(opts.lr >= 0.0) || !opts.lr.is_finite() {
        return Err(Error::Config(format!("lr must be finite and >= 0, got {}", opts.lr)));
    }
    loss.validate()?;
    let mut model = global.clone();
    let mut theta = model.flatten();
    let mut buf = vec![0.0; theta.len()];
    let mut order = indices.to_vec();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng.derive("epoch", epoch as u64).stream());
        for batch in order.chunks(opts.batch_size) {
            let mut grad = vec![0.0; theta.len()];
            for &i in batch {
                let x = train.x(i);
                let trace = model.forward(x)?;
                let teacher = if loss.needs_teacher() {
                    Some(snapshot.teacher(x)?)
                } else {
                    None
                };
                let eval = sample_terms(loss, train.y(i), &trace, model.classifier(), teacher.as_ref())?;
                loss_sum += eval.value;
                seen += 1;
                let g = parameter_gradient(&model, &trace, &eval)?;
                axpy(1.0, &g, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(Regularizer::Prox { mu }) = loss.regularizer {
                axpy(1.0, &prox_grad(&theta, snapshot.flat(), mu)?, &mut grad);
            }
            if opts.weight_decay != 0.0 {
                axpy(opts.weight_decay, &theta, &mut grad);
            }
            for ((t, b), g) in theta.iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *b = opts.momentum * *b + g;
                *t -= opts.lr * *b;
            }
            model.load_flat(&theta).map_err(|e| match e {
                Error::Parameter(m) => Error::Client {
                    client: usize::MAX,
                    reason: format!("local training diverged: {m}"),
                },
                e => e,
            })?;
        }
    }
    Ok(LocalOutcome {
        params: model,
        samples: indices.len(),
        mean_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
    })
}

/// `n_i / Σ n_j`, in the order given.
pub fn aggregation_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("aggregation over zero samples".into()));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Weighted parameter average of `(client id, model, sample count)` triples.
///
/// Summation runs in ascending client id whatever order the input has.
/// Frozen classifiers must agree bit for bit and are passed through.
pub fn aggregate(locals: &[(usize, ModelParams, usize)]) -> Result<ModelParams> {
    let mut order: Vec<&(usize, ModelParams, usize)> = locals.iter().collect();
    order.sort_by_key(|(id, _, _)| *id);
    let (_, first, _) = *order
        .first()
        .ok_or_else(|| Error::Contract("aggregate needs at least one local model".into()))?;
    for (id, m, _) in &order[1..] {
        if !m.same_shape(first) {
            return Err(Error::Contract(format!("client {id}: model shape differs")));
        }
        if first.classifier().is_frozen() && m.classifier().vectors() != first.classifier().vectors() {
            return Err(Error::Contract(format!("client {id}: frozen classifier diverged")));
        }
    }
    let weights = aggregation_weights(&order.iter().map(|(_, _, n)| *n).collect::<Vec<_>>())?;
    let mut acc: Vec<f64> = first.flatten().iter().map(|v| weights[0] * v).collect();
    for ((_, m, _), &w) in order[1..].iter().zip(&weights[1..]) {
        axpy(w, &m.flatten(), &mut acc);
    }
    first.unflatten(&acc)
}

/// How often each metric group is computed. A cadence of `k` records rounds
/// `r` with `(r + 1) % k == 0`; `0` disables the group. The final round is
/// always recorded for every enabled group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsCadence {
    #[serde(default = "one")]
    pub scalar: usize,
    #[serde(default = "one")]
    pub alignment: usize,
    #[serde(default = "eight")]
    pub dynamics: usize,
    /// Minimum training count for a class to count as observed.
    #[serde(default = "one")]
    pub observed_threshold: usize,
}

fn one() -> usize {
    1
}
fn eight() -> usize {
    8
}

impl Default for MetricsCadence {
    fn default() -> Self {
        MetricsCadence {
            scalar: 1,
            alignment: 1,
            dynamics: 8,
            observed_threshold: 1,
        }
    }
}

impl MetricsCadence {
    pub fn due(every: usize, round: usize, rounds: usize) -> bool {
        every != 0 && ((round + 1).is_multiple_of(every) || round + 1 == rounds)
    }
}

/// Per-participant metrics of one round. Alignment and dynamics are measured
/// on the global test split, divided by the client's observed classes; the
/// global side is the broadcast model of this round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub samples: usize,
    pub train_loss: f64,
    pub local: Option<AlignmentReport>,
    pub global: Option<AlignmentReport>,
    pub gaps: Option<GapReport>,
    pub dynamics: Option<DynamicsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    pub participants: Vec<usize>,
    /// Sampled clients whose episode failed and were left out.
    pub skipped: Vec<usize>,
    /// Sample-weighted mean of the participants' episode losses.
    pub train_loss: f64,
    /// Test accuracy of the aggregated model, on scalar rounds.
    pub global_accuracy: Option<f64>,
    pub clients: Vec<ClientRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub initial: ModelParams,
    pub global: ModelParams,
}

/// Runs `cfg.rounds` rounds and collects every record.
pub fn run(
    cfg: &FLConfig,
    cadence: &MetricsCadence,
    partition: &Partition,
    data: &SplitDataset,
    workers: usize,
) -> Result<RunOutput> {
    let mut records = Vec::with_capacity(cfg.rounds);
    let (initial, global) = run_with(cfg, cadence, partition, data, workers, |rec, _| {
        records.push(rec.clone());
        Ok(())
    })?;
    Ok(RunOutput {
        records,
        initial,
        global,
    })
}

/// Like [`run`], but hands each record and the new global model to
/// `on_round` at the round boundary instead of collecting them. Returns the
/// initial and final global models.
pub fn run_with<F>(
    cfg: &FLConfig,
    cadence: &MetricsCadence,
    partition: &Partition,
    data: &SplitDataset,
    workers: usize,
    mut on_round: F,
) -> Result<(ModelParams, ModelParams)>
where
    F: FnMut(&RoundRecord, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if partition.n_clients != cfg.n_clients {
        return Err(Error::Config(format!(
            "partition has {} clients, config expects {}",
            partition.n_clients, cfg.n_clients
        )));
    }
    partition.validate(data.train.len())?;
    if cfg.layers[0] != data.train.dim() {
        return Err(Error::Config(format!(
            "model input width {} != data dimension {}",
            cfg.layers[0],
            data.train.dim()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let num_classes = data.train.num_classes();
    let masks = analysis::observed_masks(
        partition,
        data.train.labels(),
        num_classes,
        cadence.observed_threshold,
    );
    let root = SeededRng::new(cfg.seed);
    let initial = cfg.initial_model(num_classes)?;
    let mut global = initial.clone();
    let eval_ok = !data.test.is_empty();

    for round in 0..cfg.rounds {
        let selected = sample_clients(round, cfg.n_clients, cfg.participation, &root);
        let opts = cfg.local_options(round);
        let snapshot = GlobalSnapshot::new(global.clone());
        let want_align = eval_ok && MetricsCadence::due(cadence.alignment, round, cfg.rounds);
        let want_dyn = eval_ok && MetricsCadence::due(cadence.dynamics, round, cfg.rounds);
        let global_ref = &global;

        let episode = |&k: &usize| -> Result<Option<(ModelParams, ClientRecord)>> {
            let rng = root.derive("local", round as u64).derive("client", k as u64);
            let out = match local_train(
                global_ref,
                &data.train,
                &partition.train[k],
                &cfg.loss,
                &opts,
                &snapshot,
                &rng,
            ) {
                Ok(out) => out,
                Err(Error::Client { reason, .. }) => {
                    log::warn!("round {round}: client {k} skipped: {reason}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let mut rec = ClientRecord {
                client: k,
                samples: out.samples,
                train_loss: out.mean_loss,
                local: None,
                global: None,
                gaps: None,
                dynamics: None,
            };
            if want_align {
                let l = analysis::alignment_and_accuracy(&out.params, &data.test, &masks[k])?;
                let g = analysis::alignment_and_accuracy(global_ref, &data.test, &masks[k])?;
                rec.gaps = Some(analysis::gaps(&l, &g)?);
                rec.local = Some(l);
                rec.global = Some(g);
            }
            if want_dyn {
                rec.dynamics = Some(analysis::feature_dynamics(
                    &out.params,
                    global_ref,
                    &data.test,
                    &masks[k],
                )?);
            }
            Ok(Some((out.params, rec)))
        };
        let results: Vec<Result<Option<(ModelParams, ClientRecord)>>> =
            pool.install(|| selected.par_iter().map(episode).collect());

        let mut locals = Vec::with_capacity(selected.len());
        let mut clients = Vec::with_capacity(selected.len());
        let mut skipped = Vec::new();
        for (&k, res) in selected.iter().zip(results) {
            match res? {
                Some((params, rec)) => {
                    locals.push((k, params, rec.samples));
                    clients.push(rec);
                }
                None => skipped.push(k),
            }
        }
        if !locals.is_empty() {
            global = aggregate(&locals)?;
        } else {
            log::warn!("round {round}: no client trained; global model unchanged");
        }
        let total: usize = clients.iter().map(|c| c.samples).sum();
        let train_loss = if total > 0 {
            clients.iter().map(|c| c.train_loss * c.samples as f64).sum::<f64>() / total as f64
        } else {
            f64::NAN
        };
        let global_accuracy = if eval_ok && MetricsCadence::due(cadence.scalar, round, cfg.rounds) {
            Some(analysis::accuracy(&global, &data.test)?)
        } else {
            None
        };
        let record = RoundRecord {
            round,
            lr: opts.lr,
            participants: clients.iter().map(|c| c.client).collect(),
            skipped,
            train_loss,
            global_accuracy,
            clients,
        };
        on_round(&record, &global)?;
    }
    Ok((initial, global))
}
