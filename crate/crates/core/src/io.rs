//! Experiment configuration, result files and checkpoints.
//!
//! An experiment directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | the [`ExperimentConfig`] echo |
//! | `partition.json` | the [`Partition`] used |
//! | `scalars.csv` | `round,lr,participants,skipped,train_loss,global_accuracy` |
//! | `alignment.csv` | one row per (round, client, subset) |
//! | `dynamics.csv` | one row per (round, client, subset) |
//! | `checkpoint-rNNNN.json` | global model after `NNNN` rounds, at lr milestones |
//! | `model.json` | final global model |
//! | `summary.json` | [`TrainSummary`] |
//!
//! Participant lists are `;`-separated. Missing values are empty fields.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, AlignmentReport, DynamicsReport, FineTuneConfig, PersonalizationReport, SubsetScore,
};
use crate::data::{load_tabular, SplitDataset, SyntheticSpec};
use crate::engine::{run_with, FLConfig, MetricsCadence, RoundRecord};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::SeededRng;
use crate::partition::{Partition, Strategy};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "FEDSIM_OUTPUT_DIR";

pub const CHECKPOINT_FORMAT: &str = "fedsim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Two CSV files in the [`load_tabular`] format.
    Files { train: PathBuf, test: PathBuf },
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub partition: Strategy,
    #[serde(default)]
    pub fl: FLConfig,
    #[serde(default)]
    pub cadence: MetricsCadence,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed of the partition draw. Training uses `fl.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub finetune: Option<FineTuneConfig>,
}

impl Default for ExperimentConfig {
    /// Synthetic mixture with shard partitioning, `s = 2`.
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            partition: Strategy::Shard { shards_per_client: 2 },
            fl: FLConfig::default(),
            cadence: MetricsCadence::default(),
            output_dir: default_output_dir(),
            seed: 0,
            finetune: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if let Some(ft) = &self.finetune {
            ft.loss.validate()?;
            if !(ft.lr >= 0.0) || !ft.lr.is_finite() || ft.batch_size == 0 {
                return Err(Error::Config("finetune needs lr >= 0 and batch_size >= 1".into()));
            }
        }
        self.fl.validate()
    }

    /// The configured output directory unless [`OUTPUT_DIR_ENV`] is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn load_data(&self) -> Result<SplitDataset> {
        match &self.data {
            DataSource::Synthetic(spec) => spec.generate(),
            DataSource::Files { train, test } => {
                let (train, _) = load_tabular(train)?;
                let (test, _) = load_tabular(test)?;
                if train.dim() != test.dim() {
                    return Err(Error::Validation(format!(
                        "train has {} features, test has {}",
                        train.dim(),
                        test.dim()
                    )));
                }
                if test.num_classes() > train.num_classes() {
                    return Err(Error::Validation("test labels exceed the train classes".into()));
                }
                let test = crate::data::Dataset::new(
                    test.features().clone(),
                    test.labels().to_vec(),
                    train.num_classes(),
                )?;
                Ok(SplitDataset { train, test })
            }
        }
    }

    /// Draws the partition with `(seed, "partition")` and the per-client
    /// test split with `(seed, "partition-test")`.
    pub fn build_partition(&self, data: &SplitDataset) -> Result<Partition> {
        let root = SeededRng::new(self.seed);
        let mut p = Partition::build(
            self.partition,
            data.train.labels(),
            self.fl.n_clients,
            &root.derive("partition", 0),
        )?;
        p.assign_test(data.train.labels(), data.test.labels(), &root.derive("partition-test", 0))?;
        Ok(p)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_json_value(path: &Path, what: &str) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        if e.is_eof() {
            Error::Validation(format!("{}: truncated {what}", path.display()))
        } else {
            Error::Json(e)
        }
    })
}

pub fn save_partition(path: &Path, p: &Partition) -> Result<()> {
    write_json(path, p)
}

pub fn load_partition(path: &Path) -> Result<Partition> {
    Ok(serde_json::from_value(read_json_value(path, "partition")?)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    rounds: usize,
    model: ModelParams,
}

/// Writes `model` after `rounds` completed rounds.
pub fn checkpoint(path: &Path, model: &ModelParams, rounds: usize) -> Result<()> {
    write_json(
        path,
        &CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            rounds,
            model: model.clone(),
        },
    )
}

/// Reads a checkpoint back as `(model, rounds)`.
pub fn restore(path: &Path) -> Result<(ModelParams, usize)> {
    let value = read_json_value(path, "checkpoint")?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Validation(format!("{}: not a checkpoint file", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    let m = file.model;
    let model = ModelParams::from_layers(m.layers().to_vec(), m.classifier().clone())
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok((model, file.rounds))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn ids(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub const SCALAR_HEADER: [&str; 6] = ["round", "lr", "participants", "skipped", "train_loss", "global_accuracy"];
pub const ALIGNMENT_HEADER: [&str; 14] = [
    "round",
    "client",
    "samples",
    "train_loss",
    "subset",
    "total",
    "local_alignment",
    "local_accuracy",
    "global_alignment",
    "global_accuracy",
    "alignment_gap",
    "accuracy_gap",
    "local_skipped",
    "global_skipped",
];
pub const DYNAMICS_HEADER: [&str; 8] = [
    "round",
    "client",
    "subset",
    "distance",
    "angle",
    "norm_difference",
    "evaluated",
    "angle_skipped",
];

/// Streams round records into the three CSV files, flushing at every round.
pub struct ResultsWriter {
    scalars: csv::Writer<File>,
    alignment: csv::Writer<File>,
    dynamics: csv::Writer<File>,
    cadence: MetricsCadence,
    rounds: usize,
}

impl ResultsWriter {
    pub fn create(dir: &Path, cadence: MetricsCadence, rounds: usize) -> Result<Self> {
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<File>> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(header)?;
            Ok(w)
        };
        Ok(ResultsWriter {
            scalars: open("scalars.csv", &SCALAR_HEADER)?,
            alignment: open("alignment.csv", &ALIGNMENT_HEADER)?,
            dynamics: open("dynamics.csv", &DYNAMICS_HEADER)?,
            cadence,
            rounds,
        })
    }

    pub fn write(&mut self, rec: &RoundRecord) -> Result<()> {
        let r = rec.round.to_string();
        if MetricsCadence::due(self.cadence.scalar, rec.round, self.rounds) {
            self.scalars.write_record([
                r.clone(),
                num(rec.lr),
                ids(&rec.participants),
                ids(&rec.skipped),
                num(rec.train_loss),
                opt(rec.global_accuracy),
            ])?;
        }
        for c in &rec.clients {
            if let (Some(l), Some(g)) = (&c.local, &c.global) {
                for (subset, ls, gs, total) in [
                    ("observed", l.observed, g.observed, l.observed_total),
                    ("unobserved", l.unobserved, g.unobserved, l.unobserved_total),
                ] {
                    let pick = |s: Option<SubsetScore>, f: fn(&SubsetScore) -> f64| s.as_ref().map(f);
                    let diff = |f: fn(&SubsetScore) -> f64| pick(ls, f).zip(pick(gs, f)).map(|(a, b)| a - b);
                    self.alignment.write_record([
                        r.clone(),
                        c.client.to_string(),
                        c.samples.to_string(),
                        num(c.train_loss),
                        subset.to_string(),
                        total.to_string(),
                        opt(pick(ls, |s| s.alignment)),
                        opt(pick(ls, |s| s.accuracy)),
                        opt(pick(gs, |s| s.alignment)),
                        opt(pick(gs, |s| s.accuracy)),
                        opt(diff(|s| s.alignment)),
                        opt(diff(|s| s.accuracy)),
                        ls.map_or(total, |s| s.skipped).to_string(),
                        gs.map_or(total, |s| s.skipped).to_string(),
                    ])?;
                }
            }
            if let Some(d) = &c.dynamics {
                for (subset, s) in [("observed", d.observed), ("unobserved", d.unobserved)] {
                    if let Some(s) = s {
                        self.dynamics.write_record([
                            r.clone(),
                            c.client.to_string(),
                            subset.to_string(),
                            num(s.distance),
                            opt(s.angle),
                            num(s.norm_difference),
                            s.evaluated.to_string(),
                            s.angle_skipped.to_string(),
                        ])?;
                    }
                }
            }
        }
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in [&mut self.scalars, &mut self.alignment, &mut self.dynamics] {
            w.flush().map_err(|e| Error::io("results", e))?;
        }
        Ok(())
    }
}

/// Client means of the diagnostics in one round. Clients whose subset is
/// absent do not enter that mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub observed_local_alignment: Option<f64>,
    pub unobserved_local_alignment: Option<f64>,
    pub observed_local_accuracy: Option<f64>,
    pub unobserved_local_accuracy: Option<f64>,
    pub observed_alignment_gap: Option<f64>,
    pub unobserved_alignment_gap: Option<f64>,
    pub observed_angle: Option<f64>,
    pub unobserved_angle: Option<f64>,
    pub observed_distance: Option<f64>,
    pub unobserved_distance: Option<f64>,
    pub observed_norm_difference: Option<f64>,
    pub unobserved_norm_difference: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RoundSummary {
    pub fn from_record(rec: &RoundRecord) -> Self {
        let local: Vec<&AlignmentReport> = rec.clients.iter().filter_map(|c| c.local.as_ref()).collect();
        let gaps: Vec<_> = rec.clients.iter().filter_map(|c| c.gaps.as_ref()).collect();
        let dyns: Vec<&DynamicsReport> = rec.clients.iter().filter_map(|c| c.dynamics.as_ref()).collect();
        RoundSummary {
            observed_local_alignment: mean(local.iter().map(|r| r.observed.map(|s| s.alignment))),
            unobserved_local_alignment: mean(local.iter().map(|r| r.unobserved.map(|s| s.alignment))),
            observed_local_accuracy: mean(local.iter().map(|r| r.observed.map(|s| s.accuracy))),
            unobserved_local_accuracy: mean(local.iter().map(|r| r.unobserved.map(|s| s.accuracy))),
            observed_alignment_gap: mean(gaps.iter().map(|g| g.observed_alignment)),
            unobserved_alignment_gap: mean(gaps.iter().map(|g| g.unobserved_alignment)),
            observed_angle: mean(dyns.iter().map(|d| d.observed.and_then(|s| s.angle))),
            unobserved_angle: mean(dyns.iter().map(|d| d.unobserved.and_then(|s| s.angle))),
            observed_distance: mean(dyns.iter().map(|d| d.observed.map(|s| s.distance))),
            unobserved_distance: mean(dyns.iter().map(|d| d.unobserved.map(|s| s.distance))),
            observed_norm_difference: mean(dyns.iter().map(|d| d.observed.map(|s| s.norm_difference))),
            unobserved_norm_difference: mean(dyns.iter().map(|d| d.unobserved.map(|s| s.norm_difference))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub loss: String,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub final_round: RoundSummary,
    pub skipped_episodes: usize,
}

/// Runs `cfg` end to end and writes every result file into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let partition = cfg.build_partition(&data)?;
    run_experiment_with(cfg, &data, &partition, dir, workers)
}

/// [`run_experiment`] on an already built dataset and partition.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    data: &SplitDataset,
    partition: &Partition,
    dir: &Path,
    workers: usize,
) -> Result<TrainSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    save_partition(&dir.join("partition.json"), partition)?;
    let mut writer = ResultsWriter::create(dir, cfg.cadence, cfg.fl.rounds)?;
    let mut best: Option<f64> = None;
    let mut last: Option<RoundRecord> = None;
    let mut skipped = 0;
    let (_, global) = run_with(&cfg.fl, &cfg.cadence, partition, data, workers, |rec, model| {
        writer.write(rec)?;
        if let Some(a) = rec.global_accuracy {
            best = Some(best.map_or(a, |b: f64| b.max(a)));
        }
        skipped += rec.skipped.len();
        let done = rec.round + 1;
        if cfg.fl.milestones.contains(&done) {
            checkpoint(&dir.join(format!("checkpoint-r{done:04}.json")), model, done)?;
        }
        last = Some(rec.clone());
        Ok(())
    })?;
    checkpoint(&dir.join("model.json"), &global, cfg.fl.rounds)?;
    let summary = TrainSummary {
        loss: cfg.fl.loss.label(),
        rounds: cfg.fl.rounds,
        final_accuracy: last.as_ref().and_then(|r| r.global_accuracy),
        best_accuracy: best,
        final_round: last.as_ref().map(RoundSummary::from_record).unwrap_or_default(),
        skipped_episodes: skipped,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Fine-tunes the model at `model_path` for every client and writes
/// `personalization.csv` and `personalization.json` into `dir`.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    ft: &FineTuneConfig,
    model_path: &Path,
    partition: &Partition,
    dir: &Path,
) -> Result<PersonalizationReport> {
    let data = cfg.load_data()?;
    partition.validate(data.train.len())?;
    let (global, _) = restore(model_path)?;
    let report = analysis::personalization_sweep(&global, partition, &data.train, &data.test, ft)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("personalization.csv"))?;
    w.write_record(["client", "before", "after"])?;
    for c in &report.clients {
        w.write_record([c.client.to_string(), num(c.before), num(c.after)])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("personalization.json"), &report)?;
    Ok(report)
}

/// Summary of a results directory, rebuilt from its CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scalar_rows: usize,
    pub last_round: Option<usize>,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    /// Client means of alignment columns at the last alignment round.
    pub alignment_round: Option<usize>,
    pub observed_local_alignment: Option<f64>,
    pub unobserved_local_alignment: Option<f64>,
    pub observed_alignment_gap: Option<f64>,
    pub unobserved_alignment_gap: Option<f64>,
    /// Client means of the angle column at the last dynamics round.
    pub dynamics_round: Option<usize>,
    pub observed_angle: Option<f64>,
    pub unobserved_angle: Option<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    r.records().enumerate().map(|(i, rec)| {
        rec.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 2,
            message: e.to_string(),
        })
    }).collect()
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, col: usize) -> Result<Option<T>> {
    match rec.get(col) {
        None => Err(Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("missing column {col}"),
        }),
        Some("") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|_| Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("cannot parse `{s}` in column {col}"),
        }),
    }
}

/// Mean of `value_col` over rows of the latest round, split by the subset
/// column. Returns `(round, observed mean, unobserved mean)`.
fn last_round_means(
    path: &Path,
    subset_col: usize,
    value_col: usize,
) -> Result<(Option<usize>, Option<f64>, Option<f64>)> {
    let rows = read_rows(path)?;
    let mut parsed = Vec::with_capacity(rows.len());
    for (i, rec) in rows.iter().enumerate() {
        let round: Option<usize> = field(path, i + 2, rec, 0)?;
        let value: Option<f64> = field(path, i + 2, rec, value_col)?;
        let subset = rec.get(subset_col).unwrap_or_default().to_string();
        parsed.push((round, subset, value));
    }
    let last = parsed.iter().filter_map(|(r, _, _)| *r).max();
    let pick = |name: &str| {
        mean(parsed
            .iter()
            .filter(|(r, s, _)| *r == last && s == name)
            .map(|(_, _, v)| *v))
    };
    Ok((last, pick("observed"), pick("unobserved")))
}

/// Rebuilds a [`ReportSummary`] from `scalars.csv`, `alignment.csv` and
/// `dynamics.csv` in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<ReportSummary> {
    let scalars = dir.join("scalars.csv");
    let rows = read_rows(&scalars)?;
    let mut last_round = None;
    let mut final_accuracy = None;
    let mut best: Option<f64> = None;
    for (i, rec) in rows.iter().enumerate() {
        let round: Option<usize> = field(&scalars, i + 2, rec, 0)?;
        let acc: Option<f64> = field(&scalars, i + 2, rec, 5)?;
        last_round = round;
        final_accuracy = acc;
        if let Some(a) = acc {
            best = Some(best.map_or(a, |b| b.max(a)));
        }
    }
    let align = dir.join("alignment.csv");
    let (alignment_round, obs_align, unobs_align) = last_round_means(&align, 4, 6)?;
    let (_, obs_gap, unobs_gap) = last_round_means(&align, 4, 10)?;
    let (dynamics_round, obs_angle, unobs_angle) = last_round_means(&dir.join("dynamics.csv"), 2, 4)?;
    Ok(ReportSummary {
        scalar_rows: rows.len(),
        last_round,
        final_accuracy,
        best_accuracy: best,
        alignment_round,
        observed_local_alignment: obs_align,
        unobserved_local_alignment: unobs_align,
        observed_alignment_gap: obs_gap,
        unobserved_alignment_gap: unobs_gap,
        dynamics_round,
        observed_angle: obs_angle,
        unobserved_angle: unobs_angle,
    })
}
