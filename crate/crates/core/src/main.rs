use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedsim::analysis::FineTuneConfig;
use fedsim::classifier::{ClassifierKind, ClassifierMatrix};
use fedsim::io::{self, ExperimentConfig, OUTPUT_DIR_ENV};
use fedsim::losses::{BaseLoss, LossSpec, Regularizer};
use fedsim::numerics::SeededRng;
use fedsim::partition::{partition_stats, Strategy};
use fedsim::{gradcheck, Error, Result};

/// Deterministic federated-learning simulator.
///
/// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
#[derive(Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a client partition and print its audit.
    Partition(PartitionArgs),
    /// Run federated training and write result files.
    Train(TrainArgs),
    /// Fine-tune a trained global model on every client.
    Finetune(FinetuneArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Build a simplex ETF head and measure its deviations.
    Etfcheck {
        #[arg(long)]
        classes: usize,
        /// Defaults to max(classes, 16).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Summarize the CSV files of a results directory.
    Report {
        /// Defaults to the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Dr,
    Drplus,
    Fd,
}

impl From<LossArg> for BaseLoss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => BaseLoss::Ce,
            LossArg::Dr => BaseLoss::Dr,
            LossArg::Drplus => BaseLoss::Drplus,
            LossArg::Fd => BaseLoss::Fd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Etf,
    Random,
    Trainable,
}

/// Flags shared by the commands that read an experiment config. The config
/// file is authoritative; flags override single fields.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Without it the built-in defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and the environment variable.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Partition seed.
    #[arg(long)]
    partition_seed: Option<u64>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated lr milestones; an empty string clears them.
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    prox: Option<f64>,
    #[arg(long)]
    kd: Option<f64>,
    #[arg(long)]
    ntd: Option<f64>,
    #[arg(long)]
    ld: Option<f64>,
    /// Distillation temperature for --kd / --ntd.
    #[arg(long, default_value_t = 3.0)]
    tau: f64,
    #[arg(long, value_enum)]
    classifier: Option<HeadArg>,
    /// Label sharding with this many shards per client.
    #[arg(long, conflicts_with = "alpha")]
    shards: Option<usize>,
    /// LDA partitioning with this concentration.
    #[arg(long)]
    alpha: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let fl = &mut cfg.fl;
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = self.$flag {
                    $field = v;
                }
            };
        }
        set!(partition_seed => cfg.seed);
        set!(seed => fl.seed);
        set!(clients => fl.n_clients);
        set!(rounds => fl.rounds);
        set!(participation => fl.participation);
        set!(local_epochs => fl.local_epochs);
        set!(batch_size => fl.batch_size);
        set!(lr => fl.lr);
        set!(beta => fl.loss.beta);
        if let Some(m) = &self.milestones {
            fl.milestones = m
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad milestone `{s}`"))))
                .collect::<Result<_>>()?;
        }
        if let Some(l) = self.loss {
            fl.loss.base = l.into();
        }
        let regs = [
            self.prox.map(|mu| Regularizer::Prox { mu }),
            self.kd.map(|weight| Regularizer::Kd { weight, tau: self.tau }),
            self.ntd.map(|weight| Regularizer::Ntd { weight, tau: self.tau }),
            self.ld.map(|weight| Regularizer::Ld { weight }),
        ];
        match regs.iter().flatten().collect::<Vec<_>>().as_slice() {
            [] => {}
            [r] => fl.loss.regularizer = Some(**r),
            _ => return Err(Error::Config("at most one of --prox/--kd/--ntd/--ld".into())),
        }
        if let Some(h) = self.classifier {
            fl.classifier = match h {
                HeadArg::Etf => ClassifierKind::Etf,
                HeadArg::Random => ClassifierKind::Random,
                HeadArg::Trainable => ClassifierKind::Trainable,
            };
        }
        if let Some(s) = self.shards {
            cfg.partition = Strategy::Shard { shards_per_client: s };
        }
        if let Some(alpha) = self.alpha {
            cfg.partition = Strategy::Lda { alpha };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--output`, then the environment variable, then the config.
    fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.output.clone().unwrap_or_else(|| cfg.resolved_output_dir())
    }
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Where to write the partition; defaults to `<output>/partition.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Minimum training count for a class to count as observed.
    #[arg(long, default_value_t = 1)]
    threshold: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Use this partition file instead of drawing one.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Threads for client episodes. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Global model checkpoint; defaults to `<output>/model.json`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Defaults to `<output>/partition.json`.
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long)]
    ft_epochs: Option<usize>,
    #[arg(long)]
    ft_lr: Option<f64>,
    #[arg(long, value_enum)]
    ft_loss: Option<LossArg>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let data = cfg.load_data()?;
    let p = cfg.build_partition(&data)?;
    p.validate(data.train.len())?;
    let out = match &args.out {
        Some(path) => path.clone(),
        None => {
            let dir = args.cfg.output_dir(&cfg);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            dir.join("partition.json")
        }
    };
    io::save_partition(&out, &p)?;
    let stats = partition_stats(&p, data.train.labels(), data.train.num_classes(), args.threshold);
    let sizes = p.client_sizes();
    print_json(&serde_json::json!({
        "file": out,
        "clients": p.n_clients,
        "assigned": p.total_assigned(),
        "train_samples": data.train.len(),
        "min_client_size": sizes.iter().min(),
        "max_client_size": sizes.iter().max(),
        "distinct_classes": (0..p.n_clients).map(|k| stats.distinct_classes(k)).collect::<Vec<_>>(),
        "entropy": stats.entropy,
    }))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let dir = args.cfg.output_dir(&cfg);
    let summary = match &args.partition {
        Some(path) => {
            let data = cfg.load_data()?;
            let p = io::load_partition(path)?;
            io::run_experiment_with(&cfg, &data, &p, &dir, args.workers)?
        }
        None => io::run_experiment(&cfg, &dir, args.workers)?,
    };
    log::info!("results written to {}", dir.display());
    print_json(&summary)
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let dir = args.cfg.output_dir(&cfg);
    let mut ft = match (&cfg.finetune, args.ft_lr) {
        (Some(ft), _) => ft.clone(),
        (None, Some(lr)) => FineTuneConfig::new(LossSpec::new(BaseLoss::Dr), 5, lr),
        (None, None) => {
            return Err(Error::Config(
                "fine-tuning lr is required: set `finetune.lr` in the config or pass --ft-lr".into(),
            ))
        }
    };
    if let Some(lr) = args.ft_lr {
        ft.lr = lr;
    }
    if let Some(e) = args.ft_epochs {
        ft.epochs = e;
    }
    if let Some(l) = args.ft_loss {
        ft.loss.base = l.into();
    }
    ft.loss.validate()?;
    let model = args.model.clone().unwrap_or_else(|| dir.join("model.json"));
    let partition = io::load_partition(&args.partition.clone().unwrap_or_else(|| dir.join("partition.json")))?;
    let report = io::run_finetune(&cfg, &ft, &model, &partition, &dir)?;
    print_json(&serde_json::json!({
        "loss": ft.loss.label(),
        "epochs": ft.epochs,
        "clients": report.clients.len(),
        "excluded": report.excluded,
        "mean_before": report.mean_before,
        "mean": report.mean,
        "std": report.std,
    }))
}

fn cmd_gradcheck(cases: usize, seed: u64, tolerance: f64) -> Result<()> {
    let results = gradcheck::run(cases, seed)?;
    print_json(&results)?;
    match results.iter().find(|r| !(r.max_relative_error < tolerance)) {
        Some(r) => Err(Error::Contract(format!(
            "{}: relative error {:e} exceeds {tolerance:e}",
            r.loss, r.max_relative_error
        ))),
        None => Ok(()),
    }
}

fn cmd_etfcheck(classes: usize, dim: Option<usize>, seed: u64, tolerance: f64) -> Result<()> {
    let d = dim.unwrap_or(classes.max(16));
    let v = ClassifierMatrix::build_etf(d, classes, &SeededRng::new(seed))
        .map_err(|e| Error::Validation(e.to_string()))?;
    let r = v.validate_etf()?;
    print_json(&serde_json::json!({
        "classes": classes,
        "dim": d,
        "target_cosine": -1.0 / (classes as f64 - 1.0),
        "max_norm_deviation": r.max_norm_deviation,
        "max_cosine_deviation": r.max_cosine_deviation,
    }))?;
    if r.max_norm_deviation.max(r.max_cosine_deviation) > tolerance {
        return Err(Error::Contract(format!("ETF deviation exceeds {tolerance:e}")));
    }
    Ok(())
}

fn cmd_report(dir: Option<&Path>) -> Result<()> {
    let dir = match dir {
        Some(d) => d.to_owned(),
        None => ExperimentConfig::default().resolved_output_dir(),
    };
    print_json(&io::summarize_dir(&dir)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("output dir override variable: {OUTPUT_DIR_ENV}");
    let result = match &cli.command {
        Command::Partition(a) => cmd_partition(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Gradcheck {
            cases,
            seed,
            tolerance,
        } => cmd_gradcheck(*cases, *seed, *tolerance),
        Command::Etfcheck {
            classes,
            dim,
            seed,
            tolerance,
        } => cmd_etfcheck(*classes, *dim, *seed, *tolerance),
        Command::Report { dir } => cmd_report(dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
