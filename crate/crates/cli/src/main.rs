use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tal_cli::commands::{self, EvalOptions, GradcheckOptions, InferOptions, Oracle, TrainOptions};
use tal_cli::config::{thread_count, RunConfig};
use tal_core::formats::ANNOTATION_FILE;
use tal_core::gradsuite::Fault;
use tal_core::inference::{Decay, PeakRule, RefineMode};
use tal_core::losses::LossWeights;
use tal_core::synthetic::Subset;
use tal_core::{Error, ErrorKind, Result};

/// Bottom-up temporal action localization on synthetic feature sequences.
#[derive(Parser)]
#[command(name = "tal", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: config `threads`, then TAL_THREADS, then one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus: feature files, annotations.json, manifest.json.
    GenData(GenDataArgs),
    /// Train the network on the training split.
    Train(TrainArgs),
    /// Produce a proposal file from a checkpoint.
    Infer(InferArgs),
    /// Score a proposal file: metrics.json and ar_an.csv.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed (overrides synthetic.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Total epochs (overrides train.epochs; the lr switch moves to half of it).
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss weights cls,reg,intra,inter, e.g. 1,1,0,0 for the plain baseline.
    #[arg(long, value_name = "CLS,REG,INTRA,INTER")]
    loss_weights: Option<String>,
    /// Initialization and shuffling seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write epoch_NNN.ckpt after every epoch.
    #[arg(long)]
    save_every_epoch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Test,
    All,
}

impl SubsetArg {
    fn subset(self) -> Option<Subset> {
        match self {
            SubsetArg::Train => Some(Subset::Train),
            SubsetArg::Test => Some(Subset::Test),
            SubsetArg::All => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineArg {
    Off,
    ScoreThenRefine,
    RefineThenScore,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by train.
    #[arg(long, required_unless_present = "phases_from_labels")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Proposal file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
    /// Soft-NMS decay parameter.
    #[arg(long)]
    sigma: Option<f64>,
    /// Proposals kept per video.
    #[arg(long)]
    top_k: Option<usize>,
    /// Use the strict-rise candidate rule p[t-1] < p[t] < p[t+1] instead of local peaks.
    #[arg(long)]
    rise_rule: bool,
    /// Where boundary offsets are applied relative to scoring.
    #[arg(long, value_enum)]
    refine: Option<RefineArg>,
    /// Linear Soft-NMS decay instead of Gaussian.
    #[arg(long)]
    linear_decay: bool,
    /// Debug: use ground-truth labels as phase probabilities and offsets.
    #[arg(long)]
    phases_from_labels: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Rank,
    Cls,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    /// Proposal file written by infer.
    #[arg(long)]
    proposals: PathBuf,
    /// Dataset directory holding annotations.json.
    #[arg(long, required_unless_present = "annotations", conflicts_with = "annotations")]
    data: Option<PathBuf>,
    /// Annotation file, instead of --data.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Output directory for metrics.json and ar_an.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also report metrics with ground-truth ranking, classes, or both.
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Intra,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated ops to check (default: all).
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    /// Random points per op.
    #[arg(long, default_value_t = GradcheckOptions::default().points)]
    points: usize,
    /// Sequence length for the network-level check.
    #[arg(long, default_value_t = GradcheckOptions::default().network_len)]
    network_len: usize,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt a gradient on purpose (negative control).
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data | ErrorKind::Contract => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut config, &cli.command)?;
    config.validate()?;
    if let Some(n) = thread_count(cli.threads, &config)? {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::GenData(a) => {
            let n = commands::gen_data(&config, &a.out)?;
            println!("wrote {n} videos to {}", a.out.display());
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                resume: a.resume,
                save_every_epoch: a.save_every_epoch,
            };
            let history = commands::train(&config, &a.data, &a.out, &opts)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: total {:.5} cls {:.5} reg {:.5} intra {:.5} inter {:.5}",
                    history.len(),
                    last.l_total,
                    last.l_cls,
                    last.l_reg,
                    last.l_intra,
                    last.l_inter
                );
            }
            println!("checkpoint: {}", a.out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Infer(a) => {
            let opts = InferOptions {
                subset: a.subset.subset(),
                phases_from_labels: a.phases_from_labels,
            };
            let props = commands::infer(&config, a.checkpoint.as_deref(), &a.data, &a.out, &opts)?;
            let total: usize = props.values().map(Vec::len).sum();
            println!("{total} proposals for {} videos -> {}", props.len(), a.out.display());
        }
        Command::Eval(a) => {
            let annotations = match (&a.annotations, &a.data) {
                (Some(p), _) => p.clone(),
                (None, Some(d)) => d.join(ANNOTATION_FILE),
                (None, None) => unreachable!("clap requires one"),
            };
            let opts = EvalOptions {
                oracle: a.oracle.map(|o| match o {
                    OracleArg::Rank => Oracle::Rank,
                    OracleArg::Cls => Oracle::Cls,
                    OracleArg::Both => Oracle::Both,
                }),
                subset: a.subset.subset(),
            };
            let report = commands::eval(&config, &a.proposals, &annotations, &a.out, &opts)?;
            print_metrics("model", &report.model);
            for (name, m) in [
                ("oracle rank", &report.oracle_rank),
                ("oracle cls", &report.oracle_cls),
                ("oracle both", &report.oracle_both),
            ] {
                if let Some(m) = m {
                    print_metrics(name, m);
                }
            }
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions {
                seed: a.seed,
                ops: a.ops,
                points: a.points,
                network_len: a.network_len,
                fault: a.inject_fault.map(|FaultArg::Intra| Fault::IntraSignFlip),
            };
            let reports = commands::gradcheck(&config, &opts)?;
            println!("{:<24} {:>7} {:>9} {:>7} {:>12}  result", "op", "points", "checked", "kinks", "max rel err");
            for r in &reports {
                println!(
                    "{:<24} {:>7} {:>9} {:>7} {:>12.3e}  {}",
                    r.op,
                    r.points,
                    r.checked,
                    r.skipped_at_kink,
                    r.max_rel_error,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(out) = &a.out {
                tal_core::formats::write_json(out, &reports)?;
            }
            if reports.iter().any(|r| !r.passed) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(config: &mut RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            if let Some(s) = a.seed {
                config.synthetic.seed = s;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                config.train.epochs = e;
                config.train.switch_epoch = e / 2;
            }
            if let Some(w) = &a.loss_weights {
                config.train.weights = LossWeights::parse(w)?;
            }
            if let Some(s) = a.seed {
                config.train.seed = s;
            }
        }
        Command::Infer(a) => {
            let inf = &mut config.inference;
            if let Some(s) = a.sigma {
                inf.soft_nms.sigma = s;
            }
            if let Some(k) = a.top_k {
                inf.soft_nms.top_k = k;
            }
            if a.rise_rule {
                inf.peak_rule = PeakRule::Rise;
            }
            if let Some(r) = a.refine {
                inf.refine = match r {
                    RefineArg::Off => RefineMode::Off,
                    RefineArg::ScoreThenRefine => RefineMode::ScoreThenRefine,
                    RefineArg::RefineThenScore => RefineMode::RefineThenScore,
                };
            }
            if a.linear_decay {
                inf.soft_nms.decay = Decay::Linear;
            }
        }
        Command::Eval(_) | Command::Gradcheck(_) | Command::ShowConfig => {}
    }
    Ok(())
}

fn print_metrics(name: &str, m: &tal_core::evaluation::Metrics) {
    let ar: Vec<String> = m.ar_an.iter().map(|p| format!("AR@{}={:.4}", p.an, p.ar)).collect();
    let map: Vec<String> = m.map.iter().map(|p| format!("{:.2}:{:.4}", p.iou, p.map)).collect();
    println!("[{name}] {} AUC={:.4}", ar.join(" "), m.auc);
    println!("[{name}] mAP {} avg={:.4}", map.join(" "), m.average_map);
}
