//! Command-line entry points for training, evaluation, baselines, and plots.

use clap::{Parser, Subcommand};
use semhop::codec::{load_checkpoint, save_checkpoint, Arch};
use semhop::config::Config;
use semhop::data::{self, Split};
use semhop::error::Error;
use semhop::harness::{self, baseline, plot};
use semhop::training::{self, SnrMode, TrainConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "semhop", version, about = "Multi-hop semantic image transmission toolkit")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every seed (train and eval).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the channel SNR in dB (train and eval).
    #[arg(long, global = true)]
    snr_db: Option<f64>,

    /// Override the number of hops to evaluate.
    #[arg(long, global = true)]
    hops: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (CIFAR-10 binary layout) under data.root.
    GenData {
        /// Corpus seed.
        #[arg(long, default_value_t = 1234)]
        corpus_seed: u64,
    },
    /// Train a codec on the single-hop objective.
    TrainSingle {
        /// Output directory (defaults to out.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a single-hop checkpoint with recursive multi-hop training.
    TrainRecursive {
        /// Single-hop checkpoint to warm-start from (required).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the multi-hop grid and write metrics CSV.
    Evaluate {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Scheme label override for the records.
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Run the separate-coding baseline surrogate and write metrics CSV.
    BaselineSeparate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an SVG plot from metrics CSV files.
    Plot {
        /// `hops` (PSNR vs transmissions) or `snr` (PSNR vs channel SNR).
        #[arg(long)]
        kind: String,
        /// Input metrics CSV (repeatable).
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Hop selector for `--kind snr`, e.g. `4,10`.
        #[arg(long = "at-hops", default_value = "4,10")]
        at_hops: String,
    },
    /// Merge metrics CSV files into one canonically sorted CSV.
    Export {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> semhop::Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.eval.seed = seed;
    }
    if let Some(snr) = cli.snr_db {
        config.channel.snr_db = snr;
        config.train.snr_db = snr;
        config.train.snr_mode = SnrMode::Fixed;
        config.eval.snr_list = vec![snr];
    }
    if let Some(hops) = cli.hops {
        config.eval.hops = hops;
    }
    config.validate()?;
    Ok(config)
}

fn load_train_set(config: &Config) -> semhop::Result<data::ImageSet> {
    let root = data::ensure_dataset(&config.data.root, config.data.download)?;
    let set = data::load_dataset(&root, Split::Train)?;
    match config.data.subset_size {
        Some(n) => data::subset(&set, n, config.data.subset_seed),
        None => Ok(set),
    }
}

fn load_test_set(config: &Config) -> semhop::Result<data::ImageSet> {
    let root = data::ensure_dataset(&config.data.root, config.data.download)?;
    data::load_dataset(&root, Split::Test)
}

fn default_scheme(arch: Arch, phase: &str) -> String {
    let base = match arch {
        Arch::Vitsc => "vitsc",
        Arch::Deepjscc => "deepjscc",
    };
    if phase == "recursive" {
        format!("{base}+rt")
    } else {
        base.to_string()
    }
}

fn train_snr_label(meta: &semhop::codec::CheckpointMeta) -> String {
    meta.train
        .as_ref()
        .and_then(|v| serde_json::from_value::<TrainConfig>(v.clone()).ok())
        .map(|t| t.snr_label())
        .unwrap_or_else(|| "untrained".to_string())
}

fn run(cli: &Cli) -> semhop::Result<()> {
    match &cli.command {
        Command::GenData { corpus_seed } => {
            let config = load_config(cli)?;
            data::synth::generate_corpus(&config.data.root, *corpus_seed)?;
            println!("synthetic corpus written to {}", config.data.root.display());
        }
        Command::TrainSingle { out } => {
            let config = load_config(cli)?;
            let out_dir = out.clone().unwrap_or_else(|| config.out.dir.clone());
            let train_set = load_train_set(&config)?;
            let run_log = out_dir.join("single_hop-runlog.jsonl");
            let (_, cp, meta) = training::train_single_hop(
                &config.train,
                &config.model,
                config.channel.kind,
                &train_set,
                Some(&run_log),
            )?;
            let ckpt = out_dir.join("single_hop.ck");
            save_checkpoint(&ckpt, &cp, &meta)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::TrainRecursive { init, out } => {
            let config = load_config(cli)?;
            let out_dir = out.clone().unwrap_or_else(|| config.out.dir.clone());
            let train_set = load_train_set(&config)?;
            let warm = load_checkpoint(init)?;
            let run_log = out_dir.join("recursive-runlog.jsonl");
            let (_, cp, meta) =
                training::train_recursive(&config.train, warm, config.channel.kind, &train_set, Some(&run_log))?;
            let ckpt = out_dir.join("recursive.ck");
            save_checkpoint(&ckpt, &cp, &meta)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Evaluate { ckpt, out, scheme } => {
            let config = load_config(cli)?;
            let (codec, cp, meta) = load_checkpoint(ckpt)?;
            let test_set = load_test_set(&config)?;
            let scheme = scheme.clone().unwrap_or_else(|| default_scheme(cp.config.arch, &meta.phase));
            let train_snr = train_snr_label(&meta);
            let (records, stats) = harness::evaluate_chain(
                &codec,
                &cp,
                &test_set,
                config.channel.kind,
                &config.eval,
                &scheme,
                &train_snr,
            )?;
            if stats.deep_fade_guards > 0 {
                log::info!("{} deep-fade guard events during evaluation", stats.deep_fade_guards);
            }
            harness::export_metrics(&records, out)?;
            println!("{} records written to {}", records.len(), out.display());
        }
        Command::BaselineSeparate { out } => {
            let config = load_config(cli)?;
            let test_set = load_test_set(&config)?;
            let records = baseline::evaluate_separate(
                &test_set,
                config.channel.kind,
                &config.eval.snr_list,
                config.eval.hops,
                config.eval.n_images,
                config.model.symbols(),
                config.model.cbr,
                &config.baseline,
                config.eval.seed,
            )?;
            harness::export_metrics(&records, out)?;
            println!("{} records written to {}", records.len(), out.display());
        }
        Command::Plot { kind, inputs, out, at_hops } => {
            let mut records = Vec::new();
            for input in inputs {
                records.extend(harness::read_metrics(input)?);
            }
            match kind.as_str() {
                "hops" => plot::plot_psnr_vs_hops(&records, out)?,
                "snr" => {
                    let hops: Vec<u32> = at_hops
                        .split(',')
                        .map(|h| {
                            h.trim()
                                .parse::<u32>()
                                .map_err(|_| Error::Argument(format!("bad hop selector component {h:?}")))
                        })
                        .collect::<semhop::Result<_>>()?;
                    plot::plot_psnr_vs_snr(&records, &hops, out)?;
                }
                other => {
                    return Err(Error::Argument(format!(
                        "unknown plot kind {other:?} (expected `hops` or `snr`)"
                    )))
                }
            }
            println!("plot written to {}", out.display());
        }
        Command::Export { inputs, out } => {
            let mut records = Vec::new();
            for input in inputs {
                records.extend(harness::read_metrics(input)?);
            }
            harness::export_metrics(&records, out)?;
            println!("{} records written to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
