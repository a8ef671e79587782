use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use toolgate::fisher_gate::write_importance_csv;
use toolgate::synth::{load_dataset, write_dataset, Manifest};
use toolgate::train::ablation::format_table;
use toolgate::train::metrics::write_metrics_csv;
use toolgate::train::{evaluate, pretrain, run_ablation, Checkpoint, Mode, TrainConfig, Trainer};
use toolgate::{Error, Result};

#[derive(Parser)]
#[command(name = "toolgate", version, about = "Gated adapter fine-tuning on synthetic multi-domain segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a manifest and write it to disk.
    GenData { manifest: PathBuf, out_dir: PathBuf },
    /// Pretrain, then fine-tune one run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's target domains.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Write the importance history of a finished run as CSV.
    ExportImportance { run_dir: PathBuf, csv: PathBuf },
    /// Run the mode matrix over several seeds and print a comparison table.
    Ablate {
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's ablation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    freq_bottleneck: Option<usize>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
}

impl TrainArgs {
    /// Applies command-line overrides. Toolbox flags are rejected for modes
    /// that attach no toolbox.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::load(&self.config)?;
        if let Some(m) = &self.mode {
            cfg.mode = m.parse()?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iterations {
            cfg.total_iterations = n;
        }
        let toolbox_flags = [
            self.rank.is_some(),
            self.bottleneck.is_some(),
            self.freq_bottleneck.is_some(),
            self.cutoff.is_some(),
            self.top_k.is_some(),
        ];
        if !cfg.mode.uses_toolbox() && toolbox_flags.iter().any(|f| *f) {
            return Err(Error::Config(format!("mode {} takes no toolbox flags", cfg.mode)));
        }
        if self.top_k.is_some() && !cfg.mode.is_gated() {
            return Err(Error::Config(format!("mode {} does not gate; --top-k is meaningless", cfg.mode)));
        }
        let tb = &mut cfg.toolbox;
        tb.rank = self.rank.unwrap_or(tb.rank);
        tb.bottleneck = self.bottleneck.unwrap_or(tb.bottleneck);
        tb.freq_bottleneck = self.freq_bottleneck.unwrap_or(tb.freq_bottleneck);
        tb.cutoff = self.cutoff.unwrap_or(tb.cutoff);
        cfg.gate.top_k = self.top_k.unwrap_or(cfg.gate.top_k);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mean_miou(records: &[toolgate::train::MetricsRecord]) -> f64 {
    records.iter().map(|r| r.miou).sum::<f64>() / records.len().max(1) as f64
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let (_, bench) = load_dataset(&cfg.dataset)?;
    toolgate::train::trainer::check_compatible(&cfg, &bench.config)?;
    println!("pretraining backbone for {} iterations", cfg.pretrain.iterations);
    let base = pretrain(&cfg, &bench)?;
    let mut trainer = Trainer::new(cfg.clone(), &base)?;
    let step = cfg.eval_interval();
    while !trainer.is_finished() {
        let next = (trainer.iteration() + step).min(cfg.total_iterations);
        let seen = trainer.metrics.len();
        trainer.run_until(&bench, next)?;
        let fresh = &trainer.metrics[seen..];
        if !fresh.is_empty() {
            println!(
                "iter {:>6}  loss {:.4}  target mIoU {:.4}  trainable {}",
                trainer.iteration(),
                trainer.losses.last().copied().unwrap_or(f64::NAN),
                mean_miou(fresh),
                trainer.trainable_now()
            );
        }
    }
    trainer.write_run_dir(&args.out)?;
    println!(
        "done: mode {}, trainable now {}, ever trainable {}, run written to {}",
        cfg.mode,
        trainer.trainable_now(),
        trainer.trainable_cumulative(),
        args.out.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, domain: Option<&str>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let (_, mut bench) = load_dataset(dataset)?;
    toolgate::train::trainer::check_compatible(&trainer.config, &bench.config)?;
    if let Some(d) = domain {
        bench.targets.retain(|t| t.spec.name == d);
        if bench.targets.is_empty() {
            return Err(Error::Dataset(format!("no target domain named '{d}'")));
        }
    }
    let records = evaluate(&trainer.model, &bench, trainer.iteration())?;
    let mut out = std::io::stdout().lock();
    write_metrics_csv(&mut out, trainer.config.backbone.num_classes, &records)
}

fn export_importance(run_dir: &Path, csv: &Path) -> Result<()> {
    let ck = Checkpoint::load(&run_dir.join("final.ckpt"))?;
    let mut w = BufWriter::new(fs::File::create(csv)?);
    write_importance_csv(&mut w, &ck.history)
}

fn ablate(config: &Path, seeds: Option<&[u64]>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    cfg.validate()?;
    let (_, bench) = load_dataset(&cfg.dataset)?;
    toolgate::train::trainer::check_compatible(&cfg, &bench.config)?;
    let seeds = seeds.unwrap_or(&cfg.ablation.seeds);
    let modes: Vec<Mode> = cfg.ablation.modes.clone();
    let base = pretrain(&cfg, &bench)?;
    let rows = run_ablation(&cfg, &bench, &base, &modes, seeds)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { manifest, out_dir } => {
            let m = Manifest::load(&manifest)?;
            let bench = write_dataset(&m, &out_dir)?;
            println!(
                "wrote {} train samples and {} target domains to {}",
                bench.train.len(),
                bench.targets.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Eval {
            checkpoint,
            dataset,
            domain,
        } => eval(&checkpoint, &dataset, domain.as_deref()),
        Command::ExportImportance { run_dir, csv } => export_importance(&run_dir, &csv),
        Command::Ablate { config, seeds } => ablate(&config, seeds.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
