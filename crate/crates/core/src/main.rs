use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmae::corpus::gen_corpus;
use mmae::data::{read_manifest, RawImage};
use mmae::error::{Error, Result};
use mmae::eval::write_metrics_csv;
use mmae::experiments::{ablation, evaluate, layer_sweep, EvalTask, ExperimentReport, Split};
use mmae::harness::{load_checkpoint, pretrain_gradcheck, Corpus, RunConfig, Trainer};
use mmae::Model;

#[derive(Parser)]
#[command(
    name = "mmae",
    version,
    about = "Multi-modal masked autoencoder pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape-caption corpus (PGM images plus manifest.tsv).
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
        /// Image side in pixels; defaults to the configured image size.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Pre-train on the configured corpus; writes checkpoint.bin, metrics.csv, config.txt.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a desk task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// classify, retrieve-zs or retrieve-ft
        #[arg(long)]
        task: String,
        /// train or heldout
        #[arg(long, default_value = "train")]
        split: String,
        /// Recall cut-offs for retrieval.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Also write the full score matrix.
        #[arg(long)]
        scores: bool,
    },
    /// One pre-training run per MIM representation layer.
    LayerSweep {
        #[command(flatten)]
        common: Common,
        /// Layers to sweep; defaults to `sweep_layers` or 0..=fusion_depth.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// MIM x MLM ablation grid with matching always on.
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    /// End-to-end finite-difference gradient check on the tiny layout.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 6)]
        max_per_tensor: usize,
        #[arg(long, default_value_t = 0.1)]
        init_std: f64,
    },
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

fn load_corpus(run: &RunConfig) -> Result<(Corpus, mmae::transformer::ModelConfig)> {
    Corpus::load(run.corpus_path()?, run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_report(out: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(out)?;
    write(
        &out.join(format!("{}.csv", report.experiment)),
        &report.to_csv(),
    )?;
    write(
        &out.join(format!("{}.json", report.experiment)),
        &report.to_json(),
    )?;
    print!("{}", report.to_csv());
    for n in &report.notes {
        println!("# {n}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, n, side } => {
            let run = load_run(&common)?;
            let config = run.model_config(mmae::data::RESERVED.len() + 1)?;
            let side = side.unwrap_or(config.image_height);
            if side % config.patch != 0 {
                return Err(Error::Argument(format!(
                    "image side {side} is not divisible by the patch size {}",
                    config.patch
                )));
            }
            let entries = gen_corpus(n, run.train.seed, side, &common.out)?;
            println!(
                "wrote {} pairs to {}",
                entries.len(),
                common.out.join("manifest.tsv").display()
            );
        }
        Command::Pretrain { common } => {
            let run = load_run(&common)?;
            let (corpus, config) = load_corpus(&run)?;
            fs::create_dir_all(&common.out)?;
            write(&common.out.join("config.txt"), &run.to_text())?;
            let model = Model::<f32>::new(&config, run.train.seed)?;
            let mut trainer = Trainer::new(model, run.train.clone(), &corpus)?;
            trainer.log_to(&common.out.join("metrics.csv"))?;
            trainer.checkpoint_to(&common.out.join("checkpoint.bin"));
            trainer.run()?;
            if let (Some(first), Some(last)) = (trainer.history.first(), trainer.history.last()) {
                println!(
                    "steps={} initial_total={:.6} final_total={:.6}",
                    trainer.step, first.report.total, last.report.total
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            task,
            split,
            k,
            scores,
        } => {
            let task: EvalTask = task.parse()?;
            let split: Split = split.parse()?;
            let run = load_run(&common)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let entries = read_manifest(run.corpus_path()?)?;
            let images = entries
                .iter()
                .map(|e| RawImage::load(&e.image))
                .collect::<Result<Vec<_>>>()?;
            let captions: Vec<String> = entries.into_iter().map(|e| e.caption).collect();
            let corpus = Corpus::with_vocab(
                &images,
                &captions,
                ckpt.manifest.vocab.clone(),
                &ckpt.model.config,
            )?;
            let out = evaluate(&ckpt.model, &corpus, task, split, &k, &run, run.train.seed)?;
            fs::create_dir_all(&common.out)?;
            let stem = format!("eval_{}_{}", task.name(), split.name());
            write_metrics_csv(&common.out.join(format!("{stem}.csv")), &out.rows)?;
            if let (true, Some(m)) = (scores, &out.scores) {
                write(&common.out.join(format!("{stem}_scores.csv")), &m.to_csv())?;
            }
            print!("{}", mmae::eval::metrics_csv(&out.rows));
        }
        Command::LayerSweep { common, layers } => {
            let run = load_run(&common)?;
            let (corpus, config) = load_corpus(&run)?;
            let layers = match (layers.is_empty(), run.sweep_layers.is_empty()) {
                (false, _) => layers,
                (true, false) => run.sweep_layers.clone(),
                (true, true) => (0..=config.fusion_depth).collect(),
            };
            write_report(&common.out, &layer_sweep(&run, &corpus, &config, &layers)?)?;
        }
        Command::Ablation { common } => {
            let run = load_run(&common)?;
            let (corpus, config) = load_corpus(&run)?;
            write_report(&common.out, &ablation(&run, &corpus, &config)?)?;
        }
        Command::GradCheck {
            common,
            max_per_tensor,
            init_std,
        } => {
            let seed = common.seed.unwrap_or(0);
            let r = pretrain_gradcheck(seed, max_per_tensor, init_std)?;
            let json = serde_json::to_string_pretty(&r).expect("report serializes");
            fs::create_dir_all(&common.out)?;
            write(&common.out.join("grad_check.json"), &json)?;
            println!(
                "f64_max_rel_error={:e} f32_max_rel_error={:e} seconds={:.2}",
                r.f64_report.max_rel_error, r.f32_report.max_rel_error, r.seconds
            );
        }
    }
    Ok(())
}

fn error_line(e: &Error) -> String {
    let msg = match e {
        Error::Parse { msg, .. } => msg.clone(),
        Error::Argument(m) | Error::Usage(m) | Error::Config(m) | Error::Integrity(m) => m.clone(),
        Error::Io(io) => io.to_string(),
    };
    let line = match e {
        Error::Parse { line, .. } => format!(" line={line}"),
        _ => String::new(),
    };
    format!(
        "error kind={}{line} msg={}",
        e.kind(),
        serde_json::to_string(&msg).expect("string serializes")
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", error_line(&Error::Usage(first)));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
