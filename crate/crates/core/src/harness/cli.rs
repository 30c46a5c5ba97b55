//! CLI entry: `pretrain | probe | robustness | ablate | export-masks`.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the TOML
//! config file, `CLOUDMASK_*` environment variables, `--set` overrides,
//! dedicated flags. Exit codes: 0 success, 2 usage error, 1 anything else;
//! failures print a single `error: ...` line on stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{build_dataset, env_override, load_spec, ExperimentSpec};
use super::experiment::{
    evaluate, export_mask_decisions, mask_coverage, run_ablation, MetricsRecord,
};
use super::io;
use crate::error::{Error, Result};
use crate::pipeline::{extract_features, train, Model};
use crate::seeds;

#[derive(Parser)]
#[command(
    name = "cloudmask",
    version,
    about = "Attention-guided masking and contrastive pretraining for point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model; writes checkpoints and the per-epoch report
    Pretrain(CommonArgs),
    /// Clean-test probe accuracy of a pretrained checkpoint
    Probe(EvalArgs),
    /// Probe accuracy under every configured perturbation
    Robustness(EvalArgs),
    /// Train the full strategy/loss and mask-ratio ablation matrix
    Ablate(CommonArgs),
    /// One mask decision per test sample from a pretrained checkpoint
    ExportMasks(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default "out")
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train.lambda=0.4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also export per-sample features (TSV, label last column)
    #[arg(long)]
    features: Option<PathBuf>,
}

impl CommonArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let config_path = self
            .config
            .clone()
            .or_else(|| env_override("CONFIG").map(PathBuf::from));

        let mut overrides: Vec<String> = Vec::new();
        if let Some(seed) = env_override("SEED") {
            overrides.push(format!("train.seed={seed}"));
        }
        if let Some(dir) = env_override("DATA_DIR") {
            overrides.push("data.kind=dir".to_string());
            overrides.push(format!("data.dir={dir:?}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        load_spec(config_path.as_deref(), &overrides)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| env_override("OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

impl EvalArgs {
    fn checkpoint(&self) -> Result<PathBuf> {
        self.checkpoint
            .clone()
            .or_else(|| env_override("CHECKPOINT").map(PathBuf::from))
            .ok_or_else(|| Error::Usage("missing --checkpoint".into()))
    }

    fn load_model(&self, spec: &ExperimentSpec) -> Result<Model> {
        let model = Model::new(&spec.train.model, seeds::derive(spec.train.seed, "init", &[]))?;
        model.load(&self.checkpoint()?)?;
        Ok(model)
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("error: {}", first_line(&e.to_string()));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            2
        }
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            1
        }
    }
}

fn first_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("unknown failure")
        .trim_start_matches("error: ")
        .to_string()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let spec = args.spec()?;
            let out = args.out_dir();
            std::fs::create_dir_all(&out)?;
            write_spec_echo(&spec, &out)?;
            let (train_clouds, _) = build_dataset(&spec.data)?;
            let report = train(&spec.train, &train_clouds, &out)?;
            report.write(&out.join("report.tsv"))?;
            println!(
                "pretrained {} epochs; final total loss {:.6}; checkpoint {}",
                report.epochs.len(),
                report.epochs.last().map_or(f64::NAN, |e| e.total),
                report.checkpoint.display()
            );
            Ok(())
        }
        Command::Probe(args) => {
            let mut spec = args.common.spec()?;
            spec.eval.perturbations.clear();
            eval_command(&args, spec, "probe", false)
        }
        Command::Robustness(args) => {
            let spec = args.common.spec()?;
            eval_command(&args, spec, "robustness", true)
        }
        Command::Ablate(args) => {
            let spec = args.spec()?;
            let out = args.out_dir();
            std::fs::create_dir_all(&out)?;
            write_spec_echo(&spec, &out)?;
            let records = run_ablation(&spec, &out)?;
            for r in &records {
                println!(
                    "{}\tclean={:.4}\thash={}",
                    r.experiment_id, r.accuracies["clean"], r.config_hash
                );
            }
            Ok(())
        }
        Command::ExportMasks(args) => {
            let spec = args.common.spec()?;
            let model = args.load_model(&spec)?;
            let out = args.common.out_dir();
            std::fs::create_dir_all(&out)?;
            let (_, test_clouds) = build_dataset(&spec.data)?;
            let decisions = export_mask_decisions(&model, &spec, &test_clouds)?;
            let path = out.join("masks.jsonl");
            io::write_mask_decisions(&decisions, &path)?;
            println!("wrote {} mask decisions to {}", decisions.len(), path.display());
            Ok(())
        }
    }
}

fn eval_command(args: &EvalArgs, spec: ExperimentSpec, id: &str, coverage: bool) -> Result<()> {
    let model = args.load_model(&spec)?;
    let out = args.common.out_dir();
    std::fs::create_dir_all(&out)?;
    let started = std::time::Instant::now();
    let (train_clouds, test_clouds) = build_dataset(&spec.data)?;

    let accuracies = evaluate(&model, &spec, &train_clouds, &test_clouds)?;
    let mask_coverage = if coverage {
        Some(mask_coverage(&model, &spec, &test_clouds)?)
    } else {
        None
    };

    if let Some(path) = &args.features {
        let feats = extract_features(
            &model,
            &test_clouds,
            seeds::derive(spec.train.seed, "feat_test", &[]),
            spec.train.contrast_feature,
        )?;
        io::write_features_tsv(&feats, path)?;
    }

    let record = MetricsRecord {
        experiment_id: id.to_string(),
        config_hash: spec.config_hash(),
        accuracies,
        mask_coverage,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    io::write_jsonl(&[record.clone()], &out.join("metrics.jsonl"))?;
    for (name, acc) in &record.accuracies {
        println!("{name}\t{acc:.4}");
    }
    Ok(())
}

fn write_spec_echo(spec: &ExperimentSpec, out: &std::path::Path) -> Result<()> {
    let text = toml::to_string_pretty(spec)
        .map_err(|e| Error::Config(format!("spec echo: {e}")))?;
    std::fs::write(out.join("config.toml"), text)?;
    Ok(())
}
