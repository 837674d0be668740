use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use jointalign::experiment::{
    aggregate_csv, evaluate_both, export_features, measure_hdist, prepare_datasets, read_records,
    run_ablation, run_experiment, run_pretrain, target_for_run, ExperimentConfig, Mode, Overrides,
    PRETRAINED_CHECKPOINT,
};
use jointalign::fsio::OutputDir;
use jointalign::par::Exec;
use jointalign::synthgen::Dataset;
use jointalign::trainer::{joint_adapt, loss_curve_csv, Checkpoint, Phase, Variant};

#[derive(Parser)]
#[command(
    name = "jointalign",
    version,
    about = "Joint adversarial domain adaptation lab for a toy single-shot detector"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Adaptation variant; repeat to run several (M, C, WC, M+C, M+WC).
    #[arg(long = "variant", global = true)]
    variants: Vec<Variant>,
    #[arg(long, global = true, value_enum)]
    setting: Option<SettingArg>,
    /// Unlabeled target images per class under UFDA.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=3))]
    shots: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Uda,
    Ufda,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify cached) benchmark datasets.
    Generate,
    /// Pre-train the detector on labeled source images.
    Pretrain,
    /// Adapt the pretrained checkpoint with each selected variant.
    Adapt,
    /// Evaluate a checkpoint on both test sets.
    Eval {
        /// Defaults to the pretrained checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation table from one shared pretrained checkpoint.
    Ablate,
    /// Measure marginal and per-class H-divergences of a checkpoint.
    Hdist {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump per-cell alignment-layer features of a test set as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
    },
    /// Full pipeline: data, pre-training, adaptation, evaluation, aggregate.
    Run,
    /// Recompute the aggregate CSV from the per-run JSON records.
    Aggregate,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        out_dir: common.out.clone(),
        seed: common.seed,
        variants: common.variants.clone(),
        mode: common.setting.map(|s| match s {
            SettingArg::Uda => Mode::Uda,
            SettingArg::Ufda => Mode::Ufda,
        }),
        shots: common.shots.map(|s| s as usize),
    };
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn checkpoint_path(out: &OutputDir, given: &Option<PathBuf>) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p.clone()),
        None => Ok(out.resolve(PRETRAINED_CHECKPOINT)?),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!(
            "checkpoint {} not found (run `pretrain` first)",
            path.display()
        );
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct EvalFile<'a> {
    checkpoint: String,
    checkpoint_digest: String,
    config_digest: String,
    phase: &'static str,
    eval: &'a jointalign::experiment::EvalSummary,
}

#[derive(Serialize)]
struct HdistFile<'a> {
    checkpoint: String,
    checkpoint_digest: String,
    config_digest: String,
    report: &'a jointalign::experiment::HdistReport,
}

fn json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    let out = OutputDir::new(&config.out_dir, cli.common.force)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;
    match cli.command {
        Command::Generate => {
            let data = prepare_datasets(&config, &out)?;
            println!(
                "datasets ready in {}: source train {}, target train {}, source test {}, target test {}",
                out.resolve("data")?.display(),
                data.source_train.len(),
                data.target_train.len(),
                data.source_test.len(),
                data.target_test.len()
            );
        }
        Command::Pretrain => {
            let data = prepare_datasets(&config, &out)?;
            let pre = run_pretrain(&config, &data)?;
            let path = out.write(PRETRAINED_CHECKPOINT, &pre.checkpoint.encode())?;
            out.write(
                "curves/pretrain.csv",
                &loss_curve_csv(&pre.log, config.gen.num_classes)?,
            )?;
            println!("wrote {} ({})", path.display(), pre.checkpoint.digest());
        }
        Command::Adapt => {
            let data = prepare_datasets(&config, &out)?;
            let pre = load_checkpoint(&out.resolve(PRETRAINED_CHECKPOINT)?)?;
            pre.require_phase(Phase::Pretrained)?;
            if config.variants.is_empty() {
                bail!("no variants selected");
            }
            for repeat in 0..config.setting.runs() {
                let target = target_for_run(&config, &config.setting, &data, repeat)?;
                for &variant in &config.variants {
                    let seed = config.seed("adapt", repeat as u64);
                    let r = joint_adapt(
                        &pre,
                        &data.source_train,
                        &target,
                        variant,
                        &config.schedule,
                        seed,
                    )?;
                    let name = format!(
                        "{}__{}__r{repeat:02}",
                        variant.name().replace('+', "_"),
                        config.setting.label()
                    );
                    let path =
                        out.write(format!("checkpoints/{name}.ckpt"), &r.checkpoint.encode())?;
                    out.write(
                        format!("curves/{name}.csv"),
                        &loss_curve_csv(&r.log, config.gen.num_classes)?,
                    )?;
                    println!(
                        "wrote {} after {} iterations",
                        path.display(),
                        r.iterations_run
                    );
                }
            }
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint_path(&out, &checkpoint)?;
            let ckpt = load_checkpoint(&path)?;
            let data = prepare_datasets(&config, &out)?;
            let eval = evaluate_both(&config, &ckpt.detector, &data)?;
            let file = EvalFile {
                checkpoint: path.display().to_string(),
                checkpoint_digest: ckpt.digest(),
                config_digest: config.digest(),
                phase: ckpt.phase.name(),
                eval: &eval,
            };
            let written = out.write(format!("eval/{}.json", stem(&path)), &json(&file)?)?;
            println!(
                "target mAP {:.4}, source mAP {:.4} -> {}",
                eval.target.map,
                eval.source.map,
                written.display()
            );
        }
        Command::Ablate => {
            let table = run_ablation(&config, &out)?;
            print!("{}", table.to_text());
        }
        Command::Hdist { checkpoint } => {
            let path = checkpoint_path(&out, &checkpoint)?;
            let ckpt = load_checkpoint(&path)?;
            let data = prepare_datasets(&config, &out)?;
            let report = measure_hdist(
                Exec::default(),
                &ckpt.detector,
                &data.source_test,
                &data.target_test,
                &config.hdist,
                config.seed("hdist", 0),
            )?;
            let file = HdistFile {
                checkpoint: path.display().to_string(),
                checkpoint_digest: ckpt.digest(),
                config_digest: config.digest(),
                report: &report,
            };
            let written = out.write(format!("hdist/{}.json", stem(&path)), &json(&file)?)?;
            let show = |d: Option<f64>| d.map_or_else(|| "null".to_owned(), |d| format!("{d:.3}"));
            let conditional: Vec<String> = report.conditional.iter().map(|e| show(e.d)).collect();
            println!(
                "marginal d {}, conditional [{}] -> {}",
                show(report.marginal.d),
                conditional.join(", "),
                written.display()
            );
        }
        Command::ExportFeatures { checkpoint, domain } => {
            let path = checkpoint_path(&out, &checkpoint)?;
            let ckpt = load_checkpoint(&path)?;
            let data = prepare_datasets(&config, &out)?;
            let (tag, ds): (&str, &Dataset) = match domain {
                DomainArg::Source => ("source", &data.source_test),
                DomainArg::Target => ("target", &data.target_test),
            };
            let csv = export_features(Exec::default(), &ckpt.detector, ds)?;
            let written = out.write(format!("features/{}_{tag}.csv", stem(&path)), &csv)?;
            println!("wrote {}", written.display());
        }
        Command::Run => {
            let outcome = run_experiment(&config, &out)?;
            println!(
                "{} runs; aggregate written to {}",
                outcome.records.len(),
                out.resolve("aggregate.csv")?.display()
            );
        }
        Command::Aggregate => {
            let records = read_records(&out.resolve("runs")?)?;
            if records.is_empty() {
                bail!("no run records under {}", out.resolve("runs")?.display());
            }
            let path = out.write("aggregate.csv", &aggregate_csv(&records)?)?;
            println!("{} records -> {}", records.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::FAILURE
        }
    }
}
