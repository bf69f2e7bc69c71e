mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use uidm::data::{ssda_split, Dataset};
use uidm::mixup::MixupConfig;
use uidm::report;
use uidm::training::{pretrain, run_method, Method, RunMetrics};
use uidm::{Error, Model};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "uidm", version, about = "Source-free semi-supervised domain adaptation with uncertainty-guided mixup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and classifier on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a pre-trained checkpoint to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `method` from the config.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run adaptation over a grid of selection sizes and mixup means.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, value_delimiter = ',')]
        snpc: Vec<usize>,
        #[arg(long = "beta-mean", value_delimiter = ',')]
        beta_mean: Vec<f64>,
    },
    /// Write encoder features for the source and target datasets.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Io { .. }) | Some(Error::Format { .. }) => 3,
        Some(Error::Numeric(_)) => 4,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Adapt {
            common,
            checkpoint,
            method,
        } => cmd_adapt(&common, &checkpoint, method.as_deref()),
        Command::Sweep {
            common,
            checkpoint,
            method,
            snpc,
            beta_mean,
        } => cmd_sweep(&common, &checkpoint, method.as_deref(), &snpc, &beta_mean),
        Command::ExportEmbeddings { common, checkpoint } => cmd_export(&common, &checkpoint),
        Command::Selftest => cmd_selftest(),
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    out: PathBuf,
    seeds: Vec<u64>,
}

fn prepare(common: &Common) -> anyhow::Result<Prepared> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    create_dir(&out)?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    Ok(Prepared { cfg, out, seeds })
}

fn create_dir(path: &Path) -> uidm::Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> uidm::Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> uidm::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, &text)
}

fn method_of(cfg: &ExperimentConfig, flag: Option<&str>) -> anyhow::Result<Method> {
    Ok(match flag {
        Some(m) => m.parse::<Method>()?,
        None => cfg.method,
    })
}

fn cmd_pretrain(common: &Common) -> anyhow::Result<()> {
    let p = prepare(common)?;
    let seed = p.seeds[0];
    let (source, _) = p.cfg.dataset.generate()?;
    let (model, metrics) = pretrain(&source, &p.cfg.model_config(), &p.cfg.train_for_seed(seed))?;
    model.save(&p.out.join("checkpoint.json"))?;
    report::write_pretrain_metrics(&p.out.join("metrics.csv"), &metrics)?;
    write_file(&p.out.join("config.json"), &(p.cfg.to_json() + "\n"))?;
    println!(
        "pretrained seed {seed}: best source val accuracy {:.4} at epoch {}",
        metrics.best_val_accuracy, metrics.best_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedSummary {
    run_id: String,
    seed: u64,
    method: Method,
    initial_accuracy: f64,
    final_accuracy: f64,
    final_validation_accuracy: f64,
    rounds: usize,
}

#[derive(Serialize)]
struct Aggregate {
    method: Method,
    seeds: Vec<u64>,
    accuracies: Vec<f64>,
    median: f64,
    std: f64,
    config: ExperimentConfig,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation; zero for a single value.
fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

struct Target {
    target: Dataset,
    model: Model,
}

fn load_target(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<Target> {
    let (_, target) = cfg.dataset.generate()?;
    let model = Model::load_expecting(checkpoint, &cfg.model_config())?;
    if !model.is_pretrained() {
        return Err(Error::Usage(format!("{} is not a pre-trained checkpoint", checkpoint.display())).into());
    }
    Ok(Target { target, model })
}

fn adapt_one(
    cfg: &ExperimentConfig,
    t: &Target,
    method: Method,
    seed: u64,
    mixup: &MixupConfig,
    snpc: usize,
) -> anyhow::Result<RunMetrics> {
    let split = ssda_split(&t.target, cfg.shots, cfg.val_per_class, seed)?;
    let u_cfg = uidm::uncertainty::UncertaintyConfig {
        snpc,
        ..cfg.uncertainty.clone()
    };
    let (_, metrics) = run_method(method, t.model.clone(), &split, &u_cfg, mixup, &cfg.train_for_seed(seed))
        .with_context(|| format!("{method} with seed {seed}"))?;
    Ok(metrics)
}

fn cmd_adapt(common: &Common, checkpoint: &Path, method: Option<&str>) -> anyhow::Result<()> {
    let p = prepare(common)?;
    let method = method_of(&p.cfg, method)?;
    let t = load_target(&p.cfg, checkpoint)?;
    let mut cfg = p.cfg.clone();
    cfg.method = method;
    let mut accuracies = Vec::new();
    for &seed in &p.seeds {
        let metrics = adapt_one(&cfg, &t, method, seed, &cfg.mixup, cfg.uncertainty.snpc)?;
        let dir = p.out.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        report::write_run_metrics(&dir.join("metrics.csv"), &metrics)?;
        report::write_uncertainty(&dir.join("uncertainty.csv"), &metrics.records, cfg.dataset.num_classes())?;
        let summary = SeedSummary {
            run_id: cfg.run_id(seed),
            seed,
            method,
            initial_accuracy: metrics.initial_unlabeled_accuracy,
            final_accuracy: metrics.final_accuracy(),
            final_validation_accuracy: metrics
                .rounds
                .last()
                .map(|r| r.validation_accuracy)
                .unwrap_or(metrics.initial_validation_accuracy),
            rounds: metrics.rounds.len(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        println!("{method} seed {seed}: accuracy {:.4}", summary.final_accuracy);
        accuracies.push(summary.final_accuracy);
    }
    let aggregate = Aggregate {
        method,
        seeds: p.seeds.clone(),
        median: median(&accuracies),
        std: std_dev(&accuracies),
        accuracies,
        config: cfg.clone(),
    };
    write_json(&p.out.join("aggregate.json"), &aggregate)?;
    write_file(&p.out.join("config.json"), &(cfg.to_json() + "\n"))?;
    println!("median {:.4} std {:.4}", aggregate.median, aggregate.std);
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    checkpoint: &Path,
    method: Option<&str>,
    snpc: &[usize],
    beta_mean: &[f64],
) -> anyhow::Result<()> {
    if snpc.is_empty() && beta_mean.is_empty() {
        return Err(Error::Usage("sweep needs --snpc and/or --beta-mean values".into()).into());
    }
    let p = prepare(common)?;
    let method = method_of(&p.cfg, method)?;
    let t = load_target(&p.cfg, checkpoint)?;
    let mixups: Vec<(f64, MixupConfig)> = beta_mean
        .iter()
        .map(|&m| MixupConfig::with_mean(m).map(|c| (m, c)))
        .collect::<uidm::Result<_>>()?;

    let mut csv = String::from("param,value,seed,accuracy\n");
    for &h in snpc {
        for &seed in &p.seeds {
            let acc = adapt_one(&p.cfg, &t, method, seed, &p.cfg.mixup, h)?.final_accuracy();
            csv.push_str(&format!("snpc,{h},{seed},{acc:.17e}\n"));
        }
    }
    for (mean, mixup) in &mixups {
        for &seed in &p.seeds {
            let acc = adapt_one(&p.cfg, &t, method, seed, mixup, p.cfg.uncertainty.snpc)?.final_accuracy();
            csv.push_str(&format!("beta_mean,{mean},{seed},{acc:.17e}\n"));
        }
    }
    write_file(&p.out.join("sweep.csv"), &csv)?;
    write_file(&p.out.join("config.json"), &(p.cfg.to_json() + "\n"))?;
    println!("wrote {}", p.out.join("sweep.csv").display());
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: &Path) -> anyhow::Result<()> {
    let p = prepare(common)?;
    let (source, target) = p.cfg.dataset.generate()?;
    let model = Model::load_expecting(checkpoint, &p.cfg.model_config())?;
    let path = p.out.join("embeddings.csv");
    report::write_embeddings(&path, &model, &[&source, &target])?;
    println!("wrote {} rows to {}", source.len() + target.len(), path.display());
    Ok(())
}

fn cmd_selftest() -> anyhow::Result<()> {
    let checks = uidm::selftest::run_all()?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(anyhow!("{failed} of {} checks failed", checks.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(std_dev(&[5.0]), 0.0);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]) - 1.290_994_448_735_805_6).abs() < 1e-12);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(exit_code(&io.into()), 3);
        assert_eq!(exit_code(&Error::Numeric("nan".into()).into()), 4);
        assert_eq!(exit_code(&Error::Config("bad".into()).into()), 2);
        let wrapped = anyhow::Error::from(Error::Numeric("nan".into())).context("seed 3");
        assert_eq!(exit_code(&wrapped), 4);
    }
}
