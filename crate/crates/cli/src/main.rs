//! Experiment harness CLI: staged runs over a TOML config plus artifact
//! re-reporting and oracle self-checks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsslsim_core::check::run_oracle_checks;
use fsslsim_core::config::ExperimentConfig;
use fsslsim_core::experiment::{
    run_experiment, stage_attack, stage_defend, stage_evaluate, stage_pretrain, stage_report,
};

#[derive(Parser)]
#[command(
    name = "fsslsim",
    about = "Desk-scale federated self-supervised learning simulator with an optimized \
             imperceptible backdoor attack, defenses, and convergence diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifacts directory (defaults to <run.out_dir>/<name>-s<seed>-<ts>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Validate the configuration and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: pretrain, attack, evaluate, defend, report.
    Run(CommonOpts),
    /// Clean federated pre-training only.
    Pretrain(CommonOpts),
    /// Malicious federated training (requires a prior pretrain in out-dir).
    Attack {
        #[command(flatten)]
        common: CommonOpts,
        /// Export this many clean/poisoned/residual PNG triplets during the
        /// next evaluation.
        #[arg(long)]
        export_triplets: Option<usize>,
    },
    /// Probes and metrics over an artifacts directory.
    Evaluate(CommonOpts),
    /// Defense probes over an artifacts directory.
    Defend {
        #[command(flatten)]
        common: CommonOpts,
        /// Which probe to run: strip, activation-clustering, or all.
        #[arg(long, default_value = "all")]
        probe: String,
    },
    /// Re-render the report from saved artifacts (no training).
    Report {
        /// Artifacts directory of a finished run.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare derived quantities against their independent oracles.
    OracleCheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

fn load_config(opts: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&opts.config)
        .with_context(|| format!("loading {}", opts.config.display()))?;
    if let Some(seed) = opts.seed {
        cfg.run.seed = seed;
        cfg.dataset.seed = seed;
        cfg.federation.seed = seed;
    }
    Ok(cfg)
}

fn require_out_dir(opts: &CommonOpts) -> Result<PathBuf> {
    opts.out_dir
        .clone()
        .ok_or_else(|| anyhow::anyhow!("this subcommand needs --out-dir"))
}

fn ensure_resolved_config(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let path = root.join("config.resolved.toml");
    if !path.exists() {
        std::fs::write(path, cfg.to_toml()?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(opts) => {
            let cfg = load_config(&opts)?;
            let outcome = run_experiment(&cfg, opts.out_dir.as_deref(), opts.dry_run)?;
            if opts.dry_run {
                println!("config ok: {}", cfg.run.name);
                println!("{}", cfg.to_toml()?);
                return Ok(());
            }
            println!("artifacts: {}", outcome.root.display());
            println!("{}", stage_report(&outcome.root)?);
        }
        Command::Pretrain(opts) => {
            let cfg = load_config(&opts)?;
            if opts.dry_run {
                println!("config ok: {}", cfg.run.name);
                return Ok(());
            }
            let root = require_out_dir(&opts)?;
            ensure_resolved_config(&cfg, &root)?;
            stage_pretrain(&cfg, &root)?;
            println!("pretrained encoder written under {}", root.display());
        }
        Command::Attack {
            common,
            export_triplets,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = export_triplets {
                cfg.export.triplets = n;
            }
            if common.dry_run {
                println!("config ok: {}", cfg.run.name);
                return Ok(());
            }
            let root = require_out_dir(&common)?;
            ensure_resolved_config(&cfg, &root)?;
            if !root.join("pretrain/encoder.ckpt").exists() {
                stage_pretrain(&cfg, &root)?;
            }
            stage_attack(&cfg, &root)?;
            println!("attack artifacts written under {}", root.display());
        }
        Command::Evaluate(opts) => {
            let cfg = load_config(&opts)?;
            if opts.dry_run {
                println!("config ok: {}", cfg.run.name);
                return Ok(());
            }
            let root = require_out_dir(&opts)?;
            ensure_resolved_config(&cfg, &root)?;
            let summary = stage_evaluate(&cfg, &root)?;
            println!("CA {:.2}%", summary.ca);
            if let (Some(ba), Some(asr)) = (summary.ba, summary.asr) {
                println!("BA {ba:.2}%  ASR {asr:.2}%");
            }
        }
        Command::Defend { common, probe } => {
            let cfg = load_config(&common)?;
            if common.dry_run {
                println!("config ok: {}", cfg.run.name);
                return Ok(());
            }
            if !matches!(probe.as_str(), "all" | "strip" | "activation-clustering") {
                bail!("unknown probe '{probe}' (expected strip, activation-clustering, or all)");
            }
            let root = require_out_dir(&common)?;
            ensure_resolved_config(&cfg, &root)?;
            let summary = stage_defend(&cfg, &root)?;
            if matches!(probe.as_str(), "all" | "strip") {
                println!("STRIP detection AUC: {:.4}", summary.strip_auc);
            }
            if matches!(probe.as_str(), "all" | "activation-clustering") {
                for c in &summary.clustering {
                    println!(
                        "class {} silhouette {:.4} (clusters {}/{})",
                        c.class, c.silhouette, c.cluster_sizes[0], c.cluster_sizes[1]
                    );
                }
            }
        }
        Command::Report { out_dir } => {
            println!("{}", stage_report(&out_dir)?);
        }
        Command::OracleCheck { seed } => {
            let report = run_oracle_checks(seed)?;
            print!("{}", report.render());
            if !report.all_pass() {
                bail!("oracle checks failed");
            }
        }
    }
    Ok(())
}
