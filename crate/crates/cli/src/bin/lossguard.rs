use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use lossguard::checkpoint::Checkpoint;
use lossguard::config::RunConfig;
use lossguard::formats::TunedFile;
use lossguard::{exit_code, pipeline, NumericalFailure};

#[derive(Parser)]
#[command(name = "lossguard", version, about = "Joint classifier + loss-estimator training and ODIN OOD detection on synthetic data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes model.ckpt, history.csv and config.toml.
    Train {
        /// Auxiliary loss: contrastive, mse or none (overrides `loss.aux`).
        #[arg(long)]
        aux: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Withhold `data.held_out` from training.
        #[arg(long)]
        unseen: bool,
    },
    /// Per-class sensitivity and balanced accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `val` or a dataset CSV.
        #[arg(long, default_value = "val")]
        dataset: String,
    },
    /// Grid-search T and eta on the far-OOD tuning set.
    OdinTune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Detection metrics on every evaluation OOD set.
    OodEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tuned-parameter file from odin-tune.
        #[arg(long)]
        params: PathBuf,
    },
    /// Detection metrics for withheld classes.
    NovelEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Finite-difference check of all gradients.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Write the benchmark datasets as CSV.
    GenData,
    /// Run the whole pipeline.
    ReproduceAll,
}

fn load_config(g: &Global, extra: Vec<String>) -> anyhow::Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &g.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.display().to_string())));
    }
    overrides.extend(extra);
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn print_table(rows: &[(String, lossguard_core::metrics::DetectionReport)]) {
    println!("{:<20} {:>9} {:>9} {:>9} {:>9} {:>9}", "dataset", "FPR@95", "DTERR", "AUROC", "AUPR-In", "AUPR-Out");
    for (tag, r) in rows {
        let v = r.as_array();
        println!(
            "{:<20} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            tag,
            100.0 * v[0],
            100.0 * v[1],
            100.0 * v[2],
            100.0 * v[3],
            100.0 * v[4]
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Train { aux, epochs, unseen } => {
            let mut extra = Vec::new();
            if let Some(a) = aux {
                extra.push(format!("loss.aux={a}"));
            }
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = load_config(g, extra)?;
            let f = pipeline::cmd_train(&cfg, unseen, &cfg.out_dir)?;
            println!(
                "trained {} model: val balanced accuracy {:.4}, Kendall tau {:.4} -> {}",
                f.checkpoint.aux.as_str(),
                f.val.balanced_accuracy,
                f.val.kendall_tau,
                cfg.out_dir.join("model.ckpt").display()
            );
        }
        Cmd::Eval { checkpoint, dataset } => {
            let cfg = load_config(g, Vec::new())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let r = pipeline::cmd_eval(&cfg, &ck, &dataset, &cfg.out_dir)?;
            for ((name, s), n) in r.class_names.iter().zip(&r.sensitivity).zip(&r.support) {
                match s {
                    Some(v) => println!("{name:<12} {v:.4} (n={n})"),
                    None => println!("{name:<12} -      (n=0)"),
                }
            }
            println!("balanced accuracy {:.4}", r.balanced_accuracy);
        }
        Cmd::OdinTune { checkpoint } => {
            let cfg = load_config(g, Vec::new())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let t = pipeline::cmd_odin_tune(&cfg, &ck, &cfg.out_dir)?;
            println!(
                "T = {}, eta = {}, tau = {} (FPR@TPR95 on tuning set {:.4}) -> {}",
                t.params.temperature,
                t.params.epsilon,
                t.params.threshold,
                t.fpr_at_tpr95,
                cfg.out_dir.join("odin.toml").display()
            );
        }
        Cmd::OodEval { checkpoint, params } => {
            let cfg = load_config(g, Vec::new())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let p = TunedFile::load(&params)?.params();
            let d = pipeline::cmd_ood_eval(&cfg, &ck, &p, &cfg.out_dir)?;
            print_table(&d.rows);
        }
        Cmd::NovelEval { checkpoint, params } => {
            let cfg = load_config(g, Vec::new())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let p = TunedFile::load(&params)?.params();
            let o = pipeline::cmd_novel_eval(&cfg, &ck, &p, &cfg.out_dir)?;
            if let Some(w) = o.warning {
                eprintln!("warning: {w}");
            }
            print_table(&o.detection.rows);
        }
        Cmd::Gradcheck { seeds } => {
            let r = pipeline::gradcheck(&seeds)?;
            let mut worst: Vec<(&str, f64)> = Vec::new();
            for row in &r.rows {
                match worst.iter_mut().find(|(l, _)| *l == row.leaf) {
                    Some((_, e)) => *e = e.max(row.max_rel_error),
                    None => worst.push((&row.leaf, row.max_rel_error)),
                }
            }
            for (leaf, e) in &worst {
                println!("{leaf:<16} {e:.3e}");
            }
            println!("max relative error {:.3e} (tolerance {:.0e})", r.max_error(), r.tolerance);
            if !r.passed() {
                return Err(NumericalFailure(format!("gradient check failed: {:.3e}", r.max_error())).into());
            }
            println!("PASS");
        }
        Cmd::GenData => {
            let cfg = load_config(g, Vec::new())?;
            pipeline::cmd_gen_data(&cfg, &cfg.out_dir)?;
            println!("datasets written to {}", cfg.out_dir.join("data").display());
        }
        Cmd::ReproduceAll => {
            let cfg = load_config(g, Vec::new())?;
            let s = pipeline::reproduce_all(&cfg, &cfg.out_dir)?;
            for m in s.full.iter().chain(&s.unseen) {
                println!(
                    "{:<18} balacc {:.4}  tau {:.4}  T {} eta {}",
                    m.name, m.val_balanced_accuracy, m.val_kendall_tau, m.tuned.params.temperature, m.tuned.params.epsilon
                );
                print_table(&m.ood);
            }
            println!("outputs in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).context("lossguard") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
