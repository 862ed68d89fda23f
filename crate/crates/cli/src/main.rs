use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use synergraph::baselines::BaselineKind;
use synergraph::dataset::{Modality, SynthConfig};
use synergraph::eval::Phase;
use synergraph::experiment::{self, parse_modalities, Ablation, RunConfig};
use synergraph::train::{grad_check, grad_check_fixture};

const THREADS_ENV: &str = "SYNERGRAPH_THREADS";
const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "synergraph",
    version,
    about = "Multimodal graph recommender: training, evaluation and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write checkpoint, history and reports.
    Train(RunArgs),
    /// Re-evaluate a finished run from its directory.
    Evaluate {
        /// Run directory containing config.resolved.json and model.sgck.
        run: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_phase)]
        phase: Phase,
    },
    /// Train the full model and its three module ablations.
    Ablate(RunArgs),
    /// Train visual-only, textual-only and both-modality variants.
    ModalityAblate(RunArgs),
    /// Retrain once per modality-graph neighbour count.
    SweepTopk {
        /// Comma-separated neighbour counts.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a reference model: itemknn, bprmf or lightgcn.
    Baseline {
        #[arg(long, value_parser = parse_baseline)]
        model: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Paired bootstrap test between the per-user test metrics of two runs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_boot: usize,
        #[arg(long, default_value_t = 123)]
        seed: u64,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 123)]
        seed: u64,
    },
    /// Write a clustered synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        users: usize,
        #[arg(long, default_value_t = 150)]
        items: usize,
        #[arg(long, default_value_t = 10)]
        edges_per_user: usize,
        #[arg(long, default_value_t = 32)]
        d_visual: usize,
        #[arg(long, default_value_t = 32)]
        d_textual: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write user and item vocabularies of a dataset directory.
    ExportVocab {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baby, sports, clothing, synthetic, or a dataset directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// none, no-mp, no-iiv or no-circle.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Comma-separated, e.g. `v,t`.
    #[arg(long, value_parser = parse_modality_list)]
    modalities: Option<Vec<Modality>>,
    /// Output directory for run folders.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            if *d != cfg.dataset {
                cfg.dataset_dir = None;
            }
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.split_seed = None;
            cfg.run_name = None;
        }
        if let Some(k) = self.top_k {
            cfg.top_k = Some(k);
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
            cfg.run_name = None;
        }
        if let Some(m) = &self.modalities {
            cfg.modalities = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
            cfg.lr_grid.clear();
        }
        Ok(cfg)
    }
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: synergraph::Error| e.to_string())
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse().map_err(|e: synergraph::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: synergraph::Error| e.to_string())
}

// A single value parsed into a whole list, so clap must not treat it as
// a repeated argument.
fn parse_modality_list(s: &str) -> Result<Vec<Modality>, String> {
    parse_modalities(s).map_err(|e| e.to_string())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_table(rows: &[experiment::VariantResult]) -> Result<()> {
    writeln!(io::stdout(), "{:<12} {:>10} {:>10}", "variant", "recall", "ndcg")?;
    for r in rows {
        writeln!(io::stdout(), "{:<12} {:>10.4} {:>10.4}", r.variant, r.recall, r.ndcg)?;
    }
    Ok(())
}

/// Returns whether the command succeeded in its own terms.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let s = experiment::run_train(&args.config()?)?;
            print_json(&json!({
                "run_dir": s.run_dir,
                "best_epoch": s.best_epoch,
                "lr": s.lr,
                "val": {"recall": s.val.recall, "ndcg": s.val.ndcg},
                "test": {"recall": s.test.recall, "ndcg": s.test.ndcg, "n_users": s.test.n_users},
            }))?;
        }
        Command::Evaluate { run, phase } => {
            print_json(&experiment::run_evaluate(&run, phase)?)?;
        }
        Command::Ablate(args) => print_table(&experiment::run_ablate(&args.config()?)?)?,
        Command::ModalityAblate(args) => print_table(&experiment::run_modality_ablate(&args.config()?)?)?,
        Command::SweepTopk { values, run } => print_table(&experiment::run_sweep_topk(&run.config()?, &values)?)?,
        Command::Baseline { model, run } => {
            let mut cfg = run.config()?;
            cfg.baseline = Some(model);
            cfg.run_name = None;
            let s = experiment::run_train(&cfg)?;
            print_json(&json!({
                "run_dir": s.run_dir,
                "model": model.name(),
                "val": {"recall": s.val.recall, "ndcg": s.val.ndcg},
                "test": {"recall": s.test.recall, "ndcg": s.test.ndcg, "n_users": s.test.n_users},
            }))?;
        }
        Command::Compare {
            run_a,
            run_b,
            n_boot,
            seed,
        } => print_json(&experiment::compare_runs(&run_a, &run_b, n_boot, seed)?)?,
        Command::Gradcheck { eps, seed } => {
            let fx = grad_check_fixture(seed)?;
            let report = grad_check(&fx, eps, None)?;
            for (name, err) in &report.per_tensor {
                writeln!(io::stdout(), "{name:<16} {err:.3e}")?;
            }
            writeln!(io::stdout(), "max relative error: {:.3e}", report.max_rel_error)?;
            return Ok(report.max_rel_error < GRADCHECK_TOLERANCE);
        }
        Command::Synth {
            out,
            users,
            items,
            edges_per_user,
            d_visual,
            d_textual,
            seed,
        } => {
            let cfg = SynthConfig {
                n_users: users,
                n_items: items,
                edges_per_user,
                d_visual,
                d_textual,
                seed,
            };
            experiment::write_synthetic(&cfg, &out).with_context(|| format!("writing {}", out.display()))?;
            writeln!(io::stdout(), "wrote synthetic dataset to {}", out.display())?;
        }
        Command::ExportVocab { dataset, out } => {
            let out = out.unwrap_or_else(|| dataset.clone());
            let ds = experiment::export_vocab(&dataset, &out)?;
            writeln!(
                io::stdout(),
                "{} users, {} items; vocabularies written to {}",
                ds.n_users(),
                ds.n_items(),
                out.display()
            )?;
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|_| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
