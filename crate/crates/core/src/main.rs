use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffnorm::denoisers::BackboneConfig;
use diffnorm::pipeline::{
    cmd_eval, cmd_report, cmd_sample, cmd_synth, cmd_train, overlay_json, read_json, run_config, DataSource, NnQuery,
    PipelineError, RunConfig,
};
use diffnorm::synthgen::SynthConfig;

#[derive(Parser)]
#[command(name = "diffnorm", version, about = "Diffusion-based normative models for tabular phenotypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort CSV.
    Synth(SynthArgs),
    /// Train a denoiser on a run's training split.
    Train(TrainArgs),
    /// Draw conditional samples on the covariate grid.
    Sample(SampleArgs),
    /// Evaluate stored samples against the holdout split.
    Eval(EvalArgs),
    /// Print the headline numbers of an evaluated run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_age: Option<f64>,
    #[arg(long)]
    max_age: Option<f64>,
    /// JSON synthetic-cohort settings; its fields override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory (created if missing).
    #[arg(long)]
    run: PathBuf,
    /// JSON run configuration; its fields override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort CSV with age, sex and IDP columns.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use a synthetic cohort of this size instead of a CSV.
    #[arg(long, conflicts_with = "data")]
    synth_n: Option<usize>,
    #[arg(long, requires = "synth_n")]
    synth_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `mlp` or `saint`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Stratified fraction of the training split to use.
    #[arg(long)]
    subsample: Option<f64>,
    /// Continue from the run's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop (and checkpoint) after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Samples per grid cell.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample the synthetic generator instead of the trained model.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    no_holdout_draws: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `calibration`, `ks`, `dependence`, `memorisation` or `all`.
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long)]
    by_sex: bool,
    #[arg(long)]
    min_bin_count: Option<usize>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    dependence_min_age: Option<f64>,
    #[arg(long)]
    dependence_max_age: Option<f64>,
    /// `holdout` or `grid`.
    #[arg(long)]
    nn_query: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn overlay_file<T>(base: T, path: Option<&Path>) -> Result<T, PipelineError>
where
    T: serde::Serialize + for<'de> serde::Deserialize<'de>,
{
    match path {
        Some(p) => overlay_json(&base, &read_json::<serde_json::Value>(p)?),
        None => Ok(base),
    }
}

/// Run directory snapshot (or defaults), then flags, then the config file.
fn base_config(args: &RunArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = run_config(&args.run)?.unwrap_or_default();
    if let Some(path) = &args.data {
        cfg.data = DataSource::Csv { path: path.clone() };
    }
    if let Some(n) = args.synth_n {
        let mut s = SynthConfig { n_samples: n, ..SynthConfig::default() };
        set(&mut s.seed, args.synth_seed);
        cfg.data = DataSource::Synth(s);
    }
    Ok(cfg)
}

fn finish(cfg: RunConfig, args: &RunArgs) -> Result<RunConfig, PipelineError> {
    match &args.config {
        Some(p) => cfg.overlay(&read_json::<serde_json::Value>(p)?),
        None => Ok(cfg),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(a) => {
            let mut s = SynthConfig::default();
            set(&mut s.n_samples, a.n);
            set(&mut s.seed, a.seed);
            set(&mut s.age_range.0, a.min_age);
            set(&mut s.age_range.1, a.max_age);
            let s = overlay_file(s, a.config.as_deref())?;
            s.validate()?;
            let n = cmd_synth(&s, &a.out)?;
            eprintln!("wrote {n} rows to {}", a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = base_config(&a.run)?;
            if let Some(name) = &a.backbone {
                if cfg.backbone.name() != name {
                    cfg.backbone = BackboneConfig::default_for(name)
                        .ok_or_else(|| PipelineError::Config(format!("unknown backbone {name:?}; expected mlp or saint")))?;
                }
            }
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.schedule.steps, a.steps);
            set(&mut cfg.split.train_fraction, a.train_fraction);
            set(&mut cfg.split.seed, a.split_seed);
            set(&mut cfg.split.subsample, a.subsample);
            let cfg = finish(cfg, &a.run)?;
            let ck = cmd_train(&cfg, &a.run.run, a.resume, a.stop_after, |e, loss| eprintln!("epoch {e} loss {loss:.6}"))?;
            eprintln!("trained {} epochs; checkpoint in {}", ck.state.epochs_done, a.run.run.display());
        }
        Command::Sample(a) => {
            let mut cfg = base_config(&a.run)?;
            set(&mut cfg.sampling.m_per_cell, a.m);
            set(&mut cfg.sampling.seed, a.seed);
            if a.no_holdout_draws {
                cfg.sampling.holdout_draws = false;
            }
            let cfg = finish(cfg, &a.run)?;
            let store = cmd_sample(&cfg, &a.run.run, a.oracle)?;
            eprintln!("wrote {} sample blocks to {}", store.index.blocks.len(), a.run.run.display());
        }
        Command::Eval(a) => {
            let mut cfg = base_config(&a.run)?;
            cfg.eval.select(&a.which)?;
            if a.by_sex {
                cfg.eval.by_sex = true;
            }
            set(&mut cfg.eval.min_bin_count, a.min_bin_count);
            set(&mut cfg.eval.ks_permutations, a.permutations);
            if a.dependence_min_age.is_some() {
                cfg.eval.dependence_min_age = a.dependence_min_age;
            }
            if a.dependence_max_age.is_some() {
                cfg.eval.dependence_max_age = a.dependence_max_age;
            }
            if let Some(q) = &a.nn_query {
                cfg.eval.nn_query = match q.as_str() {
                    "holdout" => NnQuery::Holdout,
                    "grid" => NnQuery::Grid,
                    other => return Err(PipelineError::Config(format!("unknown nn query {other:?}"))),
                };
            }
            set(&mut cfg.eval.seed, a.seed);
            let cfg = finish(cfg, &a.run)?;
            cmd_eval(&cfg, &a.run.run)?;
            print_headline(&a.run.run)?;
        }
        Command::Report { run } => print_headline(&run)?,
    }
    Ok(())
}

fn print_headline(dir: &Path) -> Result<(), PipelineError> {
    let h = cmd_report(dir)?;
    println!("{}", serde_json::to_string_pretty(&h).map_err(|e| PipelineError::Format(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
