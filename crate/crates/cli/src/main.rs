use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use xlmimo_core::experiment::{
    dump_trajectory, predict_state_evolution, run_experiment_with, ExperimentConfig,
    ExperimentKind, RecordStatus, CSV_HEADER,
};
use xlmimo_core::state_evolution::MIN_SAMPLES;

/// Monte-Carlo benchmarks for XL-MIMO channel estimation.
#[derive(Debug, Parser)]
#[command(name = "xlmimo", version)]
struct Args {
    /// Which sweep to run.
    #[arg(long, default_value = "snr")]
    experiment: ExperimentKind,

    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Start from a named preset (`desk` or `paper`) before the file is applied.
    #[arg(long)]
    preset: Option<String>,

    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    trials: Option<usize>,

    #[arg(long)]
    threads: Option<usize>,

    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Directory for trajectory grid dumps.
    #[arg(long, default_value = "trajectory")]
    dump_dir: PathBuf,

    /// With `--experiment convergence`, also write the state-evolution
    /// table and prediction under this path prefix.
    #[arg(long)]
    se_prefix: Option<PathBuf>,
}

fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::desk();
    if let Some(p) = &args.preset {
        config.set("preset", p)?;
    }
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config
            .apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for kv in &args.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override `{kv}` is not KEY=VALUE");
        };
        config.set(k, v)?;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.trials {
        config.n_trials = t;
    }
    if let Some(t) = args.threads {
        config.threads = t;
    }
    if let Some(o) = &args.out {
        config.output = Some(o.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(args: &Args) -> Result<bool> {
    let config = load_config(args)?;
    let sink: Box<dyn Write> = match &config.output {
        Some(path) => {
            Box::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    writeln!(sink, "{CSV_HEADER}")?;

    let mut records = Vec::new();
    run_experiment_with(&config, args.experiment, |r| {
        writeln!(sink, "{}", r.to_csv_row())?;
        records.push(r.status);
        Ok(())
    })?;
    sink.flush()?;

    if args.experiment == ExperimentKind::Trajectory {
        let files = dump_trajectory(&config, &args.dump_dir)?;
        log::info!(
            "wrote {} grid files to {}",
            files.len(),
            args.dump_dir.display()
        );
    }
    if let (ExperimentKind::Convergence, Some(prefix)) = (args.experiment, &args.se_prefix) {
        let samples = (20 * config.n_unknowns()).max(MIN_SAMPLES);
        let prediction = predict_state_evolution(&config, config.snr_db[0], samples)?;
        let table_path = prefix.with_extension("table.txt");
        fs::write(&table_path, prediction.table.to_text())?;
        let mut text = String::from("iteration,tau_predicted,mmse\n");
        for (t, (tau, m)) in prediction
            .trajectory
            .tau
            .iter()
            .zip(&prediction.trajectory.mmse)
            .enumerate()
        {
            text.push_str(&format!("{},{},{}\n", t + 1, tau, m));
        }
        fs::write(prefix.with_extension("trajectory.csv"), text)?;
    }

    let diverged = records
        .iter()
        .filter(|s| **s == RecordStatus::Diverged)
        .count();
    let fraction = if records.is_empty() {
        0.0
    } else {
        diverged as f64 / records.len() as f64
    };
    if fraction > config.divergence_budget {
        log::error!(
            "{diverged} of {} estimates diverged, above the budget of {}",
            records.len(),
            config.divergence_budget
        );
        return Ok(false);
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors; 2 is reserved for the divergence budget
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
