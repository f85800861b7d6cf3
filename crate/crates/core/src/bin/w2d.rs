//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use w2d_core::bundleio::load_bundle;
use w2d_core::checkpoint::load_model;
use w2d_core::config::ExperimentConfig;
use w2d_core::error::{Error, Result};
use w2d_core::experiment::{
    generate_data, read_results, resolve_data_path, run_experiment_with, RunOptions,
};
use w2d_core::netpbm::write_pgm;
use w2d_core::ranking::{build_table, parse_cells_csv, parse_prev_csv, table_to_csv, table_to_text, AccuracyCell};

#[derive(Parser)]
#[command(name = "w2d", version, about = "Worst-case training benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as a bundle directory.
    GenerateData {
        /// Experiment configuration file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output bundle directory (relative paths honor W2D_DATA_DIR).
        #[arg(long)]
        out: PathBuf,
        /// Override the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a single training experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also export the k most frequently selected training samples.
        #[arg(long, value_name = "K")]
        export_worst: Option<usize>,
    },
    /// Run the random hyperparameter search configured in `search.*`.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute ranking scores for an accuracy-cell CSV against its ERM row.
    Rank {
        /// CSV with header algorithm,dataset,mean,stderr.
        #[arg(long)]
        cells: PathBuf,
        /// Optional pass-through score CSV (algorithm,score).
        #[arg(long)]
        prev: Option<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a comparison table from results files and/or cell CSVs.
    Report {
        /// results.txt files and/or .csv cell files.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a class activation map for one sample as a PGM image.
    Cam {
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Dataset bundle directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(s) = seed {
        config.seed = s;
        config.train.seed = s;
    }
    Ok(config)
}

fn cmd_rank(cells: &PathBuf, prev: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(cells)?;
    let (datasets, rows) = parse_cells_csv(&text)?;
    let prev_scores = match prev {
        Some(p) => Some(parse_prev_csv(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let table = build_table(datasets, rows, prev_scores.as_deref())?;
    print!("{}", table_to_text(&table));
    if let Some(path) = out {
        std::fs::write(path, table_to_csv(&table))?;
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&PathBuf>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input file".into()));
    }
    let mut datasets: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<(usize, AccuracyCell)>)> = Vec::new();
    let mut add_cell = |datasets: &mut Vec<String>, algorithm: String, dataset: String, cell: AccuracyCell| {
        let ds = match datasets.iter().position(|d| *d == dataset) {
            Some(i) => i,
            None => {
                datasets.push(dataset);
                datasets.len() - 1
            }
        };
        match rows.iter_mut().find(|(n, _)| *n == algorithm) {
            Some((_, cells)) => cells.push((ds, cell)),
            None => rows.push((algorithm, vec![(ds, cell)])),
        }
    };
    for path in inputs {
        if path.extension().is_some_and(|e| e == "csv") {
            let (ds, parsed) = parse_cells_csv(&std::fs::read_to_string(path)?)?;
            for (algorithm, cells) in parsed {
                for (d, c) in ds.iter().zip(cells) {
                    add_cell(&mut datasets, algorithm.clone(), d.clone(), c);
                }
            }
        } else {
            let results = read_results(path)?;
            let cell = results.summary.ok_or_else(|| {
                Error::Config(format!("{}: no summary (failed run?)", path.display()))
            })?;
            let dataset = results
                .records
                .first()
                .map(|r| r.dataset.clone())
                .unwrap_or_else(|| "dataset".into());
            add_cell(&mut datasets, results.config.algorithm.name().into(), dataset, cell);
        }
    }
    let rows: Vec<(String, Vec<AccuracyCell>)> = rows
        .into_iter()
        .map(|(name, mut cells)| {
            cells.sort_by_key(|(i, _)| *i);
            let covered: Vec<usize> = cells.iter().map(|(i, _)| *i).collect();
            if covered != (0..datasets.len()).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "algorithm {name} does not cover every dataset exactly once"
                )));
            }
            Ok((name, cells.into_iter().map(|(_, c)| c).collect()))
        })
        .collect::<Result<_>>()?;
    let table = build_table(datasets, rows, None)?;
    print!("{}", table_to_text(&table));
    if let Some(path) = out {
        std::fs::write(path, table_to_csv(&table))?;
    }
    Ok(())
}

fn cmd_cam(
    model: &PathBuf,
    data: &PathBuf,
    env: &str,
    index: usize,
    class: usize,
    out: &PathBuf,
) -> Result<()> {
    let model = load_model(model)?;
    let bundle = load_bundle(&resolve_data_path(data))?;
    let environment = bundle
        .environment(env)
        .ok_or_else(|| Error::Config(format!("environment {env} not in bundle")))?;
    if index >= environment.len() {
        return Err(Error::Config(format!(
            "index {index} out of range for environment of {}",
            environment.len()
        )));
    }
    let x = environment.inputs.gather_rows(&[index])?;
    let single = x.reshaped(x.shape()[1..].to_vec())?;
    let cam = w2d_core::cam::class_activation_map(&model, &single, class)?;
    write_pgm(out, cam.shape()[1], cam.shape()[0], cam.data())?;
    println!("wrote {}", out.display());
    Ok(())
}

/// How a job's errors map to exit codes: experiment jobs treat every
/// post-configuration error as a runtime failure; inspection jobs (rank,
/// report, cam) treat malformed inputs as configuration errors.
enum JobKind {
    Experiment,
    Inspection,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // configuration phase: anything failing here exits 2
    let configured: Result<(JobKind, Box<dyn FnOnce() -> Result<()>>)> = match cli.command {
        Command::GenerateData { config, out, seed } => match load_config(&config, seed) {
            Ok(cfg) => Ok((JobKind::Experiment, Box::new(move || {
                let bundle = generate_data(&cfg, &out)?;
                println!(
                    "wrote {} environments to {}",
                    bundle.environments.len(),
                    resolve_data_path(&out).display()
                );
                Ok(())
            }) as Box<dyn FnOnce() -> Result<()>>)),
            Err(e) => Err(e),
        },
        Command::Train { config, seed, export_worst } => match load_config(&config, seed) {
            Ok(mut cfg) => Ok((JobKind::Experiment, Box::new(move || {
                cfg.search.enabled = false;
                let options = RunOptions { export_worst };
                let outcome = run_experiment_with(&cfg, &options)?;
                println!(
                    "{}: accuracy {:.2} (results: {})",
                    cfg.name,
                    outcome.cell.mean,
                    outcome.results_path.display()
                );
                Ok(())
            }) as Box<dyn FnOnce() -> Result<()>>)),
            Err(e) => Err(e),
        },
        Command::Search { config, seed } => match load_config(&config, seed) {
            Ok(mut cfg) => Ok((JobKind::Experiment, Box::new(move || {
                cfg.search.enabled = true;
                let outcome = run_experiment_with(&cfg, &RunOptions::default())?;
                println!(
                    "{}: {:.2} ± {:.2} over {} trials (results: {})",
                    cfg.name,
                    outcome.cell.mean,
                    outcome.cell.stderr,
                    outcome.records.len(),
                    outcome.results_path.display()
                );
                Ok(())
            }) as Box<dyn FnOnce() -> Result<()>>)),
            Err(e) => Err(e),
        },
        Command::Rank { cells, prev, out } => Ok((
            JobKind::Inspection,
            Box::new(move || cmd_rank(&cells, prev.as_ref(), out.as_ref())),
        )),
        Command::Report { inputs, out } => Ok((
            JobKind::Inspection,
            Box::new(move || cmd_report(&inputs, out.as_ref())),
        )),
        Command::Cam { model, data, env, index, class, out } => Ok((
            JobKind::Inspection,
            Box::new(move || cmd_cam(&model, &data, &env, index, class, &out)),
        )),
    };
    let (kind, job) = match configured {
        Ok(pair) => pair,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    match (kind, job()) {
        (_, Ok(())) => ExitCode::SUCCESS,
        (JobKind::Inspection, Err(e @ (Error::Config(_) | Error::Parse(_)))) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        (_, Err(e)) => {
            eprintln!("runtime failure: {e}");
            ExitCode::from(3)
        }
    }
}
