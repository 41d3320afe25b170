use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use tabsurv::dataset::{apply_preprocessing, fit_preprocessing, load_csv, stratified_split_indices, Schema, SplitSpec};
use tabsurv::models::HeadKind;
use tabsurv::orchestration::{
    evaluate_with, prepare_raw, random_search, run_experiment, train, write_experiment, ExperimentPlan, ModelBundle,
    SearchSpace, SimulationSource, TrainConfig,
};
use tabsurv::simulation::{write_json, write_simulation};
use tabsurv::SurvError;

#[derive(Parser)]
#[command(name = "tabsurv", version, about = "Neural survival models for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a bundle.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Share of rows held out for early stopping.
        #[arg(long, default_value_t = 0.25)]
        validation_fraction: f64,
        /// Optional per-epoch training log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a bundle on labelled data.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Schema for the data; defaults to the one stored in the bundle.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Also report the KS statistic.
        #[arg(long)]
        ks: bool,
    },
    /// Generate a simulated dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a repeated-seed experiment plan.
    Benchmark {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random hyperparameter search.
    Search {
        /// Search space JSON file, or a head name (LS, LAS, WSA, WAS) for
        /// its default space.
        #[arg(long)]
        space: String,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: String,
    kind: &'a str,
}

fn fail(error: String, kind: &str) -> ExitCode {
    let report = ErrorReport { error, kind };
    eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(e.to_string().trim().to_string(), "usage"),
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => fail(e.to_string(), e.kind()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> tabsurv::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| SurvError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn print_json<T: Serialize>(value: &T) -> tabsurv::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> tabsurv::Result<ExitCode> {
    match command {
        Command::Train {
            data,
            schema,
            config,
            out,
            validation_fraction,
            log,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            cfg.validate()?;
            let schema = Schema::from_json_file(&schema)?;
            let raw = load_csv(&data, &schema)?;
            let split = SplitSpec {
                train: 1.0 - validation_fraction,
                validation: validation_fraction,
                test: 0.0,
                seed: cfg.seed,
            };
            let idx = stratified_split_indices(&raw.events, &split)?;
            let train_raw = raw.select_rows(&idx.train);
            let record = fit_preprocessing(&train_raw)?;
            let train_set = apply_preprocessing(&train_raw, &record)?;
            let val_set = apply_preprocessing(&raw.select_rows(&idx.validation), &record)?;
            let val = (val_set.n_rows() > 0).then_some(&val_set);
            let (mut bundle, train_log) = train(&train_set, val, &cfg)?;
            bundle.schema = Some(schema);
            bundle.save(&out)?;
            if let Some(path) = log {
                write_json(&path, &train_log)?;
            }
            print_json(&serde_json::json!({
                "bundle": out,
                "epochs": train_log.epochs.len(),
                "best_epoch": train_log.best_epoch,
                "best_val_cindex": train_log.best_val_cindex,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            bundle,
            data,
            report,
            schema,
            ks,
        } => {
            let bundle = ModelBundle::load(&bundle)?;
            let schema = match (schema, &bundle.schema) {
                (Some(path), _) => Schema::from_json_file(&path)?,
                (None, Some(s)) => s.clone(),
                (None, None) => return Err(SurvError::Config("bundle has no schema; pass --schema".into())),
            };
            let raw = load_csv(&data, &schema)?;
            let test = apply_preprocessing(&raw, &bundle.record)?;
            let metrics = evaluate_with(&bundle, &test, ks)?;
            write_json(&report, &metrics)?;
            print_json(&metrics)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { config, out } => {
            let source: SimulationSource = read_json(&config)?;
            let sim = source.generate()?;
            let (schema, sidecar) = write_simulation(&sim, &source.config, &out)?;
            print_json(&serde_json::json!({
                "csv": out,
                "schema": schema,
                "sidecar": sidecar,
                "rows": sim.data.n_rows(),
                "event_rate": sim.data.event_rate(),
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Benchmark { plan, out } => {
            let plan = ExperimentPlan::from_json_file(&plan)?;
            let report = run_experiment(&plan)?;
            let (json, csv) = write_experiment(&report, &out)?;
            print_json(&serde_json::json!({
                "report": json,
                "table": csv,
                "failures": report.failures.len(),
            }))?;
            if report.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(fail(
                    format!("{} run(s) failed; see {}", report.failures.len(), json.display()),
                    "run_failure",
                ))
            }
        }
        Command::Search {
            space,
            budget,
            data,
            schema,
            seed,
            out,
        } => {
            let space = match serde_json::from_value::<HeadKind>(serde_json::Value::String(space.clone())) {
                Ok(head) => SearchSpace::for_head(head),
                Err(_) => read_json(Path::new(&space))?,
            };
            let schema = Schema::from_json_file(&schema)?;
            let raw = load_csv(&data, &schema)?;
            let prepared = prepare_raw(&raw, &SplitSpec::protocol_default(seed))?;
            let result = random_search(&space, budget, &prepared.train, &prepared.validation, seed)?;
            if let Some(path) = out {
                write_json(&path, &result)?;
            }
            print_json(&result)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
