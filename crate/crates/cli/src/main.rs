//! `lemof`: generate data, train, evaluate, explain and ablate.
//!
//! Exit codes: 0 on success, 2 for bad input or configuration, 3 for
//! training failures and models used before the stage a command needs.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use lemof::data::{load_split_dataset, save_dataset, SplitSpec, SynthConfig};
use lemof::metrics::{evaluate, summarize, RankTable, Variant, DEFAULT_THRESHOLD};
use lemof::model_io::{load_model, save_model};
use lemof::pipeline::{evaluate_variants, predict_dataset, train_pipeline_until, Stage};
use lemof::{LemofError, Result};

use config::{read_json, RunConfig};
use report::{sha256_file, Ablation, RunReport, ABLATE_SCHEMA, RUN_SCHEMA};

const MODEL_FILE: &str = "model.lemf";
const REPORT_FILE: &str = "run_report.json";

#[derive(Parser)]
#[command(
    name = "lemof",
    version,
    about = "Level-guided multimodal fusion experiments"
)]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-modality dataset.
    Synth {
        /// Generator settings as JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every stage and write the model with its run report.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score one variant on a dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = PossibleValuesParser::new(Variant::ALL.map(Variant::as_str)))]
        variant: String,
    },
    /// Show which level each modality relies on.
    Explain {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train several seeds and compare every variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn synth(config: Option<&Path>, out: &Path, json: bool) -> Result<()> {
    let cfg: SynthConfig = match config {
        Some(p) => read_json(p, "synth config")?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let data = lemof::data::generate_synthetic(&cfg)?;
    let split = SplitSpec {
        seed: cfg.seed,
        ..SplitSpec::default()
    };
    let manifest = save_dataset(&data, out, split)?;
    if json {
        #[derive(Serialize)]
        struct Written<'a> {
            manifest: &'a Path,
            samples: usize,
            sha256: String,
        }
        print_json(&Written {
            manifest: &manifest,
            samples: data.len(),
            sha256: sha256_file(&manifest)?,
        })
    } else {
        println!("{}", manifest.display());
        Ok(())
    }
}

fn train(config_path: &Path, json: bool) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let data = cfg.load_data()?;
    let (model, timings) = train_pipeline_until(&cfg.training, &data, Stage::S6Final)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let model_path = cfg.out_dir.join(MODEL_FILE);
    save_model(&model, &model_path)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("model".to_string(), sha256_file(&model_path)?);
    if let config::DataSource::Manifest(m) = &cfg.data {
        artifacts.insert("data_manifest".to_string(), sha256_file(m)?);
    }
    let run = RunReport {
        schema: RUN_SCHEMA,
        config: &cfg,
        stage_losses: &model.manifest().records,
        importance: report::reports(&model)?,
        test_metrics: evaluate_variants(&model, &data.test, DEFAULT_THRESHOLD)?,
        timings,
        artifacts,
    };
    let report_path = cfg.out_dir.join(REPORT_FILE);
    write_json(&report_path, &run)?;
    info!(
        "wrote {} and {}",
        model_path.display(),
        report_path.display()
    );

    if json {
        #[derive(Serialize)]
        struct Trained<'a> {
            model: &'a Path,
            report: &'a Path,
            model_sha256: &'a str,
        }
        print_json(&Trained {
            model: &model_path,
            report: &report_path,
            model_sha256: &run.artifacts["model"],
        })
    } else {
        println!("model  {}", model_path.display());
        println!("report {}", report_path.display());
        for r in &run.test_metrics {
            println!(
                "{:<10} auroc {:.4}  acc {:.4}  f1 {:.4}",
                r.variant, r.auroc, r.acc, r.f1
            );
        }
        Ok(())
    }
}

fn eval(model_path: &Path, manifest: &Path, variant: &str) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let model = load_model(model_path)?;
    model.require(Stage::S6Final, "eval")?;
    let (_, data) = load_split_dataset(manifest)?;
    let test = &data.test;
    let got = [test.ecg_shape().1, test.ehr_dim()];
    let expected = model.input_dims();
    if got != expected {
        return Err(LemofError::Data(format!(
            "model expects {} ECG channels and {} EHR features, dataset has {} and {}",
            expected[0], expected[1], got[0], got[1]
        )));
    }
    let scores: Vec<f64> = predict_dataset(&model, test)?
        .iter()
        .map(|o| o.score(variant))
        .collect();
    let record = evaluate(
        variant,
        &scores,
        &test.labels(),
        DEFAULT_THRESHOLD,
        model.config().seed,
    )?;
    print_json(&record)
}

fn explain(model_path: &Path) -> Result<()> {
    print_json(&report::explain(&load_model(model_path)?)?)
}

fn ablate(config_path: &Path, seeds: u64) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let data = cfg.load_data()?;
    let base = cfg.training.seed;
    let seeds: Vec<u64> = (0..seeds).map(|i| base + i).collect();
    let mut records = Vec::new();
    for &seed in &seeds {
        let training = lemof::pipeline::TrainConfig {
            seed,
            ..cfg.training
        };
        let (model, _) = train_pipeline_until(&training, &data, Stage::S6Final)?;
        info!("seed {seed} trained");
        records.extend(evaluate_variants(&model, &data.test, DEFAULT_THRESHOLD)?);
    }
    let scores = Variant::ALL
        .iter()
        .map(|v| {
            seeds
                .iter()
                .map(|s| {
                    records
                        .iter()
                        .find(|r| r.variant == *v && r.seed == *s)
                        .map(|r| r.auroc)
                })
                .collect()
        })
        .collect();
    let ranks = RankTable::new(
        Variant::ALL.iter().map(|v| v.to_string()).collect(),
        seeds.iter().map(|s| format!("seed {s}")).collect(),
        scores,
        true,
    )?;
    print_json(&Ablation {
        schema: ABLATE_SCHEMA,
        mean: summarize(&records),
        seeds,
        records,
        ranks,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => synth(config.as_deref(), &out, cli.json),
        Command::Train { config } => train(&config, cli.json),
        Command::Eval {
            model,
            data,
            variant,
        } => eval(&model, &data, &variant),
        Command::Explain { model } => explain(&model),
        Command::Ablate { config, seeds } => ablate(&config, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
