//! Command-line pipeline: synth, featurize, train, predict, eval, explain.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 internal error.
//! All file writes are atomic (temp file + rename).

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use ridewait::config::RunConfig;
use ridewait::error::{Error, Result};
use ridewait::eval::run_experiment;
use ridewait::features::{FeatureMatrix, FeatureSchema, Task};
use ridewait::fsio;
use ridewait::gbt::{self, GbtModel};
use ridewait::pipeline::FittedPipeline;
use ridewait::synth;
use ridewait::trip::{
    chrono_split, parse_trips, write_rejections_csv, write_trips_csv, LabeledTrip, ParseOutcome,
};

#[derive(Parser)]
#[command(
    name = "ridewait",
    version,
    about = "Passenger waiting-time prediction pipeline"
)]
struct Cli {
    /// Skip the run_info.json timestamp sidecar so reruns are
    /// byte-identical.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Pre,
    Post,
}

impl From<TaskArg> for Task {
    fn from(value: TaskArg) -> Task {
        match value {
            TaskArg::Pre => Task::Pre,
            TaskArg::Post => Task::Post,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trip CSV plus a per-trip truth log.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split trips chronologically, fit featurization models on the train
    /// half, and write train/test feature matrices with their schema.
    Featurize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trips: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gradient-boosted model on a feature matrix.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict waiting times for a feature matrix with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment matrix and write reports plus a summary.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the model's ranked feature importance.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), out, cli.no_timestamp),
        Command::Featurize {
            config,
            trips,
            task,
            out,
        } => cmd_featurize(
            config.as_deref(),
            trips,
            (*task).into(),
            out,
            cli.no_timestamp,
        ),
        Command::Train {
            config,
            features,
            out,
        } => cmd_train(config.as_deref(), features, out, cli.no_timestamp),
        Command::Predict {
            model,
            features,
            out,
        } => cmd_predict(model, features, out),
        Command::Eval { config, trips, out } => {
            cmd_eval(config.as_deref(), trips, out, cli.no_timestamp)
        }
        Command::Explain { model, out } => cmd_explain(model, out),
    }
}

fn write_run_info(out: &Path, command: &str, no_timestamp: bool) -> Result<()> {
    if no_timestamp {
        return Ok(());
    }
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_err(|e| Error::Internal(e.to_string()))?
        .as_secs();
    let info = serde_json::json!({ "command": command, "generated_at": ts });
    fsio::write_atomic(&out.join("run_info.json"), info.to_string().as_bytes())
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fsio::write_atomic(
        &out.join("resolved_config.json"),
        cfg.resolved_json()?.as_bytes(),
    )
}

fn read_labeled_trips(path: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<LabeledTrip>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let ParseOutcome { accepted, rejected } = parse_trips(file, &cfg.grid)?;
    if !rejected.is_empty() {
        let mut buf = Vec::new();
        write_rejections_csv(&mut buf, &rejected)?;
        fsio::write_atomic(&out.join("rejections.csv"), &buf)?;
    }
    println!(
        "parsed {}: {} accepted, {} rejected",
        path.display(),
        accepted.len(),
        rejected.len()
    );
    if accepted.is_empty() {
        return Err(Error::Data(format!(
            "no usable trips in {}",
            path.display()
        )));
    }
    Ok(accepted)
}

fn schema_path(features: &Path) -> PathBuf {
    features.with_extension("schema.json")
}

fn read_matrix(features: &Path) -> Result<FeatureMatrix> {
    let schema = FeatureSchema::from_json(&fsio::read_to_string(&schema_path(features))?)?;
    let file = std::fs::File::open(features)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", features.display())))?;
    FeatureMatrix::read_csv(file, schema)
}

fn write_matrix(fm: &FeatureMatrix, out: &Path, stem: &str) -> Result<()> {
    let mut buf = Vec::new();
    fm.write_csv(&mut buf)?;
    fsio::write_atomic(&out.join(format!("{stem}.csv")), &buf)?;
    fsio::write_atomic(
        &out.join(format!("{stem}.schema.json")),
        fm.schema.to_json()?.as_bytes(),
    )
}

fn cmd_synth(config: Option<&Path>, out: &Path, no_timestamp: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let generated = synth::generate(&cfg.synth, &cfg.grid, &cfg.slots)?;
    let mut buf = Vec::new();
    write_trips_csv(&mut buf, &generated.records)?;
    fsio::write_atomic(&out.join("trips.csv"), &buf)?;
    fsio::write_atomic(
        &out.join("truth.json"),
        generated.truth.to_json()?.as_bytes(),
    )?;
    echo_config(&cfg, out)?;
    write_run_info(out, "synth", no_timestamp)?;
    println!(
        "wrote {} trips to {}",
        generated.records.len(),
        out.join("trips.csv").display()
    );
    Ok(())
}

fn cmd_featurize(
    config: Option<&Path>,
    trips: &Path,
    task: Task,
    out: &Path,
    no_timestamp: bool,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    std::fs::create_dir_all(out)?;
    let labeled = read_labeled_trips(trips, &cfg, out)?;
    let split = chrono_split(labeled, cfg.eval.train_frac)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let pipeline = FittedPipeline::fit(&split.train, &cfg)?;

    let train_fm = pipeline.featurize(&split.train, task, true)?;
    let test_fm = pipeline.featurize(&split.test, task, true)?;
    write_matrix(&train_fm, out, "features_train")?;
    write_matrix(&test_fm, out, "features_test")?;

    let models_dir = out.join("models");
    fsio::write_atomic(
        &models_dir.join("ds_index.json"),
        pipeline.ds_index.to_json()?.as_bytes(),
    )?;
    fsio::write_atomic(
        &models_dir.join("interactions.json"),
        pipeline.models.to_json()?.as_bytes(),
    )?;
    echo_config(&cfg, out)?;
    write_run_info(out, "featurize", no_timestamp)?;
    println!(
        "featurized task={} train={}x{} test={}x{}",
        task.name(),
        train_fm.n_rows(),
        train_fm.n_cols(),
        test_fm.n_rows(),
        test_fm.n_cols()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, features: &Path, out: &Path, no_timestamp: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let fm = read_matrix(features)?;
    let model = gbt::train(&fm, &cfg.gbt)?;
    model.save(&out.join("model.json"))?;
    echo_config(&cfg, out)?;
    write_run_info(out, "train", no_timestamp)?;
    println!(
        "trained {} trees on {} rows ({} internal nodes)",
        model.trees.len(),
        fm.n_rows(),
        model.n_internal_nodes()
    );
    Ok(())
}

fn cmd_predict(model_path: &Path, features: &Path, out: &Path) -> Result<()> {
    let model = GbtModel::load(model_path)?;
    let fm = read_matrix(features)?;
    let preds = model.predict(&fm)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["order_id", "wt_pred_s"])?;
    for (id, p) in fm.ids.iter().zip(&preds) {
        w.write_record([id.clone(), format!("{p:.3}")])?;
    }
    let buf = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    fsio::write_atomic(&out.join("predictions.csv"), &buf)?;
    println!("wrote {} predictions", preds.len());
    Ok(())
}

fn cmd_eval(config: Option<&Path>, trips: &Path, out: &Path, no_timestamp: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    std::fs::create_dir_all(out)?;
    let labeled = read_labeled_trips(trips, &cfg, out)?;
    let result = run_experiment(labeled, &cfg)?;

    for report in &result.reports {
        let name = format!("report_{}_{}.json", report.task.name(), report.model_name);
        fsio::write_atomic(&out.join(name), report.to_json()?.as_bytes())?;
    }
    fsio::write_atomic(&out.join("summary.csv"), result.summary_csv()?.as_bytes())?;
    result
        .pre_full_model
        .save(&out.join("model_pre_fixgboost.json"))?;
    result
        .post_full_model
        .save(&out.join("model_post_fixgboost.json"))?;
    echo_config(&cfg, out)?;
    write_run_info(out, "eval", no_timestamp)?;

    println!(
        "evaluated {} models on {} test trips (train {})",
        result.reports.len(),
        result.n_test,
        result.n_train
    );
    print!("{}", result.summary_csv()?);
    Ok(())
}

fn cmd_explain(model_path: &Path, out: &Path) -> Result<()> {
    let model = GbtModel::load(model_path)?;
    let ranked = model.ranked_importance();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["feature", "normalized_gain"])?;
    for (name, gain) in &ranked {
        w.write_record([name.clone(), gain.to_string()])?;
    }
    let buf = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    fsio::write_atomic(&out.join("importance.csv"), &buf)?;
    match ranked.first() {
        Some((name, gain)) => println!(
            "wrote importance for {} features; top: {} ({:.4})",
            ranked.len(),
            name,
            gain
        ),
        None => println!("model has no splits; importance is empty"),
    }
    Ok(())
}
