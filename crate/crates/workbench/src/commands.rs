//! The `gradia` command line.
//!
//! Every command reads and writes a fixed layout under the output directory:
//!
//! ```text
//! out/data/              manifest.jsonl, images/, config.toml
//! out/baseline/          params.bin, loss_curve.csv, config.toml
//! out/matrix/            matrix.json, metrics.txt (validation, oracle verdicts)
//! out/finetune-C4/       params.bin, loss_curve.csv, config.toml, report.json
//! out/<run>/test/        matrix.json, metrics.txt, evaluation.json
//! out/fewshot/           report.json, summary.md
//! out/service/           annotation log, snapshots, job runs, active params
//! out/report.md
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradia_core::dataset::Split;
use gradia_core::loss::Condition;
use gradia_core::synthetic::{generate_dataset, SyntheticInstance};
use gradia_core::trainer::{
    build_validation_matrix, evaluate, finetune_gradia, train_baseline, Evaluation, OracleAnnotator, RunReport,
    TrainConfig,
};

use crate::archive::read_params;
use crate::config::WorkbenchConfig;
use crate::dataset_io::{read_dataset, split_of, write_dataset};
use crate::error::{write_file, Result, WorkbenchError};
use crate::run::{
    condition_table, parse_metrics_text, read_json, write_json, ConditionRow, RunArtifacts,
    CONFIG_FILE, MATRIX_FILE, METRICS_FILE, PARAMS_FILE, REPORT_FILE,
};
use crate::service::{router, Service, ServiceOptions};
use crate::study::{few_shot_report, prepare_few_shot};

pub const DATA_DIR: &str = "data";
pub const BASELINE_DIR: &str = "baseline";
pub const MATRIX_DIR: &str = "matrix";
pub const TEST_DIR: &str = "test";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const FEWSHOT_DIR: &str = "fewshot";
pub const SERVICE_DIR: &str = "service";
pub const REPORT_MD: &str = "report.md";

pub fn finetune_dir(condition: Condition) -> String {
    format!("finetune-{condition:?}")
}

#[derive(Debug, Parser)]
#[command(name = "gradia", version, about = "Human-steerable attention alignment workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reseeds data generation and both optimizers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "GRADIA_DATA_DIR", default_value = "gradia-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_parser = parse_condition)]
    pub condition: Option<Condition>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub higher_order: Option<Switch>,
    /// Worker threads for the few-shot study.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark into out/data.
    GenData {
        /// Config file with the scene spec; same as --config.
        spec: Option<PathBuf>,
    },
    /// Train the base model on the training split.
    Train,
    /// Build the validation reasonability matrix with the oracle annotator.
    Matrix,
    /// Fine-tune the base model under --condition.
    Finetune,
    /// Evaluate the base model and every fine-tuned run on the test split.
    Evaluate,
    /// Few-shot study and attention-weight sweep.
    Fewshot,
    /// Serve the annotation API over out/data and the active model.
    Serve {
        #[arg(long, env = "GRADIA_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Side-by-side condition table from the evaluations under out/.
    Report,
}

fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    match s.to_ascii_uppercase().as_str() {
        "C1" => Ok(Condition::C1),
        "C2" => Ok(Condition::C2),
        "C3" => Ok(Condition::C3),
        "C4" => Ok(Condition::C4),
        _ => Err(format!("unknown condition {s:?}, expected C1..C4")),
    }
}

impl GlobalArgs {
    /// The config file with the command-line overrides applied.
    pub fn resolve(&self, spec: Option<&PathBuf>) -> Result<WorkbenchConfig> {
        let mut c = WorkbenchConfig::load_or_default(spec.or(self.config.as_ref()))?;
        if let Some(seed) = self.seed {
            c = crate::study::seeded(&c, seed);
        }
        let ft = &mut c.finetune;
        if let Some(cond) = self.condition {
            ft.condition = cond;
        }
        if let Some(a) = self.alpha {
            ft.factors.alpha = a;
        }
        if let Some(b) = self.beta {
            ft.factors.beta = b;
        }
        if let Some(g) = self.gamma {
            ft.factors.gamma = g;
        }
        if let Some(h) = self.higher_order {
            ft.higher_order = h == Switch::On;
        }
        if self.jobs == 0 {
            return Err(WorkbenchError::Config("--jobs must be at least 1".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

/// What a command prints on success.
pub type Output = String;

pub fn run(cli: &Cli) -> Result<Output> {
    let g = &cli.global;
    let out = &g.out;
    match &cli.command {
        Command::GenData { spec } => gen_data(&g.resolve(spec.as_ref())?, out),
        Command::Train => train(&g.resolve(None)?, out),
        Command::Matrix => matrix(&g.resolve(None)?, out),
        Command::Finetune => finetune(&g.resolve(None)?, out),
        Command::Evaluate => evaluate_runs(&g.resolve(None)?, out),
        Command::Fewshot => fewshot(&g.resolve(None)?, out, g.jobs),
        Command::Serve { port, host } => serve(&g.resolve(None)?, out, host, *port),
        Command::Report => report(out),
    }
}

fn oracle(config: &WorkbenchConfig) -> OracleAnnotator {
    OracleAnnotator { config: config.oracle }
}

fn load_data(out: &Path) -> Result<Vec<SyntheticInstance>> {
    read_dataset(&out.join(DATA_DIR))
}

fn load_base(out: &Path) -> Result<gradia_core::model::Parameters> {
    read_params(&out.join(BASELINE_DIR).join(PARAMS_FILE), "baseline parameters (run `gradia train`)")
}

pub fn gen_data(config: &WorkbenchConfig, out: &Path) -> Result<Output> {
    let data = generate_dataset(&config.data.scene, config.data.counts())?;
    let dir = out.join(DATA_DIR);
    let manifest = write_dataset(&dir, &data)?;
    write_file(&dir.join(CONFIG_FILE), config.to_toml()?)?;
    let count = |s| data.iter().filter(|d| d.split == s).count();
    Ok(format!(
        "wrote {} ({} train, {} validation, {} test)\n",
        manifest.display(),
        count(Split::Train),
        count(Split::Validation),
        count(Split::Test)
    ))
}

pub fn train(config: &WorkbenchConfig, out: &Path) -> Result<Output> {
    let data = load_data(out)?;
    let trained = train_baseline(&split_of(&data, Split::Train), &config.model, &config.baseline)?;
    let dir = out.join(BASELINE_DIR);
    RunArtifacts {
        config: Some(config),
        params: Some(&trained.params),
        curve: Some(&trained.curve),
        ..Default::default()
    }
    .write(&dir)?;
    let last = trained.curve.last().map_or(f64::NAN, |p| p.breakdown.total);
    Ok(format!("wrote {} (final loss {last:.4})\n", dir.join(PARAMS_FILE).display()))
}

pub fn matrix(config: &WorkbenchConfig, out: &Path) -> Result<Output> {
    let data = load_data(out)?;
    let base = load_base(out)?;
    let (m, pools) = build_validation_matrix(&base, &split_of(&data, Split::Validation), &oracle(config))?;
    let metrics = gradia_core::reasonability::MetricsReport::from_matrix(&m, &[])?;
    let dir = out.join(MATRIX_DIR);
    RunArtifacts {
        config: Some(config),
        matrix: Some(&m),
        metrics: Some(&metrics),
        ..Default::default()
    }
    .write(&dir)?;
    let [ra, ua, ria, uia] = m.counts();
    Ok(format!(
        "validation matrix [RA {ra} UA {ua}; RIA {ria} UIA {uia}], {} instances queued for adjustment\n",
        pools.len()
    ))
}

pub fn finetune(config: &WorkbenchConfig, out: &Path) -> Result<Output> {
    let data = load_data(out)?;
    let base = load_base(out)?;
    let recorded: gradia_core::reasonability::ReasonabilityMatrix = read_json(
        &out.join(MATRIX_DIR).join(MATRIX_FILE),
        "validation matrix (run `gradia matrix`)",
    )?;
    let annotator = oracle(config);
    let (m, pools) = build_validation_matrix(&base, &split_of(&data, Split::Validation), &annotator)?;
    if m != recorded {
        return Err(WorkbenchError::Config(
            "the recorded validation matrix does not match this config and baseline; rerun `gradia matrix`".into(),
        ));
    }
    let cfg: TrainConfig = config.finetune;
    let started = std::time::Instant::now();
    let tuned = finetune_gradia(&base, &split_of(&data, Split::Train), &pools, &cfg)?;
    let test = split_of(&data, Split::Test);
    let tau = config.oracle.binarize_tau;
    let before = evaluate(&base, &test, &annotator, tau)?;
    let after = evaluate(&tuned.params, &test, &annotator, tau)?;
    let mut report = RunReport::new(cfg, before, after, tuned.curve.clone());
    report.wall_time_secs = Some(started.elapsed().as_secs_f64());
    let dir = out.join(finetune_dir(cfg.condition));
    RunArtifacts {
        config: Some(config),
        params: Some(&tuned.params),
        curve: Some(&tuned.curve),
        ..Default::default()
    }
    .write(&dir)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(format!(
        "wrote {} (test M1 {:.2}% -> {:.2}%, M4 {:.2}% -> {:.2}%)\n",
        dir.display(),
        100.0 * report.metrics_before.m1_accuracy,
        100.0 * report.metrics_after.m1_accuracy,
        100.0 * report.metrics_before.m4_attention_accuracy,
        100.0 * report.metrics_after.m4_attention_accuracy
    ))
}

/// Run directories holding parameters, baseline first, then fine-tuned runs
/// by condition.
fn model_runs(out: &Path) -> Vec<String> {
    std::iter::once(BASELINE_DIR.to_string())
        .chain(Condition::ALL.iter().map(|&c| finetune_dir(c)))
        .filter(|r| out.join(r).join(PARAMS_FILE).is_file())
        .collect()
}

pub fn evaluate_runs(config: &WorkbenchConfig, out: &Path) -> Result<Output> {
    let data = load_data(out)?;
    load_base(out)?;
    let test = split_of(&data, Split::Test);
    let mut rows = Vec::new();
    for run in model_runs(out) {
        let params = read_params(&out.join(&run).join(PARAMS_FILE), "parameters")?;
        let ev: Evaluation = evaluate(&params, &test, &oracle(config), config.oracle.binarize_tau)?;
        let dir = out.join(&run).join(TEST_DIR);
        RunArtifacts {
            matrix: Some(&ev.matrix),
            metrics: Some(&ev.metrics),
            ..Default::default()
        }
        .write(&dir)?;
        write_json(&dir.join(EVALUATION_FILE), &ev)?;
        rows.push(ConditionRow::new(run, &ev.matrix, &ev.metrics));
    }
    Ok(condition_table(&rows))
}

pub fn fewshot(config: &WorkbenchConfig, out: &Path, jobs: usize) -> Result<Output> {
    let bench = prepare_few_shot(config)?;
    let report = few_shot_report(config, &bench, jobs)?;
    let dir = out.join(FEWSHOT_DIR);
    write_json(&dir.join(REPORT_FILE), &report)?;
    let mut md = String::from("| Shots/class | Baseline AUC | GRADIA AUC | Gain | Wins |\n|---|---|---|---|---|\n");
    for r in &report.results {
        writeln!(
            md,
            "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:+.4} | {}/{} |",
            r.scenario.shots_per_class,
            r.baseline.mean,
            r.baseline.std,
            r.gradia.mean,
            r.gradia.std,
            r.improvement(),
            r.wins(),
            r.scenario.num_seeds
        )
        .expect("write to String");
    }
    md.push_str("\n| Attention weight | AUC mean | AUC std |\n|---|---|---|\n");
    for (w, s) in report.sweep_weights.iter().zip(&report.sweep) {
        writeln!(md, "| {w} | {:.4} | {:.4} |", s.mean, s.std).expect("write to String");
    }
    write_file(&dir.join("summary.md"), &md)?;
    Ok(md)
}

/// Builds the service over out/data with the active parameters, or the
/// baseline when none were activated yet.
pub fn service(config: &WorkbenchConfig, out: &Path) -> Result<Service> {
    let data = load_data(out)?;
    let state_dir = out.join(SERVICE_DIR);
    let active = state_dir.join(crate::service::ACTIVE_PARAMS);
    let params = if active.is_file() {
        read_params(&active, "active parameters")?
    } else {
        load_base(out)?
    };
    Service::new(
        data,
        params,
        ServiceOptions {
            state_dir: Some(state_dir),
            oracle: config.oracle,
            finetune: config.finetune,
        },
    )
}

pub fn serve(config: &WorkbenchConfig, out: &Path, host: &str, port: u16) -> Result<Output> {
    let service = Arc::new(service(config, out)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| WorkbenchError::Config(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
        eprintln!("serving http://{addr}/api");
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| WorkbenchError::Runtime(e.to_string()))
    })?;
    Ok(String::new())
}

/// Rows for every run with a test evaluation, in [`model_runs`] order.
pub fn report_rows(out: &Path) -> Result<Vec<ConditionRow>> {
    let mut rows = Vec::new();
    for run in std::iter::once(BASELINE_DIR.to_string()).chain(Condition::ALL.iter().map(|&c| finetune_dir(c))) {
        let dir = out.join(&run).join(TEST_DIR);
        if !dir.join(MATRIX_FILE).is_file() {
            continue;
        }
        let m = read_json(&dir.join(MATRIX_FILE), "test matrix")?;
        let text = crate::error::read_required(&dir.join(METRICS_FILE), "test metrics")?;
        let metrics = parse_metrics_text(&String::from_utf8_lossy(&text))?;
        rows.push(ConditionRow::new(run, &m, &metrics));
    }
    Ok(rows)
}

pub fn report(out: &Path) -> Result<Output> {
    let rows = report_rows(out)?;
    if rows.is_empty() {
        return Err(WorkbenchError::Missing(format!(
            "no test evaluations under {} (run `gradia evaluate`)",
            out.display()
        )));
    }
    let table = condition_table(&rows);
    write_file(&out.join(REPORT_MD), &table)?;
    Ok(table)
}
