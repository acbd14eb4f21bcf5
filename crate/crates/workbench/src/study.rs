//! In-memory orchestration of the two studies: condition comparison on the
//! synthetic benchmark and the few-shot study.

use std::time::Instant;

use gradia_core::dataset::Split;
use gradia_core::loss::Condition;
use gradia_core::model::Parameters;
use gradia_core::synthetic::{generate_dataset, oracle_mask, SceneSpec, SplitCounts, SyntheticInstance};
use gradia_core::trainer::{
    build_validation_matrix, evaluate, few_shot_study, finetune_gradia, pool_entry, sensitivity_sweep,
    train_baseline, AnnotationPools, ArmSummary, Evaluation, FewShotResult, FewShotScenario, OracleAnnotator,
    PoolEntry, RunReport, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::WorkbenchConfig;
use crate::dataset_io::split_of;
use crate::error::Result;

/// Outcome of one seed of the condition study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStudy {
    pub seed: u64,
    pub baseline_train: Evaluation,
    pub validation_counts: [usize; 4],
    pub reports: Vec<RunReport>,
    pub baseline_secs: f64,
}

impl ConditionStudy {
    pub fn report(&self, condition: Condition) -> Option<&RunReport> {
        self.reports.iter().find(|r| r.condition == condition)
    }
}

/// Everything the condition study needs after the base model is trained.
pub struct Prepared {
    pub data: Vec<SyntheticInstance>,
    pub base: Parameters,
    pub pools: AnnotationPools,
    pub validation_counts: [usize; 4],
    pub baseline_secs: f64,
}

impl Prepared {
    pub fn split(&self, s: Split) -> Vec<SyntheticInstance> {
        split_of(&self.data, s)
    }
}

/// The config with the scene and both optimizers reseeded.
pub fn seeded(config: &WorkbenchConfig, seed: u64) -> WorkbenchConfig {
    let mut c = config.clone();
    c.data.scene.seed = seed;
    c.baseline.seed = seed;
    c.finetune.seed = seed;
    c
}

/// Generates the benchmark, trains the base model and builds the
/// validation matrix with the oracle.
pub fn prepare(config: &WorkbenchConfig) -> Result<Prepared> {
    let data = generate_dataset(&config.data.scene, config.data.counts())?;
    let train = split_of(&data, Split::Train);
    let t = Instant::now();
    let base = train_baseline(&train, &config.model, &config.baseline)?.params;
    let baseline_secs = t.elapsed().as_secs_f64();
    let oracle = OracleAnnotator { config: config.oracle };
    let (matrix, pools) = build_validation_matrix(&base, &split_of(&data, Split::Validation), &oracle)?;
    Ok(Prepared {
        data,
        base,
        pools,
        validation_counts: matrix.counts(),
        baseline_secs,
    })
}

/// Fine-tunes from the prepared base under `condition` and evaluates on the
/// test split.
pub fn run_condition(config: &WorkbenchConfig, prepared: &Prepared, condition: Condition) -> Result<RunReport> {
    let oracle = OracleAnnotator { config: config.oracle };
    let tau = config.oracle.binarize_tau;
    let test = prepared.split(Split::Test);
    let cfg = TrainConfig {
        condition,
        ..config.finetune
    };
    let t = Instant::now();
    let tuned = finetune_gradia(&prepared.base, &prepared.split(Split::Train), &prepared.pools, &cfg)?;
    let before = evaluate(&prepared.base, &test, &oracle, tau)?;
    let after = evaluate(&tuned.params, &test, &oracle, tau)?;
    let mut report = RunReport::new(cfg, before, after, tuned.curve);
    report.wall_time_secs = Some(t.elapsed().as_secs_f64());
    Ok(report)
}

pub fn condition_study(config: &WorkbenchConfig, seed: u64, conditions: &[Condition]) -> Result<ConditionStudy> {
    let config = seeded(config, seed);
    let prepared = prepare(&config)?;
    let oracle = OracleAnnotator { config: config.oracle };
    let baseline_train = evaluate(&prepared.base, &prepared.split(Split::Train), &oracle, config.oracle.binarize_tau)?;
    let reports = conditions
        .iter()
        .map(|&c| run_condition(&config, &prepared, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionStudy {
        seed,
        baseline_train,
        validation_counts: prepared.validation_counts,
        reports,
        baseline_secs: prepared.baseline_secs,
    })
}

/// Base model, annotated shot pool and test split of the few-shot study.
pub struct FewShotBench {
    pub base: Parameters,
    pub pool: Vec<PoolEntry>,
    pub test: Vec<SyntheticInstance>,
}

pub fn prepare_few_shot(config: &WorkbenchConfig) -> Result<FewShotBench> {
    let f = &config.fewshot;
    let scene = |p: f64, seed: u64| SceneSpec {
        context_cooccurrence_train: p,
        seed,
        ..config.data.scene.clone()
    };
    let counts = SplitCounts::from_total(f.total);
    let pretrain = generate_dataset(&scene(f.pretrain_cooccurrence, f.pretrain_seed), counts)?;
    let target = generate_dataset(&scene(f.target_cooccurrence, f.target_seed), counts)?;
    let cfg = TrainConfig {
        epochs: f.pretrain_epochs,
        ..config.baseline
    };
    let base = train_baseline(&split_of(&pretrain, Split::Train), &config.model, &cfg)?.params;
    let pool = target
        .iter()
        .filter(|d| d.split != Split::Test)
        .map(|d| pool_entry(&base, d, &oracle_mask(d)))
        .collect::<gradia_core::Result<Vec<_>>>()?;
    Ok(FewShotBench {
        base,
        pool,
        test: split_of(&target, Split::Test),
    })
}

/// Few-shot results per shot count followed by the sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub results: Vec<FewShotResult>,
    pub sweep_weights: Vec<f64>,
    pub sweep: Vec<ArmSummary>,
}

/// Runs every configured shot count, spreading them over `jobs` threads;
/// results come back in configuration order whatever the thread count.
pub fn few_shot_report(config: &WorkbenchConfig, bench: &FewShotBench, jobs: usize) -> Result<FewShotReport> {
    let f = &config.fewshot;
    let scenarios: Vec<FewShotScenario> = f
        .shots
        .iter()
        .map(|&s| FewShotScenario {
            shots_per_class: s,
            num_seeds: f.num_seeds,
        })
        .collect();
    let jobs = jobs.max(1);
    let mut slots: Vec<Option<Result<FewShotResult>>> = scenarios.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let scenarios = &scenarios;
                scope.spawn(move || {
                    (j..scenarios.len())
                        .step_by(jobs)
                        .map(|i| (i, few_shot_study(&bench.base, &bench.pool, &bench.test, &scenarios[i], &f.arms).map_err(Into::into)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("few-shot worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let results = slots
        .into_iter()
        .map(|r| r.expect("every scenario ran"))
        .collect::<Result<Vec<_>>>()?;
    let sweep_scenario = FewShotScenario {
        shots_per_class: f.sweep_shots,
        num_seeds: f.num_seeds,
    };
    let sweep = sensitivity_sweep(&bench.base, &bench.pool, &bench.test, &f.sweep_weights, &sweep_scenario, &f.arms)?;
    Ok(FewShotReport {
        results,
        sweep_weights: f.sweep_weights.clone(),
        sweep,
    })
}
