//! Background fine-tuning and evaluation jobs.
//!
//! At most one job of each kind is queued or running at a time. A job only
//! ever moves forward through `queued → running → done | failed`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use gradia_core::dataset::{Example, Split};
use gradia_core::loss::LossBreakdown;
use gradia_core::model::Parameters;
use gradia_core::reasonability::{MetricsReport, ReasonabilityMatrix};
use gradia_core::synthetic::SyntheticInstance;
use gradia_core::trainer::{
    build_validation_matrix, evaluate, finetune_gradia_observed, Annotator, Evaluation, OracleAnnotator,
    StoredAnnotations, TrainConfig,
};
use serde::{Deserialize, Serialize};

use super::{ApiError, Service};
use crate::run::{write_json, RunArtifacts};

pub const JOB_CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Finetune,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_active(self) -> bool {
        matches!(self, Self::Queued | Self::Running)
    }
}

/// Whose verdicts and masks a job uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorSource {
    /// The annotations posted to this service.
    #[default]
    Stored,
    /// The synthetic ground truth.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub kind: JobKind,
    /// Keys of the fine-tuning config to override, e.g.
    /// `{"epochs": 3, "factors": {"alpha": 1.0}}`.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub annotator: AnnotatorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction of optimizer steps completed, in `[0, 1]`.
    pub progress: f64,
    /// Run manifest directory once done.
    pub result_ref: Option<String>,
    pub error_message: Option<String>,
    /// Version of the active model the job started from.
    pub base_version: u64,
    pub config: TrainConfig,
    pub loss: Option<LossBreakdown>,
    pub matrix: Option<ReasonabilityMatrix>,
    pub metrics: Option<MetricsReport>,
}

struct JobEntry {
    status: JobStatus,
    output: Option<Arc<Parameters>>,
}

#[derive(Default)]
pub struct JobBoard {
    inner: Mutex<BTreeMap<u64, JobEntry>>,
}

impl JobBoard {
    fn with<T>(&self, f: impl FnOnce(&mut BTreeMap<u64, JobEntry>) -> T) -> T {
        f(&mut self.inner.lock().expect("job board lock"))
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut JobEntry)) {
        self.with(|jobs| {
            if let Some(e) = jobs.get_mut(&id) {
                f(e);
            }
        });
    }

    pub fn status(&self, id: u64) -> Option<JobStatus> {
        self.with(|jobs| jobs.get(&id).map(|e| e.status.clone()))
    }

    /// Parameters produced by a finished fine-tuning job.
    pub fn output(&self, id: u64) -> Result<Arc<Parameters>, ApiError> {
        self.with(|jobs| {
            let e = jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("no job {id}")))?;
            match (e.status.kind, e.status.state) {
                (JobKind::Evaluate, _) => Err(ApiError::bad_request(format!("job {id} is an evaluation and has no parameters"))),
                (_, JobState::Done) => Ok(e.output.clone().expect("done fine-tuning jobs keep their output")),
                (_, s) => Err(ApiError::conflict(format!("job {id} is {s:?}, not done").to_lowercase())),
            }
        })
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The service's fine-tuning config with the request's overrides applied.
pub fn resolve_config(base: &TrainConfig, overrides: Option<&serde_json::Value>) -> Result<TrainConfig, ApiError> {
    let Some(over) = overrides else { return Ok(*base) };
    if !over.is_object() {
        return Err(ApiError::bad_request("config must be a JSON object"));
    }
    let mut value = serde_json::to_value(base).map_err(ApiError::internal)?;
    merge_json(&mut value, over.clone());
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(config)
}

enum JobAnnotator {
    Oracle(OracleAnnotator),
    Stored(StoredAnnotations),
}

impl JobAnnotator {
    /// The instances of `split` this annotator can judge.
    fn judged(&self, instances: &[SyntheticInstance], split: Split) -> Vec<SyntheticInstance> {
        instances
            .iter()
            .filter(|d| d.split == split)
            .filter(|d| match self {
                Self::Oracle(_) => true,
                Self::Stored(s) => s.verdicts.contains_key(&d.id()),
            })
            .cloned()
            .collect()
    }
}

impl Annotator<SyntheticInstance> for JobAnnotator {
    fn verdict(
        &self,
        instance: &SyntheticInstance,
        attention: &gradia_core::attention::AttentionMap,
    ) -> gradia_core::Result<gradia_core::reasonability::Verdict> {
        match self {
            Self::Oracle(o) => o.verdict(instance, attention),
            Self::Stored(s) => s.verdict(instance, attention),
        }
    }

    fn mask(&self, instance: &SyntheticInstance) -> gradia_core::Result<Option<gradia_core::attention::BinaryMask>> {
        match self {
            Self::Oracle(o) => o.mask(instance),
            Self::Stored(s) => s.mask(instance),
        }
    }
}

struct JobOutcome {
    params: Option<Parameters>,
    evaluation: Option<Evaluation>,
    curve: Vec<gradia_core::trainer::LossPoint>,
}

impl Service {
    /// Queues a job and starts it on the blocking pool.
    pub fn submit_job(self: &Arc<Self>, request: JobRequest) -> Result<JobStatus, ApiError> {
        let config = resolve_config(&self.options.finetune, request.config.as_ref())?;
        let annotator = match request.annotator {
            AnnotatorSource::Oracle => JobAnnotator::Oracle(OracleAnnotator { config: self.options.oracle }),
            AnnotatorSource::Stored => JobAnnotator::Stored(self.stored_annotations()?),
        };
        let model = self.active();
        let status = self.jobs.with(|jobs| {
            if let Some(busy) = jobs.values().find(|e| e.status.kind == request.kind && e.status.state.is_active()) {
                return Err(ApiError::conflict(format!(
                    "job {} of the same kind is still {:?}",
                    busy.status.job_id, busy.status.state
                )
                .to_lowercase()));
            }
            let job_id = jobs.keys().next_back().map_or(1, |k| k + 1);
            let status = JobStatus {
                job_id,
                kind: request.kind,
                state: JobState::Queued,
                progress: 0.0,
                result_ref: None,
                error_message: None,
                base_version: model.version,
                config,
                loss: None,
                matrix: None,
                metrics: None,
            };
            jobs.insert(
                job_id,
                JobEntry {
                    status: status.clone(),
                    output: None,
                },
            );
            Ok(status)
        })?;
        let service = Arc::clone(self);
        let id = status.job_id;
        let kind = status.kind;
        tokio::task::spawn_blocking(move || {
            service.jobs.update(id, |e| e.status.state = JobState::Running);
            let outcome = service.execute(id, kind, &model.params, &config, &annotator);
            let outcome = outcome.and_then(|o| service.persist(id, &config, &o).map(|dir| (o, dir)));
            service.jobs.update(id, |e| match outcome {
                Ok((o, dir)) => {
                    e.status.state = JobState::Done;
                    e.status.progress = 1.0;
                    e.status.result_ref = dir.map(|d| d.display().to_string());
                    if let Some(ev) = o.evaluation {
                        e.status.matrix = Some(ev.matrix);
                        e.status.metrics = Some(ev.metrics);
                    }
                    e.output = o.params.map(Arc::new);
                }
                Err(err) => {
                    e.status.state = JobState::Failed;
                    e.status.error_message = Some(err);
                }
            });
        });
        Ok(status)
    }

    pub fn get_job(&self, id: u64) -> Result<JobStatus, ApiError> {
        self.jobs.status(id).ok_or_else(|| ApiError::not_found(format!("no job {id}")))
    }

    fn execute(
        &self,
        id: u64,
        kind: JobKind,
        params: &Parameters,
        config: &TrainConfig,
        annotator: &JobAnnotator,
    ) -> Result<JobOutcome, String> {
        let tau = self.options.oracle.binarize_tau;
        let test = annotator.judged(&self.instances, Split::Test);
        let evaluate_on = |p: &Parameters| -> Result<Option<Evaluation>, String> {
            if test.is_empty() {
                return Ok(None);
            }
            evaluate(p, &test, annotator, tau).map(Some).map_err(|e| e.to_string())
        };
        match kind {
            JobKind::Evaluate => {
                let evaluation = evaluate_on(params)?;
                if evaluation.is_none() {
                    return Err("no annotated test instances to evaluate".into());
                }
                Ok(JobOutcome {
                    params: None,
                    evaluation,
                    curve: Vec::new(),
                })
            }
            JobKind::Finetune => {
                let validation = annotator.judged(&self.instances, Split::Validation);
                if validation.is_empty() {
                    return Err("no annotated validation instances to fine-tune on".into());
                }
                let (_, pools) = build_validation_matrix(params, &validation, annotator).map_err(|e| e.to_string())?;
                let train: Vec<SyntheticInstance> =
                    self.instances.iter().filter(|d| d.split == Split::Train).cloned().collect();
                let trained = finetune_gradia_observed(params, &train, &pools, config, &mut |p| {
                    let fraction = p.step as f64 / p.total_steps.max(1) as f64;
                    let loss = p.breakdown;
                    self.jobs.update(id, |e| {
                        e.status.progress = fraction.min(1.0);
                        e.status.loss = Some(loss);
                    });
                })
                .map_err(|e| e.to_string())?;
                Ok(JobOutcome {
                    evaluation: evaluate_on(&trained.params)?,
                    params: Some(trained.params),
                    curve: trained.curve,
                })
            }
        }
    }

    /// Writes the run manifest of a finished job under `runs/job-{id}`.
    fn persist(&self, id: u64, config: &TrainConfig, o: &JobOutcome) -> Result<Option<PathBuf>, String> {
        let Some(root) = self.state_dir() else { return Ok(None) };
        let dir = root.join("runs").join(format!("job-{id}"));
        let curve = (!o.curve.is_empty()).then_some(o.curve.as_slice());
        RunArtifacts {
            config: None,
            params: o.params.as_ref(),
            curve,
            matrix: o.evaluation.as_ref().map(|e| &e.matrix),
            metrics: o.evaluation.as_ref().map(|e| &e.metrics),
        }
        .write(&dir)
        .and_then(|()| write_json(&dir.join(JOB_CONFIG_FILE), config))
        .map_err(|e| e.to_string())?;
        Ok(Some(dir))
    }
}
