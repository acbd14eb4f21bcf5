//! The annotation service: instances, predictions and attention overlays
//! for the active model, an append-only annotation store, the live
//! reasonability matrix and background fine-tuning jobs.

pub mod api;
pub mod jobs;
pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use base64::Engine as _;
use gradia_core::attention::{attention_map, upsample, BinaryMask, MaskProvenance};
use gradia_core::dataset::{InstanceId, Split};
use gradia_core::model::{forward, predict_from_logits, Parameters};
use gradia_core::reasonability::{
    build_matrix, classify_instance, iou, MetricsReport, Quadrant, ReasonabilityMatrix, ReasonabilityRecord,
};
use gradia_core::synthetic::{binarized_attention, OracleConfig, SyntheticInstance};
use gradia_core::trainer::{StoredAnnotations, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::archive::write_params;
use crate::pngio::{encode_gray, encode_heatmap};
use store::{AnnotationRecord, AnnotationStore, Answers, Payload, StoreState};

pub use api::{router, ApiError};
pub use jobs::{JobKind, JobRequest, JobState, JobStatus};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

/// Prediction of the active model for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Parameters being served, with predictions computed on first use.
pub struct ActiveModel {
    pub params: Parameters,
    pub version: u64,
    predictions: OnceLock<Vec<Prediction>>,
}

impl ActiveModel {
    fn new(params: Parameters, version: u64) -> Self {
        Self {
            params,
            version,
            predictions: OnceLock::new(),
        }
    }

    fn predictions(&self, instances: &[SyntheticInstance]) -> &[Prediction] {
        self.predictions.get_or_init(|| {
            instances
                .iter()
                .map(|d| {
                    let trace = forward(&self.params, &d.image).expect("dataset matches the model");
                    let (class, probabilities) = predict_from_logits(&trace.logits);
                    Prediction { class, probabilities }
                })
                .collect()
        })
    }
}

pub struct ServiceOptions {
    /// Where the annotation log, job outputs and activated parameters live.
    pub state_dir: Option<PathBuf>,
    pub oracle: OracleConfig,
    pub finetune: TrainConfig,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            state_dir: None,
            oracle: OracleConfig::default(),
            finetune: TrainConfig::finetune(),
        }
    }
}

pub const ACTIVE_PARAMS: &str = "active/params.bin";

pub struct Service {
    instances: Vec<SyntheticInstance>,
    index: BTreeMap<InstanceId, usize>,
    model: RwLock<Arc<ActiveModel>>,
    store: Mutex<AnnotationStore>,
    jobs: jobs::JobBoard,
    options: ServiceOptions,
}

/// Summary row of `GET /api/instances`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: InstanceId,
    pub split: Split,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub quadrant: Option<Quadrant>,
    pub annotated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceFilter {
    pub split: Option<String>,
    pub quadrant: Option<String>,
    pub annotated: Option<bool>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePage {
    pub items: Vec<InstanceSummary>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub annotator_id: String,
    pub revision: u64,
    pub verdict: Option<Answers>,
    pub mask_rle: Option<Vec<u32>>,
    pub likert: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDetail {
    pub id: InstanceId,
    pub split: Split,
    pub label: usize,
    pub prediction: Prediction,
    pub quadrant: Option<Quadrant>,
    pub model_version: u64,
    /// Base64 grayscale PNG.
    pub image_png: String,
    /// Normalized Grad-CAM map of the predicted class on the feature grid.
    pub attention: GridPayload,
    /// The same map upsampled to image resolution.
    pub overlay: GridPayload,
    /// Base64 RGB heatmap PNG of `overlay`.
    pub heatmap_png: String,
    pub annotations: Vec<AnnotationView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub ra: usize,
    pub ua: usize,
    pub ria: usize,
    pub uia: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixView {
    pub matrix: ReasonabilityMatrix,
    pub counts: QuadrantCounts,
    /// Absent while no instance has a verdict.
    pub metrics: Option<MetricsReport>,
    pub annotated: usize,
    pub total_instances: usize,
    /// Set when the counts cover only part of the dataset.
    pub partial: bool,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteAck {
    pub instance_id: InstanceId,
    pub revision: u64,
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl Service {
    pub fn new(mut instances: Vec<SyntheticInstance>, params: Parameters, options: ServiceOptions) -> crate::Result<Self> {
        instances.sort_by_key(|d| d.id);
        let mut index = BTreeMap::new();
        for (i, d) in instances.iter().enumerate() {
            if index.insert(d.id, i).is_some() {
                return Err(crate::WorkbenchError::Config(format!("duplicate instance id {}", d.id)));
            }
            let cfg = params.config();
            if (d.image.channels(), d.image.height(), d.image.width()) != (cfg.input_channels, cfg.input_height, cfg.input_width) {
                return Err(crate::WorkbenchError::Config(format!(
                    "instance {} does not match the model input shape",
                    d.id
                )));
            }
        }
        let store = match &options.state_dir {
            Some(dir) => AnnotationStore::open(dir)?,
            None => AnnotationStore::in_memory(),
        };
        Ok(Self {
            instances,
            index,
            model: RwLock::new(Arc::new(ActiveModel::new(params, 0))),
            store: Mutex::new(store),
            jobs: jobs::JobBoard::default(),
            options,
        })
    }

    pub fn active(&self) -> Arc<ActiveModel> {
        self.model.read().expect("model lock").clone()
    }

    pub fn instances(&self) -> &[SyntheticInstance] {
        &self.instances
    }

    pub fn options(&self) -> &ServiceOptions {
        &self.options
    }

    /// A copy of the annotation state, taken under the writer lock.
    pub fn store_state(&self) -> StoreState {
        self.store.lock().expect("store lock").state().clone()
    }

    fn instance(&self, id: InstanceId) -> Result<(usize, &SyntheticInstance), ApiError> {
        self.index
            .get(&id)
            .map(|&i| (i, &self.instances[i]))
            .ok_or_else(|| ApiError::not_found(format!("no instance {id}")))
    }

    fn quadrant(state: &StoreState, id: InstanceId, correct: bool) -> Option<Quadrant> {
        state.verdict(id).map(|v| classify_instance(correct, &v))
    }

    pub fn list_instances(&self, filter: &InstanceFilter) -> Result<InstancePage, ApiError> {
        let split = match filter.split.as_deref() {
            None | Some("") | Some("all") => None,
            Some(s) => Some(Split::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown split {s:?}")))?),
        };
        let quadrant = match filter.quadrant.as_deref() {
            None | Some("") => None,
            Some(q) => Some(Quadrant::parse(q).ok_or_else(|| ApiError::bad_request(format!("unknown quadrant {q:?}")))?),
        };
        let page_size = filter.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ApiError::bad_request(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
        }
        let page = filter.page.unwrap_or(0);
        let model = self.active();
        let predictions = model.predictions(&self.instances);
        let state = self.store_state();
        let matches: Vec<InstanceSummary> = self
            .instances
            .iter()
            .zip(predictions)
            .map(|(d, p)| {
                let correct = p.class == d.label;
                InstanceSummary {
                    id: d.id,
                    split: d.split,
                    label: d.label,
                    prediction: p.class,
                    correct,
                    quadrant: Self::quadrant(&state, d.id, correct),
                    annotated: state.verdict(d.id).is_some(),
                }
            })
            .filter(|s| split.is_none_or(|sp| s.split == sp))
            .filter(|s| quadrant.is_none_or(|q| s.quadrant == Some(q)))
            .filter(|s| filter.annotated.is_none_or(|a| s.annotated == a))
            .collect();
        let total = matches.len();
        Ok(InstancePage {
            items: matches.into_iter().skip(page * page_size).take(page_size).collect(),
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
        })
    }

    pub fn get_instance(&self, id: InstanceId) -> Result<InstanceDetail, ApiError> {
        let (i, d) = self.instance(id)?;
        let model = self.active();
        let prediction = model.predictions(&self.instances)[i].clone();
        let trace = forward(&model.params, &d.image).map_err(ApiError::internal)?;
        let map = attention_map(&model.params, &trace, prediction.class).map_err(ApiError::internal)?;
        let up = upsample(&map.grid, d.image.height(), d.image.width()).map_err(ApiError::internal)?;
        let state = self.store_state();
        let annotations = state
            .annotators(id)
            .map(|(a, s)| AnnotationView {
                annotator_id: a.clone(),
                revision: s.revision,
                verdict: s.verdict,
                mask_rle: s.mask_rle.clone(),
                likert: s.likert,
            })
            .collect();
        Ok(InstanceDetail {
            id,
            split: d.split,
            label: d.label,
            quadrant: Self::quadrant(&state, id, prediction.class == d.label),
            prediction,
            model_version: model.version,
            image_png: b64(&encode_gray(&d.image).map_err(ApiError::internal)?),
            attention: GridPayload {
                rows: map.grid.rows(),
                cols: map.grid.cols(),
                values: map.grid.as_slice().to_vec(),
            },
            heatmap_png: b64(&encode_heatmap(&up).map_err(ApiError::internal)?),
            overlay: GridPayload {
                rows: up.rows(),
                cols: up.cols(),
                values: up.into_vec(),
            },
            annotations,
        })
    }

    fn write(&self, id: InstanceId, annotator: &str, payload: Payload) -> Result<WriteAck, ApiError> {
        self.instance(id)?;
        let mut store = self.store.lock().expect("store lock");
        let record: AnnotationRecord = store
            .append(id, annotator, payload, now_secs())
            .map_err(|e| match e {
                crate::WorkbenchError::Config(m) => ApiError::bad_request(m),
                other => ApiError::internal(other),
            })?;
        Ok(WriteAck {
            instance_id: id,
            revision: record.revision,
        })
    }

    pub fn post_verdict(&self, id: InstanceId, annotator: &str, answers: Answers) -> Result<WriteAck, ApiError> {
        self.write(id, annotator, Payload::Verdict(answers))
    }

    pub fn post_mask(&self, id: InstanceId, annotator: &str, rle: Vec<u32>) -> Result<WriteAck, ApiError> {
        let (_, d) = self.instance(id)?;
        let mask = BinaryMask::from_rle(&rle, MaskProvenance::Human).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let dims = (d.image.height(), d.image.width());
        if mask.dims() != dims {
            return Err(ApiError::bad_request(format!(
                "mask is {}x{}, instance {id} is {}x{}",
                mask.width(),
                mask.height(),
                dims.1,
                dims.0
            )));
        }
        self.write(id, annotator, Payload::Mask(rle))
    }

    pub fn post_likert(&self, id: InstanceId, annotator: &str, rating: u8) -> Result<WriteAck, ApiError> {
        if !(1..=5).contains(&rating) {
            return Err(ApiError::bad_request(format!("rating {rating} outside 1..=5")));
        }
        self.write(id, annotator, Payload::Likert(rating))
    }

    /// The matrix over every instance with at least one verdict, from the
    /// majority of each annotator's latest verdict and the active model's
    /// prediction.
    pub fn get_matrix(&self) -> Result<MatrixView, ApiError> {
        let model = self.active();
        let predictions = model.predictions(&self.instances);
        let state = self.store_state();
        let mut records = Vec::new();
        let mut ious = Vec::new();
        for (id, verdict) in state.verdicts() {
            let Some(&i) = self.index.get(&id) else { continue };
            let d = &self.instances[i];
            let p = &predictions[i];
            records.push(ReasonabilityRecord {
                instance_id: id,
                prediction_correct: p.class == d.label,
                verdict,
            });
            if let Some(rle) = state.mask(id) {
                let mask = BinaryMask::from_rle(rle, MaskProvenance::Human).map_err(ApiError::internal)?;
                let trace = forward(&model.params, &d.image).map_err(ApiError::internal)?;
                let map = attention_map(&model.params, &trace, p.class).map_err(ApiError::internal)?;
                let focus = binarized_attention(&map, d.image.height(), d.image.width(), self.options.oracle.binarize_tau)
                    .map_err(ApiError::internal)?;
                ious.push(iou(&focus, &mask).map_err(ApiError::internal)?);
            }
        }
        let matrix = build_matrix(&records).map_err(ApiError::internal)?;
        let [ra, ua, ria, uia] = matrix.counts();
        let annotated = matrix.total();
        Ok(MatrixView {
            metrics: if annotated == 0 {
                None
            } else {
                Some(MetricsReport::from_matrix(&matrix, &ious).map_err(ApiError::internal)?)
            },
            matrix,
            counts: QuadrantCounts { ra, ua, ria, uia },
            annotated,
            total_instances: self.instances.len(),
            partial: annotated < self.instances.len(),
            model_version: model.version,
        })
    }

    /// Verdicts (majority per instance) and newest masks, as the trainer's
    /// stored-annotation source.
    pub fn stored_annotations(&self) -> Result<StoredAnnotations, ApiError> {
        let state = self.store_state();
        let mut masks = BTreeMap::new();
        for &id in state.instances.keys() {
            if let Some(rle) = state.mask(id) {
                masks.insert(id, BinaryMask::from_rle(rle, MaskProvenance::Human).map_err(ApiError::internal)?);
            }
        }
        Ok(StoredAnnotations {
            verdicts: state.verdicts(),
            masks,
        })
    }

    /// Swaps in a finished fine-tuning job's parameters in one step.
    pub fn activate(&self, job_id: u64) -> Result<u64, ApiError> {
        let params = self.jobs.output(job_id)?;
        if let Some(dir) = &self.options.state_dir {
            write_params(&dir.join(ACTIVE_PARAMS), &params).map_err(ApiError::internal)?;
        }
        let mut slot = self.model.write().expect("model lock");
        let version = slot.version + 1;
        *slot = Arc::new(ActiveModel::new((*params).clone(), version));
        Ok(version)
    }

    pub fn state_dir(&self) -> Option<&Path> {
        self.options.state_dir.as_deref()
    }
}
