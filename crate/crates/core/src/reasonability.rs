//! Verdicts, quadrants, the reasonability matrix and the metrics derived
//! from it.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::BinaryMask;
use crate::dataset::InstanceId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

/// Answers to the two reasonability questions for one attention map.
///
/// `q1_sufficient`: the focus area contains the details needed to classify.
/// `q2_contextual`: the focus area contains unrelated contextual details.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub q1_sufficient: Answer,
    pub q2_contextual: Answer,
    #[serde(default)]
    pub annotator_id: String,
    /// Seconds since the Unix epoch, or 0 when not recorded.
    #[serde(default)]
    pub timestamp: u64,
}

impl Verdict {
    pub fn new(q1_sufficient: Answer, q2_contextual: Answer) -> Self {
        Self {
            q1_sufficient,
            q2_contextual,
            annotator_id: String::new(),
            timestamp: 0,
        }
    }

    /// Reasonable iff the attention is sufficient and free of context.
    pub fn is_reasonable(&self) -> bool {
        self.q1_sufficient == Answer::Yes && self.q2_contextual == Answer::No
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    RA,
    UA,
    RIA,
    UIA,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::RA, Quadrant::UA, Quadrant::RIA, Quadrant::UIA];

    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::RA => "RA",
            Quadrant::UA => "UA",
            Quadrant::RIA => "RIA",
            Quadrant::UIA => "UIA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.as_str().eq_ignore_ascii_case(s))
    }

    /// Whether instances in this quadrant get their attention adjusted.
    pub fn needs_adjustment(self) -> bool {
        self != Quadrant::RA
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_instance(prediction_correct: bool, verdict: &Verdict) -> Quadrant {
    match (prediction_correct, verdict.is_reasonable()) {
        (true, true) => Quadrant::RA,
        (true, false) => Quadrant::UA,
        (false, true) => Quadrant::RIA,
        (false, false) => Quadrant::UIA,
    }
}

/// Partition of instances by (accurate?, reasonable?). Rows are
/// accurate/inaccurate and columns reasonable/unreasonable, so the 2×2
/// layout reads `[[RA, UA], [RIA, UIA]]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonabilityMatrix {
    pub ra: Vec<InstanceId>,
    pub ua: Vec<InstanceId>,
    pub ria: Vec<InstanceId>,
    pub uia: Vec<InstanceId>,
}

impl ReasonabilityMatrix {
    pub fn ids(&self, quadrant: Quadrant) -> &[InstanceId] {
        match quadrant {
            Quadrant::RA => &self.ra,
            Quadrant::UA => &self.ua,
            Quadrant::RIA => &self.ria,
            Quadrant::UIA => &self.uia,
        }
    }

    fn ids_mut(&mut self, quadrant: Quadrant) -> &mut Vec<InstanceId> {
        match quadrant {
            Quadrant::RA => &mut self.ra,
            Quadrant::UA => &mut self.ua,
            Quadrant::RIA => &mut self.ria,
            Quadrant::UIA => &mut self.uia,
        }
    }

    pub fn count(&self, quadrant: Quadrant) -> usize {
        self.ids(quadrant).len()
    }

    /// Counts in `RA, UA, RIA, UIA` order.
    pub fn counts(&self) -> [usize; 4] {
        Quadrant::ALL.map(|q| self.count(q))
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn quadrant_of(&self, id: InstanceId) -> Option<Quadrant> {
        Quadrant::ALL
            .into_iter()
            .find(|&q| self.ids(q).binary_search(&id).is_ok())
    }

    /// A matrix with the given counts and synthetic ids `0..total`, for
    /// reproducing reference count tables.
    pub fn from_counts(ra: usize, ua: usize, ria: usize, uia: usize) -> Self {
        let mut next = 0u32;
        let mut take = |n: usize| -> Vec<InstanceId> {
            let ids = (next..next + n as u32).map(InstanceId).collect();
            next += n as u32;
            ids
        };
        Self {
            ra: take(ra),
            ua: take(ua),
            ria: take(ria),
            uia: take(uia),
        }
    }
}

/// One row fed into [`build_matrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasonabilityRecord {
    pub instance_id: InstanceId,
    pub prediction_correct: bool,
    pub verdict: Verdict,
}

pub fn build_matrix(records: &[ReasonabilityRecord]) -> Result<ReasonabilityMatrix> {
    let mut seen = BTreeSet::new();
    let mut matrix = ReasonabilityMatrix::default();
    for r in records {
        if !seen.insert(r.instance_id) {
            return Err(Error::Data(format!("duplicate instance id {}", r.instance_id)));
        }
        let q = classify_instance(r.prediction_correct, &r.verdict);
        matrix.ids_mut(q).push(r.instance_id);
    }
    for q in Quadrant::ALL {
        matrix.ids_mut(q).sort_unstable();
    }
    Ok(matrix)
}

fn checked_total(matrix: &ReasonabilityMatrix) -> Result<f64> {
    match matrix.total() {
        0 => Err(Error::UndefinedMetric("matrix is empty".into())),
        n => Ok(n as f64),
    }
}

/// Prediction accuracy, `(RA + UA) / total`.
pub fn m1_accuracy(matrix: &ReasonabilityMatrix) -> Result<f64> {
    let total = checked_total(matrix)?;
    Ok((matrix.count(Quadrant::RA) + matrix.count(Quadrant::UA)) as f64 / total)
}

/// Reasonable-accurate performance, `RA / total`.
pub fn m2_ra_performance(matrix: &ReasonabilityMatrix) -> Result<f64> {
    let total = checked_total(matrix)?;
    Ok(matrix.count(Quadrant::RA) as f64 / total)
}

/// Attention accuracy, `(RA + RIA) / total`.
pub fn m4_attention_accuracy(matrix: &ReasonabilityMatrix) -> Result<f64> {
    let total = checked_total(matrix)?;
    Ok((matrix.count(Quadrant::RA) + matrix.count(Quadrant::RIA)) as f64 / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m1_accuracy: f64,
    pub m2_ra_performance: f64,
    pub m3_mean_iou: f64,
    pub m3_std_iou: f64,
    pub m4_attention_accuracy: f64,
}

impl MetricsReport {
    /// M1, M2 and M4 from the matrix; M3 from per-instance IoU values.
    pub fn from_matrix(matrix: &ReasonabilityMatrix, ious: &[f64]) -> Result<Self> {
        let (m3_mean_iou, m3_std_iou) = mean_std(ious);
        Ok(Self {
            m1_accuracy: m1_accuracy(matrix)?,
            m2_ra_performance: m2_ra_performance(matrix)?,
            m3_mean_iou,
            m3_std_iou,
            m4_attention_accuracy: m4_attention_accuracy(matrix)?,
        })
    }
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Intersection over union; two empty masks agree perfectly (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Per-question majority. Ties lean unreasonable: Q1 → no, Q2 → yes.
pub fn majority_vote(verdicts: &[Verdict]) -> Result<Verdict> {
    if verdicts.is_empty() {
        return Err(Error::Input("no verdicts to vote on".into()));
    }
    let n = verdicts.len();
    let q1_yes = verdicts.iter().filter(|v| v.q1_sufficient.is_yes()).count();
    let q2_yes = verdicts.iter().filter(|v| v.q2_contextual.is_yes()).count();
    let q1 = Answer::from_bool(2 * q1_yes > n);
    let q2 = Answer::from_bool(2 * q2_yes >= n);
    Ok(Verdict {
        q1_sufficient: q1,
        q2_contextual: q2,
        annotator_id: String::from("majority"),
        timestamp: verdicts.iter().map(|v| v.timestamp).max().unwrap_or(0),
    })
}
