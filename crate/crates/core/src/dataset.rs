use core::fmt;

use serde::{Deserialize, Serialize};

use crate::grid::Image;

/// Stable identifier of one image in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labelled image the trainer can consume.
pub trait Example {
    fn id(&self) -> InstanceId;
    fn image(&self) -> &Image;
    fn label(&self) -> usize;
}

/// A labelled image with no ground-truth masks, e.g. loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledImage {
    pub id: InstanceId,
    pub image: Image,
    pub label: usize,
    pub split: Split,
}

impl Example for LabelledImage {
    fn id(&self) -> InstanceId {
        self.id
    }

    fn image(&self) -> &Image {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}
