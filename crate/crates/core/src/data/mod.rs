//! Exam ingestion and preprocessing.
//!
//! Per-image order of operations: select one image per view, standardize
//! orientation, downscale, crop, normalize. Input noise is a model concern
//! and is added by the network in training mode.

pub mod manifest;
pub mod pgm;
pub mod preprocess;
pub mod source;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use manifest::{
    load_manifest, read_manifest, write_dataset, write_exam_images, write_manifest, ManifestEntry, ManifestImage,
    MANIFEST_FILE,
};
pub use preprocess::{
    crop_offset, downscale, extract_crop, normalize_image, sample_crop, select_image_per_view, standardize_orientation, CropOffset,
    CropRule, Preprocessor,
};
pub use source::{ExamSet, ExamSource, InMemorySource, ManifestSource, SyntheticSource};
pub use split::{split_by_patient, PatientSplit, SplitSpec};
pub use synth::{generate_synthetic_exam, ClassMix, SynthConfig};

/// Crop height at full resolution.
pub const CROP_HEIGHT: usize = 2600;
/// Crop width at full resolution.
pub const CROP_WIDTH: usize = 2000;
/// Maximum crop translation at full resolution.
pub const JITTER_CAP: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unreadable image: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("exam {exam_id}: missing view {view}")]
    MissingView { exam_id: String, view: View },
    #[error("exam {exam_id}: label {label} is outside {{0,1,2}}")]
    InvalidLabel { exam_id: String, label: i64 },
    #[error("image {height}x{width} is smaller than the {crop_height}x{crop_width} crop")]
    ImageTooSmall { height: usize, width: usize, crop_height: usize, crop_width: usize },
    #[error("invalid downscale: {0}")]
    InvalidScale(String),
    #[error("split needs at least 10 patients, got {0}")]
    TooFewPatients(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The four standard screening views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "L-CC")]
    LeftCc,
    #[serde(rename = "R-CC")]
    RightCc,
    #[serde(rename = "L-MLO")]
    LeftMlo,
    #[serde(rename = "R-MLO")]
    RightMlo,
}

impl View {
    /// Network input order; also the concatenation order of the view embeddings.
    pub const ALL: [View; 4] = [View::LeftCc, View::RightCc, View::LeftMlo, View::RightMlo];

    pub fn name(self) -> &'static str {
        match self {
            View::LeftCc => "L-CC",
            View::RightCc => "R-CC",
            View::LeftMlo => "L-MLO",
            View::RightMlo => "R-MLO",
        }
    }

    pub fn is_right(self) -> bool {
        matches!(self, View::RightCc | View::RightMlo)
    }

    pub fn is_cc(self) -> bool {
        matches!(self, View::LeftCc | View::RightCc)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        View::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown view {s:?}"))
    }
}

/// Input resolution relative to the full-resolution crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::Full, Scale::Half, Scale::Quarter, Scale::Eighth];

    pub fn denominator(self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Half => 2,
            Scale::Quarter => 4,
            Scale::Eighth => 8,
        }
    }

    pub fn factor(self) -> f64 {
        1.0 / self.denominator() as f64
    }

    pub fn from_denominator(d: usize) -> Option<Self> {
        Scale::ALL.into_iter().find(|s| s.denominator() == d)
    }

    /// Rounds a full-resolution pixel count to this scale.
    pub fn apply(self, pixels: usize) -> usize {
        (pixels as f64 * self.factor()).round() as usize
    }

    /// Crop extent `(height, width)` at this scale: 2600x2000 at full resolution.
    pub fn crop_extent(self) -> (usize, usize) {
        (self.apply(CROP_HEIGHT), self.apply(CROP_WIDTH))
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Full => f.write_str("1"),
            other => write!(f, "1/{}", other.denominator()),
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches(['x', '×']);
        let denom = if let Some(d) = t.strip_prefix("1/") {
            d.parse::<usize>().ok()
        } else if let Ok(v) = t.parse::<f64>() {
            (v > 0.0).then(|| (1.0 / v).round() as usize).filter(|d| (1.0 / *d as f64 - v).abs() < 1e-9)
        } else {
            None
        };
        denom
            .and_then(Scale::from_denominator)
            .ok_or_else(|| format!("scale must be one of 1, 1/2, 1/4, 1/8; got {s:?}"))
    }
}

/// Data-side mode: decides crop jitter and per-view image selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataMode {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub view: View,
    pub timestamp: NaiveDateTime,
    /// Grayscale `[H, W]` pixels.
    pub pixels: Arc<Tensor<f32>>,
    /// File the pixels were read from, when they came from disk.
    pub path: Option<PathBuf>,
}

/// Exam metadata, available without touching pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamInfo {
    pub exam_id: String,
    pub patient_id: String,
    pub exam_date: NaiveDate,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Exam {
    pub info: ExamInfo,
    pub views: BTreeMap<View, Vec<ImageRecord>>,
}

impl Exam {
    pub fn new(info: ExamInfo, views: BTreeMap<View, Vec<ImageRecord>>) -> Result<Self, DataError> {
        if info.label > 2 {
            return Err(DataError::InvalidLabel { exam_id: info.exam_id, label: info.label as i64 });
        }
        for v in View::ALL {
            if views.get(&v).is_none_or(|l| l.is_empty()) {
                return Err(DataError::MissingView { exam_id: info.exam_id, view: v });
            }
        }
        Ok(Self { info, views })
    }

    pub fn label(&self) -> usize {
        self.info.label
    }
}
