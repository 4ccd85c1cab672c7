//! ShapeWorld: deterministic synthetic detection scenes with controllable
//! domain shifts (style, fog, scale).

mod io;
mod render;
mod rng;
mod sample;
mod shift;

use serde::{Deserialize, Serialize};

pub use io::{
    dataset_digest, manifest_path, read_dataset, read_manifest, write_dataset, Manifest, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use render::{render_scene, render_unshifted};
pub use rng::SplitMix64;
pub use sample::{Annotations, DomainLabel, Sample};
pub use shift::{apply_fog, apply_scale, apply_style_shift, resize_bilinear, FOG_AIRLIGHT, FOG_DENSITY, REMIX};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("index {index} out of range for {len} images")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    #[default]
    None,
    Style,
    Fog,
    Scale,
}

impl std::str::FromStr for ShiftKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "style" => Ok(Self::Style),
            "fog" => Ok(Self::Fog),
            "scale" => Ok(Self::Scale),
            other => Err(format!("unknown shift kind {other:?} (expected none, style, fog or scale)")),
        }
    }
}

/// A domain shift. For `Scale`, the applied factor is
/// `intensity·scale_factor + (1 − intensity)`, so intensity 0 leaves images untouched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub intensity: f32,
    pub scale_factor: f32,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { kind: ShiftKind::None, intensity: 0.0, scale_factor: 1.0 }
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn style(intensity: f32) -> Self {
        Self { kind: ShiftKind::Style, intensity, scale_factor: 1.0 }
    }

    pub fn fog(intensity: f32) -> Self {
        Self { kind: ShiftKind::Fog, intensity, scale_factor: 1.0 }
    }

    pub fn scale(scale_factor: f32) -> Self {
        Self { kind: ShiftKind::Scale, intensity: 1.0, scale_factor }
    }

    pub fn effective_scale(&self) -> f32 {
        if self.kind == ShiftKind::Scale {
            // Exact at both ends: intensity 1 gives scale_factor bit for bit.
            self.intensity * self.scale_factor + (1.0 - self.intensity)
        } else {
            1.0
        }
    }
}

/// Shape classes, 1-based as in detections (0 is background).
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size_range: (f32, f32),
    pub shift: ShiftSpec,
    pub seed: u64,
    pub domain: DomainLabel,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_images: 100,
            num_classes: 3,
            objects_per_image: (1, 4),
            object_size_range: (12.0, 28.0),
            shift: ShiftSpec::none(),
            seed: 0,
            domain: DomainLabel::Source,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(1..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return bad("num_classes must be between 1 and 3");
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad("objects_per_image must be a non-empty range starting at 1 or more");
        }
        let (smin, smax) = self.object_size_range;
        if !(smin >= 2.0 && smin <= smax && smax <= self.image_size as f32) {
            return bad("object_size_range must satisfy 2 <= min <= max <= image_size");
        }
        let s = &self.shift;
        if !(0.0..=1.0).contains(&s.intensity) {
            return bad("shift intensity must lie in [0, 1]");
        }
        if s.kind == ShiftKind::Scale && !(s.scale_factor > 0.0 && s.scale_factor <= 4.0) {
            return bad("scale_factor must lie in (0, 4]");
        }
        if s.kind == ShiftKind::Scale && (self.image_size as f32 * s.effective_scale()).ceil() < 8.0 {
            return bad("scaled images would be smaller than 8 pixels");
        }
        Ok(())
    }

    /// Side length of rendered images after any scale shift.
    pub fn output_size(&self) -> usize {
        let f = self.shift.effective_scale();
        if f == 1.0 {
            self.image_size
        } else {
            (self.image_size as f32 * f).ceil() as usize
        }
    }
}

/// An in-memory dataset with the `DatasetSpec` that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn digest(&self) -> u64 {
        dataset_digest(&self.samples)
    }

    /// Total reads of target-domain labels across all samples.
    pub fn target_label_reads(&self) -> usize {
        self.samples.iter().map(Sample::label_reads).sum()
    }
}

/// Renders every sample of `spec`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let samples = (0..spec.num_images).map(|i| render_scene(spec, i)).collect::<Result<_, _>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}
