use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::Rect;
use crate::synthdata::DataError;

/// `D_i`: 0 for source, 1 for target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    #[default]
    Source,
    Target,
}

impl DomainLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            Self::Source => 0,
            Self::Target => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Source),
            1 => Some(Self::Target),
            _ => None,
        }
    }

    /// The label as a float target for a domain classifier.
    pub fn value(self) -> f32 {
        self.as_u8() as f32
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Annotations {
    pub boxes: Vec<Rect<f32>>,
    /// Class per box, in `1..=K`.
    pub labels: Vec<usize>,
}

/// One image with its annotations and domain.
///
/// Annotation reads on target-domain samples are counted, including reads of
/// stripped copies (which share the counter), so tests can prove the training
/// path never looks at target labels.
#[derive(Debug)]
pub struct Sample {
    image: Tensor<f32>,
    annotations: Option<Annotations>,
    domain: DomainLabel,
    label_reads: Arc<AtomicUsize>,
}

impl Clone for Sample {
    fn clone(&self) -> Self {
        Self {
            image: self.image.clone(),
            annotations: self.annotations.clone(),
            domain: self.domain,
            label_reads: Arc::new(AtomicUsize::new(0)),
        }
    }
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.image == other.image && self.annotations == other.annotations && self.domain == other.domain
    }
}

impl Sample {
    /// `image` is `[3,H,W]` with values in `[0,1]`.
    pub fn new(image: Tensor<f32>, boxes: Vec<Rect<f32>>, labels: Vec<usize>, domain: DomainLabel) -> Result<Self, DataError> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(DataError::InvalidSample(format!("image must be [3,H,W], got {:?}", image.shape())));
        }
        if boxes.len() != labels.len() {
            return Err(DataError::InvalidSample(format!("{} boxes but {} labels", boxes.len(), labels.len())));
        }
        if labels.contains(&0) {
            return Err(DataError::InvalidSample("labels are 1-based; 0 is background".into()));
        }
        if boxes.iter().any(|b| !b.is_valid()) {
            return Err(DataError::InvalidSample("box with x1 > x2 or y1 > y2".into()));
        }
        Ok(Self {
            image,
            annotations: Some(Annotations { boxes, labels }),
            domain,
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn image(&self) -> &Tensor<f32> {
        &self.image
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn domain(&self) -> DomainLabel {
        self.domain
    }

    pub fn is_stripped(&self) -> bool {
        self.annotations.is_none()
    }

    /// Ground truth, or `None` once stripped.
    pub fn annotations(&self) -> Option<&Annotations> {
        if self.domain == DomainLabel::Target {
            self.label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.annotations.as_ref()
    }

    /// Copy without annotations that shares this sample's read counter.
    pub fn stripped(&self) -> Self {
        Self {
            image: self.image.clone(),
            annotations: None,
            domain: self.domain,
            label_reads: Arc::clone(&self.label_reads),
        }
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn with_domain(mut self, domain: DomainLabel) -> Self {
        self.domain = domain;
        self
    }

    pub(crate) fn parts(&self) -> (&Tensor<f32>, Option<&Annotations>, DomainLabel) {
        (&self.image, self.annotations.as_ref(), self.domain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(domain: DomainLabel) -> Sample {
        let img = Tensor::zeros(vec![3, 4, 4]).unwrap();
        Sample::new(img, vec![Rect::new(0.0, 0.0, 2.0, 2.0)], vec![1], domain).unwrap()
    }

    #[test]
    fn target_reads_are_counted_through_stripped_copies() {
        let s = tiny(DomainLabel::Target);
        let st = s.stripped();
        assert!(st.annotations().is_none());
        assert_eq!(s.label_reads(), 1);
        assert!(s.annotations().is_some());
        assert_eq!(s.label_reads(), 2);
    }

    #[test]
    fn source_reads_are_free() {
        let s = tiny(DomainLabel::Source);
        s.annotations();
        assert_eq!(s.label_reads(), 0);
    }

    #[test]
    fn rejects_inconsistent_annotations() {
        let img = Tensor::zeros(vec![3, 4, 4]).unwrap();
        assert!(Sample::new(img.clone(), vec![], vec![1], DomainLabel::Source).is_err());
        assert!(Sample::new(img, vec![Rect::new(0.0, 0.0, 1.0, 1.0)], vec![0], DomainLabel::Source).is_err());
    }
}
