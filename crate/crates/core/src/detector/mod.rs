//! Toy Faster R-CNN: a four-layer backbone, an anchor-based RPN, ROI pooling
//! and a per-class ROI head.

mod inference;
mod loss;
mod network;
mod params;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::geometry::{AnchorConfig, GeometryError, Rect};

pub use inference::{detect, pooled_features, propose, proposals_from_outputs};
pub use loss::{compute_detection_loss, rpn_loss, sample_anchors, sample_rois, DetectionLoss, RoiTargets};
pub use network::{backbone, roi_head, rpn_head, ImageForward, RoiOutput};
pub use params::{init_params, Bound, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("detection loss requested for a target-domain sample; target labels never enter training")]
    TargetSupervision,
    #[error("sample has no annotations")]
    MissingAnnotations,
    #[error("unknown parameter {0:?}")]
    MissingParam(String),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("image must be [3,H,W] with H,W >= {min}, got {shape:?}")]
    BadImage { shape: Vec<usize>, min: usize },
}

/// Architecture and sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Object classes `K`; the heads predict `K + 1` with background at 0.
    pub num_classes: usize,
    pub anchors: AnchorConfig<f32>,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,
    pub roi_batch: usize,
    pub roi_fg_iou: f32,
    pub roi_fg_fraction: f32,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub rpn_nms_iou: f32,
    pub min_proposal_size: f32,
    pub pool_size: usize,
    pub det_nms_iou: f32,
    pub score_floor: f32,
    pub max_detections: usize,
    /// Divisors applied to ROI-head regression targets.
    pub bbox_stds: [f32; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            anchors: AnchorConfig::default(),
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_pos_fraction: 0.5,
            roi_batch: 16,
            roi_fg_iou: 0.5,
            roi_fg_fraction: 0.25,
            pre_nms_top_n: 200,
            post_nms_top_n: 64,
            rpn_nms_iou: 0.7,
            min_proposal_size: 1.0,
            pool_size: 4,
            det_nms_iou: 0.3,
            score_floor: 0.05,
            max_detections: 100,
            bbox_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.into()));
        self.anchors.validate()?;
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(0.0..=1.0).contains(&self.rpn_neg_iou) || self.rpn_neg_iou > self.rpn_pos_iou || self.rpn_pos_iou > 1.0 {
            return bad("need 0 <= rpn_neg_iou <= rpn_pos_iou <= 1");
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 || self.post_nms_top_n == 0 || self.pre_nms_top_n == 0 {
            return bad("batch and proposal counts must be positive");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if self.bbox_stds.iter().any(|&s| s <= 0.0) {
            return bad("bbox_stds must be positive");
        }
        Ok(())
    }

    /// Feature-map extent for an image side of `n` pixels (two 2×2 pools).
    pub fn feature_extent(n: usize) -> usize {
        n / 4
    }
}

/// Channels of the backbone feature map.
pub const FEATURE_CHANNELS: usize = 64;
/// Width of the ROI feature vectors fed to the classifier and the instance domain head.
pub const ROI_FEATURES: usize = 128;
/// Smallest image side the backbone accepts (feature map at least 1×1).
pub const MIN_IMAGE_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: Rect<f32>,
    pub objectness: f32,
    pub image_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect<f32>,
    /// Class in `1..=K`.
    pub category: usize,
    pub score: f32,
}
