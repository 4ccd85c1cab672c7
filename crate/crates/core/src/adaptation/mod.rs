//! Adversarial domain alignment: image- and instance-level domain classifiers
//! behind gradient reversal, the consistency regularizer, the combined
//! objective and an H-divergence probe.

mod divergence;
mod heads;
mod losses;

use serde::{Deserialize, Serialize};

pub use crate::synthdata::DomainLabel;
pub use divergence::{estimate_h_divergence, h_divergence_from_errors, HDivergenceEstimate, LogisticProbe};
pub use heads::{image_domain_head, instance_domain_head};
pub use losses::{consistency_loss, image_domain_loss, instance_domain_loss, InstanceLoss};

#[derive(Debug, thiserror::Error)]
pub enum AdaptationError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("{0}")]
    Input(String),
}

/// How the adaptation losses reduce over their terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of terms, so λ keeps its meaning across map sizes.
    #[default]
    Mean,
    /// Plain sums over activations and ROIs.
    Sum,
}

/// Which adaptation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AblationMask {
    pub use_img: bool,
    pub use_ins: bool,
    pub use_cst: bool,
}

impl AblationMask {
    pub const BASELINE: Self = Self { use_img: false, use_ins: false, use_cst: false };
    pub const IMG: Self = Self { use_img: true, use_ins: false, use_cst: false };
    pub const INS: Self = Self { use_img: false, use_ins: true, use_cst: false };
    pub const IMG_INS: Self = Self { use_img: true, use_ins: true, use_cst: false };
    pub const FULL: Self = Self { use_img: true, use_ins: true, use_cst: true };

    /// The five rows of an ablation table, in order.
    pub const TABLE: [Self; 5] = [Self::BASELINE, Self::IMG, Self::INS, Self::IMG_INS, Self::FULL];

    pub fn any(&self) -> bool {
        self.use_img || self.use_ins || self.use_cst
    }

    /// The consistency term compares both heads, so it needs both.
    pub fn validate(&self) -> Result<(), AdaptationError> {
        if self.use_cst && !(self.use_img && self.use_ins) {
            return Err(AdaptationError::Input("the consistency term requires both img and ins".into()));
        }
        Ok(())
    }

    /// Parses a comma list such as `img,ins,cst`; empty means baseline.
    pub fn parse(s: &str) -> Result<Self, AdaptationError> {
        let mut m = Self::BASELINE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "img" => m.use_img = true,
                "ins" => m.use_ins = true,
                "cst" | "cons" => m.use_cst = true,
                other => return Err(AdaptationError::Input(format!("unknown ablation term {other:?} (expected img, ins, cst)"))),
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Short row name: `baseline`, `img`, `ins`, `img+ins`, `img+ins+cst`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.use_img, "img"), (self.use_ins, "ins"), (self.use_cst, "cst")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn to_flag(&self) -> String {
        if self.any() {
            self.label().replace('+', ",")
        } else {
            String::new()
        }
    }
}

/// The five loss terms and the weighted total `L_det + λ(L_img + L_ins + L_cst)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_rpn: f32,
    pub l_roi: f32,
    pub l_img: f32,
    pub l_ins: f32,
    pub l_cst: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// Recomputes the total from the parts in f64.
    pub fn recomputed_total(&self, lambda: f32) -> f64 {
        self.l_rpn as f64 + self.l_roi as f64 + lambda as f64 * (self.l_img as f64 + self.l_ins as f64 + self.l_cst as f64)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rpn, self.l_roi, self.l_img, self.l_ins, self.l_cst, self.total].iter().all(|v| v.is_finite())
    }
}

/// Combines loss values. `det` is `(L_rpn, L_roi)` from source images, absent
/// when only target images contributed; masked-out terms are recorded as 0.
pub fn total_loss(det: Option<(f32, f32)>, l_img: f32, l_ins: f32, l_cst: f32, lambda: f32, mask: AblationMask) -> LossBreakdown {
    let (l_rpn, l_roi) = det.unwrap_or((0.0, 0.0));
    let l_img = if mask.use_img { l_img } else { 0.0 };
    let l_ins = if mask.use_ins { l_ins } else { 0.0 };
    let l_cst = if mask.use_cst { l_cst } else { 0.0 };
    let mut b = LossBreakdown { l_rpn, l_roi, l_img, l_ins, l_cst, total: 0.0 };
    b.total = b.recomputed_total(lambda) as f32;
    b
}
