use serde::{Deserialize, Serialize};

use crate::adaptation::{AblationMask, Reduction};
use crate::training::TrainError;

/// Optimization settings. `Default` is the short toy schedule; [`TrainConfig::published`]
/// is the full-length published protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight λ on the adaptation terms.
    pub lambda: f32,
    pub lr_initial: f32,
    pub lr_reduced: f32,
    pub lr_drop_iter: usize,
    pub total_iters: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub ablation: AblationMask,
    pub seed: u64,
    /// Iterations between evaluation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f32,
    pub reduction: Reduction,
    /// Treat the image-level mean as a constant inside the consistency term.
    pub stop_image_side: bool,
    /// Post-NMS target proposals fed to the instance domain head.
    pub target_rois: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr_initial: 0.01,
            lr_reduced: 0.001,
            lr_drop_iter: 1500,
            total_iters: 2000,
            momentum: 0.9,
            weight_decay: 0.0005,
            ablation: AblationMask::FULL,
            seed: 0,
            eval_every: 0,
            grad_clip: 10.0,
            reduction: Reduction::Mean,
            stop_image_side: false,
            target_rois: 16,
        }
    }
}

impl TrainConfig {
    /// 0.001 for 50k iterations, then 0.0001 for 20k more; momentum 0.9,
    /// weight decay 0.0005, λ = 0.1.
    pub fn published() -> Self {
        Self { lr_initial: 0.001, lr_reduced: 0.0001, lr_drop_iter: 50_000, total_iters: 70_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        self.ablation.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.lr_drop_iter > self.total_iters {
            return bad("lr_drop_iter must not exceed total_iters");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.lr_initial > 0.0 && self.lr_reduced > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.target_rois == 0 {
            return bad("target_rois must be positive");
        }
        Ok(())
    }
}

/// Learning rate at `iter`: `lr_initial` before `lr_drop_iter`, `lr_reduced` from it on.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f32, TrainError> {
    if iter >= cfg.total_iters {
        return Err(TrainError::Config(format!("iteration {iter} outside schedule of {} iterations", cfg.total_iters)));
    }
    Ok(if iter < cfg.lr_drop_iter { cfg.lr_initial } else { cfg.lr_reduced })
}
