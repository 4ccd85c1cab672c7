//! Domain-adaptive Faster R-CNN at desk scale.
//!
//! A small two-stage detector trained on synthetic "ShapeWorld" scenes with
//! adversarial image- and instance-level domain classifiers, a consistency
//! regularizer between them, and the evaluation tooling to measure what each
//! piece contributes under style, fog and scale shift.
//!
//! The numeric core (`autodiff`, `geometry`, the adaptation losses and the
//! metrics) is generic over [`scalar::Scalar`]; the aliases below fix it to
//! f32, the precision of the detector, datasets and checkpoints.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autodiff;
pub mod detector;
pub mod evaluation;
pub mod geometry;
pub mod scalar;
pub mod synthdata;
pub mod training;

pub type Tensor = autodiff::Tensor<f32>;
pub type Tape = autodiff::Tape<f32>;
pub type BBox = geometry::Rect<f32>;
