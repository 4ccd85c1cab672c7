use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationError;
use crate::scalar::Scalar;

/// Held-out domain-classification errors and the divergence they imply.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HDivergenceEstimate {
    pub err_source: f64,
    pub err_target: f64,
    pub d_h: f64,
}

/// `2(1 − (err_S + err_T))`, clamped to `[0, 2]`.
pub fn h_divergence_from_errors(err_source: f64, err_target: f64) -> HDivergenceEstimate {
    let d_h = (2.0 * (1.0 - (err_source + err_target))).clamp(0.0, 2.0);
    HDivergenceEstimate { err_source, err_target, d_h }
}

/// Standardized logistic regression, fit by full-batch gradient descent.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-3;

impl LogisticProbe {
    /// Fits `P(label = 1 | x)` with labels 1 for `positives`, 0 for `negatives`.
    pub fn fit(negatives: &[Vec<f64>], positives: &[Vec<f64>]) -> Self {
        let dim = negatives.first().or(positives.first()).map_or(0, Vec::len);
        let all: Vec<&Vec<f64>> = negatives.iter().chain(positives).collect();
        let n = all.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in &all {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for x in &all {
            for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = Self { mean, scale, weights: vec![0.0; dim], bias: 0.0 };
        let data: Vec<(Vec<f64>, f64)> = negatives
            .iter()
            .map(|x| (probe.standardize(x), 0.0))
            .chain(positives.iter().map(|x| (probe.standardize(x), 1.0)))
            .collect();
        for _ in 0..PROBE_STEPS {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (z, y) in &data {
                let p = sigmoid(probe.bias + dot(&probe.weights, z));
                let e = (p - y) / n;
                gb += e;
                for (g, v) in gw.iter_mut().zip(z) {
                    *g += e * v;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= PROBE_LR * (g + PROBE_L2 * *w);
            }
            probe.bias -= PROBE_LR * gb;
        }
        probe
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + dot(&self.weights, &self.standardize(x)))
    }

    pub fn predicts_positive(&self, x: &[f64]) -> bool {
        self.probability(x) >= 0.5
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Proxy H-divergence between two feature sets.
///
/// Each set is split in half, alternating by index: even positions train a
/// logistic domain classifier, odd positions measure its 0/1 errors at
/// threshold 0.5. `err_S` counts source vectors called target and `err_T`
/// the reverse.
pub fn estimate_h_divergence<T: Scalar>(source: &[Vec<T>], target: &[Vec<T>]) -> Result<HDivergenceEstimate, AdaptationError> {
    if source.len() < 10 || target.len() < 10 {
        return Err(AdaptationError::Input(format!("need at least 10 vectors per domain, got {} and {}", source.len(), target.len())));
    }
    let dim = source[0].len();
    if dim == 0 || source.iter().chain(target).any(|v| v.len() != dim) {
        return Err(AdaptationError::Input("feature vectors must share one positive dimension".into()));
    }
    let widen = |v: &Vec<T>| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let split = |set: &[Vec<T>]| {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, v) in set.iter().enumerate() {
            if i % 2 == 0 { train.push(widen(v)) } else { held.push(widen(v)) }
        }
        (train, held)
    };
    let (s_train, s_held) = split(source);
    let (t_train, t_held) = split(target);
    let probe = LogisticProbe::fit(&s_train, &t_train);
    let err_source = s_held.iter().filter(|x| probe.predicts_positive(x)).count() as f64 / s_held.len() as f64;
    let err_target = t_held.iter().filter(|x| !probe.predicts_positive(x)).count() as f64 / t_held.len() as f64;
    Ok(h_divergence_from_errors(err_source, err_target))
}
