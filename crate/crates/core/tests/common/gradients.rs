//! Random finite-difference fixtures shared by the gradient tests and the acceptance suite.
//!
//! Every fixture reduces an operation's output to a scalar with a fixed
//! projection `sum(r ⊙ (op(x) - op(x0)))` so that all output coordinates
//! contribute and the scalar stays near zero, where f32 rounding is smallest.
//! Inputs are drawn on a 1/64 grid and probed with a power-of-two step, which
//! keeps perturbations exact.
//!
//! The per-coordinate relative error has no absolute floor, so at f32 a
//! coordinate whose true gradient is near zero fails on rounding noise alone.
//! `Conditioning::F32` therefore samples away from such points (one-hot softmax
//! projections, bounded logits, inputs clear of kinks and ties).
//! `Conditioning::Free` uses unrestricted random projections and is meant for f64.

use dafrcnn::adaptation::{consistency_loss, image_domain_loss, instance_domain_loss, DomainLabel, Reduction};
use dafrcnn::autodiff::{finite_diff_check, AutodiffError, Tape, Tensor, Var};
use dafrcnn::scalar::Scalar;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1.0 / 128.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    F32,
    Free,
}

pub struct Fixtures {
    rng: ChaCha8Rng,
}

impl Fixtures {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn extent(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    /// Values on a 1/64 grid in `[-1, 1]`, bounded away from zero by `gap`.
    pub fn tensor<T: Scalar>(&mut self, shape: &[usize], gap: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.rng.random_range(-64i32..=64) as f64 / 64.0;
                if v.abs() >= gap {
                    break T::lit(v);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Distinct values spaced at least 4 steps apart so max-selection never ties
    /// within a probe.
    pub fn distinct<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let mut slots: Vec<i32> = (0..n as i32).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            slots.swap(i, j);
        }
        let data = slots.iter().map(|&s| T::lit((s - n as i32 / 2) as f64 * 4.0 * STEP)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    pub fn seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Fixed projection of an op's output, centred on its value at the base point.
#[derive(Clone)]
pub struct Projection<T> {
    weights: Tensor<T>,
    base: Option<Tensor<T>>,
}

impl<T: Scalar> Projection<T> {
    pub fn new(weights: Tensor<T>) -> Self {
        Self { weights, base: None }
    }

    /// Records the op output at the unperturbed input.
    fn centred(mut self, op: impl Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>, x: &Tensor<T>) -> Self {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = op(&mut tape, xv).unwrap();
        self.base = Some(tape.value(y).clone());
        self
    }

    pub fn apply(&self, tape: &mut Tape<T>, y: Var) -> Result<Var, AutodiffError> {
        let y = match &self.base {
            Some(b) => {
                let bv = tape.constant(b.clone());
                tape.sub(y, bv)?
            }
            None => y,
        };
        let rv = tape.constant(self.weights.clone());
        let p = tape.mul(y, rv)?;
        tape.sum(p)
    }
}

/// Checks `op` at `x` through a centred projection with weights `r`.
fn check_op<T, F>(op: F, x: &Tensor<T>, r: Tensor<T>) -> Result<f64, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError> + Clone,
{
    let proj = Projection::new(r).centred(op.clone(), x);
    finite_diff_check(
        move |tape, v| {
            let y = op(tape, v)?;
            proj.apply(tape, y)
        },
        x,
        T::lit(STEP),
    )
}

/// Runs `count` random fixtures of one primitive, returning the worst relative error.
pub fn worst_case<T: Scalar>(name: &str, count: usize, seed: u64, cond: Conditioning) -> f64 {
    let mut fx = Fixtures::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let err = one_fixture::<T>(name, &mut fx, cond);
        worst = worst.max(err);
    }
    worst
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul.a",
    "mul.b",
    "scale",
    "abs",
    "sum",
    "reshape",
    "add_bias.x",
    "add_bias.b",
    "linear.w",
    "gather_rows",
    "channels_to_rows",
    "conv2d.x",
    "conv2d.w",
    "conv2d.b",
    "matmul.a",
    "matmul.b",
    "relu",
    "sigmoid",
    "softmax",
    "mean",
    "max_pool2d",
    "smooth_l1",
    "sigmoid_cross_entropy",
    "softmax_cross_entropy",
    "roi_pool",
];

/// The adaptation losses, checked as whole functions of one domain's logits.
pub const ADAPTATION_LOSSES: &[&str] = &["image_domain_loss", "instance_domain_loss", "consistency_loss"];

fn ad(e: dafrcnn::adaptation::AdaptationError) -> AutodiffError {
    AutodiffError::InvalidShape(e.to_string())
}

/// Logits in `[-spread, spread]` on the fixture grid.
fn logits<T: Scalar>(fx: &mut Fixtures, shape: &[usize], spread: f64) -> Tensor<T> {
    let mut z = fx.tensor::<T>(shape, 0.0);
    for v in z.data_mut() {
        *v *= T::lit(spread);
    }
    z
}

fn loss_fixture<T: Scalar>(name: &str, fx: &mut Fixtures, cond: Conditioning) -> Result<f64, AutodiffError> {
    // Conditioned logits in [-1, 1] keep every |sigmoid(z) - D| above 0.26.
    let spread = if cond == Conditioning::F32 { 1.0 } else { 3.0 };
    let flip = fx.seed() & 1 == 1;
    let (d_var, d_other) = if flip { (DomainLabel::Target, DomainLabel::Source) } else { (DomainLabel::Source, DomainLabel::Target) };
    match name {
        "image_domain_loss" => {
            let (h, w) = (fx.extent(1, 4), fx.extent(1, 4));
            let x = logits::<T>(fx, &[1, 1, h, w], spread);
            let (oh, ow) = (fx.extent(1, 4), fx.extent(1, 4));
            let other = logits::<T>(fx, &[1, 1, oh, ow], spread);
            check_op(
                move |tape: &mut Tape<T>, v| {
                    let o = tape.constant(other.clone());
                    image_domain_loss(tape, &[v, o], &[d_var, d_other], Reduction::Mean).map_err(ad)
                },
                &x,
                Tensor::new(vec![1], vec![T::one()]).unwrap(),
            )
        }
        "instance_domain_loss" => {
            let (a, b) = (fx.extent(1, 6), fx.extent(1, 6));
            let x = logits::<T>(fx, &[a, 1], spread);
            let other = logits::<T>(fx, &[b, 1], spread);
            check_op(
                move |tape: &mut Tape<T>, v| {
                    let o = tape.constant(other.clone());
                    Ok(instance_domain_loss(tape, &[Some(v), Some(o)], &[d_var, d_other], Reduction::Mean).map_err(ad)?.loss)
                },
                &x,
                Tensor::new(vec![1], vec![T::one()]).unwrap(),
            )
        }
        "consistency_loss" => {
            // Instance probabilities sit at least 0.1 from the map mean so |·| never
            // flips sign within a probe.
            let (h, w) = (fx.extent(1, 4), fx.extent(1, 4));
            let map = logits::<T>(fx, &[1, 1, h, w], 1.0);
            let mean_p = map.data().iter().map(|&z| 1.0 / (1.0 + (-z.to_f64().unwrap()).exp())).sum::<f64>() / map.numel() as f64;
            let r = fx.extent(1, 5);
            let ins: Vec<T> = (0..r)
                .map(|_| {
                    let gap = 0.1 + 0.25 * fx.extent(0, 4) as f64 / 4.0;
                    let p = if fx.seed() & 1 == 0 && mean_p + gap < 0.95 || mean_p - gap <= 0.05 { mean_p + gap } else { mean_p - gap };
                    T::lit((p / (1.0 - p)).ln())
                })
                .collect();
            let ins = Tensor::new(vec![r, 1], ins).unwrap();
            let one = Tensor::new(vec![1], vec![T::one()]).unwrap();
            if flip {
                check_op(
                    move |tape: &mut Tape<T>, v| {
                        let i = tape.constant(ins.clone());
                        consistency_loss(tape, &[v], &[Some(i)], false, Reduction::Mean).map_err(ad)
                    },
                    &map,
                    one,
                )
            } else {
                check_op(
                    move |tape: &mut Tape<T>, v| {
                        let m = tape.constant(map.clone());
                        consistency_loss(tape, &[m], &[Some(v)], false, Reduction::Mean).map_err(ad)
                    },
                    &ins,
                    one,
                )
            }
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Worst relative error of one adaptation loss over `count` fixtures.
pub fn worst_loss_case<T: Scalar>(name: &str, count: usize, seed: u64, cond: Conditioning) -> f64 {
    let mut fx = Fixtures::new(seed);
    (0..count).map(|_| loss_fixture::<T>(name, &mut fx, cond).unwrap_or_else(|e| panic!("{name}: {e}"))).fold(0.0, f64::max)
}

fn one_fixture<T: Scalar>(name: &str, fx: &mut Fixtures, cond: Conditioning) -> f64 {
    let e = |fx: &mut Fixtures| fx.extent(1, 5);
    let conditioned = cond == Conditioning::F32;
    // Projection weights; conditioned runs keep them clear of zero.
    let weights = |fx: &mut Fixtures, shape: &[usize]| fx.tensor::<T>(shape, if conditioned { 0.25 } else { 0.0 });
    let result = match name {
        "add" | "sub" | "mul.a" | "mul.b" => {
            let shape = [e(fx), e(fx)];
            // Multiplier values clear of zero so the mul gradients are not tiny.
            let x = fx.tensor::<T>(&shape, if conditioned { 0.25 } else { 0.0 });
            let other = fx.tensor::<T>(&shape, if conditioned { 0.25 } else { 0.0 });
            let r = weights(fx, &shape);
            let op_name = name.to_string();
            check_op(
                move |tape: &mut Tape<T>, v| {
                    let o = tape.constant(other.clone());
                    match op_name.as_str() {
                        "add" => tape.add(v, o),
                        "sub" => tape.sub(o, v),
                        "mul.a" => tape.mul(v, o),
                        _ => tape.mul(o, v),
                    }
                },
                &x,
                r,
            )
        }
        "scale" => {
            let shape = [e(fx), e(fx)];
            let x = fx.tensor::<T>(&shape, 0.0);
            let factor = T::lit(fx.extent(1, 8) as f64 / 4.0 * if fx.seed() & 1 == 0 { 1.0 } else { -1.0 });
            let r = weights(fx, &shape);
            check_op(move |tape: &mut Tape<T>, v| tape.scale(v, factor), &x, r)
        }
        "abs" => {
            let shape = [e(fx), e(fx)];
            let x = fx.tensor::<T>(&shape, 2.0 * STEP + 1.0 / 64.0);
            let r = weights(fx, &shape);
            check_op(|tape: &mut Tape<T>, v| tape.abs(v), &x, r)
        }
        "sum" => {
            let shape = [e(fx), e(fx), e(fx)];
            let x = fx.tensor::<T>(&shape, 0.0);
            finite_diff_check(|tape, v| tape.sum(v), &x, T::lit(STEP))
        }
        "reshape" => {
            let (a, b) = (e(fx), e(fx));
            let x = fx.tensor::<T>(&[a, b], 0.0);
            let r = weights(fx, &[b, a]);
            check_op(move |tape: &mut Tape<T>, v| tape.reshape(v, vec![b, a]), &x, r)
        }
        "add_bias.x" | "add_bias.b" => {
            let (m, n) = (e(fx), e(fx));
            let x = fx.tensor::<T>(&[m, n], 0.0);
            let b = fx.tensor::<T>(&[n], 0.0);
            let r = weights(fx, &[m, n]);
            if name == "add_bias.x" {
                check_op(move |tape: &mut Tape<T>, v| {
                    let bv = tape.constant(b.clone());
                    tape.add_bias(v, bv)
                }, &x, r)
            } else {
                check_op(move |tape: &mut Tape<T>, v| {
                    let xv = tape.constant(x.clone());
                    tape.add_bias(xv, v)
                }, &b, r)
            }
        }
        "linear.w" => {
            let (m, k, n) = (e(fx), e(fx), e(fx));
            let x = fx.tensor::<T>(&[m, k], 0.0);
            let w = fx.tensor::<T>(&[k, n], 0.0);
            let b = fx.tensor::<T>(&[n], 0.0);
            let r = weights(fx, &[m, n]);
            check_op(move |tape: &mut Tape<T>, v| {
                let (xv, bv) = (tape.constant(x.clone()), tape.constant(b.clone()));
                tape.linear(xv, v, bv)
            }, &w, r)
        }
        "gather_rows" => {
            let (m, n) = (e(fx), e(fx));
            let x = fx.tensor::<T>(&[m, n], 0.0);
            // Repeated rows accumulate gradient.
            let rows: Vec<usize> = (0..e(fx) + 1).map(|_| fx.extent(0, m - 1)).collect();
            let r = weights(fx, &[rows.len(), n]);
            check_op(move |tape: &mut Tape<T>, v| tape.gather_rows(v, &rows), &x, r)
        }
        "channels_to_rows" => {
            let (c, h, w) = (e(fx), e(fx), e(fx));
            let x = fx.tensor::<T>(&[1, c, h, w], 0.0);
            let r = weights(fx, &[h * w, c]);
            check_op(|tape: &mut Tape<T>, v| tape.channels_to_rows(v), &x, r)
        }
        "conv2d.x" | "conv2d.w" | "conv2d.b" => {
            let (c, f, k) = (e(fx), e(fx), fx.extent(1, 3));
            let (h, w) = (fx.extent(k, 5), fx.extent(k, 5));
            let pad = fx.extent(0, 1);
            let stride = fx.extent(1, 2);
            let x = fx.tensor::<T>(&[1, c, h, w], 0.0);
            let wt = fx.tensor::<T>(&[f, c, k, k], 0.0);
            let b = fx.tensor::<T>(&[f], 0.0);
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let r = weights(fx, &[1, f, oh, ow]);
            let slot = match name {
                "conv2d.x" => 0,
                "conv2d.w" => 1,
                _ => 2,
            };
            let inputs = [x, wt, b];
            let fixed = inputs.clone();
            let op = move |tape: &mut Tape<T>, v: Var| {
                let mut vars = [v; 3];
                for (i, t) in fixed.iter().enumerate() {
                    if i != slot {
                        vars[i] = tape.constant(t.clone());
                    }
                }
                tape.conv2d(vars[0], vars[1], vars[2], stride, pad)
            };
            check_op(op, &inputs[slot], r)
        }
        "matmul.a" | "matmul.b" => {
            let (m, k, n) = (e(fx), e(fx), e(fx));
            let a = fx.tensor::<T>(&[m, k], 0.0);
            let b = fx.tensor::<T>(&[k, n], 0.0);
            let r = weights(fx, &[m, n]);
            let left = name == "matmul.a";
            let other = if left { b.clone() } else { a.clone() };
            let op = move |tape: &mut Tape<T>, v: Var| {
                let o = tape.constant(other.clone());
                if left {
                    tape.matmul(v, o)
                } else {
                    tape.matmul(o, v)
                }
            };
            check_op(op, if left { &a } else { &b }, r)
        }
        "relu" => {
            let shape = [e(fx), e(fx)];
            // At least two steps clear of the kink.
            let x = fx.tensor::<T>(&shape, 2.0 * STEP + 1.0 / 64.0);
            let r = weights(fx, &shape);
            check_op(|tape: &mut Tape<T>, v| tape.relu(v), &x, r)
        }
        "sigmoid" => {
            let shape = [e(fx), e(fx)];
            let x = fx.tensor::<T>(&shape, 0.0);
            let r = weights(fx, &shape);
            check_op(|tape: &mut Tape<T>, v| tape.sigmoid(v), &x, r)
        }
        "softmax" => {
            let shape = [e(fx), fx.extent(2, 5)];
            let mut x = fx.tensor::<T>(&shape, 0.0);
            let r = if conditioned {
                // One-hot rows: d/dx_j = y_t (δ_tj - y_j), bounded away from zero
                // once logits stay in [-0.5, 0.5].
                for v in x.data_mut() {
                    *v *= T::lit(0.5);
                }
                let mut r = Tensor::<T>::zeros(shape.to_vec()).unwrap();
                for row in r.data_mut().chunks_mut(shape[1]) {
                    let t = fx.extent(0, shape[1] - 1);
                    row[t] = if fx.seed() & 1 == 0 { T::one() } else { -T::one() };
                }
                r
            } else {
                weights(fx, &shape)
            };
            check_op(|tape: &mut Tape<T>, v| tape.softmax(v), &x, r)
        }
        "mean" => {
            let shape = [e(fx), e(fx), e(fx)];
            let x = fx.tensor::<T>(&shape, 0.0);
            finite_diff_check(|tape, v| tape.mean(v), &x, T::lit(STEP))
        }
        "max_pool2d" => {
            let (c, h, w) = (e(fx), fx.extent(2, 5), fx.extent(2, 5));
            let x = fx.distinct::<T>(&[1, c, h, w]);
            let (oh, ow) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
            let r = weights(fx, &[1, c, oh, ow]);
            check_op(|tape: &mut Tape<T>, v| tape.max_pool2d(v, 2, 2), &x, r)
        }
        "smooth_l1" => {
            let shape = [e(fx), e(fx)];
            let mut pred = fx.tensor::<T>(&shape, 0.0);
            // Differences either well inside or well outside the quadratic zone.
            for v in pred.data_mut() {
                *v *= T::lit(3.0);
                if (v.abs() - T::one()).abs() < T::lit(0.1) {
                    *v += T::lit(0.25);
                }
                if conditioned && v.abs() < T::lit(1.0 / 16.0) {
                    *v = T::lit(1.0 / 16.0);
                }
            }
            let target = Tensor::<T>::zeros(shape.to_vec()).unwrap();
            finite_diff_check(
                move |tape, v| {
                    let t = tape.constant(target.clone());
                    tape.smooth_l1(v, t)
                },
                &pred,
                T::lit(STEP),
            )
        }
        "sigmoid_cross_entropy" => {
            let shape = [e(fx), e(fx)];
            let mut z = fx.tensor::<T>(&shape, 0.0);
            // Conditioned logits in [-1, 1] keep |sigmoid(z) - y| above 0.26.
            let spread = if conditioned { 1.0 } else { 3.0 };
            for v in z.data_mut() {
                *v *= T::lit(spread);
            }
            let labels: Vec<T> = (0..z.numel()).map(|i| T::lit(((fx.seed() >> (i % 60)) & 1) as f64)).collect();
            finite_diff_check(move |tape, v| tape.sigmoid_cross_entropy_with(v, &labels), &z, T::lit(STEP))
        }
        "softmax_cross_entropy" => {
            let (m, k) = (e(fx), fx.extent(2, 5));
            let mut z = fx.tensor::<T>(&[m, k], 0.0);
            // Conditioned logits in [-0.5, 0.5] keep every class probability above 0.08.
            let spread = if conditioned { 0.5 } else { 2.0 };
            for v in z.data_mut() {
                *v *= T::lit(spread);
            }
            let targets: Vec<usize> = (0..m).map(|_| (fx.seed() % k as u64) as usize).collect();
            finite_diff_check(move |tape, v| tape.softmax_cross_entropy(v, &targets), &z, T::lit(STEP))
        }
        "roi_pool" => {
            let (c, h, w) = (e(fx), fx.extent(2, 5), fx.extent(2, 5));
            let x = fx.distinct::<T>(&[1, c, h, w]);
            let stride = 4.0;
            let nb = e(fx);
            let boxes: Vec<[T; 4]> = (0..nb)
                .map(|_| {
                    let x1 = fx.extent(0, w - 1) as f64 * stride;
                    let y1 = fx.extent(0, h - 1) as f64 * stride;
                    let x2 = x1 + fx.extent(1, 3) as f64 * stride;
                    let y2 = y1 + fx.extent(1, 3) as f64 * stride;
                    [x1, y1, x2, y2].map(T::lit)
                })
                .collect();
            let (ph, pw) = (fx.extent(1, 3), fx.extent(1, 3));
            let r = weights(fx, &[nb, c, ph, pw]);
            check_op(
                move |tape: &mut Tape<T>, v| tape.roi_pool(v, &boxes, ph, pw, T::lit(stride)),
                &x,
                r,
            )
        }
        other => panic!("unknown primitive {other}"),
    };
    result.unwrap_or_else(|e| panic!("{name}: {e}"))
}
