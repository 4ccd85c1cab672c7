use crate::autodiff::kernels::{self, ConvGeometry};
use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    GradReverse(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        filters: usize,
        cols: Vec<Vec<T>>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    SigmoidCrossEntropy {
        logits: Var,
        labels: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1(Var, Var),
    RoiPool {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ChannelsToRows(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations during a forward pass and replays them in reverse.
///
/// A tape is single-use: after [`Tape::backward`] it refuses to run backward
/// again, so gradients can never be accumulated twice by accident.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor that gradients are computed for.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var, AutodiffError> {
        let rg = self.needs_grad(inputs);
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(value, op))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((ta.shape().to_vec(), data))
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Ok((ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect()))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Ok((tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect()))
        } else {
            Err(mismatch(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        self.record(shape, data, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.record(shape, data, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.record(shape, data, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        self.record(t.shape().to_vec(), data, &[x], Op::Scale(x, factor))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_acc(m, k, n, self.data(a), self.data(b), &mut out);
        self.record(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// Adds `bias[n]` to every row of `x[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.iter().product::<usize>() != sx[1] {
            return Err(mismatch("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        self.record(sx.to_vec(), data, &[x, bias], Op::AddBias(x, bias))
    }

    /// Affine layer `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.record(t.shape().to_vec(), data, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        // NaN passes through so non-finite values surface instead of vanishing.
        self.unary(x, Op::Relu(x), |v| if v < T::zero() { T::zero() } else { v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Identity on the forward pass; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, Op::GradReverse(x), |v| v)
    }

    /// Copies `x` as a constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = sum_wide(self.data(x));
        self.record(vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let m = T::lit(t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64);
        self.record(vec![1], vec![m], &[x], Op::Mean(x))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.record(t.shape().to_vec(), out, &[x], Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, AutodiffError> {
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.record(shape, data, &[x], Op::Reshape(x))
    }

    /// Collapses every axis after the first: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![n, rest])
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]` plus `b[F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be positive"));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (filters, kc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kc != channels {
            return Err(mismatch("conv2d", format!("input has {channels} channels, kernel expects {kc}")));
        }
        if sb.iter().product::<usize>() != filters {
            return Err(mismatch("conv2d", format!("bias {sb:?} for {filters} filters")));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(mismatch("conv2d", format!("kernel {kh}x{kw} larger than padded input {height}x{width} (pad {pad})")));
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let p = geom.col_cols();
        let k = geom.col_rows();
        let img_len = channels * height * width;
        let mut out = vec![T::zero(); batch * filters * p];
        let mut cols_all = Vec::with_capacity(batch);
        {
            let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
            for n in 0..batch {
                let cols = kernels::im2col(&geom, &xd[n * img_len..(n + 1) * img_len]);
                let dst = &mut out[n * filters * p..(n + 1) * filters * p];
                for (f, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(bd[f]);
                }
                kernels::gemm_acc(filters, k, p, wd, &cols, dst);
                cols_all.push(cols);
            }
        }
        let shape = vec![batch, filters, geom.out_h, geom.out_w];
        self.record(
            shape,
            out,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                filters,
                cols: cols_all,
            },
        )
    }

    /// Max pooling over `k×k` windows of `x[N,C,H,W]`, no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(mismatch("max_pool2d", format!("input {s:?}, window {k}, stride {stride}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] || xd[idx].is_nan() {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.record(vec![n, c, oh, ow], out, &[x], Op::MaxPool2d { x, argmax })
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against one label for every element.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, label: T) -> Result<Var, AutodiffError> {
        let n = self.value(logits).numel();
        self.sigmoid_cross_entropy_with(logits, &vec![label; n])
    }

    /// Summed binary cross-entropy with a label per element, in the stable logit form
    /// `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn sigmoid_cross_entropy_with(&mut self, logits: Var, labels: &[T]) -> Result<Var, AutodiffError> {
        let zs = self.data(logits);
        if zs.len() != labels.len() {
            return Err(mismatch("sigmoid_cross_entropy", format!("{} logits, {} labels", zs.len(), labels.len())));
        }
        let total: f64 = zs
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let (z, y) = (z.as_f64(), y.as_f64());
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let labels = labels.to_vec();
        self.record(vec![1], vec![T::lit(total)], &[logits], Op::SigmoidCrossEntropy { logits, labels })
    }

    /// Summed multi-class cross-entropy of row-wise softmax over `logits[m,k]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(mismatch("softmax_cross_entropy", format!("logits {s:?}, targets {targets:?}")));
        }
        let k = s[1];
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            softmax_in_place(row);
        }
        let targets = targets.to_vec();
        self.record(vec![1], vec![T::lit(total)], &[logits], Op::SoftmaxCrossEntropy { logits, targets, probs })
    }

    /// Summed smooth-L1 of `pred - target` with the quadratic zone `|d| < 1`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(mismatch("smooth_l1", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum();
        self.record(vec![1], vec![T::lit(total)], &[pred, target], Op::SmoothL1(pred, target))
    }

    /// ROI max pooling of `x[1,C,H,W]` into `[R,C,out_h,out_w]`.
    ///
    /// Boxes are `[x1,y1,x2,y2]` in input pixels. Each box maps to the feature
    /// cells `[round(x1/stride), round(x2/stride))`, widened to one cell when
    /// empty, and is split into bins with integer floor/ceil edges. Bins that fall
    /// outside the map yield 0 and pass no gradient.
    pub fn roi_pool(&mut self, x: Var, boxes: &[[T; 4]], out_h: usize, out_w: usize, stride: T) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() != 4 || s[0] != 1 || boxes.is_empty() || out_h == 0 || out_w == 0 {
            return Err(mismatch("roi_pool", format!("feature map {s:?}, {} boxes", boxes.len())));
        }
        let (c, h, w) = (s[1], s[2] as isize, s[3] as isize);
        for b in boxes {
            if !(b[2] > b[0] && b[3] > b[1]) {
                return Err(AutodiffError::DegenerateBox(b.map(|v| v.as_f64())));
            }
        }
        let xd = self.data(x);
        let bins = out_h * out_w;
        let mut out = vec![T::zero(); boxes.len() * c * bins];
        let mut argmax = vec![None; out.len()];
        for (r, b) in boxes.iter().enumerate() {
            let cell = |v: T| (v / stride).as_f64().round() as isize;
            let (x1, y1) = (cell(b[0]), cell(b[1]));
            let roi_w = (cell(b[2]) - x1).max(1);
            let roi_h = (cell(b[3]) - y1).max(1);
            for ph in 0..out_h as isize {
                let hs = (y1 + ph * roi_h / out_h as isize).clamp(0, h);
                let he = (y1 + ((ph + 1) * roi_h + out_h as isize - 1) / out_h as isize).clamp(0, h);
                for pw in 0..out_w as isize {
                    let ws = (x1 + pw * roi_w / out_w as isize).clamp(0, w);
                    let we = (x1 + ((pw + 1) * roi_w + out_w as isize - 1) / out_w as isize).clamp(0, w);
                    for ch in 0..c {
                        let plane = ch * (h * w) as usize;
                        let mut best: Option<usize> = None;
                        for yy in hs..he {
                            for xx in ws..we {
                                let idx = plane + (yy * w + xx) as usize;
                                if best.is_none_or(|bi| xd[idx] > xd[bi] || xd[idx].is_nan()) {
                                    best = Some(idx);
                                }
                            }
                        }
                        let o = (r * c + ch) * bins + ph as usize * out_w + pw as usize;
                        if let Some(bi) = best {
                            out[o] = xd[bi];
                        }
                        argmax[o] = best;
                    }
                }
            }
        }
        self.record(vec![boxes.len(), c, out_h, out_w], out, &[x], Op::RoiPool { x, argmax })
    }

    /// Selects rows of `x[m,n]` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(mismatch("gather_rows", format!("input {s:?}, rows {rows:?}")));
        }
        let n = s[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        let rows = rows.to_vec();
        self.record(vec![rows.len(), n], out, &[x], Op::GatherRows { x, rows })
    }

    /// `[1,C,H,W] -> [H·W, C]`: one row per spatial location.
    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x);
        if s.len() != 4 || s[0] != 1 {
            return Err(mismatch("channels_to_rows", format!("input {s:?}")));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let out = kernels::transpose(c, hw, self.data(x));
        self.record(vec![hw, c], out, &[x], Op::ChannelsToRows(x))
    }

    /// Backpropagates from a single-element output seeded with 1.
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        let n = self.value(output).numel();
        if n != 1 {
            return Err(AutodiffError::NotScalar(self.shape(output).to_vec()));
        }
        self.backward_with(output, &[T::one()])
    }

    /// Backpropagates an explicit upstream gradient into `output`.
    pub fn backward_with(&mut self, output: Var, upstream: &[T]) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        if upstream.len() != self.value(output).numel() {
            return Err(mismatch("backward", format!("upstream of length {} for {:?}", upstream.len(), self.shape(output))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let zero = T::zero();
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if self.nodes[v.0].value.requires_grad() {
                    let n = self.nodes[v.0].value.numel();
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![zero; n]);
                    {
                        let $buf: &mut Vec<T> = &mut owned;
                        $body
                    }
                    grads[v.0] = Some(owned);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                with_grad!(*a, |ga| {
                    reduce_into(ga, g, T::one());
                });
                with_grad!(*b, |gb| {
                    reduce_into(gb, g, sign);
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let bcast = |d: &[T], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                with_grad!(*a, |ga| {
                    if ga.len() == 1 && g.len() > 1 {
                        ga[0] += g.iter().enumerate().map(|(j, &gj)| gj * bcast(db, j)).sum::<T>();
                    } else {
                        for (j, gj) in g.iter().enumerate() {
                            ga[j] += *gj * bcast(db, j);
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    if gb.len() == 1 && g.len() > 1 {
                        gb[0] += g.iter().enumerate().map(|(j, &gj)| gj * bcast(da, j)).sum::<T>();
                    } else {
                        for (j, gj) in g.iter().enumerate() {
                            gb[j] += *gj * bcast(da, j);
                        }
                    }
                });
            }
            Op::Scale(x, f) => with_grad!(*x, |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s * *f;
                }
            }),
            Op::MatMul { a, b, m, k, n } => {
                with_grad!(*a, |ga| {
                    let bt = kernels::transpose(*k, *n, self.data(*b));
                    kernels::gemm_acc(*m, *n, *k, g, &bt, ga);
                });
                with_grad!(*b, |gb| {
                    let at = kernels::transpose(*m, *k, self.data(*a));
                    kernels::gemm_acc(*k, *m, *n, &at, g, gb);
                });
            }
            Op::AddBias(x, bias) => {
                with_grad!(*x, |gx| {
                    add_into(gx, g);
                });
                with_grad!(*bias, |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Relu(x) => with_grad!(*x, |gx| {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out) {
                    if y > zero || y.is_nan() {
                        *d += s;
                    }
                }
            }),
            Op::Sigmoid(x) => with_grad!(*x, |gx| {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += s * y * (T::one() - y);
                }
            }),
            Op::Abs(x) => with_grad!(*x, |gx| {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                    if v > zero {
                        *d += s;
                    } else if v < zero {
                        *d -= s;
                    }
                }
            }),
            Op::GradReverse(x) => with_grad!(*x, |gx| {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d -= s;
                }
            }),
            Op::Sum(x) => with_grad!(*x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => with_grad!(*x, |gx| {
                let s = g[0] / T::lit(gx.len() as f64);
                for d in gx.iter_mut() {
                    *d += s;
                }
            }),
            Op::Softmax(x) => with_grad!(*x, |gx| {
                let n = *node.value.shape().last().expect("shape");
                for ((dx, dy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: T = dy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }),
            Op::Reshape(x) => with_grad!(*x, |gx| {
                add_into(gx, g);
            }),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                filters,
                cols,
            } => {
                let p = geom.col_cols();
                let k = geom.col_rows();
                let f = *filters;
                with_grad!(*b, |gb| {
                    for gn in g.chunks(f * p) {
                        for (fi, row) in gn.chunks(p).enumerate() {
                            gb[fi] += sum_wide(row);
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for (gn, col) in g.chunks(f * p).zip(cols) {
                        let col_t = kernels::transpose(k, p, col);
                        kernels::gemm_acc(f, p, k, gn, &col_t, gw);
                    }
                });
                with_grad!(*x, |gx| {
                    let wt = kernels::transpose(f, k, self.data(*w));
                    let img_len = geom.channels * geom.height * geom.width;
                    for (n, gn) in g.chunks(f * p).enumerate() {
                        let mut dcols = vec![zero; k * p];
                        kernels::gemm_acc(k, f, p, &wt, gn, &mut dcols);
                        kernels::col2im_acc(geom, &dcols, &mut gx[n * img_len..(n + 1) * img_len]);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => with_grad!(*x, |gx| {
                for (&src, &s) in argmax.iter().zip(g) {
                    gx[src] += s;
                }
            }),
            Op::SigmoidCrossEntropy { logits, labels } => with_grad!(*logits, |gl| {
                for ((d, &z), &y) in gl.iter_mut().zip(self.data(*logits)).zip(labels) {
                    *d += g[0] * (sigmoid(z) - y);
                }
            }),
            Op::SoftmaxCrossEntropy { logits, targets, probs } => with_grad!(*logits, |gl| {
                let k = probs.len() / targets.len();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { T::one() } else { zero };
                        gl[r * k + j] += g[0] * (probs[r * k + j] - onehot);
                    }
                }
            }),
            Op::SmoothL1(pred, target) => {
                let d: Vec<T> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d.abs() < T::one() {
                            d
                        } else {
                            d.signum()
                        }
                    })
                    .collect();
                with_grad!(*pred, |gp| {
                    for (o, &dd) in gp.iter_mut().zip(&d) {
                        *o += g[0] * dd;
                    }
                });
                with_grad!(*target, |gt| {
                    for (o, &dd) in gt.iter_mut().zip(&d) {
                        *o -= g[0] * dd;
                    }
                });
            }
            Op::RoiPool { x, argmax } => with_grad!(*x, |gx| {
                for (src, &s) in argmax.iter().zip(g) {
                    if let Some(idx) = src {
                        gx[*idx] += s;
                    }
                }
            }),
            Op::GatherRows { x, rows } => with_grad!(*x, |gx| {
                let n = self.shape(*x)[1];
                for (r, gr) in rows.iter().zip(g.chunks(n)) {
                    add_into(&mut gx[r * n..(r + 1) * n], gr);
                }
            }),
            Op::ChannelsToRows(x) => with_grad!(*x, |gx| {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let back = kernels::transpose(hw, c, g);
                add_into(gx, &back);
            }),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Sum with an f64 accumulator so long reductions stay accurate at f32.
fn sum_wide<T: Scalar>(xs: &[T]) -> T {
    T::lit(xs.iter().map(|v| v.as_f64()).sum())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `sign·src` into `dst`, summing everything when `dst` is a broadcast scalar.
fn reduce_into<T: Scalar>(dst: &mut [T], src: &[T], sign: T) {
    if dst.len() == 1 && src.len() > 1 {
        dst[0] += sign * sum_wide(src);
    } else {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
    }
}
