use crate::autodiff::Tensor;
use crate::synthdata::rng::SplitMix64;
use crate::synthdata::{DataError, Sample, ShiftKind, ShiftSpec};

/// Gray level the fog converges to.
pub const FOG_AIRLIGHT: f32 = 0.8;
/// Extinction coefficient at fog intensity 1.
pub const FOG_DENSITY: f32 = 3.0;
/// Channel remix reached at style intensity 1; row `c` gives output channel `c`.
/// A hue rotation a little past 60°: primaries land between the primaries, so
/// no class color is carried onto another class's color. Rows sum to 1, which
/// keeps grays gray.
pub const REMIX: [[f32; 3]; 3] = [[0.45, 0.05, 0.5], [0.5, 0.45, 0.05], [0.05, 0.5, 0.45]];
const STYLE_CONTRAST: f32 = 0.4;
const STYLE_BRIGHTNESS: f32 = 0.1;
const STYLE_NOISE: f32 = 0.1;

pub(crate) fn apply_shift(sample: Sample, shift: &ShiftSpec, rng: &mut SplitMix64) -> Result<Sample, DataError> {
    if shift.intensity == 0.0 || shift.kind == ShiftKind::None {
        return Ok(sample);
    }
    let (image, ann, domain) = sample.parts();
    let ann = ann.cloned().unwrap_or_default();
    match shift.kind {
        ShiftKind::None => unreachable!(),
        ShiftKind::Style => {
            let out = apply_style_shift(image, shift.intensity, rng);
            Sample::new(out, ann.boxes, ann.labels, domain)
        }
        ShiftKind::Fog => {
            let out = apply_fog(image, FOG_DENSITY * shift.intensity);
            Sample::new(out, ann.boxes, ann.labels, domain)
        }
        ShiftKind::Scale => apply_scale(&sample, shift.effective_scale()),
    }
}

/// Depth-dependent haze: `t·in + (1 − t)·FOG_AIRLIGHT` with `t = exp(−β·d)`.
///
/// Pseudo-depth `d` falls linearly from 1 at the top row to 0 at the bottom,
/// sampled at pixel centers: `d = 1 − (y + 0.5)/H`.
pub fn apply_fog(image: &Tensor<f32>, beta: f32) -> Tensor<f32> {
    assert!(beta >= 0.0, "fog density must be non-negative");
    if beta == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    let data = out.data_mut();
    for y in 0..h {
        let d = 1.0 - (y as f32 + 0.5) / h as f32;
        let t = (-beta * d).exp();
        for c in 0..3 {
            for v in &mut data[(c * h + y) * w..][..w] {
                *v = t * *v + (1.0 - t) * FOG_AIRLIGHT;
            }
        }
    }
    out
}

/// Channel remix toward [`REMIX`] with weight `intensity³`, then contrast
/// reduced, brightness raised and noise added in proportion to `intensity`,
/// clamped to `[0, 1]`.
pub fn apply_style_shift(image: &Tensor<f32>, intensity: f32, rng: &mut SplitMix64) -> Tensor<f32> {
    if intensity == 0.0 {
        return image.clone();
    }
    let a = intensity;
    // The remix weight grows as a³: class colors stay recognizable at moderate
    // intensities and the full remix is reached at 1.
    let wm = a * a * a;
    let mut m = [[0.0f32; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let id = if r == c { 1.0 } else { 0.0 };
            *v = (1.0 - wm) * id + wm * REMIX[r][c];
        }
    }
    let contrast = 1.0 - STYLE_CONTRAST * a;
    let brightness = STYLE_BRIGHTNESS * a;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let src = image.data();
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let px = [src[p], src[plane + p], src[2 * plane + p]];
        for (c, row) in m.iter().enumerate() {
            let mixed = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
            let noise = STYLE_NOISE * a * rng.uniform(-1.0, 1.0);
            out[c * plane + p] = ((mixed - 0.5) * contrast + 0.5 + brightness + noise).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Bilinear resize of a `[C,H,W]` image to `[C,out_h,out_w]` with half-pixel centers.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("positive extents")
}

/// Resizes to `ceil(size·factor)` pixels per side and multiplies boxes by `factor`.
pub fn apply_scale(sample: &Sample, factor: f32) -> Result<Sample, DataError> {
    let (image, ann, domain) = sample.parts();
    let ann = ann.cloned().unwrap_or_default();
    if factor == 1.0 {
        return Sample::new(image.clone(), ann.boxes, ann.labels, domain);
    }
    if !(factor > 0.0) {
        return Err(DataError::InvalidSpec(format!("scale factor must be positive, got {factor}")));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let oh = (h as f32 * factor).ceil().max(1.0) as usize;
    let ow = (w as f32 * factor).ceil().max(1.0) as usize;
    let resized = resize_bilinear(image, oh, ow);
    let boxes = ann.boxes.iter().map(|b| b.scaled(factor)).collect();
    Sample::new(resized, boxes, ann.labels, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use crate::synthdata::{render_scene, render_unshifted, DatasetSpec, DomainLabel};

    fn gray(h: usize, w: usize, v: f32) -> Tensor<f32> {
        Tensor::full(vec![3, h, w], v).unwrap()
    }

    #[test]
    fn fog_limits() {
        let img = gray(4, 4, 0.3);
        assert_eq!(apply_fog(&img, 0.0), img);
        let thick = apply_fog(&img, 1e4);
        // Bottom row has d = 1/8, so e^{-1250} underflows to 0.
        assert!(thick.data().iter().all(|&v| (v - FOG_AIRLIGHT).abs() < 1e-6));
    }

    #[test]
    fn fog_half_transmittance() {
        // With H = 1 the single row has d = 0.5; β = 2·ln 2 gives d·β = ln 2, t = 0.5.
        let img = gray(1, 2, 0.6);
        let out = apply_fog(&img, 2.0 * std::f32::consts::LN_2);
        for &v in out.data() {
            assert!((v - (0.5 * 0.6 + 0.4)).abs() < 1e-6);
        }
    }

    #[test]
    fn style_identity_and_remix_of_red() {
        let mut rng = SplitMix64::new(1);
        let mut img = gray(16, 16, 0.0);
        for v in &mut img.data_mut()[..256] {
            *v = 1.0;
        }
        assert_eq!(apply_style_shift(&img, 0.0, &mut rng), img);
        let out = apply_style_shift(&img, 1.0, &mut rng);
        // Pure red through the remix becomes (0.45, 0.5, 0.05); after contrast
        // and brightness (0.57, 0.6, 0.33). Averaging cancels the noise.
        let mean: Vec<f32> = out.data().chunks(256).map(|c| c.iter().sum::<f32>() / 256.0).collect();
        for (m, want) in mean.iter().zip([0.57, 0.6, 0.33]) {
            assert!((m - want).abs() < 0.01, "{mean:?}");
        }
        let argmax = (0..3).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(argmax, 1);
    }

    #[test]
    fn every_shift_at_intensity_zero_is_identity() {
        let base = DatasetSpec { num_images: 5, seed: 4, ..DatasetSpec::default() };
        for kind in [ShiftKind::Style, ShiftKind::Fog, ShiftKind::Scale] {
            let spec = DatasetSpec { shift: ShiftSpec { kind, intensity: 0.0, scale_factor: 0.5 }, ..base.clone() };
            for i in 0..5 {
                assert_eq!(render_scene(&spec, i).unwrap(), render_unshifted(&base, i).unwrap());
            }
        }
    }

    #[test]
    fn shifts_keep_geometry_except_scale() {
        let base = DatasetSpec { num_images: 3, seed: 8, ..DatasetSpec::default() };
        for shift in [ShiftSpec::style(0.8), ShiftSpec::fog(0.6)] {
            let spec = DatasetSpec { shift, ..base.clone() };
            for i in 0..3 {
                let a = render_scene(&spec, i).unwrap();
                let b = render_unshifted(&base, i).unwrap();
                assert_eq!(a.annotations(), b.annotations());
                assert_ne!(a.image(), b.image());
            }
        }
    }

    #[test]
    fn scale_multiplies_boxes_exactly() {
        let img = gray(10, 10, 0.5);
        let b = Rect::new(1.0f32, 2.0, 7.0, 9.0);
        let s = Sample::new(img, vec![b], vec![2], DomainLabel::Target).unwrap();
        let out = apply_scale(&s, 0.5).unwrap();
        assert_eq!(out.image().shape(), &[3, 5, 5]);
        assert_eq!(out.annotations().unwrap().boxes[0], b.scaled(0.5));
        let up = apply_scale(&s, 0.45).unwrap();
        assert_eq!(up.image().shape(), &[3, 5, 5]);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = gray(7, 5, 0.25);
        let out = resize_bilinear(&img, 3, 11);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
