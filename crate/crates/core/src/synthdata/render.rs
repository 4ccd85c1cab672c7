use crate::autodiff::Tensor;
use crate::geometry::{iou, Rect};
use crate::synthdata::rng::SplitMix64;
use crate::synthdata::shift::apply_shift;
use crate::synthdata::{DataError, DatasetSpec, Sample};

/// Per-class base colors: circle, square, triangle.
const BASE_COLORS: [[f32; 3]; 3] = [[0.85, 0.20, 0.20], [0.20, 0.75, 0.25], [0.25, 0.35, 0.90]];
const COLOR_JITTER: f32 = 0.12;
const MAX_OVERLAP: f32 = 0.3;
const PLACEMENT_TRIES: usize = 50;
const TEXTURE_CELL: usize = 8;
const TEXTURE_AMPLITUDE: f32 = 0.08;
const PIXEL_NOISE: f32 = 0.03;

/// Salt for the stream that drives shift noise, so shift settings never
/// perturb the scene layout.
pub(crate) const SHIFT_STREAM_SALT: u64 = 0x5348_4946_5453_414c;

/// Renders sample `index` of `spec`, including its domain shift.
pub fn render_scene(spec: &DatasetSpec, index: usize) -> Result<Sample, DataError> {
    let base = render_unshifted(spec, index)?;
    let mut rng = SplitMix64::for_stream(spec.seed ^ SHIFT_STREAM_SALT, index as u64);
    apply_shift(base, &spec.shift, &mut rng)
}

/// Renders sample `index` of `spec` with its shift ignored.
pub fn render_unshifted(spec: &DatasetSpec, index: usize) -> Result<Sample, DataError> {
    spec.validate()?;
    if index >= spec.num_images {
        return Err(DataError::IndexOutOfRange { index, len: spec.num_images });
    }
    let mut rng = SplitMix64::for_stream(spec.seed, index as u64);
    let n = spec.image_size;
    let mut img = background(&mut rng, n);

    let (lo, hi) = spec.objects_per_image;
    let wanted = rng.range_inclusive(lo as u64, hi as u64) as usize;
    let mut boxes: Vec<Rect<f32>> = Vec::with_capacity(wanted);
    let mut labels = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let class = rng.range_inclusive(1, spec.num_classes as u64) as usize;
        let mut color = BASE_COLORS[class - 1];
        for c in &mut color {
            *c = (*c + rng.uniform(-COLOR_JITTER, COLOR_JITTER)).clamp(0.0, 1.0);
        }
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let side = rng.uniform(spec.object_size_range.0, spec.object_size_range.1);
            let x1 = rng.uniform(0.0, n as f32 - side);
            let y1 = rng.uniform(0.0, n as f32 - side);
            let b = Rect::new(x1, y1, x1 + side, y1 + side);
            boxes.iter().all(|o| iou(o, &b) <= MAX_OVERLAP).then_some(b)
        });
        // A crowded image may simply end up with fewer objects.
        let Some(b) = placed else { break };
        paint(&mut img, n, &b, class, color);
        boxes.push(b);
        labels.push(class);
    }
    for v in img.iter_mut() {
        *v = (*v + rng.uniform(-PIXEL_NOISE, PIXEL_NOISE)).clamp(0.0, 1.0);
    }
    let image = Tensor::new(vec![3, n, n], img).map_err(|e| DataError::InvalidSample(e.to_string()))?;
    Sample::new(image, boxes, labels, spec.domain)
}

/// Gray level plus bilinearly interpolated value noise on a coarse lattice.
fn background(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    let level = rng.uniform(0.35, 0.55);
    let cells = n.div_ceil(TEXTURE_CELL) + 1;
    let mut img = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        let lattice: Vec<f32> = (0..cells * cells).map(|_| rng.uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE)).collect();
        for y in 0..n {
            let gy = y / TEXTURE_CELL;
            let fy = (y % TEXTURE_CELL) as f32 / TEXTURE_CELL as f32;
            for x in 0..n {
                let gx = x / TEXTURE_CELL;
                let fx = (x % TEXTURE_CELL) as f32 / TEXTURE_CELL as f32;
                let at = |i: usize, j: usize| lattice[i * cells + j];
                let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
                let bottom = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
                img[(c * n + y) * n + x] = level + top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    img
}

/// Whether the pixel centered at `(px, py)` lies inside shape `class` with box `b`.
pub(crate) fn inside(class: usize, b: &Rect<f32>, px: f32, py: f32) -> bool {
    if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
        return false;
    }
    match class {
        1 => {
            let r = 0.5 * b.width();
            let (dx, dy) = (px - (b.x1 + r), py - (b.y1 + r));
            dx * dx + dy * dy <= r * r
        }
        2 => true,
        _ => {
            // Apex at top center, base along the bottom edge. The half-pixel
            // slack keeps the apex from vanishing between pixel centers.
            let t = (py - b.y1) / b.height();
            let half = 0.5 * b.width() * t;
            let cx = 0.5 * (b.x1 + b.x2);
            (px - cx).abs() <= half + 0.5
        }
    }
}

fn paint(img: &mut [f32], n: usize, b: &Rect<f32>, class: usize, color: [f32; 3]) {
    let y0 = b.y1.floor().max(0.0) as usize;
    let y1 = (b.y2.ceil() as usize).min(n);
    let x0 = b.x1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(n);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(class, b, x as f32 + 0.5, y as f32 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    img[(c * n + y) * n + x] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{ShiftSpec, DomainLabel};

    fn spec() -> DatasetSpec {
        DatasetSpec { num_images: 20, seed: 11, ..DatasetSpec::default() }
    }

    #[test]
    fn same_seed_and_index_render_identically() {
        let s = spec();
        assert_eq!(render_scene(&s, 3).unwrap(), render_scene(&s, 3).unwrap());
        assert_ne!(render_scene(&s, 3).unwrap(), render_scene(&s, 4).unwrap());
    }

    #[test]
    fn single_object_range_gives_one_box() {
        let s = DatasetSpec { objects_per_image: (1, 1), ..spec() };
        for i in 0..s.num_images {
            let smp = render_scene(&s, i).unwrap();
            assert_eq!(smp.annotations().unwrap().boxes.len(), 1);
        }
    }

    #[test]
    fn objects_respect_overlap_limit_and_bounds() {
        let s = DatasetSpec { objects_per_image: (4, 6), ..spec() };
        for i in 0..s.num_images {
            let smp = render_scene(&s, i).unwrap();
            let a = smp.annotations().unwrap();
            for (k, b) in a.boxes.iter().enumerate() {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                for o in &a.boxes[..k] {
                    assert!(iou(o, b) <= MAX_OVERLAP);
                }
            }
        }
    }

    /// Tight box of the pixels the rasterizer fills for the first object.
    fn painted_extent(smp: &Sample) -> Rect<f32> {
        let n = smp.width();
        let (mut x1, mut y1, mut x2, mut y2) = (n as f32, n as f32, 0.0f32, 0.0f32);
        let b = smp.annotations().unwrap().boxes[0];
        let class = smp.annotations().unwrap().labels[0];
        for y in 0..n {
            for x in 0..n {
                if inside(class, &b, x as f32 + 0.5, y as f32 + 0.5) {
                    x1 = x1.min(x as f32);
                    y1 = y1.min(y as f32);
                    x2 = x2.max(x as f32 + 1.0);
                    y2 = y2.max(y as f32 + 1.0);
                }
            }
        }
        Rect::new(x1, y1, x2, y2)
    }

    #[test]
    fn boxes_bound_their_shapes_within_one_pixel() {
        let s = DatasetSpec { objects_per_image: (1, 1), num_images: 60, ..spec() };
        for i in 0..s.num_images {
            let smp = render_scene(&s, i).unwrap();
            let b = smp.annotations().unwrap().boxes[0];
            let e = painted_extent(&smp);
            for (got, want) in e.to_array().iter().zip(b.to_array()) {
                assert!((got - want).abs() <= 1.0, "sample {i}: extent {e:?} vs box {b:?}");
            }
        }
    }

    #[test]
    fn circle_box_matches_center_and_radius() {
        let b = Rect::new(10.0f32, 20.0, 30.0, 40.0);
        let (c, r) = ((20.0f32, 30.0f32), 10.0f32);
        assert!(inside(1, &b, c.0, c.1));
        assert!(inside(1, &b, c.0 + r - 0.5, c.1));
        assert!(!inside(1, &b, c.0 + r + 0.5, c.1));
        assert!(!inside(1, &b, 11.0, 21.0));
    }

    #[test]
    fn domain_label_comes_from_the_spec() {
        let s = DatasetSpec { domain: DomainLabel::Target, shift: ShiftSpec::style(0.5), ..spec() };
        assert_eq!(render_scene(&s, 0).unwrap().domain(), DomainLabel::Target);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        assert!(render_scene(&spec(), 20).is_err());
    }
}
