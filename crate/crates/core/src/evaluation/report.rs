use serde::{Deserialize, Serialize};

use crate::adaptation::AblationMask;
use crate::detector::{detect, propose, Detection, DetectorConfig, ParamStore};
use crate::evaluation::{average_precision, EvalError, ScoredBox};
use crate::geometry::Rect;
use crate::synthdata::{apply_scale, Dataset, CLASS_NAMES};

/// AP of one class; `ap` is `None` when the class has no gt instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: String,
    pub gt_count: usize,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    /// Unweighted mean over classes with at least one gt instance.
    pub map: f64,
    pub detection_count: usize,
    pub dataset_digest: String,
    pub model_digest: Option<String>,
}

impl EvalReport {
    pub fn ap_of(&self, class: usize) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).and_then(|c| c.ap)
    }
}

pub fn class_name(class: usize) -> String {
    CLASS_NAMES.get(class.wrapping_sub(1)).map_or_else(|| format!("class{class}"), |s| s.to_string())
}

/// `(box, class)` per image. Reads evaluation labels, including target ones.
pub fn ground_truth(ds: &Dataset) -> Vec<Vec<(Rect<f32>, usize)>> {
    ds.samples
        .iter()
        .map(|s| s.annotations().map_or_else(Vec::new, |a| a.boxes.iter().copied().zip(a.labels.iter().copied()).collect()))
        .collect()
}

/// Per-class AP at `iou_thresh` and their mean.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    gt: &[Vec<(Rect<f32>, usize)>],
    num_classes: usize,
    iou_thresh: f32,
) -> (Vec<ClassAp>, f64) {
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let scored: Vec<ScoredBox<f32>> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.category == class).map(move |d| ScoredBox { image: i, bbox: d.bbox, score: d.score }))
            .collect();
        let boxes: Vec<Vec<Rect<f32>>> =
            gt.iter().map(|g| g.iter().filter(|(_, c)| *c == class).map(|(b, _)| *b).collect()).collect();
        let gt_count = boxes.iter().map(Vec::len).sum();
        per_class.push(ClassAp { class, name: class_name(class), gt_count, ap: average_precision(&scored, &boxes, iou_thresh) });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (per_class, map)
}

/// `detect` on every image of `ds`.
pub fn detect_dataset(params: &ParamStore, cfg: &DetectorConfig, ds: &Dataset) -> Result<Vec<Vec<Detection>>, EvalError> {
    Ok(ds.samples.iter().map(|s| detect(s.image(), params, cfg)).collect::<Result<_, _>>()?)
}

/// Top-`top_n` RPN proposal boxes for every image of `ds`.
pub fn propose_dataset(params: &ParamStore, cfg: &DetectorConfig, ds: &Dataset, top_n: usize) -> Result<Vec<Vec<Rect<f32>>>, EvalError> {
    ds.samples
        .iter()
        .map(|s| Ok(propose(s.image(), params, cfg, top_n)?.into_iter().map(|p| p.bbox).collect()))
        .collect()
}

/// mAP at IoU 0.5 of a model on `ds`.
pub fn evaluate_model(
    params: &ParamStore,
    cfg: &DetectorConfig,
    ds: &Dataset,
    model_digest: Option<String>,
) -> Result<EvalReport, EvalError> {
    let dets = detect_dataset(params, cfg, ds)?;
    let (per_class, map) = evaluate_detections(&dets, &ground_truth(ds), cfg.num_classes, 0.5);
    Ok(EvalReport {
        per_class,
        map,
        detection_count: dets.iter().map(Vec::len).sum(),
        dataset_digest: format!("{:016x}", ds.digest()),
        model_digest,
    })
}

/// `ds` with every image and box resized by `factor`.
pub fn rescale_dataset(ds: &Dataset, factor: f32) -> Result<Dataset, EvalError> {
    let samples = ds.samples.iter().map(|s| apply_scale(s, factor)).collect::<Result<_, _>>()?;
    Ok(Dataset { spec: ds.spec.clone(), samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub model: String,
    pub scale: f32,
    pub map: f64,
}

pub const SWEEP_HEADER: &str = "model,scale,map";

/// mAP of every model on `target` resized to each factor. Rows are grouped
/// by scale, models in input order.
pub fn scale_sweep(
    models: &[(&str, &ParamStore)],
    cfg: &DetectorConfig,
    target: &Dataset,
    scales: &[f32],
) -> Result<Vec<ScalePoint>, EvalError> {
    let mut out = Vec::with_capacity(models.len() * scales.len());
    for &f in scales {
        let ds = rescale_dataset(target, f)?;
        for (name, params) in models {
            let r = evaluate_model(params, cfg, &ds, None)?;
            out.push(ScalePoint { model: name.to_string(), scale: f, map: r.map });
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[ScalePoint]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.model, p.scale, p.map));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: AblationMask,
    pub report: EvalReport,
}

/// The five ablation rows in fixed order: baseline, img, ins, img+ins, img+ins+cst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn ablation_table(mut reports: Vec<(AblationMask, EvalReport)>) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::with_capacity(AblationMask::TABLE.len());
    for mask in AblationMask::TABLE {
        let pos = reports.iter().position(|(m, _)| *m == mask).ok_or_else(|| EvalError::MissingRow(mask.label()))?;
        let (_, report) = reports.swap_remove(pos);
        rows.push(AblationRow { mask, report });
    }
    let names = |r: &EvalReport| r.per_class.iter().map(|c| c.class).collect::<Vec<_>>();
    if rows.iter().any(|r| names(&r.report) != names(&rows[0].report)) {
        return Err(EvalError::Input("ablation rows cover different classes".into()));
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["img", "ins", "cons"].map(String::from).to_vec();
        h.extend(self.rows[0].report.per_class.iter().map(|c| c.name.clone()));
        h.push("mAP".into());
        h
    }

    fn cells(&self, row: &AblationRow, fmt: &dyn Fn(f64) -> String) -> Vec<String> {
        let tick = |b: bool| if b { "x".to_string() } else { String::new() };
        let mut c = vec![tick(row.mask.use_img), tick(row.mask.use_ins), tick(row.mask.use_cst)];
        c.extend(row.report.per_class.iter().map(|p| p.ap.map_or(String::new(), fmt)));
        c.push(fmt(row.report.map));
        c
    }

    /// AP values as fractions in full precision; an empty cell is an unset switch or a class without gt.
    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",") + "\n";
        for r in &self.rows {
            s.push_str(&(self.cells(r, &|v| format!("{v}")).join(",") + "\n"));
        }
        s
    }

    /// Aligned columns, AP in percent.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let body: Vec<Vec<String>> = self.rows.iter().map(|r| self.cells(r, &|v| format!("{:.2}", 100.0 * v))).collect();
        let widths: Vec<usize> =
            (0..header.len()).map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0)).collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string() + "\n"
        };
        let mut s = line(&header);
        s.push_str(&(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n"));
        for r in &body {
            s.push_str(&line(r));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(aps: [Option<f64>; 3]) -> EvalReport {
        let per_class: Vec<ClassAp> =
            aps.iter().enumerate().map(|(i, &ap)| ClassAp { class: i + 1, name: class_name(i + 1), gt_count: 1, ap }).collect();
        let have: Vec<f64> = aps.iter().flatten().copied().collect();
        EvalReport {
            per_class,
            map: have.iter().sum::<f64>() / have.len() as f64,
            detection_count: 0,
            dataset_digest: String::new(),
            model_digest: None,
        }
    }

    #[test]
    fn map_skips_classes_without_gt() {
        let d = vec![vec![Detection { bbox: Rect::new(0.0, 0.0, 10.0, 10.0), category: 1, score: 0.9 }]];
        let gt = vec![vec![(Rect::new(0.0, 0.0, 10.0, 10.0), 1), (Rect::new(20.0, 20.0, 30.0, 30.0), 2)]];
        let (per, map) = evaluate_detections(&d, &gt, 3, 0.5);
        assert_eq!(per[0].ap, Some(1.0));
        assert_eq!(per[1].ap, Some(0.0));
        assert_eq!(per[2].ap, None);
        assert_eq!(map, 0.5);
    }

    #[test]
    fn table_layout() {
        let reports: Vec<(AblationMask, EvalReport)> = AblationMask::TABLE
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &m)| (m, report([Some(0.1 * i as f64), Some(0.5), Some(0.3)])))
            .collect();
        let t = ablation_table(reports).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "img,ins,cons,circle,square,triangle,mAP");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with(",,,"));
        assert!(lines[5].starts_with("x,x,x,"));
        for (row, line) in t.rows.iter().zip(&lines[1..]) {
            let v: Vec<f64> = line.split(',').skip(3).map(|c| c.parse().unwrap()).collect();
            assert!(((v[0] + v[1] + v[2]) / 3.0 - v[3]).abs() < 1e-12);
            assert_eq!(v[3], row.report.map);
        }
        let text = t.to_text();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().contains("cons"));
    }

    #[test]
    fn missing_row_is_an_error() {
        let reports = vec![(AblationMask::BASELINE, report([Some(0.1); 3]))];
        assert!(matches!(ablation_table(reports), Err(EvalError::MissingRow(_))));
    }

    #[test]
    fn sweep_csv_shape() {
        let pts: Vec<ScalePoint> = ["none", "img"]
            .iter()
            .flat_map(|m| [0.5f32, 1.0].map(|s| ScalePoint { model: m.to_string(), scale: s, map: 0.25 }))
            .collect();
        assert_eq!(sweep_csv(&pts).lines().count(), 1 + 4);
    }
}
