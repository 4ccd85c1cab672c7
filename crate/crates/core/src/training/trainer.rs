use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptation::{
    consistency_loss, image_domain_head, image_domain_loss, instance_domain_head, instance_domain_loss, total_loss,
    DomainLabel, LossBreakdown,
};
use crate::autodiff::{Tape, Var};
use crate::detector::{
    compute_detection_loss, init_params, proposals_from_outputs, roi_head, DetectorConfig, ImageForward, ParamStore,
};
use crate::geometry::Rect;
use crate::synthdata::{Dataset, Sample};
use crate::training::batch::{batch_indices, derive_seed};
use crate::training::{
    clip_global_norm, compose_batch, lr_at, sgd_step, Checkpoint, DatasetDigests, TrainConfig, TrainError,
};

/// Header of the metrics CSV.
pub const LOG_HEADER: &str = "iter,lr,l_rpn,l_roi,l_img,l_ins,l_cst,total";

const INIT_STREAM: u64 = 0x494e_4954;
const STEP_STREAM: u64 = 0x5354_4550;

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f32,
    pub losses: LossBreakdown,
}

impl LogRow {
    /// CSV line without newline. Floats print in shortest round-trip form, so
    /// equal lines mean bitwise-equal values.
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{},{},{}", self.iter, self.lr, l.l_rpn, l.l_roi, l.l_img, l.l_ins, l.l_cst, l.total)
    }

    pub fn parse(line: &str) -> Result<Self, TrainError> {
        let bad = || TrainError::Config(format!("malformed log row {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f32>().map_err(|_| bad());
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: num(1)?,
            losses: LossBreakdown {
                l_rpn: num(2)?,
                l_roi: num(3)?,
                l_img: num(4)?,
                l_ins: num(5)?,
                l_cst: num(6)?,
                total: num(7)?,
            },
        })
    }
}

/// What one optimization step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub row: LogRow,
    pub source_index: usize,
    pub target_index: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
    /// Largest |gradient| over the domain-head parameters.
    pub domain_grad_max: f32,
    /// The target image produced no proposals for the instance head.
    pub no_target_rois: bool,
}

/// Final state and full log of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<LogRow>,
    /// Largest domain-head |gradient| seen over the run.
    pub domain_grad_max: f32,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    iter: usize,
    lr: f32,
    source_index: usize,
    target_index: usize,
    losses: LossBreakdown,
    grad_norms: Vec<(&'a str, f64)>,
    source_image_shape: &'a [usize],
    source_image: &'a [f32],
    target_image_shape: &'a [usize],
    target_image: &'a [f32],
}

/// Training state over borrowed source and target datasets.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    det: DetectorConfig,
    source: &'a Dataset,
    target: &'a Dataset,
    params: ParamStore,
    velocity: Vec<Vec<f32>>,
    iter: usize,
    datasets: DatasetDigests,
    dump_dir: Option<PathBuf>,
}

fn hex(d: u64) -> String {
    format!("{d:016x}")
}

impl<'a> Trainer<'a> {
    /// Fresh parameters from `cfg.seed`, zero momentum.
    pub fn new(cfg: TrainConfig, det: DetectorConfig, source: &'a Dataset, target: &'a Dataset) -> Result<Self, TrainError> {
        let params = init_params(&det, derive_seed(cfg.seed, INIT_STREAM, 0));
        let velocity = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self::assemble(cfg, det, source, target, params, velocity, 0)
    }

    /// Continues from a checkpoint with the config stored in it.
    pub fn resume(ckpt: Checkpoint, source: &'a Dataset, target: &'a Dataset) -> Result<Self, TrainError> {
        let t = Self::assemble(ckpt.train_config, ckpt.detector_config, source, target, ckpt.params, ckpt.velocity, ckpt.iteration)?;
        if t.datasets != ckpt.datasets {
            log::warn!("resuming on datasets that differ from the checkpoint's");
        }
        Ok(t)
    }

    fn assemble(
        cfg: TrainConfig,
        det: DetectorConfig,
        source: &'a Dataset,
        target: &'a Dataset,
        params: ParamStore,
        velocity: Vec<Vec<f32>>,
        iter: usize,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        det.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(TrainError::Config("source and target datasets must be non-empty".into()));
        }
        if source.samples.iter().any(|s| s.domain() != DomainLabel::Source) {
            return Err(TrainError::Config("source dataset contains target-domain samples".into()));
        }
        if target.samples.iter().any(|s| s.domain() != DomainLabel::Target) {
            return Err(TrainError::Config("target dataset contains source-domain samples".into()));
        }
        let datasets = DatasetDigests { source: hex(source.digest()), target: hex(target.digest()) };
        Ok(Self { cfg, det, source, target, params, velocity, iter, datasets, dump_dir: None })
    }

    /// Where to write the batch dump if a loss or gradient goes non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn detector_config(&self) -> &DetectorConfig {
        &self.det
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            velocity: self.velocity.clone(),
            iteration: self.iter,
            train_config: self.cfg.clone(),
            detector_config: self.det.clone(),
            datasets: self.datasets.clone(),
        }
    }

    /// One SGD step on the next source/target pair.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let iter = self.iter;
        let lr = lr_at(iter, &self.cfg)?;
        let (source_index, target_index) = batch_indices(self.source.len(), self.target.len(), iter, self.cfg.seed);
        let (src, tgt) = compose_batch(self.source, self.target, iter, self.cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STEP_STREAM, iter as u64));

        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let fs = ImageForward::run(&mut tape, &p, &self.det, src.image())?;
        let det = compute_detection_loss(&mut tape, &p, &self.det, &src, &fs, &mut rng)?;
        let mask = self.cfg.ablation;
        let reduction = self.cfg.reduction;
        let mut total = tape.add(det.l_rpn, det.l_roi)?;
        let (mut l_img, mut l_ins, mut l_cst) = (None, None, None);
        let mut no_target_rois = false;

        if mask.any() {
            let ft = ImageForward::run(&mut tape, &p, &self.det, tgt.image())?;
            let labels = [DomainLabel::Source, DomainLabel::Target];
            let maps = if mask.use_img || mask.use_cst {
                Some([image_domain_head(&mut tape, &p, fs.features, true)?, image_domain_head(&mut tape, &p, ft.features, true)?])
            } else {
                None
            };
            let ins = if mask.use_ins || mask.use_cst {
                let s = instance_domain_head(&mut tape, &p, det.roi_out.features, true)?;
                let props = proposals_from_outputs(
                    tape.data(ft.rpn_logits),
                    tape.data(ft.rpn_deltas),
                    &ft.anchors,
                    ft.image_hw,
                    &self.det,
                    self.cfg.target_rois,
                );
                let t = if props.is_empty() {
                    no_target_rois = true;
                    None
                } else {
                    let boxes: Vec<Rect<f32>> = props.iter().map(|q| q.bbox).collect();
                    let out = roi_head(&mut tape, &p, &self.det, ft.features, &boxes)?;
                    Some(instance_domain_head(&mut tape, &p, out.features, true)?)
                };
                Some([Some(s), t])
            } else {
                None
            };
            if mask.use_img {
                l_img = Some(image_domain_loss(&mut tape, maps.as_ref().expect("maps built"), &labels, reduction)?);
            }
            if mask.use_ins {
                l_ins = Some(instance_domain_loss(&mut tape, ins.as_ref().expect("ROIs built"), &labels, reduction)?.loss);
            }
            if mask.use_cst {
                l_cst = Some(consistency_loss(
                    &mut tape,
                    maps.as_ref().expect("maps built"),
                    ins.as_ref().expect("ROIs built"),
                    self.cfg.stop_image_side,
                    reduction,
                )?);
            }
            let mut adapt: Option<Var> = None;
            for v in [l_img, l_ins, l_cst].into_iter().flatten() {
                adapt = Some(match adapt {
                    Some(a) => tape.add(a, v)?,
                    None => v,
                });
            }
            if let Some(a) = adapt {
                let weighted = tape.scale(a, self.cfg.lambda)?;
                total = tape.add(total, weighted)?;
            }
        }

        let value = |tape: &Tape<f32>, v: Option<Var>| v.map_or(0.0, |v| tape.data(v)[0]);
        let losses = total_loss(
            Some((value(&tape, Some(det.l_rpn)), value(&tape, Some(det.l_roi)))),
            value(&tape, l_img),
            value(&tape, l_ins),
            value(&tape, l_cst),
            self.cfg.lambda,
            mask,
        );
        tape.backward(total)?;
        let mut grads = p.grads(&tape);
        let row = LogRow { iter, lr, losses };

        if !losses.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(self.abort(&row, &src, &tgt, source_index, target_index, &grads));
        }
        let domain_grad_max = self
            .params
            .names()
            .iter()
            .zip(&grads)
            .filter(|(n, _)| n.starts_with("da."))
            .flat_map(|(_, g)| g.iter())
            .fold(0.0f32, |m, g| m.max(g.abs()));
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        sgd_step(self.params.tensors_mut(), &grads, &mut self.velocity, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        self.iter += 1;
        Ok(StepReport { row, source_index, target_index, grad_norm, domain_grad_max, no_target_rois })
    }

    fn abort(
        &self,
        row: &LogRow,
        src: &Sample,
        tgt: &Sample,
        source_index: usize,
        target_index: usize,
        grads: &[Vec<f32>],
    ) -> TrainError {
        let grad_norms = self
            .params
            .names()
            .iter()
            .zip(grads)
            .map(|(n, g)| (n.as_str(), g.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()))
            .collect();
        let diag = Diagnostic {
            iter: row.iter,
            lr: row.lr,
            source_index,
            target_index,
            losses: row.losses,
            grad_norms,
            source_image_shape: src.image().shape(),
            source_image: src.image().data(),
            target_image_shape: tgt.image().shape(),
            target_image: tgt.image().data(),
        };
        let mut detail = format!("losses {:?}, source image {source_index}, target image {target_index}", row.losses);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite_iter{}.json", row.iter));
            match write_json(&path, &diag) {
                Ok(()) => detail.push_str(&format!("; batch dumped to {}", path.display())),
                Err(e) => detail.push_str(&format!("; dump failed: {e}")),
            }
        }
        log::error!("aborting at iteration {}: {detail}", row.iter);
        TrainError::NonFinite { iter: row.iter, detail }
    }

    /// Steps until `end` (capped at `total_iters`), writing one CSV line per
    /// step to `log` and calling `on_eval` after every `eval_every`-th step.
    pub fn run_until(
        &mut self,
        end: usize,
        mut log: Option<&mut dyn Write>,
        on_eval: &mut dyn FnMut(usize, &ParamStore) -> Result<(), TrainError>,
    ) -> Result<(Vec<LogRow>, f32), TrainError> {
        let end = end.min(self.cfg.total_iters);
        let mut rows = Vec::with_capacity(end.saturating_sub(self.iter));
        let mut grad_max = 0.0f32;
        while self.iter < end {
            let r = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", r.row.to_csv())?;
            }
            grad_max = grad_max.max(r.domain_grad_max);
            rows.push(r.row);
            if self.cfg.eval_every > 0 && self.iter.is_multiple_of(self.cfg.eval_every) {
                on_eval(self.iter, &self.params)?;
            }
        }
        Ok((rows, grad_max))
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), TrainError> {
    std::fs::write(path, serde_json::to_vec(v)?)?;
    Ok(())
}

/// Full run from fresh parameters; the CSV log, header included, goes to `log`.
pub fn train(
    cfg: &TrainConfig,
    det: &DetectorConfig,
    source: &Dataset,
    target: &Dataset,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(cfg.clone(), det.clone(), source, target)?;
    let mut log = log;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let (rows, domain_grad_max) = t.run_until(cfg.total_iters, log, &mut |_, _| Ok(()))?;
    Ok(TrainOutcome { checkpoint: t.checkpoint(), rows, domain_grad_max })
}
