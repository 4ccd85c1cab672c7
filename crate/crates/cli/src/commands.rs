use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dafrcnn::adaptation::{estimate_h_divergence, AblationMask, HDivergenceEstimate};
use dafrcnn::detector::{init_params, pooled_features, ParamStore};
use dafrcnn::evaluation::{
    ablation_table, categorize_detections, detect_dataset, evaluate_detections, ground_truth, propose_dataset,
    proposal_mean_best_overlap, scale_sweep, sweep_csv, EvalReport, ErrorTaxonomy,
};
use dafrcnn::evaluation::svg::{line_chart, stacked_bar_chart};
use dafrcnn::synthdata::{make_dataset, read_dataset, write_dataset, Dataset};
use dafrcnn::training::{
    file_digest, load_checkpoint, load_for_inference, save_checkpoint, train, Checkpoint, TrainError, Trainer, LOG_HEADER,
};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::config::{ConfigBuilder, RunConfig};
use crate::jobs::{job_threads, run_jobs};
use crate::sidecar::{sidecar_path, write_sidecar};
use crate::{runtime, AblationArgs, AnalyzeArgs, Cli, CliError, Command, DivergenceArgs, EvalArgs, GenDataArgs, ProposalArgs, SweepArgs, TrainArgs};

/// Iterations between progress log lines during training.
const PROGRESS_EVERY: usize = 100;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut b = ConfigBuilder::new(cli.config.as_deref())?;
    for s in &cli.set {
        b.set_assignment(s)?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(b, a),
        Command::Train(a) => train_cmd(b, a),
        Command::Eval(a) => eval_cmd(b, a),
        Command::Ablation(a) => ablation_cmd(b, a),
        Command::AnalyzeErrors(a) => analyze_cmd(b, a),
        Command::ScaleSweep(a) => sweep_cmd(b, a),
        Command::ProposalQuality(a) => proposal_cmd(b, a),
        Command::Divergence(a) => divergence_cmd(b, a),
    }
}

fn int(v: Option<u64>) -> Result<Option<Value>, CliError> {
    v.map(|x| i64::try_from(x).map(Value::Integer).map_err(|_| CliError::Usage(format!("{x} is out of range"))))
        .transpose()
}

fn set_ablation(b: &mut ConfigBuilder, flag: Option<&str>) -> Result<(), CliError> {
    if let Some(s) = flag {
        let m = AblationMask::parse(s).map_err(|e| CliError::Usage(e.to_string()))?;
        b.set("train.ablation", Value::try_from(m).map_err(runtime("ablation"))?)?;
    }
    Ok(())
}

fn set_training_flags(b: &mut ConfigBuilder, lambda: Option<f64>, iters: Option<u64>, lr_drop: Option<u64>, seed: Option<u64>) -> Result<(), CliError> {
    b.set_opt("train.lambda", lambda)?;
    b.set_opt("train.total_iters", int(iters)?)?;
    b.set_opt("train.lr_drop_iter", int(lr_drop)?)?;
    b.set_opt("train.seed", int(seed)?)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(runtime(&format!("reading {}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(runtime(&format!("writing {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(runtime("serializing"))?;
    write_text(path, &(text + "\n"))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(runtime(&format!("creating {}", dir.display())))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

struct Model {
    name: String,
    path: PathBuf,
    ckpt: Checkpoint,
}

/// `NAME=PATH`, or a bare path named by its file stem.
fn load_model(spec: &str) -> Result<Model, CliError> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(spec);
            let n = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (n, p)
        }
    };
    let ckpt = load_checkpoint(&path).map_err(runtime(&format!("loading {}", path.display())))?;
    Ok(Model { name, path, ckpt })
}

fn load_models(specs: &[String]) -> Result<Vec<Model>, CliError> {
    let models = specs.iter().map(|s| load_model(s)).collect::<Result<Vec<_>, _>>()?;
    for (i, m) in models.iter().enumerate() {
        if models[..i].iter().any(|o| o.name == m.name) {
            return Err(CliError::Usage(format!("model name {:?} given twice", m.name)));
        }
    }
    Ok(models)
}

fn gen_data(mut b: ConfigBuilder, a: &GenDataArgs) -> Result<(), CliError> {
    b.set_opt("data.shift.kind", a.shift.clone())?;
    b.set_opt("data.shift.intensity", a.intensity)?;
    b.set_opt("data.shift.scale_factor", a.scale_factor)?;
    b.set_opt("data.seed", int(a.seed)?)?;
    b.set_opt("data.num_images", int(a.num_images)?)?;
    b.set_opt("data.image_size", int(a.image_size)?)?;
    b.set_opt("data.domain", a.domain.clone())?;
    let cfg = b.build()?;
    let ds = make_dataset(&cfg.data).map_err(runtime("rendering"))?;
    let manifest = write_dataset(&a.out, &ds).map_err(runtime(&format!("writing {}", a.out.display())))?;
    let manifest_path = dafrcnn::synthdata::manifest_path(&a.out);
    write_sidecar(&sidecar_path(&a.out), "gen-data", &cfg, &[], &[a.out.clone(), manifest_path])?;
    println!("wrote {} images to {} (digest {})", manifest.sample_count, a.out.display(), manifest.digest);
    Ok(())
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>, CliError> {
    let ctx = format!("opening {}", path.display());
    if append && path.exists() {
        let f = OpenOptions::new().append(true).open(path).map_err(runtime(&ctx))?;
        return Ok(BufWriter::new(f));
    }
    let mut w = BufWriter::new(File::create(path).map_err(runtime(&ctx))?);
    writeln!(w, "{header}").map_err(runtime(&ctx))?;
    Ok(w)
}

fn train_cmd(mut b: ConfigBuilder, a: &TrainArgs) -> Result<(), CliError> {
    set_ablation(&mut b, a.ablation.as_deref())?;
    set_training_flags(&mut b, a.lambda, a.iters, a.lr_drop, a.seed)?;
    let mut cfg = b.build()?;
    let source = load_data(&a.source)?;
    let target = load_data(&a.target)?;
    let eval_set = a.eval_data.as_deref().map(load_data).transpose()?;
    let trainer = match &a.resume {
        Some(r) => {
            let ckpt = load_checkpoint(r).map_err(runtime(&format!("loading {}", r.display())))?;
            if ckpt.train_config != cfg.train || ckpt.detector_config != cfg.detector {
                log::warn!("resuming with the configuration stored in {}, not the command-line one", r.display());
            }
            Trainer::resume(ckpt, &source, &target)
        }
        None => Trainer::new(cfg.train.clone(), cfg.detector.clone(), &source, &target),
    };
    let mut trainer = trainer.map_err(train_error)?.with_dump_dir(parent_dir(&a.out));
    cfg.train = trainer.config().clone();
    cfg.detector = trainer.detector_config().clone();

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    let append = a.resume.is_some();
    let mut log = open_log(&log_path, LOG_HEADER, append)?;
    let evals_path = with_suffix(&a.out, ".evals.csv");
    let mut evals = match &eval_set {
        Some(_) if cfg.train.eval_every > 0 => Some(open_log(&evals_path, "iter,map", append)?),
        Some(_) => {
            log::warn!("--eval-data given but train.eval_every is 0; no snapshots will be taken");
            None
        }
        None => None,
    };
    let det_cfg = cfg.detector.clone();
    let iou = cfg.eval.iou;
    let mut on_eval = |iter: usize, params: &ParamStore| -> Result<(), TrainError> {
        if let (Some(ds), Some(w)) = (&eval_set, evals.as_mut()) {
            let dets = detect_dataset(params, &det_cfg, ds).map_err(|e| TrainError::Shape(e.to_string()))?;
            let (_, map) = evaluate_detections(&dets, &ground_truth(ds), det_cfg.num_classes, iou);
            log::info!("iteration {iter}: eval mAP {map:.4}");
            writeln!(w, "{iter},{map}")?;
        }
        Ok(())
    };
    let stop = a.stop_at.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.iteration() < stop {
        let end = ((trainer.iteration() / PROGRESS_EVERY + 1) * PROGRESS_EVERY).min(stop);
        let (rows, _) = trainer.run_until(end, Some(&mut log), &mut on_eval).map_err(train_error)?;
        if let Some(r) = rows.last() {
            log::info!("iteration {}: total loss {:.4}", r.iter, r.losses.total);
        }
    }
    log.flush().map_err(runtime("flushing log"))?;
    if let Some(w) = evals.as_mut() {
        w.flush().map_err(runtime("flushing evals"))?;
    }
    save_checkpoint(&trainer.checkpoint(), &a.out).map_err(runtime(&format!("writing {}", a.out.display())))?;

    let mut inputs: Vec<&Path> = vec![&a.source, &a.target];
    inputs.extend(a.resume.as_deref());
    inputs.extend(a.eval_data.as_deref());
    let mut outputs = vec![a.out.clone(), log_path];
    if evals.is_some() {
        outputs.push(evals_path);
    }
    write_sidecar(&sidecar_path(&a.out), "train", &cfg, &inputs, &outputs)?;
    println!("trained {} ({} iterations) -> {}", cfg.train.ablation.label(), trainer.iteration(), a.out.display());
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(format!("invalid training config: {m}")),
        other => CliError::Runtime(other.to_string()),
    }
}

fn report_for(ckpt: &Checkpoint, ds: &Dataset, iou: f32, model_digest: Option<String>) -> Result<EvalReport, CliError> {
    let dets = detect_dataset(&ckpt.params, &ckpt.detector_config, ds).map_err(runtime("detecting"))?;
    let (per_class, map) = evaluate_detections(&dets, &ground_truth(ds), ckpt.detector_config.num_classes, iou);
    Ok(EvalReport {
        per_class,
        map,
        detection_count: dets.iter().map(Vec::len).sum(),
        dataset_digest: format!("{:016x}", ds.digest()),
        model_digest,
    })
}

fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    for c in &r.per_class {
        let ap = c.ap.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        s.push_str(&format!("{:<10} {:>7}  ({} gt)\n", c.name, ap, c.gt_count));
    }
    s.push_str(&format!("{:<10} {:>7.2}\n", "mAP", 100.0 * r.map));
    s
}

fn eval_cmd(mut b: ConfigBuilder, a: &EvalArgs) -> Result<(), CliError> {
    set_ablation(&mut b, a.ablation.as_deref())?;
    let cfg = b.build()?;
    let ctx = format!("loading {}", a.checkpoint.display());
    let ckpt = if a.ablation.is_some() {
        load_for_inference(&a.checkpoint, &cfg.train).map_err(runtime(&ctx))?.0
    } else {
        load_checkpoint(&a.checkpoint).map_err(runtime(&ctx))?
    };
    let ds = load_data(&a.data)?;
    let digest = file_digest(&a.checkpoint).map_err(runtime(&ctx))?;
    let report = report_for(&ckpt, &ds, cfg.eval.iou, Some(digest))?;
    print!("{}", report_text(&report));
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        write_sidecar(&sidecar_path(out), "eval", &cfg, &[&a.checkpoint, &a.data], std::slice::from_ref(out))?;
    }
    Ok(())
}

fn slug(mask: &AblationMask) -> String {
    mask.label().replace('+', "_")
}

fn ablation_cmd(mut b: ConfigBuilder, a: &AblationArgs) -> Result<(), CliError> {
    set_training_flags(&mut b, a.lambda, a.iters, a.lr_drop, a.seed)?;
    let cfg = b.build()?;
    let threads = job_threads()?;
    ensure_dir(&a.out)?;
    let source = load_data(&a.source)?;
    let target = load_data(&a.target)?;
    let eval_set = load_data(&a.eval)?;
    let masks = AblationMask::TABLE;
    let results = run_jobs(masks.len(), threads, |i| {
        let mask = masks[i];
        let train_cfg = dafrcnn::training::TrainConfig { ablation: mask, ..cfg.train.clone() };
        let name = slug(&mask);
        let ckpt_path = a.out.join(format!("{name}.dafr"));
        let log_path = a.out.join(format!("{name}.metrics.csv"));
        let mut log = BufWriter::new(File::create(&log_path).map_err(runtime(&format!("creating {}", log_path.display())))?);
        log::info!("training {}", mask.label());
        let outcome = train(&train_cfg, &cfg.detector, &source, &target, Some(&mut log)).map_err(train_error)?;
        log.flush().map_err(runtime("flushing log"))?;
        save_checkpoint(&outcome.checkpoint, &ckpt_path).map_err(runtime(&format!("writing {}", ckpt_path.display())))?;
        let digest = file_digest(&ckpt_path).map_err(runtime("digest"))?;
        let report = report_for(&outcome.checkpoint, &eval_set, cfg.eval.iou, Some(digest))?;
        log::info!("{}: target mAP {:.4}", mask.label(), report.map);
        Ok((mask, report, vec![ckpt_path, log_path]))
    });
    let mut reports = Vec::with_capacity(masks.len());
    let mut outputs = Vec::new();
    for r in results {
        let (mask, report, files) = r?;
        reports.push((mask, report));
        outputs.extend(files);
    }
    let table = ablation_table(reports).map_err(runtime("building the table"))?;
    let csv = a.out.join("table.csv");
    let txt = a.out.join("table.txt");
    let json = a.out.join("reports.json");
    write_text(&csv, &table.to_csv())?;
    write_text(&txt, &table.to_text())?;
    write_json(&json, &table)?;
    outputs.extend([csv, txt, json]);
    write_sidecar(&a.out.join("run.json"), "ablation", &cfg, &[&a.source, &a.target, &a.eval], &outputs)?;
    print!("{}", table.to_text());
    Ok(())
}

#[derive(Serialize)]
struct ErrorRow {
    model: String,
    #[serde(flatten)]
    counts: ErrorTaxonomy,
}

fn analyze_cmd(mut b: ConfigBuilder, a: &AnalyzeArgs) -> Result<(), CliError> {
    b.set_opt("eval.top_r", int(a.top_r)?)?;
    let cfg = b.build()?;
    let threads = job_threads()?;
    let models = load_models(&a.models)?;
    let ds = load_data(&a.data)?;
    let gt = ground_truth(&ds);
    let top_r = cfg.eval.top_r;
    let results = run_jobs(models.len(), threads, |i| {
        let m = &models[i];
        let dets = detect_dataset(&m.ckpt.params, &m.ckpt.detector_config, &ds).map_err(runtime("detecting"))?;
        Ok(categorize_detections(&dets, &gt, top_r))
    });
    let mut rows = Vec::with_capacity(models.len());
    for (m, r) in models.iter().zip(results) {
        rows.push(ErrorRow { model: m.name.clone(), counts: r? });
    }
    ensure_dir(&a.out)?;
    let mut csv = String::from("model,correct,mislocalized,background,total\n");
    for r in &rows {
        let c = &r.counts;
        csv.push_str(&format!("{},{},{},{},{}\n", r.model, c.correct, c.mislocalized, c.background, c.total()));
    }
    let fractions: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let t = r.counts.total().max(1) as f64;
            vec![r.counts.correct as f64 / t, r.counts.mislocalized as f64 / t, r.counts.background as f64 / t]
        })
        .collect();
    let svg = stacked_bar_chart(
        &format!("Top-{top_r} detections by error type"),
        "fraction of detections",
        &rows.iter().map(|r| r.model.clone()).collect::<Vec<_>>(),
        &["correct", "mislocalized", "background"].map(String::from),
        &fractions,
    );
    let csv_path = a.out.join("errors.csv");
    let svg_path = a.out.join("errors.svg");
    let json_path = a.out.join("errors.json");
    write_text(&csv_path, &csv)?;
    write_text(&svg_path, &svg)?;
    write_json(&json_path, &rows)?;
    let mut inputs: Vec<&Path> = models.iter().map(|m| m.path.as_path()).collect();
    inputs.push(&a.data);
    write_sidecar(&a.out.join("run.json"), "analyze-errors", &cfg, &inputs, &[csv_path, svg_path, json_path])?;
    print!("{csv}");
    Ok(())
}

fn sweep_cmd(mut b: ConfigBuilder, a: &SweepArgs) -> Result<(), CliError> {
    if let Some(s) = &a.scales {
        b.set("eval.scales", Value::Array(s.iter().map(|v| Value::Float(*v)).collect()))?;
    }
    let cfg = b.build()?;
    let threads = job_threads()?;
    let models = load_models(&a.models)?;
    let ds = load_data(&a.data)?;
    let scales = cfg.eval.scales.clone();
    let results = run_jobs(models.len(), threads, |i| {
        let m = &models[i];
        scale_sweep(&[(m.name.as_str(), &m.ckpt.params)], &m.ckpt.detector_config, &ds, &scales).map_err(runtime("sweeping"))
    });
    let mut points = Vec::new();
    let mut series = Vec::new();
    for (m, r) in models.iter().zip(results) {
        let pts = r?;
        series.push((m.name.clone(), pts.iter().map(|p| (p.scale as f64, p.map)).collect::<Vec<_>>()));
        points.extend(pts);
    }
    ensure_dir(&a.out)?;
    let csv_path = a.out.join("sweep.csv");
    let svg_path = a.out.join("sweep.svg");
    let csv = sweep_csv(&points);
    write_text(&csv_path, &csv)?;
    write_text(&svg_path, &line_chart("Target mAP against image scale", "scale factor", "mAP", &series))?;
    let mut inputs: Vec<&Path> = models.iter().map(|m| m.path.as_path()).collect();
    inputs.push(&a.data);
    write_sidecar(&a.out.join("run.json"), "scale-sweep", &cfg, &inputs, &[csv_path, svg_path])?;
    print!("{csv}");
    Ok(())
}

fn proposal_cmd(mut b: ConfigBuilder, a: &ProposalArgs) -> Result<(), CliError> {
    b.set_opt("eval.top_p", int(a.top_p)?)?;
    let cfg = b.build()?;
    let threads = job_threads()?;
    let models = load_models(&a.models)?;
    let ds = load_data(&a.data)?;
    let gt: Vec<Vec<_>> = ground_truth(&ds).into_iter().map(|g| g.into_iter().map(|(r, _)| r).collect()).collect();
    let top_p = cfg.eval.top_p;
    let results = run_jobs(models.len(), threads, |i| {
        let m = &models[i];
        let props = propose_dataset(&m.ckpt.params, &m.ckpt.detector_config, &ds, top_p).map_err(runtime("proposing"))?;
        Ok(proposal_mean_best_overlap(&props, &gt, top_p))
    });
    let mut csv = String::from("model,top_p,mean_best_overlap\n");
    for (m, r) in models.iter().zip(results) {
        let v = r?.map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!("{},{},{}\n", m.name, top_p, v));
    }
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(d)?;
    }
    write_text(&a.out, &csv)?;
    let mut inputs: Vec<&Path> = models.iter().map(|m| m.path.as_path()).collect();
    inputs.push(&a.data);
    write_sidecar(&sidecar_path(&a.out), "proposal-quality", &cfg, &inputs, std::slice::from_ref(&a.out))?;
    print!("{csv}");
    Ok(())
}

/// Pooled backbone features of both domains, as saved by `divergence --save-features`.
#[derive(Serialize, Deserialize)]
struct FeatureFile {
    source: Vec<Vec<f32>>,
    target: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct DivergenceOutput {
    source_count: usize,
    target_count: usize,
    #[serde(flatten)]
    estimate: HDivergenceEstimate,
}

fn features_of(params: &ParamStore, ds: &Dataset) -> Result<Vec<Vec<f32>>, CliError> {
    ds.samples.iter().map(|s| pooled_features(s.image(), params).map_err(runtime("extracting features"))).collect()
}

fn divergence_cmd(b: ConfigBuilder, a: &DivergenceArgs) -> Result<(), CliError> {
    let cfg: RunConfig = b.build()?;
    let mut inputs: Vec<&Path> = Vec::new();
    let features = if let Some(f) = &a.features {
        inputs.push(f);
        let text = std::fs::read_to_string(f).map_err(runtime(&format!("reading {}", f.display())))?;
        serde_json::from_str::<FeatureFile>(&text).map_err(runtime(&format!("parsing {}", f.display())))?
    } else {
        let (Some(src), Some(tgt)) = (&a.source, &a.target) else {
            return Err(CliError::Usage("give --features, or --source and --target with --checkpoint or --init".into()));
        };
        let params = match (&a.checkpoint, a.init) {
            (Some(c), _) => {
                inputs.push(c);
                load_checkpoint(c).map_err(runtime(&format!("loading {}", c.display())))?.params
            }
            (None, true) => init_params(&cfg.detector, cfg.train.seed),
            (None, false) => return Err(CliError::Usage("feature extraction needs --checkpoint or --init".into())),
        };
        inputs.extend([src.as_path(), tgt.as_path()]);
        let ff = FeatureFile { source: features_of(&params, &load_data(src)?)?, target: features_of(&params, &load_data(tgt)?)? };
        if let Some(p) = &a.save_features {
            write_json(p, &ff)?;
        }
        ff
    };
    let estimate = estimate_h_divergence(&features.source, &features.target).map_err(runtime("estimating divergence"))?;
    let out = DivergenceOutput { source_count: features.source.len(), target_count: features.target.len(), estimate };
    write_json(&a.out, &out)?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.save_features.clone().filter(|_| a.features.is_none()));
    write_sidecar(&sidecar_path(&a.out), "divergence", &cfg, &inputs, &outputs)?;
    println!(
        "d_H {:.4} (source error {:.4}, target error {:.4}; {} vs {} images)",
        estimate.d_h, estimate.err_source, estimate.err_target, out.source_count, out.target_count
    );
    Ok(())
}
