use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dafrcnn"));
    c.env_remove("DA_DETECT_THREADS").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Tiny source and target sets for fast end-to-end runs.
fn tiny_data(dir: &Path) -> (String, String) {
    let (s, t) = (p(dir, "s.shpw"), p(dir, "t.shpw"));
    ok(&["gen-data", "--out", &s, "--num-images", "6", "--seed", "1", "--image-size", "48"]);
    ok(&["gen-data", "--out", &t, "--num-images", "6", "--seed", "2", "--image-size", "48", "--domain", "target", "--shift", "style", "--intensity", "0.8"]);
    (s, t)
}

#[test]
fn gen_data_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n).join("d.shpw")).collect();
    for o in &outs {
        std::fs::create_dir_all(o.parent().unwrap()).unwrap();
        ok(&["gen-data", "--shift", "fog", "--intensity", "0.6", "--seed", "7", "--num-images", "5", "--out", o.to_str().unwrap()]);
    }
    assert_eq!(read(&outs[0]), read(&outs[1]));
    for suffix in [".manifest.json", ".run.json"] {
        let names: Vec<PathBuf> = outs.iter().map(|o| o.with_file_name(format!("d.shpw{suffix}"))).collect();
        let (a, b) = (String::from_utf8(read(&names[0])).unwrap(), String::from_utf8(read(&names[1])).unwrap());
        // Sidecars echo their own output path; everything else must match.
        assert_eq!(a.replace("/a/", "/x/"), b.replace("/b/", "/x/"), "{suffix} differs");
    }
}

#[test]
fn baseline_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = tiny_data(dir.path());
    let ck = p(dir.path(), "base.dafr");
    ok(&["train", "--source", &s, "--target", &t, "--out", &ck, "--ablation", "", "--iters", "8", "--lr-drop", "6"]);
    let log = String::from_utf8(read(format!("{ck}.metrics.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iter,lr,l_rpn,l_roi,l_img,l_ins,l_cst,total"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(&r[4..7], &["0", "0", "0"], "baseline logged an adaptation term");
    }
    let sidecar: serde_json::Value = serde_json::from_slice(&read(format!("{ck}.run.json"))).unwrap();
    assert_eq!(sidecar["effective_config"]["train"]["ablation"]["use_img"], false);
    assert_eq!(sidecar["inputs"].as_array().unwrap().len(), 2);

    let report = p(dir.path(), "report.json");
    let o = ok(&["eval", "--checkpoint", &ck, "--data", &t, "--out", &report]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));
    let r: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(r["per_class"].as_array().unwrap().len(), 3);
    assert!(r["map"].as_f64().unwrap() >= 0.0);
}

#[test]
fn resume_appends_to_an_identical_log() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = tiny_data(dir.path());
    let full = p(dir.path(), "full.dafr");
    let part = p(dir.path(), "part.dafr");
    let common = ["--source", &s, "--target", &t, "--ablation", "img,ins", "--lr-drop", "4", "--seed", "3"];
    ok(&[&["train", "--out", &full, "--iters", "6"][..], &common].concat());
    ok(&[&["train", "--out", &part, "--iters", "6", "--stop-at", "3"][..], &common].concat());
    assert_eq!(String::from_utf8(read(format!("{part}.metrics.csv"))).unwrap().lines().count(), 4);
    ok(&["train", "--source", &s, "--target", &t, "--out", &part, "--resume", &part]);
    assert_eq!(read(format!("{full}.metrics.csv")), read(format!("{part}.metrics.csv")));
    assert_eq!(read(&full), read(&part));
}

#[test]
fn ablation_writes_the_five_row_table_and_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = tiny_data(dir.path());
    let mut tables = Vec::new();
    for threads in ["1", "3"] {
        let out = p(dir.path(), &format!("tables{threads}"));
        let o = bin()
            .env("DA_DETECT_THREADS", threads)
            .args(["ablation", "--source", &s, "--target", &t, "--eval", &t, "--out", &out, "--iters", "4", "--lr-drop", "3"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = String::from_utf8(read(format!("{out}/table.csv"))).unwrap();
        tables.push((csv, read(format!("{out}/img_ins_cst.dafr"))));
        for name in ["table.txt", "reports.json", "run.json", "baseline.metrics.csv"] {
            assert!(Path::new(&out).join(name).exists(), "missing {name}");
        }
    }
    assert_eq!(tables[0], tables[1]);
    let csv = &tables[0].0;
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "img,ins,cons,circle,square,triangle,mAP");
    assert_eq!(lines.len(), 6);
    let ticks: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(ticks, [",,", "x,,", ",x,", "x,x,", "x,x,x"]);
}

#[test]
fn analyses_write_charts_and_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = tiny_data(dir.path());
    let ck = p(dir.path(), "m.dafr");
    ok(&["train", "--source", &s, "--target", &t, "--out", &ck, "--iters", "3", "--lr-drop", "2"]);
    let model = format!("full={ck}");

    let err = p(dir.path(), "err");
    ok(&["analyze-errors", "--model", &model, "--data", &t, "--out", &err, "--top-r", "20"]);
    let csv = String::from_utf8(read(format!("{err}/errors.csv"))).unwrap();
    assert_eq!(csv.lines().next(), Some("model,correct,mislocalized,background,total"));
    assert!(String::from_utf8(read(format!("{err}/errors.svg"))).unwrap().starts_with("<svg"));

    let sw = p(dir.path(), "sweep");
    ok(&["scale-sweep", "--model", &model, "--data", &t, "--out", &sw, "--scales", "0.5,1"]);
    let csv = String::from_utf8(read(format!("{sw}/sweep.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("full,0.5,"));
    assert!(String::from_utf8(read(format!("{sw}/sweep.svg"))).unwrap().contains("<polyline"));

    let pq = p(dir.path(), "pq.csv");
    ok(&["proposal-quality", "--model", &model, "--data", &t, "--out", &pq, "--top-p", "16"]);
    let csv = String::from_utf8(read(&pq)).unwrap();
    assert!(csv.starts_with("model,top_p,mean_best_overlap\nfull,16,"));

    let feats = p(dir.path(), "f.json");
    let d1 = p(dir.path(), "d1.json");
    let d2 = p(dir.path(), "d2.json");
    // gen-data twice more so each domain has the 10 vectors the estimator needs.
    let (s2, t2) = (p(dir.path(), "s2.shpw"), p(dir.path(), "t2.shpw"));
    ok(&["gen-data", "--out", &s2, "--num-images", "12", "--seed", "5", "--image-size", "48"]);
    ok(&["gen-data", "--out", &t2, "--num-images", "12", "--seed", "6", "--image-size", "48", "--domain", "target", "--shift", "style", "--intensity", "0.8"]);
    ok(&["divergence", "--checkpoint", &ck, "--source", &s2, "--target", &t2, "--save-features", &feats, "--out", &d1]);
    ok(&["divergence", "--features", &feats, "--out", &d2]);
    let (a, b): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&read(&d1)).unwrap(), serde_json::from_slice(&read(&d2)).unwrap());
    assert_eq!(a, b);
    let dh = a["d_h"].as_f64().unwrap();
    assert!((0.0..=2.0).contains(&dh));
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(run(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--source", "a", "--target", "b", "--out", "c", "--ablation", "cst"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--checkpoint", "c", "--data", "d", "--set", "train.nope=1"]).status.code(), Some(1));
    let o = run(&["eval", "--checkpoint", "/nonexistent/c.dafr", "--data", "/nonexistent/d.shpw"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().env("DA_DETECT_THREADS", "0").args(["scale-sweep", "--model", "m", "--data", "d", "--out", "o"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_lists_defaults_for_every_subcommand() {
    for sub in ["gen-data", "train", "eval", "ablation", "analyze-errors", "scale-sweep", "proposal-quality", "divergence"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub} --help");
        let text = String::from_utf8(o.stdout).unwrap();
        for needle in ["[train]", "lambda = 0.1", "total_iters = 2000", "[data.shift]", "top_p = 64", "DA_DETECT_THREADS"] {
            assert!(text.contains(needle), "{sub} --help lacks {needle}");
        }
    }
}

#[test]
fn config_file_and_overrides_reach_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.toml");
    std::fs::write(&cfg, "[data]\nnum_images = 3\nseed = 11\n[data.shift]\nkind = \"fog\"\nintensity = 0.5\n").unwrap();
    let out = p(dir.path(), "d.shpw");
    ok(&["gen-data", "--config", &cfg, "--set", "data.image_size=40", "--out", &out]);
    let side: serde_json::Value = serde_json::from_slice(&read(format!("{out}.run.json"))).unwrap();
    let data = &side["effective_config"]["data"];
    assert_eq!(data["num_images"], 3);
    assert_eq!(data["seed"], 11);
    assert_eq!(data["image_size"], 40);
    assert_eq!(data["shift"]["kind"], "fog");
    assert_eq!(side["tool_version"], env!("CARGO_PKG_VERSION"));
}
