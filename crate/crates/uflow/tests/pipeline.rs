//! End-to-end runs of a tiny experiment: stage caching, record
//! reproducibility, determinism of the evaluation report, and the command
//! line producing the same artifacts as the library pipeline.

use std::path::Path;
use std::process::Command;

use uflow::config::{Config, ViewKind};
use uflow::dataset::{self, Split};
use uflow::eval;
use uflow::pipeline::{self, Layout};
use uflow::render::Sidecar;
use uflow::{checkpoint, train, uft};
use uflow_core::records::{mix_seed, RecordGenerator};

fn tiny(view: ViewKind) -> Config {
    let mut cfg = Config::smoke(view);
    cfg.data.n_train = 16;
    cfg.data.n_test = 3;
    cfg
}

fn uflow(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_uflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "uflow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_caches_stages_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ViewKind::Limited);
    let first = pipeline::run(&cfg, dir.path()).unwrap();
    let layout = Layout::new(dir.path());
    let report_bytes = std::fs::read(layout.report()).unwrap();
    assert_eq!(first.report.n_test, 3);
    assert_eq!(first.report.scenes.len(), 3);
    assert_eq!(first.report.view, "limited");
    assert_eq!(first.report.config_hash, cfg.hash());

    // the training logs have one line per epoch
    assert_eq!(train::read_log(&layout.unet()).unwrap().len(), cfg.unet.epochs);
    assert_eq!(train::read_log(&layout.flow()).unwrap().len(), cfg.flow.epochs);

    // a second run reuses every stage and reproduces the report byte for byte
    let mtime = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let ckpt = layout.unet().join(checkpoint::PARAMS);
    let before = mtime(&ckpt);
    let second = pipeline::run(&cfg, dir.path()).unwrap();
    assert_eq!(mtime(&ckpt), before, "U-Net stage was not re-run");
    assert_eq!(std::fs::read(layout.report()).unwrap(), report_bytes);
    assert_eq!(second.unet_sha256, first.unet_sha256);

    // evaluating in-process again gives the same text
    let again = eval::evaluate(&second.dataset, &second.models(), cfg.samples, cfg.seed).unwrap();
    assert_eq!(eval::report_json(&again).unwrap().as_bytes(), report_bytes.as_slice());

    // changing only the flow stage keeps data and U-Net
    let mut more = cfg.clone();
    more.flow.epochs += 1;
    let third = pipeline::run(&more, dir.path()).unwrap();
    assert_eq!(mtime(&ckpt), before);
    assert_eq!(third.unet_sha256, first.unet_sha256);
    assert_ne!(third.flow_sha256, first.flow_sha256);
}

#[test]
fn stored_records_are_reproducible_from_their_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ViewKind::Full);
    cfg.data.n_train = 3;
    cfg.data.n_test = 2;
    let manifest = dataset::generate(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 5);
    assert_eq!(manifest.records.iter().filter(|r| r.split == Split::Test).count(), 2);
    let ds = dataset::load(dir.path()).unwrap();
    let gen = RecordGenerator::new(cfg.record_config().unwrap()).unwrap();
    for rec in ds.train.iter().chain(&ds.test) {
        assert_eq!(rec.entry.seed, mix_seed(cfg.seed, rec.entry.index as u64));
        let fresh = gen.generate(rec.entry.seed).unwrap();
        assert_eq!(fresh.medium.c, rec.speed);
        assert_eq!(fresh.bp, rec.bp);
        let (shape, meas) = uft::load_complex(&dataset::record_path(dir.path(), rec.entry.index, "meas")).unwrap();
        assert_eq!(shape, vec![cfg.data.sensors, cfg.data.sensors]);
        assert_eq!(meas, fresh.clean.values);
    }
    // a different master seed gives different media
    let mut other = cfg.clone();
    other.seed += 1;
    let moved = RecordGenerator::new(other.record_config().unwrap())
        .unwrap()
        .generate(mix_seed(other.seed, 0))
        .unwrap();
    assert_ne!(moved.medium.c, ds.train[0].speed);
}

#[test]
fn command_line_stages_match_the_library_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny(ViewKind::Full);
    let cfg_path = root.join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let c = s(&cfg_path);
    let (data, unet, lat, flow) = (root.join("data"), root.join("unet"), root.join("lat"), root.join("flow"));

    uflow(&["--config", c, "generate-data", "--out", s(&data)]);
    uflow(&["--config", c, "train-unet", "--data", s(&data), "--out", s(&unet)]);
    uflow(&["--config", c, "extract-latents", "--unet", s(&unet), "--data", s(&data), "--out", s(&lat)]);
    uflow(&["--config", c, "train-flow", "--latents", s(&lat), "--out", s(&flow)]);
    let n = cfg.samples.to_string();
    let report = root.join("report.json");
    let ev = ["--deterministic", "evaluate", "--unet", s(&unet), "--flow", s(&flow), "--data", s(&data), "--n", &n];
    uflow(&[&ev[..], &["--out", s(&report)]].concat());
    let report2 = root.join("report2.json");
    uflow(&[&ev[..], &["--out", s(&report2)]].concat());
    let bytes = std::fs::read(&report).unwrap();
    assert_eq!(bytes, std::fs::read(&report2).unwrap(), "evaluate is byte-identical");

    // the library pipeline trains the same networks and writes the same report
    let lib = pipeline::run(&cfg, &root.join("lib")).unwrap();
    assert_eq!(checkpoint::read_meta(&unet).unwrap().params_sha256, lib.unet_sha256);
    assert_eq!(checkpoint::read_meta(&flow).unwrap().params_sha256, lib.flow_sha256);
    assert_eq!(bytes, std::fs::read(Layout::new(root.join("lib")).report()).unwrap());

    // posterior samples and their rendering
    let samples = root.join("samples");
    uflow(&["sample", "--unet", s(&unet), "--flow", s(&flow), "--data", s(&data), "--n", "5", "--out", s(&samples)]);
    let stack = uft::load_real(&samples.join("samples.uft")).unwrap();
    assert_eq!(stack.shape(), &[5, 64, 64]);
    let png = root.join("fig.png");
    uflow(&["render", "--sample-dir", s(&samples), "--data", s(&data), "--out", s(&png)]);
    let img = image::open(&png).unwrap();
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(png.with_extension("json")).unwrap()).unwrap();
    let labels: Vec<&str> = side.panels.iter().map(|p| p.label.as_str()).collect();
    assert_eq!(labels, ["truth", "bp", "sample 0", "sample 1", "sample 2", "mmse", "uq"]);
    assert_eq!((img.width(), img.height()), (side.width, side.height));
    assert_eq!(side.width, 7 * 64 + 6 * 2);
    let truth = &side.panels[0];
    assert!(truth.min >= 1540.0 - 1e-9 && truth.max > truth.min);

    // mismatched configuration and dataset are refused
    let mut wrong = cfg.clone();
    wrong.seed += 1;
    std::fs::write(&cfg_path, serde_json::to_string(&wrong).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uflow"))
        .args(["--config", c, "train-unet", "--data", s(&data), "--out", s(&root.join("x"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different dataset"));
}
