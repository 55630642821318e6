use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csmc_core::checkpoint::{self, Checkpoint};
use csmc_core::experiments::ExperimentConfig;
use csmc_core::Model64;
use serde_json::Value;
use tempfile::TempDir;

fn csmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csmc"))
        .args(args)
        .output()
        .expect("spawn csmc")
}

fn ok(args: &[&str]) {
    let out = csmc(args);
    assert!(
        out.status.success(),
        "csmc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "model": {
    "sensing": { "block_size": 16, "compression_factor": 4 },
    "prelim_channels": [16, 8],
    "residual_channels": [10, 8, 6, 4],
    "matrix_seed": 9
  },
  "train": { "epochs": 4, "batch_size": 16, "max_batches_per_epoch": 8, "lr0": 0.001, "seed": 3, "stage_count": 2 },
  "data": { "videos": 2, "frames": 3, "size": 64 },
  "crop": null,
  "eval": { "size": 48, "frames": 3 }
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), TINY_CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn eval_of_a_file_against_itself_is_capped() {
    let ws = Workspace::new();
    let (clip, report) = (ws.path("a.gsv"), ws.path("r.json"));
    ok(&[
        "make-synthetic",
        "--kind",
        "bounce",
        "--size",
        "40x24",
        "--frames",
        "3",
        "--seed",
        "2",
        "--out",
        s(&clip),
    ]);
    ok(&[
        "eval",
        "--ref",
        s(&clip),
        "--test",
        s(&clip),
        "--report",
        s(&report),
    ]);
    let r = read_json(&report);
    assert_eq!(r["frames"].as_array().unwrap().len(), 3);
    assert_eq!(r["mean_psnr"], 99.0);
    assert_eq!(r["mean_ssim"], 1.0);
}

#[test]
fn failures_emit_one_json_error_line() {
    let ws = Workspace::new();
    let missing = ws.path("missing.gsv");
    let e = error_json(&csmc(&[
        "eval",
        "--ref",
        s(&missing),
        "--test",
        s(&missing),
        "--report",
        "r.json",
    ]));
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"]
        .as_str()
        .unwrap()
        .contains("missing.gsv"));

    let e = error_json(&csmc(&["no-such-command"]));
    assert_eq!(e["error"]["kind"], "usage");

    let bad = ws.path("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let e = error_json(&csmc(&[
        "ablate-stages",
        "--config",
        s(&bad),
        "--report",
        s(&ws.path("r.json")),
    ]));
    assert_eq!(e["error"]["kind"], "json");
}

#[test]
fn encode_with_sensing_config_writes_a_self_describing_file() {
    let ws = Workspace::new();
    let (clip, sensing, meas) = (ws.path("a.gsv"), ws.path("sensing.json"), ws.path("a.csmm"));
    ok(&[
        "make-synthetic",
        "--size",
        "32",
        "--frames",
        "2",
        "--out",
        s(&clip),
    ]);
    std::fs::write(&sensing, r#"{ "block_size": 16, "compression_factor": 8 }"#).unwrap();
    ok(&[
        "encode",
        "--sensing",
        s(&sensing),
        "--matrix-seed",
        "41",
        "--in",
        s(&clip),
        "--out",
        s(&meas),
    ]);
    let bytes = std::fs::read(&meas).unwrap();
    assert_eq!(&bytes[..4], b"CSMM");
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    assert_eq!(header["block_size"], 16);
    assert_eq!(header["measurements"], 32);
    assert_eq!(header["compression_factor"], 8);
    assert_eq!(header["matrix_seed"], 41);
    assert_eq!(
        (
            header["width"].clone(),
            header["height"].clone(),
            header["frames"].clone()
        ),
        (32.into(), 32.into(), 2.into())
    );
    assert_eq!(bytes.len(), 8 + len + 2 * 4 * 32 * 8);
}

#[test]
fn train_encode_decode_pipeline() {
    let ws = Workspace::new();
    let config = ws.path("config.json");
    let (model_a, model_b, log) = (ws.path("a.ckpt"), ws.path("b.ckpt"), ws.path("train.jsonl"));
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&model_a),
        "--log",
        s(&log),
    ]);
    ok(&["train", "--config", s(&config), "--out", s(&model_b)]);
    assert_eq!(
        std::fs::read(&model_a).unwrap(),
        std::fs::read(&model_b).unwrap()
    );
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    let trained: Checkpoint<f64> = checkpoint::load(&model_a).unwrap();
    assert_eq!(trained.epoch, 4);
    assert_eq!(trained.train_config.as_ref().unwrap().lambda_mc, 0.5);

    // Same architecture and matrix, no training.
    let cfg: ExperimentConfig = serde_json::from_str(TINY_CONFIG).unwrap();
    let untrained = ws.path("untrained.ckpt");
    checkpoint::save(
        &untrained,
        &Checkpoint::from_model(Model64::new(cfg.model_config()).unwrap()),
    )
    .unwrap();

    let (clip, meas) = (ws.path("static.gsv"), ws.path("static.csmm"));
    ok(&[
        "make-synthetic",
        "--kind",
        "static",
        "--size",
        "48",
        "--frames",
        "3",
        "--seed",
        "5",
        "--out",
        s(&clip),
    ]);
    ok(&[
        "encode",
        "--model",
        s(&model_a),
        "--in",
        s(&clip),
        "--out",
        s(&meas),
    ]);
    let mut scores = Vec::new();
    for (name, model) in [("trained", &model_a), ("untrained", &untrained)] {
        let (out, report) = (
            ws.path(&format!("{name}.gsv")),
            ws.path(&format!("{name}.json")),
        );
        ok(&[
            "decode",
            "--model",
            s(model),
            "--in",
            s(&meas),
            "--out",
            s(&out),
        ]);
        ok(&[
            "eval",
            "--ref",
            s(&clip),
            "--test",
            s(&out),
            "--report",
            s(&report),
        ]);
        scores.push(read_json(&report)["mean_psnr"].as_f64().unwrap());
    }
    assert!(
        scores[0] > scores[1],
        "trained {} dB vs untrained {} dB",
        scores[0],
        scores[1]
    );

    let again = ws.path("again.gsv");
    ok(&[
        "decode",
        "--model",
        s(&model_a),
        "--in",
        s(&meas),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(ws.path("trained.gsv")).unwrap()
    );

    let other = ws.path("other.ckpt");
    let mut cfg = cfg.model_config();
    cfg.matrix_seed += 1;
    checkpoint::save(&other, &Checkpoint::from_model(Model64::new(cfg).unwrap())).unwrap();
    let e = error_json(&csmc(&[
        "decode",
        "--model",
        s(&other),
        "--in",
        s(&meas),
        "--out",
        s(&again),
    ]));
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("seed"));

    let sweep = ws.path("sweep.json");
    ok(&[
        "noise-sweep",
        "--model",
        s(&model_a),
        "--in",
        s(&clip),
        "--snr-list",
        "20,50",
        "--report",
        s(&sweep),
    ]);
    let rows = read_json(&sweep)["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["snr_db"].is_null());
    assert_eq!(rows[2]["snr_db"], 50.0);
}

#[test]
fn pretrain_writes_a_loadable_checkpoint() {
    let ws = Workspace::new();
    let (model, log) = (ws.path("pre.ckpt"), ws.path("pre.jsonl"));
    ok(&[
        "pretrain",
        "--config",
        s(&ws.path("config.json")),
        "--out",
        s(&model),
        "--log",
        s(&log),
    ]);
    let ckpt: Checkpoint<f64> = checkpoint::load(&model).unwrap();
    assert_eq!(ckpt.model.stages.len(), 2);
    assert_eq!(ckpt.model.stages[0].prelim, ckpt.model.stages[1].prelim);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);
}

#[test]
fn ablation_report_has_one_row_per_stage_count() {
    let ws = Workspace::new();
    let config = ws.path("small.json");
    let mut cfg: Value = serde_json::from_str(TINY_CONFIG).unwrap();
    cfg["train"]["epochs"] = 1.into();
    cfg["train"]["max_batches_per_epoch"] = 2.into();
    std::fs::write(&config, cfg.to_string()).unwrap();
    let report = ws.path("ablation.json");
    ok(&[
        "ablate-stages",
        "--config",
        s(&config),
        "--stages",
        "1,3",
        "--report",
        s(&report),
    ]);
    let r = read_json(&report);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for (row, stages) in rows.iter().zip([1, 3]) {
        assert_eq!(row["stages"], stages);
        assert_eq!(row["cr"], 4);
        for key in ["psnr", "ssim", "final_l_err"] {
            assert!(
                row[key].as_f64().is_some_and(f64::is_finite),
                "{key} in {row}"
            );
        }
    }
    assert_eq!(r["mc_mode"], "learned");
}
