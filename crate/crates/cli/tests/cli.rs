use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lgedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgedet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lgedet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "data": {
    "train_scenes": 4,
    "eval_scenes": 2,
    "scene": {
      "grid": {"origin": [-9.6, -9.6], "cell_size": 1.2, "extents": [16, 16]},
      "num_objects": [2, 4]
    }
  },
  "model": {"channels": 8, "head_hidden": 8, "queries": 6, "decoder_radius": 1},
  "lge": {"heads": 2, "iterations": 1},
  "train": {"steps": 6, "lr": 0.001, "log_every": 2}
}"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let evald = dir.path().join("eval");
    let (data_s, run_s, eval_s) = (data.to_str().unwrap(), run.to_str().unwrap(), evald.to_str().unwrap());

    ok(&["gen-data", "--config", &cfg, "--out", data_s]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["eval"].as_array().unwrap().len(), 2);

    ok(&["train", "--config", &cfg, "--data", data_s, "--out", run_s, "--train.steps=4"]);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["steps"], 4);
    assert!(run.join("checkpoint.bin").exists());

    let ckpt = run.join("checkpoint.bin");
    ok(&["eval", "--config", &cfg, "--data", data_s, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_s]);
    let first = fs::read_to_string(evald.join("metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(metrics["num_scenes"], 2);
    assert_eq!(metrics["recall"].as_array().unwrap().len(), 4);
    assert!(!metrics["loss_curve"].as_array().unwrap().is_empty());

    let det = fs::read_to_string(evald.join("detections/scene_00000.csv")).unwrap();
    assert!(det.starts_with("stage,class,score,x,y,z,l,w,h,yaw"));
    assert_eq!(det.lines().count(), 1 + 18);
    let q = fs::read_to_string(evald.join("queries/scene_00001.csv")).unwrap();
    assert!(q.starts_with("stage,row,col,class,score"));

    // same inputs, same bytes
    ok(&["eval", "--config", &cfg, "--data", data_s, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_s]);
    assert_eq!(fs::read_to_string(evald.join("metrics.json")).unwrap(), first);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"axes": [{"key": "lge.variant", "values": ["A", "G"]}], "seeds": [0, 1]}"#).unwrap();
    let out = dir.path().join("ablation.csv");
    ok(&[
        "ablate",
        "--config",
        &cfg,
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--train.steps=2",
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(
        lines[0],
        "variant,iterations,K,N,mode,seed,recall@0.5,recall@1,recall@2,recall@4,mAP,wall_time_s,status"
    );
    assert!(lines[1].starts_with("A,1,3,6,parallel,0,"));
    assert!(lines[4].starts_with("G,1,3,6,parallel,1,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
}

#[test]
fn grad_check_passes() {
    let stdout = ok(&["grad-check"]);
    assert!(stdout.contains("lge_variant_g"));
    assert!(!stdout.contains("FAIL"));
    let json: serde_json::Value = serde_json::from_str(&ok(&["grad-check", "--json"])).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 8);
}

#[test]
fn bad_override_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgedet(&["gen-data", "--out", dir.path().to_str().unwrap(), "--model.nonexistent=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
