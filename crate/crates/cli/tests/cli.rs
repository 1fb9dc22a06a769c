use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "data": { "image_size": 8, "label_count": 4, "labeled": 60, "unlabeled": 40 },
  "teachers": {
    "count": 2,
    "blocks": [[4, 1], [6, 2], [6, 1]],
    "epochs": 2,
    "optimizer": { "base_lr": 0.01, "power": 0.9, "weight_decay": 0.005, "batch_size": 8 }
  },
  "amalgam": {
    "tasks": "0:0,1:1",
    "epochs_per_block": 2,
    "optimizer": { "base_lr": 0.01, "power": 0.9, "weight_decay": 0.005, "batch_size": 8,
                   "momentum": 0.9, "max_grad_norm": 1.0 },
    "filter_reduction": 2
  },
  "branchout": {
    "finetune": {
      "epochs": 2,
      "optimizer": { "base_lr": 0.003, "power": 0.9, "weight_decay": 0.005, "batch_size": 8 }
    }
  }
}"#;

fn targetnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_targetnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn targetnet")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn stage(cmd: &str, config: &str, out: &Path) -> Output {
    targetnet(&[cmd, "--config", config, "--out", out.to_str().unwrap()])
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let o = stage("run", &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "data/meta.json",
        "teachers/teacher0.ckpt",
        "teachers/teacher1_curve.csv",
        "teachers/registry.json",
        "amalgam/student.ckpt",
        "amalgam/filters.ckpt",
        "amalgam/loss_table.csv",
        "amalgam/curves/task3_block3.csv",
        "branchout/branch_report.csv",
        "branchout/regrouped.ckpt",
        "finetune/final.ckpt",
        "finetune/curves.csv",
        "eval/ap.csv",
        "eval/topk.csv",
        "eval/curves.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    for s in ["data", "teachers", "amalgam", "branchout", "finetune", "eval"] {
        assert!(out.join(s).join("config.json").exists(), "{s} config");
        assert!(out.join(s).join("manifest.json").exists(), "{s} manifest");
    }
    let ap = fs::read_to_string(out.join("eval/ap.csv")).unwrap();
    assert!(ap.starts_with("label,teacher_id,teacher_ap,regrouped_ap,student_ap\n"));
    assert!(ap.contains("mAP_selected"));
    let curves = fs::read_to_string(out.join("eval/curves.csv")).unwrap();
    assert!(curves.starts_with("task,block,metric,value\n"));
    assert_eq!(curves.lines().count(), 1 + 2 * 3 * 2);

    // eval reruns byte-identically
    let before: Vec<Vec<u8>> = ["ap.csv", "topk.csv", "curves.csv"]
        .iter()
        .map(|f| fs::read(out.join("eval").join(f)).unwrap())
        .collect();
    let o = stage("eval", &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (f, b) in ["ap.csv", "topk.csv", "curves.csv"].iter().zip(before) {
        assert_eq!(fs::read(out.join("eval").join(f)).unwrap(), b, "{f} changed");
    }
}

#[test]
fn branchout_before_amalgamate_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let o = stage("branchout", &config, &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(!out.join("branchout/branch_report.csv").exists());
}

#[test]
fn pretrain_single_teacher_and_hash_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(stage("gen-data", &config, &out).status.success());
    let o = targetnet(&["pretrain", "--config", &config, "--out", out.to_str().unwrap(), "--teacher", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("teachers/teacher1.ckpt").exists());
    assert!(!out.join("teachers/teacher0.ckpt").exists());
    assert!(stage("pretrain", &config, &out).status.success());

    // same run directory, different block widths
    let changed = TINY.replace("[[4, 1], [6, 2], [6, 1]]", "[[4, 1], [8, 2], [6, 1]]");
    let other = tmp.path().join("other.json");
    fs::write(&other, changed).unwrap();
    let o = stage("amalgamate", other.to_str().unwrap(), &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("different architecture"), "{err}");
}

#[test]
fn bad_config_is_rejected_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    fs::write(&p, TINY.replace("\"tasks\": \"0:0,1:1\"", "\"tasks\": \"0:9\"")).unwrap();
    let out = tmp.path().join("run");
    let o = stage("gen-data", p.to_str().unwrap(), &out);
    assert!(!o.status.success());
    assert!(!out.exists());

    let o = targetnet(&["gen-data", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn shipped_config_matches_builtin_default() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let a = targetnet::pipeline::PipelineConfig::load(&shipped).unwrap();
    let b = targetnet::pipeline::PipelineConfig::desk_default();
    let o = targetnet::pipeline::Overrides::default();
    assert_eq!(a.resolve(&o).unwrap(), b.resolve(&o).unwrap());
}
