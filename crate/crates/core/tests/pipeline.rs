mod common;

use std::fs;
use std::path::Path;

use targetnet::dataio::audit::AccessRecorder;
use targetnet::dataio::store::eval_labels_path;
use targetnet::dataio::{generate_dataset, partition_labels, PartitionMode, SyntheticDatasetConfig};
use targetnet::blocknet::{build_network, ArchitectureSpec, Wiring};
use targetnet::nncore::OptimizerConfig;
use targetnet::pipeline::{self, Overrides, PipelineConfig, ResolvedConfig};
use targetnet::teachers::{pretrain_teacher, PretrainOptions};
use targetnet::Error;

use common::TINY;

fn tiny(out: &Path) -> ResolvedConfig {
    PipelineConfig::from_json(TINY)
        .unwrap()
        .resolve(&Overrides {
            out: Some(out.to_path_buf()),
            ..Overrides::default()
        })
        .unwrap()
}

#[test]
fn training_stages_never_open_evaluation_labels() {
    let dir = tempfile::tempdir().unwrap();
    let rc = tiny(dir.path());
    pipeline::cmd_gen_data(&rc).unwrap();
    let labels = eval_labels_path(&rc.stage_dir(pipeline::DATA_DIR));
    assert!(labels.exists());

    let rec = AccessRecorder::start();
    pipeline::cmd_pretrain(&rc, None).unwrap();
    pipeline::cmd_amalgamate(&rc).unwrap();
    pipeline::cmd_branchout(&rc).unwrap();
    pipeline::cmd_finetune(&rc).unwrap();
    assert!(!rec.opened(&labels));
    // the recorder does see the files the stages read
    assert!(rec.opened(&rc.stage_dir(pipeline::TEACHERS_DIR).join("teacher0.ckpt")));
    drop(rec);

    let rec = AccessRecorder::start();
    pipeline::cmd_eval(&rc).unwrap();
    assert!(rec.opened(&labels));
}

#[test]
fn fixed_seed_reproduces_table_and_report_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::run_all(&tiny(a.path())).unwrap();
    pipeline::run_all(&tiny(b.path())).unwrap();
    for f in [
        "amalgam/loss_table.csv",
        "branchout/branch_report.csv",
        "finetune/curves.csv",
        "eval/ap.csv",
        "amalgam/manifest.json",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stages_report_missing_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let rc = tiny(dir.path());
    let missing = |r: targetnet::Result<()>| matches!(r, Err(Error::MissingArtifact { .. }));
    assert!(missing(pipeline::cmd_pretrain(&rc, None).map(drop)));
    assert!(missing(pipeline::cmd_amalgamate(&rc).map(drop)));
    assert!(missing(pipeline::cmd_branchout(&rc).map(drop)));
    assert!(missing(pipeline::cmd_finetune(&rc).map(drop)));
    assert!(missing(pipeline::cmd_eval(&rc).map(drop)));
    pipeline::cmd_gen_data(&rc).unwrap();
    assert!(missing(pipeline::cmd_amalgamate(&rc).map(drop)));
}

#[test]
fn manifests_hash_inputs_and_configs_echo_the_resolved_run() {
    let dir = tempfile::tempdir().unwrap();
    let rc = tiny(dir.path());
    pipeline::cmd_gen_data(&rc).unwrap();
    pipeline::cmd_pretrain(&rc, Some(0)).unwrap();
    let m: pipeline::Manifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("teachers/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "pretrain");
    let meta = dir.path().join("data/meta.json");
    assert_eq!(m.inputs["data/meta.json"], pipeline::file_sha256(&meta).unwrap());
    let echoed: PipelineConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("teachers/config.json")).unwrap()).unwrap();
    assert_eq!(echoed, rc.config);
    // seeds are derived, so the echoed config replays without overrides
    assert_eq!(echoed.resolve(&Overrides::default()).unwrap(), rc);
}

#[test]
fn teachers_from_another_architecture_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let rc = tiny(dir.path());
    pipeline::cmd_gen_data(&rc).unwrap();
    pipeline::cmd_pretrain(&rc, None).unwrap();
    let other = PipelineConfig::from_json(&TINY.replace("[6, 2], [6, 1]", "[6, 2], [8, 1]"))
        .unwrap()
        .resolve(&Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        })
        .unwrap();
    assert!(matches!(
        pipeline::cmd_amalgamate(&other),
        Err(Error::SpecHashMismatch { .. })
    ));
}

#[test]
fn invalid_configs_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for (from, to) in [
        ("\"tasks\": \"0:1,1:0\"", "\"tasks\": \"0:1,0:1\""),
        ("\"count\": 2", "\"count\": 5"),
        ("\"epochs_per_block\": 2", "\"epochs_per_block\": 0"),
        ("\"seed\": 5", "\"seed\": 5, \"typo\": 1"),
    ] {
        let text = TINY.replace(from, to);
        let r = PipelineConfig::from_json(&text).and_then(|c| {
            c.resolve(&Overrides {
                out: Some(out.clone()),
                ..Overrides::default()
            })
        });
        assert!(r.is_err(), "{to}");
    }
    assert!(!out.exists());
}

/// Teacher 0 of the shipped setup trained briefly on its four labels.
fn desk_teacher(epochs: usize) -> targetnet::teachers::TeacherModel {
    let desk = PipelineConfig::desk_default();
    let data = generate_dataset(&SyntheticDatasetConfig {
        unlabeled: 0,
        seed: 1,
        ..desk.data.clone()
    })
    .unwrap();
    let groups = partition_labels(8, 2, PartitionMode::Contiguous).unwrap();
    let spec = ArchitectureSpec::new(
        pipeline::input_shape(&desk.data),
        Wiring::Sequential,
        &desk.teachers.blocks,
        &groups[0],
    )
    .unwrap();
    let net = build_network(&spec, 1).unwrap();
    let opt = OptimizerConfig {
        seed: 1,
        ..desk.teachers.optimizer.clone()
    };
    pretrain_teacher(net, &data.train, &data.val, &opt, &PretrainOptions { epochs, hflip: false }).unwrap()
}

#[test]
fn desk_teacher_learns_and_its_smoothed_loss_falls() {
    let t = desk_teacher(20);
    let losses = &t.metadata.epoch_losses;
    assert_eq!(losses.len(), 20);
    let smoothed: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "{smoothed:?}");
    let map = t.metadata.val_map.unwrap();
    // measured 0.736 for this seed; the thin cross of label 3 trails the rest
    assert!(map >= 0.70, "{map}");
}

#[test]
fn zero_epoch_pretraining_returns_the_initial_network() {
    let desk = PipelineConfig::desk_default();
    let data = generate_dataset(&SyntheticDatasetConfig {
        labeled: 40,
        unlabeled: 0,
        ..desk.data.clone()
    })
    .unwrap();
    let spec = ArchitectureSpec::new(
        pipeline::input_shape(&desk.data),
        Wiring::Sequential,
        &[(4, 1), (4, 2)],
        &[0, 1],
    )
    .unwrap();
    let net = build_network(&spec, 2).unwrap();
    let t = pretrain_teacher(
        net.clone(),
        &data.train,
        &data.val,
        &OptimizerConfig::default(),
        &PretrainOptions { epochs: 0, hflip: false },
    )
    .unwrap();
    assert!(t.network.params_equal(&net));
}
