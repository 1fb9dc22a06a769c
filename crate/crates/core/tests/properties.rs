mod common;

use common::{checks, images, registry, spec};
use proptest::prelude::*;
use targetnet::amalgam::{amalgamate, AmalgamationConfig, LossTable, StudentInit};
use targetnet::blocknet::{
    build_network, forward_collect, forward_substituted, FeatureMap, Producer, TaskSelection, Wiring,
};
use targetnet::branchout::{argmin_earliest, finetune, regroup, select_branch_points, FinetuneConfig};
use targetnet::nncore::{Graph, OptimizerConfig, ParameterSet, PolySgd, Tensor};

fn small_config(selection: TaskSelection) -> AmalgamationConfig {
    AmalgamationConfig {
        epochs_per_block: 2,
        optimizer: OptimizerConfig {
            batch_size: 8,
            ..targetnet::amalgam::default_optimizer()
        },
        ..AmalgamationConfig::new(selection)
    }
}

/// Direct 7-loop convolution with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * c + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * c + ic) * kh + i) * kw + j;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_straight_line_oracle() {
    for (i, &(stride, pad, k)) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (3, 2, 3)].iter().enumerate() {
        let x = common::random_tensor(&[2, 3, 7, 7], 100 + i as u64);
        let w = common::random_tensor(&[4, 3, k, k], 200 + i as u64);
        let b = common::random_tensor(&[4], 300 + i as u64);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(g.value(y).shape(), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn substituting_own_features_is_identity() {
    for wiring in [Wiring::Sequential, Wiring::DenseConcat] {
        assert!(checks::substitution_identity(wiring, 6) < 1e-6, "{wiring:?}");
    }
}

#[test]
fn zeros_injection_cuts_off_the_input() {
    let s = spec(Wiring::Sequential, 4, 16, &[0, 1]);
    let net = build_network(&s, 3).unwrap();
    for k in 1..=4 {
        let run = |seed| {
            let x = images(&s, 3, seed);
            let (feats, _) = forward_collect(&net, &x, Producer::Teacher(0)).unwrap();
            let zeros = FeatureMap {
                block: k,
                tensor: Tensor::zeros(feats[k - 1].tensor.shape()),
                producer: Producer::Substituted,
            };
            forward_substituted(&net, k, &zeros, &x, &feats).unwrap()
        };
        // later blocks only see the injected map, so the input is irrelevant
        assert_eq!(run(1), run(2));
    }
}

#[test]
fn entangled_gradients_match_finite_differences() {
    for wiring in [Wiring::Sequential, Wiring::DenseConcat] {
        for k in [1, 2, 3] {
            let (err, params) = checks::entangled_fd(wiring, k);
            assert!(params <= 5000);
            assert!(err < 1e-3, "{wiring:?} block {k}: {err}");
        }
    }
}

#[test]
fn clone_init_with_open_gates_sits_on_the_entropy_floor() {
    assert!(checks::self_distillation_gap() < 1e-5);
}

#[test]
fn amalgamation_freezes_everything_and_leaves_teachers_alone() {
    let base = spec(Wiring::Sequential, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 7);
    let before = reg.clone();
    let x = images(&base, 24, 8);
    let result = amalgamate(&reg, x, small_config(TaskSelection::new(vec![vec![0], vec![3]]))).unwrap();
    for (a, b) in reg.teachers.iter().zip(&before.teachers) {
        assert!(a.network.params_equal(&b.network));
    }
    assert!(result.student.param_sets().all(|p| !p.any_trainable()));
    assert!(result.bank.values().all(|f| !f.params.any_trainable()));
    assert!(result.table.is_complete());
}

#[test]
fn zero_learning_rate_keeps_the_initial_student() {
    let base = spec(Wiring::DenseConcat, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 9);
    let x = images(&base, 24, 10);
    let mut config = small_config(TaskSelection::new(vec![vec![1], vec![2]]));
    config.student_init = StudentInit::CloneTeacher(1);
    config.optimizer.base_lr = 0.0;
    let result = amalgamate(&reg, x, config).unwrap();
    for (s, t) in result.student.blocks.iter().zip(&reg.teachers[1].network.blocks) {
        assert!(s.params.values_equal(&t.params));
    }
}

#[test]
fn one_step_on_a_batch_lowers_its_loss() {
    use targetnet::amalgam::AmalgamationState;
    let base = spec(Wiring::Sequential, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 13);
    let x = images(&base, 16, 14);
    let mut config = small_config(TaskSelection::new(vec![vec![0], vec![2]]));
    config.optimizer.base_lr = 0.005;
    config.optimizer.batch_size = 16;
    config.epochs_per_block = 1;
    config.heldout_fraction = 0.5;
    let mut state = AmalgamationState::new(&reg, x, config).unwrap();
    let train = state.train_rows().to_vec();
    let before = state.evaluate(1, &reg, &train).unwrap();
    state.train_next_block(&reg).unwrap();
    let after = state.evaluate(1, &reg, &train).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&after) < mean(&before), "{before:?} -> {after:?}");
}

#[test]
fn single_block_networks_amalgamate_and_branch_at_one() {
    let base = spec(Wiring::Sequential, 1, 8, &[0]);
    let reg = registry(&base, &[vec![0], vec![1]], 15);
    let sel = TaskSelection::new(vec![vec![0], vec![1]]);
    let result = amalgamate(&reg, images(&base, 20, 16), small_config(sel.clone())).unwrap();
    assert_eq!(result.table.block_count, 1);
    let plan = select_branch_points(&result.table, &sel).unwrap();
    assert_eq!(plan.points, vec![1, 1]);
    let model = regroup(&result.student, &reg, &result.bank, &plan).unwrap();
    assert_eq!(model.predict(&images(&base, 3, 17), 2).unwrap().task_ids, vec![0, 1]);
}

#[test]
fn amalgamation_is_deterministic() {
    let base = spec(Wiring::Sequential, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 18);
    let run = || {
        let r = amalgamate(&reg, images(&base, 24, 19), small_config(TaskSelection::new(vec![vec![1], vec![3]])))
            .unwrap();
        (r.table, r.student.named_tensors())
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_table_round_trips_through_csv() {
    let base = spec(Wiring::Sequential, 2, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 20);
    let sel = TaskSelection::new(vec![vec![0, 1], vec![3]]);
    let table = amalgamate(&reg, images(&base, 20, 21), small_config(sel.clone())).unwrap().table;
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    let back = LossTable::read(&dir.path().join("loss_table.csv"), &sel).unwrap();
    assert_eq!(back.heldout, table.heldout);
    assert_eq!(back.task_ids, table.task_ids);
}

#[test]
fn regrouped_model_reproduces_substituted_forward() {
    for (wiring, points) in [
        (Wiring::Sequential, vec![2, 4, 1]),
        (Wiring::Sequential, vec![3, 3, 3]),
        (Wiring::DenseConcat, vec![1, 3, 4]),
    ] {
        let err = checks::regroup_equivalence(wiring, &points);
        assert!(err < 1e-6, "{wiring:?} {points:?}: {err}");
    }
}

#[test]
fn finetune_without_epochs_changes_nothing() {
    let base = spec(Wiring::Sequential, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 22);
    let sel = TaskSelection::new(vec![vec![1], vec![2]]);
    let x = images(&base, 20, 23);
    let result = amalgamate(&reg, x.clone(), small_config(sel.clone())).unwrap();
    let plan = select_branch_points(&result.table, &sel).unwrap();
    let mut model = regroup(&result.student, &reg, &result.bank, &plan).unwrap();
    let before = model.named_tensors();
    let config = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let report = finetune(&mut model, &reg, &x, &config).unwrap();
    assert_eq!(model.named_tensors(), before);
    assert_eq!(report.before, report.after);
}

#[test]
fn finetune_never_ends_worse_than_it_started() {
    let base = spec(Wiring::Sequential, 3, 8, &[0]);
    let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 24);
    let sel = TaskSelection::new(vec![vec![0], vec![3]]);
    let x = images(&base, 30, 25);
    let result = amalgamate(&reg, x.clone(), small_config(sel.clone())).unwrap();
    let plan = select_branch_points(&result.table, &sel).unwrap();
    let mut model = regroup(&result.student, &reg, &result.bank, &plan).unwrap();
    let config = FinetuneConfig {
        epochs: 3,
        ..FinetuneConfig::default()
    };
    let report = finetune(&mut model, &reg, &x, &config).unwrap();
    for (a, b) in report.after.iter().zip(&report.before) {
        assert!(a <= b);
    }
}

#[test]
fn gradient_clipping_bounds_the_joint_norm() {
    let mut a = ParameterSet::<f64>::new();
    a.add("a", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let mut b = ParameterSet::<f64>::new();
    b.add("b", Tensor::scalar(0.0));
    a.iter_mut().next().unwrap().grad = Tensor::new(&[2], vec![3.0, 0.0]).unwrap();
    b.iter_mut().next().unwrap().grad = Tensor::scalar(4.0);
    let config = OptimizerConfig {
        base_lr: 1.0,
        power: 1.0,
        weight_decay: 0.0,
        max_grad_norm: Some(1.0),
        ..OptimizerConfig::default()
    };
    PolySgd::new(config.clone(), 10).step([&mut a, &mut b]).unwrap();
    // joint norm 5 scaled to 1: step is -(0.6, 0, 0.8)
    assert!((a.get("a").unwrap().data()[0] + 0.6).abs() < 1e-12);
    assert_eq!(a.get("a").unwrap().data()[1], 0.0);
    assert!((b.get("b").unwrap().data()[0] + 0.8).abs() < 1e-12);

    // under the threshold the gradient passes through
    let mut c = ParameterSet::<f64>::new();
    c.add("c", Tensor::scalar(0.0));
    c.iter_mut().next().unwrap().grad = Tensor::scalar(0.5);
    PolySgd::new(config, 10).step([&mut c]).unwrap();
    assert!((c.get("c").unwrap().data()[0] + 0.5).abs() < 1e-12);
}

fn brute_argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] < row[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn argmin_matches_brute_force(row in prop::collection::vec(0u8..6, 1..10)) {
        // few distinct values so ties are common
        let row: Vec<f64> = row.into_iter().map(|v| v as f64 * 0.1).collect();
        prop_assert_eq!(argmin_earliest(&row), Some(brute_argmin(&row)));
    }

    #[test]
    fn shared_blocks_is_the_smaller_branch_point(a in 1usize..8, b in 1usize..8) {
        let plan = targetnet::branchout::BranchPlan {
            task_ids: vec![0, 1],
            teachers: vec![0, 1],
            points: vec![a, b],
            losses: vec![0.0, 0.0],
            trunk_length: a.max(b),
        };
        prop_assert_eq!(plan.shared_blocks(0, 1), a.min(b));
        prop_assert_eq!(plan.shared_blocks(1, 0), a.min(b));
    }
}

#[test]
fn teacher_loss_and_filter_gradients_match_finite_differences() {
    let (err, params) = checks::teacher_loss_fd();
    assert!(params <= 5000);
    assert!(err < 1e-3, "teacher loss: {err}");
    let (err, params) = checks::filter_fd();
    assert!(params <= 5000);
    assert!(err < 1e-3, "filter: {err}");
}

#[test]
fn regrouped_tasks_share_exactly_the_common_trunk() {
    let (violations, pairs) = checks::sharing_violations();
    assert_eq!(pairs, 64 * 3);
    assert_eq!(violations, 0);
}
