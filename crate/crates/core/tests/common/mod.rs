#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use targetnet::blocknet::{build_network, ArchitectureSpec, InputShape, Wiring};
use targetnet::nncore::Tensor;
use targetnet::teachers::{TeacherModel, TeacherRegistry, TrainingMetadata};

/// A pipeline config small enough to run every stage in a few seconds.
pub const TINY: &str = r#"{
  "seed": 5,
  "data": { "image_size": 8, "label_count": 4, "labeled": 60, "unlabeled": 40 },
  "teachers": {
    "count": 2,
    "blocks": [[4, 1], [6, 2], [6, 1]],
    "epochs": 2,
    "optimizer": { "base_lr": 0.01, "power": 0.9, "weight_decay": 0.005, "batch_size": 8 }
  },
  "amalgam": {
    "tasks": "0:1,1:0",
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


/// `blocks` blocks alternating stride 1 and 2, widths 4 and 6.
pub fn spec(wiring: Wiring, blocks: usize, size: usize, task_ids: &[usize]) -> ArchitectureSpec {
    let layout: Vec<(usize, usize)> = (0..blocks)
        .map(|i| (4 + 2 * (i % 2), if i % 2 == 1 && i < 5 { 2 } else { 1 }))
        .collect();
    ArchitectureSpec::new(
        InputShape {
            channels: 3,
            height: size,
            width: size,
        },
        wiring,
        &layout,
        task_ids,
    )
    .unwrap()
}

pub fn images(spec: &ArchitectureSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = spec.input;
    let len = n * i.channels * i.height * i.width;
    Tensor::new(
        &[n, i.channels, i.height, i.width],
        (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Untrained teachers over consecutive task groups, e.g. `[[0, 1], [2, 3]]`.
pub fn registry(base: &ArchitectureSpec, groups: &[Vec<usize>], seed: u64) -> TeacherRegistry {
    let teachers = groups
        .iter()
        .enumerate()
        .map(|(n, g)| TeacherModel {
            network: build_network(&base.with_task_ids(g), seed + n as u64).unwrap(),
            task_ids: g.clone(),
            metadata: TrainingMetadata::default(),
        })
        .collect();
    let universe = groups.iter().flatten().copied().collect();
    TeacherRegistry::new(teachers, universe).unwrap()
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor<f64>, eps: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let v = probe.data()[i];
        probe.data_mut()[i] = v + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = v - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

pub fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-300)
}

/// Binary entropy in nats; the floor of the soft cross-entropy.
pub fn entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

pub mod checks {
    use super::*;
    use targetnet::amalgam::{
        amalgamate, entangled_forward, AmalgamationConfig, AmalgamationState, EntangledInputs,
        StudentInit,
    };
    use targetnet::blocknet::{
        forward_collect, forward_substituted, BlockifiedNetwork, PredictionSet, Producer,
        TaskSelection,
    };
    use targetnet::branchout::{regroup, BranchPlan};
    use targetnet::filters::FilterModule;
    use targetnet::nncore::{Graph, OptimizerConfig};

    /// Smaller than the per-primitive step: a bias nudge of 1e-3 moves many
    /// ReLU inputs across zero at once in a multi-block path.
    pub const PATH_EPS: f64 = 1e-5;

    /// Largest relative deviation of self-substituted predictions from the
    /// plain forward, over every block of a random teacher.
    pub fn substitution_identity(wiring: Wiring, blocks: usize) -> f64 {
        let s = spec(wiring, blocks, 16, &[0, 1, 2]);
        let net = build_network(&s, 11).unwrap();
        let x = images(&s, 5, 12);
        let (feats, plain) = forward_collect(&net, &x, Producer::Teacher(0)).unwrap();
        let mut worst: f64 = 0.0;
        for k in 1..=blocks {
            let sub = forward_substituted(&net, k, &feats[k - 1], &x, &feats).unwrap();
            for (a, b) in sub.probs.iter().zip(&plain.probs) {
                worst = worst.max(a.max_rel_diff(b));
            }
        }
        worst
    }

    fn quiet_config(selection: TaskSelection) -> AmalgamationConfig {
        AmalgamationConfig {
            epochs_per_block: 1,
            optimizer: OptimizerConfig {
                batch_size: 8,
                ..targetnet::amalgam::default_optimizer()
            },
            ..AmalgamationConfig::new(selection)
        }
    }

    fn set_param(block: &mut targetnet::nncore::ParameterSet<f64>, i: usize, value: &Tensor<f64>) {
        let name = block.param(i).name.clone();
        *block.get_mut(&name).unwrap() = value.clone();
    }

    /// Relative FD error of the block-`k` loss gradients through student
    /// block, filters and teacher suffixes, in f64. Returns the worst error
    /// over every block and filter tensor and the parameter count checked.
    pub fn entangled_fd(wiring: Wiring, k: usize) -> (f64, usize) {
        let base = spec(wiring, 3, 8, &[0]);
        let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 21);
        let selection = TaskSelection::new(vec![vec![1], vec![2]]);
        let teachers: Vec<BlockifiedNetwork<f64>> =
            reg.teachers.iter().map(|t| t.network.cast()).collect();
        let student: BlockifiedNetwork<f64> =
            build_network(&base.with_task_ids(&selection.task_ids()), 22).unwrap().cast();
        let x = images(&base, 4, 23).cast::<f64>();

        let (sf, _) = forward_collect(&student, &x, Producer::Student).unwrap();
        let mut teacher_prefix = Vec::new();
        let mut targets = Vec::new();
        for (n, t) in teachers.iter().enumerate() {
            let (tf, preds): (_, PredictionSet<f64>) =
                forward_collect(t, &x, Producer::Teacher(n)).unwrap();
            teacher_prefix.push(tf[..k - 1].iter().map(|f| f.tensor.clone()).collect());
            targets.push(
                selection.per_teacher[n]
                    .iter()
                    .map(|&task| preds.get(task).unwrap().clone())
                    .collect(),
            );
        }
        let inputs = EntangledInputs {
            images: x.clone(),
            student_prefix: sf[..k - 1].iter().map(|f| f.tensor.clone()).collect(),
            teacher_prefix,
            targets,
        };
        let channels = base.feature_shape(k)[0];
        let mut filters: Vec<FilterModule<f64>> = (0..2)
            .map(|n| FilterModule::new(n, k, channels, 2, 30 + n as u64))
            .collect();
        for (n, f) in filters.iter_mut().enumerate() {
            // a nonzero second layer so gates vary per input
            for (j, name) in ["w2", "b2"].iter().enumerate() {
                let shape = f.params.get(name).unwrap().shape().to_vec();
                *f.params.get_mut(name).unwrap() = random_tensor(&shape, 40 + 2 * n as u64 + j as u64);
            }
        }
        let mut block = student.blocks[k - 1].clone();
        block.params.set_trainable(true);
        let refs: Vec<&BlockifiedNetwork<f64>> = teachers.iter().collect();

        let loss_of = |block: &targetnet::blocknet::Block<f64>, filters: &[FilterModule<f64>]| {
            let mut g = Graph::<f64>::new();
            let fs: Vec<Option<&FilterModule<f64>>> = filters.iter().map(Some).collect();
            let eg = entangled_forward(&mut g, &base, k, block, &fs, &refs, &selection, &inputs, 1.0)
                .unwrap();
            g.value(eg.loss).data()[0]
        };

        let mut g = Graph::<f64>::new();
        let fs: Vec<Option<&FilterModule<f64>>> = filters.iter().map(Some).collect();
        let eg = entangled_forward(&mut g, &base, k, &block, &fs, &refs, &selection, &inputs, 1.0)
            .unwrap();
        let grads = g.backward(eg.loss);

        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (i, &v) in eg.block_vars.iter().enumerate() {
            let value = block.params.param(i).value.clone();
            count += value.numel();
            let numeric = numeric_grad(&value, PATH_EPS, |p| {
                let mut b = block.clone();
                set_param(&mut b.params, i, p);
                loss_of(&b, &filters)
            });
            worst = worst.max(rel_error(grads.get(v).unwrap(), &numeric));
        }
        for n in 0..2 {
            let vars = eg.filter_vars[n].as_ref().unwrap();
            for (i, &v) in vars.iter().enumerate() {
                let value = filters[n].params.param(i).value.clone();
                count += value.numel();
                let numeric = numeric_grad(&value, PATH_EPS, |p| {
                    let mut fl = filters.clone();
                    set_param(&mut fl[n].params, i, p);
                    loss_of(&block, &fl)
                });
                worst = worst.max(rel_error(grads.get(v).unwrap(), &numeric));
            }
        }
        (worst, count)
    }

    /// Largest gap between the recorded block losses of a student cloned
    /// from teacher 0 with saturated gates and the mean teacher entropy on
    /// the held-out rows.
    pub fn self_distillation_gap() -> f64 {
        let base = spec(Wiring::Sequential, 4, 16, &[0]);
        let reg = registry(&base, &[vec![0, 1, 2], vec![3, 4]], 51);
        let x = images(&base, 40, 52);
        let selection = TaskSelection::new(vec![vec![0, 2], vec![]]);
        let config = AmalgamationConfig {
            student_init: StudentInit::CloneTeacher(0),
            optimizer: OptimizerConfig {
                base_lr: 0.0,
                batch_size: 8,
                ..OptimizerConfig::default()
            },
            ..quiet_config(selection.clone())
        };
        let mut state = AmalgamationState::new(&reg, x.clone(), config).unwrap();
        for f in state.bank.values_mut() {
            f.saturate(40.0);
        }
        while state.next_block <= 4 {
            state.train_next_block(&reg).unwrap();
        }
        let rows = state.heldout_rows().to_vec();
        let preds = reg.teachers[0].network.predict(&x.select_rows(&rows), 16).unwrap();
        let per_task: Vec<f64> = selection.per_teacher[0]
            .iter()
            .map(|&t| {
                let p = preds.get(t).unwrap().data();
                p.iter().map(|&v| entropy(v as f64)).sum::<f64>() / p.len() as f64
            })
            .collect();
        let floor = per_task.iter().sum::<f64>() / per_task.len() as f64;
        let table = &state.table;
        let mut worst: f64 = 0.0;
        for k in 0..4 {
            let mean = (0..per_task.len())
                .map(|i| table.heldout[i][k].unwrap())
                .sum::<f64>()
                / per_task.len() as f64;
            worst = worst.max((mean - floor).abs());
            for (i, &h) in per_task.iter().enumerate() {
                worst = worst.max((table.heldout[i][k].unwrap() - h).abs());
            }
        }
        worst
    }

    /// Max abs difference between regrouped predictions and the substituted
    /// forward at each task's branch point, with untouched parameters.
    pub fn regroup_equivalence(wiring: Wiring, points: &[usize]) -> f64 {
        let base = spec(wiring, 4, 16, &[0]);
        let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 61);
        let x = images(&base, 30, 62);
        let selection = TaskSelection::new(vec![vec![1], vec![2, 3]]);
        let result = amalgamate(&reg, x.clone(), quiet_config(selection.clone())).unwrap();
        let pairs = selection.pairs();
        let plan = BranchPlan {
            task_ids: selection.task_ids(),
            teachers: pairs.iter().map(|p| p.0).collect(),
            points: points.to_vec(),
            losses: vec![0.0; points.len()],
            trunk_length: *points.iter().max().unwrap(),
        };
        let model = regroup(&result.student, &reg, &result.bank, &plan).unwrap();
        let batch = images(&base, 6, 63);
        let got = model.predict(&batch, 4).unwrap();
        let (sf, _) = forward_collect(&result.student, &batch, Producer::Student).unwrap();
        let mut worst: f64 = 0.0;
        for (&(n, task), &s) in pairs.iter().zip(points) {
            let teacher = &reg.teachers[n].network;
            let (tf, _) = forward_collect(teacher, &batch, Producer::Teacher(n)).unwrap();
            let filtered = result.bank[&(n, s)].apply(&sf[s - 1]).unwrap();
            let want = forward_substituted(teacher, s, &filtered, &batch, &tf).unwrap();
            worst = worst.max(got.get(task).unwrap().max_abs_diff(want.get(task).unwrap()));
        }
        worst
    }

    /// Relative FD error of `teacher_loss` over every parameter of a small
    /// f64 teacher; analytic side from the tape, numeric side from `predict`.
    pub fn teacher_loss_fd() -> (f64, usize) {
        use targetnet::teachers::{teacher_loss, teacher_loss_graph};
        let s = spec(Wiring::Sequential, 2, 8, &[0, 1]);
        let net: BlockifiedNetwork<f64> = build_network(&s, 71).unwrap().cast();
        let x = images(&s, 5, 72).cast::<f64>();
        let labels = Tensor::new(&[5, 2], vec![1., 0., 0., 1., 1., 1., 0., 0., 1., 0.]).unwrap();

        let mut g = Graph::<f64>::new();
        let vars = net.bind(&mut g);
        let input = net.input_var(&mut g, &x).unwrap();
        let (_, logits) = net.forward_graph(&mut g, &vars, input).unwrap();
        let loss = teacher_loss_graph(&mut g, &logits, &labels).unwrap();
        let grads = g.backward(loss);

        let all_vars: Vec<&Vec<_>> = vars.blocks.iter().chain(&vars.heads).collect();
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (set, sv) in all_vars.iter().enumerate() {
            for (i, &v) in sv.iter().enumerate() {
                let value = net.param_sets().nth(set).unwrap().param(i).value.clone();
                count += value.numel();
                let numeric = numeric_grad(&value, PATH_EPS, |p| {
                    let mut n = net.clone();
                    set_param(n.param_sets_mut().nth(set).unwrap(), i, p);
                    teacher_loss(&n.predict(&x, 8).unwrap(), &labels).unwrap()
                });
                worst = worst.max(rel_error(grads.get(v).unwrap(), &numeric));
            }
        }
        (worst, count)
    }

    /// Relative FD error of a random linear readout of the filter output,
    /// over the input map and the four filter tensors.
    pub fn filter_fd() -> (f64, usize) {
        let x = random_tensor(&[2, 6, 3, 3], 81);
        let mut f = FilterModule::<f64>::new(0, 1, 6, 2, 82);
        for (j, name) in ["w2", "b2"].iter().enumerate() {
            let shape = f.params.get(name).unwrap().shape().to_vec();
            *f.params.get_mut(name).unwrap() = random_tensor(&shape, 83 + j as u64);
        }
        let r = random_tensor(&[2 * 6 * 9], 85);
        let readout = |f: &FilterModule<f64>, x: &Tensor<f64>| {
            let out = f.apply(&targetnet::blocknet::FeatureMap {
                block: 1,
                tensor: x.clone(),
                producer: Producer::Student,
            }).unwrap();
            out.tensor.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut g = Graph::<f64>::new();
        let vars = f.params.bind(&mut g);
        let xv = g.variable(x.clone());
        let y = f.apply_graph(&mut g, &vars, xv).unwrap();
        let flat = g.reshape(y, &[1, 108]).unwrap();
        let rv = g.constant(Tensor::new(&[1, 108], r.data().to_vec()).unwrap());
        let loss = g.linear(flat, rv, None).unwrap();
        let grads = g.backward(loss);

        let mut worst = rel_error(grads.get(xv).unwrap(), &numeric_grad(&x, 1e-6, |p| readout(&f, p)));
        let mut count = x.numel();
        for (i, &v) in vars.iter().enumerate() {
            let value = f.params.param(i).value.clone();
            count += value.numel();
            let numeric = numeric_grad(&value, 1e-6, |p| {
                let mut fl = f.clone();
                set_param(&mut fl.params, i, p);
                readout(&fl, &x)
            });
            worst = worst.max(rel_error(grads.get(v).unwrap(), &numeric));
        }
        (worst, count)
    }

    /// Perturbs each trunk block of models regrouped under every plan of
    /// three tasks over four blocks and counts the task pairs whose jointly
    /// affected blocks differ from `min(S_i, S_j)`. Returns (violations, pairs).
    pub fn sharing_violations() -> (usize, usize) {
        let base = spec(Wiring::Sequential, 4, 16, &[0]);
        let reg = registry(&base, &[vec![0, 1], vec![2, 3]], 91);
        let x = images(&base, 20, 92);
        let selection = TaskSelection::new(vec![vec![1], vec![2, 3]]);
        let result = amalgamate(&reg, x, quiet_config(selection.clone())).unwrap();
        let pairs = selection.pairs();
        let batch = images(&base, 4, 93);
        let (mut violations, mut checked) = (0, 0);
        for code in 0..64usize {
            let points = vec![code % 4 + 1, code / 4 % 4 + 1, code / 16 + 1];
            let plan = BranchPlan {
                task_ids: selection.task_ids(),
                teachers: pairs.iter().map(|p| p.0).collect(),
                points: points.clone(),
                losses: vec![0.0; 3],
                trunk_length: *points.iter().max().unwrap(),
            };
            let model = regroup(&result.student, &reg, &result.bank, &plan).unwrap();
            let plain = model.predict(&batch, 4).unwrap();
            // affected[j][i]: perturbing trunk block j + 1 moves task i
            let mut affected = Vec::new();
            for j in 0..model.trunk.len() {
                let mut m = model.clone();
                let w = m.trunk[j].params.param(0).value.map(|v| v + 0.3);
                set_param_f32(&mut m.trunk[j].params, 0, &w);
                let moved = m.predict(&batch, 4).unwrap();
                affected.push(
                    plan.task_ids
                        .iter()
                        .map(|&t| moved.get(t).unwrap().max_abs_diff(plain.get(t).unwrap()) > 0.0)
                        .collect::<Vec<bool>>(),
                );
            }
            for a in 0..3 {
                for b in a + 1..3 {
                    checked += 1;
                    let shared = affected.iter().filter(|row| row[a] && row[b]).count();
                    let prefix = affected.iter().take_while(|row| row[a] && row[b]).count();
                    if shared != plan.shared_blocks(a, b) || prefix != shared {
                        violations += 1;
                    }
                }
            }
        }
        (violations, checked)
    }

    fn set_param_f32(block: &mut targetnet::nncore::ParameterSet, i: usize, value: &Tensor) {
        let name = block.param(i).name.clone();
        *block.get_mut(&name).unwrap() = value.clone();
    }
}
