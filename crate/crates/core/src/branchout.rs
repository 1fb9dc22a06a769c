//! Branch-out: picks each task's branch block from the loss table, regroups
//! the student trunk with the retained filters and teacher suffixes, and
//! fine-tunes the result against teacher soft targets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::amalgam::{cache_teacher, default_optimizer, split_heldout, LossTable, EVAL_BATCH};
use crate::blocknet::{
    block_input, build_network, ArchitectureSpec, Block, BlockifiedNetwork, Head, PredictionSet,
    TaskSelection, Wiring,
};
use crate::error::{Error, Result};
use crate::filters::{FilterBank, FilterModule};
use crate::nncore::{seeded_rng, Gradients, Graph, OptimizerConfig, ParameterSet, PolySgd, Real, Tensor, Var};
use crate::teachers::{DivergenceGuard, TeacherRegistry};

/// Index of the smallest entry, earliest on ties. `None` for an empty row.
pub fn argmin_earliest(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|b| v < row[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPlan {
    pub task_ids: Vec<usize>,
    pub teachers: Vec<usize>,
    /// 1-based branch block per task.
    pub points: Vec<usize>,
    pub losses: Vec<f64>,
    pub trunk_length: usize,
}

impl BranchPlan {
    pub fn branch_of(&self, task_id: usize) -> Option<usize> {
        self.task_ids
            .iter()
            .position(|&t| t == task_id)
            .map(|i| self.points[i])
    }

    /// Trunk blocks shared by the tasks at positions `i` and `j`.
    pub fn shared_blocks(&self, i: usize, j: usize) -> usize {
        self.points[i].min(self.points[j])
    }

    /// `task_id,teacher_id,branch_block,shared_blocks_with_each_other_task,loss_at_branch`;
    /// the sharing column lists `other_task:blocks` pairs separated by `;`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "task_id,teacher_id,branch_block,shared_blocks_with_each_other_task,loss_at_branch\n",
        );
        for i in 0..self.task_ids.len() {
            let shared: Vec<String> = (0..self.task_ids.len())
                .filter(|&j| j != i)
                .map(|j| format!("{}:{}", self.task_ids[j], self.shared_blocks(i, j)))
                .collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                self.task_ids[i],
                self.teachers[i],
                self.points[i],
                shared.join(";"),
                self.losses[i]
            )
            .expect("string write");
        }
        out
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        fs::write(path, self.report_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per selected task, the block with the lowest held-out loss.
pub fn select_branch_points(table: &LossTable, selection: &TaskSelection) -> Result<BranchPlan> {
    let pairs = selection.pairs();
    let expected: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    if table.task_ids != expected {
        return Err(Error::Selection(format!(
            "loss table covers tasks {:?}, selection is {:?}",
            table.task_ids, expected
        )));
    }
    if table.block_count == 0 {
        return Err(Error::IncompleteTable("no blocks".into()));
    }
    let mut points = Vec::with_capacity(pairs.len());
    let mut losses = Vec::with_capacity(pairs.len());
    for (i, &(_, task)) in pairs.iter().enumerate() {
        let row: Vec<f64> = table.heldout[i]
            .iter()
            .enumerate()
            .map(|(k, v)| {
                v.filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::IncompleteTable(format!("task {task}, block {} has no loss", k + 1))
                })
            })
            .collect::<Result<_>>()?;
        let k = argmin_earliest(&row).expect("non-empty row");
        points.push(k + 1);
        losses.push(row[k]);
    }
    Ok(BranchPlan {
        task_ids: expected,
        teachers: pairs.iter().map(|p| p.0).collect(),
        trunk_length: points.iter().copied().max().unwrap_or(0),
        points,
        losses,
    })
}

/// One task's path: shared trunk up to `branch_block`, the retained filter,
/// copied teacher blocks after it and the teacher's head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBranch<T: Real = f32> {
    pub task_id: usize,
    pub teacher: usize,
    pub branch_block: usize,
    pub filter: FilterModule<T>,
    /// Teacher blocks `1..S-1`, frozen. Only kept under dense wiring, where
    /// the suffix also reads the teacher's earlier features.
    pub teacher_prefix: Vec<Block<T>>,
    /// Teacher blocks `S+1..B`.
    pub suffix: Vec<Block<T>>,
    pub head: Head<T>,
}

/// The pruned student trunk plus every task branch hanging off it.
#[derive(Clone, Debug, PartialEq)]
pub struct RegroupedModel<T: Real = f32> {
    pub spec: ArchitectureSpec,
    pub trunk: Vec<Block<T>>,
    pub branches: Vec<TaskBranch<T>>,
}

#[derive(Clone, Debug)]
pub struct BranchVars {
    pub filter: Vec<Var>,
    pub prefix: Vec<Vec<Var>>,
    pub suffix: Vec<Vec<Var>>,
    pub head: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct RegroupedVars {
    pub trunk: Vec<Vec<Var>>,
    pub branches: Vec<BranchVars>,
}

/// Builds the task networks for `plan`. Teacher parts are copies; the
/// registry is not touched.
pub fn regroup(
    student: &BlockifiedNetwork,
    teachers: &TeacherRegistry,
    bank: &FilterBank,
    plan: &BranchPlan,
) -> Result<RegroupedModel> {
    let b = student.block_count();
    if plan.trunk_length == 0 || plan.trunk_length > b {
        return Err(Error::Regroup(format!(
            "trunk length {} outside 1..={b}",
            plan.trunk_length
        )));
    }
    let mut branches = Vec::with_capacity(plan.task_ids.len());
    for ((&task, &n), &s) in plan.task_ids.iter().zip(&plan.teachers).zip(&plan.points) {
        if s == 0 || s > plan.trunk_length {
            return Err(Error::Regroup(format!(
                "task {task} branches at block {s}, trunk keeps 1..={}",
                plan.trunk_length
            )));
        }
        let teacher = &teachers
            .teachers
            .get(n)
            .ok_or_else(|| Error::Regroup(format!("no teacher {n} for task {task}")))?
            .network;
        if !teacher.spec.same_trunk(&student.spec) {
            return Err(Error::SpecHashMismatch {
                what: format!("teacher {n} block shapes vs the student"),
            });
        }
        let filter = bank
            .get(&(n, s))
            .ok_or_else(|| Error::Regroup(format!("missing filter for teacher {n}, block {s}")))?
            .clone();
        let head = teacher
            .head_position(task)
            .map(|p| teacher.heads[p].clone())
            .ok_or_else(|| Error::Selection(format!("teacher {n} has no head for task {task}")))?;
        let mut teacher_prefix = Vec::new();
        if student.spec.wiring == Wiring::DenseConcat {
            teacher_prefix = teacher.blocks[..s - 1].to_vec();
            for blk in &mut teacher_prefix {
                blk.params.set_trainable(false);
            }
        }
        branches.push(TaskBranch {
            task_id: task,
            teacher: n,
            branch_block: s,
            filter,
            teacher_prefix,
            suffix: teacher.blocks[s..].to_vec(),
            head,
        });
    }
    Ok(RegroupedModel {
        spec: student.spec.clone(),
        trunk: student.blocks[..plan.trunk_length].to_vec(),
        branches,
    })
}

impl<T: Real> RegroupedModel<T> {
    pub fn task_ids(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.task_id).collect()
    }

    pub fn plan_points(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.branch_block).collect()
    }

    fn bind_with(&self, g: &mut Graph<T>, frozen: bool) -> RegroupedVars {
        let mut bind = |p: &ParameterSet<T>| -> Vec<Var> {
            if frozen {
                p.iter().map(|p| g.constant(p.value.clone())).collect()
            } else {
                p.bind(g)
            }
        };
        let trunk = self.trunk.iter().map(|b| bind(&b.params)).collect();
        let branches = self
            .branches
            .iter()
            .map(|br| BranchVars {
                filter: bind(&br.filter.params),
                prefix: br.teacher_prefix.iter().map(|b| bind(&b.params)).collect(),
                suffix: br.suffix.iter().map(|b| bind(&b.params)).collect(),
                head: bind(&br.head.params),
            })
            .collect();
        RegroupedVars { trunk, branches }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> RegroupedVars {
        self.bind_with(g, false)
    }

    pub fn bind_frozen(&self, g: &mut Graph<T>) -> RegroupedVars {
        self.bind_with(g, true)
    }

    /// Per-branch logits `[N, arity]`, in branch order.
    pub fn logits_graph(&self, g: &mut Graph<T>, vars: &RegroupedVars, input: Var) -> Result<Vec<Var>> {
        let spec = &self.spec;
        let mut trunk = vec![input];
        for (k, (blk, v)) in self.trunk.iter().zip(&vars.trunk).enumerate() {
            let x = block_input(spec, g, k + 1, &trunk)?;
            let y = blk.forward(g, v, x)?;
            trunk.push(y);
        }
        let b = spec.block_count();
        let mut out = Vec::with_capacity(self.branches.len());
        for (br, bv) in self.branches.iter().zip(&vars.branches) {
            let s = br.branch_block;
            let mut feats = if br.teacher_prefix.is_empty() {
                trunk[..s].to_vec()
            } else {
                let mut f = vec![input];
                for (j, (blk, v)) in br.teacher_prefix.iter().zip(&bv.prefix).enumerate() {
                    let x = block_input(spec, g, j + 1, &f)?;
                    let y = blk.forward(g, v, x)?;
                    f.push(y);
                }
                f
            };
            let filtered = br.filter.apply_graph(g, &bv.filter, trunk[s])?;
            feats.push(filtered);
            for (k, (blk, v)) in (s + 1..=b).zip(br.suffix.iter().zip(&bv.suffix)) {
                let x = block_input(spec, g, k, &feats)?;
                let y = blk.forward(g, v, x)?;
                feats.push(y);
            }
            let pooled = g.global_avg_pool(*feats.last().expect("non-empty"))?;
            out.push(br.head.logits(g, &bv.head, pooled)?);
        }
        Ok(out)
    }

    pub fn input_var(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let (_, c, h, w) = batch.dims4()?;
        let i = self.spec.input;
        if (c, h, w) != (i.channels, i.height, i.width) {
            return Err(Error::shape(
                "regrouped network input",
                &[i.channels, i.height, i.width],
                &[c, h, w],
            ));
        }
        Ok(g.constant(batch.clone()))
    }

    pub fn predict(&self, images: &Tensor<T>, batch_size: usize) -> Result<PredictionSet<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut columns: Vec<Vec<T>> = vec![Vec::with_capacity(n); self.branches.len()];
        let mut arities = vec![1; self.branches.len()];
        for start in (0..n).step_by(batch_size.max(1)) {
            let rows: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
            let mut g = Graph::new();
            let vars = self.bind_frozen(&mut g);
            let input = self.input_var(&mut g, &images.select_rows(&rows))?;
            let logits = self.logits_graph(&mut g, &vars, input)?;
            for (i, &l) in logits.iter().enumerate() {
                let p = g.sigmoid(l);
                arities[i] = g.value(p).shape()[1];
                columns[i].extend_from_slice(g.value(p).data());
            }
        }
        let probs = columns
            .into_iter()
            .zip(arities)
            .map(|(c, a)| Tensor::new(&[n, a], c))
            .collect::<Result<_>>()?;
        Ok(PredictionSet {
            task_ids: self.task_ids(),
            probs,
        })
    }

    /// Every set except the frozen teacher prefixes, in binding order.
    pub fn trainable_sets_mut(&mut self) -> Vec<&mut ParameterSet<T>> {
        let mut sets: Vec<&mut ParameterSet<T>> =
            self.trunk.iter_mut().map(|b| &mut b.params).collect();
        for br in &mut self.branches {
            sets.push(&mut br.filter.params);
            sets.extend(br.suffix.iter_mut().map(|b| &mut b.params));
            sets.push(&mut br.head.params);
        }
        sets
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for set in self.trainable_sets_mut() {
            set.set_trainable(trainable);
        }
    }

    /// Adds tape gradients to the sets of [`trainable_sets_mut`](Self::trainable_sets_mut).
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, vars: &RegroupedVars) {
        let mut flat: Vec<&Vec<Var>> = vars.trunk.iter().collect();
        for bv in &vars.branches {
            flat.push(&bv.filter);
            flat.extend(bv.suffix.iter());
            flat.push(&bv.head);
        }
        for (set, v) in self.trainable_sets_mut().into_iter().zip(flat) {
            set.accumulate_grads(grads, v);
        }
    }

    /// Distinct parameter values; the trunk counts once however many
    /// branches share it.
    pub fn num_parameters(&self) -> usize {
        let blocks = |bs: &[Block<T>]| bs.iter().map(|b| b.params.num_values()).sum::<usize>();
        blocks(&self.trunk)
            + self
                .branches
                .iter()
                .map(|br| {
                    br.filter.params.num_values()
                        + blocks(&br.teacher_prefix)
                        + blocks(&br.suffix)
                        + br.head.params.num_values()
                })
                .sum::<usize>()
    }

    /// `trunk.block{k}.*` and `branch{task}.{filter,prefix.block{k},suffix.block{k},head}.*`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut push = |prefix: String, set: &ParameterSet<T>| {
            for p in set.iter() {
                out.push((format!("{prefix}.{}", p.name), p.value.clone()));
            }
        };
        for b in &self.trunk {
            push(format!("trunk.block{}", b.index), &b.params);
        }
        for br in &self.branches {
            let t = br.task_id;
            push(format!("branch{t}.filter"), &br.filter.params);
            for b in &br.teacher_prefix {
                push(format!("branch{t}.prefix.block{}", b.index), &b.params);
            }
            for b in &br.suffix {
                push(format!("branch{t}.suffix.block{}", b.index), &b.params);
            }
            push(format!("branch{t}.head"), &br.head.params);
        }
        out
    }
}

impl RegroupedModel {
    /// Rebuilds a model saved by [`named_tensors`](Self::named_tensors).
    pub fn from_named(
        spec: &ArchitectureSpec,
        plan: &BranchPlan,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let template = build_network(spec, 0)?;
        let b = template.block_count();
        let mut get = |name: String| -> Result<Tensor> {
            lookup(&name).ok_or_else(|| Error::Dataset(format!("missing tensor '{name}'")))
        };
        if plan.trunk_length == 0 || plan.trunk_length > b {
            return Err(Error::Regroup(format!("trunk length {} outside 1..={b}", plan.trunk_length)));
        }
        let trunk = (1..=plan.trunk_length)
            .map(|k| fill_block(&template.blocks[k - 1], "trunk", &mut get))
            .collect::<Result<Vec<_>>>()?;
        let mut branches = Vec::new();
        for ((&task, &n), &s) in plan.task_ids.iter().zip(&plan.teachers).zip(&plan.points) {
            if s == 0 || s > plan.trunk_length {
                return Err(Error::Regroup(format!("task {task} branches at pruned block {s}")));
            }
            let teacher_prefix = if spec.wiring == Wiring::DenseConcat {
                (1..s)
                    .map(|k| {
                        let mut blk = fill_block(&template.blocks[k - 1], &format!("branch{task}.prefix"), &mut get)?;
                        blk.params.set_trainable(false);
                        Ok(blk)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let suffix = (s + 1..=b)
                .map(|k| fill_block(&template.blocks[k - 1], &format!("branch{task}.suffix"), &mut get))
                .collect::<Result<Vec<_>>>()?;
            let fparams = named_set(&format!("branch{task}.filter"), &["w1", "b1", "w2", "b2"], &mut get)?;
            let [hidden, channels] = <[usize; 2]>::try_from(fparams.get("w1").expect("added").shape())
                .map_err(|_| Error::Dataset(format!("branch{task}.filter.w1 is not a matrix")))?;
            let filter = FilterModule {
                teacher: n,
                block: s,
                channels,
                reduction: (channels / hidden.max(1)).max(1),
                params: fparams,
            };
            let head = Head {
                task_id: task,
                params: named_set(&format!("branch{task}.head"), &["fc.weight", "fc.bias"], &mut get)?,
            };
            branches.push(TaskBranch {
                task_id: task,
                teacher: n,
                branch_block: s,
                filter,
                teacher_prefix,
                suffix,
                head,
            });
        }
        Ok(RegroupedModel {
            spec: spec.clone(),
            trunk,
            branches,
        })
    }
}

fn fill_block(
    template: &Block,
    prefix: &str,
    get: &mut impl FnMut(String) -> Result<Tensor>,
) -> Result<Block> {
    let mut blk = template.clone();
    let k = blk.index;
    for p in blk.params.iter_mut() {
        let name = format!("{prefix}.block{k}.{}", p.name);
        let t = get(name.clone())?;
        if t.shape() != p.value.shape() {
            return Err(Error::shape(name, p.value.shape(), t.shape()));
        }
        p.value = t;
    }
    Ok(blk)
}

fn named_set(
    prefix: &str,
    names: &[&str],
    get: &mut impl FnMut(String) -> Result<Tensor>,
) -> Result<ParameterSet> {
    let mut set = ParameterSet::new();
    for name in names {
        set.add(name, get(format!("{prefix}.{name}"))?);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default = "default_ft_heldout")]
    pub heldout_fraction: f64,
}

fn default_ft_epochs() -> usize {
    10
}
fn default_ft_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        base_lr: 0.003,
        ..default_optimizer()
    }
}
fn default_one() -> f64 {
    1.0
}
fn default_ft_heldout() -> f64 {
    0.2
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: default_ft_epochs(),
            optimizer: default_ft_optimizer(),
            temperature: 1.0,
            heldout_fraction: default_ft_heldout(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "heldout_fraction {} outside (0, 0.5]",
                self.heldout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task_ids: Vec<usize>,
    /// Held-out loss per task before any update.
    pub before: Vec<f64>,
    /// Held-out loss per task of the kept snapshot.
    pub after: Vec<f64>,
    /// `[task][epoch]`, entry 0 before training.
    pub curves: Vec<Vec<f64>>,
    /// Epoch of the kept snapshot; 0 means the input parameters were kept.
    pub best_epoch: usize,
}

struct FinetuneData {
    images: Tensor,
    targets: Vec<Tensor>,
    inv_t: f32,
}

fn batch_losses(
    model: &RegroupedModel,
    g: &mut Graph<f32>,
    vars: &RegroupedVars,
    data: &FinetuneData,
    rows: &[usize],
) -> Result<Vec<Var>> {
    let input = model.input_var(g, &data.images.select_rows(rows))?;
    let logits = model.logits_graph(g, vars, input)?;
    logits
        .into_iter()
        .zip(&data.targets)
        .map(|(z, t)| {
            let z = if data.inv_t == 1.0 { z } else { g.scale(z, data.inv_t) };
            g.bce_logits(z, t.select_rows(rows))
        })
        .collect()
}

fn heldout_losses(model: &RegroupedModel, data: &FinetuneData, rows: &[usize]) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; model.branches.len()];
    for chunk in rows.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let vars = model.bind_frozen(&mut g);
        let losses = batch_losses(model, &mut g, &vars, data, chunk)?;
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += g.value(l).data()[0] as f64 * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
}

/// End-to-end training of every branch (shared trunk included) against the
/// teachers' soft targets on `images`. The snapshot with the lowest mean
/// held-out loss among those no worse than the start on any task is kept.
pub fn finetune(
    model: &mut RegroupedModel,
    teachers: &TeacherRegistry,
    images: &Tensor,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Dataset("fine-tuning needs at least 2 unlabeled images".into()));
    }
    let targets = model
        .branches
        .iter()
        .map(|br| {
            let t = teachers
                .teachers
                .get(br.teacher)
                .ok_or_else(|| Error::Regroup(format!("no teacher {}", br.teacher)))?;
            Ok(cache_teacher(&t.network, &[br.task_id], images, config.temperature)?
                .targets
                .remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = FinetuneData {
        images: images.clone(),
        targets,
        inv_t: (1.0 / config.temperature) as f32,
    };
    let (train_rows, heldout_rows) = split_heldout(n, config.heldout_fraction, config.optimizer.seed);
    let before = heldout_losses(model, &data, &heldout_rows)?;
    let mut curves: Vec<Vec<f64>> = before.iter().map(|&v| vec![v]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut best = (mean(&before), 0, before.clone(), model.clone());

    model.set_trainable(true);
    let bs = config.optimizer.batch_size;
    let mut opt = PolySgd::new(config.optimizer.clone(), config.epochs * train_rows.len().div_ceil(bs));
    let mut rng = seeded_rng(config.optimizer.seed, "branchout.finetune");
    let mut guard = DivergenceGuard::default();
    let mut order = train_rows;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for rows in order.chunks(bs) {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let losses = batch_losses(model, &mut g, &vars, &data, rows)?;
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, 1.0 / losses.len() as f32);
            sum += g.value(loss).data()[0] as f64 * rows.len() as f64;
            let grads = g.backward(loss);
            model.accumulate_grads(&grads, &vars);
            opt.step(model.trainable_sets_mut())?;
        }
        guard.observe("fine-tuning", epoch - 1, sum / order.len() as f64)?;
        let held = heldout_losses(model, &data, &heldout_rows)?;
        log::info!("fine-tune epoch {epoch}: held-out {held:?}");
        for (c, &v) in curves.iter_mut().zip(&held) {
            c.push(v);
        }
        let no_worse = held.iter().zip(&before).all(|(h, b)| h <= b);
        if no_worse && mean(&held) < best.0 {
            best = (mean(&held), epoch, held, model.clone());
        }
    }
    let (_, best_epoch, after, snapshot) = best;
    *model = snapshot;
    model.set_trainable(false);
    Ok(FinetuneReport {
        task_ids: model.task_ids(),
        before,
        after,
        curves,
        best_epoch,
    })
}

/// Teacher index per selected task, for callers holding only a selection.
pub fn teacher_map(selection: &TaskSelection) -> BTreeMap<usize, usize> {
    selection.pairs().into_iter().map(|(n, t)| (t, n)).collect()
}
