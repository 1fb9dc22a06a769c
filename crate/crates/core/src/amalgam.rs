//! Block-wise entangled training of the student from unlabeled images.
//!
//! For block `k` the student's frozen prefix produces `F_u^{k-1}` (or, with
//! dense wiring, all of `F_u^0..F_u^{k-1}`), the trainable block `k` produces
//! `F_u^k`, and every teacher with selected tasks receives its filtered copy
//! in place of its own `F_n^k`. The loss is the soft cross-entropy between the
//! teacher's own predictions and the substituted ones, averaged over the
//! selected tasks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocknet::{
    block_input, build_network, ArchitectureSpec, Block, BlockifiedNetwork, PredictionSet,
    TaskSelection,
};
use crate::dataio::audit;
use crate::error::{Error, Result};
use crate::filters::{make_filter_bank, FilterBank, FilterModule, DEFAULT_REDUCTION};
use crate::nncore::{
    bce_mean, derive_seed, seeded_rng, Graph, OptimizerConfig, PolySgd, Real, Tensor, Var,
};
use crate::teachers::{DivergenceGuard, TeacherRegistry};

/// `(1/|C|) * sum_{i in C} mean_batch H(p_teacher_i, p_student_i)`.
pub fn amalgamation_loss<T: Real>(
    teacher_preds: &PredictionSet<T>,
    substituted_preds: &PredictionSet<T>,
    selection: &TaskSelection,
) -> Result<f64> {
    let tasks = selection.task_ids();
    if tasks.is_empty() {
        return Err(Error::Selection("no task selected".into()));
    }
    let mut total = 0.0;
    for t in &tasks {
        let missing = || Error::Selection(format!("predictions for task {t} missing"));
        let pt = teacher_preds.get(*t).ok_or_else(missing)?;
        let ps = substituted_preds.get(*t).ok_or_else(missing)?;
        if pt.shape() != ps.shape() {
            return Err(Error::shape(format!("predictions of task {t}"), pt.shape(), ps.shape()));
        }
        total += bce_mean(ps.data(), pt.data()).as_f64();
    }
    Ok(total / tasks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    CloneTeacher(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmalgamationConfig {
    pub selection: TaskSelection,
    #[serde(default = "default_epochs")]
    pub epochs_per_block: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Stop a block early once the held-out loss has not improved for this
    /// many epochs.
    #[serde(default)]
    pub plateau_window: Option<usize>,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_init")]
    pub student_init: StudentInit,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_reduction")]
    pub filter_reduction: usize,
}

fn default_epochs() -> usize {
    20
}
/// Clipping matters here: a random block feeding a trained suffix starts
/// with saturated wrong predictions, and unclipped first steps kill its ReLUs.
pub fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        momentum: 0.9,
        max_grad_norm: Some(1.0),
        ..OptimizerConfig::default()
    }
}
fn default_heldout() -> f64 {
    0.2
}
fn default_temperature() -> f64 {
    1.0
}
fn default_init() -> StudentInit {
    StudentInit::Random
}
fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

impl AmalgamationConfig {
    pub fn new(selection: TaskSelection) -> Self {
        AmalgamationConfig {
            selection,
            epochs_per_block: default_epochs(),
            optimizer: default_optimizer(),
            plateau_window: None,
            heldout_fraction: default_heldout(),
            temperature: default_temperature(),
            student_init: default_init(),
            init_seed: 0,
            filter_reduction: default_reduction(),
        }
    }

    pub fn validate(&self, teachers: &TeacherRegistry) -> Result<()> {
        self.selection.validate(&teachers.task_groups())?;
        self.optimizer.validate()?;
        if self.epochs_per_block == 0 {
            return Err(Error::Config("epochs_per_block must be positive".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "heldout_fraction {} outside (0, 0.5]",
                self.heldout_fraction
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.plateau_window == Some(0) {
            return Err(Error::Config("plateau_window must be positive".into()));
        }
        if let StudentInit::CloneTeacher(n) = self.student_init {
            if n >= teachers.len() {
                return Err(Error::Config(format!("cannot clone missing teacher {n}")));
            }
        }
        Ok(())
    }
}

/// Held-out losses per (selected task, block) plus their per-epoch curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub task_ids: Vec<usize>,
    /// Teacher index of each task.
    pub teachers: Vec<usize>,
    pub block_count: usize,
    /// `[task][block - 1]`.
    pub heldout: Vec<Vec<Option<f64>>>,
    /// `[task][block - 1][epoch]`; entry 0 is the loss before training.
    pub curves: Vec<Vec<Vec<f64>>>,
}

impl LossTable {
    pub fn new(selection: &TaskSelection, block_count: usize) -> Self {
        let pairs = selection.pairs();
        LossTable {
            task_ids: pairs.iter().map(|p| p.1).collect(),
            teachers: pairs.iter().map(|p| p.0).collect(),
            block_count,
            heldout: vec![vec![None; block_count]; pairs.len()],
            curves: vec![vec![Vec::new(); block_count]; pairs.len()],
        }
    }

    pub fn row(&self, task_id: usize) -> Option<&[Option<f64>]> {
        self.task_ids
            .iter()
            .position(|&t| t == task_id)
            .map(|i| self.heldout[i].as_slice())
    }

    pub fn is_complete(&self) -> bool {
        self.heldout
            .iter()
            .all(|r| r.iter().all(|v| v.is_some_and(f64::is_finite)))
    }

    pub fn curve_file(task_id: usize, block: usize) -> String {
        format!("curves/task{task_id}_block{block}.csv")
    }

    /// `loss_table.csv` (`task_id,block_index,heldout_loss,epoch_curve_path`)
    /// plus one `epoch,heldout_loss` file per entry under `curves/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("curves")).map_err(|e| Error::io(dir, e))?;
        let mut table = String::from("task_id,block_index,heldout_loss,epoch_curve_path\n");
        for (i, &t) in self.task_ids.iter().enumerate() {
            for k in 1..=self.block_count {
                let file = Self::curve_file(t, k);
                let loss = self.heldout[i][k - 1].map(|v| v.to_string()).unwrap_or_default();
                writeln!(table, "{t},{k},{loss},{file}").expect("string write");
                let mut curve = String::from("epoch,heldout_loss\n");
                for (e, v) in self.curves[i][k - 1].iter().enumerate() {
                    writeln!(curve, "{e},{v}").expect("string write");
                }
                let path = dir.join(&file);
                fs::write(&path, curve).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join("loss_table.csv");
        fs::write(&path, table).map_err(|e| Error::io(&path, e))
    }

    /// Reads the table written by [`write`](Self::write). Curves are not
    /// reloaded; the teacher of each task comes from `selection`.
    pub fn read(path: &Path, selection: &TaskSelection) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run amalgamate first".into(),
            });
        }
        let mut r = csv::Reader::from_reader(audit::open(path)?);
        let mut rows: Vec<(usize, usize, Option<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<usize> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::IncompleteTable(format!("bad index '{}'", &rec[i])))
            };
            let loss = if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse::<f64>().map_err(|_| {
                    Error::IncompleteTable(format!("bad loss '{}'", &rec[2]))
                })?)
            };
            rows.push((parse(0)?, parse(1)?, loss));
        }
        let block_count = rows.iter().map(|r| r.1).max().unwrap_or(0);
        let mut table = LossTable::new(selection, block_count);
        for (t, k, loss) in rows {
            let i = table.task_ids.iter().position(|&x| x == t).ok_or_else(|| {
                Error::IncompleteTable(format!("task {t} is not in the selection"))
            })?;
            if k == 0 {
                return Err(Error::IncompleteTable("block indices start at 1".into()));
            }
            table.heldout[i][k - 1] = loss;
        }
        Ok(table)
    }
}

/// One batch worth of constant inputs for the entangled forward.
#[derive(Clone, Debug)]
pub struct EntangledInputs<T: Real = f32> {
    pub images: Tensor<T>,
    /// Student `F_u^1..F_u^{k-1}`.
    pub student_prefix: Vec<Tensor<T>>,
    /// Per teacher, its own `F_n^1..F_n^{k-1}`.
    pub teacher_prefix: Vec<Vec<Tensor<T>>>,
    /// Per teacher, the soft targets `[N, 1]` of its selected tasks in
    /// selection order.
    pub targets: Vec<Vec<Tensor<T>>>,
}

pub struct EntangledGraph {
    pub loss: Var,
    /// Per selected task in selection order.
    pub task_losses: Vec<Var>,
    pub block_vars: Vec<Var>,
    /// Per teacher (`None` when it has no selected task).
    pub filter_vars: Vec<Option<Vec<Var>>>,
}

/// Builds the loss of training block `k` on the tape. Parameters are bound
/// according to their trainable flags.
#[allow(clippy::too_many_arguments)]
pub fn entangled_forward<T: Real>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    k: usize,
    block: &Block<T>,
    filters: &[Option<&FilterModule<T>>],
    teachers: &[&BlockifiedNetwork<T>],
    selection: &TaskSelection,
    inputs: &EntangledInputs<T>,
    temperature: f64,
) -> Result<EntangledGraph> {
    if inputs.student_prefix.len() != k - 1 {
        return Err(Error::Spec(format!(
            "block {k} needs {} student prefix features, got {}",
            k - 1,
            inputs.student_prefix.len()
        )));
    }
    let image = g.constant(inputs.images.clone());
    let mut feats = vec![image];
    feats.extend(inputs.student_prefix.iter().map(|t| g.constant(t.clone())));
    let block_vars = block.params.bind(g);
    let x = block_input(spec, g, k, &feats)?;
    let fu = block.forward(g, &block_vars, x)?;

    let inv_t = T::of(1.0 / temperature);
    let mut task_losses = Vec::with_capacity(selection.total());
    let mut filter_vars = Vec::with_capacity(teachers.len());
    for (n, teacher) in teachers.iter().enumerate() {
        let chosen = &selection.per_teacher[n];
        if chosen.is_empty() {
            filter_vars.push(None);
            continue;
        }
        let filter = filters[n].ok_or_else(|| {
            Error::Regroup(format!("missing filter for teacher {n}, block {k}"))
        })?;
        let fv = filter.params.bind(g);
        let fun = filter.apply_graph(g, &fv, fu)?;
        let tv = teacher.bind_frozen(g);
        let mut prefix = vec![image];
        prefix.extend(inputs.teacher_prefix[n].iter().map(|t| g.constant(t.clone())));
        let logits = teacher.substituted_logits(g, &tv, k, &prefix, fun)?;
        for (j, &task) in chosen.iter().enumerate() {
            let pos = teacher.head_position(task).ok_or_else(|| {
                Error::Selection(format!("teacher {n} has no head for task {task}"))
            })?;
            let z = if temperature == 1.0 {
                logits[pos]
            } else {
                g.scale(logits[pos], inv_t)
            };
            task_losses.push(g.bce_logits(z, inputs.targets[n][j].clone())?);
        }
        filter_vars.push(Some(fv));
    }
    let mut total = task_losses[0];
    for &l in &task_losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, T::of(1.0 / task_losses.len() as f64));
    Ok(EntangledGraph {
        loss,
        task_losses,
        block_vars,
        filter_vars,
    })
}

/// Deterministic split of `0..n` into (training rows, held-out rows).
pub fn split_heldout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut seeded_rng(seed, "amalgam.heldout"));
    let h = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let mut heldout = rows.split_off(n - h);
    rows.sort_unstable();
    heldout.sort_unstable();
    (rows, heldout)
}

/// Teacher-side constants over the whole unlabeled pool.
pub(crate) struct TeacherCache {
    /// `F_n^1..F_n^B`, each `[N, C, H, W]`.
    pub(crate) features: Vec<Tensor>,
    /// Soft targets of the selected tasks, each `[N, 1]`.
    pub(crate) targets: Vec<Tensor>,
}

pub(crate) const EVAL_BATCH: usize = 64;

pub(crate) fn cache_teacher(
    teacher: &BlockifiedNetwork,
    tasks: &[usize],
    images: &Tensor,
    temperature: f64,
) -> Result<TeacherCache> {
    let n = images.shape()[0];
    let b = teacher.block_count();
    let mut feats: Vec<Vec<f32>> = vec![Vec::new(); b];
    let mut targets: Vec<Vec<f32>> = vec![Vec::with_capacity(n); tasks.len()];
    let positions: Vec<usize> = tasks
        .iter()
        .map(|&t| {
            teacher
                .head_position(t)
                .ok_or_else(|| Error::Selection(format!("teacher has no head for task {t}")))
        })
        .collect::<Result<_>>()?;
    for start in (0..n).step_by(EVAL_BATCH) {
        let rows: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut g = Graph::new();
        let vars = teacher.bind_frozen(&mut g);
        let input = teacher.input_var(&mut g, &images.select_rows(&rows))?;
        let (fs, logits) = teacher.forward_graph(&mut g, &vars, input)?;
        for (k, f) in fs[1..].iter().enumerate() {
            feats[k].extend_from_slice(g.value(*f).data());
        }
        for (j, &pos) in positions.iter().enumerate() {
            let z = g.scale(logits[pos], 1.0 / temperature as f32);
            let p = g.sigmoid(z);
            targets[j].extend_from_slice(g.value(p).data());
        }
    }
    let features = feats
        .into_iter()
        .enumerate()
        .map(|(k, data)| {
            let [c, h, w] = teacher.spec.feature_shape(k + 1);
            Tensor::new(&[n, c, h, w], data)
        })
        .collect::<Result<_>>()?;
    let targets = targets
        .into_iter()
        .map(|d| Tensor::new(&[n, 1], d))
        .collect::<Result<_>>()?;
    Ok(TeacherCache { features, targets })
}

/// Student, filter bank and loss table under construction.
pub struct AmalgamationState {
    pub student: BlockifiedNetwork,
    pub bank: FilterBank,
    pub table: LossTable,
    /// Next block to train (1-based); blocks before it are frozen.
    pub next_block: usize,
    config: AmalgamationConfig,
    images: Tensor,
    train_rows: Vec<usize>,
    heldout_rows: Vec<usize>,
    caches: Vec<TeacherCache>,
    /// `F_u^1..F_u^{next_block-1}` over the whole pool.
    student_features: Vec<Tensor>,
}

pub struct AmalgamationResult {
    pub student: BlockifiedNetwork,
    pub bank: FilterBank,
    pub table: LossTable,
    pub heldout_rows: Vec<usize>,
}

impl AmalgamationState {
    /// `images` is the unlabeled pool `[N, C, H, W]`; nothing else about the
    /// data is available to training.
    pub fn new(
        teachers: &TeacherRegistry,
        images: Tensor,
        config: AmalgamationConfig,
    ) -> Result<Self> {
        config.validate(teachers)?;
        let spec = teachers.spec().with_task_ids(&config.selection.task_ids());
        for (n, t) in teachers.teachers.iter().enumerate() {
            if t.network.block_count() != spec.block_count() || !t.network.spec.same_trunk(&spec) {
                return Err(Error::SpecHashMismatch {
                    what: format!("teacher {n} block shapes vs teacher 0"),
                });
            }
        }
        let n = images.shape().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::Dataset("amalgamation needs at least 2 unlabeled images".into()));
        }
        let mut student = build_network(&spec, config.init_seed)?;
        if let StudentInit::CloneTeacher(t) = config.student_init {
            student.blocks = teachers.teachers[t].network.blocks.clone();
        }
        student.set_trainable(false);
        let mut bank = make_filter_bank(
            teachers,
            &spec,
            config.filter_reduction,
            derive_seed(config.init_seed, "amalgam.filters"),
        )?;
        for f in bank.values_mut() {
            f.params.set_trainable(false);
        }
        let (train_rows, heldout_rows) =
            split_heldout(n, config.heldout_fraction, config.optimizer.seed);
        let caches = teachers
            .teachers
            .iter()
            .zip(&config.selection.per_teacher)
            .map(|(t, tasks)| cache_teacher(&t.network, tasks, &images, config.temperature))
            .collect::<Result<_>>()?;
        Ok(AmalgamationState {
            table: LossTable::new(&config.selection, spec.block_count()),
            student,
            bank,
            next_block: 1,
            config,
            images,
            train_rows,
            heldout_rows,
            caches,
            student_features: Vec::new(),
        })
    }

    pub fn config(&self) -> &AmalgamationConfig {
        &self.config
    }

    pub fn heldout_rows(&self) -> &[usize] {
        &self.heldout_rows
    }

    pub fn train_rows(&self) -> &[usize] {
        &self.train_rows
    }

    fn inputs(&self, k: usize, rows: &[usize]) -> EntangledInputs {
        EntangledInputs {
            images: self.images.select_rows(rows),
            student_prefix: self.student_features[..k - 1]
                .iter()
                .map(|f| f.select_rows(rows))
                .collect(),
            teacher_prefix: self
                .caches
                .iter()
                .map(|c| c.features[..k - 1].iter().map(|f| f.select_rows(rows)).collect())
                .collect(),
            targets: self
                .caches
                .iter()
                .map(|c| c.targets.iter().map(|t| t.select_rows(rows)).collect())
                .collect(),
        }
    }

    fn graph_for(
        &self,
        g: &mut Graph<f32>,
        k: usize,
        teachers: &TeacherRegistry,
        rows: &[usize],
    ) -> Result<EntangledGraph> {
        let filters: Vec<Option<&FilterModule>> =
            (0..teachers.len()).map(|n| self.bank.get(&(n, k))).collect();
        let nets: Vec<&BlockifiedNetwork> = teachers.teachers.iter().map(|t| &t.network).collect();
        entangled_forward(
            g,
            &self.student.spec,
            k,
            &self.student.blocks[k - 1],
            &filters,
            &nets,
            &self.config.selection,
            &self.inputs(k, rows),
            self.config.temperature,
        )
    }

    /// Per selected task, the mean substituted loss over `rows` with the
    /// current parameters.
    pub fn evaluate(&self, k: usize, teachers: &TeacherRegistry, rows: &[usize]) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; self.config.selection.total()];
        for chunk in rows.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let eg = self.graph_for(&mut g, k, teachers, chunk)?;
            for (s, &l) in sums.iter_mut().zip(&eg.task_losses) {
                *s += g.value(l).data()[0] as f64 * chunk.len() as f64;
            }
        }
        Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
    }

    /// Trains block `next_block` and its filters, records its held-out
    /// losses, then freezes them and extends the student feature cache.
    pub fn train_next_block(&mut self, teachers: &TeacherRegistry) -> Result<Vec<f64>> {
        let k = self.next_block;
        let b = self.student.block_count();
        if k > b {
            return Err(Error::Config(format!("all {b} blocks are already trained")));
        }
        let active: Vec<usize> = (0..teachers.len())
            .filter(|&n| !self.config.selection.per_teacher[n].is_empty())
            .collect();
        self.student.blocks[k - 1].params.set_trainable(true);
        for &n in &active {
            self.bank
                .get_mut(&(n, k))
                .ok_or_else(|| Error::Regroup(format!("missing filter for teacher {n}, block {k}")))?
                .params
                .set_trainable(true);
        }

        let epochs = self.config.epochs_per_block;
        let bs = self.config.optimizer.batch_size;
        let mut opt = PolySgd::new(
            self.config.optimizer.clone(),
            epochs * self.train_rows.len().div_ceil(bs),
        );
        let mut rng = seeded_rng(self.config.optimizer.seed, &format!("amalgam.block{k}"));
        let mut guard = DivergenceGuard::default();
        let mut curves: Vec<Vec<f64>> = self
            .evaluate(k, teachers, &self.heldout_rows)?
            .into_iter()
            .map(|v| vec![v])
            .collect();
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        let mut order = self.train_rows.clone();
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for rows in order.chunks(bs) {
                let mut g = Graph::new();
                let eg = self.graph_for(&mut g, k, teachers, rows)?;
                sum += g.value(eg.loss).data()[0] as f64 * rows.len() as f64;
                let grads = g.backward(eg.loss);
                let block = &mut self.student.blocks[k - 1].params;
                block.accumulate_grads(&grads, &eg.block_vars);
                for &n in &active {
                    let fv = eg.filter_vars[n].as_ref().expect("active teacher");
                    self.bank
                        .get_mut(&(n, k))
                        .expect("checked above")
                        .params
                        .accumulate_grads(&grads, fv);
                }
                let mut sets = vec![&mut self.student.blocks[k - 1].params];
                for (key, f) in self.bank.iter_mut() {
                    if key.1 == k && active.contains(&key.0) {
                        sets.push(&mut f.params);
                    }
                }
                opt.step(sets)?;
            }
            let train_loss = sum / self.train_rows.len() as f64;
            guard.observe(&format!("amalgamation block {k}"), epoch, train_loss)?;
            let held = self.evaluate(k, teachers, &self.heldout_rows)?;
            let mean = held.iter().sum::<f64>() / held.len() as f64;
            log::info!("block {k} epoch {epoch}: train {train_loss:.5}, held-out {mean:.5}");
            for (c, v) in curves.iter_mut().zip(&held) {
                c.push(*v);
            }
            if mean < best - 1e-9 {
                best = mean;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if self.config.plateau_window.is_some_and(|w| since_best >= w) {
                log::info!("block {k}: held-out loss plateaued after {} epochs", epoch + 1);
                break;
            }
        }
        let recorded: Vec<f64> = curves.iter().map(|c| *c.last().expect("non-empty")).collect();
        for (i, (c, &v)) in curves.into_iter().zip(&recorded).enumerate() {
            if !v.is_finite() {
                return Err(Error::Divergence(format!("non-finite held-out loss at block {k}")));
            }
            self.table.heldout[i][k - 1] = Some(v);
            self.table.curves[i][k - 1] = c;
        }

        self.student.blocks[k - 1].params.set_trainable(false);
        for f in self.bank.values_mut() {
            f.params.set_trainable(false);
        }
        self.student_features.push(self.student_block_features(k)?);
        self.next_block += 1;
        Ok(recorded)
    }

    fn student_block_features(&self, k: usize) -> Result<Tensor> {
        let n = self.images.shape()[0];
        let block = &self.student.blocks[k - 1];
        let mut data = Vec::new();
        for start in (0..n).step_by(EVAL_BATCH) {
            let rows: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let mut g = Graph::new();
            let mut feats = vec![g.constant(self.images.select_rows(&rows))];
            for f in &self.student_features {
                feats.push(g.constant(f.select_rows(&rows)));
            }
            let vars: Vec<Var> = block.params.iter().map(|p| g.constant(p.value.clone())).collect();
            let x = block_input(&self.student.spec, &mut g, k, &feats)?;
            let y = block.forward(&mut g, &vars, x)?;
            data.extend_from_slice(g.value(y).data());
        }
        let [c, h, w] = self.student.spec.feature_shape(k);
        Tensor::new(&[n, c, h, w], data)
    }

    pub fn finish(self) -> AmalgamationResult {
        AmalgamationResult {
            student: self.student,
            bank: self.bank,
            table: self.table,
            heldout_rows: self.heldout_rows,
        }
    }
}

/// Trains block `k`, which must be the next untrained block of `state`.
pub fn train_block(
    state: &mut AmalgamationState,
    k: usize,
    teachers: &TeacherRegistry,
) -> Result<Vec<f64>> {
    if k != state.next_block {
        return Err(Error::Config(format!(
            "block {k} cannot be trained before blocks 1..{} are done",
            k - 1
        )));
    }
    state.train_next_block(teachers)
}

/// Runs every block in order and returns the trained student, filter bank
/// and complete loss table.
pub fn amalgamate(
    teachers: &TeacherRegistry,
    images: Tensor,
    config: AmalgamationConfig,
) -> Result<AmalgamationResult> {
    let mut state = AmalgamationState::new(teachers, images, config)?;
    while state.next_block <= state.student.block_count() {
        let k = state.next_block;
        let losses = state.train_next_block(teachers)?;
        log::info!("block {k} held-out losses {losses:?}");
    }
    Ok(state.finish())
}
