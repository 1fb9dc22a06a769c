//! Teacher pretraining on labeled task groups and the teacher registry.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocknet::{ArchitectureSpec, BlockifiedNetwork, PredictionSet};
use crate::dataio::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, LabelMatrix, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{average_precision, ApProtocol};
use crate::nncore::{bce_mean, seeded_rng, Graph, OptimizerConfig, PolySgd, Real, Tensor, Var};

/// Mean over tasks and samples of binary cross-entropy between head
/// probabilities and hard labels. `labels` is `[N, T]` in the order of
/// `predictions.task_ids`; every entry must be exactly 0 or 1.
pub fn teacher_loss<T: Real>(predictions: &PredictionSet<T>, labels: &Tensor<T>) -> Result<f64> {
    let (n, t) = labels.rows_cols();
    if t != predictions.task_ids.len() {
        return Err(Error::shape("teacher labels", &[n, predictions.task_ids.len()], labels.shape()));
    }
    check_binary(labels)?;
    let mut total = 0.0;
    for (j, p) in predictions.probs.iter().enumerate() {
        if p.shape() != [n, 1] {
            return Err(Error::shape(format!("prediction of task {}", predictions.task_ids[j]), &[n, 1], p.shape()));
        }
        let column: Vec<T> = (0..n).map(|i| labels.data()[i * t + j]).collect();
        total += bce_mean(p.data(), &column).as_f64();
    }
    Ok(total / t as f64)
}

fn check_binary<T: Real>(labels: &Tensor<T>) -> Result<()> {
    let (_, t) = labels.rows_cols();
    for (i, &v) in labels.data().iter().enumerate() {
        if v != T::zero() && v != T::one() {
            return Err(Error::InvalidLabel {
                sample: i / t,
                task: i % t,
                value: v.as_f64(),
            });
        }
    }
    Ok(())
}

/// Tape version of [`teacher_loss`] on head logits.
pub fn teacher_loss_graph<T: Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &Tensor<T>,
) -> Result<Var> {
    let (n, t) = labels.rows_cols();
    if t != logits.len() || t == 0 {
        return Err(Error::shape("teacher labels", &[n, logits.len()], labels.shape()));
    }
    check_binary(labels)?;
    let mut total: Option<Var> = None;
    for (j, &l) in logits.iter().enumerate() {
        let column: Vec<T> = (0..n).map(|i| labels.data()[i * t + j]).collect();
        let term = g.bce_logits(l, Tensor::new(&[n, 1], column)?)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.expect("t > 0"), T::of(1.0 / t as f64)))
}

/// Labels of `task_ids` for the given rows as an `[N, T]` float tensor.
pub fn label_tensor(labels: &LabelMatrix, rows: &[usize], task_ids: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * task_ids.len());
    for &r in rows {
        for &t in task_ids {
            if t >= labels.cols {
                return Err(Error::Dataset(format!("dataset has no label {t}")));
            }
            data.push(labels.get(r, t) as f32);
        }
    }
    Tensor::new(&[rows.len(), task_ids.len()], data)
}

/// Mirrors every image in the batch left-right.
pub fn hflip(batch: &Tensor, rows: &[bool]) -> Tensor {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = batch.clone();
    let data = out.data_mut();
    for (i, _) in rows.iter().enumerate().filter(|(_, &f)| f) {
        for ch in 0..c {
            for y in 0..h {
                let off = ((i * c + ch) * h + y) * w;
                data[off..off + w].reverse();
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    #[serde(default)]
    pub hflip: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Validation AP per task (area protocol), `None` without positives.
    pub val_ap: Vec<Option<f64>>,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub network: BlockifiedNetwork,
    pub task_ids: Vec<usize>,
    pub metadata: TrainingMetadata,
}

/// Per-task AP of `net` on a labeled split.
pub fn validation_ap(
    net: &BlockifiedNetwork,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let labels = data.labels()?;
    let preds = net.predict(&data.images, batch_size)?;
    let mut aps = Vec::new();
    for (t, p) in preds.task_ids.iter().zip(&preds.probs) {
        let truth = labels.column(*t);
        let scores: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
        aps.push(if truth.contains(&1) {
            Some(average_precision(&scores, &truth, ApProtocol::Area)?)
        } else {
            None
        });
    }
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok((aps, map))
}

/// Tracks the divergence rule: loss above 10x the first epoch's loss for
/// three consecutive epochs.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, what: &str, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("{what}: non-finite loss at epoch {epoch}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.streak += 1;
            if self.streak >= 3 {
                return Err(Error::Divergence(format!(
                    "{what}: loss {loss:.4} above 10x the initial {initial:.4} for 3 epochs (epoch {epoch})"
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Trains all blocks and heads of `net` on `train` for the tasks of its
/// heads and evaluates per-task AP on `val`.
pub fn pretrain_teacher(
    mut net: BlockifiedNetwork,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &OptimizerConfig,
    options: &PretrainOptions,
) -> Result<TeacherModel> {
    config.validate()?;
    let task_ids = net.task_ids();
    let labels = train.labels()?;
    let n = train.len();
    let bs = config.batch_size;
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = PolySgd::new(config.clone(), options.epochs * steps_per_epoch);
    let mut rng = seeded_rng(config.seed, "teachers.pretrain");
    let mut guard = DivergenceGuard::default();
    let mut metadata = TrainingMetadata {
        epochs: options.epochs,
        ..Default::default()
    };
    net.set_trainable(true);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for rows in order.chunks(bs) {
            let mut batch = train.image_batch(rows);
            if options.hflip {
                let flips: Vec<bool> = rows.iter().map(|_| rng.gen_bool(0.5)).collect();
                batch = hflip(&batch, &flips);
            }
            let targets = label_tensor(labels, rows, &task_ids)?;
            let mut g = Graph::new();
            let vars = net.bind(&mut g);
            let input = net.input_var(&mut g, &batch)?;
            let (_, logits) = net.forward_graph(&mut g, &vars, input)?;
            let loss = teacher_loss_graph(&mut g, &logits, &targets)?;
            let value = g.value(loss).data()[0] as f64;
            sum += value * rows.len() as f64;
            let grads = g.backward(loss);
            for (b, v) in net.blocks.iter_mut().zip(&vars.blocks) {
                b.params.accumulate_grads(&grads, v);
            }
            for (h, v) in net.heads.iter_mut().zip(&vars.heads) {
                h.params.accumulate_grads(&grads, v);
            }
            opt.step(net.param_sets_mut())?;
        }
        let epoch_loss = sum / n.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {epoch_loss:.5}");
        metadata.epoch_losses.push(epoch_loss);
        guard.observe("teacher pretraining", epoch, epoch_loss)?;
    }
    metadata.final_loss = metadata.epoch_losses.last().copied();
    if !val.is_empty() {
        let (aps, map) = validation_ap(&net, val, bs.max(32))?;
        metadata.val_ap = aps;
        metadata.val_map = map;
    }
    net.set_trainable(false);
    Ok(TeacherModel {
        network: net,
        task_ids,
        metadata,
    })
}

pub fn save_teacher(path: &Path, teacher: &TeacherModel) -> Result<()> {
    let ckpt = Checkpoint::new(
        CheckpointKind::Teacher,
        Some(teacher.network.spec.clone()),
        teacher.task_ids.clone(),
        serde_json::to_value(&teacher.metadata)?,
        teacher.network.named_tensors(),
    );
    save_checkpoint(path, &ckpt)
}

pub fn load_teacher(path: &Path) -> Result<TeacherModel> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.header.kind != CheckpointKind::Teacher {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected a teacher checkpoint, found {:?}", ckpt.header.kind),
        });
    }
    let spec = ckpt.header.architecture.clone().ok_or_else(|| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: "teacher checkpoint without architecture".into(),
    })?;
    spec.validate()?;
    let mut network = BlockifiedNetwork::from_named(&spec, |name| ckpt.get(name).cloned())?;
    network.set_trainable(false);
    Ok(TeacherModel {
        network,
        task_ids: ckpt.header.task_ids.clone(),
        metadata: serde_json::from_value(ckpt.header.metadata.clone())?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRegistry {
    pub teachers: Vec<TeacherModel>,
    pub universe: Vec<usize>,
}

impl TeacherRegistry {
    /// Checks `N >= 1`, disjoint task sets covering `universe`, heads
    /// matching task ids and one shared trunk architecture.
    pub fn new(teachers: Vec<TeacherModel>, universe: Vec<usize>) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Config("registry needs at least one teacher".into()));
        }
        let mut seen = BTreeSet::new();
        for (n, t) in teachers.iter().enumerate() {
            if t.network.task_ids() != t.task_ids {
                return Err(Error::Config(format!(
                    "teacher {n}: heads {:?} disagree with task ids {:?}",
                    t.network.task_ids(),
                    t.task_ids
                )));
            }
            for &task in &t.task_ids {
                if !seen.insert(task) {
                    return Err(Error::Config(format!("task {task} is served by two teachers")));
                }
            }
            if !t.network.spec.same_trunk(&teachers[0].network.spec) {
                return Err(Error::SpecHashMismatch {
                    what: format!("teacher {n} vs teacher 0"),
                });
            }
        }
        let wanted: BTreeSet<usize> = universe.iter().copied().collect();
        if seen != wanted {
            return Err(Error::Config(format!(
                "teacher tasks {seen:?} do not cover the label universe {wanted:?}"
            )));
        }
        Ok(TeacherRegistry { teachers, universe })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.teachers[0].network.spec
    }

    pub fn task_groups(&self) -> Vec<Vec<usize>> {
        self.teachers.iter().map(|t| t.task_ids.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub checkpoint: PathBuf,
    pub task_ids: Vec<usize>,
    pub trunk_hash: String,
}

/// Registry manifest: checkpoint paths (relative to the manifest) and task
/// assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub universe: Vec<usize>,
    pub teachers: Vec<ManifestEntry>,
}

impl RegistryManifest {
    pub fn load_registry(&self, base: &Path) -> Result<TeacherRegistry> {
        let mut teachers = Vec::with_capacity(self.teachers.len());
        for (n, e) in self.teachers.iter().enumerate() {
            let t = load_teacher(&base.join(&e.checkpoint))?;
            if t.network.spec.trunk_hash() != e.trunk_hash {
                return Err(Error::SpecHashMismatch {
                    what: format!("teacher {n} ({})", e.checkpoint.display()),
                });
            }
            if t.task_ids != e.task_ids {
                return Err(Error::Config(format!(
                    "teacher {n}: checkpoint tasks {:?}, manifest says {:?}",
                    t.task_ids, e.task_ids
                )));
            }
            teachers.push(t);
        }
        TeacherRegistry::new(teachers, self.universe.clone())
    }
}
