//! File-based pipeline stages behind the command-line driver. Every stage
//! reads its inputs from the run directory, writes its outputs plus the
//! resolved config and a manifest of input hashes into its own
//! subdirectory, and fails cleanly when an upstream artifact is missing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amalgam::{amalgamate, AmalgamationConfig, LossTable, StudentInit};
use crate::blocknet::{
    forward_collect, forward_substituted, ArchitectureSpec, BlockifiedNetwork, FeatureMap,
    InputShape, Producer, TaskSelection, Wiring,
};
use crate::branchout::{finetune, regroup, select_branch_points, BranchPlan, FinetuneConfig, RegroupedModel};
use crate::dataio::store::EVAL_LABELS;
use crate::dataio::{
    audit, generate_dataset, load_checkpoint, load_eval_labels, load_split, partition_labels,
    save_checkpoint, save_dataset, Checkpoint, CheckpointKind, DatasetMeta, LabelMatrix,
    PartitionMode, Split, SyntheticDatasetConfig,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{average_precision, topk_metrics, ApProtocol, ScoreMatrix};
use crate::filters::{bank_named_tensors, load_bank_tensors, make_filter_bank, FilterBank};
use crate::nncore::{derive_seed, OptimizerConfig, Tensor};
use crate::teachers::{
    pretrain_teacher, save_teacher, ManifestEntry, PretrainOptions, RegistryManifest,
    TeacherRegistry,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub count: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionMode,
    #[serde(default = "default_wiring")]
    pub wiring: Wiring,
    /// `(out_channels, stride)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub epochs: usize,
    #[serde(default)]
    pub hflip: bool,
    pub optimizer: OptimizerConfig,
}

fn default_partition() -> PartitionMode {
    PartitionMode::Contiguous
}
fn default_wiring() -> Wiring {
    Wiring::Sequential
}

/// Amalgamation settings; `tasks` uses the `n:i,...` form with `i` a
/// position in teacher `n`'s task list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmalgamSection {
    pub tasks: String,
    pub epochs_per_block: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub plateau_window: Option<usize>,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default = "default_init")]
    pub student_init: StudentInit,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_reduction")]
    pub filter_reduction: usize,
}

fn default_heldout() -> f64 {
    0.2
}
fn default_one() -> f64 {
    1.0
}
fn default_init() -> StudentInit {
    StudentInit::Random
}
fn default_reduction() -> usize {
    crate::filters::DEFAULT_REDUCTION
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchoutSection {
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_protocol")]
    pub protocol: ApProtocol,
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_protocol() -> ApProtocol {
    ApProtocol::Voc11Point
}
fn default_top_k() -> Vec<usize> {
    vec![1, 2]
}
fn default_batch() -> usize {
    64
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            protocol: default_protocol(),
            top_k: default_top_k(),
            batch_size: default_batch(),
        }
    }
}

/// The whole run: one JSON document with `data`, `teachers`, `amalgam`,
/// `branchout` and `eval` sections. Seeds inside sections are derived from
/// the global `seed` on resolution; values written there are replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: SyntheticDatasetConfig,
    pub teachers: TeacherSection,
    pub amalgam: AmalgamSection,
    #[serde(default)]
    pub branchout: BranchoutSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Command-line overrides applied before resolution.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tasks: Option<String>,
}

/// A validated config with every derived value filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub task_groups: Vec<Vec<usize>>,
    pub selection: TaskSelection,
    pub teacher_spec: ArchitectureSpec,
}

pub const DATA_DIR: &str = "data";
pub const TEACHERS_DIR: &str = "teachers";
pub const AMALGAM_DIR: &str = "amalgam";
pub const BRANCHOUT_DIR: &str = "branchout";
pub const FINETUNE_DIR: &str = "finetune";
pub const EVAL_DIR: &str = "eval";

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "config file not found".into(),
            });
        }
        Self::from_json(&audit::read_string(path)?)
    }

    /// The desk-scale setup: 8 labels split over 2 teachers, 6 blocks, one
    /// customized task per teacher.
    pub fn desk_default() -> Self {
        let data = SyntheticDatasetConfig {
            image_size: 16,
            ..SyntheticDatasetConfig::new(8, 800, 2000, 0)
        };
        PipelineConfig {
            seed: 1,
            out: default_out(),
            data,
            teachers: TeacherSection {
                count: 2,
                partition: PartitionMode::Contiguous,
                wiring: Wiring::Sequential,
                blocks: vec![(8, 1), (8, 1), (16, 2), (16, 1), (16, 2), (16, 1)],
                epochs: 100,
                hflip: false,
                optimizer: OptimizerConfig {
                    momentum: 0.9,
                    max_grad_norm: Some(1.0),
                    ..OptimizerConfig::default()
                },
            },
            amalgam: AmalgamSection {
                tasks: "0:1,1:1".into(),
                epochs_per_block: 20,
                optimizer: crate::amalgam::default_optimizer(),
                plateau_window: None,
                heldout_fraction: default_heldout(),
                temperature: 1.0,
                student_init: StudentInit::Random,
                init_seed: 0,
                filter_reduction: default_reduction(),
            },
            branchout: BranchoutSection {
                finetune: FinetuneConfig {
                    epochs: 30,
                    optimizer: OptimizerConfig {
                        base_lr: 0.01,
                        ..crate::amalgam::default_optimizer()
                    },
                    ..FinetuneConfig::default()
                },
            },
            eval: EvalSection::default(),
        }
    }

    /// Applies overrides, derives every seed from the global one and
    /// validates everything that can be checked before compute.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<ResolvedConfig> {
        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        if let Some(o) = &overrides.out {
            self.out = o.clone();
        }
        if let Some(t) = &overrides.tasks {
            self.amalgam.tasks = t.clone();
        }
        let seed = self.seed;
        self.data.seed = derive_seed(seed, "data");
        self.teachers.optimizer.seed = derive_seed(seed, "teachers");
        self.amalgam.optimizer.seed = derive_seed(seed, "amalgam");
        self.amalgam.init_seed = derive_seed(seed, "student");
        // same seed, so fine-tuning holds out the amalgamation held-out rows
        self.branchout.finetune.optimizer.seed = self.amalgam.optimizer.seed;

        self.data.validate()?;
        self.teachers.optimizer.validate()?;
        if self.teachers.epochs == 0 {
            return Err(Error::Config("teachers.epochs must be positive".into()));
        }
        self.branchout.finetune.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        let task_groups = partition_labels(self.data.label_count, self.teachers.count, self.teachers.partition)?;
        let teacher_spec = ArchitectureSpec::new(
            input_shape(&self.data),
            self.teachers.wiring,
            &self.teachers.blocks,
            &task_groups[0],
        )?;
        let selection = TaskSelection::parse(&self.amalgam.tasks, &task_groups)?;
        for &k in &self.eval.top_k {
            if k == 0 || k > selection.total() {
                return Err(Error::Config(format!(
                    "eval.top_k entry {k} outside 1..={}",
                    selection.total()
                )));
            }
        }
        let am = self.amalgamation_config(selection.clone());
        if !(am.heldout_fraction > 0.0 && am.heldout_fraction <= 0.5) {
            return Err(Error::Config("amalgam.heldout_fraction outside (0, 0.5]".into()));
        }
        am.optimizer.validate()?;
        if am.epochs_per_block == 0 {
            return Err(Error::Config("amalgam.epochs_per_block must be positive".into()));
        }
        if let StudentInit::CloneTeacher(n) = am.student_init {
            if n >= self.teachers.count {
                return Err(Error::Config(format!("cannot clone missing teacher {n}")));
            }
        }
        Ok(ResolvedConfig {
            config: self,
            task_groups,
            selection,
            teacher_spec,
        })
    }

    fn amalgamation_config(&self, selection: TaskSelection) -> AmalgamationConfig {
        let a = &self.amalgam;
        AmalgamationConfig {
            selection,
            epochs_per_block: a.epochs_per_block,
            optimizer: a.optimizer.clone(),
            plateau_window: a.plateau_window,
            heldout_fraction: a.heldout_fraction,
            temperature: a.temperature,
            student_init: a.student_init,
            init_seed: a.init_seed,
            filter_reduction: a.filter_reduction,
        }
    }
}

/// Input hashes and outputs of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Path relative to the run directory -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(audit::read_bytes(path)?)))
}

impl ResolvedConfig {
    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.config.out.join(stage)
    }

    pub fn amalgamation_config(&self) -> AmalgamationConfig {
        self.config.amalgamation_config(self.selection.clone())
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.config.out.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                hint: hint.into(),
            })
        }
    }

    /// Writes the resolved config and the manifest into `stage`, after
    /// checking every declared output exists.
    fn finish_stage(&self, stage: &str, command: &str, inputs: &[String], outputs: &[String]) -> Result<()> {
        let dir = self.stage_dir(stage);
        for o in outputs {
            let p = self.config.out.join(o);
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    path: p,
                    hint: format!("{command} did not produce it"),
                });
            }
        }
        let mut hashes = BTreeMap::new();
        for i in inputs {
            hashes.insert(i.clone(), file_sha256(&self.config.out.join(i))?);
        }
        let manifest = Manifest {
            command: command.into(),
            seed: self.config.seed,
            inputs: hashes,
            outputs: outputs.to_vec(),
        };
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("manifest.json"), &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rel(stage: &str, file: &str) -> String {
    format!("{stage}/{file}")
}

fn teacher_file(n: usize) -> String {
    format!("teacher{n}.ckpt")
}

const DATA_HINT: &str = "run gen-data first";
const TEACHER_HINT: &str = "run pretrain first";
const AMALGAM_HINT: &str = "run amalgamate first";
const BRANCH_HINT: &str = "run branchout first";
const FINETUNE_HINT: &str = "run finetune first";

fn data_inputs(rc: &ResolvedConfig, split: Split) -> Result<Vec<String>> {
    let meta_rel = rel(DATA_DIR, "meta.json");
    rc.require(&meta_rel, DATA_HINT)?;
    let meta = DatasetMeta::load(&rc.stage_dir(DATA_DIR))?;
    let images = meta
        .splits
        .iter()
        .find(|s| s.split == split)
        .map(|s| rel(DATA_DIR, &s.images))
        .ok_or_else(|| Error::Dataset(format!("dataset has no {} split", split.name())))?;
    rc.require(&images, DATA_HINT)?;
    Ok(vec![meta_rel, images])
}

pub fn cmd_gen_data(rc: &ResolvedConfig) -> Result<PathBuf> {
    let dir = rc.stage_dir(DATA_DIR);
    let data = generate_dataset(&rc.config.data)?;
    let meta = save_dataset(&dir, &data)?;
    let mut outputs = vec![rel(DATA_DIR, "meta.json"), rel(DATA_DIR, EVAL_LABELS)];
    for s in &meta.splits {
        outputs.push(rel(DATA_DIR, &s.images));
        if let Some(l) = &s.labels {
            outputs.push(rel(DATA_DIR, l));
        }
    }
    rc.finish_stage(DATA_DIR, "gen-data", &[], &outputs)?;
    Ok(dir)
}

/// Trains teacher `n` on the train split (all teachers when `None`) and
/// rewrites the registry manifest.
pub fn cmd_pretrain(rc: &ResolvedConfig, teacher: Option<usize>) -> Result<Vec<PathBuf>> {
    let count = rc.config.teachers.count;
    let which: Vec<usize> = match teacher {
        Some(n) if n >= count => {
            return Err(Error::Config(format!("teacher {n} outside 0..{count}")));
        }
        Some(n) => vec![n],
        None => (0..count).collect(),
    };
    let mut inputs = data_inputs(rc, Split::Train)?;
    inputs.extend(data_inputs(rc, Split::Val)?.into_iter().skip(1));
    let data_dir = rc.stage_dir(DATA_DIR);
    let train = load_split(&data_dir, Split::Train)?;
    let val = load_split(&data_dir, Split::Val)?;
    let dir = rc.stage_dir(TEACHERS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let t = &rc.config.teachers;
    let mut written = Vec::new();
    let mut outputs = Vec::new();
    for n in which {
        let spec = rc.teacher_spec.with_task_ids(&rc.task_groups[n]);
        let base = t.optimizer.seed;
        let net = crate::blocknet::build_network(&spec, derive_seed(base, &format!("init{n}")))?;
        let opt = OptimizerConfig {
            seed: derive_seed(base, &format!("train{n}")),
            ..t.optimizer.clone()
        };
        let options = PretrainOptions {
            epochs: t.epochs,
            hflip: t.hflip,
        };
        log::info!("pretraining teacher {n} on tasks {:?}", rc.task_groups[n]);
        let model = pretrain_teacher(net, &train, &val, &opt, &options)?;
        let path = dir.join(teacher_file(n));
        save_teacher(&path, &model)?;
        let mut curve = String::from("epoch,train_loss\n");
        for (e, l) in model.metadata.epoch_losses.iter().enumerate() {
            writeln!(curve, "{e},{l}").expect("string write");
        }
        write_text(&dir.join(format!("teacher{n}_curve.csv")), &curve)?;
        outputs.push(rel(TEACHERS_DIR, &teacher_file(n)));
        outputs.push(rel(TEACHERS_DIR, &format!("teacher{n}_curve.csv")));
        written.push(path);
    }
    let manifest = RegistryManifest {
        universe: (0..rc.config.data.label_count).collect(),
        teachers: (0..count)
            .map(|n| ManifestEntry {
                checkpoint: PathBuf::from(teacher_file(n)),
                task_ids: rc.task_groups[n].clone(),
                trunk_hash: rc.teacher_spec.trunk_hash(),
            })
            .collect(),
    };
    write_json(&dir.join("registry.json"), &manifest)?;
    outputs.push(rel(TEACHERS_DIR, "registry.json"));
    rc.finish_stage(TEACHERS_DIR, "pretrain", &inputs, &outputs)?;
    Ok(written)
}

/// Loads every teacher, checking each was trained under the configured
/// architecture.
pub fn load_teachers(rc: &ResolvedConfig) -> Result<(TeacherRegistry, Vec<String>)> {
    let reg_rel = rel(TEACHERS_DIR, "registry.json");
    let reg_path = rc.require(&reg_rel, TEACHER_HINT)?;
    let manifest: RegistryManifest = serde_json::from_str(&audit::read_string(&reg_path)?)?;
    if manifest.teachers.len() != rc.config.teachers.count {
        return Err(Error::Config(format!(
            "registry lists {} teachers, config expects {}",
            manifest.teachers.len(),
            rc.config.teachers.count
        )));
    }
    let mut inputs = vec![reg_rel];
    for (n, e) in manifest.teachers.iter().enumerate() {
        if e.trunk_hash != rc.teacher_spec.trunk_hash() {
            return Err(Error::SpecHashMismatch {
                what: format!("teacher {n}"),
            });
        }
        if e.task_ids != rc.task_groups[n] {
            return Err(Error::Config(format!(
                "teacher {n} serves {:?}, config partition gives {:?}",
                e.task_ids, rc.task_groups[n]
            )));
        }
        let r = rel(TEACHERS_DIR, &e.checkpoint.to_string_lossy());
        rc.require(&r, TEACHER_HINT)?;
        inputs.push(r);
    }
    let registry = manifest.load_registry(&rc.stage_dir(TEACHERS_DIR))?;
    Ok((registry, inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StudentMeta {
    selection: TaskSelection,
    heldout_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    reduction: usize,
}

/// Block-wise amalgamation on the unlabeled split only.
pub fn cmd_amalgamate(rc: &ResolvedConfig) -> Result<LossTable> {
    let mut inputs = data_inputs(rc, Split::Unlabeled)?;
    let (registry, teacher_inputs) = load_teachers(rc)?;
    inputs.extend(teacher_inputs);
    let images = load_split(&rc.stage_dir(DATA_DIR), Split::Unlabeled)?.images;
    let result = amalgamate(&registry, images, rc.amalgamation_config())?;
    let dir = rc.stage_dir(AMALGAM_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let meta = StudentMeta {
        selection: rc.selection.clone(),
        heldout_rows: result.heldout_rows.clone(),
    };
    save_checkpoint(
        &dir.join("student.ckpt"),
        &Checkpoint::new(
            CheckpointKind::Student,
            Some(result.student.spec.clone()),
            rc.selection.task_ids(),
            serde_json::to_value(&meta)?,
            result.student.named_tensors(),
        ),
    )?;
    save_checkpoint(
        &dir.join("filters.ckpt"),
        &Checkpoint::new(
            CheckpointKind::FilterBank,
            Some(result.student.spec.clone()),
            rc.selection.task_ids(),
            serde_json::to_value(BankMeta {
                reduction: rc.config.amalgam.filter_reduction,
            })?,
            bank_named_tensors(&result.bank),
        ),
    )?;
    result.table.write(&dir)?;
    let mut outputs = vec![
        rel(AMALGAM_DIR, "student.ckpt"),
        rel(AMALGAM_DIR, "filters.ckpt"),
        rel(AMALGAM_DIR, "loss_table.csv"),
    ];
    for &t in &result.table.task_ids {
        for k in 1..=result.table.block_count {
            outputs.push(rel(AMALGAM_DIR, &LossTable::curve_file(t, k)));
        }
    }
    rc.finish_stage(AMALGAM_DIR, "amalgamate", &inputs, &outputs)?;
    Ok(result.table)
}

fn load_student(rc: &ResolvedConfig, registry: &TeacherRegistry) -> Result<(BlockifiedNetwork, FilterBank)> {
    let sp = rc.require(&rel(AMALGAM_DIR, "student.ckpt"), AMALGAM_HINT)?;
    let fp = rc.require(&rel(AMALGAM_DIR, "filters.ckpt"), AMALGAM_HINT)?;
    let ck = load_checkpoint(&sp)?;
    let spec = ck.header.architecture.clone().ok_or_else(|| Error::CorruptCheckpoint {
        path: sp.clone(),
        reason: "student checkpoint without architecture".into(),
    })?;
    if !spec.same_trunk(registry.spec()) {
        return Err(Error::SpecHashMismatch {
            what: "student vs teachers".into(),
        });
    }
    let mut student = BlockifiedNetwork::from_named(&spec, |n| ck.get(n).cloned())?;
    student.set_trainable(false);
    let fk = load_checkpoint(&fp)?;
    let meta: BankMeta = serde_json::from_value(fk.header.metadata.clone())?;
    let mut bank = make_filter_bank(registry, &spec, meta.reduction, 0)?;
    load_bank_tensors(&mut bank, |n| fk.get(n).cloned())?;
    Ok((student, bank))
}

fn save_regrouped(path: &Path, model: &RegroupedModel, plan: &BranchPlan) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint::new(
            CheckpointKind::Regrouped,
            Some(model.spec.clone()),
            model.task_ids(),
            serde_json::to_value(plan)?,
            model.named_tensors(),
        ),
    )
}

fn load_regrouped(path: &Path) -> Result<(RegroupedModel, BranchPlan)> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != CheckpointKind::Regrouped {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected a regrouped checkpoint, found {:?}", ck.header.kind),
        });
    }
    let spec = ck.header.architecture.clone().ok_or_else(|| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: "regrouped checkpoint without architecture".into(),
    })?;
    let plan: BranchPlan = serde_json::from_value(ck.header.metadata.clone())?;
    let model = RegroupedModel::from_named(&spec, &plan, |n| ck.get(n).cloned())?;
    Ok((model, plan))
}

/// Branch points from the loss table, the branch report and the regrouped
/// (not yet fine-tuned) model.
pub fn cmd_branchout(rc: &ResolvedConfig) -> Result<BranchPlan> {
    let table_rel = rel(AMALGAM_DIR, "loss_table.csv");
    let table_path = rc.require(&table_rel, AMALGAM_HINT)?;
    let (registry, mut inputs) = load_teachers(rc)?;
    let table = LossTable::read(&table_path, &rc.selection)?;
    if table.block_count != rc.teacher_spec.block_count() {
        return Err(Error::IncompleteTable(format!(
            "table has {} blocks, architecture {}",
            table.block_count,
            rc.teacher_spec.block_count()
        )));
    }
    let plan = select_branch_points(&table, &rc.selection)?;
    let (student, bank) = load_student(rc, &registry)?;
    let model = regroup(&student, &registry, &bank, &plan)?;
    let dir = rc.stage_dir(BRANCHOUT_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    plan.write_report(&dir.join("branch_report.csv"))?;
    write_json(&dir.join("plan.json"), &plan)?;
    save_regrouped(&dir.join("regrouped.ckpt"), &model, &plan)?;
    inputs.extend([
        table_rel,
        rel(AMALGAM_DIR, "student.ckpt"),
        rel(AMALGAM_DIR, "filters.ckpt"),
    ]);
    let outputs = vec![
        rel(BRANCHOUT_DIR, "branch_report.csv"),
        rel(BRANCHOUT_DIR, "plan.json"),
        rel(BRANCHOUT_DIR, "regrouped.ckpt"),
    ];
    rc.finish_stage(BRANCHOUT_DIR, "branchout", &inputs, &outputs)?;
    Ok(plan)
}

/// Fine-tunes the regrouped model on the unlabeled split against teacher
/// soft targets.
pub fn cmd_finetune(rc: &ResolvedConfig) -> Result<crate::branchout::FinetuneReport> {
    let reg_rel = rel(BRANCHOUT_DIR, "regrouped.ckpt");
    let reg_path = rc.require(&reg_rel, BRANCH_HINT)?;
    let mut inputs = data_inputs(rc, Split::Unlabeled)?;
    let (registry, teacher_inputs) = load_teachers(rc)?;
    inputs.extend(teacher_inputs);
    inputs.push(reg_rel);
    let (mut model, plan) = load_regrouped(&reg_path)?;
    if !model.spec.same_trunk(registry.spec()) {
        return Err(Error::SpecHashMismatch {
            what: "regrouped model vs teachers".into(),
        });
    }
    let images = load_split(&rc.stage_dir(DATA_DIR), Split::Unlabeled)?.images;
    let report = finetune(&mut model, &registry, &images, &rc.config.branchout.finetune)?;
    let dir = rc.stage_dir(FINETUNE_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_regrouped(&dir.join("final.ckpt"), &model, &plan)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut curves = String::from("task_id,epoch,heldout_loss\n");
    for (t, c) in report.task_ids.iter().zip(&report.curves) {
        for (e, v) in c.iter().enumerate() {
            writeln!(curves, "{t},{e},{v}").expect("string write");
        }
    }
    write_text(&dir.join("curves.csv"), &curves)?;
    let outputs = vec![
        rel(FINETUNE_DIR, "final.ckpt"),
        rel(FINETUNE_DIR, "report.json"),
        rel(FINETUNE_DIR, "curves.csv"),
    ];
    rc.finish_stage(FINETUNE_DIR, "finetune", &inputs, &outputs)?;
    Ok(report)
}

/// Evaluation results, also written as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub task_ids: Vec<usize>,
    pub teacher_ap: Vec<f64>,
    pub regrouped_ap: Vec<f64>,
    pub student_ap: Vec<f64>,
    pub plan: BranchPlan,
}

fn column(p: &Tensor) -> Vec<f64> {
    p.data().iter().map(|&v| v as f64).collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn score_matrix(cols: &[Vec<f64>], labels: &LabelMatrix, tasks: &[usize]) -> Result<ScoreMatrix> {
    let rows = labels.rows;
    let mut scores = Vec::with_capacity(rows * cols.len());
    let mut truth = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        for (c, &t) in cols.iter().zip(tasks) {
            scores.push(c[r]);
            truth.push(labels.get(r, t));
        }
    }
    ScoreMatrix::new(rows, cols.len(), scores, truth)
}

/// Per-block AP of the substituted path: student blocks `1..k`, filter
/// `f_n^k`, teacher blocks after `k`.
fn block_aps(
    rc: &ResolvedConfig,
    registry: &TeacherRegistry,
    student: &BlockifiedNetwork,
    bank: &FilterBank,
    images: &Tensor,
    labels: &LabelMatrix,
) -> Result<Vec<Vec<Option<f64>>>> {
    let n = images.shape()[0];
    let bs = rc.config.eval.batch_size;
    let b = student.block_count();
    let pairs = rc.selection.pairs();
    let mut scores: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(n); b]; pairs.len()];
    for start in (0..n).step_by(bs) {
        let rows: Vec<usize> = (start..(start + bs).min(n)).collect();
        let batch = images.select_rows(&rows);
        let (student_feats, _) = forward_collect(student, &batch, Producer::Student)?;
        let mut teacher_feats: BTreeMap<usize, Vec<FeatureMap>> = BTreeMap::new();
        for (i, &(t, task)) in pairs.iter().enumerate() {
            let net = &registry.teachers[t].network;
            if let std::collections::btree_map::Entry::Vacant(e) = teacher_feats.entry(t) {
                e.insert(forward_collect(net, &batch, Producer::Teacher(t))?.0);
            }
            for k in 1..=b {
                let f = bank
                    .get(&(t, k))
                    .ok_or_else(|| Error::Regroup(format!("missing filter for teacher {t}, block {k}")))?
                    .apply(&student_feats[k - 1])?;
                let p = forward_substituted(net, k, &f, &batch, &teacher_feats[&t])?;
                let col = p.get(task).ok_or_else(|| Error::Selection(format!("no head for task {task}")))?;
                scores[i][k - 1].extend(column(col));
            }
        }
    }
    pairs
        .iter()
        .zip(scores)
        .map(|(&(_, task), per_block)| {
            let truth = labels.column(task);
            per_block
                .iter()
                .map(|s| {
                    if truth.contains(&1) {
                        average_precision(s, &truth, rc.config.eval.protocol).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect()
        })
        .collect()
}

/// Teacher and student metrics on the held-back labels of the unlabeled
/// split: per-label AP, mAP, top-k grid and per-block curves.
pub fn cmd_eval(rc: &ResolvedConfig) -> Result<EvalSummary> {
    let final_rel = rel(FINETUNE_DIR, "final.ckpt");
    let final_path = rc.require(&final_rel, FINETUNE_HINT)?;
    let regrouped_rel = rel(BRANCHOUT_DIR, "regrouped.ckpt");
    let regrouped_path = rc.require(&regrouped_rel, BRANCH_HINT)?;
    let table_rel = rel(AMALGAM_DIR, "loss_table.csv");
    let table_path = rc.require(&table_rel, AMALGAM_HINT)?;
    let mut inputs = data_inputs(rc, Split::Unlabeled)?;
    let eval_rel = rel(DATA_DIR, EVAL_LABELS);
    rc.require(&eval_rel, DATA_HINT)?;
    let (registry, teacher_inputs) = load_teachers(rc)?;
    inputs.extend(teacher_inputs);
    inputs.extend([
        eval_rel,
        rel(AMALGAM_DIR, "student.ckpt"),
        rel(AMALGAM_DIR, "filters.ckpt"),
        table_rel,
        regrouped_rel,
        final_rel,
    ]);

    let data_dir = rc.stage_dir(DATA_DIR);
    let images = load_split(&data_dir, Split::Unlabeled)?.images;
    let labels = load_eval_labels(&data_dir)?;
    let (model, plan) = load_regrouped(&final_path)?;
    let (regrouped, _) = load_regrouped(&regrouped_path)?;
    let (student, bank) = load_student(rc, &registry)?;
    let table = LossTable::read(&table_path, &rc.selection)?;
    let protocol = rc.config.eval.protocol;
    let bs = rc.config.eval.batch_size;
    let ap = |scores: &[f64], label: usize| -> Result<Option<f64>> {
        let truth = labels.column(label);
        if truth.contains(&1) {
            average_precision(scores, &truth, protocol).map(Some)
        } else {
            Ok(None)
        }
    };

    let mut teacher_cols: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (n, t) in registry.teachers.iter().enumerate() {
        let p = t.network.predict(&images, bs)?;
        for (&task, probs) in p.task_ids.iter().zip(&p.probs) {
            teacher_cols.insert(task, (n, column(probs)));
        }
    }
    let final_preds = model.predict(&images, bs)?;
    let regrouped_preds = regrouped.predict(&images, bs)?;
    let tasks = rc.selection.task_ids();

    let mut ap_csv = String::from("label,teacher_id,teacher_ap,regrouped_ap,student_ap\n");
    let mut sel_teacher = Vec::new();
    let mut sel_regrouped = Vec::new();
    let mut sel_student = Vec::new();
    let mut all_teacher = Vec::new();
    for (&label, (n, scores)) in &teacher_cols {
        let t_ap = ap(scores, label)?;
        all_teacher.extend(t_ap);
        let (r_ap, s_ap) = match (regrouped_preds.get(label), final_preds.get(label)) {
            (Some(r), Some(s)) => (ap(&column(r), label)?, ap(&column(s), label)?),
            _ => (None, None),
        };
        if tasks.contains(&label) {
            sel_teacher.push(t_ap);
            sel_regrouped.push(r_ap);
            sel_student.push(s_ap);
        }
        writeln!(ap_csv, "{label},{n},{},{},{}", fmt(t_ap), fmt(r_ap), fmt(s_ap)).expect("string write");
    }
    let mean = |v: &[Option<f64>]| -> Option<f64> {
        let d: Vec<f64> = v.iter().flatten().copied().collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    };
    writeln!(
        ap_csv,
        "mAP_selected,,{},{},{}",
        fmt(mean(&sel_teacher)),
        fmt(mean(&sel_regrouped)),
        fmt(mean(&sel_student))
    )
    .expect("string write");
    let all: Vec<Option<f64>> = all_teacher.iter().map(|&v| Some(v)).collect();
    writeln!(ap_csv, "mAP_all,,{},,", fmt(mean(&all))).expect("string write");

    let teacher_sel: Vec<Vec<f64>> = tasks.iter().map(|t| teacher_cols[t].1.clone()).collect();
    let student_sel: Vec<Vec<f64>> = tasks
        .iter()
        .map(|&t| {
            final_preds
                .get(t)
                .map(column)
                .ok_or_else(|| Error::Selection(format!("student lacks task {t}")))
        })
        .collect::<Result<_>>()?;
    let mut topk_csv = String::from("model,k,cp,cr,cf1,op,or,of1\n");
    for (name, cols) in [("teacher", &teacher_sel), ("student", &student_sel)] {
        let m = score_matrix(cols, &labels, &tasks)?;
        for &k in &rc.config.eval.top_k {
            let t = topk_metrics(&m, k)?;
            writeln!(
                topk_csv,
                "{name},{k},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t.cp, t.cr, t.cf1, t.op, t.or, t.of1
            )
            .expect("string write");
        }
    }

    let block_ap = block_aps(rc, &registry, &student, &bank, &images, &labels)?;
    let mut curves = String::from("task,block,metric,value\n");
    for (i, &task) in table.task_ids.iter().enumerate() {
        for k in 1..=table.block_count {
            writeln!(curves, "{task},{k},heldout_loss,{}", fmt(table.heldout[i][k - 1])).expect("string write");
            writeln!(curves, "{task},{k},ap,{}", fmt(block_ap[i][k - 1])).expect("string write");
        }
    }

    let dir = rc.stage_dir(EVAL_DIR);
    write_text(&dir.join("ap.csv"), &ap_csv)?;
    write_text(&dir.join("topk.csv"), &topk_csv)?;
    write_text(&dir.join("curves.csv"), &curves)?;
    let outputs = vec![
        rel(EVAL_DIR, "ap.csv"),
        rel(EVAL_DIR, "topk.csv"),
        rel(EVAL_DIR, "curves.csv"),
    ];
    rc.finish_stage(EVAL_DIR, "eval", &inputs, &outputs)?;
    let unwrap = |v: Vec<Option<f64>>| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect();
    Ok(EvalSummary {
        task_ids: tasks,
        teacher_ap: unwrap(sel_teacher),
        regrouped_ap: unwrap(sel_regrouped),
        student_ap: unwrap(sel_student),
        plan,
    })
}

/// Every stage in order.
pub fn run_all(rc: &ResolvedConfig) -> Result<EvalSummary> {
    cmd_gen_data(rc)?;
    cmd_pretrain(rc, None)?;
    cmd_amalgamate(rc)?;
    cmd_branchout(rc)?;
    cmd_finetune(rc)?;
    cmd_eval(rc)
}

/// Network input shape implied by a synthetic dataset config.
pub fn input_shape(data: &SyntheticDatasetConfig) -> InputShape {
    InputShape {
        channels: data.channels,
        height: data.image_size,
        width: data.image_size,
    }
}
