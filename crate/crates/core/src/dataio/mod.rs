//! Synthetic multi-label data, label partitioning, on-disk datasets and
//! checkpoints.

pub mod audit;
pub mod checkpoint;
pub mod ingest;
pub mod store;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{derive_seed, Tensor};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointKind, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use store::{load_split, load_eval_labels, save_dataset, DatasetMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Ring,
    Cross,
    Triangle,
    Frame,
    Diamond,
}

const SHAPES: [Shape; 7] = [
    Shape::Square,
    Shape::Disk,
    Shape::Ring,
    Shape::Cross,
    Shape::Triangle,
    Shape::Frame,
    Shape::Diamond,
];

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.35, 0.95],
    [0.95, 0.9, 0.15],
    [0.9, 0.2, 0.9],
    [0.15, 0.9, 0.9],
    [0.98, 0.55, 0.1],
    [0.97, 0.97, 0.97],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Side length range as a fraction of the image size.
    pub size_range: (f32, f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub label_count: usize,
    /// Labeled pool, split 80/20 into train and val.
    pub labeled: usize,
    pub unlabeled: usize,
    /// Explicit motifs, one per label; generated when absent.
    #[serde(default)]
    pub motifs: Option<Vec<MotifSpec>>,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Number of grey distractor blobs per image.
    #[serde(default)]
    pub clutter: usize,
    #[serde(default = "default_presence")]
    pub presence: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f32 {
    0.05
}
fn default_presence() -> f64 {
    0.35
}

impl SyntheticDatasetConfig {
    pub fn new(label_count: usize, labeled: usize, unlabeled: usize, seed: u64) -> Self {
        SyntheticDatasetConfig {
            image_size: default_image_size(),
            channels: default_channels(),
            label_count,
            labeled,
            unlabeled,
            motifs: None,
            noise: default_noise(),
            clutter: 0,
            presence: default_presence(),
            seed,
        }
    }

    /// Distinct (shape, colour) pairs: the shape and palette sizes are
    /// coprime, so label `i` gets a unique pair for up to 56 labels.
    pub fn resolved_motifs(&self) -> Result<Vec<MotifSpec>> {
        let motifs = match &self.motifs {
            Some(m) => m.clone(),
            None => (0..self.label_count)
                .map(|i| MotifSpec {
                    shape: SHAPES[i % SHAPES.len()],
                    color: PALETTE[i % PALETTE.len()],
                    size_range: (0.3, 0.45),
                })
                .collect(),
        };
        if motifs.len() != self.label_count {
            return Err(Error::Dataset(format!(
                "{} motifs for {} labels",
                motifs.len(),
                self.label_count
            )));
        }
        for (i, m) in motifs.iter().enumerate() {
            let (lo, hi) = m.size_range;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Dataset(format!("label {i}: bad size range {lo}..{hi}")));
            }
            if ((lo * self.image_size as f32) as usize) < 2 {
                return Err(Error::Dataset(format!(
                    "label {i}: motif smaller than 2 pixels at image size {}",
                    self.image_size
                )));
            }
            if motifs[..i]
                .iter()
                .any(|o| o.shape == m.shape && o.color == m.color)
            {
                return Err(Error::Dataset(format!(
                    "label {i}: motif duplicates an earlier (shape, colour) pair"
                )));
            }
        }
        Ok(motifs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_count == 0 {
            return Err(Error::Dataset("label_count must be positive".into()));
        }
        if self.image_size < 4 || self.channels != 3 {
            return Err(Error::Dataset(
                "images must be RGB and at least 4 pixels wide".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.presence) {
            return Err(Error::Dataset(format!("presence {} outside [0, 1]", self.presence)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Dataset(format!("noise {} must be >= 0", self.noise)));
        }
        self.resolved_motifs().map(|_| ())
    }
}

/// Binary label matrix, row-major `[samples, labels]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("label matrix", &[rows, cols], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidLabel {
                sample: pos / cols,
                task: pos % cols,
                value: data[pos] as f64,
            });
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelMatrix {
        let data = rows
            .iter()
            .flat_map(|&r| self.data[r * self.cols..(r + 1) * self.cols].iter().copied())
            .collect();
        LabelMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unlabeled => "unlabeled",
        }
    }
}

/// Images plus, for labeled splits, their label matrix. The unlabeled split
/// never carries labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    pub sample_ids: Vec<usize>,
    /// `[N, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<LabelMatrix>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn labels(&self) -> Result<&LabelMatrix> {
        self.labels.as_ref().ok_or_else(|| {
            Error::Dataset(format!("the {} split carries no labels", self.split.name()))
        })
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            split: self.split,
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            images: self.images.select_rows(rows),
            labels: self.labels.as_ref().map(|l| l.select_rows(rows)),
        }
    }

    pub fn image_batch(&self, rows: &[usize]) -> Tensor {
        self.images.select_rows(rows)
    }

    /// Copy with labels dropped.
    pub fn without_labels(&self) -> LabeledDataset {
        LabeledDataset {
            labels: None,
            ..self.clone()
        }
    }
}

/// All splits of one generated dataset. `eval_labels` belong to the
/// unlabeled split and are only ever written to their own file.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticDatasetConfig,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub unlabeled: LabeledDataset,
    pub eval_labels: LabelMatrix,
}

fn draw_motif(
    img: &mut [f32],
    size: usize,
    shape: Shape,
    color: [f32; 3],
    side: usize,
    top: usize,
    left: usize,
) {
    let plane = size * size;
    let s = side as f32;
    let c = (s - 1.0) / 2.0;
    for dy in 0..side {
        for dx in 0..side {
            let (y, x) = (dy as f32 - c, dx as f32 - c);
            let r = (x * x + y * y).sqrt();
            let inside = match shape {
                Shape::Square => true,
                Shape::Disk => r <= s / 2.0,
                Shape::Ring => r <= s / 2.0 && r >= s / 4.0,
                Shape::Cross => x.abs() <= s / 6.0 || y.abs() <= s / 6.0,
                Shape::Triangle => 2.0 * x.abs() <= dy as f32 + 0.5,
                Shape::Diamond => x.abs() + y.abs() <= s / 2.0,
                Shape::Frame => {
                    let t = (s / 5.0).max(1.0);
                    x.abs() > c - t || y.abs() > c - t
                }
            };
            if inside {
                let p = (top + dy) * size + left + dx;
                for ch in 0..3 {
                    img[ch * plane + p] = color[ch];
                }
            }
        }
    }
}

/// Renders one sample from its own seed. Returns pixels `[C*H*W]` and the
/// presence vector.
fn render_sample(
    config: &SyntheticDatasetConfig,
    motifs: &[MotifSpec],
    seed: u64,
) -> (Vec<f32>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let plane = size * size;
    let bg: f32 = rng.gen_range(0.05..0.25);
    let mut img = vec![bg; 3 * plane];
    for _ in 0..config.clutter {
        let side = rng.gen_range(2..=(size / 4).max(2));
        let (top, left) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
        let grey = rng.gen_range(0.35..0.6);
        draw_motif(&mut img, size, Shape::Square, [grey; 3], side, top, left);
    }
    let mut present = vec![0u8; motifs.len()];
    for (i, m) in motifs.iter().enumerate() {
        if rng.gen_bool(config.presence) {
            present[i] = 1;
        }
        // draw positions and sizes regardless of presence so each label's
        // stream of random numbers is independent of the others
        let frac = rng.gen_range(m.size_range.0..=m.size_range.1);
        let side = ((frac * size as f32) as usize).clamp(2, size);
        let (top, left) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
        if present[i] == 1 {
            draw_motif(&mut img, size, m.shape, m.color, side, top, left);
        }
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0f32, config.noise).expect("noise validated");
        for v in &mut img {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    (img, present)
}

/// Generates every split deterministically from `config.seed`. Each sample
/// has its own seed derived from the global seed and its index; the split
/// assignment is a seeded shuffle of the sample indices.
pub fn generate_dataset(config: &SyntheticDatasetConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let motifs = config.resolved_motifs()?;
    let total = config.labeled + config.unlabeled;
    let l = config.label_count;
    let size = config.image_size;
    let sample_base = derive_seed(config.seed, "dataio.sample");
    let mut pixels = Vec::with_capacity(total * 3 * size * size);
    let mut labels = Vec::with_capacity(total * l);
    for i in 0..total {
        let (img, present) = render_sample(config, &motifs, sample_base.wrapping_add(i as u64));
        pixels.extend(img);
        labels.extend(present);
    }
    let images = Tensor::new(&[total, 3, size, size], pixels)?;
    let labels = LabelMatrix::new(total, l, labels)?;

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dataio.split")));
    let n_train = config.labeled * 4 / 5;
    let (labeled, unlabeled) = order.split_at(config.labeled);
    let (train, val) = labeled.split_at(n_train);
    let make = |split: Split, rows: &[usize], with_labels: bool| LabeledDataset {
        split,
        sample_ids: rows.to_vec(),
        images: images.select_rows(rows),
        labels: with_labels.then(|| labels.select_rows(rows)),
    };
    Ok(SyntheticDataset {
        config: config.clone(),
        train: make(Split::Train, train, true),
        val: make(Split::Val, val, true),
        unlabeled: make(Split::Unlabeled, unlabeled, false),
        eval_labels: labels.select_rows(unlabeled),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "seed")]
pub enum PartitionMode {
    Contiguous,
    Random(u64),
}

/// Splits labels `0..L` into `N` disjoint groups whose sizes differ by at
/// most one (larger groups first). Random mode shuffles the labels before
/// cutting and sorts each group.
pub fn partition_labels(l: usize, n: usize, mode: PartitionMode) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > l {
        return Err(Error::Config(format!("cannot split {l} labels into {n} groups")));
    }
    let mut labels: Vec<usize> = (0..l).collect();
    if let PartitionMode::Random(seed) = mode {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataio.partition")));
    }
    let mut groups = Vec::with_capacity(n);
    let mut start = 0;
    for g in 0..n {
        let size = l / n + usize::from(g < l % n);
        let mut group = labels[start..start + size].to_vec();
        group.sort_unstable();
        groups.push(group);
        start += size;
    }
    Ok(groups)
}
