//! Blockified networks: a stack of blocks plus one sigmoid head per task.
//!
//! Every forward goes through the same two steps per block: [`block_input`]
//! assembles the block's input from the feature list `[F^0 = I, F^1, ...]`
//! according to the wiring, then [`Block::forward`] runs the unit. Feature
//! substitution is therefore nothing more than replacing one entry of that
//! list before the remaining blocks run.

mod selection;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use selection::TaskSelection;
pub use spec::{ArchitectureSpec, BlockSpec, InputShape, TaskHeadSpec, Wiring};

use crate::error::{Error, Result};
use crate::nncore::{fan_in_uniform, Graph, ParameterSet, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// `relu(conv_b(relu(conv_a(x))) + shortcut(x))`; the shortcut is a 1x1
    /// projection when channels or stride change.
    Residual { projection: bool },
    /// `relu(conv(x))` over the dense concatenation.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real = f32> {
    /// 1-based position in the stack.
    pub index: usize,
    pub kind: BlockKind,
    pub stride: usize,
    pub params: ParameterSet<T>,
}

impl<T: Real> Block<T> {
    fn init(spec: &ArchitectureSpec, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = spec.blocks[k - 1];
        let mut params = ParameterSet::new();
        let (cin, cout) = (b.in_channels, b.out_channels);
        let kind = match spec.wiring {
            Wiring::Sequential => {
                params.add("conv_a.weight", fan_in_uniform(&[cout, cin, 3, 3], cin * 9, rng));
                params.add("conv_a.bias", Tensor::zeros(&[cout]));
                params.add("conv_b.weight", fan_in_uniform(&[cout, cout, 3, 3], cout * 9, rng));
                params.add("conv_b.bias", Tensor::zeros(&[cout]));
                let projection = cin != cout || b.stride != 1;
                if projection {
                    params.add("proj.weight", fan_in_uniform(&[cout, cin, 1, 1], cin, rng));
                    params.add("proj.bias", Tensor::zeros(&[cout]));
                }
                BlockKind::Residual { projection }
            }
            Wiring::DenseConcat => {
                params.add("conv.weight", fan_in_uniform(&[cout, cin, 3, 3], cin * 9, rng));
                params.add("conv.bias", Tensor::zeros(&[cout]));
                BlockKind::Dense
            }
        };
        Block {
            index: k,
            kind,
            stride: b.stride,
            params,
        }
    }

    /// Runs the unit on an already-assembled input. `vars` come from
    /// `self.params.bind`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Result<Var> {
        match self.kind {
            BlockKind::Residual { projection } => {
                let h = g.conv2d(input, vars[0], Some(vars[1]), self.stride, 1)?;
                let h = g.relu(h);
                let h = g.conv2d(h, vars[2], Some(vars[3]), 1, 1)?;
                let shortcut = if projection {
                    g.conv2d(input, vars[4], Some(vars[5]), self.stride, 0)?
                } else {
                    input
                };
                let y = g.add(h, shortcut)?;
                Ok(g.relu(y))
            }
            BlockKind::Dense => {
                let h = g.conv2d(input, vars[0], Some(vars[1]), self.stride, 1)?;
                Ok(g.relu(h))
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            index: self.index,
            kind: self.kind,
            stride: self.stride,
            params: self.params.cast(),
        }
    }
}

/// Global-average-pool -> affine -> sigmoid head for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Real = f32> {
    pub task_id: usize,
    pub params: ParameterSet<T>,
}

impl<T: Real> Head<T> {
    fn init(task: TaskHeadSpec, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParameterSet::new();
        params.add(
            "fc.weight",
            fan_in_uniform(&[task.arity, channels], channels, rng),
        );
        params.add("fc.bias", Tensor::zeros(&[task.arity]));
        Head {
            task_id: task.task_id,
            params,
        }
    }

    /// Logits `[N, arity]` from pooled features.
    pub fn logits(&self, g: &mut Graph<T>, vars: &[Var], pooled: Var) -> Result<Var> {
        g.linear(pooled, vars[0], Some(vars[1]))
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head {
            task_id: self.task_id,
            params: self.params.cast(),
        }
    }
}

/// Assembles block `k`'s input from `feats = [F^0, ..., F^{k-1}]`.
pub fn block_input<T: Real>(
    spec: &ArchitectureSpec,
    g: &mut Graph<T>,
    k: usize,
    feats: &[Var],
) -> Result<Var> {
    if feats.len() < k {
        return Err(Error::Spec(format!(
            "block {k} needs {k} preceding feature maps, got {}",
            feats.len()
        )));
    }
    match spec.wiring {
        Wiring::Sequential => Ok(feats[k - 1]),
        Wiring::DenseConcat => {
            let target_h = g.value(feats[k - 1]).shape()[2];
            let mut parts = Vec::with_capacity(k);
            for &f in &feats[..k] {
                let h = g.value(f).shape()[2];
                parts.push(g.avg_pool(f, h / target_h)?);
            }
            g.concat_channels(&parts)
        }
    }
}

/// Tape handles of every parameter of a network.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub blocks: Vec<Vec<Var>>,
    pub heads: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockifiedNetwork<T: Real = f32> {
    pub spec: ArchitectureSpec,
    pub blocks: Vec<Block<T>>,
    pub heads: Vec<Head<T>>,
}

/// Fan-in-scaled uniform initialization of every block and head, driven
/// entirely by `init_seed`.
pub fn build_network(spec: &ArchitectureSpec, init_seed: u64) -> Result<BlockifiedNetwork> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let blocks = (1..=spec.block_count())
        .map(|k| Block::init(spec, k, &mut rng))
        .collect();
    let last_channels = spec.feature_shape(spec.block_count())[0];
    let heads = spec
        .heads
        .iter()
        .map(|&h| Head::init(h, last_channels, &mut rng))
        .collect();
    Ok(BlockifiedNetwork {
        spec: spec.clone(),
        blocks,
        heads,
    })
}

impl<T: Real> BlockifiedNetwork<T> {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task_id).collect()
    }

    pub fn head_position(&self, task_id: usize) -> Option<usize> {
        self.heads.iter().position(|h| h.task_id == task_id)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> NetVars {
        NetVars {
            blocks: self.blocks.iter().map(|b| b.params.bind(g)).collect(),
            heads: self.heads.iter().map(|h| h.params.bind(g)).collect(),
        }
    }

    pub fn input_var(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let (_, c, h, w) = batch.dims4()?;
        let i = self.spec.input;
        if (c, h, w) != (i.channels, i.height, i.width) {
            return Err(Error::shape(
                "network input (block 0)",
                &[i.channels, i.height, i.width],
                &[c, h, w],
            ));
        }
        Ok(g.constant(batch.clone()))
    }

    /// Extends `feats` (holding `F^0..F^{j}`) with `F^{j+1}..F^{upto}`.
    pub fn extend_features(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        feats: &mut Vec<Var>,
        upto: usize,
    ) -> Result<()> {
        for k in feats.len()..=upto {
            let input = block_input(&self.spec, g, k, feats)?;
            let out = self.blocks[k - 1].forward(g, &vars.blocks[k - 1], input)?;
            check_feature(&self.spec, g, k, out)?;
            feats.push(out);
        }
        Ok(())
    }

    /// Per-head logits from `F^B`.
    pub fn head_logits(&self, g: &mut Graph<T>, vars: &NetVars, last: Var) -> Result<Vec<Var>> {
        let pooled = g.global_avg_pool(last)?;
        self.heads
            .iter()
            .zip(&vars.heads)
            .map(|(h, hv)| h.logits(g, hv, pooled))
            .collect()
    }

    /// Full forward on the tape: returns `[F^0..F^B]` and per-head logits.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        input: Var,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut feats = vec![input];
        self.extend_features(g, vars, &mut feats, self.block_count())?;
        let logits = self.head_logits(g, vars, *feats.last().expect("non-empty"))?;
        Ok((feats, logits))
    }

    /// Resumes from block `k + 1` with `substitute` standing in for `F^k`.
    /// `prefix` holds `F^0..F^{k-1}`.
    pub fn substituted_logits(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        k: usize,
        prefix: &[Var],
        substitute: Var,
    ) -> Result<Vec<Var>> {
        if k == 0 || k > self.block_count() {
            return Err(Error::Spec(format!(
                "substitution block {k} outside 1..={}",
                self.block_count()
            )));
        }
        if prefix.len() != k {
            return Err(Error::Spec(format!(
                "substitution at block {k} needs F^0..F^{} ({k} maps), got {}",
                k - 1,
                prefix.len()
            )));
        }
        check_feature(&self.spec, g, k, substitute)?;
        let mut feats = prefix.to_vec();
        feats.push(substitute);
        self.extend_features(g, vars, &mut feats, self.block_count())?;
        self.head_logits(g, vars, *feats.last().expect("non-empty"))
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for b in &mut self.blocks {
            b.params.set_trainable(trainable);
        }
        for h in &mut self.heads {
            h.params.set_trainable(trainable);
        }
    }

    pub fn param_sets(&self) -> impl Iterator<Item = &ParameterSet<T>> {
        self.blocks
            .iter()
            .map(|b| &b.params)
            .chain(self.heads.iter().map(|h| &h.params))
    }

    pub fn param_sets_mut(&mut self) -> impl Iterator<Item = &mut ParameterSet<T>> {
        self.blocks
            .iter_mut()
            .map(|b| &mut b.params)
            .chain(self.heads.iter_mut().map(|h| &mut h.params))
    }

    pub fn num_parameters(&self) -> usize {
        self.param_sets().map(|p| p.num_values()).sum()
    }

    /// Bitwise equality of all parameter values.
    pub fn params_equal(&self, other: &BlockifiedNetwork<T>) -> bool {
        self.spec == other.spec
            && self.param_sets().count() == other.param_sets().count()
            && self
                .param_sets()
                .zip(other.param_sets())
                .all(|(a, b)| a.values_equal(b))
    }

    /// Head probabilities for `images`, evaluated `batch_size` rows at a time.
    pub fn predict(&self, images: &Tensor<T>, batch_size: usize) -> Result<PredictionSet<T>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut columns: Vec<Vec<T>> = vec![Vec::with_capacity(n); self.heads.len()];
        let mut arities = vec![1; self.heads.len()];
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
            let mut g = Graph::new();
            let vars = self.bind_frozen(&mut g);
            let input = self.input_var(&mut g, &images.select_rows(&rows))?;
            let (_, logits) = self.forward_graph(&mut g, &vars, input)?;
            for (i, &l) in logits.iter().enumerate() {
                let p = g.sigmoid(l);
                arities[i] = g.value(p).shape()[1];
                columns[i].extend_from_slice(g.value(p).data());
            }
            start += rows.len();
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

    /// Binds every parameter as a constant, whatever its trainable flag.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> NetVars {
        let bind = |p: &ParameterSet<T>, g: &mut Graph<T>| -> Vec<Var> {
            p.iter().map(|p| g.constant(p.value.clone())).collect()
        };
        NetVars {
            blocks: self.blocks.iter().map(|b| bind(&b.params, g)).collect(),
            heads: self.heads.iter().map(|h| bind(&h.params, g)).collect(),
        }
    }

    /// `block{k}.{param}` and `head{task}.{param}` tensors, in parameter order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for p in b.params.iter() {
                out.push((format!("block{}.{}", b.index, p.name), p.value.clone()));
            }
        }
        for h in &self.heads {
            for p in h.params.iter() {
                out.push((format!("head{}.{}", h.task_id, p.name), p.value.clone()));
            }
        }
        out
    }

    /// Rebuilds a network of `spec` from tensors named as by
    /// [`named_tensors`](Self::named_tensors).
    pub fn from_named(
        spec: &ArchitectureSpec,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let template = build_network(spec, 0)?.cast::<T>();
        let mut net = template;
        let mut fill = |prefix: String, params: &mut ParameterSet<T>| -> Result<()> {
            for p in params.iter_mut() {
                let name = format!("{prefix}.{}", p.name);
                let t = lookup(&name)
                    .ok_or_else(|| Error::Dataset(format!("missing tensor '{name}'")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::shape(name, p.value.shape(), t.shape()));
                }
                p.value = t;
            }
            Ok(())
        };
        for b in &mut net.blocks {
            fill(format!("block{}", b.index), &mut b.params)?;
        }
        for h in &mut net.heads {
            fill(format!("head{}", h.task_id), &mut h.params)?;
        }
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> BlockifiedNetwork<U> {
        BlockifiedNetwork {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            heads: self.heads.iter().map(Head::cast).collect(),
        }
    }
}

fn check_feature<T: Real>(spec: &ArchitectureSpec, g: &Graph<T>, k: usize, v: Var) -> Result<()> {
    let shape = g.value(v).shape();
    let expected = spec.feature_shape(k);
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::shape(format!("feature map of block {k}"), &expected, shape));
    }
    Ok(())
}

/// Which network produced a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Producer {
    Teacher(usize),
    Student,
    Substituted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Real = f32> {
    /// 1-based block index.
    pub block: usize,
    pub tensor: Tensor<T>,
    pub producer: Producer,
}

/// Per-task probabilities `[N, arity]`, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T: Real = f32> {
    pub task_ids: Vec<usize>,
    pub probs: Vec<Tensor<T>>,
}

impl<T: Real> PredictionSet<T> {
    pub fn from_logits(g: &mut Graph<T>, task_ids: Vec<usize>, logits: &[Var]) -> Self {
        let probs = logits
            .iter()
            .map(|&l| {
                let p = g.sigmoid(l);
                g.value(p).clone()
            })
            .collect();
        PredictionSet { task_ids, probs }
    }

    pub fn get(&self, task_id: usize) -> Option<&Tensor<T>> {
        self.task_ids
            .iter()
            .position(|&t| t == task_id)
            .map(|i| &self.probs[i])
    }

    /// Keeps only `task_ids`, in that order.
    pub fn select(&self, task_ids: &[usize]) -> Result<PredictionSet<T>> {
        let probs = task_ids
            .iter()
            .map(|&t| {
                self.get(t)
                    .cloned()
                    .ok_or_else(|| Error::Selection(format!("prediction for task {t} missing")))
            })
            .collect::<Result<_>>()?;
        Ok(PredictionSet {
            task_ids: task_ids.to_vec(),
            probs,
        })
    }

    pub fn max_abs_diff(&self, other: &PredictionSet<T>) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Forward pass returning every block feature `F^1..F^B` and all head outputs.
pub fn forward_collect<T: Real>(
    net: &BlockifiedNetwork<T>,
    batch: &Tensor<T>,
    producer: Producer,
) -> Result<(Vec<FeatureMap<T>>, PredictionSet<T>)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let input = net.input_var(&mut g, batch)?;
    let (feats, logits) = net.forward_graph(&mut g, &vars, input)?;
    let maps = feats[1..]
        .iter()
        .enumerate()
        .map(|(i, &f)| FeatureMap {
            block: i + 1,
            tensor: g.value(f).clone(),
            producer,
        })
        .collect();
    let preds = PredictionSet::from_logits(&mut g, net.task_ids(), &logits);
    for (t, p) in preds.task_ids.iter().zip(&preds.probs) {
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("prediction for task {t}")));
        }
    }
    Ok((maps, preds))
}

/// Resumes the teacher forward after block `k` with `substitute` in place of
/// its own `F^k`. `prefix` must hold the teacher's `F^1..F^{k-1}` for the same
/// `batch`. Predictions are returned for every head.
pub fn forward_substituted<T: Real>(
    teacher: &BlockifiedNetwork<T>,
    k: usize,
    substitute: &FeatureMap<T>,
    batch: &Tensor<T>,
    prefix: &[FeatureMap<T>],
) -> Result<PredictionSet<T>> {
    if k == 0 || k > teacher.block_count() {
        return Err(Error::Spec(format!(
            "substitution block {k} outside 1..={}",
            teacher.block_count()
        )));
    }
    if prefix.len() < k - 1 {
        return Err(Error::Spec(format!(
            "substitution at block {k} needs {} cached features, got {}",
            k - 1,
            prefix.len()
        )));
    }
    let n = batch.shape()[0];
    let mut g = Graph::new();
    let vars = teacher.bind(&mut g);
    let mut feats = vec![teacher.input_var(&mut g, batch)?];
    for (j, f) in prefix[..k - 1].iter().enumerate() {
        let expected = teacher.spec.feature_shape(j + 1);
        if f.block != j + 1 || f.tensor.shape()[1..] != expected || f.tensor.shape()[0] != n {
            return Err(Error::shape(
                format!("cached feature of block {}", j + 1),
                &expected,
                f.tensor.shape(),
            ));
        }
        feats.push(g.constant(f.tensor.clone()));
    }
    if substitute.tensor.shape().first() != Some(&n) {
        return Err(Error::shape(
            format!("substituted feature of block {k}"),
            &[n],
            substitute.tensor.shape(),
        ));
    }
    let sub = g.constant(substitute.tensor.clone());
    let logits = teacher.substituted_logits(&mut g, &vars, k, &feats, sub)?;
    Ok(PredictionSet::from_logits(&mut g, teacher.task_ids(), &logits))
}
