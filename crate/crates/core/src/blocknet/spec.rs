use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a block sees the features of earlier blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Block k reads only `F^{k-1}` (residual units).
    Sequential,
    /// Block k reads the channel concatenation of the input and every earlier
    /// feature map, each average-pooled to the spatial size of `F^{k-1}`.
    DenseConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHeadSpec {
    /// Global label index.
    pub task_id: usize,
    pub arity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input: InputShape,
    pub wiring: Wiring,
    pub blocks: Vec<BlockSpec>,
    pub heads: Vec<TaskHeadSpec>,
}

/// Output size of a 3x3, pad-1 convolution.
fn conv3_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

impl ArchitectureSpec {
    /// Builds a spec from `(out_channels, stride)` per block, deriving each
    /// block's input channel count from the wiring. Heads are binary tasks.
    pub fn new(
        input: InputShape,
        wiring: Wiring,
        layout: &[(usize, usize)],
        task_ids: &[usize],
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(layout.len());
        let mut concat_channels = input.channels;
        let mut prev = input.channels;
        for &(out_channels, stride) in layout {
            let in_channels = match wiring {
                Wiring::Sequential => prev,
                Wiring::DenseConcat => concat_channels,
            };
            blocks.push(BlockSpec {
                in_channels,
                out_channels,
                stride,
            });
            prev = out_channels;
            concat_channels += out_channels;
        }
        let spec = ArchitectureSpec {
            input,
            wiring,
            blocks,
            heads: task_ids
                .iter()
                .map(|&task_id| TaskHeadSpec { task_id, arity: 1 })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task_id).collect()
    }

    /// `(C, H, W)` of `F^k`; `k = 0` is the input image.
    pub fn feature_shape(&self, k: usize) -> [usize; 3] {
        let mut shape = [self.input.channels, self.input.height, self.input.width];
        for b in &self.blocks[..k] {
            shape = [b.out_channels, conv3_out(shape[1], b.stride), conv3_out(shape[2], b.stride)];
        }
        shape
    }

    /// Input channel count block `k` (1-based) must have under this wiring.
    pub fn expected_in_channels(&self, k: usize) -> usize {
        match self.wiring {
            Wiring::Sequential => self.feature_shape(k - 1)[0],
            Wiring::DenseConcat => {
                self.input.channels
                    + self.blocks[..k - 1]
                        .iter()
                        .map(|b| b.out_channels)
                        .sum::<usize>()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Spec(format!("degenerate input shape {:?}", self.input)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Spec("at least one block is required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let k = i + 1;
            if b.out_channels == 0 || b.stride == 0 {
                return Err(Error::Spec(format!(
                    "block {k}: channels and stride must be positive"
                )));
            }
            let expected = self.expected_in_channels(k);
            if b.in_channels != expected {
                return Err(Error::Spec(format!(
                    "block {k}: declares {} input channels but {:?} wiring provides {expected}",
                    b.in_channels, self.wiring
                )));
            }
            if self.wiring == Wiring::DenseConcat && k >= 2 {
                let [_, th, tw] = self.feature_shape(k - 1);
                for j in 0..k - 1 {
                    let [_, h, w] = self.feature_shape(j);
                    if h % th != 0 || w % tw != 0 || h / th != w / tw {
                        return Err(Error::Spec(format!(
                            "block {k}: feature {j} ({h}x{w}) cannot be average-pooled to {th}x{tw}"
                        )));
                    }
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.heads {
            if h.arity == 0 {
                return Err(Error::Spec(format!("task {} has zero arity", h.task_id)));
            }
            if !seen.insert(h.task_id) {
                return Err(Error::Spec(format!("duplicate head for task {}", h.task_id)));
            }
        }
        Ok(())
    }

    pub fn with_task_ids(&self, task_ids: &[usize]) -> Self {
        ArchitectureSpec {
            heads: task_ids
                .iter()
                .map(|&task_id| TaskHeadSpec { task_id, arity: 1 })
                .collect(),
            ..self.clone()
        }
    }

    /// Hash of everything except the heads: input, wiring and blocks.
    /// Teachers and the student must agree on it.
    pub fn trunk_hash(&self) -> String {
        let trunk = serde_json::json!({
            "input": self.input,
            "wiring": self.wiring,
            "blocks": self.blocks,
        });
        let bytes = serde_json::to_vec(&trunk).expect("plain data serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn same_trunk(&self, other: &ArchitectureSpec) -> bool {
        self.input == other.input && self.wiring == other.wiring && self.blocks == other.blocks
    }
}
