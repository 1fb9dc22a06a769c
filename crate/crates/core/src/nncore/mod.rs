//! Differentiable primitives, parameters and the optimizer.
//!
//! The tape in [`graph`] is intentionally small: it implements exactly the
//! operator set listed by [`required_primitives`] and nothing else.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use graph::{bce_mean, sigmoid, Gradients, Graph, Var, PROB_EPS};
pub use optim::{sgd_step, OptimizerConfig, PolySgd};
pub use params::{fan_in_uniform, Parameter, ParameterSet};
pub use tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    GlobalAvgPool,
    MaxPool,
    AvgPool,
    Linear,
    Relu,
    Sigmoid,
    ChannelScale,
    ConcatChannels,
    Add,
    BinaryCrossEntropy,
    PolySgd,
}

/// The full operator set the framework is built on.
pub fn required_primitives() -> &'static [Primitive] {
    use Primitive::*;
    &[
        Conv2d,
        GlobalAvgPool,
        MaxPool,
        AvgPool,
        Linear,
        Relu,
        Sigmoid,
        ChannelScale,
        ConcatChannels,
        Add,
        BinaryCrossEntropy,
        PolySgd,
    ]
}

/// Derives a per-module seed from the global seed and a stable module name
/// (FNV-1a of the name, mixed with splitmix64).
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}
