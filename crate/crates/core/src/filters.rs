//! Teacher-level filters: a channel gate computed from globally pooled
//! student features, `x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocknet::{ArchitectureSpec, FeatureMap, Producer};
use crate::error::{Error, Result};
use crate::nncore::{derive_seed, fan_in_uniform, Graph, ParameterSet, Real, Tensor, Var};
use crate::teachers::TeacherRegistry;

pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterModule<T: Real = f32> {
    pub teacher: usize,
    pub block: usize,
    pub channels: usize,
    pub reduction: usize,
    /// `w1 [C/r, C]`, `b1`, `w2 [C, C/r]`, `b2`.
    pub params: ParameterSet<T>,
}

impl<T: Real> FilterModule<T> {
    /// Random first layer, zero second layer: the initial gate is exactly 0.5.
    pub fn new(teacher: usize, block: usize, channels: usize, reduction: usize, seed: u64) -> Self {
        let hidden = hidden_width(channels, reduction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        params.add("w1", fan_in_uniform(&[hidden, channels], channels, &mut rng));
        params.add("b1", Tensor::zeros(&[hidden]));
        params.add("w2", Tensor::zeros(&[channels, hidden]));
        params.add("b2", Tensor::zeros(&[channels]));
        FilterModule {
            teacher,
            block: block.max(1),
            channels,
            reduction,
            params,
        }
    }

    /// Sets every gate to `sigmoid(bias)` regardless of input.
    pub fn saturate(&mut self, bias: f64) {
        for name in ["w1", "b1", "w2"] {
            self.params.get_mut(name).expect("filter param").fill(T::zero());
        }
        self.params.get_mut("b2").expect("filter param").fill(T::of(bias));
    }

    /// Applies the filter on the tape; `vars` from `self.params.bind`.
    pub fn apply_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                format!("filter f[{}][{}] input", self.teacher, self.block),
                &[self.channels],
                &shape,
            ));
        }
        let n = shape[0];
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[n, self.channels])?;
        let h = g.linear(pooled, vars[0], Some(vars[1]))?;
        let h = g.relu(h);
        let z = g.linear(h, vars[2], Some(vars[3]))?;
        let gate = g.sigmoid(z);
        g.channel_scale(x, gate)
    }

    pub fn apply(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let x = g.constant(f.tensor.clone());
        let y = self.apply_graph(&mut g, &vars, x)?;
        Ok(FeatureMap {
            block: f.block,
            tensor: g.value(y).clone(),
            producer: Producer::Substituted,
        })
    }

    pub fn cast<U: Real>(&self) -> FilterModule<U> {
        FilterModule {
            teacher: self.teacher,
            block: self.block,
            channels: self.channels,
            reduction: self.reduction,
            params: self.params.cast(),
        }
    }
}

fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Filters keyed by `(teacher, block)`.
pub type FilterBank<T = f32> = BTreeMap<(usize, usize), FilterModule<T>>;

/// One filter per teacher and block, shaped for `spec`'s block features.
pub fn make_filter_bank(
    teachers: &TeacherRegistry,
    spec: &ArchitectureSpec,
    reduction: usize,
    seed: u64,
) -> Result<FilterBank> {
    if reduction == 0 {
        return Err(Error::Config("filter reduction must be positive".into()));
    }
    for (n, t) in teachers.teachers.iter().enumerate() {
        if !t.network.spec.same_trunk(spec) {
            return Err(Error::SpecHashMismatch {
                what: format!("teacher {n} block shapes vs the student"),
            });
        }
    }
    let mut bank = BTreeMap::new();
    for n in 0..teachers.len() {
        for k in 1..=spec.block_count() {
            let s = derive_seed(seed, &format!("filters.{n}.{k}"));
            bank.insert((n, k), FilterModule::new(n, k, spec.feature_shape(k)[0], reduction, s));
        }
    }
    Ok(bank)
}

pub fn bank_named_tensors(bank: &FilterBank) -> Vec<(String, Tensor)> {
    bank.values()
        .flat_map(|f| {
            f.params
                .iter()
                .map(move |p| (format!("filter.{}.{}.{}", f.teacher, f.block, p.name), p.value.clone()))
        })
        .collect()
}

/// Restores values saved by [`bank_named_tensors`] into a bank of the same layout.
pub fn load_bank_tensors(
    bank: &mut FilterBank,
    mut lookup: impl FnMut(&str) -> Option<Tensor>,
) -> Result<()> {
    for f in bank.values_mut() {
        let prefix = format!("filter.{}.{}", f.teacher, f.block);
        for p in f.params.iter_mut() {
            let name = format!("{prefix}.{}", p.name);
            let t = lookup(&name).ok_or_else(|| Error::Dataset(format!("missing tensor '{name}'")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(name, p.value.shape(), t.shape()));
            }
            p.value = t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{fd, sigmoid};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn feature(t: Tensor<f64>) -> FeatureMap<f64> {
        FeatureMap {
            block: 1,
            tensor: t,
            producer: Producer::Student,
        }
    }

    #[test]
    fn saturated_and_half_gates() {
        let x = random(&[2, 8, 3, 3], 1);
        let mut f = FilterModule::<f64>::new(0, 1, 8, 4, 7);
        assert_eq!(f.apply(&feature(x.clone())).unwrap().tensor, x.map(|v| 0.5 * v));
        f.saturate(20.0);
        let y = f.apply(&feature(x.clone())).unwrap().tensor;
        assert!(y.max_rel_diff(&x) < 1e-6);
        assert!(f.apply(&feature(random(&[1, 4, 3, 3], 2))).is_err());
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let (n, c, hw) = (2, 8, 4);
        let x = random(&[n, c, 2, 2], 3);
        let mut f = FilterModule::<f64>::new(0, 1, c, 4, 9);
        *f.params.get_mut("w2").unwrap() = random(&[c, 2], 4);
        *f.params.get_mut("b1").unwrap() = random(&[2], 5);
        *f.params.get_mut("b2").unwrap() = random(&[c], 6);
        let w1 = f.params.get("w1").unwrap().data().to_vec();
        let b1 = f.params.get("b1").unwrap().data().to_vec();
        let w2 = f.params.get("w2").unwrap().data().to_vec();
        let b2 = f.params.get("b2").unwrap().data().to_vec();
        let mut expected = x.clone();
        for i in 0..n {
            let gap: Vec<f64> = (0..c)
                .map(|ch| x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            let h: Vec<f64> = (0..2)
                .map(|j| (b1[j] + (0..c).map(|ch| w1[j * c + ch] * gap[ch]).sum::<f64>()).max(0.0))
                .collect();
            for ch in 0..c {
                let gate = sigmoid(b2[ch] + (0..2).map(|j| w2[ch * 2 + j] * h[j]).sum::<f64>());
                for v in &mut expected.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v *= gate;
                }
            }
        }
        let got = f.apply(&feature(x)).unwrap().tensor;
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 4, 3, 3], 11);
        let mut f = FilterModule::<f64>::new(0, 1, 4, 2, 12);
        *f.params.get_mut("w2").unwrap() = random(&[4, 2], 13);
        *f.params.get_mut("b1").unwrap() = random(&[2], 14).map(|v| v + 1.5);
        let r = random(&[1, 72], 15);
        let loss_of = |f: &FilterModule<f64>, x: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let vars = f.params.bind(&mut g);
            let xv = g.variable(x.clone());
            let y = f.apply_graph(&mut g, &vars, xv).unwrap();
            let flat = g.reshape(y, &[1, 72]).unwrap();
            let rv = g.constant(r.clone());
            let l = g.linear(flat, rv, None).unwrap();
            (g, vars, xv, l)
        };
        let (g, vars, xv, l) = loss_of(&f, &x);
        let grads = g.backward(l);
        let gx = grads.get(xv).unwrap().clone();
        let nx = fd::numeric_grad(&x, |xp| {
            let (g, _, _, l) = loss_of(&f, xp);
            g.value(l).data()[0]
        });
        assert!(fd::rel_error(&gx, &nx) < 1e-4);
        for (i, name) in ["w1", "b1", "w2", "b2"].iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap().clone();
            let base = f.params.get(name).unwrap().clone();
            let numeric = fd::numeric_grad(&base, |p| {
                *f.params.get_mut(name).unwrap() = p.clone();
                let (g, _, _, l) = loss_of(&f, &x);
                g.value(l).data()[0]
            });
            *f.params.get_mut(name).unwrap() = base;
            assert!(fd::rel_error(&analytic, &numeric) < 1e-4, "{name}");
        }
    }
}
