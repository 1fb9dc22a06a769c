use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub(crate) velocity: Option<Tensor<T>>,
}

/// Ordered collection of named tensors with gradient slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
            velocity: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn param(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn any_trainable(&self) -> bool {
        self.params.iter().any(|p| p.trainable)
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every tensor on the tape: trainable tensors become gradient
    /// leaves, frozen ones constants. The returned vars follow parameter order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Adds tape gradients for `vars` (as returned by [`bind`](Self::bind)).
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    velocity: None,
                })
                .collect(),
        }
    }

    /// Bitwise equality of values (names and shapes included).
    pub fn values_equal(&self, other: &ParameterSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Uniform initialization with bound `sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}
