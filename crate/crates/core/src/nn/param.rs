use rand::Rng;

use super::{NnError, Shape, Tensor};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Shape, fan_in: usize, rng: &mut R) -> Self {
        Self::uniform(name, shape, (1.0 / fan_in.max(1) as f64).sqrt() as f32, rng)
    }

    /// Uniform in `±bound`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Shape, bound: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..=bound)).collect();
        Parameter::new(name, Tensor::new(shape, data).expect("numel matches"))
    }
}

/// Ordered collection of parameters; the index is the parameter's identity
/// inside a compute graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Parameter) -> usize {
        self.params.push(param);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// `value <- value - lr * grad`. Gradients are left for the caller to zero.
    pub fn sgd_step(&mut self, learning_rate: f32) {
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= learning_rate * *g;
            }
        }
    }

    /// Replaces every value with the matching entry of `other`, by name and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::ParamCount {
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (mine, theirs) in self.params.iter_mut().zip(other.iter()) {
            if mine.name != theirs.name {
                return Err(NnError::ParamName {
                    expected: mine.name.clone(),
                    actual: theirs.name.clone(),
                });
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "load_values",
                    left: mine.value.shape(),
                    right: theirs.value.shape(),
                });
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

impl FromIterator<Parameter> for ParamStore {
    fn from_iter<I: IntoIterator<Item = Parameter>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}
