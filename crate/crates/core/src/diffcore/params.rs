use super::tensor::TensorValue;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: TensorValue,
}

/// Named collection of all trainable parameters.
///
/// Ids are stable registration indices; layers keep their `ParamId`s and
/// read the current values through this set on every forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: TensorValue) -> ParamId {
        let id = self.tensors.len();
        self.tensors.push(ParamTensor {
            name: name.into(),
            value,
        });
        id
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id].value.data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id].value.data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.tensors[id].value.shape
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Per-parameter gradient buffers, aligned with a `ParameterSet`.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| vec![0.0; t.value.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
