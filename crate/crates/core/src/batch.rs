use serde::{Deserialize, Serialize};

/// A minibatch of input rows with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub dim: usize,
    /// Row-major `len() × dim` values.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    /// Stream step that produced the batch (0 for ad-hoc batches).
    pub step: usize,
}

impl LabeledBatch {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(inputs.len(), dim * labels.len(), "inputs do not match labels × dim");
        LabeledBatch {
            dim,
            inputs,
            labels,
            step: 0,
        }
    }

    pub fn empty(dim: usize) -> Self {
        LabeledBatch::new(dim, Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, input: &[f64], label: usize) {
        assert_eq!(input.len(), self.dim);
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &LabeledBatch) -> LabeledBatch {
        assert_eq!(self.dim, other.dim);
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        out
    }

    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        let mut out = LabeledBatch::empty(self.dim);
        out.step = self.step;
        for &i in idx {
            out.push(self.input(i), self.labels[i]);
        }
        out
    }
}
