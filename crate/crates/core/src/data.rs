//! Labeled in-memory datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        inputs: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || inputs.len() != d * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), d],
                actual: vec![inputs.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            sample_shape,
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn empty(sample_shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            sample_shape,
            inputs: Vec::new(),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let d = self.sample_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn input_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.sample_len();
        &mut self.inputs[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, input: &[f32], label: usize) -> Result<()> {
        if input.len() != self.sample_len() {
            return Err(Error::ShapeMismatch {
                expected: self.sample_shape.clone(),
                actual: vec![input.len()],
            });
        }
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.sample_shape.clone(), self.num_classes);
        out.inputs.reserve(indices.len() * self.sample_len());
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Batch tensor `[n, sample_shape..]` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let samples: Vec<&[f32]> = indices.iter().map(|&i| self.input(i)).collect();
        let t = Tensor::stack(&self.sample_shape, &samples).expect("samples share the dataset shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
