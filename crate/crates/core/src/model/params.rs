use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: usize,
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// `false` for batch-norm running statistics, which travel with the
    /// vector but are never touched by the optimizer.
    pub trainable: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps `(layer index, parameter name)` to a slice of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    /// A single trainable block of `len` coordinates, for vectors that do
    /// not come from a model.
    pub fn flat(len: usize) -> Self {
        Self::new(vec![ParamEntry {
            layer: 0,
            name: "flat".into(),
            offset: 0,
            shape: vec![len],
            trainable: true,
        }])
    }

    pub(crate) fn new(entries: Vec<ParamEntry>) -> Self {
        let total = entries.last().map(|e| e.offset + e.len()).unwrap_or(0);
        Self { entries, total }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn find(&self, layer: usize, name: &str) -> Option<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.name == name)
    }

    /// Per-coordinate trainable mask.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if e.trainable {
                mask[e.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Contiguous coordinate groups, one per layer that owns parameters.
    pub fn layer_ranges(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut out: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((layer, r)) if *layer == e.layer && r.end == e.offset => r.end = e.offset + e.len(),
                _ => out.push((e.layer, e.range())),
            }
        }
        out
    }
}

/// Flattened model parameters (or an update `θ − φ`) with their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "vector has {} coordinates, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "vectors come from different architectures".into(),
            ))
        }
    }

    /// Build a vector sharing this vector's layout.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<Self> {
        let mut out = self.clone();
        out.add_scaled(other, 1.0)?;
        Ok(out)
    }

    /// `self += scale * other`, accumulated in f64 per coordinate.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = (*a as f64 + scale * *b as f64) as f32;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v = (*v as f64 * factor) as f32;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        sq_distance(&self.values, &other.values).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub(crate) fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}
