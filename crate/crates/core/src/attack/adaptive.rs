use crate::error::{invalid, Error, Result};
use crate::model::{ActivationSet, BnMode, Model};
use crate::tensor::Tensor;

/// Mean over probe samples of `Σ_l ‖z_b − z_a‖₂`, where `z_b` comes from the
/// frozen global model and `z_a` from the attacker's model; both are
/// evaluated with current-batch normalization.
#[derive(Debug, Clone)]
pub struct AdaptiveRegularizer {
    probe: Tensor,
    reference: ActivationSet,
    /// Positions in the tap list that are regularized.
    taps: Vec<usize>,
}

impl AdaptiveRegularizer {
    pub fn new(global: &Model, probe: Tensor, taps: Option<&[usize]>) -> Result<Self> {
        let reference = global.forward_with_taps(&probe, BnMode::CurrentBatchStats)?;
        let all = reference.taps.len();
        let taps = match taps {
            Some(t) => {
                if t.is_empty() || t.iter().any(|&i| i >= all) {
                    return Err(invalid(format!("adaptive taps {t:?} invalid for {all} tap points")));
                }
                t.to_vec()
            }
            None => (0..all).collect(),
        };
        Ok(Self {
            probe,
            reference,
            taps,
        })
    }

    fn check(&self, local: &Model) -> Result<ActivationSet> {
        let acts = local.forward_with_taps(&self.probe, BnMode::CurrentBatchStats)?;
        if acts.taps != self.reference.taps
            || acts
                .embeddings
                .iter()
                .zip(&self.reference.embeddings)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::LayoutMismatch(
                "adaptive regularizer models differ in architecture".into(),
            ));
        }
        Ok(acts)
    }

    pub fn value(&self, local: &Model) -> Result<f64> {
        let acts = self.check(local)?;
        Ok(regularizer_value(&self.reference, &acts, &self.taps))
    }

    /// Value and gradient with respect to the local model's parameters.
    pub fn value_and_grad(&self, local: &Model) -> Result<(f64, Vec<f32>)> {
        let trace = local.forward_trace(&self.probe, BnMode::CurrentBatchStats)?;
        let acts = local.taps_from_trace(&trace);
        if acts.taps != self.reference.taps {
            return Err(Error::LayoutMismatch(
                "adaptive regularizer models differ in architecture".into(),
            ));
        }
        let m = self.probe.batch() as f64;
        let mut value = 0f64;
        let mut injected: Vec<(usize, Tensor)> = Vec::new();
        for &t in &self.taps {
            let za = &acts.embeddings[t];
            let zb = &self.reference.embeddings[t];
            let layer = acts.taps[t];
            let mut g = vec![0f32; za.len()];
            let d = za.sample_len();
            for k in 0..za.batch() {
                let (a, b) = (za.sample(k), zb.sample(k));
                let dist = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                value += dist;
                if dist > 0.0 {
                    for j in 0..d {
                        g[k * d + j] = ((a[j] as f64 - b[j] as f64) / (m * dist)) as f32;
                    }
                }
            }
            let shape = trace.layer_output(layer).shape().to_vec();
            injected.push((layer, Tensor::new(shape, g)?));
        }
        let refs: Vec<(usize, &Tensor)> = injected.iter().map(|(l, t)| (*l, t)).collect();
        let grads = local.backward(&trace, &refs)?;
        Ok((value / m, grads))
    }
}

fn regularizer_value(reference: &ActivationSet, acts: &ActivationSet, taps: &[usize]) -> f64 {
    let mut total = 0f64;
    let mut m = 1;
    for &t in taps {
        let (za, zb) = (&acts.embeddings[t], &reference.embeddings[t]);
        m = za.batch();
        for k in 0..za.batch() {
            total += za
                .sample(k)
                .iter()
                .zip(zb.sample(k))
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / m as f64
}

/// Convenience form: regularizer value for one probe batch and model pair.
pub fn adaptive_regularizer(probe: &Tensor, global: &Model, local: &Model, taps: Option<&[usize]>) -> Result<f64> {
    if global.architecture() != local.architecture() {
        return Err(Error::LayoutMismatch(
            "adaptive regularizer models differ in architecture".into(),
        ));
    }
    AdaptiveRegularizer::new(global, probe.clone(), taps)?.value(local)
}
