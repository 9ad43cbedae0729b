use serde::{Deserialize, Serialize};

use crate::attack::TriggerPatch;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::federation::RoundRecord;
use crate::model::{BnMode, Model};

const EVAL_BATCH: usize = 256;

/// Predicted class of every sample, evaluated in chunks with running
/// batch-norm statistics.
pub fn predict(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let logits = model.logits(&x, BnMode::RunningStats)?;
        for k in 0..logits.batch() {
            let row = logits.sample(k);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            out.push(best);
        }
    }
    Ok(out)
}

/// Top-1 accuracy.
pub fn evaluate_acc(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let pred = predict(model, test, &idx)?;
    let correct = pred.iter().zip(test.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of triggered non-target test samples classified as the target.
pub fn evaluate_asr(model: &Model, test: &Dataset, trigger: &TriggerPatch) -> Result<f64> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] != trigger.target).collect();
    if idx.is_empty() {
        return Err(Error::EmptyDataset("no test samples outside the target class".into()));
    }
    let mut stamped = test.subset(&idx);
    let shape = stamped.sample_shape().to_vec();
    for i in 0..stamped.len() {
        trigger.stamp(stamped.input_mut(i), &shape)?;
    }
    let all: Vec<usize> = (0..stamped.len()).collect();
    let pred = predict(model, &stamped, &all)?;
    Ok(pred.iter().filter(|&&p| p == trigger.target).count() as f64 / idx.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Final-window summary. Values are fractions; [`Summary::display`]
/// renders percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub asr_mean: Option<f64>,
    pub asr_std: Option<f64>,
    pub window: usize,
}

impl Summary {
    pub fn display_acc(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.acc_mean, 100.0 * self.acc_std)
    }

    pub fn display_asr(&self) -> Option<String> {
        Some(format!("{:.2} ± {:.2}", 100.0 * self.asr_mean?, 100.0 * self.asr_std?))
    }
}

/// Mean ± population σ of ACC (and ASR when recorded) over the last
/// `window` rounds.
pub fn final_metrics(records: &[RoundRecord], window: usize) -> Result<Summary> {
    if window == 0 || window > records.len() {
        return Err(invalid(format!(
            "metric window {window} does not fit a run of {} rounds",
            records.len()
        )));
    }
    let tail = &records[records.len() - window..];
    let acc: Vec<f64> = tail.iter().map(|r| r.acc).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let asr: Option<Vec<f64>> = tail.iter().map(|r| r.asr).collect();
    let (asr_mean, asr_std) = match asr {
        Some(a) => {
            let (m, s) = mean_std(&a);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(Summary {
        acc_mean,
        acc_std,
        asr_mean,
        asr_std,
        window,
    })
}
