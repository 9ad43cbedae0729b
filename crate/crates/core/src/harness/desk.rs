//! Synthetic desk-scale image data and a small CSV loader.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Class templates are coarse `cell × cell` grids of uniform intensities,
/// upsampled to the image size; samples add i.i.d. Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const TEMPLATE_GRID: usize = 4;

#[derive(Debug, Clone)]
pub struct DeskDataset {
    pub templates: Vec<Vec<f32>>,
    pub train: Dataset,
    pub test: Dataset,
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn template<R: Rng + ?Sized>(channels: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let grid = TEMPLATE_GRID.min(size);
    let coarse: Vec<f32> = (0..channels * grid * grid).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                out.push(coarse[c * grid * grid + (y * grid / size) * grid + x * grid / size]);
            }
        }
    }
    out
}

impl DeskDataset {
    /// Templates are redrawn until every pair is at least `4σ√dim` apart.
    pub fn generate(spec: &DeskSpec) -> Result<Self> {
        if spec.num_classes < 2 || spec.size == 0 || spec.channels == 0 {
            return Err(Error::InvalidConfig {
                key: "num_classes".into(),
                reason: "desk data needs >= 2 classes and a non-empty image".into(),
            });
        }
        let dim = spec.channels * spec.size * spec.size;
        let min_sep = 4.0 * spec.noise_sigma * (dim as f64).sqrt();
        let mut rng = stream_rng(spec.seed, Stream::Dataset, &[0]);
        let mut templates: Vec<Vec<f32>> = Vec::new();
        let mut attempts = 0;
        while templates.len() < spec.num_classes {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidConfig {
                    key: "noise_sigma".into(),
                    reason: format!("cannot place class templates {min_sep:.3} apart; lower the noise"),
                });
            }
            let t = template(spec.channels, spec.size, &mut rng);
            if templates.iter().all(|o| l2(o, &t) >= min_sep) {
                templates.push(t);
            }
        }
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig {
            key: "noise_sigma".into(),
            reason: e.to_string(),
        })?;
        let make = |n: usize, stream_id: u64| -> Result<Dataset> {
            let mut rng = stream_rng(spec.seed, Stream::Dataset, &[stream_id]);
            let mut ds = Dataset::empty(vec![spec.channels, spec.size, spec.size], spec.num_classes);
            let mut buf = vec![0f32; dim];
            for i in 0..n {
                let label = i % spec.num_classes;
                for (b, t) in buf.iter_mut().zip(&templates[label]) {
                    *b = t + noise.sample(&mut rng) as f32;
                }
                ds.push(&buf, label)?;
            }
            Ok(ds)
        };
        let train = make(spec.train, 1)?;
        let test = make(spec.test, 2)?;
        Ok(Self { templates, train, test })
    }
}

/// Read `label,v1,v2,..` rows (an optional non-numeric header is skipped).
pub fn load_csv_dataset(path: &std::path::Path, sample_shape: &[usize], num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let d: usize = sample_shape.iter().product();
    let mut ds = Dataset::empty(sample_shape.to_vec(), num_classes);
    let mut buf = Vec::with_capacity(d);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        let Ok(label) = first.parse::<usize>() else {
            if lineno == 0 {
                continue;
            }
            return Err(Error::Serialization(format!("{}:{}: bad label `{first}`", path.display(), lineno + 1)));
        };
        buf.clear();
        for f in fields {
            buf.push(f.parse::<f32>().map_err(|e| {
                Error::Serialization(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?);
        }
        if buf.len() != d {
            return Err(Error::Serialization(format!(
                "{}:{}: expected {d} values, found {}",
                path.display(),
                lineno + 1,
                buf.len()
            )));
        }
        ds.push(&buf, label)?;
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(ds)
}
