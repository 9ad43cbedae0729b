use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};

/// Square backdoor trigger stamped into the bottom-right corner of every
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPatch {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` pixel values.
    pub pixels: Vec<f32>,
    pub target: usize,
}

impl TriggerPatch {
    /// Checkerboard of `high` and `0.0`, starting with `high` at the
    /// patch's top-left pixel.
    pub fn checkerboard(size: usize, high: f32, target: usize) -> Self {
        let pixels = (0..size * size)
            .map(|i| if (i / size + i % size) % 2 == 0 { high } else { 0.0 })
            .collect();
        Self {
            height: size,
            width: size,
            pixels,
            target,
        }
    }

    /// Stamp onto a `[C, H, W]` (or `[H, W]`) image in place.
    pub fn stamp(&self, image: &mut [f32], shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => return Err(invalid(format!("trigger needs an image input, got shape {shape:?}"))),
        };
        if self.height > h || self.width > w || self.height == 0 || self.width == 0 {
            return Err(invalid(format!(
                "{}x{} trigger does not fit a {h}x{w} image",
                self.height, self.width
            )));
        }
        let (y0, x0) = (h - self.height, w - self.width);
        for ch in 0..c {
            let plane = &mut image[ch * h * w..(ch + 1) * h * w];
            for py in 0..self.height {
                for px in 0..self.width {
                    plane[(y0 + py) * w + x0 + px] = self.pixels[py * self.width + px];
                }
            }
        }
        Ok(())
    }
}

fn poison_count(n: usize, ratio: f64) -> Result<usize> {
    if n == 0 {
        return Err(invalid("cannot poison an empty dataset"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("pollution ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(((ratio * n as f64).floor() as usize).clamp(1, n))
}

/// Give `⌊γ·n⌋` (at least one) randomly chosen samples a uniformly random
/// label different from their own. Inputs are untouched.
pub fn poison_untargeted<R: Rng + ?Sized>(dataset: &Dataset, ratio: f64, rng: &mut R) -> Result<Dataset> {
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(invalid("label flipping needs at least two classes"));
    }
    let k = poison_count(dataset.len(), ratio)?;
    let mut out = dataset.clone();
    let mut chosen = sample(rng, dataset.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let orig = out.labels()[i];
        let mut new = rng.random_range(0..classes - 1);
        if new >= orig {
            new += 1;
        }
        out.labels_mut()[i] = new;
    }
    Ok(out)
}

/// Stamp the trigger onto `⌊γ·n⌋` (at least one) randomly chosen samples and
/// relabel them as the trigger's target class.
pub fn poison_targeted<R: Rng + ?Sized>(
    dataset: &Dataset,
    ratio: f64,
    trigger: &TriggerPatch,
    rng: &mut R,
) -> Result<Dataset> {
    if trigger.target >= dataset.num_classes() {
        return Err(invalid(format!(
            "trigger target {} outside {} classes",
            trigger.target,
            dataset.num_classes()
        )));
    }
    let k = poison_count(dataset.len(), ratio)?;
    let shape = dataset.sample_shape().to_vec();
    let mut out = dataset.clone();
    let mut chosen = sample(rng, dataset.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        trigger.stamp(out.input_mut(i), &shape)?;
        out.labels_mut()[i] = trigger.target;
    }
    Ok(out)
}
