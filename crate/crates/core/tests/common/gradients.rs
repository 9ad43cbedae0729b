//! Analytic gradients against central differences of an independent f64
//! forward implementation.

use std::sync::Arc;

use fedmid::attack::AdaptiveRegularizer;
use fedmid::model::{ArchBuilder, Architecture, BnMode, LayerKind, Model};
use fedmid::rng::{stream_rng, Stream};
use fedmid::tensor::Tensor;
use rand::Rng;

/// Reference activations `[n][features]` per layer output, computed in f64.
fn reference_forward(arch: &Architecture, params: &[f64], x: &[Vec<f64>], batch_stats: bool) -> Vec<Vec<Vec<f64>>> {
    let layout = arch.layout();
    let block = |l: usize, name: &str| -> &[f64] { &params[layout.find(l, name).unwrap().range()] };
    let mut cur: Vec<Vec<f64>> = x.to_vec();
    let mut outs = Vec::new();
    for (l, layer) in arch.layers().iter().enumerate() {
        let n = cur.len();
        cur = match layer.kind {
            LayerKind::Dense { in_features, out_features } => {
                let (w, b) = (block(l, "weight"), block(l, "bias"));
                cur.iter()
                    .map(|s| {
                        (0..out_features)
                            .map(|o| b[o] + (0..in_features).map(|i| s[i] * w[i * out_features + o]).sum::<f64>())
                            .collect()
                    })
                    .collect()
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let (h, wd) = (layer.in_shape[1], layer.in_shape[2]);
                let (w, b) = (block(l, "weight"), block(l, "bias"));
                cur.iter()
                    .map(|s| {
                        let mut y = vec![0.0; out_channels * h * wd];
                        for co in 0..out_channels {
                            for oy in 0..h {
                                for ox in 0..wd {
                                    let mut acc = b[co];
                                    for ci in 0..in_channels {
                                        for ky in 0..3 {
                                            for kx in 0..3 {
                                                let iy = oy as isize + ky as isize - 1;
                                                let ix = ox as isize + kx as isize - 1;
                                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                    continue;
                                                }
                                                acc += w[((co * in_channels + ci) * 3 + ky) * 3 + kx]
                                                    * s[(ci * h + iy as usize) * wd + ix as usize];
                                            }
                                        }
                                    }
                                    y[(co * h + oy) * wd + ox] = acc;
                                }
                            }
                        }
                        y
                    })
                    .collect()
            }
            LayerKind::BatchNorm { channels, eps, .. } => {
                let spatial = cur[0].len() / channels;
                let (g, be) = (block(l, "gamma"), block(l, "beta"));
                let (rm, rv) = (block(l, "running_mean"), block(l, "running_var"));
                let mut out = cur.clone();
                for c in 0..channels {
                    let vals: Vec<f64> = cur.iter().flat_map(|s| s[c * spatial..(c + 1) * spatial].to_vec()).collect();
                    let (m, v) = if batch_stats {
                        let m = vals.iter().sum::<f64>() / vals.len() as f64;
                        (m, vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64)
                    } else {
                        (rm[c], rv[c])
                    };
                    for (o, s) in out.iter_mut().zip(&cur) {
                        for k in c * spatial..(c + 1) * spatial {
                            o[k] = (s[k] - m) / (v + eps as f64).sqrt() * g[c] + be[c];
                        }
                    }
                }
                out
            }
            LayerKind::Relu => cur.iter().map(|s| s.iter().map(|v| v.max(0.0)).collect()).collect(),
            LayerKind::Flatten => cur,
            LayerKind::AvgPool => {
                let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
                cur.iter()
                    .map(|s| {
                        let mut y = Vec::with_capacity(c * h / 2 * w / 2);
                        for ch in 0..c {
                            for oy in 0..h / 2 {
                                for ox in 0..w / 2 {
                                    let at = |y: usize, x: usize| s[(ch * h + y) * w + x];
                                    y.push(
                                        0.25 * (at(2 * oy, 2 * ox)
                                            + at(2 * oy, 2 * ox + 1)
                                            + at(2 * oy + 1, 2 * ox)
                                            + at(2 * oy + 1, 2 * ox + 1)),
                                    );
                                }
                            }
                        }
                        y
                    })
                    .collect()
            }
        };
        assert_eq!(cur.len(), n);
        outs.push(cur.clone());
    }
    outs
}

fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            z.ln() + m - row[y]
        })
        .sum::<f64>()
        / logits.len() as f64
}

fn random_input(arch: &Architecture, n: usize, seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut rng = stream_rng(seed, Stream::Dataset, &[]);
    let d: usize = arch.input_shape().iter().product();
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(arch.input_shape());
    let t = Tensor::new(shape, rows.concat()).unwrap();
    (t, rows.iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect())
}

/// Randomize biases and batch-norm parameters/statistics: zero biases put
/// ReLU inputs exactly on the kink, and default statistics make running-mode
/// normalization the identity.
fn randomize_aux(model: &mut Model, seed: u64) {
    let mut rng = stream_rng(seed, Stream::Init, &[99]);
    let entries = model.architecture().layout().entries().to_vec();
    for e in entries {
        if e.name != "weight" {
            for v in &mut model.params_mut()[e.range()] {
                *v = if e.name == "running_var" || e.name == "gamma" {
                    rng.random_range(0.5f32..1.5)
                } else {
                    rng.random_range(-0.5f32..0.5)
                };
            }
        }
    }
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-7
}

pub fn check_loss_gradient(arch: Arc<Architecture>, mode: BnMode, seed: u64) -> Result<(), String> {
    let mut model = Model::init(arch.clone(), &mut stream_rng(seed, Stream::Init, &[]));
    randomize_aux(&mut model, seed);
    let (x, xs) = random_input(&arch, 5, seed);
    let labels: Vec<usize> = (0..5).map(|i| i % arch.num_outputs()).collect();
    let (_, grads, _) = model.loss_and_grad(&x, &labels, mode).unwrap();
    let base: Vec<f64> = model.params().iter().map(|v| *v as f64).collect();
    let batch_stats = mode == BnMode::CurrentBatchStats;
    let loss_at = |p: &[f64]| {
        let acts = reference_forward(&arch, p, &xs, batch_stats);
        cross_entropy(acts.last().unwrap(), &labels)
    };
    let mask = arch.layout().trainable_mask();
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..base.len() {
        if !mask[i] {
            ensure!(grads[i] == 0.0, "running statistic {i} received a gradient");
            continue;
        }
        let mut p = base.clone();
        p[i] += h;
        let up = loss_at(&p);
        p[i] -= 2.0 * h;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * h);
        ensure!(
            close(grads[i] as f64, numeric),
            "param {i}: analytic {} vs numeric {numeric}",
            grads[i]
        );
        checked += 1;
    }
    ensure!(checked > 0, "no trainable parameter checked");
    Ok(())
}

pub fn dense_relu_network() -> Result<(), String> {
    check_loss_gradient(Architecture::mlp(&[6], [5, 4], 3, false).unwrap(), BnMode::CurrentBatchStats, 1)
}

pub fn dense_batchnorm_network_batch_statistics() -> Result<(), String> {
    check_loss_gradient(Architecture::mlp(&[6], [5, 4], 3, true).unwrap(), BnMode::CurrentBatchStats, 2)
}

pub fn dense_batchnorm_network_running_statistics() -> Result<(), String> {
    check_loss_gradient(Architecture::mlp(&[6], [5, 4], 3, true).unwrap(), BnMode::RunningStats, 3)
}

pub fn conv_batchnorm_pool_network() -> Result<(), String> {
    let arch = ArchBuilder::new(vec![2, 4, 4])
        .conv(3)
        .batchnorm()
        .relu()
        .avgpool()
        .flatten()
        .dense(3)
        .build()
        .unwrap();
    check_loss_gradient(arch.clone(), BnMode::CurrentBatchStats, 4)?;
    check_loss_gradient(arch, BnMode::RunningStats, 5)
}

pub fn tiny_block_net() -> Result<(), String> {
    check_loss_gradient(Architecture::tiny_block_net([1, 8, 8], 2, 3).unwrap(), BnMode::CurrentBatchStats, 6)
}

pub fn adaptive_regularizer_gradient() -> Result<(), String> {
    let arch = Architecture::mlp(&[4], [5, 3], 3, true).unwrap();
    let global = Model::init(arch.clone(), &mut stream_rng(7, Stream::Init, &[]));
    let mut local = global.clone();
    let mut rng = stream_rng(7, Stream::Init, &[1]);
    for v in local.params_mut() {
        *v += rng.random_range(-0.2f32..0.2);
    }
    let (probe, ps) = random_input(&arch, 6, 8);
    let reg = AdaptiveRegularizer::new(&global, probe, None).unwrap();
    let (value, grads) = reg.value_and_grad(&local).unwrap();

    let gp: Vec<f64> = global.params().iter().map(|v| *v as f64).collect();
    let reference = reference_forward(&arch, &gp, &ps, true);
    let taps = arch.taps().to_vec();
    let reg_at = |p: &[f64]| {
        let acts = reference_forward(&arch, p, &ps, true);
        let mut total = 0.0;
        for &t in &taps {
            for (a, b) in acts[t].iter().zip(&reference[t]) {
                total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            }
        }
        total / ps.len() as f64
    };
    let base: Vec<f64> = local.params().iter().map(|v| *v as f64).collect();
    ensure!((reg_at(&base) - value).abs() < 1e-5 * value.max(1.0), "regularizer value {value} disagrees with reference");
    let mask = arch.layout().trainable_mask();
    let h = 1e-6;
    for i in (0..base.len()).filter(|&i| mask[i]) {
        let mut p = base.clone();
        p[i] += h;
        let up = reg_at(&p);
        p[i] -= 2.0 * h;
        let numeric = (up - reg_at(&p)) / (2.0 * h);
        ensure!(close(grads[i] as f64, numeric), "param {i}: {} vs {numeric}", grads[i]);
    }
    Ok(())
}

/// Every layer kind in both batch-norm modes, plus the adaptive regularizer.
pub fn all() -> Result<(), String> {
    dense_relu_network()?;
    dense_batchnorm_network_batch_statistics()?;
    dense_batchnorm_network_running_statistics()?;
    conv_batchnorm_pool_network()?;
    tiny_block_net()?;
    adaptive_regularizer_gradient()
}
