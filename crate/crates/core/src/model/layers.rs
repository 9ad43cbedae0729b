//! Forward and backward kernels for the fixed layer menu.
//!
//! Activations are stored as `f32`; every reduction accumulates in `f64`.

use serde::{Deserialize, Serialize};

/// Kind and static dimensions of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f32,
        eps: f32,
    },
    Relu,
    Flatten,
    /// 2x2 average pooling with stride 2.
    AvgPool,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::AvgPool => "avgpool",
        }
    }
}

pub(crate) const KERNEL: usize = 3;

pub(crate) fn dense_forward(
    x: &[f32],
    n: usize,
    fin: usize,
    fout: usize,
    w: &[f32],
    b: &[f32],
    y: &mut [f32],
) {
    let mut acc = vec![0f64; fout];
    for s in 0..n {
        acc.iter_mut().zip(b).for_each(|(a, bv)| *a = *bv as f64);
        let xs = &x[s * fin..(s + 1) * fin];
        for (i, &xi) in xs.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let xi = xi as f64;
            let row = &w[i * fout..(i + 1) * fout];
            for (a, wv) in acc.iter_mut().zip(row) {
                *a += xi * *wv as f64;
            }
        }
        for (o, a) in y[s * fout..(s + 1) * fout].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f32],
    g: &[f32],
    n: usize,
    fin: usize,
    fout: usize,
    w: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let mut dw_acc = vec![0f64; fin * fout];
    let mut db_acc = vec![0f64; fout];
    for s in 0..n {
        let xs = &x[s * fin..(s + 1) * fin];
        let gs = &g[s * fout..(s + 1) * fout];
        for (a, gv) in db_acc.iter_mut().zip(gs) {
            *a += *gv as f64;
        }
        for (i, &xi) in xs.iter().enumerate() {
            let row = &w[i * fout..(i + 1) * fout];
            let mut dxi = 0f64;
            let drow = &mut dw_acc[i * fout..(i + 1) * fout];
            for o in 0..fout {
                let gv = gs[o] as f64;
                drow[o] += xi as f64 * gv;
                dxi += gv * row[o] as f64;
            }
            dx[s * fin + i] = dxi as f32;
        }
    }
    for (d, a) in dw.iter_mut().zip(&dw_acc) {
        *d += *a as f32;
    }
    for (d, a) in db.iter_mut().zip(&db_acc) {
        *d += *a as f32;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    w: &[f32],
    b: &[f32],
    y: &mut [f32],
) {
    let plane = h * wd;
    let mut acc = vec![0f64; plane];
    for s in 0..n {
        for co in 0..cout {
            acc.iter_mut().for_each(|a| *a = b[co] as f64);
            for ci in 0..cin {
                let inp = &x[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
                let kern = &w[(co * cin + ci) * KERNEL * KERNEL..(co * cin + ci + 1) * KERNEL * KERNEL];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = kern[ky * KERNEL + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, wd);
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let arow = &mut acc[oy * wd..(oy + 1) * wd];
                            let irow = &inp[iy * wd..(iy + 1) * wd];
                            for ox in x0..x1 {
                                arow[ox] += wv * irow[ox + kx - 1] as f64;
                            }
                        }
                    }
                }
            }
            let out = &mut y[(s * cout + co) * plane..(s * cout + co + 1) * plane];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
}

/// Output rows `o` for which input row `o + k - 1` lies inside `[0, len)`.
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let start = if k == 0 { 1 } else { 0 };
    let end = if k == KERNEL - 1 { len.saturating_sub(1) } else { len };
    (start, end)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    g: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    w: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let plane = h * wd;
    let mut dw_acc = vec![0f64; w.len()];
    let mut db_acc = vec![0f64; cout];
    let mut dx_acc = vec![0f64; plane];
    for s in 0..n {
        for co in 0..cout {
            let gp = &g[(s * cout + co) * plane..(s * cout + co + 1) * plane];
            db_acc[co] += gp.iter().map(|v| *v as f64).sum::<f64>();
        }
        for ci in 0..cin {
            let inp = &x[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
            dx_acc.iter_mut().for_each(|a| *a = 0.0);
            for co in 0..cout {
                let gp = &g[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                let base = (co * cin + ci) * KERNEL * KERNEL;
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = w[base + ky * KERNEL + kx] as f64;
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, wd);
                        let mut dwv = 0f64;
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let grow = &gp[oy * wd..(oy + 1) * wd];
                            let irow = &inp[iy * wd..(iy + 1) * wd];
                            let drow = &mut dx_acc[iy * wd..(iy + 1) * wd];
                            for ox in x0..x1 {
                                let gv = grow[ox] as f64;
                                dwv += gv * irow[ox + kx - 1] as f64;
                                drow[ox + kx - 1] += gv * wv;
                            }
                        }
                        dw_acc[base + ky * KERNEL + kx] += dwv;
                    }
                }
            }
            let out = &mut dx[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
            for (o, a) in out.iter_mut().zip(&dx_acc) {
                *o = *a as f32;
            }
        }
    }
    for (d, a) in dw.iter_mut().zip(&dw_acc) {
        *d += *a as f32;
    }
    for (d, a) in db.iter_mut().zip(&db_acc) {
        *d += *a as f32;
    }
}

/// Cached quantities of a batch-norm forward pass needed for backward and
/// for the running-statistics update.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub batch_stats: bool,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward(
    x: &[f32],
    n: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
    batch_stats: bool,
    y: &mut [f32],
) -> BnCache {
    let count = n * spatial;
    let (mean, var) = if batch_stats {
        let mut mean = vec![0f64; channels];
        let mut var = vec![0f64; channels];
        for c in 0..channels {
            let mut sum = 0f64;
            for s in 0..n {
                let base = (s * channels + c) * spatial;
                sum += x[base..base + spatial].iter().map(|v| *v as f64).sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0f64;
            for s in 0..n {
                let base = (s * channels + c) * spatial;
                sq += x[base..base + spatial]
                    .iter()
                    .map(|v| (*v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count as f64;
        }
        (mean, var)
    } else {
        (
            running_mean.iter().map(|v| *v as f64).collect(),
            running_var.iter().map(|v| *v as f64).collect(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            let (m, is, gm, bt) = (mean[c], inv_std[c], gamma[c] as f64, beta[c] as f64);
            for k in base..base + spatial {
                y[k] = ((x[k] as f64 - m) * is * gm + bt) as f32;
            }
        }
    }
    BnCache {
        batch_stats,
        mean,
        var,
        inv_std,
        count,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    x: &[f32],
    g: &[f32],
    n: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f32],
    cache: &BnCache,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
    dx: &mut [f32],
) {
    for c in 0..channels {
        let (m, is, gm) = (cache.mean[c], cache.inv_std[c], gamma[c] as f64);
        let mut sum_g = 0f64;
        let mut sum_gx = 0f64;
        for s in 0..n {
            let base = (s * channels + c) * spatial;
            for k in base..base + spatial {
                let xhat = (x[k] as f64 - m) * is;
                sum_g += g[k] as f64;
                sum_gx += g[k] as f64 * xhat;
            }
        }
        dgamma[c] += sum_gx as f32;
        dbeta[c] += sum_g as f32;
        let cnt = cache.count as f64;
        for s in 0..n {
            let base = (s * channels + c) * spatial;
            for k in base..base + spatial {
                let gk = g[k] as f64;
                dx[k] = if cache.batch_stats {
                    let xhat = (x[k] as f64 - m) * is;
                    (gm * is / cnt * (cnt * gk - sum_g - xhat * sum_gx)) as f32
                } else {
                    (gk * gm * is) as f32
                };
            }
        }
    }
}

pub(crate) fn avgpool_forward(x: &[f32], nc: usize, h: usize, w: usize, y: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let inp = &x[p * h * w..(p + 1) * h * w];
        let out = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let s = inp[2 * oy * w + 2 * ox] as f64
                    + inp[2 * oy * w + 2 * ox + 1] as f64
                    + inp[(2 * oy + 1) * w + 2 * ox] as f64
                    + inp[(2 * oy + 1) * w + 2 * ox + 1] as f64;
                out[oy * ow + ox] = (s * 0.25) as f32;
            }
        }
    }
}

pub(crate) fn avgpool_backward(g: &[f32], nc: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..nc {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gp[oy * ow + ox] * 0.25;
                d[2 * oy * w + 2 * ox] = v;
                d[2 * oy * w + 2 * ox + 1] = v;
                d[(2 * oy + 1) * w + 2 * ox] = v;
                d[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
}
