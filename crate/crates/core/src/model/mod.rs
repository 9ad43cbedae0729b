//! Minimal deterministic neural-network engine.
//!
//! A [`Model`] is an [`Architecture`] (shared, immutable) plus one flat
//! parameter buffer whose layout is described by [`Layout`]. Keeping every
//! coordinate, batch-norm running statistics included, in a single buffer
//! makes `θ − φ` and aggregation plain vector arithmetic.

mod layers;
mod optim;
mod params;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::LayerKind;
pub use optim::{softmax_cross_entropy, Hyperparams, Sgd};
pub use params::{Layout, ParamEntry, ParamVector};
pub(crate) use params::sq_distance;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use layers::BnCache;

/// How batch-norm layers normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Inference: normalize with the stored running mean/variance.
    RunningStats,
    /// Normalize with the batch's own statistics. Never writes running stats.
    CurrentBatchStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    offset: usize,
}

impl Layer {
    fn param_sizes(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![in_features, out_features], true),
                ("bias", vec![out_features], true),
            ],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => vec![
                (
                    "weight",
                    vec![out_channels, in_channels, layers::KERNEL, layers::KERNEL],
                    true,
                ),
                ("bias", vec![out_channels], true),
            ],
            LayerKind::BatchNorm { channels, .. } => vec![
                ("gamma", vec![channels], true),
                ("beta", vec![channels], true),
                ("running_mean", vec![channels], false),
                ("running_var", vec![channels], false),
            ],
            _ => Vec::new(),
        }
    }

    fn param_count(&self) -> usize {
        self.param_sizes()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Split this layer's slice of the parameter buffer into its blocks.
    fn blocks<'a>(&self, params: &'a [f32]) -> Vec<&'a [f32]> {
        let mut out = Vec::new();
        let mut off = self.offset;
        for (_, shape, _) in self.param_sizes() {
            let n: usize = shape.iter().product();
            out.push(&params[off..off + n]);
            off += n;
        }
        out
    }

    fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }
}

/// Immutable network description shared by all models of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    taps: Vec<usize>,
    layout: Arc<Layout>,
}

impl Architecture {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer indices whose outputs are exported as embeddings; the last one
    /// is always the output (logit) layer.
    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_outputs(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.out_shape.iter().product())
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Small convolutional reference network:
    /// `[conv3x3(ch) → batchnorm → relu → avgpool] × 2 → flatten → dense`.
    /// Taps sit after each block's relu and at the logits.
    pub fn tiny_block_net(input: [usize; 3], channels: usize, classes: usize) -> Result<Arc<Self>> {
        ArchBuilder::new(input.to_vec())
            .conv(channels)
            .batchnorm()
            .relu()
            .tap()
            .avgpool()
            .conv(channels)
            .batchnorm()
            .relu()
            .tap()
            .avgpool()
            .flatten()
            .dense(classes)
            .build()
    }

    /// Two hidden dense layers (optionally with batch norm), taps after each
    /// hidden relu and at the logits.
    pub fn mlp(input: &[usize], hidden: [usize; 2], classes: usize, batchnorm: bool) -> Result<Arc<Self>> {
        let mut b = ArchBuilder::new(input.to_vec());
        if input.len() > 1 {
            b = b.flatten();
        }
        for h in hidden {
            b = b.dense(h);
            if batchnorm {
                b = b.batchnorm();
            }
            b = b.relu().tap();
        }
        b.dense(classes).build()
    }
}

/// Incremental architecture construction with shape inference.
#[derive(Debug)]
pub struct ArchBuilder {
    input_shape: Vec<usize>,
    current: Vec<usize>,
    layers: Vec<Layer>,
    taps: Vec<usize>,
    offset: usize,
    error: Option<Error>,
}

impl ArchBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            current: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
            taps: Vec::new(),
            offset: 0,
            error: None,
        }
    }

    fn push(mut self, kind: LayerKind, out_shape: Vec<usize>) -> Self {
        let layer = Layer {
            kind,
            in_shape: self.current.clone(),
            out_shape: out_shape.clone(),
            offset: self.offset,
        };
        self.offset += layer.param_count();
        self.layers.push(layer);
        self.current = out_shape;
        self
    }

    fn fail(mut self, msg: String) -> Self {
        if self.error.is_none() {
            self.error = Some(invalid(msg));
        }
        self
    }

    pub fn dense(self, out_features: usize) -> Self {
        if self.current.len() != 1 {
            let msg = format!("dense layer needs a flat input, got {:?}", self.current);
            return self.fail(msg);
        }
        let in_features = self.current[0];
        self.push(
            LayerKind::Dense {
                in_features,
                out_features,
            },
            vec![out_features],
        )
    }

    pub fn conv(self, out_channels: usize) -> Self {
        if self.current.len() != 3 {
            let msg = format!("conv layer needs [C, H, W] input, got {:?}", self.current);
            return self.fail(msg);
        }
        let (c, h, w) = (self.current[0], self.current[1], self.current[2]);
        self.push(
            LayerKind::Conv2d {
                in_channels: c,
                out_channels,
            },
            vec![out_channels, h, w],
        )
    }

    pub fn batchnorm(self) -> Self {
        let channels = self.current.first().copied().unwrap_or(0);
        let shape = self.current.clone();
        self.push(
            LayerKind::BatchNorm {
                channels,
                momentum: 0.1,
                eps: 1e-5,
            },
            shape,
        )
    }

    pub fn relu(self) -> Self {
        let shape = self.current.clone();
        self.push(LayerKind::Relu, shape)
    }

    pub fn flatten(self) -> Self {
        let n = self.current.iter().product();
        self.push(LayerKind::Flatten, vec![n])
    }

    pub fn avgpool(self) -> Self {
        if self.current.len() != 3 || self.current[1] % 2 != 0 || self.current[2] % 2 != 0 {
            let msg = format!("avgpool needs [C, H, W] with even H, W, got {:?}", self.current);
            return self.fail(msg);
        }
        let shape = vec![self.current[0], self.current[1] / 2, self.current[2] / 2];
        self.push(LayerKind::AvgPool, shape)
    }

    /// Export the most recently added layer's output as an embedding.
    pub fn tap(mut self) -> Self {
        match self.layers.len() {
            0 => self.fail("tap before any layer".into()),
            n => {
                self.taps.push(n - 1);
                self
            }
        }
    }

    /// Finish; the output layer is always appended to the tap set.
    pub fn build(mut self) -> Result<Arc<Architecture>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.layers.is_empty() {
            return Err(invalid("architecture has no layers"));
        }
        let last = self.layers.len() - 1;
        if self.taps.last() != Some(&last) {
            self.taps.push(last);
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("tap points must be strictly increasing"));
        }
        let mut entries = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut off = layer.offset;
            for (name, shape, trainable) in layer.param_sizes() {
                let n: usize = shape.iter().product();
                entries.push(ParamEntry {
                    layer: idx,
                    name: name.to_string(),
                    offset: off,
                    shape,
                    trainable,
                });
                off += n;
            }
        }
        Ok(Arc::new(Architecture {
            input_shape: self.input_shape,
            layers: self.layers,
            taps: self.taps,
            layout: Arc::new(Layout::new(entries)),
        }))
    }
}

/// Per-tap embeddings for a batch: one `[batch, dim]` tensor per tap point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub taps: Vec<usize>,
    pub embeddings: Vec<Tensor>,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace always holds the input")
    }

    /// Output of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.acts[layer + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Arc<Architecture>,
    params: Vec<f32>,
}

impl Model {
    /// He-uniform weights, zero biases, unit batch-norm scale, zero shift,
    /// running mean 0 and running variance 1.
    pub fn init<R: Rng + ?Sized>(arch: Arc<Architecture>, rng: &mut R) -> Self {
        let mut params = vec![0f32; arch.param_count()];
        for layer in &arch.layers {
            let r = layer.param_range();
            let p = &mut params[r];
            match layer.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let bound = (6.0 / in_features as f64).sqrt();
                    for v in &mut p[..in_features * out_features] {
                        *v = rng.random_range(-bound..bound) as f32;
                    }
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                } => {
                    let fan_in = in_channels * layers::KERNEL * layers::KERNEL;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in &mut p[..out_channels * fan_in] {
                        *v = rng.random_range(-bound..bound) as f32;
                    }
                }
                LayerKind::BatchNorm { channels, .. } => {
                    p[..channels].fill(1.0);
                    p[3 * channels..].fill(1.0);
                }
                _ => {}
            }
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Arc<Architecture>, v: &ParamVector) -> Result<Self> {
        if **v.layout() != *arch.layout {
            return Err(Error::LayoutMismatch(
                "parameter vector does not match architecture".into(),
            ));
        }
        Ok(Self {
            arch,
            params: v.as_slice().to_vec(),
        })
    }

    pub fn architecture(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param(&self, layer: usize, name: &str) -> Option<&[f32]> {
        self.arch
            .layout
            .find(layer, name)
            .map(|e| &self.params[e.range()])
    }

    pub fn param_mut(&mut self, layer: usize, name: &str) -> Option<&mut [f32]> {
        let range = self.arch.layout.find(layer, name)?.range();
        Some(&mut self.params[range])
    }

    pub fn flatten_params(&self) -> ParamVector {
        ParamVector::new(self.arch.layout.clone(), self.params.clone())
            .expect("model buffer always matches its layout")
    }

    pub fn unflatten_params(&mut self, v: &ParamVector) -> Result<()> {
        if **v.layout() != *self.arch.layout {
            return Err(Error::LayoutMismatch(
                "parameter vector does not match architecture".into(),
            ));
        }
        self.params.copy_from_slice(v.as_slice());
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.arch.input_shape.len() + 1
            || batch.shape()[1..] != self.arch.input_shape[..]
        {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.arch.input_shape);
            return Err(Error::ShapeMismatch {
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        if batch.batch() == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }

    /// Full forward pass keeping every intermediate activation.
    pub fn forward_trace(&self, batch: &Tensor, mode: BnMode) -> Result<Trace> {
        self.check_input(batch)?;
        let n = batch.batch();
        if mode == BnMode::CurrentBatchStats && n < 2 && self.has_batchnorm() {
            return Err(Error::BatchTooSmall(n));
        }
        let mut acts = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.arch.layers.len());
        acts.push(batch.clone());
        for (idx, layer) in self.arch.layers.iter().enumerate() {
            let x = acts.last().expect("input pushed");
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&layer.out_shape);
            let mut y = Tensor::zeros(out_shape);
            let blocks = layer.blocks(&self.params);
            let mut cache = None;
            match layer.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => layers::dense_forward(
                    x.data(),
                    n,
                    in_features,
                    out_features,
                    blocks[0],
                    blocks[1],
                    y.data_mut(),
                ),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                } => layers::conv_forward(
                    x.data(),
                    n,
                    in_channels,
                    out_channels,
                    layer.in_shape[1],
                    layer.in_shape[2],
                    blocks[0],
                    blocks[1],
                    y.data_mut(),
                ),
                LayerKind::BatchNorm { channels, eps, .. } => {
                    let spatial = layer.in_shape.iter().skip(1).product();
                    cache = Some(layers::bn_forward(
                        x.data(),
                        n,
                        channels,
                        spatial,
                        blocks[0],
                        blocks[1],
                        blocks[2],
                        blocks[3],
                        eps,
                        mode == BnMode::CurrentBatchStats,
                        y.data_mut(),
                    ));
                }
                LayerKind::Relu => {
                    for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = v.max(0.0);
                    }
                }
                LayerKind::Flatten => y.data_mut().copy_from_slice(x.data()),
                LayerKind::AvgPool => layers::avgpool_forward(
                    x.data(),
                    n * layer.in_shape[0],
                    layer.in_shape[1],
                    layer.in_shape[2],
                    y.data_mut(),
                ),
            }
            if !y.all_finite() {
                return Err(Error::NonFinite(format!(
                    "output of layer {idx} ({})",
                    layer.kind.name()
                )));
            }
            acts.push(y);
            bn.push(cache);
        }
        Ok(Trace { acts, bn })
    }

    pub fn has_batchnorm(&self) -> bool {
        self.arch
            .layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    }

    /// Forward pass returning one flattened embedding per sample per tap.
    pub fn forward_with_taps(&self, batch: &Tensor, mode: BnMode) -> Result<ActivationSet> {
        let trace = self.forward_trace(batch, mode)?;
        Ok(self.taps_from_trace(&trace))
    }

    pub fn taps_from_trace(&self, trace: &Trace) -> ActivationSet {
        let embeddings = self
            .arch
            .taps
            .iter()
            .map(|&t| {
                let a = trace.layer_output(t);
                let n = a.batch();
                let d = a.sample_len();
                a.clone().reshape(vec![n, d]).expect("same element count")
            })
            .collect();
        ActivationSet {
            taps: self.arch.taps.clone(),
            embeddings,
        }
    }

    pub fn logits(&self, batch: &Tensor, mode: BnMode) -> Result<Tensor> {
        let trace = self.forward_trace(batch, mode)?;
        Ok(trace.acts.into_iter().last().expect("non-empty"))
    }

    /// Backpropagate gradients injected at layer outputs. `injected` holds
    /// `(layer index, dL/d output)` pairs; the result is `dL/dθ` over the
    /// whole flat buffer (zeros for running statistics).
    pub fn backward(&self, trace: &Trace, injected: &[(usize, &Tensor)]) -> Result<Vec<f32>> {
        let mut grads = vec![0f32; self.params.len()];
        let Some(top) = injected.iter().map(|(l, _)| *l).max() else {
            return Ok(grads);
        };
        for (l, g) in injected {
            let act = trace.layer_output(*l);
            if g.shape() != act.shape() {
                return Err(Error::ShapeMismatch {
                    expected: act.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        let n = trace.acts[0].batch();
        let mut g: Vec<f32> = vec![0.0; trace.layer_output(top).len()];
        for idx in (0..=top).rev() {
            for (l, t) in injected {
                if *l == idx {
                    for (a, b) in g.iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
            }
            let layer = &self.arch.layers[idx];
            let x = &trace.acts[idx];
            let mut dx = vec![0f32; x.len()];
            let range = layer.param_range();
            let blocks = layer.blocks(&self.params);
            let gp = &mut grads[range];
            match layer.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let (dw, db) = gp.split_at_mut(in_features * out_features);
                    layers::dense_backward(
                        x.data(),
                        &g,
                        n,
                        in_features,
                        out_features,
                        blocks[0],
                        dw,
                        db,
                        &mut dx,
                    );
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                } => {
                    let (dw, db) = gp.split_at_mut(blocks[0].len());
                    layers::conv_backward(
                        x.data(),
                        &g,
                        n,
                        in_channels,
                        out_channels,
                        layer.in_shape[1],
                        layer.in_shape[2],
                        blocks[0],
                        dw,
                        db,
                        &mut dx,
                    );
                }
                LayerKind::BatchNorm { channels, .. } => {
                    let spatial = layer.in_shape.iter().skip(1).product();
                    let (dgamma, rest) = gp.split_at_mut(channels);
                    let cache = trace.bn[idx].as_ref().expect("batchnorm cache");
                    layers::bn_backward(
                        x.data(),
                        &g,
                        n,
                        channels,
                        spatial,
                        blocks[0],
                        cache,
                        dgamma,
                        &mut rest[..channels],
                        &mut dx,
                    );
                }
                LayerKind::Relu => {
                    for ((d, gv), xv) in dx.iter_mut().zip(&g).zip(x.data()) {
                        *d = if *xv > 0.0 { *gv } else { 0.0 };
                    }
                }
                LayerKind::Flatten => dx.copy_from_slice(&g),
                LayerKind::AvgPool => layers::avgpool_backward(
                    &g,
                    n * layer.in_shape[0],
                    layer.in_shape[1],
                    layer.in_shape[2],
                    &mut dx,
                ),
            }
            g = dx;
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(grads)
    }

    /// Fold the batch statistics recorded in a training-mode trace into the
    /// stored running statistics (`r ← (1 − m)·r + m·batch`, unbiased
    /// variance).
    pub fn update_running_stats(&mut self, trace: &Trace) {
        let arch = self.arch.clone();
        for (idx, layer) in arch.layers.iter().enumerate() {
            let LayerKind::BatchNorm {
                channels, momentum, ..
            } = layer.kind
            else {
                continue;
            };
            let Some(cache) = trace.bn[idx].as_ref().filter(|c| c.batch_stats) else {
                continue;
            };
            let m = momentum as f64;
            let correction = if cache.count > 1 {
                cache.count as f64 / (cache.count - 1) as f64
            } else {
                1.0
            };
            let base = layer.offset + 2 * channels;
            for c in 0..channels {
                let rm = &mut self.params[base + c];
                *rm = ((1.0 - m) * *rm as f64 + m * cache.mean[c]) as f32;
            }
            for c in 0..channels {
                let rv = &mut self.params[base + channels + c];
                *rv = ((1.0 - m) * *rv as f64 + m * cache.var[c] * correction) as f32;
            }
        }
    }

    /// Clamp batch-norm running variances to at least `min`. Aggregated
    /// updates can push a stored variance to zero or below.
    pub fn clamp_running_var(&mut self, min: f32) {
        let arch = self.arch.clone();
        for e in arch.layout.entries() {
            if e.name == "running_var" {
                for v in &mut self.params[e.range()] {
                    if !(*v >= min) {
                        *v = min;
                    }
                }
            }
        }
    }

    /// Cross-entropy loss and parameter gradient for a batch. The trace is
    /// returned so the caller can add further gradient terms or update
    /// running statistics.
    pub fn loss_and_grad(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(f64, Vec<f32>, Trace)> {
        let trace = self.forward_trace(batch, mode)?;
        let (loss, dlogits) = softmax_cross_entropy(trace.output(), labels)?;
        let last = self.arch.layers.len() - 1;
        let grads = self.backward(&trace, &[(last, &dlogits)])?;
        Ok((loss, grads, trace))
    }
}

/// One training-mode SGD step on cross-entropy: batch statistics for
/// normalization, running statistics updated, trainable parameters moved by
/// momentum SGD. Returns the mean batch loss.
pub fn backward_sgd_step(
    model: &mut Model,
    sgd: &mut Sgd,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let (loss, grads, trace) = model.loss_and_grad(batch, labels, BnMode::CurrentBatchStats)?;
    model.update_running_stats(&trace);
    let mask = model.arch.layout.trainable_mask();
    sgd.step(&mut model.params, &grads, &mask);
    Ok(loss)
}
