//! Small feedforward networks with maskable weight layers.
//!
//! Weight layers keep a single flattened 2D view: `out x in` for linear
//! layers and `out_ch x (in_ch*kh*kw)` for convolutions. Convolution runs as
//! im2col followed by a matrix product with that same view, so the matrix a
//! layer is scored and masked on is exactly the one used in compute.
//!
//! Activations travel as `batch x features` matrices; a sample with shape
//! `(c, h, w)` is laid out channel-major, row-major inside a channel.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OngError, Result};
use crate::masking::{Mask, MaskSet, SparsityReport};
use crate::matrix::Matrix;
use crate::parallel::Exec;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn flat(features: usize) -> Self {
        Shape3 {
            channels: features,
            height: 1,
            width: 1,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape3 {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_flat(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    /// Flattened weight shape, for weight layers.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((out_features, in_features)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((out_channels, in_channels * kernel_h * kernel_w)),
            _ => None,
        }
    }

    fn output_shape(&self, input: Shape3) -> std::result::Result<Shape3, String> {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err("linear dimensions must be positive".into());
                }
                if !input.is_flat() {
                    return Err(format!(
                        "linear layer needs a flat input, got {input}; add a flatten layer"
                    ));
                }
                if input.channels != in_features {
                    return Err(format!(
                        "linear layer expects {in_features} inputs, previous layer produces {}",
                        input.channels
                    ));
                }
                Ok(Shape3::flat(out_features))
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if in_channels == 0
                    || out_channels == 0
                    || kernel_h == 0
                    || kernel_w == 0
                    || stride == 0
                {
                    return Err("conv2d dimensions and stride must be positive".into());
                }
                if input.channels != in_channels {
                    return Err(format!(
                        "conv2d expects {in_channels} channels, previous layer produces {}",
                        input.channels
                    ));
                }
                let (h, w) = (input.height + 2 * padding, input.width + 2 * padding);
                if h < kernel_h || w < kernel_w {
                    return Err(format!(
                        "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {h}x{w}"
                    ));
                }
                Ok(Shape3::image(
                    out_channels,
                    (h - kernel_h) / stride + 1,
                    (w - kernel_w) / stride + 1,
                ))
            }
            LayerKind::Relu => Ok(input),
            LayerKind::Flatten => Ok(Shape3::flat(input.numel())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            prunable: true,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel.0,
                kernel_w: kernel.1,
                stride,
                padding,
            },
            prunable: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            prunable: false,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            prunable: false,
        }
    }

    pub fn prunable(mut self, prunable: bool) -> Self {
        self.prunable = prunable && self.kind.has_weights();
        self
    }
}

/// Mark every weight layer prunable except the last one (the classifier).
pub fn default_prunability(specs: &mut [LayerSpec]) {
    let last = specs.iter().rposition(|s| s.kind.has_weights());
    for (i, s) in specs.iter_mut().enumerate() {
        s.prunable = s.kind.has_weights() && Some(i) != last;
    }
}

/// Hidden layers of the given widths with ReLU between them, classifier unprunable.
pub fn mlp_specs(widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            specs.push(LayerSpec::relu());
        }
        specs.push(LayerSpec::linear(pair[0], pair[1]));
    }
    default_prunability(&mut specs);
    specs
}

#[derive(Debug, Clone)]
pub struct MaskedLayer {
    id: String,
    kind: LayerKind,
    prunable: bool,
    in_shape: Shape3,
    out_shape: Shape3,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub grad_weights: Matrix,
    pub grad_bias: Vec<f64>,
    mask: Option<Mask>,
}

impl MaskedLayer {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn is_prunable(&self) -> bool {
        self.prunable
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn in_shape(&self) -> Shape3 {
        self.in_shape
    }

    pub fn out_shape(&self) -> Shape3 {
        self.out_shape
    }

    /// Multiply-accumulates for one sample.
    pub fn macs_per_sample(&self) -> u64 {
        let spatial = (self.out_shape.height * self.out_shape.width) as u64;
        self.weights.len() as u64 * spatial
    }

    fn kept_macs_per_sample(&self) -> u64 {
        let spatial = (self.out_shape.height * self.out_shape.width) as u64;
        let kept = self.mask.as_ref().map_or(self.weights.len(), Mask::kept);
        kept as u64 * spatial
    }

    /// Positions where the mask is zero but the weight is not.
    pub fn nullity_violations(&self) -> Vec<(usize, usize)> {
        self.mask
            .as_ref()
            .map_or_else(Vec::new, |m| m.violations(&self.weights))
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.data_mut().fill(0.0);
        self.grad_bias.fill(0.0);
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Node {
    Weighted(MaskedLayer),
    Relu,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    specs: Vec<LayerSpec>,
    input_shape: Shape3,
    seed: u64,
    generation: u64,
    exec: Exec,
}

/// Node inputs recorded by [`Network::forward`], consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    generation: u64,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub dense_flops: u64,
    pub sparse_flops: u64,
}

fn layer_id(index: usize, kind: &LayerKind) -> String {
    format!("{}_{index}", kind.name())
}

/// Check that `specs` compose from `input_shape`; returns every node's output shape.
pub fn validate_specs(specs: &[LayerSpec], input_shape: Shape3) -> Result<Vec<Shape3>> {
    if specs.is_empty() {
        return Err(OngError::Config("model has no layers".into()));
    }
    if input_shape.numel() == 0 {
        return Err(OngError::Config(format!(
            "input shape {input_shape} is empty"
        )));
    }
    let mut shape = input_shape;
    let mut shapes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if spec.prunable && !spec.kind.has_weights() {
            return Err(OngError::Config(format!(
                "layer {i} ({}) has no weights and cannot be prunable",
                spec.kind.name()
            )));
        }
        shape = spec.kind.output_shape(shape).map_err(|e| {
            let prev = if i == 0 {
                format!("input {input_shape}")
            } else {
                format!("layer {} ({})", i - 1, specs[i - 1].kind.name())
            };
            OngError::Config(format!(
                "{prev} does not compose with layer {i} ({}): {e}",
                spec.kind.name()
            ))
        })?;
        shapes.push(shape);
    }
    if !shape.is_flat() {
        return Err(OngError::Config(format!(
            "network output {shape} is not flat; end with flatten/linear"
        )));
    }
    Ok(shapes)
}

impl Network {
    /// Build a network with fan-in scaled uniform weights, `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`, and zero biases.
    pub fn init(specs: &[LayerSpec], input_shape: Shape3, seed: u64) -> Result<Network> {
        let shapes = validate_specs(specs, input_shape)?;
        let mut nodes = Vec::with_capacity(specs.len());
        let mut in_shape = input_shape;
        for (i, (spec, &out_shape)) in specs.iter().zip(&shapes).enumerate() {
            let node = match spec.kind {
                LayerKind::Relu => Node::Relu,
                LayerKind::Flatten => Node::Flatten,
                kind => {
                    let id = layer_id(i, &kind);
                    let (rows, cols) = kind.weight_shape().expect("weight layer");
                    let bound = (6.0 / cols as f64).sqrt();
                    let mut rng = seed::rng(seed::derive(seed, &id));
                    let weights =
                        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
                    Node::Weighted(MaskedLayer {
                        id,
                        kind,
                        prunable: spec.prunable,
                        in_shape,
                        out_shape,
                        grad_weights: Matrix::zeros(rows, cols),
                        weights,
                        bias: vec![0.0; rows],
                        grad_bias: vec![0.0; rows],
                        mask: None,
                    })
                }
            };
            nodes.push(node);
            in_shape = out_shape;
        }
        Ok(Network {
            nodes,
            specs: specs.to_vec(),
            input_shape,
            seed,
            generation: 0,
            exec: Exec::default(),
        })
    }

    /// Rebuild a network from stored parameters, one entry per weight layer in order.
    pub fn from_parts(
        specs: &[LayerSpec],
        input_shape: Shape3,
        seed: u64,
        params: Vec<(Matrix, Vec<f64>, Option<Matrix>)>,
    ) -> Result<Network> {
        let mut net = Network::init(specs, input_shape, seed)?;
        let n_weighted = net.weighted_layers().count();
        if params.len() != n_weighted {
            return Err(OngError::Format(format!(
                "{} parameter blocks for {n_weighted} weight layers",
                params.len()
            )));
        }
        for (layer, (w, b, m)) in net.layers_mut_unchecked().zip(params) {
            if w.shape() != layer.weights.shape() || b.len() != layer.bias.len() {
                return Err(OngError::Format(format!(
                    "layer {}: stored shapes {:?}/{} differ from spec {:?}/{}",
                    layer.id,
                    w.shape(),
                    b.len(),
                    layer.weights.shape(),
                    layer.bias.len()
                )));
            }
            layer.weights = w;
            layer.bias = b;
            if let Some(bits) = m {
                if !layer.prunable {
                    return Err(OngError::Format(format!(
                        "mask stored for non-prunable layer {}",
                        layer.id
                    )));
                }
                if bits.shape() != layer.weights.shape() {
                    return Err(OngError::Format(format!(
                        "mask shape mismatch in {}",
                        layer.id
                    )));
                }
                layer.mask = Some(Mask::new(layer.id.clone(), bits)?);
            }
        }
        Ok(net)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_classes(&self) -> usize {
        self.weighted_layers()
            .last()
            .map_or(0, |l| l.out_shape.numel())
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &MaskedLayer> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Weighted(l) => Some(l),
            _ => None,
        })
    }

    /// Mutable access to the weight layers. Invalidates outstanding forward caches.
    pub fn weighted_layers_mut(&mut self) -> impl Iterator<Item = &mut MaskedLayer> {
        self.generation += 1;
        self.layers_mut_unchecked()
    }

    fn layers_mut_unchecked(&mut self) -> impl Iterator<Item = &mut MaskedLayer> {
        self.nodes.iter_mut().filter_map(|n| match n {
            Node::Weighted(l) => Some(l),
            _ => None,
        })
    }

    pub fn layer(&self, id: &str) -> Option<&MaskedLayer> {
        self.weighted_layers().find(|l| l.id == id)
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = &MaskedLayer> {
        self.weighted_layers().filter(|l| l.prunable)
    }

    pub fn is_masked(&self) -> bool {
        self.prunable_layers().any(|l| l.mask.is_some())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardOutput> {
        if batch.cols() != self.input_shape.numel() {
            return Err(OngError::shape(
                "forward",
                format!(
                    "batch has {} features per sample, network input {} needs {}",
                    batch.cols(),
                    self.input_shape,
                    self.input_shape.numel()
                ),
            ));
        }
        let mut inputs = Vec::with_capacity(self.nodes.len());
        let mut x = batch.clone();
        for node in &self.nodes {
            let y = match node {
                Node::Weighted(l) => self.layer_forward(l, &x)?,
                Node::Relu => x.map(|v| v.max(0.0)),
                Node::Flatten => x.clone(),
            };
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(ForwardOutput {
            logits: x,
            cache: ForwardCache {
                inputs,
                generation: self.generation,
                batch: batch.rows(),
            },
        })
    }

    fn layer_forward(&self, l: &MaskedLayer, x: &Matrix) -> Result<Matrix> {
        match l.kind {
            LayerKind::Linear { .. } => {
                let mut y = x.matmul_with(&l.weights.transpose(), self.exec)?;
                for r in 0..y.rows() {
                    y.row_mut(r)
                        .iter_mut()
                        .zip(&l.bias)
                        .for_each(|(v, b)| *v += b);
                }
                Ok(y)
            }
            LayerKind::Conv2d { .. } => {
                let geo = ConvGeometry::new(l);
                let out_len = l.out_shape.numel();
                let samples = self.exec.map_range(x.rows(), |s| -> Result<Vec<f64>> {
                    let cols = geo.im2col(x.row(s));
                    let mut y = l.weights.matmul_with(&cols, Exec::Sequential)?;
                    for (c, &b) in l.bias.iter().enumerate() {
                        y.row_mut(c).iter_mut().for_each(|v| *v += b);
                    }
                    Ok(y.into_vec())
                });
                let mut data = Vec::with_capacity(x.rows() * out_len);
                for s in samples {
                    data.extend(s?);
                }
                Matrix::from_vec(x.rows(), out_len, data)
            }
            _ => unreachable!("weight layers only"),
        }
    }

    /// Mean softmax cross-entropy of `logits` against `labels`, plus its gradient.
    pub fn loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let (b, k) = logits.shape();
        if labels.len() != b || b == 0 {
            return Err(OngError::shape(
                "loss",
                format!("{} labels for a batch of {b}", labels.len()),
            ));
        }
        let mut grad = Matrix::zeros(b, k);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(OngError::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - row[y];
            let g = grad.row_mut(r);
            for (gi, &v) in g.iter_mut().zip(row) {
                *gi = (v - log_z).exp() / b as f64;
            }
            g[y] -= 1.0 / b as f64;
        }
        Ok((loss / b as f64, grad))
    }

    /// Backpropagate mean cross-entropy through the cached forward pass.
    /// Overwrites every layer's gradient buffers and returns the loss.
    pub fn backward(&mut self, out: &ForwardOutput, labels: &[usize]) -> Result<f64> {
        let cache = &out.cache;
        if cache.generation != self.generation || cache.inputs.len() != self.nodes.len() {
            return Err(OngError::InvalidArgument(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        if labels.len() != cache.batch {
            return Err(OngError::shape(
                "backward",
                format!(
                    "{} labels for a cached batch of {}",
                    labels.len(),
                    cache.batch
                ),
            ));
        }
        let (loss, mut grad) = Self::loss_and_grad(&out.logits, labels)?;
        let exec = self.exec;
        for (node, input) in self.nodes.iter_mut().zip(&cache.inputs).rev() {
            grad = match node {
                Node::Weighted(l) => layer_backward(l, input, &grad, exec)?,
                Node::Relu => {
                    let mut g = grad;
                    g.data_mut()
                        .iter_mut()
                        .zip(input.data())
                        .for_each(|(gv, &xv)| {
                            if xv <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    g
                }
                Node::Flatten => grad,
            };
        }
        Ok(loss)
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?.logits;
        Ok((0..logits.rows())
            .map(|r| {
                logits
                    .row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Attach masks to every prunable layer and prune `W <- W * M`.
    ///
    /// Every prunable layer needs a mask of its weight shape; masks for
    /// unknown or non-prunable layers are rejected.
    pub fn convert_to_masked(mut self, masks: &MaskSet) -> Result<Network> {
        for id in masks.keys() {
            match self.layer(id) {
                None => {
                    return Err(OngError::shape(
                        "convert_to_masked",
                        format!("mask for unknown layer {id}"),
                    ))
                }
                Some(l) if !l.prunable => {
                    return Err(OngError::shape(
                        "convert_to_masked",
                        format!("mask given for non-prunable layer {id}"),
                    ))
                }
                _ => {}
            }
        }
        for l in self.prunable_layers() {
            let m = masks.get(&l.id).ok_or_else(|| {
                OngError::shape(
                    "convert_to_masked",
                    format!("no mask for prunable layer {}", l.id),
                )
            })?;
            if m.shape() != l.weights.shape() {
                return Err(OngError::shape(
                    "convert_to_masked",
                    format!(
                        "layer {}: mask {:?} vs weights {:?}",
                        l.id,
                        m.shape(),
                        l.weights.shape()
                    ),
                ));
            }
        }
        for l in self.weighted_layers_mut() {
            if let Some(m) = masks.get(&l.id) {
                m.apply(&mut l.weights)?;
                l.mask = Some(m.clone());
            }
        }
        Ok(self)
    }

    /// Zero count over prunable layers, read from the weights themselves.
    pub fn sparsity_report(&self) -> Result<SparsityReport> {
        SparsityReport::from_counts(
            self.prunable_layers()
                .map(|l| (l.id.clone(), l.weights.count_zeros(), l.weights.len())),
        )
    }

    pub fn prunable_zero_count(&self) -> usize {
        self.prunable_layers()
            .map(|l| l.weights.count_zeros())
            .sum()
    }

    pub fn verify_nullity(&self) -> Result<()> {
        for l in self.weighted_layers() {
            let bad = l.nullity_violations();
            if !bad.is_empty() {
                return Err(OngError::NullityViolation {
                    layer_id: l.id.clone(),
                    indices: bad,
                });
            }
        }
        Ok(())
    }

    /// `2 * MACs` for `batch` samples, dense and with masked weights skipped.
    pub fn flops_estimate(&self, batch: usize) -> FlopsEstimate {
        let (mut dense, mut sparse) = (0u64, 0u64);
        for l in self.weighted_layers() {
            dense += 2 * l.macs_per_sample();
            sparse += 2 * l.kept_macs_per_sample();
        }
        FlopsEstimate {
            dense_flops: dense * batch as u64,
            sparse_flops: sparse * batch as u64,
        }
    }

    /// Every parameter as raw bits, weight layers in order: weights, bias, mask.
    pub fn parameter_bits(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for l in self.weighted_layers() {
            out.extend(l.weights.data().iter().map(|v| v.to_bits()));
            out.extend(l.bias.iter().map(|v| v.to_bits()));
            if let Some(m) = &l.mask {
                out.extend(m.bits().data().iter().map(|v| v.to_bits()));
            }
        }
        out
    }
}

fn layer_backward(
    l: &mut MaskedLayer,
    input: &Matrix,
    grad_out: &Matrix,
    exec: Exec,
) -> Result<Matrix> {
    match l.kind {
        LayerKind::Linear { .. } => {
            l.grad_weights = grad_out.transpose().matmul_with(input, exec)?;
            l.grad_bias = (0..grad_out.cols())
                .map(|c| (0..grad_out.rows()).map(|r| grad_out.get(r, c)).sum())
                .collect();
            grad_out.matmul_with(&l.weights, exec)
        }
        LayerKind::Conv2d { .. } => {
            let geo = ConvGeometry::new(l);
            let out_spatial = l.out_shape.height * l.out_shape.width;
            let out_ch = l.out_shape.channels;
            let weights = &l.weights;
            let w_t = weights.transpose();
            let per_sample =
                exec.map_range(input.rows(), |s| -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
                    let cols = geo.im2col(input.row(s));
                    let g = Matrix::from_vec(out_ch, out_spatial, grad_out.row(s).to_vec())?;
                    let gw = g.matmul_with(&cols.transpose(), Exec::Sequential)?;
                    let gb: Vec<f64> = (0..out_ch).map(|c| g.row(c).iter().sum()).collect();
                    let dcols = w_t.matmul_with(&g, Exec::Sequential)?;
                    Ok((gw, gb, geo.col2im(&dcols)))
                });
            let (rows, cols) = weights.shape();
            let mut gw_total = Matrix::zeros(rows, cols);
            let mut gb_total = vec![0.0; out_ch];
            let mut dx = Vec::with_capacity(input.len());
            for r in per_sample {
                let (gw, gb, dxs) = r?;
                gw_total
                    .data_mut()
                    .iter_mut()
                    .zip(gw.data())
                    .for_each(|(a, b)| *a += b);
                gb_total.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                dx.extend(dxs);
            }
            l.grad_weights = gw_total;
            l.grad_bias = gb_total;
            Matrix::from_vec(input.rows(), input.cols(), dx)
        }
        _ => unreachable!("weight layers only"),
    }
}

struct ConvGeometry {
    in_shape: Shape3,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(l: &MaskedLayer) -> Self {
        let LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            stride,
            padding,
            ..
        } = l.kind
        else {
            unreachable!("conv layers only")
        };
        ConvGeometry {
            in_shape: l.in_shape,
            out_h: l.out_shape.height,
            out_w: l.out_shape.width,
            kh: kernel_h,
            kw: kernel_w,
            stride,
            padding,
        }
    }

    /// Source pixel for patch row `(ci, ki, kj)` at output `(oy, ox)`, if inside the image.
    #[inline]
    fn source(&self, ci: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.in_shape.height && x < self.in_shape.width)
            .then(|| (ci * self.in_shape.height + y) * self.in_shape.width + x)
    }

    /// `(in_ch*kh*kw) x (out_h*out_w)` patch matrix for one sample.
    fn im2col(&self, sample: &[f64]) -> Matrix {
        let spatial = self.out_h * self.out_w;
        let mut cols = Matrix::zeros(self.in_shape.channels * self.kh * self.kw, spatial);
        for ci in 0..self.in_shape.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let row = cols.row_mut(r);
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(src) = self.source(ci, ki, kj, oy, ox) {
                                row[oy * self.out_w + ox] = sample[src];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch-matrix gradient back onto the input layout.
    fn col2im(&self, dcols: &Matrix) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_shape.numel()];
        for ci in 0..self.in_shape.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = dcols.row((ci * self.kh + ki) * self.kw + kj);
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(src) = self.source(ci, ki, kj, oy, ox) {
                                dx[src] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
