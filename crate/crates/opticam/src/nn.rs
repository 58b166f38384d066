//! The toy CNN classifier: architecture, training, weight I/O and the
//! per-layer feature hooks every attribution method relies on.
//!
//! Masks multiply the raw [0,1] image; per-channel normalization is the
//! first network layer, so every masked forward is normalized identically.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum LayerKind {
    InputNormalize { mean: Tensor, std: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool2d,
    GlobalAveragePool,
    Linear { weight: Tensor, bias: Tensor },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub hookable: bool,
}

/// Immutable classifier. Safe to share read-only across workers; the
/// forward-pass counter is instrumentation only.
#[derive(Debug)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub input_shape: (usize, usize, usize),
    forward_count: AtomicU64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            layers: self.layers.clone(),
            class_count: self.class_count,
            input_shape: self.input_shape,
            forward_count: AtomicU64::new(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Images paired with class labels, the unit the trainer consumes.
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Fixed architecture: normalize -> conv(3->8) -> relu -> pool ->
/// conv(8->16) -> pool -> relu ("feat") -> GAP -> linear(16->C).
/// Relu and max-pool commute, so pooling first leaves values unchanged
/// while putting the "feat" hook at quarter resolution (16 x H/4 x W/4).
pub fn build_toy_cnn(
    class_count: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<Network> {
    let (c, h, w) = input_shape;
    if class_count < 2 {
        return Err(Error::invalid("build_toy_cnn: class_count must be >= 2"));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "build_toy_cnn: spatial size {h}x{w} must be a positive multiple of 4"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv1_w = xavier_uniform(&mut rng, vec![8, c, 3, 3], c * 9, 8 * 9);
    let conv1_b = Tensor::zeros(vec![8]);
    let conv2_w = xavier_uniform(&mut rng, vec![16, 8, 3, 3], 8 * 9, 16 * 9);
    let conv2_b = Tensor::zeros(vec![16]);
    let fc_w = xavier_uniform(&mut rng, vec![class_count, 16], 16, class_count);
    let fc_b = Tensor::zeros(vec![class_count]);
    let layers = vec![
        LayerSpec {
            name: "norm".into(),
            kind: LayerKind::InputNormalize {
                mean: Tensor::zeros(vec![c]),
                std: Tensor::full(vec![c], 1.0),
            },
            hookable: false,
        },
        LayerSpec {
            name: "conv1".into(),
            kind: LayerKind::Conv2d {
                weight: conv1_w,
                bias: conv1_b,
            },
            hookable: false,
        },
        LayerSpec {
            name: "relu1".into(),
            kind: LayerKind::Relu,
            hookable: true,
        },
        LayerSpec {
            name: "pool1".into(),
            kind: LayerKind::MaxPool2d,
            hookable: false,
        },
        LayerSpec {
            name: "conv2".into(),
            kind: LayerKind::Conv2d {
                weight: conv2_w,
                bias: conv2_b,
            },
            hookable: false,
        },
        LayerSpec {
            name: "pool2".into(),
            kind: LayerKind::MaxPool2d,
            hookable: false,
        },
        LayerSpec {
            name: "feat".into(),
            kind: LayerKind::Relu,
            hookable: true,
        },
        LayerSpec {
            name: "gap".into(),
            kind: LayerKind::GlobalAveragePool,
            hookable: false,
        },
        LayerSpec {
            name: "fc".into(),
            kind: LayerKind::Linear {
                weight: fc_w,
                bias: fc_b,
            },
            hookable: false,
        },
    ];
    Ok(Network {
        layers,
        class_count,
        input_shape,
        forward_count: AtomicU64::new(0),
    })
}

impl Network {
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown layer name: {name}")))
    }

    pub fn hookable_layer(&self, name: &str) -> Result<usize> {
        let idx = self.layer_index(name)?;
        if !self.layers[idx].hookable {
            return Err(Error::invalid(format!("layer {name} is not hookable")));
        }
        Ok(idx)
    }

    /// Number of classifier (logit-producing) forward passes since
    /// construction. Feature-only extraction is not counted.
    pub fn forward_passes(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    fn apply_layer(&self, g: &mut Graph, layer: &LayerSpec, x: NodeId) -> Result<NodeId> {
        match &layer.kind {
            LayerKind::InputNormalize { mean, std } => {
                let m = g.leaf(mean.clone());
                let s = g.leaf(std.clone());
                g.channel_normalize(x, m, s)
            }
            LayerKind::Conv2d { weight, bias } => {
                let w = g.leaf(weight.clone());
                let b = g.leaf(bias.clone());
                g.conv2d(x, w, b)
            }
            LayerKind::Relu => Ok(g.relu(x)),
            LayerKind::MaxPool2d => g.max_pool2x2(x),
            LayerKind::GlobalAveragePool => g.global_avg_pool(x),
            LayerKind::Linear { weight, bias } => {
                let w = g.leaf(weight.clone());
                let b = g.leaf(bias.clone());
                g.linear(x, w, b)
            }
        }
    }

    /// Run layers [from, to) on the graph. Returns the output node and,
    /// when `params` is given, the parameter leaf ids for training.
    fn run_layers(
        &self,
        g: &mut Graph,
        mut x: NodeId,
        from: usize,
        to: usize,
        mut params: Option<&mut Vec<(String, NodeId)>>,
    ) -> Result<NodeId> {
        for layer in &self.layers[from..to] {
            match &layer.kind {
                LayerKind::Conv2d { weight, bias } => {
                    let w = g.leaf(weight.clone());
                    let b = g.leaf(bias.clone());
                    if let Some(p) = params.as_deref_mut() {
                        p.push((format!("{}.weight", layer.name), w));
                        p.push((format!("{}.bias", layer.name), b));
                    }
                    x = g.conv2d(x, w, b)?;
                }
                LayerKind::Linear { weight, bias } => {
                    let w = g.leaf(weight.clone());
                    let b = g.leaf(bias.clone());
                    if let Some(p) = params.as_deref_mut() {
                        p.push((format!("{}.weight", layer.name), w));
                        p.push((format!("{}.bias", layer.name), b));
                    }
                    x = g.linear(x, w, b)?;
                }
                _ => x = self.apply_layer(g, layer, x)?,
            }
        }
        Ok(x)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if image.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward(input)",
                lhs: vec![c, h, w],
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Plain forward pass on a graph node already holding the input image.
    pub fn forward_on_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        self.run_layers(g, x, 0, self.layers.len(), None)
    }

    /// Plain forward: raw [0,1] image in, logit vector out.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let y = self.forward_on_graph(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let logits = self.forward(image)?;
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let p = g.softmax(l);
        Ok(g.value(p).clone())
    }

    /// Logits plus the post-activation feature stack at a hookable layer.
    pub fn forward_with_features(&self, image: &Tensor, layer: &str) -> Result<(Tensor, Tensor)> {
        self.check_input(image)?;
        let hook = self.hookable_layer(layer)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let feat = self.run_layers(&mut g, x, 0, hook + 1, None)?;
        let logits = self.run_layers(&mut g, feat, hook + 1, self.layers.len(), None)?;
        Ok((g.value(logits).clone(), g.value(feat).clone()))
    }

    /// Feature stack only; stops at the hook, no classifier pass counted.
    pub fn features_only(&self, image: &Tensor, layer: &str) -> Result<Tensor> {
        self.check_input(image)?;
        let hook = self.hookable_layer(layer)?;
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let feat = self.run_layers(&mut g, x, 0, hook + 1, None)?;
        Ok(g.value(feat).clone())
    }

    /// Re-enter the network just after a hookable layer with substituted
    /// feature maps and run to the logits.
    pub fn forward_from(&self, layer: &str, features: &Tensor) -> Result<Tensor> {
        let hook = self.hookable_layer(layer)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::new();
        let x = g.leaf(features.clone());
        let y = self.run_layers(&mut g, x, hook + 1, self.layers.len(), None)?;
        Ok(g.value(y).clone())
    }

    /// Graph-building variant of `forward_with_features`, for methods that
    /// backpropagate a class score to the hook activations.
    pub fn forward_graph_with_hook(
        &self,
        g: &mut Graph,
        image: &Tensor,
        layer: &str,
    ) -> Result<(NodeId, NodeId)> {
        self.check_input(image)?;
        let hook = self.hookable_layer(layer)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let x = g.leaf(image.clone());
        let feat = self.run_layers(g, x, 0, hook + 1, None)?;
        let logits = self.run_layers(g, feat, hook + 1, self.layers.len(), None)?;
        Ok((logits, feat))
    }

    pub fn parameterized_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. }))
            .count()
    }

    /// Copy with the last `stage` parameterized layers (counting from the
    /// output) re-initialized from `seed`. Stage 0 is an identical copy.
    pub fn randomize_from_layer(&self, stage: usize, seed: u64) -> Result<Network> {
        let total = self.parameterized_layer_count();
        if stage > total {
            return Err(Error::invalid(format!(
                "randomize_from_layer: stage {stage} out of range (max {total})"
            )));
        }
        let mut net = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let param_idx: Vec<usize> = net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. }))
            .map(|(i, _)| i)
            .collect();
        for &i in param_idx.iter().rev().take(stage) {
            match &mut net.layers[i].kind {
                LayerKind::Conv2d { weight, bias } => {
                    let s = weight.shape().to_vec();
                    let (fan_in, fan_out) = (s[1] * s[2] * s[3], s[0] * s[2] * s[3]);
                    *weight = xavier_uniform(&mut rng, s, fan_in, fan_out);
                    *bias = Tensor::zeros(bias.shape().to_vec());
                }
                LayerKind::Linear { weight, bias } => {
                    let s = weight.shape().to_vec();
                    let (fan_in, fan_out) = (s[1], s[0]);
                    *weight = xavier_uniform(&mut rng, s, fan_in, fan_out);
                    *bias = Tensor::zeros(bias.shape().to_vec());
                }
                _ => unreachable!(),
            }
        }
        Ok(net)
    }

    /// All named parameter and statistic tensors, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::InputNormalize { mean, std } => {
                    out.push((format!("{}.mean", layer.name), mean.clone()));
                    out.push((format!("{}.std", layer.name), std.clone()));
                }
                LayerKind::Conv2d { weight, bias } | LayerKind::Linear { weight, bias } => {
                    out.push((format!("{}.weight", layer.name), weight.clone()));
                    out.push((format!("{}.bias", layer.name), bias.clone()));
                }
                _ => {}
            }
        }
        out
    }

    fn set_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        let (layer_name, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::invalid(format!("weights: bad tensor name {name}")))?;
        let idx = self.layer_index(layer_name)?;
        let slot: &mut Tensor = match (&mut self.layers[idx].kind, field) {
            (LayerKind::InputNormalize { mean, .. }, "mean") => mean,
            (LayerKind::InputNormalize { std, .. }, "std") => std,
            (LayerKind::Conv2d { weight, .. }, "weight") => weight,
            (LayerKind::Conv2d { bias, .. }, "bias") => bias,
            (LayerKind::Linear { weight, .. }, "weight") => weight,
            (LayerKind::Linear { bias, .. }, "bias") => bias,
            _ => return Err(Error::invalid(format!("weights: unexpected tensor {name}"))),
        };
        if slot.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_weights",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"OCW1";

/// Weights file: magic "OCW1"; u32 LE tensor count; per tensor u16 name
/// length + UTF-8 name, u8 rank, rank x u32 extents, then f64 LE values.
pub fn save_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = net.named_tensors();
    let (c, h, w) = net.input_shape;
    tensors.push((
        "meta.input_shape".into(),
        Tensor::new(vec![3], vec![c as f64, h as f64, w as f64])?,
    ));
    tensors.push((
        "meta.class_count".into(),
        Tensor::new(vec![1], vec![net.class_count as f64])?,
    ));
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::invalid("weights: truncated file"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != WEIGHTS_MAGIC {
        return Err(Error::invalid("weights: magic mismatch (expected OCW1)"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::invalid("weights: non-UTF8 tensor name"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::invalid("weights: trailing bytes after last tensor"));
    }
    let meta_shape = tensors
        .remove("meta.input_shape")
        .ok_or_else(|| Error::invalid("weights: missing meta.input_shape"))?;
    let meta_classes = tensors
        .remove("meta.class_count")
        .ok_or_else(|| Error::invalid("weights: missing meta.class_count"))?;
    let input_shape = (
        meta_shape.data()[0] as usize,
        meta_shape.data()[1] as usize,
        meta_shape.data()[2] as usize,
    );
    let class_count = meta_classes.data()[0] as usize;
    let fc = tensors
        .get("fc.weight")
        .ok_or_else(|| Error::invalid("weights: missing fc.weight"))?;
    if fc.shape()[0] != class_count {
        return Err(Error::invalid(format!(
            "weights: class_count {} does not match fc.weight shape {:?}",
            class_count,
            fc.shape()
        )));
    }
    let mut net = build_toy_cnn(class_count, input_shape, 0)?;
    for (name, t) in tensors {
        net.set_tensor(&name, t)?;
    }
    Ok(net)
}

/// Per-channel mean / std over every pixel of the given images.
pub fn normalization_stats(images: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if images.is_empty() {
        return Err(Error::invalid("normalization_stats: empty image set"));
    }
    let c = images[0].shape()[0];
    let per = images[0].numel() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let n = (images.len() * per) as f64;
    for img in images {
        for ch in 0..c {
            for i in 0..per {
                mean[ch] += img.data()[ch * per + i];
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for img in images {
        for ch in 0..c {
            for i in 0..per {
                let d = img.data()[ch * per + i] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    Ok((Tensor::new(vec![c], mean)?, Tensor::new(vec![c], std)?))
}

/// SGD with momentum on the cross-entropy loss. Computes and stores
/// normalization stats from the training split, then returns the trained
/// network and its held-out accuracy.
pub fn train(
    net: &Network,
    train_set: &LabeledSet,
    heldout: &LabeledSet,
    config: &TrainConfig,
) -> Result<(Network, f64)> {
    if train_set.images.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }
    if train_set
        .labels
        .iter()
        .chain(&heldout.labels)
        .any(|&l| l >= net.class_count)
    {
        return Err(Error::invalid("train: label out of class range"));
    }
    let mut net = net.clone();
    let (mean, std) = normalization_stats(&train_set.images)?;
    let norm_idx = net.layer_index("norm")?;
    net.layers[norm_idx].kind = LayerKind::InputNormalize { mean, std };

    let mut velocity: HashMap<String, Vec<f64>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = train_set.images.len();
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the epoch-scoped RNG stream
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc: HashMap<String, Vec<f64>> = HashMap::new();
            for &idx in batch {
                let mut g = Graph::new();
                let x = g.leaf(train_set.images[idx].clone());
                let mut params = Vec::new();
                let logits = net.run_layers(&mut g, x, 0, net.layers.len(), Some(&mut params))?;
                let loss = g.cross_entropy(logits, train_set.labels[idx])?;
                let grads = g.backward(loss)?;
                for (name, id) in &params {
                    let gt = grads[id.index()].as_ref().unwrap();
                    let acc = grad_acc
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; gt.numel()]);
                    for (a, v) in acc.iter_mut().zip(gt.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let param_names: Vec<String> = {
                let mut names: Vec<String> = grad_acc.keys().cloned().collect();
                names.sort();
                names
            };
            for name in param_names {
                let grad = &grad_acc[&name];
                let vel = velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                let (layer_name, _) = name.rsplit_once('.').unwrap();
                let idx = net.layer_index(layer_name)?;
                let slot = match (&mut net.layers[idx].kind, name.ends_with(".weight")) {
                    (LayerKind::Conv2d { weight, .. }, true) => weight,
                    (LayerKind::Conv2d { bias, .. }, false) => bias,
                    (LayerKind::Linear { weight, .. }, true) => weight,
                    (LayerKind::Linear { bias, .. }, false) => bias,
                    _ => unreachable!(),
                };
                for i in 0..grad.len() {
                    vel[i] = config.momentum * vel[i] - config.learning_rate * grad[i] * scale;
                    slot.data_mut()[i] += vel[i];
                }
            }
        }
    }
    let accuracy = evaluate_accuracy(&net, heldout)?;
    Ok((net, accuracy))
}

pub fn evaluate_accuracy(net: &Network, set: &LabeledSet) -> Result<f64> {
    if set.images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (img, &label) in set.images.iter().zip(&set.labels) {
        let logits = net.forward(img)?;
        let pred = argmax(logits.data());
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.images.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
