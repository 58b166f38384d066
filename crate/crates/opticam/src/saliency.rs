//! Attribution methods: the CAM family, the shared masking machinery and
//! the optimized saliency map (Adam ascent on the masked-image class score
//! over softmax channel weights).

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Range,
    Max,
    Sigmoid,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "range" => Ok(Normalization::Range),
            "max" => Ok(Normalization::Max),
            "sigmoid" => Ok(Normalization::Sigmoid),
            _ => Err(Error::invalid(format!("unknown normalization: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Mask,
    Diff,
    IOMask,
    IODiff,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Objective::Mask),
            "diff" => Ok(Objective::Diff),
            "iomask" => Ok(Objective::IOMask),
            "iodiff" => Ok(Objective::IODiff),
            _ => Err(Error::invalid(format!("unknown objective: {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Logit,
    Probability,
}

impl Selector {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Selector::Logit),
            "probability" => Ok(Selector::Probability),
            _ => Err(Error::invalid(format!("unknown selector: {s}"))),
        }
    }
}

/// Everything that parameterizes the optimized saliency map.
#[derive(Debug, Clone)]
pub struct OptiConfig {
    pub objective: Objective,
    pub normalization: Normalization,
    pub selector: Selector,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Initial value for every component of u; zero gives uniform weights.
    pub init: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for OptiConfig {
    fn default() -> Self {
        OptiConfig {
            objective: Objective::Mask,
            normalization: Normalization::Range,
            selector: Selector::Logit,
            learning_rate: 0.1,
            max_iterations: 100,
            tolerance: 1e-10,
            init: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl OptiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("opti: learning_rate must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid("opti: max_iterations must be >= 1"));
        }
        if self.tolerance < 0.0 {
            return Err(Error::invalid("opti: tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// A saliency map at feature resolution plus its adapted (upsampled,
/// [0,1]-normalized) form at image resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub raw: Tensor,
    pub adapted: Tensor,
    pub method: String,
    pub target_class: usize,
}

/// Upsample to the target resolution, then normalize into [0,1].
pub fn adapt_saliency(
    raw: &Tensor,
    target: (usize, usize),
    normalization: Normalization,
) -> Result<Tensor> {
    if !raw.all_finite() {
        return Err(Error::invalid("adapt_saliency: non-finite input"));
    }
    let mut g = Graph::new();
    let x = g.leaf(raw.clone());
    let up = g.bilinear_upsample(x, target.0, target.1)?;
    let out = match normalization {
        Normalization::Range => g.range_normalize(up)?,
        Normalization::Max => g.max_normalize(up)?,
        Normalization::Sigmoid => g.sigmoid(up),
    };
    Ok(g.value(out).clone())
}

/// Hadamard product of a [0,1] image with an H x W mask, broadcast across
/// channels. Happens before input normalization by construction: the
/// network normalizes internally.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let img = g.leaf(image.clone());
    let m = g.leaf(mask.clone());
    let out = g.mul_channel_broadcast(img, m)?;
    Ok(g.value(out).clone())
}

fn build_map(
    raw: Tensor,
    target: (usize, usize),
    normalization: Normalization,
    method: &str,
    class: usize,
) -> Result<SaliencyMap> {
    let adapted = adapt_saliency(&raw, target, normalization)?;
    Ok(SaliencyMap {
        raw,
        adapted,
        method: method.into(),
        target_class: class,
    })
}

fn image_hw(net: &Network) -> (usize, usize) {
    (net.input_shape.1, net.input_shape.2)
}

/// relu(sum_k w_k A^k) at feature resolution.
fn weighted_sum_relu(features: &Tensor, weights: &[f64]) -> Tensor {
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    debug_assert_eq!(weights.len(), k);
    let mut out = vec![0.0; h * w];
    for ch in 0..k {
        let wk = weights[ch];
        for i in 0..h * w {
            out[i] += wk * features.data()[ch * h * w + i];
        }
    }
    for v in &mut out {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Tensor::new(vec![h, w], out).unwrap()
}

fn last_hookable_layer(net: &Network) -> &str {
    net.layers
        .iter()
        .rev()
        .find(|l| l.hookable)
        .map(|l| l.name.as_str())
        .expect("network has no hookable layer")
}

/// Classic CAM: classifier weight row over the final feature layer, with
/// negatives clipped so the map honors the non-negativity contract.
pub fn cam(net: &Network, image: &Tensor, class: usize, layer: &str) -> Result<SaliencyMap> {
    if layer != last_hookable_layer(net) {
        return Err(Error::invalid(format!(
            "cam: only defined for the final feature layer ({}), got {layer}",
            last_hookable_layer(net)
        )));
    }
    let features = net.features_only(image, layer)?;
    let fc = net
        .layers
        .iter()
        .find_map(|l| match &l.kind {
            crate::nn::LayerKind::Linear { weight, .. } => Some(weight),
            _ => None,
        })
        .ok_or_else(|| Error::invalid("cam: network has no linear head"))?;
    let k = fc.shape()[1];
    let weights: Vec<f64> = (0..k).map(|j| fc.at2(class, j)).collect();
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "cam", class)
}

/// Gradient of the class logit with respect to the hook activations.
fn feature_gradient(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (logits, feat) = net.forward_graph_with_hook(&mut g, image, layer)?;
    let root = g.select(logits, class)?;
    let grads = g.backward(root)?;
    let grad = grads[feat.index()]
        .clone()
        .unwrap_or_else(|| Tensor::zeros(g.value(feat).shape().to_vec()));
    Ok((g.value(feat).clone(), grad))
}

pub fn grad_cam(net: &Network, image: &Tensor, class: usize, layer: &str) -> Result<SaliencyMap> {
    let (features, grad) = feature_gradient(net, image, class, layer)?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let weights: Vec<f64> = (0..k)
        .map(|ch| {
            grad.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .sum::<f64>()
                / (h * w) as f64
        })
        .collect();
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "grad-cam", class)
}

/// Grad-CAM++ channel weights: w_k = sum_ij alpha_ij relu(g_ij) with
/// g = d(exp y_c)/dA and alpha = g^2 / (2 g^2 + (sum A) g^3), 0/0 -> 0.
/// The exponential is computed as exp(y_c - max logit) against overflow.
pub fn grad_cam_pp(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let (features, grad) = feature_gradient(net, image, class, layer)?;
    let logits = net.forward(image)?;
    let max_logit = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_yc = (logits.data()[class] - max_logit).exp();
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let mut weights = vec![0.0; k];
    for ch in 0..k {
        let a_sum: f64 = features.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
        for i in 0..h * w {
            // d(exp y_c)/dA = exp(y_c) * dy_c/dA
            let gij = exp_yc * grad.data()[ch * h * w + i];
            let denom = 2.0 * gij * gij + a_sum * gij * gij * gij;
            let alpha = if denom == 0.0 { 0.0 } else { gij * gij / denom };
            weights[ch] += alpha * gij.max(0.0);
        }
    }
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "grad-cam++", class)
}

/// XGrad-CAM: w_k = sum_ij (A_ij / sum A) dy_c/dA_ij, 0/0 -> 0.
pub fn xgrad_cam(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let (features, grad) = feature_gradient(net, image, class, layer)?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let mut weights = vec![0.0; k];
    for ch in 0..k {
        let a_sum: f64 = features.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
        if a_sum == 0.0 {
            continue;
        }
        for i in 0..h * w {
            weights[ch] +=
                features.data()[ch * h * w + i] / a_sum * grad.data()[ch * h * w + i];
        }
    }
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "xgrad-cam", class)
}

fn softmax_vec(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| v / z).collect()
}

/// Score-CAM: per-channel confidence gain over the zero baseline, softmaxed
/// into weights. Costs K masked forward passes plus one baseline pass.
pub fn score_cam(net: &Network, image: &Tensor, class: usize, layer: &str) -> Result<SaliencyMap> {
    let features = net.features_only(image, layer)?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let baseline = net.forward(&Tensor::zeros(image.shape().to_vec()))?;
    let base_c = baseline.data()[class];
    let mut scores = vec![0.0; k];
    for ch in 0..k {
        let channel = Tensor::new(
            vec![h, w],
            features.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )?;
        let mask = adapt_saliency(&channel, image_hw(net), Normalization::Range)?;
        let masked = apply_mask(image, &mask)?;
        scores[ch] = net.forward(&masked)?.data()[class] - base_c;
    }
    let weights = softmax_vec(&scores);
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "score-cam", class)
}

/// Raw (un-softmaxed) per-channel confidence scores used by Score-CAM,
/// exposed for the finite-difference identity against `mask_objective`.
pub fn score_cam_channel_scores(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
) -> Result<Vec<f64>> {
    let features = net.features_only(image, layer)?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let baseline = net.forward(&Tensor::zeros(image.shape().to_vec()))?;
    let base_c = baseline.data()[class];
    let mut scores = vec![0.0; k];
    for ch in 0..k {
        let channel = Tensor::new(
            vec![h, w],
            features.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )?;
        let mask = adapt_saliency(&channel, image_hw(net), Normalization::Range)?;
        let masked = apply_mask(image, &mask)?;
        scores[ch] = net.forward(&masked)?.data()[class] - base_c;
    }
    Ok(scores)
}

/// F(w) over un-softmaxed weights: the masked class logit for the linear
/// combination sum_k w_k A^k, with n(0) := 0. Internal evaluator backing
/// the Score-CAM finite-difference identity; the optimized path always
/// softmaxes.
pub fn mask_objective(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
    weights: &[f64],
) -> Result<f64> {
    let features = net.features_only(image, layer)?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    if weights.len() != k {
        return Err(Error::invalid(format!(
            "mask_objective: {} weights for {k} channels",
            weights.len()
        )));
    }
    let mut raw = vec![0.0; h * w];
    for ch in 0..k {
        for i in 0..h * w {
            raw[i] += weights[ch] * features.data()[ch * h * w + i];
        }
    }
    let raw = Tensor::new(vec![h, w], raw)?;
    let mask = adapt_saliency(&raw, image_hw(net), Normalization::Range)?;
    let masked = apply_mask(image, &mask)?;
    Ok(net.forward(&masked)?.data()[class])
}

/// Ablation-CAM: w_k = (y_c - y_c^(k)) / y_c with channel k zeroed at the
/// hook; when y_c = 0 the raw difference is used.
pub fn ablation_cam(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let (logits, features) = net.forward_with_features(image, layer)?;
    let y_c = logits.data()[class];
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let mut weights = vec![0.0; k];
    for ch in 0..k {
        let mut ablated = features.clone();
        for i in 0..h * w {
            ablated.data_mut()[ch * h * w + i] = 0.0;
        }
        let y_k = net.forward_from(layer, &ablated)?.data()[class];
        weights[ch] = if y_c == 0.0 { y_c - y_k } else { (y_c - y_k) / y_c };
    }
    let raw = weighted_sum_relu(&features, &weights);
    build_map(raw, image_hw(net), Normalization::Range, "ablation-cam", class)
}

/// Uniform map with the top-left pixel zeroed; independent of image
/// content and class.
pub fn fake_cam(image_hw: (usize, usize)) -> SaliencyMap {
    let (h, w) = image_hw;
    let mut adapted = Tensor::full(vec![h, w], 1.0);
    adapted.data_mut()[0] = 0.0;
    SaliencyMap {
        raw: adapted.clone(),
        adapted,
        method: "fake-cam".into(),
        target_class: 0,
    }
}

/// One (iteration, objective value) pair per optimization step.
pub type OptiTrace = Vec<(usize, f64)>;

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step: moves `u` along the gradient of the maximized objective.
    fn step(&mut self, u: &mut [f64], grad: &[f64], cfg: &OptiConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        for i in 0..u.len() {
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            u[i] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Evaluate the configured objective at `u` and return (F, dF/du).
fn objective_and_grad(
    net: &Network,
    image: &Tensor,
    class: usize,
    features: &Tensor,
    u: &[f64],
    cfg: &OptiConfig,
    plain_score: f64,
) -> Result<(f64, Vec<f64>)> {
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    let mut g = Graph::new();
    let u_node = g.leaf(Tensor::new(vec![k], u.to_vec())?);
    let weights = g.softmax(u_node);
    let w_row = g.reshape(weights, vec![1, k])?;
    let a_flat = g.leaf(features.reshape(vec![k, h * w])?);
    let combo = g.matmul(w_row, a_flat)?;
    let raw = g.reshape(combo, vec![h, w])?;
    let up = g.bilinear_upsample(raw, ih, iw)?;
    let s = match cfg.normalization {
        Normalization::Range => g.range_normalize(up)?,
        Normalization::Max => g.max_normalize(up)?,
        Normalization::Sigmoid => g.sigmoid(up),
    };
    let img = g.leaf(image.clone());

    let masked_score = |g: &mut Graph, mask| -> Result<crate::graph::NodeId> {
        let masked = g.mul_channel_broadcast(img, mask)?;
        let logits = net.forward_on_graph(g, masked)?;
        match cfg.selector {
            Selector::Logit => g.select(logits, class),
            Selector::Probability => {
                let p = g.softmax(logits);
                g.select(p, class)
            }
        }
    };

    let root = match cfg.objective {
        Objective::Mask => masked_score(&mut g, s)?,
        Objective::Diff => {
            let inside = masked_score(&mut g, s)?;
            let plain = g.leaf(Tensor::scalar(plain_score));
            let d = g.sub(plain, inside)?;
            let a = g.abs(d);
            g.mul_scalar(a, -1.0)
        }
        Objective::IOMask => {
            let inside = masked_score(&mut g, s)?;
            let comp = g.sub_from_scalar(1.0, s);
            let outside = masked_score(&mut g, comp)?;
            g.sub(inside, outside)?
        }
        Objective::IODiff => {
            let inside = masked_score(&mut g, s)?;
            let comp = g.sub_from_scalar(1.0, s);
            let outside = masked_score(&mut g, comp)?;
            let plain = g.leaf(Tensor::scalar(plain_score));
            let din = g.sub(plain, inside)?;
            let ain = g.abs(din);
            let neg_in = g.mul_scalar(ain, -1.0);
            let dout = g.sub(plain, outside)?;
            let aout = g.abs(dout);
            g.add(neg_in, aout)?
        }
    };
    let f_val = g.value(root).item();
    if !f_val.is_finite() {
        return Err(Error::invalid(format!(
            "opti_cam: non-finite objective value {f_val} during optimization"
        )));
    }
    let grads = g.backward(root)?;
    let du = grads[u_node.index()]
        .clone()
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; k]);
    Ok((f_val, du))
}

/// Objective value F and gradient dF/du at a given weight vector,
/// exposed for end-to-end gradient verification against finite
/// differences.
pub fn objective_gradient(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
    u: &[f64],
    cfg: &OptiConfig,
) -> Result<(f64, Vec<f64>)> {
    let features = net.features_only(image, layer)?;
    let plain_score = match cfg.objective {
        Objective::Diff | Objective::IODiff => {
            let logits = net.forward(image)?;
            match cfg.selector {
                Selector::Logit => logits.data()[class],
                Selector::Probability => softmax_vec(logits.data())[class],
            }
        }
        _ => 0.0,
    };
    objective_and_grad(net, image, class, &features, u, cfg, plain_score)
}

/// Adam ascent on the masked-image class score over softmax channel
/// weights. Returns the saliency map built from the best-scoring iterate
/// together with the objective trace.
pub fn opti_cam(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
    cfg: &OptiConfig,
) -> Result<(SaliencyMap, OptiTrace)> {
    cfg.validate()?;
    if class >= net.class_count {
        return Err(Error::invalid(format!(
            "opti_cam: class {class} out of range [0, {})",
            net.class_count
        )));
    }
    let features = net.features_only(image, layer)?;
    let k = features.shape()[0];
    if k < 2 {
        return Err(Error::invalid(format!(
            "opti_cam: hook layer has {k} channel(s), need at least 2"
        )));
    }
    // Diff-style objectives compare against the unmasked score.
    let plain_score = match cfg.objective {
        Objective::Diff | Objective::IODiff => {
            let logits = net.forward(image)?;
            match cfg.selector {
                Selector::Logit => logits.data()[class],
                Selector::Probability => softmax_vec(logits.data())[class],
            }
        }
        _ => 0.0,
    };

    let mut u = vec![cfg.init; k];
    let mut adam = AdamState::new(k);
    let mut trace: OptiTrace = Vec::with_capacity(cfg.max_iterations);
    let mut best_u = u.clone();
    let mut best_f = f64::NEG_INFINITY;
    let mut prev_f: Option<f64> = None;
    for iter in 0..cfg.max_iterations {
        let (f_val, grad) = objective_and_grad(net, image, class, &features, &u, cfg, plain_score)?;
        trace.push((iter, f_val));
        if f_val > best_f {
            best_f = f_val;
            best_u = u.clone();
        }
        if let Some(p) = prev_f {
            if (f_val - p).abs() < cfg.tolerance {
                break;
            }
        }
        prev_f = Some(f_val);
        adam.step(&mut u, &grad, cfg);
    }

    let weights = softmax_vec(&best_u);
    // convex combination of non-negative maps; identity h
    let (h, w) = (features.shape()[1], features.shape()[2]);
    let mut raw = vec![0.0; h * w];
    for ch in 0..k {
        for i in 0..h * w {
            raw[i] += weights[ch] * features.data()[ch * h * w + i];
        }
    }
    let raw = Tensor::new(vec![h, w], raw)?;
    let map = build_map(raw, image_hw(net), cfg.normalization, "opti-cam", class)?;
    Ok((map, trace))
}

/// Dispatch by method name, as the harness and CLI see it.
pub fn compute_saliency(
    net: &Network,
    image: &Tensor,
    class: usize,
    layer: &str,
    method: &str,
    cfg: &OptiConfig,
) -> Result<SaliencyMap> {
    match method {
        "cam" => cam(net, image, class, layer),
        "grad-cam" => grad_cam(net, image, class, layer),
        "grad-cam++" => grad_cam_pp(net, image, class, layer),
        "xgrad-cam" => xgrad_cam(net, image, class, layer),
        "score-cam" => score_cam(net, image, class, layer),
        "ablation-cam" => ablation_cam(net, image, class, layer),
        "fake-cam" => Ok(fake_cam(image_hw(net))),
        "opti-cam" => opti_cam(net, image, class, layer, cfg).map(|(m, _)| m),
        _ => Err(Error::invalid(format!("unknown method: {method}"))),
    }
}

pub const METHODS: &[&str] = &[
    "cam",
    "grad-cam",
    "grad-cam++",
    "xgrad-cam",
    "score-cam",
    "ablation-cam",
    "fake-cam",
    "opti-cam",
];
