//! Reverse-mode automatic differentiation over a per-call tape.
//!
//! A `Graph` records operations eagerly: each builder method computes the
//! forward value immediately and appends a node. `backward` from a scalar
//! root then fills in gradients for every node reachable from the root.
//! Graphs are confined to a single worker; tensors fed in are cloned, so a
//! graph never aliases caller state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node on the tape; indexes the gradient vector
    /// returned by `Graph::backward`.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f64),
    /// out = c - x
    SubFromScalar,
    MatMul,
    /// inputs: x [Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout]
    Conv2d,
    Relu,
    Sigmoid,
    Abs,
    /// flat input index feeding each output element
    MaxPool2x2 { argmax: Vec<usize> },
    GlobalAvgPool,
    /// inputs: x [K], weight [C,K], bias [C]
    Linear,
    /// softmax over the last axis
    Softmax,
    Sum,
    Mean,
    Select(usize),
    Reshape,
    BilinearUpsample,
    RangeNormalize { arg_min: usize, arg_max: usize, degenerate: bool },
    MaxNormalize { arg_max: usize, degenerate: bool },
    ConcatChannels,
    /// inputs: image [C,H,W], mask [H,W]
    MulChannelBroadcast,
    /// inputs: x [C,H,W], mean [C], std [C]
    ChannelNormalize,
    CrossEntropy { target: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a leaf tensor. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(Op::Add, vec![a, b], t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(Op::Sub, vec![a, b], t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        Ok(self.push(Op::Mul, vec![a, b], t))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar, vec![a], t)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|v| v * c);
        self.push(Op::MulScalar(c), vec![a], t)
    }

    /// out = c - x, used for complement masks (1 - s).
    pub fn sub_from_scalar(&mut self, c: f64, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| c - v);
        self.push(Op::SubFromScalar, vec![a], t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], t))
    }

    /// 2-D convolution, stride 1, zero "same" padding, odd kernel extents.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d(bias)",
                lhs: sw,
                rhs: sb,
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let dx = self.value(x).data();
        let dw = self.value(weight).data();
        let db = self.value(bias).data();
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = db[o];
                    for i in 0..cin {
                        for ky in 0..kh {
                            let sy = y + ky;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let sy = sy - ph;
                            for kx in 0..kw {
                                let sx2 = xx + kx;
                                if sx2 < pw || sx2 - pw >= w {
                                    continue;
                                }
                                let sx2 = sx2 - pw;
                                acc += dw[((o * cin + i) * kh + ky) * kw + kx]
                                    * dx[(i * h + sy) * w + sx2];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        let t = Tensor::new(vec![cout, h, w], out)?;
        Ok(self.push(Op::Conv2d, vec![x, weight, bias], t))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu, vec![a], t)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![a], t)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::abs);
        self.push(Op::Abs, vec![a], t)
    }

    /// 2x2 max pooling, stride 2. Ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn max_pool2x2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::invalid(format!(
                "max_pool2x2: need [C,H,W] with even H,W, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                            if d[idx] > best {
                                best = d[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ch * oh + y) * ow + x] = best;
                    argmax[(ch * oh + y) * ow + x] = best_idx;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2x2 { argmax }, vec![a], t))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("global_avg_pool: need [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h * w {
                acc += d[ch * h * w + i];
            }
            out[ch] = acc / (h * w) as f64;
        }
        let t = Tensor::new(vec![c], out)?;
        Ok(self.push(Op::GlobalAvgPool, vec![a], t))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sw,
                rhs: sx,
            });
        }
        let (c, k) = (sw[0], sw[1]);
        if self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "linear(bias)",
                lhs: vec![c],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let dx = self.value(x).data();
        let dw = self.value(weight).data();
        let db = self.value(bias).data();
        let mut out = vec![0.0; c];
        for i in 0..c {
            let mut acc = db[i];
            for j in 0..k {
                acc += dw[i * k + j] * dx[j];
            }
            out[i] = acc;
        }
        let t = Tensor::new(vec![c], out)?;
        Ok(self.push(Op::Linear, vec![x, weight, bias], t))
    }

    /// Softmax over the last axis, computed stably per row.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).shape().to_vec();
        let n = *s.last().unwrap();
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for row in 0..d.len() / n {
            let r = &d[row * n..(row + 1) * n];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (r[j] - m).exp();
                out[row * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[row * n + j] /= z;
            }
        }
        let t = Tensor::new(s, out).unwrap();
        self.push(Op::Softmax, vec![a], t)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum, vec![a], t)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let t = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(Op::Mean, vec![a], t)
    }

    /// Pick a single element out of a vector as a scalar node.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(a).numel() {
            return Err(Error::invalid(format!(
                "select: index {index} out of range for {} elements",
                self.value(a).numel()
            )));
        }
        let t = Tensor::scalar(self.value(a).data()[index]);
        Ok(self.push(Op::Select(index), vec![a], t))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], t))
    }

    /// Corner-aligned bilinear upsampling of a 2-D map.
    pub fn bilinear_upsample(&mut self, a: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("bilinear_upsample: need [h,w], got {s:?}")));
        }
        let (h, w) = (s[0], s[1]);
        if th < h || tw < w {
            return Err(Error::invalid(format!(
                "bilinear_upsample: target {th}x{tw} smaller than source {h}x{w}"
            )));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; th * tw];
        for ty in 0..th {
            let (y0, y1, fy) = src_coords(ty, th, h);
            for tx in 0..tw {
                let (x0, x1, fx) = src_coords(tx, tw, w);
                let v00 = d[y0 * w + x0];
                let v01 = d[y0 * w + x1];
                let v10 = d[y1 * w + x0];
                let v11 = d[y1 * w + x1];
                out[ty * tw + tx] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
        let t = Tensor::new(vec![th, tw], out)?;
        Ok(self.push(Op::BilinearUpsample, vec![a], t))
    }

    /// (A - min) / (max - min). If max == min the output is all zeros
    /// (the n(0) := 0 convention) and the gradient is zero.
    pub fn range_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.value(a).data();
        if d.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("range_normalize: NaN in input"));
        }
        let (mut arg_min, mut arg_max) = (0usize, 0usize);
        for (i, &v) in d.iter().enumerate() {
            if v < d[arg_min] {
                arg_min = i;
            }
            if v > d[arg_max] {
                arg_max = i;
            }
        }
        let (lo, hi) = (d[arg_min], d[arg_max]);
        let degenerate = hi == lo;
        let t = if degenerate {
            Tensor::zeros(self.value(a).shape().to_vec())
        } else {
            self.value(a).map(|v| (v - lo) / (hi - lo))
        };
        Ok(self.push(
            Op::RangeNormalize {
                arg_min,
                arg_max,
                degenerate,
            },
            vec![a],
            t,
        ))
    }

    /// A / max(A). If max == 0 the output is all zeros with zero gradient.
    pub fn max_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.value(a).data();
        if d.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("max_normalize: NaN in input"));
        }
        let mut arg_max = 0usize;
        for (i, &v) in d.iter().enumerate() {
            if v > d[arg_max] {
                arg_max = i;
            }
        }
        let hi = d[arg_max];
        let degenerate = hi == 0.0;
        let t = if degenerate {
            Tensor::zeros(self.value(a).shape().to_vec())
        } else {
            self.value(a).map(|v| v / hi)
        };
        Ok(self.push(Op::MaxNormalize { arg_max, degenerate }, vec![a], t))
    }

    /// Concatenate two [C,H,W] stacks along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        Ok(self.push(Op::ConcatChannels, vec![a, b], t))
    }

    /// image [C,H,W] times mask [H,W], mask broadcast across channels.
    pub fn mul_channel_broadcast(&mut self, image: NodeId, mask: NodeId) -> Result<NodeId> {
        let si = self.value(image).shape().to_vec();
        let sm = self.value(mask).shape().to_vec();
        if si.len() != 3 || sm.len() != 2 || si[1] != sm[0] || si[2] != sm[1] {
            return Err(Error::ShapeMismatch {
                op: "mul_channel_broadcast",
                lhs: si,
                rhs: sm,
            });
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let di = self.value(image).data();
        let dm = self.value(mask).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                out[ch * h * w + i] = di[ch * h * w + i] * dm[i];
            }
        }
        let t = Tensor::new(si, out)?;
        Ok(self.push(Op::MulChannelBroadcast, vec![image, mask], t))
    }

    /// (x - mean_c) / std_c per channel.
    pub fn channel_normalize(&mut self, x: NodeId, mean: NodeId, std: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sm = self.value(mean).shape().to_vec();
        let ss = self.value(std).shape().to_vec();
        if sx.len() != 3 || sm != [sx[0]] || ss != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "channel_normalize",
                lhs: sx,
                rhs: sm,
            });
        }
        if self.value(std).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("channel_normalize: std must be positive"));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let dx = self.value(x).data();
        let dm = self.value(mean).data();
        let ds = self.value(std).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                out[ch * h * w + i] = (dx[ch * h * w + i] - dm[ch]) / ds[ch];
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(Op::ChannelNormalize, vec![x, mean, std], t))
    }

    /// Fused log-softmax + negative log likelihood of `target`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 1 || target >= s[0] {
            return Err(Error::invalid(format!(
                "cross_entropy: logits {s:?}, target {target}"
            )));
        }
        let d = self.value(logits).data();
        let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let t = Tensor::scalar(lse - d[target]);
        Ok(self.push(Op::CrossEntropy { target }, vec![logits], t))
    }

    /// Reverse-mode pass from a scalar root. Returns per-node gradients;
    /// nodes not reachable from the root get `None`.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate_inputs(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(grads, node.inputs[0], g.clone());
                add_to(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                add_to(grads, node.inputs[0], g.clone());
                add_to(grads, node.inputs[1], g.map(|v| -v));
            }
            Op::Mul => {
                let a = self.value(node.inputs[0]);
                let b = self.value(node.inputs[1]);
                let ga = Tensor::new(
                    a.shape().to_vec(),
                    g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    b.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                add_to(grads, node.inputs[0], ga);
                add_to(grads, node.inputs[1], gb);
            }
            Op::AddScalar => add_to(grads, node.inputs[0], g.clone()),
            Op::MulScalar(c) => add_to(grads, node.inputs[0], g.map(|v| v * c)),
            Op::SubFromScalar => add_to(grads, node.inputs[0], g.map(|v| -v)),
            Op::MatMul => {
                let a = self.value(node.inputs[0]);
                let b = self.value(node.inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (da, db, dg) = (a.data(), b.data(), g.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gv = dg[i * n + j];
                        for p in 0..k {
                            ga[i * k + p] += gv * db[p * n + j];
                            gb[p * n + j] += gv * da[i * k + p];
                        }
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(vec![m, k], ga).unwrap());
                add_to(grads, node.inputs[1], Tensor::new(vec![k, n], gb).unwrap());
            }
            Op::Conv2d => {
                let x = self.value(node.inputs[0]);
                let wt = self.value(node.inputs[1]);
                let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let (dx, dw, dg) = (x.data(), wt.data(), g.data());
                let mut gx = vec![0.0; cin * h * w];
                let mut gw = vec![0.0; cout * cin * kh * kw];
                let mut gb = vec![0.0; cout];
                for o in 0..cout {
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = dg[(o * h + y) * w + xx];
                            gb[o] += gv;
                            for i in 0..cin {
                                for ky in 0..kh {
                                    let sy = y + ky;
                                    if sy < ph || sy - ph >= h {
                                        continue;
                                    }
                                    let sy = sy - ph;
                                    for kx in 0..kw {
                                        let sx = xx + kx;
                                        if sx < pw || sx - pw >= w {
                                            continue;
                                        }
                                        let sx = sx - pw;
                                        gw[((o * cin + i) * kh + ky) * kw + kx] +=
                                            gv * dx[(i * h + sy) * w + sx];
                                        gx[(i * h + sy) * w + sx] +=
                                            gv * dw[((o * cin + i) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(vec![cin, h, w], gx).unwrap());
                add_to(
                    grads,
                    node.inputs[1],
                    Tensor::new(vec![cout, cin, kh, kw], gw).unwrap(),
                );
                add_to(grads, node.inputs[2], Tensor::new(vec![cout], gb).unwrap());
            }
            Op::Relu => {
                let x = self.value(node.inputs[0]);
                // subgradient at exactly 0 is 0
                let gx = Tensor::new(
                    x.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                add_to(grads, node.inputs[0], gx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let gx = Tensor::new(
                    y.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )
                .unwrap();
                add_to(grads, node.inputs[0], gx);
            }
            Op::Abs => {
                let x = self.value(node.inputs[0]);
                let gx = Tensor::new(
                    x.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| {
                            if *xv > 0.0 {
                                *gv
                            } else if *xv < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .unwrap();
                add_to(grads, node.inputs[0], gx);
            }
            Op::MaxPool2x2 { argmax } => {
                let x = self.value(node.inputs[0]);
                let mut gx = vec![0.0; x.numel()];
                for (out_i, &in_i) in argmax.iter().enumerate() {
                    gx[in_i] += g.data()[out_i];
                }
                add_to(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
            }
            Op::GlobalAvgPool => {
                let x = self.value(node.inputs[0]);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = g.data()[ch] / (h * w) as f64;
                    for i in 0..h * w {
                        gx[ch * h * w + i] = gv;
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(vec![c, h, w], gx).unwrap());
            }
            Op::Linear => {
                let x = self.value(node.inputs[0]);
                let wt = self.value(node.inputs[1]);
                let (c, k) = (wt.shape()[0], wt.shape()[1]);
                let (dx, dw, dg) = (x.data(), wt.data(), g.data());
                let mut gx = vec![0.0; k];
                let mut gw = vec![0.0; c * k];
                for i in 0..c {
                    for j in 0..k {
                        gx[j] += dg[i] * dw[i * k + j];
                        gw[i * k + j] += dg[i] * dx[j];
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(vec![k], gx).unwrap());
                add_to(grads, node.inputs[1], Tensor::new(vec![c, k], gw).unwrap());
                add_to(grads, node.inputs[2], Tensor::new(vec![c], dg.to_vec()).unwrap());
            }
            Op::Softmax => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.numel()];
                for row in 0..y.numel() / n {
                    let ys = &y.data()[row * n..(row + 1) * n];
                    let gs = &g.data()[row * n..(row + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[row * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Sum => {
                let x = self.value(node.inputs[0]);
                add_to(grads, node.inputs[0], Tensor::full(x.shape().to_vec(), g.item()));
            }
            Op::Mean => {
                let x = self.value(node.inputs[0]);
                let n = x.numel() as f64;
                add_to(
                    grads,
                    node.inputs[0],
                    Tensor::full(x.shape().to_vec(), g.item() / n),
                );
            }
            Op::Select(i) => {
                let x = self.value(node.inputs[0]);
                let mut gx = Tensor::zeros(x.shape().to_vec());
                gx.data_mut()[*i] = g.item();
                add_to(grads, node.inputs[0], gx);
            }
            Op::Reshape => {
                let x = self.value(node.inputs[0]);
                add_to(
                    grads,
                    node.inputs[0],
                    Tensor::new(x.shape().to_vec(), g.data().to_vec()).unwrap(),
                );
            }
            Op::BilinearUpsample => {
                let x = self.value(node.inputs[0]);
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (th, tw) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; h * w];
                for ty in 0..th {
                    let (y0, y1, fy) = src_coords(ty, th, h);
                    for tx in 0..tw {
                        let (x0, x1, fx) = src_coords(tx, tw, w);
                        let gv = g.data()[ty * tw + tx];
                        gx[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gx[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gx[y1 * w + x0] += gv * fy * (1.0 - fx);
                        gx[y1 * w + x1] += gv * fy * fx;
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(vec![h, w], gx).unwrap());
            }
            Op::RangeNormalize {
                arg_min,
                arg_max,
                degenerate,
            } => {
                let x = self.value(node.inputs[0]);
                if *degenerate {
                    add_to(grads, node.inputs[0], Tensor::zeros(x.shape().to_vec()));
                } else {
                    let lo = x.data()[*arg_min];
                    let hi = x.data()[*arg_max];
                    let r = hi - lo;
                    let sum_g: f64 = g.data().iter().sum();
                    let sum_gn: f64 = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(a, b)| a * b)
                        .sum();
                    let mut gx: Vec<f64> = g.data().iter().map(|v| v / r).collect();
                    gx[*arg_min] -= sum_g / r;
                    gx[*arg_max] -= sum_gn / r;
                    gx[*arg_min] += sum_gn / r;
                    add_to(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
                }
            }
            Op::MaxNormalize { arg_max, degenerate } => {
                let x = self.value(node.inputs[0]);
                if *degenerate {
                    add_to(grads, node.inputs[0], Tensor::zeros(x.shape().to_vec()));
                } else {
                    let hi = x.data()[*arg_max];
                    let sum_gn: f64 = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(a, b)| a * b)
                        .sum();
                    let mut gx: Vec<f64> = g.data().iter().map(|v| v / hi).collect();
                    gx[*arg_max] -= sum_gn / hi;
                    add_to(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
                }
            }
            Op::ConcatChannels => {
                let a = self.value(node.inputs[0]);
                let na = a.numel();
                let ga = Tensor::new(a.shape().to_vec(), g.data()[..na].to_vec()).unwrap();
                let b = self.value(node.inputs[1]);
                let gb = Tensor::new(b.shape().to_vec(), g.data()[na..].to_vec()).unwrap();
                add_to(grads, node.inputs[0], ga);
                add_to(grads, node.inputs[1], gb);
            }
            Op::MulChannelBroadcast => {
                let img = self.value(node.inputs[0]);
                let mask = self.value(node.inputs[1]);
                let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
                let mut gi = vec![0.0; c * h * w];
                let mut gm = vec![0.0; h * w];
                for ch in 0..c {
                    for i in 0..h * w {
                        let gv = g.data()[ch * h * w + i];
                        gi[ch * h * w + i] = gv * mask.data()[i];
                        gm[i] += gv * img.data()[ch * h * w + i];
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(img.shape().to_vec(), gi).unwrap());
                add_to(grads, node.inputs[1], Tensor::new(vec![h, w], gm).unwrap());
            }
            Op::ChannelNormalize => {
                let x = self.value(node.inputs[0]);
                let mean = self.value(node.inputs[1]);
                let std = self.value(node.inputs[2]);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![0.0; c * h * w];
                let mut gm = vec![0.0; c];
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    let (m, s) = (mean.data()[ch], std.data()[ch]);
                    for i in 0..h * w {
                        let gv = g.data()[ch * h * w + i];
                        gx[ch * h * w + i] = gv / s;
                        gm[ch] -= gv / s;
                        gs[ch] -= gv * (x.data()[ch * h * w + i] - m) / (s * s);
                    }
                }
                add_to(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
                add_to(grads, node.inputs[1], Tensor::new(vec![c], gm).unwrap());
                add_to(grads, node.inputs[2], Tensor::new(vec![c], gs).unwrap());
            }
            Op::CrossEntropy { target } => {
                let x = self.value(node.inputs[0]);
                let d = x.data();
                let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = d.iter().map(|&v| (v - m).exp()).sum();
                let gv = g.item();
                let mut gx: Vec<f64> = d.iter().map(|&v| gv * (v - m).exp() / z).collect();
                gx[*target] -= gv;
                add_to(grads, node.inputs[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
            }
        }
    }
}

/// Corner-aligned source coordinates: target index `t` out of `tn` maps to
/// source position `t * (sn-1) / (tn-1)`.
fn src_coords(t: usize, tn: usize, sn: usize) -> (usize, usize, f64) {
    if sn == 1 || tn == 1 {
        return (0, 0, 0.0);
    }
    let pos = t as f64 * (sn - 1) as f64 / (tn - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sn - 1);
    (lo, hi, pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leafv(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![3], vec![0.0, 0.0, 0.0]);
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = leafv(&mut g, vec![1, 4, 4], img.clone());
        let w = leafv(&mut g, vec![1, 1, 1, 1], vec![1.0]);
        let b = leafv(&mut g, vec![1], vec![0.0]);
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), img.as_slice());
    }

    #[test]
    fn conv2d_same_spatial_size() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2, 6, 6], vec![0.5; 72]);
        let w = g.leaf(Tensor::full(vec![3, 2, 3, 3], 0.1));
        let b = g.leaf(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 6, 6]);
    }

    #[test]
    fn shape_mismatch_diagnostic_names_op() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2]));
        let b = g.leaf(Tensor::zeros(vec![3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn backward_square_sum() {
        // root = sum(x * x), x = [3] -> grad = [6]
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1], vec![3.0]);
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_softmax_symmetric_point() {
        // root = softmax([a,b])[0] at a=b=0 -> grad = [0.25, -0.25]
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2], vec![0.0, 0.0]);
        let s = g.softmax(x);
        let root = g.select(s, 0).unwrap();
        let grads = g.backward(root).unwrap();
        let gx = grads[x.0].as_ref().unwrap().data();
        assert!((gx[0] - 0.25).abs() < 1e-15);
        assert!((gx[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_mean_relu() {
        // root = mean(relu(x)), x = [-1, 1] -> grad = [0, 0.5]
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2], vec![-1.0, 1.0]);
        let r = g.relu(x);
        let root = g.mean(r);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn upsample_constant_preserving() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![3, 3], 0.7));
        let y = g.bilinear_upsample(x, 9, 7).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_single_source_sample() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1, 1], vec![0.42]);
        let y = g.bilinear_upsample(x, 4, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn upsample_hand_evaluated_middle_column() {
        // 2x2 [[0,1],[0,1]] to 2x3 -> middle column 0.5
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let y = g.bilinear_upsample(x, 2, 3).unwrap();
        let d = g.value(y).data();
        assert_eq!(d, &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn upsample_rejects_downscale() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4, 4]));
        assert!(g.bilinear_upsample(x, 2, 4).is_err());
    }

    #[test]
    fn range_normalize_hand_case() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![2, 2], vec![0.0, 2.0, 4.0, 8.0]);
        let y = g.range_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn range_normalize_degenerate_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 2], 3.0));
        let y = g.range_normalize(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let y = g.max_pool2x2(x).unwrap();
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::new();
        let x = leafv(&mut g, vec![3], vec![1.0, -2.0, 0.5]);
        let ce = g.cross_entropy(x, 2).unwrap();
        let z: f64 = [1.0f64, -2.0, 0.5].iter().map(|v| v.exp()).sum();
        let expected = z.ln() - 0.5;
        assert!((g.value(ce).item() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        // Strict openness (0,1) is representable only while logit gaps stay
        // below ~37: beyond that 1/(1+e^-gap) rounds to exactly 1 in f64.
        fn softmax_sums_to_one(v in proptest::collection::vec(-15.0f64..15.0, 2..8)) {
            let mut g = Graph::new();
            let n = v.len();
            let x = g.leaf(Tensor::new(vec![n], v).unwrap());
            let s = g.softmax(x);
            let total: f64 = g.value(s).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
        }

        #[test]
        fn determinism_bit_identical(v in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let run = |v: &[f64]| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(vec![1, 4, 4], v.to_vec()).unwrap());
                let w = g.leaf(Tensor::full(vec![2, 1, 3, 3], 0.3));
                let b = g.leaf(Tensor::zeros(vec![2]));
                let c = g.conv2d(x, w, b).unwrap();
                let r = g.relu(c);
                let root = g.mean(r);
                let grads = g.backward(root).unwrap();
                (g.value(root).item(), grads[x.0].as_ref().unwrap().data().to_vec())
            };
            let (a1, g1) = run(&v);
            let (a2, g2) = run(&v);
            prop_assert!(a1.to_bits() == a2.to_bits());
            prop_assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
