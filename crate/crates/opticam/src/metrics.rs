//! Evaluation metrics: average drop / gain / increase, insertion and
//! deletion curves, the localization suite, selectivity sweeps and the
//! similarity measures used by the parameter-randomization sanity check.

use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::saliency::apply_mask;
use crate::tensor::Tensor;

/// Per-image evaluation tuple: original probability `p` and masked
/// probability `o` for the ground-truth class, plus the predicted class.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRecord {
    pub image_id: usize,
    pub class: usize,
    pub p: f64,
    pub o: f64,
    pub predicted: usize,
    pub p_predicted: f64,
}

/// Build the (p, o) record for one image under the given mask.
pub fn eval_record(
    net: &Network,
    image: &Tensor,
    image_id: usize,
    class: usize,
    mask: &Tensor,
) -> Result<EvalRecord> {
    let p_vec = net.probabilities(image)?;
    let masked = apply_mask(image, mask)?;
    let o_vec = net.probabilities(&masked)?;
    let predicted = argmax(p_vec.data());
    Ok(EvalRecord {
        image_id,
        class,
        p: p_vec.data()[class],
        o: o_vec.data()[class],
        predicted,
        p_predicted: p_vec.data()[predicted],
    })
}

fn require_nonempty(records: &[EvalRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid(format!("{what}: empty record set")));
    }
    Ok(())
}

/// Mean relative probability loss under masking, as a percentage.
pub fn average_drop(records: &[EvalRecord]) -> Result<f64> {
    require_nonempty(records, "average_drop")?;
    let sum: f64 = records
        .iter()
        .map(|r| (r.p - r.o).max(0.0) / r.p)
        .sum();
    Ok(sum / records.len() as f64 * 100.0)
}

/// Mean relative probability gain under masking, as a percentage.
pub fn average_gain(records: &[EvalRecord]) -> Result<f64> {
    require_nonempty(records, "average_gain")?;
    let sum: f64 = records
        .iter()
        .map(|r| (r.o - r.p).max(0.0) / (1.0 - r.p))
        .sum();
    Ok(sum / records.len() as f64 * 100.0)
}

/// Percentage of images whose masked probability strictly exceeds the
/// original.
pub fn average_increase(records: &[EvalRecord]) -> Result<f64> {
    require_nonempty(records, "average_increase")?;
    let count = records.iter().filter(|r| r.p < r.o).count();
    Ok(count as f64 / records.len() as f64 * 100.0)
}

/// Ordered (fraction-of-pixels, probability) pairs.
pub type Curve = Vec<(f64, f64)>;

#[derive(Debug, Clone, serde::Serialize)]
pub struct InsertionDeletion {
    pub insertion: Curve,
    pub deletion: Curve,
    pub insertion_score: f64,
    pub deletion_score: f64,
}

/// Pixel order: descending adapted saliency, ties broken by raster index.
pub fn saliency_pixel_order(adapted: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..adapted.numel()).collect();
    order.sort_by(|&a, &b| {
        adapted.data()[b]
            .partial_cmp(&adapted.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Insertion and deletion curves with `steps + 1` points each, tracking
/// the class `track` (the original predicted class when `None`).
/// Scores are the mean of the per-step probabilities x 100.
pub fn insertion_deletion(
    net: &Network,
    image: &Tensor,
    adapted: &Tensor,
    steps: usize,
    track: Option<usize>,
) -> Result<InsertionDeletion> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    if steps < 2 {
        return Err(Error::invalid("insertion_deletion: steps must be >= 2"));
    }
    if steps > hw {
        return Err(Error::invalid(format!(
            "insertion_deletion: steps {steps} exceeds pixel count {hw}"
        )));
    }
    if adapted.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "insertion_deletion",
            lhs: vec![h, w],
            rhs: adapted.shape().to_vec(),
        });
    }
    let c = match track {
        Some(c) => c,
        None => argmax(net.probabilities(image)?.data()),
    };
    let order = saliency_pixel_order(adapted);
    // chunk sizes: q or q+1 so that exactly `steps` chunks cover hw pixels
    let (q, r) = (hw / steps, hw % steps);
    let pixels_after = |t: usize| t * q + t.min(r);

    let blurred = gaussian_blur(image, 11, 11.0 / 4.0)?;
    let prob = |img: &Tensor| -> Result<f64> { Ok(net.probabilities(img)?.data()[c]) };

    let mut deletion = Vec::with_capacity(steps + 1);
    let mut insertion = Vec::with_capacity(steps + 1);
    let mut del_img = image.clone();
    let mut ins_img = blurred.clone();
    deletion.push((0.0, prob(&del_img)?));
    insertion.push((0.0, prob(&ins_img)?));
    for t in 1..=steps {
        for &pix in &order[pixels_after(t - 1)..pixels_after(t)] {
            for ch in 0..image.shape()[0] {
                del_img.data_mut()[ch * hw + pix] = 0.0;
                ins_img.data_mut()[ch * hw + pix] = image.data()[ch * hw + pix];
            }
        }
        let frac = pixels_after(t) as f64 / hw as f64;
        deletion.push((frac, prob(&del_img)?));
        insertion.push((frac, prob(&ins_img)?));
    }
    let mean100 = |c: &Curve| c.iter().map(|&(_, p)| p).sum::<f64>() / c.len() as f64 * 100.0;
    Ok(InsertionDeletion {
        insertion_score: mean100(&insertion),
        deletion_score: mean100(&deletion),
        insertion,
        deletion,
    })
}

/// Separable Gaussian blur with a normalized 1-D kernel and reflect
/// padding at the borders.
pub fn gaussian_blur(image: &Tensor, kernel_size: usize, sigma: f64) -> Result<Tensor> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::invalid("gaussian_blur: kernel size must be odd"));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("gaussian_blur: sigma must be positive"));
    }
    let half = (kernel_size / 2) as isize;
    let mut kernel = Vec::with_capacity(kernel_size);
    for j in -half..=half {
        kernel.push((-(j * j) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let z: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= z;
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    // horizontal pass then vertical pass
    let mut mid = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - half, w as isize);
                    acc += kv * image.at3(ch, y, sx);
                }
                mid[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - half, h as isize);
                    acc += kv * mid[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Default selectivity exponents.
pub const DEFAULT_ALPHAS: &[f64] = &[0.01, 0.05, 0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0];

/// Raise the adapted map element-wise to each exponent and evaluate.
pub fn selectivity_sweep(
    net: &Network,
    image: &Tensor,
    adapted: &Tensor,
    class: usize,
    alphas: &[f64],
) -> Result<Vec<(f64, EvalRecord)>> {
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mask = adapted.map(|v| v.powf(alpha));
        out.push((alpha, eval_record(net, image, 0, class, &mask)?));
    }
    Ok(out)
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y <= self.y1 && x >= self.x0 && x <= self.x1
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix1 < ix0 || iy1 < iy0 {
        return 0.0;
    }
    let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

/// Largest 8-connected component of `mask`, ties broken by the component
/// whose first pixel comes earliest in raster order; returns its tight
/// bounding box, or `None` when the mask is empty.
fn largest_component_bbox(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, usize, BBox)> = None; // (count, first_idx, box)
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut count = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            count += 1;
            let (y, x) = (idx / w, idx % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let bb = BBox { x0, y0, x1, y1 };
        // raster scan guarantees `start` is the component's first pixel
        match &best {
            Some((bc, _, _)) if *bc >= count => {}
            _ => best = Some((count, start, bb)),
        }
    }
    best.map(|(_, _, bb)| bb)
}

/// Threshold the map at its mean, take the largest connected component's
/// bounding box; an empty binary mask falls back to the full-image box.
pub fn predicted_bbox(adapted: &Tensor) -> BBox {
    let (h, w) = (adapted.shape()[0], adapted.shape()[1]);
    let mean = adapted.data().iter().sum::<f64>() / adapted.numel() as f64;
    let mask: Vec<bool> = adapted.data().iter().map(|&v| v > mean).collect();
    largest_component_bbox(&mask, h, w).unwrap_or(BBox {
        x0: 0,
        y0: 0,
        x1: w - 1,
        y1: h - 1,
    })
}

/// All values already scaled x100 except `sm`, which is unbounded.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalizationScores {
    pub om: f64,
    pub le: f64,
    pub f1: f64,
    pub sp: f64,
    pub ep: f64,
    pub sm: f64,
}

/// The seven-metric localization suite minus BoxAcc (aggregated
/// separately). `p_c` is the original-image probability of class `c`.
pub fn localization_suite(
    adapted: &Tensor,
    gt_boxes: &[BBox],
    class: usize,
    predicted: usize,
    p_c: f64,
) -> Result<LocalizationScores> {
    if gt_boxes.is_empty() {
        return Err(Error::invalid("localization_suite: empty gt box set"));
    }
    let (h, w) = (adapted.shape()[0], adapted.shape()[1]);
    let bp = predicted_bbox(adapted);
    let max_iou = gt_boxes
        .iter()
        .map(|b| iou(b, &bp))
        .fold(f64::NEG_INFINITY, f64::max);
    let om = 1.0 - max_iou * if predicted == class { 1.0 } else { 0.0 };
    let le = 1.0 - max_iou;

    // union of gt boxes as a pixel set
    let in_union = |y: usize, x: usize| gt_boxes.iter().any(|b| b.contains(y, x));
    let mut union_count = 0usize;
    let mut mass_in = 0.0;
    let mut mass_total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = adapted.at2(y, x);
            mass_total += v;
            if in_union(y, x) {
                union_count += 1;
                mass_in += v;
            }
        }
    }
    let precision = if mass_total == 0.0 { 0.0 } else { mass_in / mass_total };
    let recall = mass_in / union_count as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    // standard pointing game: argmax pixel, raster-order tie break
    let mut arg = 0usize;
    for i in 0..h * w {
        if adapted.data()[i] > adapted.data()[arg] {
            arg = i;
        }
    }
    let sp = if in_union(arg / w, arg % w) { 1.0 } else { 0.0 };

    // energy pointing game: deliberately an independent loop over the
    // union mask rather than a reuse of `precision`
    let mut ep_num = 0.0;
    let mut ep_den = 0.0;
    for y in 0..h {
        for x in 0..w {
            ep_den += adapted.at2(y, x);
            if gt_boxes.iter().any(|b| b.contains(y, x)) {
                ep_num += adapted.at2(y, x);
            }
        }
    }
    let ep = if ep_den == 0.0 { 0.0 } else { ep_num / ep_den };

    let sm = (bp.area() as f64 / (h * w) as f64).max(0.05).ln() - p_c.ln();

    Ok(LocalizationScores {
        om: om * 100.0,
        le: le * 100.0,
        f1: f1 * 100.0,
        sp: sp * 100.0,
        ep: ep * 100.0,
        sm,
    })
}

pub const DEFAULT_BOX_ETAS: &[f64] = &[
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
    0.80, 0.85, 0.90, 0.95,
];
pub const DEFAULT_BOX_DELTAS: &[f64] = &[0.3, 0.5, 0.7];

/// Per-image hit indicator for one (eta, delta) pair.
fn box_hit(adapted: &Tensor, gt_boxes: &[BBox], eta: f64, delta: f64) -> f64 {
    let (h, w) = (adapted.shape()[0], adapted.shape()[1]);
    let mask: Vec<bool> = adapted.data().iter().map(|&v| v > eta).collect();
    let bp = largest_component_bbox(&mask, h, w).unwrap_or(BBox {
        x0: 0,
        y0: 0,
        x1: w - 1,
        y1: h - 1,
    });
    if gt_boxes.iter().any(|b| iou(&bp, b) >= delta) {
        1.0
    } else {
        0.0
    }
}

/// Single-image BoxAcc: max over eta of the hit indicator, then mean over
/// delta, as a percentage.
pub fn box_accuracy_single(
    adapted: &Tensor,
    gt_boxes: &[BBox],
    etas: &[f64],
    deltas: &[f64],
) -> f64 {
    let per_delta: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            etas.iter()
                .map(|&e| box_hit(adapted, gt_boxes, e, d))
                .fold(0.0f64, f64::max)
        })
        .collect();
    per_delta.iter().sum::<f64>() / per_delta.len() as f64 * 100.0
}

/// Batch BoxAcc: average the hit
/// indicator over images per (eta, delta), take the max over eta, then
/// the mean over delta.
pub fn box_accuracy(
    maps_and_boxes: &[(&Tensor, &[BBox])],
    etas: &[f64],
    deltas: &[f64],
) -> Result<f64> {
    if maps_and_boxes.is_empty() {
        return Err(Error::invalid("box_accuracy: empty input"));
    }
    let n = maps_and_boxes.len() as f64;
    let per_delta: Vec<f64> = deltas
        .iter()
        .map(|&d| {
            etas.iter()
                .map(|&e| {
                    maps_and_boxes
                        .iter()
                        .map(|(m, b)| box_hit(m, b, e, d))
                        .sum::<f64>()
                        / n
                })
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(per_delta.iter().sum::<f64>() / per_delta.len() as f64 * 100.0)
}

/// Average ranks with ties averaged.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0; // zero-variance convention
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Spearman rank correlation of two flattened maps; identical inputs give
/// exactly 1.0.
pub fn spearman_correlation(a: &Tensor, b: &Tensor) -> f64 {
    if a.data() == b.data() {
        return 1.0;
    }
    pearson(&ranks(a.data()), &ranks(b.data()))
}

/// Spearman of absolute values.
pub fn spearman_correlation_abs(a: &Tensor, b: &Tensor) -> f64 {
    let aa = a.map(f64::abs);
    let bb = b.map(f64::abs);
    spearman_correlation(&aa, &bb)
}

/// Single-window SSIM over the full map with L = 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for i in 0..a.numel() {
        let (da, db) = (a.data()[i] - ma, b.data()[i] - mb);
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    va /= n;
    vb /= n;
    cov /= n;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// The five bounding-box study masks: the saliency map itself, its
/// intersection with the gt-box union, the saliency outside the boxes,
/// the box indicator, and the box complement.
pub fn box_study_masks(adapted: &Tensor, gt_boxes: &[BBox]) -> Vec<(String, Tensor)> {
    let (h, w) = (adapted.shape()[0], adapted.shape()[1]);
    let mut box_ind = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            if gt_boxes.iter().any(|b| b.contains(y, x)) {
                box_ind.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    let comp = box_ind.map(|v| 1.0 - v);
    let min_map = |m: &Tensor| {
        Tensor::new(
            vec![h, w],
            adapted
                .data()
                .iter()
                .zip(m.data())
                .map(|(&s, &i)| s.min(i))
                .collect(),
        )
        .unwrap()
    };
    vec![
        ("S".into(), adapted.clone()),
        ("BS".into(), min_map(&box_ind)),
        ("S-B".into(), min_map(&comp)),
        ("B".into(), box_ind),
        ("I-B".into(), comp),
    ]
}
