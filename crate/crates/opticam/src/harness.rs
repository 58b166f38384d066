//! Experiment orchestration: batch evaluation over the test split with
//! per-image CSV and aggregate JSON reports, the parameter-randomization
//! sanity check, the objective x normalization ablation grid, and the
//! saliency-map file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::metrics::{
    self, box_accuracy, eval_record, insertion_deletion, localization_suite, spearman_correlation,
    spearman_correlation_abs, ssim, EvalRecord, InsertionDeletion, LocalizationScores,
};
use crate::nn::Network;
use crate::saliency::{
    compute_saliency, opti_cam, Normalization, Objective, OptiConfig, SaliencyMap,
    METHODS,
};
use crate::tensor::Tensor;

/// Everything one `eval` run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: String,
    pub layer: String,
    pub opti: OptiConfig,
    /// Subset of {"ad","ag","ai","id","loc","sel"}.
    pub metrics: Vec<String>,
    pub id_steps: usize,
    pub box_etas: Vec<f64>,
    pub box_deltas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(method: &str, out_dir: PathBuf) -> Self {
        RunConfig {
            method: method.to_string(),
            layer: "feat".to_string(),
            opti: OptiConfig::default(),
            metrics: vec!["ad".into(), "ag".into(), "ai".into()],
            id_steps: 0, // 0 means "image side"
            box_etas: metrics::DEFAULT_BOX_ETAS.to_vec(),
            box_deltas: metrics::DEFAULT_BOX_DELTAS.to_vec(),
            alphas: metrics::DEFAULT_ALPHAS.to_vec(),
            seed: 42,
            workers: 1,
            out_dir,
        }
    }

    fn validate(&self, net: &Network) -> Result<()> {
        if !METHODS.contains(&self.method.as_str()) {
            return Err(Error::invalid(format!("unknown method: {}", self.method)));
        }
        net.hookable_layer(&self.layer)?;
        self.opti.validate()?;
        for m in &self.metrics {
            if !["ad", "ag", "ai", "id", "loc", "sel"].contains(&m.as_str()) {
                return Err(Error::invalid(format!("unknown metric: {m}")));
            }
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        Ok(())
    }

    fn wants(&self, m: &str) -> bool {
        self.metrics.iter().any(|x| x == m)
    }
}

struct PerImage {
    record: EvalRecord,
    id: Option<InsertionDeletion>,
    loc: Option<LocalizationScores>,
    adapted: Option<Tensor>,
    sel: Vec<(f64, EvalRecord)>,
    wall: f64,
}

/// In-memory result of a run; the same strings are written to disk.
pub struct RunOutputs {
    pub per_image_csv: String,
    pub aggregate_json: String,
    pub curves_csv: Option<String>,
    pub selectivity_csv: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<EvalRecord>,
    pub mean_wall_time_sec: f64,
}

#[derive(serde::Serialize)]
struct ConfigEcho {
    layer: String,
    objective: String,
    normalization: String,
    selector: String,
    learning_rate: f64,
    max_iterations: usize,
    tolerance: f64,
    id_steps: usize,
    box_etas: Vec<f64>,
    box_deltas: Vec<f64>,
    alphas: Vec<f64>,
    metrics: Vec<String>,
}

#[derive(serde::Serialize)]
struct AggregateReport {
    method: String,
    seed: u64,
    image_count: usize,
    config: ConfigEcho,
    metrics: BTreeMap<String, f64>,
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Mask => "mask",
        Objective::Diff => "diff",
        Objective::IOMask => "iomask",
        Objective::IODiff => "iodiff",
    }
}

fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Range => "range",
        Normalization::Max => "max",
        Normalization::Sigmoid => "sigmoid",
    }
}

fn selector_name(s: crate::saliency::Selector) -> &'static str {
    match s {
        crate::saliency::Selector::Logit => "logit",
        crate::saliency::Selector::Probability => "probability",
    }
}

fn evaluate_one(
    net: &Network,
    image: &Tensor,
    image_id: usize,
    class: usize,
    boxes: &[metrics::BBox],
    cfg: &RunConfig,
    steps: usize,
) -> Result<PerImage> {
    let start = Instant::now();
    let map = compute_saliency(net, image, class, &cfg.layer, &cfg.method, &cfg.opti)?;
    let record = eval_record(net, image, image_id, class, &map.adapted)?;
    let id = if cfg.wants("id") {
        Some(insertion_deletion(net, image, &map.adapted, steps, None)?)
    } else {
        None
    };
    let loc = if cfg.wants("loc") {
        Some(localization_suite(
            &map.adapted,
            boxes,
            class,
            record.predicted,
            record.p,
        )?)
    } else {
        None
    };
    let sel = if cfg.wants("sel") {
        metrics::selectivity_sweep(net, image, &map.adapted, class, &cfg.alphas)?
    } else {
        Vec::new()
    };
    Ok(PerImage {
        record,
        id,
        loc,
        adapted: if cfg.wants("loc") { Some(map.adapted) } else { None },
        sel,
        wall: start.elapsed().as_secs_f64(),
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn build_outputs(
    cfg: &RunConfig,
    results: Vec<PerImage>,
    boxes: &[&[metrics::BBox]],
) -> Result<RunOutputs> {
    let n = results.len();
    // per-image CSV: fixed column set, blanks for unselected metrics
    let mut csv = String::from(
        "image_id,class,predicted,p,o,insertion,deletion,om,le,f1,sp,ep,sm\n",
    );
    for r in &results {
        let e = &r.record;
        let (ins, del) = r
            .id
            .as_ref()
            .map(|d| (fmt(d.insertion_score), fmt(d.deletion_score)))
            .unwrap_or_default();
        let loc = r
            .loc
            .as_ref()
            .map(|l| {
                [l.om, l.le, l.f1, l.sp, l.ep, l.sm]
                    .map(fmt)
                    .join(",")
            })
            .unwrap_or_else(|| ",,,,,".to_string());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.image_id,
            e.class,
            e.predicted,
            fmt(e.p),
            fmt(e.o),
            ins,
            del,
            loc
        ));
    }

    let records: Vec<EvalRecord> = results.iter().map(|r| r.record.clone()).collect();
    let mut agg: BTreeMap<String, f64> = BTreeMap::new();
    if cfg.wants("ad") {
        agg.insert("ad".into(), metrics::average_drop(&records)?);
    }
    if cfg.wants("ag") {
        agg.insert("ag".into(), metrics::average_gain(&records)?);
    }
    if cfg.wants("ai") {
        agg.insert("ai".into(), metrics::average_increase(&records)?);
    }
    let mean = |f: &dyn Fn(&PerImage) -> f64| -> f64 {
        results.iter().map(f).sum::<f64>() / n as f64
    };
    if cfg.wants("id") {
        agg.insert("insertion".into(), mean(&|r| r.id.as_ref().unwrap().insertion_score));
        agg.insert("deletion".into(), mean(&|r| r.id.as_ref().unwrap().deletion_score));
    }
    if cfg.wants("loc") {
        agg.insert("om".into(), mean(&|r| r.loc.as_ref().unwrap().om));
        agg.insert("le".into(), mean(&|r| r.loc.as_ref().unwrap().le));
        agg.insert("f1".into(), mean(&|r| r.loc.as_ref().unwrap().f1));
        agg.insert("sp".into(), mean(&|r| r.loc.as_ref().unwrap().sp));
        agg.insert("ep".into(), mean(&|r| r.loc.as_ref().unwrap().ep));
        agg.insert("sm".into(), mean(&|r| r.loc.as_ref().unwrap().sm));
        let maps_and_boxes: Vec<(&Tensor, &[metrics::BBox])> = results
            .iter()
            .zip(boxes)
            .map(|(r, b)| (r.adapted.as_ref().unwrap(), *b))
            .collect();
        agg.insert(
            "box_acc".into(),
            box_accuracy(&maps_and_boxes, &cfg.box_etas, &cfg.box_deltas)?,
        );
    }

    let curves_csv = cfg.wants("id").then(|| {
        let mut s = String::from("image_id,curve,fraction,probability\n");
        for r in &results {
            let d = r.id.as_ref().unwrap();
            for &(f, p) in &d.insertion {
                s.push_str(&format!("{},insertion,{},{}\n", r.record.image_id, fmt(f), fmt(p)));
            }
            for &(f, p) in &d.deletion {
                s.push_str(&format!("{},deletion,{},{}\n", r.record.image_id, fmt(f), fmt(p)));
            }
        }
        s
    });

    let selectivity_csv = cfg.wants("sel").then(|| {
        let mut s = String::from("image_id,alpha,p,o\n");
        for r in &results {
            for (a, e) in &r.sel {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.record.image_id,
                    fmt(*a),
                    fmt(e.p),
                    fmt(e.o)
                ));
            }
        }
        s
    });

    let report = AggregateReport {
        method: cfg.method.clone(),
        seed: cfg.seed,
        image_count: n,
        config: ConfigEcho {
            layer: cfg.layer.clone(),
            objective: objective_name(cfg.opti.objective).to_string(),
            normalization: normalization_name(cfg.opti.normalization).to_string(),
            selector: selector_name(cfg.opti.selector).to_string(),
            learning_rate: cfg.opti.learning_rate,
            max_iterations: cfg.opti.max_iterations,
            tolerance: cfg.opti.tolerance,
            id_steps: cfg.id_steps,
            box_etas: cfg.box_etas.clone(),
            box_deltas: cfg.box_deltas.clone(),
            alphas: cfg.alphas.clone(),
            metrics: cfg.metrics.clone(),
        },
        metrics: agg.clone(),
    };
    let aggregate_json = serde_json::to_string_pretty(&report)?;
    let mean_wall = results.iter().map(|r| r.wall).sum::<f64>() / n as f64;
    Ok(RunOutputs {
        per_image_csv: csv,
        aggregate_json,
        curves_csv,
        selectivity_csv,
        metrics: agg,
        records,
        mean_wall_time_sec: mean_wall,
    })
}

/// Evaluate `cfg.method` over the test split of `data`, writing
/// `per_image.csv` and `aggregate.json` (plus `curves.csv` /
/// `selectivity.csv` when selected) into `cfg.out_dir`. Per-image wall
/// time goes to a separate `timing.json` so the aggregate stays
/// byte-identical across worker counts. On failure an `error.txt` is
/// written and no report file is touched.
pub fn run_evaluation(net: &Network, data: &SyntheticDataset, cfg: &RunConfig) -> Result<RunOutputs> {
    fs::create_dir_all(&cfg.out_dir)?;
    match run_inner(net, data, cfg) {
        Ok(out) => {
            fs::write(cfg.out_dir.join("per_image.csv"), &out.per_image_csv)?;
            fs::write(cfg.out_dir.join("aggregate.json"), &out.aggregate_json)?;
            if let Some(c) = &out.curves_csv {
                fs::write(cfg.out_dir.join("curves.csv"), c)?;
            }
            if let Some(s) = &out.selectivity_csv {
                fs::write(cfg.out_dir.join("selectivity.csv"), s)?;
            }
            let timing = serde_json::json!({
                "image_count": out.records.len(),
                "mean_wall_time_per_image_sec": out.mean_wall_time_sec,
            });
            fs::write(
                cfg.out_dir.join("timing.json"),
                serde_json::to_string_pretty(&timing)?,
            )?;
            Ok(out)
        }
        Err(e) => {
            let _ = fs::write(cfg.out_dir.join("error.txt"), format!("error: {e}\n"));
            Err(e)
        }
    }
}

/// Same computation as `run_evaluation` without touching the filesystem.
pub fn run_inner(net: &Network, data: &SyntheticDataset, cfg: &RunConfig) -> Result<RunOutputs> {
    cfg.validate(net)?;
    let idx = data.split_indices(Split::Test);
    if idx.is_empty() {
        return Err(Error::invalid("run_evaluation: empty test split"));
    }
    let steps = if cfg.id_steps == 0 { data.image_size } else { cfg.id_steps };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let results: Result<Vec<PerImage>> = pool.install(|| {
        idx.par_iter()
            .map(|&i| {
                evaluate_one(net, &data.images[i], i, data.labels[i], &data.boxes[i], cfg, steps)
            })
            .collect()
    });
    let boxes: Vec<&[metrics::BBox]> = idx.iter().map(|&i| data.boxes[i].as_slice()).collect();
    build_outputs(cfg, results?, &boxes)
}

/// One row of the sanity-check table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StageSimilarity {
    pub stage: usize,
    pub image_count: usize,
    pub spearman: f64,
    pub spearman_abs: f64,
    pub ssim: f64,
}

/// Parameter-randomization sanity check: re-initialize the last `stage`
/// parameterized layers and compare saliency maps against stage 0 on a
/// fixed test-image subset.
pub fn sanity_check(
    net: &Network,
    data: &SyntheticDataset,
    cfg: &RunConfig,
    stages: &[usize],
) -> Result<Vec<StageSimilarity>> {
    cfg.validate(net)?;
    let idx: Vec<usize> = data.split_indices(Split::Test).into_iter().take(10).collect();
    if idx.is_empty() {
        return Err(Error::invalid("sanity_check: empty test split"));
    }
    let maps_for = |n: &Network| -> Result<Vec<Tensor>> {
        idx.iter()
            .map(|&i| {
                compute_saliency(n, &data.images[i], data.labels[i], &cfg.layer, &cfg.method, &cfg.opti)
                    .map(|m| m.adapted)
            })
            .collect()
    };
    let base = maps_for(net)?;
    let mut rows = Vec::with_capacity(stages.len());
    for &stage in stages {
        let randomized = net.randomize_from_layer(stage, cfg.seed)?;
        let maps = maps_for(&randomized)?;
        let n = maps.len() as f64;
        let sp = maps.iter().zip(&base).map(|(a, b)| spearman_correlation(a, b)).sum::<f64>() / n;
        let spa = maps
            .iter()
            .zip(&base)
            .map(|(a, b)| spearman_correlation_abs(a, b))
            .sum::<f64>()
            / n;
        let ss = maps.iter().zip(&base).map(|(a, b)| ssim(a, b)).sum::<f64>() / n;
        rows.push(StageSimilarity {
            stage,
            image_count: maps.len(),
            spearman: sp,
            spearman_abs: spa,
            ssim: ss,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub objective: String,
    pub normalization: String,
    pub ad: f64,
    pub ag: f64,
    pub ai: f64,
}

/// AD/AG/AI for every objective x normalization combination of the
/// optimized method over the test split.
pub fn ablation_grid(
    net: &Network,
    data: &SyntheticDataset,
    cfg: &RunConfig,
    objectives: &[Objective],
    normalizations: &[Normalization],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(objectives.len() * normalizations.len());
    for &obj in objectives {
        for &norm in normalizations {
            let mut cell = cfg.clone();
            cell.method = "opti-cam".to_string();
            cell.metrics = vec!["ad".into(), "ag".into(), "ai".into()];
            cell.opti.objective = obj;
            cell.opti.normalization = norm;
            let out = run_inner(net, data, &cell)?;
            rows.push(AblationRow {
                objective: objective_name(obj).to_string(),
                normalization: normalization_name(norm).to_string(),
                ad: out.metrics["ad"],
                ag: out.metrics["ag"],
                ai: out.metrics["ai"],
            });
        }
    }
    Ok(rows)
}

/// Render the ablation grid as a CSV table with a header row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("objective,normalization,ad,ag,ai\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.objective,
            r.normalization,
            fmt(r.ad),
            fmt(r.ag),
            fmt(r.ai)
        ));
    }
    s
}

/// Write the adapted map as "SALV1 <h> <w>\n" + row-major little-endian
/// f64 payload, plus a companion 8-bit PGM next to it.
pub fn export_saliency(map: &SaliencyMap, path: &Path) -> Result<()> {
    let (h, w) = (map.adapted.shape()[0], map.adapted.shape()[1]);
    let mut out = Vec::with_capacity(32 + 8 * h * w);
    writeln!(out, "SALV1 {h} {w}")?;
    for &v in map.adapted.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;

    let mut pgm = Vec::with_capacity(32 + h * w);
    write!(pgm, "P5\n{w} {h}\n255\n")?;
    for &v in map.adapted.data() {
        pgm.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path.with_extension("pgm"), pgm)?;
    Ok(())
}

/// Read back the adapted map written by `export_saliency`.
pub fn import_saliency(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = || Error::invalid(format!("import_saliency: malformed file at {}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(bad)?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad())?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "SALV1" {
        return Err(bad());
    }
    let h: usize = parts[1].parse().map_err(|_| bad())?;
    let w: usize = parts[2].parse().map_err(|_| bad())?;
    let payload = &bytes[nl + 1..];
    if payload.len() != 8 * h * w {
        return Err(bad());
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Convenience used by the CLI `explain` subcommand.
pub fn explain_image(
    net: &Network,
    data: &SyntheticDataset,
    image_id: usize,
    class: Option<usize>,
    cfg: &RunConfig,
) -> Result<SaliencyMap> {
    if image_id >= data.images.len() {
        return Err(Error::invalid(format!(
            "image id {image_id} out of range [0, {})",
            data.images.len()
        )));
    }
    let class = class.unwrap_or(data.labels[image_id]);
    if cfg.method == "opti-cam" {
        let (map, _) = opti_cam(net, &data.images[image_id], class, &cfg.layer, &cfg.opti)?;
        Ok(map)
    } else {
        compute_saliency(net, &data.images[image_id], class, &cfg.layer, &cfg.method, &cfg.opti)
    }
}

// Re-export for convenience in tests and the CLI.
pub use crate::saliency::Selector;
