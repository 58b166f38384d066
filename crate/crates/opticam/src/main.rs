use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opticam::dataset::{generate_synthetic_dataset, Split, SyntheticDataset};
use opticam::harness::{
    ablation_grid, ablation_table, explain_image, export_saliency, run_evaluation, sanity_check,
    RunConfig,
};
use opticam::nn::{self, build_toy_cnn, TrainConfig};
use opticam::saliency::{Normalization, Objective, Selector};
use opticam::Result;

#[derive(Parser)]
#[command(name = "opticam", about = "Saliency attribution and evaluation on a toy CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Images per class
        #[arg(long, default_value_t = 300)]
        n: usize,
        /// Image side length
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy CNN on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Weights file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and export one saliency map
    Explain {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: usize,
        /// Target class; defaults to the image's label
        #[arg(long)]
        class: Option<usize>,
        /// Output saliency file (a companion .pgm is written alongside)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Evaluate a method over the test split
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of ad,ag,ai,id,loc,sel
        #[arg(long, default_value = "ad,ag,ai", value_delimiter = ',')]
        metrics: Vec<String>,
        /// Insertion/deletion steps; 0 means the image side length
        #[arg(long, default_value_t = 0)]
        id_steps: usize,
        /// BoxAcc thresholds eta (comma-separated)
        #[arg(long, value_delimiter = ',')]
        box_eta: Option<Vec<f64>>,
        /// BoxAcc IoU thresholds delta (comma-separated)
        #[arg(long, value_delimiter = ',')]
        box_delta: Option<Vec<f64>>,
        /// Selectivity exponents (comma-separated)
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for the reports
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Parameter-randomization sanity check
    Sanity {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Randomization stages (number of layers from the output)
        #[arg(long, default_value = "0,1,2,3", value_delimiter = ',')]
        stages: Vec<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output JSON file
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Objective x normalization ablation grid for the optimized method
    Ablate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output CSV file
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, default_value = "opti-cam")]
    method: String,
    #[arg(long, default_value = "feat")]
    layer: String,
    #[arg(long, default_value = "mask")]
    objective: String,
    #[arg(long, default_value = "range")]
    norm: String,
    #[arg(long, default_value = "logit")]
    selector: String,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

impl MethodArgs {
    fn into_config(self, out_dir: PathBuf, seed: u64) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(&self.method, out_dir);
        cfg.layer = self.layer;
        cfg.seed = seed;
        cfg.opti.objective = Objective::parse(&self.objective)?;
        cfg.opti.normalization = Normalization::parse(&self.norm)?;
        cfg.opti.selector = Selector::parse(&self.selector)?;
        cfg.opti.learning_rate = self.lr;
        cfg.opti.max_iterations = self.iters;
        cfg.opti.tolerance = self.tol;
        Ok(cfg)
    }
}

fn require_file(path: &std::path::Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(opticam::Error::invalid(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, size, classes, out } => {
            let data = generate_synthetic_dataset(seed, n, size, classes)?;
            data.save(&out)?;
            println!(
                "wrote {} images ({} per class, {} classes) to {}",
                data.images.len(),
                n,
                classes,
                out.display()
            );
        }
        Command::Train { data, epochs, lr, momentum, seed, out } => {
            require_file(&data, "dataset")?;
            let ds = SyntheticDataset::load(&data)?;
            let net = build_toy_cnn(
                ds.class_count,
                (3, ds.image_size, ds.image_size),
                seed,
            )?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                momentum,
                seed,
                ..TrainConfig::default()
            };
            let (trained, accuracy) = nn::train(
                &net,
                &ds.labeled_set(Split::Train),
                &ds.labeled_set(Split::Val),
                &cfg,
            )?;
            nn::save_weights(&trained, &out)?;
            println!("held-out accuracy {accuracy:.4}; weights written to {}", out.display());
        }
        Command::Explain { weights, data, image_id, class, out, method } => {
            require_file(&weights, "weights file")?;
            require_file(&data, "dataset")?;
            let net = nn::load_weights(&weights)?;
            let ds = SyntheticDataset::load(&data)?;
            let cfg = method.into_config(PathBuf::new(), 42)?;
            let map = explain_image(&net, &ds, image_id, class, &cfg)?;
            export_saliency(&map, &out)?;
            println!(
                "saliency ({}, class {}) written to {}",
                map.method,
                map.target_class,
                out.display()
            );
        }
        Command::Eval {
            weights,
            data,
            metrics,
            id_steps,
            box_eta,
            box_delta,
            alphas,
            workers,
            seed,
            out,
            method,
        } => {
            require_file(&weights, "weights file")?;
            require_file(&data, "dataset")?;
            let net = nn::load_weights(&weights)?;
            let ds = SyntheticDataset::load(&data)?;
            let mut cfg = method.into_config(out.clone(), seed)?;
            cfg.metrics = metrics;
            cfg.id_steps = id_steps;
            cfg.workers = workers;
            if let Some(e) = box_eta {
                cfg.box_etas = e;
            }
            if let Some(d) = box_delta {
                cfg.box_deltas = d;
            }
            if let Some(a) = alphas {
                cfg.alphas = a;
            }
            let result = run_evaluation(&net, &ds, &cfg)?;
            for (k, v) in &result.metrics {
                println!("{k} = {v:.6}");
            }
            println!("reports written to {}", out.display());
        }
        Command::Sanity { weights, data, stages, seed, out, method } => {
            require_file(&weights, "weights file")?;
            require_file(&data, "dataset")?;
            let net = nn::load_weights(&weights)?;
            let ds = SyntheticDataset::load(&data)?;
            let cfg = method.into_config(PathBuf::new(), seed)?;
            let rows = sanity_check(&net, &ds, &cfg, &stages)?;
            std::fs::write(&out, serde_json::to_string_pretty(&rows)?)?;
            for r in &rows {
                println!(
                    "stage {}: spearman {:.4}, |spearman| {:.4}, ssim {:.4}",
                    r.stage, r.spearman, r.spearman_abs, r.ssim
                );
            }
        }
        Command::Ablate { weights, data, seed, out } => {
            require_file(&weights, "weights file")?;
            require_file(&data, "dataset")?;
            let net = nn::load_weights(&weights)?;
            let ds = SyntheticDataset::load(&data)?;
            let cfg = RunConfig {
                seed,
                ..RunConfig::new("opti-cam", PathBuf::new())
            };
            let rows = ablation_grid(
                &net,
                &ds,
                &cfg,
                &[Objective::Mask, Objective::Diff, Objective::IOMask, Objective::IODiff],
                &[Normalization::Range, Normalization::Max, Normalization::Sigmoid],
            )?;
            let table = ablation_table(&rows);
            std::fs::write(&out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
