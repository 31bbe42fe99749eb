use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use adaptmask::data::{generate_stick_figures, load_coco_keypoints, load_synthetic, save_synthetic, SampleRecord, StickFigureConfig};
use adaptmask::masking::allocate_mask_count;
use adaptmask::nn::Backbone;
use adaptmask::plot::emit_plots;
use adaptmask::train::{evaluate, fit, predict_heatmaps, Checkpoint, Method, Protocol, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "adaptmask", version, about = "Semi-supervised pose estimation with adaptive keypoint masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stick-figure dataset.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0.15)]
        occlusion_frac: f64,
        #[arg(long, default_value_t = 0.15)]
        low_contrast_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        /// TOML config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        /// Number of labeled training samples.
        #[arg(long)]
        labels: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from ckpt-last in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding manifest.json or annotations.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pck")]
        protocol: Protocol,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the per-sample mask allocation as JSON lines.
    AllocateMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render loss, accuracy and mask-histogram charts for run directories.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Defaults to plots/ inside the first run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_dataset(dir: &Path, input_size: (usize, usize)) -> Result<Vec<SampleRecord>> {
    if dir.join("manifest.json").exists() {
        return Ok(load_synthetic(dir)?.0);
    }
    let ann = dir.join("annotations.json");
    if ann.exists() {
        let images = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
        return Ok(load_coco_keypoints(&ann, &images, input_size)?);
    }
    bail!("{} holds neither manifest.json nor annotations.json", dir.display())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            count,
            occlusion_frac,
            low_contrast_frac,
            seed,
            size,
            out,
        } => {
            let cfg = StickFigureConfig {
                image_size: (size, size),
                occlusion_frac,
                low_contrast_frac,
            };
            let records = generate_stick_figures(count, &cfg, seed)?;
            save_synthetic(&out, &records, &cfg, seed)?;
            log::info!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            config,
            method,
            labels,
            out,
            seed,
            epochs,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(n) = labels {
                cfg.data.labeled_count = n;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.resume |= resume;
            cfg.validate()?;
            let dir = fit(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            ckpt,
            data,
            protocol,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.meta.config;
            let backbone = Backbone::new(cfg.backbone.clone())?;
            let records = load_dataset(&data, cfg.backbone.input_size)?;
            let metrics = evaluate(
                &backbone,
                &ck.params,
                &records,
                cfg.backbone.stride()?,
                protocol,
                cfg.eval.pck_threshold,
            )?;
            let mut w = output(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &metrics)?;
            writeln!(w)?;
        }
        Command::AllocateMasks { ckpt, data, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.meta.config;
            let backbone = Backbone::new(cfg.backbone.clone())?;
            let records = load_dataset(&data, cfg.backbone.input_size)?;
            let images: Vec<_> = records.iter().map(|r| &r.image).collect();
            let maps = predict_heatmaps(&backbone, &ck.params, &images, cfg.eval.batch)?;
            let mut w = output(out.as_deref())?;
            for (r, m) in records.iter().zip(&maps) {
                let resp: Vec<f64> = m
                    .outer_iter()
                    .map(|p| p.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64)
                    .collect();
                let b = allocate_mask_count(&resp, &cfg.mask)?;
                let line = json!({
                    "sample_id": r.id(),
                    "n_simple": b.n_simple,
                    "count": b.count,
                    "extreme": b.extreme,
                    "relative_response": b.relative_response,
                });
                writeln!(w, "{line}")?;
            }
        }
        Command::Plot { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].join("plots"));
            for p in emit_plots(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
