use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rcs_core::data::{Dataset, ImagePool};
use rcs_core::io::{read_image, write_image};
use rcs_core::metrics::luma;
use rcs_core::train::{self, grad_equivalence_audit, log_csv, memory_sweep, LogRow};
use rcs_core::{Checkpoint, EvalMode, Measurement, Model, Precision, Real, SamplingOperator, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "rcs", version, about = "Block compressed sensing with invertible diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build an orthonormal block sampling matrix and write it as RCSA.
    GenMatrix {
        #[arg(long, default_value_t = 8)]
        block: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Reload the written file and check that its rows are orthonormal.
        #[arg(long)]
        verify: bool,
    },
    /// Sample an image with a stored matrix.
    Measure {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from measurements with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Matrix file; by default the operator is rebuilt from the seed
        /// recorded in the measurements.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Score reconstructions of every PGM/PPM image in a directory.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sampling ratio; defaults to the training ratio.
        #[arg(long)]
        ratio: Option<f64>,
        /// Operator seed; defaults to the training operator.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Peak activation memory of cached versus recomputed sampling.
    BenchMem {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 12)]
        tmax: usize,
        /// Explicit comma-separated step counts instead of 1, 2, 4, ... tmax.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare cached and recomputed gradients per parameter group.
    AuditGrad {
        #[arg(long)]
        config: PathBuf,
        /// Pin every coupling weight to this value.
        #[arg(long, default_value_t = 0.5)]
        v: f64,
        /// Fail when the largest relative deviation exceeds this.
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::parse(&text)?)
}

fn sweep_steps(tmax: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = std::iter::successors(Some(1), |t| Some(t * 2)).take_while(|&t| t < tmax).collect();
    steps.push(tmax);
    steps
}

/// Crops to the largest extent divisible by both the block size and 2.
fn fit_to_blocks(img: &Tensor<f32>, block: usize) -> anyhow::Result<Tensor<f32>> {
    let step = if block % 2 == 0 { block } else { 2 * block };
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ch, cw) = (h / step * step, w / step * step);
    if ch == 0 || cw == 0 {
        bail!("image {h}x{w} is smaller than one {step}x{step} tile");
    }
    Ok(Tensor::from_fn(&[1, ch, cw], |i| img.data()[(i / cw) * w + i % cw]))
}

fn reconstruct<R: Real>(ck: &Checkpoint, op: &SamplingOperator, y: &Measurement<f32>) -> anyhow::Result<Tensor<f32>> {
    let model = Model::<R>::from_checkpoint(ck)?;
    let out = model.reconstruct(op, &y.cast(), &mut model.inference_rng())?;
    Ok(out.map(|v| v.clamp(R::zero(), R::one())).cast())
}

fn eval<R: Real>(ck: &Checkpoint, op: &SamplingOperator, images: &[(String, Tensor<f32>)]) -> anyhow::Result<rcs_core::EvalReport> {
    Ok(Model::<R>::from_checkpoint(ck)?.evaluate(op, images, EvalMode::Luma)?)
}

fn print_row(row: &LogRow) {
    if let Some(p) = row.psnr_val {
        println!("iter {:>6}  loss {:.6}  psnr_val {:.3} dB  lr {:.3e}  peak {} B", row.iter, row.loss, p, row.lr, row.peak_bytes);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenMatrix { block, ratio, seed, out, verify } => {
            let op = SamplingOperator::build(block, ratio, seed)?;
            op.save(&out)?;
            println!("{}: block={block} ratio={ratio} M_blk={} N_blk={} seed={seed}", out.display(), op.m_blk(), op.n_blk());
            if verify {
                let err = SamplingOperator::load(&out)?.orthonormality_error::<f64>();
                println!("verify: max |A·Aᵀ − I| = {err:.3e}");
                if err >= 1e-6 {
                    bail!("stored rows are not orthonormal within 1e-6");
                }
            }
        }
        Cmd::Measure { matrix, input, out } => {
            let op = SamplingOperator::load(&matrix)?;
            let img = read_image(&input)?;
            let y = op.sample(&img)?;
            fs::write(&out, y.to_bytes()?)?;
            println!("{}: {} measurements of a {:?} image", out.display(), y.len(), img.shape());
        }
        Cmd::Reconstruct { ckpt, meas, out, matrix } => {
            let ck = Checkpoint::load(&ckpt)?;
            let y = Measurement::<f32>::from_bytes(&fs::read(&meas).with_context(|| format!("reading {}", meas.display()))?)?;
            let op = match matrix {
                Some(path) => SamplingOperator::load(path)?,
                None => SamplingOperator::build(y.block_size(), y.ratio(), y.operator_seed())?,
            };
            let img = match ck.config.precision {
                Precision::F32 => reconstruct::<f32>(&ck, &op, &y)?,
                Precision::F64 => reconstruct::<f64>(&ck, &op, &y)?,
            };
            write_image(&out, &img)?;
            println!("{}: {:?}", out.display(), img.shape());
        }
        Cmd::Train { config, quiet } => {
            let cfg = load_config(&config)?;
            let dataset = match &cfg.data_dir {
                Some(dir) => Dataset::with_pool(cfg.patch, ImagePool::load_dir(dir, cfg.patch)?),
                None => Dataset::synthetic(cfg.patch),
            };
            let progress = |r: &LogRow| {
                if !quiet {
                    print_row(r)
                }
            };
            let (baseline, fin, log) = match cfg.precision {
                Precision::F32 => {
                    let o = train::train::<f32>(&cfg, &dataset, progress)?;
                    (o.baseline_psnr, o.final_psnr, o.log)
                }
                Precision::F64 => {
                    let o = train::train::<f64>(&cfg, &dataset, progress)?;
                    (o.baseline_psnr, o.final_psnr, o.log)
                }
            };
            if cfg.metrics.is_none() && !quiet {
                print!("{}", log_csv(&log));
            }
            println!("baseline_psnr={baseline:.4} final_psnr={fin:.4} iterations={}", cfg.iterations);
        }
        Cmd::Eval { dir, ckpt, ratio, seed, csv } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.config;
            let op = SamplingOperator::build(
                cfg.block,
                ratio.unwrap_or(cfg.ratio),
                seed.unwrap_or_else(|| rcs_core::Rng::derive(cfg.seed, "matrix").seed()),
            )?;
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e, "pgm" | "ppm" | "rcsi")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no .pgm, .ppm or .rcsi images in {}", dir.display());
            }
            let mut images = Vec::new();
            for p in &paths {
                let img = read_image(p).with_context(|| format!("reading {}", p.display()))?;
                let img = if img.shape()[0] == 3 { luma(&img)? } else { img };
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                images.push((name, fit_to_blocks(&img, cfg.block)?));
            }
            let report = match cfg.precision {
                Precision::F32 => eval::<f32>(&ck, &op, &images)?,
                Precision::F64 => eval::<f64>(&ck, &op, &images)?,
            };
            print!("{}", report.to_table());
            if let Some(path) = csv {
                fs::write(path, report.to_csv())?;
            }
        }
        Cmd::BenchMem { config, tmax, steps, out } => {
            let cfg = load_config(&config)?;
            let steps = if steps.is_empty() { sweep_steps(tmax) } else { steps };
            if steps.contains(&0) {
                bail!("step counts must be positive");
            }
            let sweep = match cfg.precision {
                Precision::F32 => memory_sweep::<f32>(&cfg, &steps)?,
                Precision::F64 => memory_sweep::<f64>(&cfg, &steps)?,
            };
            match out {
                Some(path) => fs::write(path, sweep.to_csv())?,
                None => print!("{}", sweep.to_csv()),
            }
        }
        Cmd::AuditGrad { config, v, tol } => {
            let cfg = load_config(&config)?;
            let audit = match cfg.precision {
                Precision::F32 => grad_equivalence_audit::<f32>(&cfg, Some(v))?,
                Precision::F64 => grad_equivalence_audit::<f64>(&cfg, Some(v))?,
            };
            print!("{}", audit.to_table());
            println!("max_rel={:.3e}", audit.max_rel());
            if let Some(tol) = tol {
                if audit.max_rel() > tol {
                    bail!("gradient deviation {:.3e} exceeds {tol:.3e}", audit.max_rel());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.downcast_ref::<rcs_core::Error>().map_or("error", rcs_core::Error::kind);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("rcs: error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
