//! End-to-end training, evaluation and the verification harnesses.

mod adam;
mod audit;
mod checkpoint;

use std::fmt::Write as _;
use std::fs;

pub use adam::Adam;
pub use audit::{activate, grad_equivalence_audit, group_of, memory_sweep, GradAudit, GroupDeviation, MemoryRow, MemorySweep};
pub use checkpoint::{Checkpoint, StoredTensor};

use crate::config::TrainConfig;
use crate::cs::{Measurement, Physics, SamplingOperator};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{psnr, EvalMode, EvalReport};
use crate::rng::Rng;
use crate::sampler::Framework;
use crate::schedule::noised;
use crate::tensor::{Gradients, Ledger, ParamSet, Real, Tape, Tensor};

/// A framework together with its parameters and the config that built it.
#[derive(Clone, Debug)]
pub struct Model<R> {
    pub config: TrainConfig,
    pub framework: Framework,
    pub params: ParamSet<R>,
    pub iteration: u64,
}

impl<R: Real> Model<R> {
    /// Freshly initialised parameters, seeded from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let framework = Framework::new(&mut params, config.framework_config(), &mut Rng::derive(config.seed, "init"))?;
        Ok(Model { config: config.clone(), framework, params, iteration: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(&ck.config)?;
        ck.apply_to(&mut model.params)?;
        model.iteration = ck.iteration;
        Ok(model)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.config, self.iteration, &self.params)
    }

    /// The sampling operator used for training.
    pub fn operator(&self) -> Result<SamplingOperator> {
        SamplingOperator::build(self.config.block, self.config.ratio, Rng::derive(self.config.seed, "matrix").seed())
    }

    /// Deterministic stream for noise initialisation at inference.
    pub fn inference_rng(&self) -> Rng {
        Rng::derive(self.config.seed, "noise-init")
    }

    pub fn reconstruct(&self, op: &SamplingOperator, y: &Measurement<R>, rng: &mut Rng) -> Result<Tensor<R>> {
        let phys = Physics::new(op, y)?;
        self.framework.reconstruct(&self.params, &phys, Some(rng))
    }

    /// Samples `images` with `op`, reconstructs and scores them against the
    /// originals.
    pub fn evaluate(&self, op: &SamplingOperator, images: &[(String, Tensor<f32>)], mode: EvalMode) -> Result<EvalReport> {
        let mut rng = self.inference_rng();
        let mut report = EvalReport::default();
        for (name, img) in images {
            let x: Tensor<R> = img.cast();
            let y = op.sample(&x)?;
            let out = self.reconstruct(op, &y, &mut rng)?.map(|v| v.clamp(R::zero(), R::one()));
            report.push(name.clone(), &out, &x, mode)?;
        }
        Ok(report)
    }

    fn mean_psnr(&self, op: &SamplingOperator, images: &[Tensor<f32>]) -> Result<f64> {
        let named: Vec<_> = images.iter().enumerate().map(|(i, t)| (i.to_string(), t.clone())).collect();
        Ok(self.evaluate(op, &named, EvalMode::Luma)?.psnr_stats().0)
    }
}

/// Mean PSNR of the plain back-projection `A†y` over `images`.
pub fn baseline_psnr(op: &SamplingOperator, images: &[Tensor<f32>]) -> Result<f64> {
    let mut sum = 0.0;
    for img in images {
        let bp = op.back_project(&op.sample(img)?)?.map(|v| v.clamp(0.0, 1.0));
        sum += psnr(&bp, img, 1.0)?;
    }
    Ok(sum / images.len().max(1) as f64)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub psnr_val: Option<f64>,
    pub lr: f64,
    pub peak_bytes: usize,
}

pub const LOG_HEADER: &str = "iter,loss,psnr_val,lr,peak_bytes";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let p = r.psnr_val.map(|p| format!("{p:.6}")).unwrap_or_default();
        writeln!(s, "{},{:.9e},{p},{:e},{}", r.iter, r.loss, r.lr, r.peak_bytes).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<R> {
    pub model: Model<R>,
    pub log: Vec<LogRow>,
    pub baseline_psnr: f64,
    pub final_psnr: f64,
}

/// Learning rate for 1-based iteration `iter`.
pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    cfg.lr * 0.5f64.powi(((iter.max(1) - 1) / cfg.lr_halving) as i32)
}

fn sample_loss<R: Real>(
    model: &Model<R>,
    op: &SamplingOperator,
    x: &Tensor<R>,
    rng: &mut Rng,
) -> Result<(f64, Gradients<R>, usize)> {
    let phys = Physics::of_image(op, x)?;
    let ledger = Ledger::new();
    let mut tape = Tape::with_ledger(&model.params, ledger.clone(), true);
    let loss = if model.config.e2e {
        let out = model.framework.reconstruct_var(&mut tape, &phys, Some(rng))?;
        let target = tape.constant(x);
        tape.l1_mean(&out, &target)?
    } else {
        let t = 1 + rng.below(model.config.steps);
        let ab = model.framework.schedule().alpha_bar(&model.params, t)?;
        let eps = Tensor::new(x.shape().to_vec(), rng.normal_vec(x.numel()))?;
        let xt = tape.constant(&noised(x, ab, &eps)?);
        let pred = model.framework.estimator().estimate(&mut tape, &phys, &xt)?;
        let target = tape.constant(&eps);
        tape.mse(&pred, &target)?
    };
    let value = loss.item().f64();
    let grads = tape.backward(&loss)?;
    Ok((value, grads, ledger.report().peak_bytes))
}

/// Runs `config.iterations` Adam steps, evaluating on a held-out set every
/// `eval_every` iterations and at the end. `progress` sees each log row.
/// Writes the metrics log and checkpoint when the config names them.
pub fn train<R: Real>(config: &TrainConfig, dataset: &Dataset, mut progress: impl FnMut(&LogRow)) -> Result<TrainOutcome<R>> {
    if dataset.patch_size() != config.patch {
        return Err(Error::Config(format!("dataset patches are {}, config wants {}", dataset.patch_size(), config.patch)));
    }
    let mut model = Model::<R>::new(config)?;
    let op = model.operator()?;
    let held = dataset.held_out(config.seed, config.eval_images.max(1));
    let baseline = baseline_psnr(&op, &held)?;
    let mut data_rng = Rng::derive(config.seed, "data");
    let mut noise_rng = Rng::derive(config.seed, "train-noise");
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(config.iterations);
    let mut last_psnr = None;

    for iter in 1..=config.iterations {
        let lr = learning_rate(config, iter);
        let mut total: Option<Gradients<R>> = None;
        let (mut loss_sum, mut peak) = (0.0, 0);
        for _ in 0..config.batch {
            let x: Tensor<R> = dataset.draw(&mut data_rng).cast();
            let (loss, g, p) = sample_loss(&model, &op, &x, &mut noise_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iter, detail: format!("loss is {loss}") });
            }
            loss_sum += loss;
            peak = peak.max(p);
            match &mut total {
                Some(t) => t.merge_params(g),
                None => total = Some(g),
            }
        }
        let mut grads = total.expect("batch is positive");
        grads.scale(R::lit(1.0 / config.batch as f64));
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { iter, detail: format!("gradient norm is {norm}") });
        }
        if config.clip > 0.0 && norm > config.clip {
            grads.scale(R::lit(config.clip / norm));
        }
        adam.step(&mut model.params, &grads, lr);
        model.iteration = iter as u64;

        let eval_now = iter == config.iterations || (config.eval_every > 0 && iter % config.eval_every == 0);
        let psnr_val = if eval_now { Some(model.mean_psnr(&op, &held)?) } else { None };
        if psnr_val.is_some() {
            last_psnr = psnr_val;
        }
        let row = LogRow { iter, loss: loss_sum / config.batch as f64, psnr_val, lr, peak_bytes: peak };
        progress(&row);
        log.push(row);
    }

    let final_psnr = match last_psnr {
        Some(p) => p,
        None => model.mean_psnr(&op, &held)?,
    };
    if let Some(path) = &config.metrics {
        fs::write(path, log_csv(&log))?;
    }
    if let Some(path) = &config.checkpoint {
        model.checkpoint().save(path)?;
    }
    Ok(TrainOutcome { model, log, baseline_psnr: baseline, final_psnr })
}
