//! The T-step reconstruction network.
//!
//! Each step `F_t` runs one deterministic DDIM update with a range-nullspace
//! projection:
//!
//! ```text
//! ε̂ = ε_Θ(x̂_t)
//! x̂_{0|t} = (x̂_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t
//! x̄_{0|t} = x̂_{0|t} + A†(y − A·x̂_{0|t})
//! x̂_{t−1} = √ᾱ_{t−1}·x̄_{0|t} + √(1−ᾱ_{t−1})·ε̂
//! ```
//!
//! In the invertible framework the steps are chained as
//! `x̂_{t−1} = u_t·F_t(x̂_t) + v_t·h_t`, `h_{t−1} = x̂_t`, starting from
//! `h_T = w_T·x̂_T` and ending with `x̂ = x̂_0 + w_0·h_0`.

use crate::cs::Physics;
use crate::error::{Error, Result};
use crate::estimator::{coupling_logit, coupling_of_logit, coupling_var, Estimator, EstimatorConfig};
use crate::rng::Rng;
use crate::schedule::{noise_init, DiffusionSchedule, InitMode};
use crate::tensor::{chain_inverse, coupling_forward, coupling_inverse, CacheMode, LayerFn, ParamId, ParamSet, Real, Tape, Tensor, Var};

/// One DDNM step from `x` with a given noise estimate.
///
/// `alpha_bar_prev` is `None` at `t = 1`, where `ᾱ_0 = 1` and the noise term
/// vanishes.
pub fn ddnm_step<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    phys: &'a Physics<'a, R>,
    alpha_bar: &Var<R>,
    alpha_bar_prev: Option<&Var<R>>,
    x: &Var<R>,
    eps: &Var<R>,
) -> Result<Var<R>> {
    if alpha_bar.item() <= R::zero() {
        return Err(Error::invalid("alpha_bar is zero"));
    }
    let noise_std = tape.affine(alpha_bar, -R::one(), R::one())?;
    let noise_std = tape.sqrt(&noise_std)?;
    let noise = tape.scale(eps, &noise_std)?;
    let signal = tape.sub(x, &noise)?;
    let root = tape.sqrt(alpha_bar)?;
    let inv = tape.recip(&root)?;
    let x0 = tape.scale(&signal, &inv)?;
    let xbar = tape.rnd_project(phys, &x0)?;
    let Some(prev) = alpha_bar_prev else {
        return Ok(xbar);
    };
    let a = tape.sqrt(prev)?;
    let b = tape.affine(prev, -R::one(), R::one())?;
    let b = tape.sqrt(&b)?;
    let xs = tape.scale(&xbar, &a)?;
    let es = tape.scale(eps, &b)?;
    tape.add(&xs, &es)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameworkConfig {
    pub steps: usize,
    /// Wire the sampling steps invertibly.
    pub invertible: bool,
    /// Activation policy for the step-level chain.
    pub mode: CacheMode,
    pub init: InitMode,
    pub estimator: EstimatorConfig,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        FrameworkConfig {
            steps: 2,
            invertible: true,
            mode: CacheMode::Recompute,
            init: InitMode::BackProjection,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Explicit step-level coupling scalars, indexed by `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Couplings {
    pub v: Vec<f64>,
    pub w_t: f64,
    pub w_0: f64,
}

impl Couplings {
    /// `(u_t, v_t) = (1, 0)` and `w_0 = 0`: the unwired composition.
    pub fn degenerate(steps: usize) -> Self {
        Couplings { v: vec![0.0; steps], w_t: 1.0, w_0: 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct StepWiring {
    w_t: ParamId,
    w_0: ParamId,
}

/// Shared estimator, schedule and coupling parameters of the T-step network.
#[derive(Clone, Debug)]
pub struct Framework {
    cfg: FrameworkConfig,
    schedule: DiffusionSchedule,
    estimator: Estimator,
    v: Vec<ParamId>,
    wiring: Option<StepWiring>,
}

impl Framework {
    /// Registers every learnable parameter: `α_t` logits at 0.5, `v_t` at
    /// 0.5, `w_T = 1`, `w_0 = 0`, and the estimator.
    pub fn new<R: Real>(params: &mut ParamSet<R>, cfg: FrameworkConfig, rng: &mut Rng) -> Result<Self> {
        let schedule = DiffusionSchedule::new(params, cfg.steps, 0.5)?;
        let estimator = Estimator::new(params, cfg.estimator.clone(), rng)?;
        let (v, wiring) = if cfg.invertible {
            let v = (1..=cfg.steps).map(|t| params.add(format!("fw.v.{t}"), Tensor::scalar(R::zero()))).collect();
            let w_t = params.add("fw.w_T", Tensor::scalar(R::one()));
            let w_0 = params.add("fw.w_0", Tensor::scalar(R::zero()));
            (v, Some(StepWiring { w_t, w_0 }))
        } else {
            (Vec::new(), None)
        };
        Ok(Framework { cfg, schedule, estimator, v, wiring })
    }

    pub fn config(&self) -> &FrameworkConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    /// Learned couplings, or `None` for an unwired framework.
    pub fn couplings<R: Real>(&self, params: &ParamSet<R>) -> Option<Couplings> {
        let w = self.wiring?;
        Some(Couplings {
            v: self.v.iter().map(|&id| coupling_of_logit(params.get(id).item().f64())).collect(),
            w_t: params.get(w.w_t).item().f64(),
            w_0: params.get(w.w_0).item().f64(),
        })
    }

    /// Overwrites the learned couplings; every `v_t` must lie in the
    /// learnable range `(0.05, 0.95)`.
    pub fn set_couplings<R: Real>(&self, params: &mut ParamSet<R>, c: &Couplings) -> Result<()> {
        let w = self.wiring.ok_or_else(|| Error::invalid("framework is not wired"))?;
        if c.v.len() != self.steps() {
            return Err(Error::invalid(format!("{} couplings for {} steps", c.v.len(), self.steps())));
        }
        for (&id, &v) in self.v.iter().zip(&c.v) {
            params.get_mut(id).data_mut()[0] = R::lit(coupling_logit(v)?);
        }
        params.get_mut(w.w_t).data_mut()[0] = R::lit(c.w_t);
        params.get_mut(w.w_0).data_mut()[0] = R::lit(c.w_0);
        Ok(())
    }

    /// `F_t(x̂_t)`.
    pub fn step<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, t: usize, x: &Var<R>) -> Result<Var<R>> {
        let eps = self.estimator.estimate(tape, phys, x)?;
        let ab = self.schedule.alpha_bar_var(tape, t)?;
        let prev = if t > 1 { Some(self.schedule.alpha_bar_var(tape, t - 1)?) } else { None };
        ddnm_step(tape, phys, &ab, prev.as_ref(), x, &eps)
    }

    /// `F_T, …, F_1` as chain layers.
    pub fn step_layers<'a, R: Real>(&'a self, phys: &'a Physics<'a, R>) -> Vec<LayerFn<'a, R>> {
        (1..=self.steps())
            .rev()
            .map(|t| -> LayerFn<'a, R> { Box::new(move |tape: &mut Tape<'a, R>, x: &Var<R>| self.step(tape, phys, t, x)) })
            .collect()
    }

    /// Starting point `x̂_T`. Noise init draws from `rng`, which is required
    /// in that mode.
    pub fn initial<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, rng: Option<&mut Rng>) -> Result<Var<R>> {
        match self.cfg.init {
            InitMode::BackProjection => {
                let ab = self.schedule.alpha_bar_var(tape, self.steps())?;
                let root = tape.sqrt(&ab)?;
                let aty = tape.constant(&phys.back_projection_tensor());
                tape.scale(&aty, &root)
            }
            InitMode::Noise => {
                let rng = rng.ok_or_else(|| Error::invalid("noise initialization needs a random stream"))?;
                Ok(tape.constant(&noise_init(&phys.shape(), rng)))
            }
        }
    }

    /// Runs all steps from `x_t`. `couplings` replaces the learned scalars of
    /// a wired framework; `v_t = 0` is accepted here unless recompute mode
    /// needs the inverse.
    pub fn run_from<'a, R: Real>(
        &'a self,
        tape: &mut Tape<'a, R>,
        phys: &'a Physics<'a, R>,
        x_t: &Var<R>,
        couplings: Option<&Couplings>,
    ) -> Result<Var<R>> {
        let layers = self.step_layers(phys);
        let Some(wiring) = self.wiring else {
            if couplings.is_some() {
                return Err(Error::invalid("couplings given for an unwired framework"));
            }
            let mut x = x_t.clone();
            for layer in &layers {
                x = layer(tape, &x)?;
            }
            return Ok(x);
        };
        let (w_t, w_0, v) = match couplings {
            Some(c) => {
                if c.v.len() != self.steps() {
                    return Err(Error::invalid(format!("{} couplings for {} steps", c.v.len(), self.steps())));
                }
                let v = c.v.iter().rev().map(|&v| tape.scalar_const(R::lit(v))).collect();
                (tape.scalar_const(R::lit(c.w_t)), tape.scalar_const(R::lit(c.w_0)), v)
            }
            None => {
                let v = self.v.iter().rev().map(|&id| coupling_var(tape, id)).collect::<Result<Vec<_>>>()?;
                (tape.param(wiring.w_t), tape.param(wiring.w_0), v)
            }
        };
        tape.wired_chain(x_t, &w_t, &w_0, &v, layers, self.cfg.mode)
    }

    /// Full reconstruction `x̂` from the measurements held by `phys`.
    pub fn reconstruct_var<'a, R: Real>(
        &'a self,
        tape: &mut Tape<'a, R>,
        phys: &'a Physics<'a, R>,
        rng: Option<&mut Rng>,
    ) -> Result<Var<R>> {
        let x_t = self.initial(tape, phys, rng)?;
        self.run_from(tape, phys, &x_t, None)
    }

    /// Inference without recording.
    pub fn reconstruct<R: Real>(&self, params: &ParamSet<R>, phys: &Physics<'_, R>, rng: Option<&mut Rng>) -> Result<Tensor<R>> {
        let mut tape = Tape::no_grad(params);
        Ok(self.reconstruct_var(&mut tape, phys, rng)?.to_tensor())
    }

    fn coupling_values<R: Real>(&self, couplings: &Couplings) -> Result<Vec<R>> {
        if couplings.v.len() != self.steps() {
            return Err(Error::invalid(format!("{} couplings for {} steps", couplings.v.len(), self.steps())));
        }
        Ok(couplings.v.iter().rev().map(|&v| R::lit(v)).collect())
    }

    /// `(x̂_T, h_T) ↦ (x̂_0, h_0)` through the wired steps.
    pub fn forward_pair<R: Real>(
        &self,
        params: &ParamSet<R>,
        phys: &Physics<'_, R>,
        couplings: &Couplings,
        x: &Tensor<R>,
        h: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let mut tape = Tape::no_grad(params);
        let vs = self.coupling_values::<R>(couplings)?;
        let mut pair = (x.clone(), h.clone());
        for (layer, &v) in self.step_layers(phys).iter().zip(&vs) {
            pair = coupling_forward(&mut tape, layer, v, &pair.0, &pair.1)?;
        }
        Ok(pair)
    }

    /// `(x̂_0, h_0) ↦ (x̂_T, h_T)`, inverting the steps one at a time.
    pub fn inverse_pair<R: Real>(
        &self,
        params: &ParamSet<R>,
        phys: &Physics<'_, R>,
        couplings: &Couplings,
        x: &Tensor<R>,
        h: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let mut tape = Tape::no_grad(params);
        let vs = self.coupling_values::<R>(couplings)?;
        chain_inverse(&mut tape, &self.step_layers(phys), &vs, x, h)
    }

    /// Inverse of step `t`: `(x̂_{t−1}, h_{t−1}) ↦ (x̂_t, h_t)` with
    /// `x̂_t = h_{t−1}` and `h_t = (x̂_{t−1} − u_t·F_t(x̂_t)) / v_t`.
    pub fn wired_inverse<R: Real>(
        &self,
        params: &ParamSet<R>,
        phys: &Physics<'_, R>,
        t: usize,
        v: f64,
        x_prev: &Tensor<R>,
        h_prev: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        let mut tape = Tape::no_grad(params);
        let layer: LayerFn<'_, R> = Box::new(move |tape, x| self.step(tape, phys, t, x));
        coupling_inverse(&mut tape, &layer, R::lit(v), x_prev, h_prev)
    }
}
