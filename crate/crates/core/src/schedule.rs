//! Learnable per-step diffusion coefficients.
//!
//! Step `t ∈ 1..=T` owns `α_t = 0.01 + 0.99·σ(θ_t)` and
//! `ᾱ_t = α_1·…·α_t`, with `ᾱ_0 = 1`.

use crate::cs::{Measurement, SamplingOperator};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

pub const ALPHA_MIN: f64 = 0.01;

/// Logit `θ` with `0.01 + 0.99·σ(θ) = alpha`.
pub fn alpha_logit(alpha: f64) -> Result<f64> {
    if !(alpha > ALPHA_MIN && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside ({ALPHA_MIN}, 1)")));
    }
    let p = (alpha - ALPHA_MIN) / (1.0 - ALPHA_MIN);
    Ok((p / (1.0 - p)).ln())
}

fn alpha_of_logit(theta: f64) -> f64 {
    ALPHA_MIN + (1.0 - ALPHA_MIN) / (1.0 + (-theta).exp())
}

/// `∏_{i ≤ t} α_i` over a plain list (`alphas[0]` is `α_1`).
pub fn alpha_bar_of(alphas: &[f64], t: usize) -> Result<f64> {
    if t > alphas.len() {
        return Err(Error::invalid(format!("step {t} outside 0..={}", alphas.len())));
    }
    Ok(alphas[..t].iter().product())
}

/// How the sampler's starting point `x̂_T` is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum InitMode {
    /// `x̂_T = √ᾱ_T · A†y`.
    #[default]
    BackProjection,
    /// `x̂_T ~ N(0, I)`.
    Noise,
}

#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    logits: Vec<ParamId>,
}

impl DiffusionSchedule {
    /// Registers `steps` coefficients, all starting at `init_alpha`.
    pub fn new<R: Real>(params: &mut ParamSet<R>, steps: usize, init_alpha: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let theta = alpha_logit(init_alpha)?;
        let logits = (1..=steps).map(|t| params.add(format!("schedule.alpha.{t}"), Tensor::scalar(R::lit(theta)))).collect();
        Ok(DiffusionSchedule { logits })
    }

    pub fn steps(&self) -> usize {
        self.logits.len()
    }

    pub fn logit_ids(&self) -> &[ParamId] {
        &self.logits
    }

    /// Current `α_1 … α_T`.
    pub fn alphas<R: Real>(&self, params: &ParamSet<R>) -> Vec<f64> {
        self.logits.iter().map(|&id| alpha_of_logit(params.get(id).item().f64())).collect()
    }

    pub fn set_alphas<R: Real>(&self, params: &mut ParamSet<R>, alphas: &[f64]) -> Result<()> {
        if alphas.len() != self.steps() {
            return Err(Error::invalid(format!("{} alphas for {} steps", alphas.len(), self.steps())));
        }
        for (&id, &a) in self.logits.iter().zip(alphas) {
            params.get_mut(id).data_mut()[0] = R::lit(alpha_logit(a)?);
        }
        Ok(())
    }

    pub fn alpha_bar<R: Real>(&self, params: &ParamSet<R>, t: usize) -> Result<f64> {
        alpha_bar_of(&self.alphas(params), t)
    }

    /// `α_t` as a differentiable scalar.
    pub fn alpha_var<R: Real>(&self, tape: &mut Tape<'_, R>, t: usize) -> Result<Var<R>> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        let theta = tape.param(self.logits[t - 1]);
        let s = tape.sigmoid(&theta)?;
        tape.affine(&s, R::lit(1.0 - ALPHA_MIN), R::lit(ALPHA_MIN))
    }

    /// `ᾱ_t` as a differentiable scalar; `ᾱ_0` is the constant 1.
    pub fn alpha_bar_var<R: Real>(&self, tape: &mut Tape<'_, R>, t: usize) -> Result<Var<R>> {
        if t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 0..={}", self.steps())));
        }
        let mut acc = tape.scalar_const(R::one());
        for i in 1..=t {
            let a = self.alpha_var(tape, i)?;
            acc = if i == 1 { a } else { tape.mul(&acc, &a)? };
        }
        Ok(acc)
    }

    /// `x_t = √ᾱ_t·x_0 + √(1 − ᾱ_t)·ε` with `ε` drawn from `rng`.
    pub fn forward_noising<R: Real>(&self, params: &ParamSet<R>, x0: &Tensor<R>, t: usize, rng: &mut Rng) -> Result<Tensor<R>> {
        let ab = self.alpha_bar(params, t)?;
        let eps = Tensor::new(x0.shape().to_vec(), rng.normal_vec(x0.numel()))?;
        noised(x0, ab, &eps)
    }
}

/// `√ᾱ·x_0 + √(1 − ᾱ)·ε`.
pub fn noised<R: Real>(x0: &Tensor<R>, alpha_bar: f64, eps: &Tensor<R>) -> Result<Tensor<R>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_noising", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = (R::lit(alpha_bar.sqrt()), R::lit((1.0 - alpha_bar).sqrt()));
    Tensor::new(x0.shape().to_vec(), x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect())
}

/// `√ᾱ_T · A†y`.
pub fn init_estimate<R: Real>(alpha_bar_t: f64, op: &SamplingOperator, y: &Measurement<R>) -> Result<Tensor<R>> {
    let s = R::lit(alpha_bar_t.sqrt());
    Ok(op.back_project(y)?.map(|v| v * s))
}

/// A standard normal starting point for `shape`.
pub fn noise_init<R: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<R> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_endpoints_and_products() {
        let mut params = ParamSet::<f64>::new();
        let s = DiffusionSchedule::new(&mut params, 3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(&params, 0).unwrap(), 1.0);
        assert!((s.alpha_bar(&params, 2).unwrap() - 0.25).abs() < 1e-12);
        assert!(s.alpha_bar(&params, 4).is_err());
    }

    #[test]
    fn alpha_bar_matches_loop_product_and_tape() {
        let mut params = ParamSet::<f64>::new();
        let s = DiffusionSchedule::new(&mut params, 5, 0.5).unwrap();
        let alphas = [0.9, 0.35, 0.7, 0.99, 0.05];
        s.set_alphas(&mut params, &alphas).unwrap();
        let mut tape = Tape::no_grad(&params);
        let mut running = 1.0;
        for t in 0..=5 {
            if t > 0 {
                running *= alphas[t - 1];
            }
            assert!((s.alpha_bar(&params, t).unwrap() - running).abs() < 1e-12);
            assert!((s.alpha_bar_var(&mut tape, t).unwrap().item() - running).abs() < 1e-12);
        }
        let ab: Vec<f64> = (0..=5).map(|t| s.alpha_bar(&params, t).unwrap()).collect();
        assert!(ab.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn initial_alpha_is_one_half() {
        assert!((alpha_of_logit(alpha_logit(0.5).unwrap()) - 0.5).abs() < 1e-15);
        assert!(alpha_logit(1.0).is_err());
    }

    #[test]
    fn init_estimate_scales_back_projection() {
        let op = SamplingOperator::from_rows(2, 0, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let y = Measurement::new(&op, &[1, 2, 2], vec![2.0f64, 0.0]).unwrap();
        assert_eq!(init_estimate(0.25, &op, &y).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        let zero = Measurement::new(&op, &[1, 2, 2], vec![0.0f64, 0.0]).unwrap();
        assert!(init_estimate(0.25, &op, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noising_endpoints() {
        let x0 = Tensor::from_fn(&[4], |i| i as f64);
        let zero = Tensor::zeros(&[4]);
        assert_eq!(noised(&x0, 1.0, &Tensor::full(&[4], 3.0)).unwrap(), x0);
        assert_eq!(noised(&x0, 0.25, &zero).unwrap().data(), &[0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn noise_variance_matches_schedule() {
        let mut params = ParamSet::<f64>::new();
        let s = DiffusionSchedule::new(&mut params, 1, 0.36).unwrap();
        let x0 = Tensor::zeros(&[100_000]);
        let xt = s.forward_noising(&params, &x0, 1, &mut Rng::new(5)).unwrap();
        let var = xt.data().iter().map(|v| v * v).sum::<f64>() / 1e5;
        assert!((var - 0.64).abs() < 0.01, "{var}");
    }

    #[test]
    fn noise_init_is_seeded() {
        let a: Tensor<f32> = noise_init(&[1, 4, 4], &mut Rng::new(2));
        let b: Tensor<f32> = noise_init(&[1, 4, 4], &mut Rng::new(2));
        assert_eq!(a, b);
    }
}
