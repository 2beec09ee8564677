//! Invertible wiring of layer sequences.
//!
//! A chain of layers `L_1 … L_n` is wired as
//!
//! ```text
//! x⁰ = x,  h⁰ = w_in·x
//! xʲ = uⱼ·Lⱼ(xʲ⁻¹) + vⱼ·hʲ⁻¹,   hʲ = xʲ⁻¹,   uⱼ = 1 − vⱼ
//! out = xⁿ + w_out·hⁿ
//! ```
//!
//! and each step is inverted by `xʲ⁻¹ = hʲ`, `hʲ⁻¹ = (xʲ − uⱼ·Lⱼ(xʲ⁻¹)) / vⱼ`.
//! In [`CacheMode::Recompute`] only `(xⁿ, hⁿ)` survive the forward pass;
//! backward walks the chain from the end, regenerating each step's input and
//! activations, back-propagating through it and freeing it before moving on.

use std::rc::Rc;

use super::tape::{BackwardOp, Buffer, BufKind, Gradients, Ledger, Saved};
use super::{ParamSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest coupling weight `v` the inverse map accepts.
pub const V_MIN: f64 = 0.05;

/// One layer of a wired chain, evaluated on whatever tape it is handed.
pub type LayerFn<'a, R> = Box<dyn Fn(&mut Tape<'a, R>, &Var<R>) -> Result<Var<R>> + 'a>;

/// Activation policy inside invertible regions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CacheMode {
    /// Keep every intermediate activation for backward.
    #[default]
    Cached,
    /// Keep only the region's outputs; rebuild the rest during backward.
    Recompute,
}

#[inline]
fn couple<R: Real>(u: R, f: &[R], v: R, h: &[R]) -> Vec<R> {
    f.iter().zip(h).map(|(&f, &h)| u * f + v * h).collect()
}

#[inline]
fn decouple<R: Real>(x_next: &[R], u: R, f: &[R], v: R) -> Vec<R> {
    x_next.iter().zip(f).map(|(&x, &f)| (x - u * f) / v).collect()
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

fn check_v<R: Real>(v: R) -> Result<()> {
    if v.f64() < V_MIN - 1e-12 || v.f64() > 1.0 {
        return Err(Error::UnsafeCoupling(v.f64()));
    }
    Ok(())
}

fn eval_layer<'a, R: Real>(
    layer: &LayerFn<'a, R>,
    tape: &mut Tape<'a, R>,
    shape: &[usize],
    x: Rc<Buffer<R>>,
) -> Result<(Var<R>, Var<R>)> {
    let leaf = tape.input_buffer(shape.to_vec(), x);
    let f = layer(tape, &leaf)?;
    if f.shape() != shape {
        return Err(Error::shape("wired_chain", format!("layer maps {shape:?} to {:?}", f.shape())));
    }
    Ok((leaf, f))
}

struct CachedStep<'a, R: Real> {
    tape: Tape<'a, R>,
    leaf: Var<R>,
    f: Var<R>,
    f_saved: Saved<R>,
    h_prev: Saved<R>,
}

struct ChainOp<'a, R: Real> {
    mode: CacheMode,
    shape: Vec<usize>,
    w_in: R,
    w_out: R,
    v: Vec<R>,
    layers: Vec<LayerFn<'a, R>>,
    steps: Vec<CachedStep<'a, R>>,
    input: Option<Saved<R>>,
    x_last: Saved<R>,
    h_last: Saved<R>,
    params: &'a ParamSet<R>,
    ledger: Ledger,
}

impl<'a, R: Real> ChainOp<'a, R> {
    /// Back-propagates `seed` through one layer evaluation, merging parameter
    /// gradients into `acc` and returning the gradient at the layer input.
    fn layer_vjp(tape: &mut Tape<'a, R>, leaf: &Var<R>, f: &Var<R>, seed: Vec<R>, acc: &mut Gradients<R>) -> Result<Option<Vec<R>>> {
        if !f.tracked() {
            return Ok(None);
        }
        let mut inner = tape.backward_seeded(f, seed)?;
        let gin = inner.take_input(leaf);
        acc.merge_params(inner);
        Ok(gin)
    }
}

impl<'a, R: Real> BackwardOp<R> for ChainOp<'a, R> {
    fn name(&self) -> &'static str {
        "wired_chain"
    }

    fn backward(self: Box<Self>, g: &[R], needs: &[bool], acc: &mut Gradients<R>) -> Result<Vec<Option<Vec<R>>>> {
        let ChainOp { mode, shape, w_in, w_out, v, layers, mut steps, input, x_last, h_last, params, ledger } = *self;
        let n = layers.len();
        let mut gx = g.to_vec();
        let mut gh: Vec<R> = g.iter().map(|&x| x * w_out).collect();
        let d_wout = dot(g, &h_last);
        let mut dv = vec![R::zero(); n];

        let x0 = match mode {
            CacheMode::Cached => {
                drop((x_last, h_last));
                for j in (0..n).rev() {
                    let mut step = steps.pop().expect("one cached step per layer");
                    let u = R::one() - v[j];
                    dv[j] = dot(&gx, &step.h_prev) - dot(&gx, &step.f_saved);
                    let seed = gx.iter().map(|&x| x * u).collect();
                    let gin = Self::layer_vjp(&mut step.tape, &step.leaf, &step.f, seed, acc)?;
                    let next_gh = gx.iter().map(|&x| x * v[j]).collect();
                    if let Some(gin) = gin {
                        gh.iter_mut().zip(&gin).for_each(|(a, &b)| *a += b);
                    }
                    gx = std::mem::replace(&mut gh, next_gh);
                }
                input.expect("cached chain keeps its input")
            }
            CacheMode::Recompute => {
                let mut x_cur = x_last;
                let mut h_cur = h_last;
                for j in (0..n).rev() {
                    check_v(v[j])?;
                    let u = R::one() - v[j];
                    let mut tape = Tape::with_ledger(params, ledger.clone(), true);
                    let (leaf, f) = eval_layer(&layers[j], &mut tape, &shape, h_cur.buffer().clone())?;
                    let h_prev = decouple(&x_cur, u, f.value(), v[j]);
                    if !h_prev.iter().all(|x| x.is_finite()) {
                        return Err(Error::NonFinite { op: "wired_inverse" });
                    }
                    dv[j] = dot(&gx, &h_prev) - dot(&gx, f.value());
                    let h_prev = Saved::from_vec(h_prev, &ledger);
                    let seed = gx.iter().map(|&x| x * u).collect();
                    let gin = Self::layer_vjp(&mut tape, &leaf, &f, seed, acc)?;
                    drop((tape, leaf, f));
                    let next_gh = gx.iter().map(|&x| x * v[j]).collect();
                    if let Some(gin) = gin {
                        gh.iter_mut().zip(&gin).for_each(|(a, &b)| *a += b);
                    }
                    gx = std::mem::replace(&mut gh, next_gh);
                    x_cur = std::mem::replace(&mut h_cur, h_prev);
                }
                drop(h_cur);
                x_cur
            }
        };

        let d_win = dot(&gh, &x0);
        drop(x0);
        let mut grads = Vec::with_capacity(3 + n);
        grads.push(needs[0].then(|| gx.iter().zip(&gh).map(|(&a, &b)| a + w_in * b).collect()));
        grads.push(needs[1].then(|| vec![d_win]));
        grads.push(needs[2].then(|| vec![d_wout]));
        grads.extend(dv.into_iter().zip(&needs[3..]).map(|(d, &need)| need.then(|| vec![d])));
        Ok(grads)
    }

    fn visit_saved(&self, visit: &mut dyn FnMut(&Saved<R>)) {
        if let Some(input) = &self.input {
            visit(input);
        }
        visit(&self.x_last);
        visit(&self.h_last);
        for step in &self.steps {
            visit(&step.f_saved);
            visit(&step.h_prev);
            step.tape.visit_saved(visit);
        }
    }
}

impl<'a, R: Real> Tape<'a, R> {
    /// Runs `layers` as one invertible region, see the module docs.
    ///
    /// `w_in`, `w_out` and every entry of `v` are scalar vars; the same var
    /// may appear several times in `v`. Recompute mode refuses `v < 0.05`.
    pub fn wired_chain(
        &mut self,
        input: &Var<R>,
        w_in: &Var<R>,
        w_out: &Var<R>,
        v: &[Var<R>],
        layers: Vec<LayerFn<'a, R>>,
        mode: CacheMode,
    ) -> Result<Var<R>> {
        if v.len() != layers.len() {
            return Err(Error::invalid(format!("{} coupling weights for {} layers", v.len(), layers.len())));
        }
        if [w_in, w_out].into_iter().chain(v).any(|s| s.numel() != 1) {
            return Err(Error::shape("wired_chain", "coupling weights must be scalars"));
        }
        let mut inputs: Vec<&Var<R>> = vec![input, w_in, w_out];
        inputs.extend(v);
        let tracked = self.recording && inputs.iter().any(|x| x.tracked());
        let vs: Vec<R> = v.iter().map(Var::item).collect();
        if tracked && mode == CacheMode::Recompute {
            vs.iter().try_for_each(|&x| check_v(x))?;
        }
        let (wi, wo) = (w_in.item(), w_out.item());
        let shape = input.shape().to_vec();
        let cache = tracked && mode == CacheMode::Cached;

        let mut x_buf = input.buffer().clone();
        let mut h_buf = Rc::new(Buffer::new(input.value().iter().map(|&x| x * wi).collect(), BufKind::Activation));
        let mut steps = Vec::new();
        for (layer, &vj) in layers.iter().zip(&vs) {
            let mut tape = self.child(cache);
            let (leaf, f) = eval_layer(layer, &mut tape, &shape, x_buf.clone())?;
            let next = couple(R::one() - vj, f.value(), vj, h_buf.data());
            if !next.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "wired_chain" });
            }
            if cache {
                let f_saved = Saved::of(&f, &self.ledger);
                steps.push(CachedStep { tape, leaf, f, f_saved, h_prev: Saved::new(&h_buf, &self.ledger) });
            }
            h_buf = std::mem::replace(&mut x_buf, Rc::new(Buffer::new(next, BufKind::Activation)));
        }
        let out: Vec<R> = x_buf.data().iter().zip(h_buf.data()).map(|(&x, &h)| x + wo * h).collect();

        let params = self.params();
        self.record("wired_chain", shape.clone(), out, &inputs, move |_, ledger| {
            Box::new(ChainOp {
                mode,
                shape,
                w_in: wi,
                w_out: wo,
                v: vs,
                layers,
                steps,
                input: (mode == CacheMode::Cached).then(|| Saved::of(input, ledger)),
                x_last: Saved::new(&x_buf, ledger),
                h_last: Saved::new(&h_buf, ledger),
                params,
                ledger: ledger.clone(),
            })
        })
    }
}

fn layer_on_tensor<'a, R: Real>(tape: &mut Tape<'a, R>, layer: &LayerFn<'a, R>, x: &Tensor<R>) -> Result<Vec<R>> {
    let xv = tape.constant(x);
    let f = layer(tape, &xv)?;
    if f.shape() != x.shape() {
        return Err(Error::shape("coupling", format!("layer maps {:?} to {:?}", x.shape(), f.shape())));
    }
    Ok(f.value().to_vec())
}

fn pair_shapes<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("coupling", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// One coupling step `(x, h) ↦ (u·L(x) + v·h, x)` with `u = 1 − v`.
pub fn coupling_forward<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    layer: &LayerFn<'a, R>,
    v: R,
    x: &Tensor<R>,
    h: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    pair_shapes(x, h)?;
    let f = layer_on_tensor(tape, layer, x)?;
    let next = couple(R::one() - v, &f, v, h.data());
    Ok((Tensor::new(x.shape().to_vec(), next)?, x.clone()))
}

/// Inverse of [`coupling_forward`]: `(x', h') ↦ (h', (x' − u·L(h')) / v)`.
pub fn coupling_inverse<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    layer: &LayerFn<'a, R>,
    v: R,
    x_next: &Tensor<R>,
    h_next: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    check_v(v)?;
    pair_shapes(x_next, h_next)?;
    let f = layer_on_tensor(tape, layer, h_next)?;
    let h = decouple(x_next.data(), R::one() - v, &f, v);
    Ok((h_next.clone(), Tensor::new(h_next.shape().to_vec(), h)?))
}

/// Recovers the chain's internal input pair `(x⁰, h⁰)` from `(xⁿ, hⁿ)` by
/// inverting the layers last to first.
pub fn chain_inverse<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    layers: &[LayerFn<'a, R>],
    v: &[R],
    x_last: &Tensor<R>,
    h_last: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    if v.len() != layers.len() {
        return Err(Error::invalid(format!("{} coupling weights for {} layers", v.len(), layers.len())));
    }
    let mut pair = (x_last.clone(), h_last.clone());
    for (layer, &vj) in layers.iter().zip(v).rev() {
        pair = coupling_inverse(tape, layer, vj, &pair.0, &pair.1)?;
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, ParamSet};

    fn doubling<'a>() -> LayerFn<'a, f64> {
        Box::new(|tape, x| tape.affine(x, 2.0, 0.0))
    }

    #[test]
    fn scalar_coupling_arithmetic() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::no_grad(&params);
        let (x, h) = (Tensor::scalar(4.0), Tensor::scalar(2.0));
        let (xn, hn) = coupling_forward(&mut tape, &doubling(), 0.5, &x, &h).unwrap();
        assert_eq!((xn.item(), hn.item()), (5.0, 4.0));
        let (xb, hb) = coupling_inverse(&mut tape, &doubling(), 0.5, &xn, &hn).unwrap();
        assert_eq!((xb.item(), hb.item()), (4.0, 2.0));
    }

    #[test]
    fn zero_v_reduces_to_plain_composition_and_refuses_inverse() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::no_grad(&params);
        let (x, h) = (Tensor::scalar(3.0), Tensor::scalar(-7.0));
        let (xn, hn) = coupling_forward(&mut tape, &doubling(), 0.0, &x, &h).unwrap();
        assert_eq!((xn.item(), hn.item()), (6.0, 3.0));
        assert!(matches!(coupling_inverse(&mut tape, &doubling(), 0.0, &xn, &hn), Err(Error::UnsafeCoupling(_))));
    }

    fn weighted_layers<'a>(w: ParamId) -> Vec<LayerFn<'a, f64>> {
        (0..3)
            .map(|k| -> LayerFn<'a, f64> {
                Box::new(move |tape: &mut Tape<'a, f64>, x: &Var<f64>| {
                    let wv = tape.param(w);
                    let s = tape.scale(x, &wv)?;
                    let r = tape.relu(&s)?;
                    tape.affine(&r, 1.0 + k as f64 * 0.1, 0.05)
                })
            })
            .collect()
    }

    fn run(mode: CacheMode) -> (f64, Vec<f64>, Vec<f64>, usize) {
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", Tensor::scalar(0.8));
        let theta = params.add("v", Tensor::scalar(0.3));
        let mut tape = Tape::new(&params);
        let x = tape.input(&Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 0.7));
        let tv = tape.param(theta);
        let v = tape.sigmoid(&tv).unwrap();
        let win = tape.scalar_const(1.0);
        let wout = tape.scalar_const(0.25);
        let vs = vec![v.clone(), v.clone(), v];
        let out = tape.wired_chain(&x, &win, &wout, &vs, weighted_layers(w), mode).unwrap();
        let loss = tape.sq_sum(&out).unwrap();
        let retained = tape.memory_report().live_bytes;
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(tape.memory_report().live_bytes, 0);
        let gx = grads.input(&x).unwrap().to_vec();
        (loss.item(), vec![grads.param(w).unwrap()[0], grads.param(theta).unwrap()[0]], gx, retained)
    }

    #[test]
    fn recompute_matches_cached_gradients() {
        let (lc, pc, xc, mem_c) = run(CacheMode::Cached);
        let (lr, pr, xr, mem_r) = run(CacheMode::Recompute);
        assert_eq!(lc.to_bits(), lr.to_bits());
        for (a, b) in pc.iter().chain(&xc).zip(pr.iter().chain(&xr)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
        assert!(mem_r < mem_c);
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        let eval = |w0: f64, t0: f64| {
            let mut params = ParamSet::<f64>::new();
            let w = params.add("w", Tensor::scalar(w0));
            let theta = params.add("v", Tensor::scalar(t0));
            let mut tape = Tape::no_grad(&params);
            let x = tape.constant(&Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 0.7));
            let tv = tape.param(theta);
            let v = tape.sigmoid(&tv).unwrap();
            let (win, wout) = (tape.scalar_const(1.0), tape.scalar_const(0.25));
            let out = tape
                .wired_chain(&x, &win, &wout, &[v.clone(), v.clone(), v], weighted_layers(w), CacheMode::Recompute)
                .unwrap();
            tape.sq_sum(&out).unwrap().item()
        };
        let (_, grads, _, _) = run(CacheMode::Recompute);
        let h = 1e-6;
        let fd_w = (eval(0.8 + h, 0.3) - eval(0.8 - h, 0.3)) / (2.0 * h);
        let fd_t = (eval(0.8, 0.3 + h) - eval(0.8, 0.3 - h)) / (2.0 * h);
        assert!((grads[0] - fd_w).abs() < 1e-6 * fd_w.abs().max(1.0));
        assert!((grads[1] - fd_t).abs() < 1e-6 * fd_t.abs().max(1.0));
    }
}
