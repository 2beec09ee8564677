//! Small U-Net noise estimator with invertible block groups and
//! measurement-physics injectors.
//!
//! ```text
//! in conv ─ down group ─┬─ stride-2 conv ─ mid group ─ upsample + conv ─┐
//!                       └──────────────── skip ──────────────────────── concat ─ merge conv ─ up group ─ out conv
//! ```
//!
//! Each group holds `blocks_per_group` residual blocks, each followed by an
//! injector when enabled. Groups are equidimensional and, when invertible,
//! are wired with one coupling weight `v` shared by their blocks plus an entry
//! scale `w_in` (init 1) and exit scale `w_out` (init 0). The output conv
//! starts at zero, so an untrained estimator predicts no noise.

use crate::cs::Physics;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{chain_inverse, coupling_forward, CacheMode, LayerFn, ParamId, ParamSet, Real, Tape, Tensor, Var};

/// Logit `θ` with `0.05 + 0.9·σ(θ) = v`.
pub fn coupling_logit(v: f64) -> Result<f64> {
    if !(v > 0.05 && v < 0.95) {
        return Err(Error::invalid(format!("coupling weight {v} outside (0.05, 0.95)")));
    }
    let p = (v - 0.05) / 0.9;
    Ok((p / (1.0 - p)).ln())
}

pub fn coupling_of_logit(theta: f64) -> f64 {
    0.05 + 0.9 / (1.0 + (-theta).exp())
}

/// The coupling weight stored as logit `id`, as a differentiable scalar.
pub fn coupling_var<R: Real>(tape: &mut Tape<'_, R>, id: ParamId) -> Result<Var<R>> {
    let theta = tape.param(id);
    let s = tape.sigmoid(&theta)?;
    tape.affine(&s, R::lit(0.9), R::lit(0.05))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EstimatorConfig {
    pub image_channels: usize,
    /// Feature channels at full and half resolution.
    pub channels: [usize; 2],
    pub blocks_per_group: usize,
    /// Hidden width of each residual block as a multiple of its channels.
    pub expansion: usize,
    pub injectors: bool,
    /// Wire block groups invertibly.
    pub invertible: bool,
    pub mode: CacheMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            image_channels: 1,
            channels: [16, 32],
            blocks_per_group: 2,
            expansion: 4,
            injectors: true,
            invertible: true,
            mode: CacheMode::Cached,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let [c0, c1] = self.channels;
        if self.image_channels == 0 || c0 == 0 || c1 == 0 || self.blocks_per_group == 0 || self.expansion == 0 {
            return Err(Error::Config("estimator extents must be positive".into()));
        }
        if c1 % 4 != 0 {
            return Err(Error::Config(format!("half-resolution channels {c1} must be divisible by 4 for the injectors")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

enum Init {
    /// `N(0, gain²/fan_in)`.
    Normal(f64),
    Zero,
}

impl Conv {
    fn new<R: Real>(params: &mut ParamSet<R>, rng: &mut Rng, name: &str, cin: usize, cout: usize, stride: usize, init: Init) -> Self {
        let n = cout * cin * 9;
        let data = match init {
            Init::Normal(gain) => {
                let std = gain / ((cin * 9) as f64).sqrt();
                rng.normal_vec::<f64>(n).into_iter().map(|z| R::lit(z * std)).collect()
            }
            Init::Zero => vec![R::zero(); n],
        };
        let w = params.add(format!("{name}.w"), Tensor::new(vec![cout, cin, 3, 3], data).expect("kernel shape"));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, stride }
    }

    fn apply<'a, R: Real>(&self, tape: &mut Tape<'a, R>, x: &Var<R>) -> Result<Var<R>> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.conv2d(x, &w, Some(&b), self.stride)
    }
}

/// `F_out = F_in + unshuffle_r(Conv₂([f, A†A·f, A†y]))` with
/// `f = Conv₁(shuffle_r(F_in))`.
#[derive(Clone, Copy, Debug)]
struct Injector {
    c1: Conv,
    c2: Conv,
    r: usize,
}

impl Injector {
    fn new<R: Real>(params: &mut ParamSet<R>, rng: &mut Rng, name: &str, channels: usize, r: usize, image_channels: usize) -> Self {
        let shuffled = channels / (r * r);
        Injector {
            c1: Conv::new(params, rng, &format!("{name}.c1"), shuffled, image_channels, 1, Init::Normal(1.0)),
            c2: Conv::new(params, rng, &format!("{name}.c2"), 3 * image_channels, shuffled, 1, Init::Zero),
            r,
        }
    }

    fn apply<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, x: &Var<R>) -> Result<Var<R>> {
        let up = tape.pixel_shuffle(x, self.r)?;
        let f = self.c1.apply(tape, &up)?;
        if f.shape() != phys.shape() {
            return Err(Error::shape("inject", format!("feature maps to {:?}, measured image is {:?}", f.shape(), phys.shape())));
        }
        let af = tape.gram(phys.operator(), &f)?;
        let aty = tape.constant_vec(phys.shape().to_vec(), phys.back_projection().to_vec());
        let cat = tape.concat(&[&f, &af, &aty])?;
        let g = self.c2.apply(tape, &cat)?;
        let down = tape.pixel_unshuffle(&g, self.r)?;
        tape.add(x, &down)
    }
}

/// Residual block `x + Conv₂(relu(Conv₁(x)))`, optionally followed by an
/// injector.
#[derive(Clone, Copy, Debug)]
struct Block {
    c1: Conv,
    c2: Conv,
    inj: Option<Injector>,
}

impl Block {
    fn apply<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, x: &Var<R>) -> Result<Var<R>> {
        let h = self.c1.apply(tape, x)?;
        let h = tape.relu(&h)?;
        let h = self.c2.apply(tape, &h)?;
        let r = tape.add(x, &h)?;
        match &self.inj {
            Some(inj) => inj.apply(tape, phys, &r),
            None => Ok(r),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Wiring {
    v: ParamId,
    w_in: ParamId,
    w_out: ParamId,
}

/// Which block group of the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupId {
    Down,
    Mid,
    Up,
}

#[derive(Clone, Debug)]
struct Group {
    blocks: Vec<Block>,
    wiring: Option<Wiring>,
}

impl Group {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Real>(params: &mut ParamSet<R>, rng: &mut Rng, name: &str, cfg: &EstimatorConfig, channels: usize, r: usize) -> Self {
        let hidden = channels * cfg.expansion;
        let blocks = (0..cfg.blocks_per_group)
            .map(|j| Block {
                c1: Conv::new(params, rng, &format!("{name}.{j}.res.c1"), channels, hidden, 1, Init::Normal(2f64.sqrt())),
                c2: Conv::new(params, rng, &format!("{name}.{j}.res.c2"), hidden, channels, 1, Init::Normal(0.2)),
                inj: cfg
                    .injectors
                    .then(|| Injector::new(params, rng, &format!("{name}.{j}.inj"), channels, r, cfg.image_channels)),
            })
            .collect();
        let wiring = cfg.invertible.then(|| Wiring {
            v: params.add(format!("{name}.v"), Tensor::scalar(R::zero())),
            w_in: params.add(format!("{name}.w_in"), Tensor::scalar(R::one())),
            w_out: params.add(format!("{name}.w_out"), Tensor::scalar(R::zero())),
        });
        Group { blocks, wiring }
    }

    fn layers<'a, R: Real>(&self, phys: &'a Physics<'a, R>) -> Vec<LayerFn<'a, R>> {
        self.blocks
            .iter()
            .map(|&block| -> LayerFn<'a, R> { Box::new(move |tape: &mut Tape<'a, R>, x: &Var<R>| block.apply(tape, phys, x)) })
            .collect()
    }

    fn run<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, x: &Var<R>, mode: CacheMode) -> Result<Var<R>> {
        let layers = self.layers(phys);
        match &self.wiring {
            Some(w) => {
                let v = coupling_var(tape, w.v)?;
                let (w_in, w_out) = (tape.param(w.w_in), tape.param(w.w_out));
                let vs = vec![v; layers.len()];
                tape.wired_chain(x, &w_in, &w_out, &vs, layers, mode)
            }
            None => {
                let mut x = x.clone();
                for layer in &layers {
                    x = layer(tape, &x)?;
                }
                Ok(x)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Estimator {
    cfg: EstimatorConfig,
    input: Conv,
    down: Group,
    downsample: Conv,
    mid: Group,
    upsample: Conv,
    merge: Conv,
    up: Group,
    output: Conv,
}

impl Estimator {
    /// Registers all estimator parameters under the `est.` prefix.
    pub fn new<R: Real>(params: &mut ParamSet<R>, cfg: EstimatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1] = cfg.channels;
        let ci = cfg.image_channels;
        let he = Init::Normal(2f64.sqrt());
        let input = Conv::new(params, rng, "est.in", ci, c0, 1, Init::Normal(1.0));
        let down = Group::new(params, rng, "est.down", &cfg, c0, 1);
        let downsample = Conv::new(params, rng, "est.downsample", c0, c1, 2, Init::Normal(1.0));
        let mid = Group::new(params, rng, "est.mid", &cfg, c1, 2);
        let upsample = Conv::new(params, rng, "est.upsample", c1, c0, 1, Init::Normal(1.0));
        let merge = Conv::new(params, rng, "est.merge", 2 * c0, c0, 1, he);
        let up = Group::new(params, rng, "est.up", &cfg, c0, 1);
        let output = Conv::new(params, rng, "est.out", c0, ci, 1, Init::Zero);
        Ok(Estimator { cfg, input, down, downsample, mid, upsample, merge, up, output })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// Predicts the noise in `x` (shape `[C, H, W]` of the measured image).
    /// Weights are shared across sampling steps; the step index plays no
    /// role.
    pub fn estimate<'a, R: Real>(&self, tape: &mut Tape<'a, R>, phys: &'a Physics<'a, R>, x: &Var<R>) -> Result<Var<R>> {
        let shape = phys.shape();
        if x.shape() != shape || shape[0] != self.cfg.image_channels {
            return Err(Error::shape("estimate_noise", format!("input {:?}, measured image {shape:?}", x.shape())));
        }
        if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::shape("estimate_noise", format!("image {shape:?} must have even height and width")));
        }
        let mode = self.cfg.mode;
        let a = self.input.apply(tape, x)?;
        let a = self.down.run(tape, phys, &a, mode)?;
        let d = self.downsample.apply(tape, &a)?;
        let d = self.mid.run(tape, phys, &d, mode)?;
        let u = tape.upsample2(&d)?;
        let u = self.upsample.apply(tape, &u)?;
        let m = tape.concat(&[&u, &a])?;
        let m = self.merge.apply(tape, &m)?;
        let m = tape.relu(&m)?;
        let m = self.up.run(tape, phys, &m, mode)?;
        self.output.apply(tape, &m)
    }

    /// Runs [`Estimator::estimate`] without recording.
    pub fn estimate_tensor<R: Real>(&self, params: &ParamSet<R>, phys: &Physics<'_, R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::no_grad(params);
        let xv = tape.constant(x);
        Ok(self.estimate(&mut tape, phys, &xv)?.to_tensor())
    }

    fn group(&self, id: GroupId) -> &Group {
        match id {
            GroupId::Down => &self.down,
            GroupId::Mid => &self.mid,
            GroupId::Up => &self.up,
        }
    }

    /// Current coupling weight `v` of a wired group.
    pub fn group_coupling<R: Real>(&self, params: &ParamSet<R>, id: GroupId) -> Option<f64> {
        self.group(id).wiring.map(|w| coupling_of_logit(params.get(w.v).item().f64()))
    }

    /// Sets a wired group's coupling weight.
    pub fn set_group_coupling<R: Real>(&self, params: &mut ParamSet<R>, id: GroupId, v: f64) -> Result<()> {
        let w = self.group(id).wiring.ok_or_else(|| Error::invalid("group is not wired"))?;
        params.get_mut(w.v).data_mut()[0] = R::lit(coupling_logit(v)?);
        Ok(())
    }

    /// `(x, h) ↦ (x', h')` through every block of a group with coupling weight
    /// `v`, without the group's entry and exit scales.
    pub fn group_forward<R: Real>(
        &self,
        params: &ParamSet<R>,
        phys: &Physics<'_, R>,
        id: GroupId,
        v: f64,
        x: &Tensor<R>,
        h: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let mut tape = Tape::no_grad(params);
        let mut pair = (x.clone(), h.clone());
        for layer in &self.group(id).layers(phys) {
            pair = coupling_forward(&mut tape, layer, R::lit(v), &pair.0, &pair.1)?;
        }
        Ok(pair)
    }

    /// Inverse of [`Estimator::group_forward`].
    pub fn group_inverse<R: Real>(
        &self,
        params: &ParamSet<R>,
        phys: &Physics<'_, R>,
        id: GroupId,
        v: f64,
        x: &Tensor<R>,
        h: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        let mut tape = Tape::no_grad(params);
        let layers = self.group(id).layers(phys);
        let vs = vec![R::lit(v); layers.len()];
        chain_inverse(&mut tape, &layers, &vs, x, h)
    }

    /// Feature shape seen by a group for an image of `shape`.
    pub fn group_shape(&self, id: GroupId, shape: [usize; 3]) -> [usize; 3] {
        let [c0, c1] = self.cfg.channels;
        match id {
            GroupId::Down | GroupId::Up => [c0, shape[1], shape[2]],
            GroupId::Mid => [c1, shape[1] / 2, shape[2] / 2],
        }
    }
}

/// Number of injector parameters in `params`.
pub fn injector_param_count<R: Real>(params: &ParamSet<R>) -> usize {
    params.count_matching(|n| n.contains(".inj."))
}
