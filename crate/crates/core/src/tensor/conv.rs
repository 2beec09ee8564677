//! Spatial ops on `[C, H, W]` feature maps.

use super::linalg::gemm;
use super::tape::{ClosureOp, Saved};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kx)).div_ceil(self.stride);
        if self.w + self.pad <= kx {
            return (lo, lo);
        }
        let hi = ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.wo);
        (lo, hi.max(lo))
    }
}

/// Unfolds zero-padded patches into a `[C·k·k, Ho·Wo]` matrix.
fn im2col<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let mut cols = Vec::with_capacity(g.rows() * g.cols());
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        cols.resize(cols.len() + g.wo, R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kx - g.pad;
                    cols.resize(cols.len() + lo, R::zero());
                    if g.stride == 1 {
                        cols.extend_from_slice(&src[start..start + hi - lo]);
                    } else {
                        cols.extend(src[start..].iter().step_by(g.stride).take(hi - lo));
                    }
                    cols.resize(cols.len() + g.wo - hi, R::zero());
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<R: Real>(cols: &[R], g: &ConvGeom) -> Vec<R> {
    let mut x = vec![R::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let start = lo * g.stride + kx - g.pad;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(&line[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

fn chw<R: Real>(op: &'static str, x: &Var<R>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

impl<'a, R: Real> Tape<'a, R> {
    /// 2-D cross-correlation with zero "same" padding (`k/2` on every side).
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` with odd
    /// `k`, and `bias` (if any) is `[C_out]`. With `stride = 2` the output is
    /// `[C_out, ⌈H/2⌉, ⌈W/2⌉]`.
    pub fn conv2d(&mut self, input: &Var<R>, kernel: &Var<R>, bias: Option<&Var<R>>, stride: usize) -> Result<Var<R>> {
        let (cin, h, w) = chw("conv2d", input)?;
        let &[cout, kcin, k, k2] = kernel.shape() else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape())));
        };
        if kcin != cin || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}, stride {stride}", input.shape(), kernel.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let pad = k / 2;
        let geom = ConvGeom { cin, h, w, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1 };
        let npix = geom.cols();
        let mut out = vec![R::zero(); cout * npix];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(npix).zip(b.value()) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        let cols = im2col(input.value(), &geom);
        gemm(cout, geom.rows(), npix, kernel.value(), false, &cols, false, &mut out, bias.is_some());
        drop(cols);

        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record("conv2d", vec![cout, geom.ho, geom.wo], out, &inputs, |_, ledger| {
            let saved = vec![Saved::of(input, ledger), Saved::of(kernel, ledger)];
            ClosureOp::boxed("conv2d", saved, move |g, needs, s| {
                let rows = geom.rows();
                let gx = needs[0].then(|| {
                    let mut gcols = vec![R::zero(); rows * npix];
                    gemm(rows, cout, npix, &s[1], true, g, false, &mut gcols, false);
                    col2im(&gcols, &geom)
                });
                let gk = needs[1].then(|| {
                    let cols = im2col(&s[0], &geom);
                    let mut gk = vec![R::zero(); cout * rows];
                    gemm(cout, npix, rows, g, false, &cols, true, &mut gk, false);
                    gk
                });
                let mut grads = vec![gx, gk];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| g.chunks(npix).map(|row| row.iter().copied().sum()).collect()));
                }
                Ok(grads)
            })
        })
    }

    /// `[C·r², H, W] → [C, H·r, W·r]` with source channel `c·r² + dy·r + dx`.
    pub fn pixel_shuffle(&mut self, x: &Var<R>, r: usize) -> Result<Var<R>> {
        let (cr, h, w) = chw("pixel_shuffle", x)?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("{cr} channels not divisible by r² = {}", r * r)));
        }
        let out = shuffle(x.value(), cr / (r * r), h, w, r);
        self.record("pixel_shuffle", vec![cr / (r * r), h * r, w * r], out, &[x], move |_, _| {
            ClosureOp::boxed("pixel_shuffle", Vec::new(), move |g, _, _| Ok(vec![Some(unshuffle(g, cr / (r * r), h, w, r))]))
        })
    }

    /// Exact inverse of [`Tape::pixel_shuffle`]: `[C, H, W] → [C·r², H/r, W/r]`.
    pub fn pixel_unshuffle(&mut self, x: &Var<R>, r: usize) -> Result<Var<R>> {
        let (c, hr, wr) = chw("pixel_unshuffle", x)?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("{hr}×{wr} not divisible by r = {r}")));
        }
        let (h, w) = (hr / r, wr / r);
        let out = unshuffle(x.value(), c, h, w, r);
        self.record("pixel_unshuffle", vec![c * r * r, h, w], out, &[x], move |_, _| {
            ClosureOp::boxed("pixel_unshuffle", Vec::new(), move |g, _, _| Ok(vec![Some(shuffle(g, c, h, w, r))]))
        })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let (c, h, w) = chw("upsample2", x)?;
        let mut out = vec![R::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.value()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.record("upsample2", vec![c, 2 * h, 2 * w], out, &[x], move |_, _| {
            ClosureOp::boxed("upsample2", Vec::new(), move |g, _, _| {
                let mut gx = vec![R::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                Ok(vec![Some(gx)])
            })
        })
    }
}

/// `[c·r², h, w] → [c, h·r, w·r]`.
pub(crate) fn shuffle<R: Real>(x: &[R], c: usize, h: usize, w: usize, r: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    let (ho, wo) = (h * r, w * r);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * ho + y * r + dy) * wo + xx * r + dx] = x[(src * h + y) * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// `[c, h·r, w·r] → [c·r², h, w]`.
pub(crate) fn unshuffle<R: Real>(x: &[R], c: usize, h: usize, w: usize, r: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    let (hi, wi) = (h * r, w * r);
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(dst * h + y) * w + xx] = x[(ch * hi + y * r + dy) * wi + xx * r + dx];
                    }
                }
            }
        }
    }
    out
}
