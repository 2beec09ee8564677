//! PSNR and SSIM.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Value reported for identical images in tables and CSV files.
pub const PSNR_CAP: f64 = 99.99;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape(op, "empty image"));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr<R: Real>(estimate: &Tensor<R>, reference: &Tensor<R>, peak: f64) -> Result<f64> {
    check_pair("psnr", estimate, reference)?;
    let n = estimate.numel() as f64;
    let mse = estimate.data().iter().zip(reference.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// [`psnr`] limited to [`PSNR_CAP`].
pub fn psnr_capped(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&sq(a, a), h, w, &k);
    let e_bb = filter_valid(&sq(b, b), h, w, &k);
    let e_ab = filter_valid(&sq(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over valid positions,
/// for data range 1. Multi-channel images average the per-channel scores.
pub fn ssim<R: Real>(estimate: &Tensor<R>, reference: &Tensor<R>) -> Result<f64> {
    check_pair("ssim", estimate, reference)?;
    let (c, h, w) = match *estimate.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("ssim", format!("expected [H, W] or [C, H, W], got {:?}", estimate.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let a: Vec<f64> = estimate.data().iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = reference.data().iter().map(|v| v.f64()).collect();
    let plane = h * w;
    let total: f64 = (0..c).map(|i| ssim_plane(&a[i * plane..(i + 1) * plane], &b[i * plane..(i + 1) * plane], h, w)).sum();
    Ok(total / c as f64)
}

/// ITU-R BT.601 luma of a `[3, H, W]` image.
pub fn luma<R: Real>(rgb: &Tensor<R>) -> Result<Tensor<R>> {
    let &[3, h, w] = rgb.shape() else {
        return Err(Error::shape("luma", format!("expected [3, H, W], got {:?}", rgb.shape())));
    };
    let n = h * w;
    let d = rgb.data();
    let (kr, kg, kb) = (R::lit(0.299), R::lit(0.587), R::lit(0.114));
    Tensor::new(vec![1, h, w], (0..n).map(|i| kr * d[i] + kg * d[n + i] + kb * d[2 * n + i]).collect())
}

/// Which representation of colour images is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// BT.601 luma of colour images.
    #[default]
    Luma,
    /// All channels; SSIM averaged per channel.
    Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores plus their aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Scores one reconstruction against its reference.
    pub fn push<R: Real>(&mut self, name: impl Into<String>, estimate: &Tensor<R>, reference: &Tensor<R>, mode: EvalMode) -> Result<()> {
        let (e, r) = match (mode, estimate.shape().first()) {
            (EvalMode::Luma, Some(3)) => (luma(estimate)?, luma(reference)?),
            _ => (estimate.clone(), reference.clone()),
        };
        let psnr_db = psnr_capped(psnr(&e, &r, 1.0)?);
        let ssim = ssim(&e, &r)?;
        self.images.push(ImageScore { name: name.into(), psnr_db, ssim });
        Ok(())
    }

    /// Mean and population standard deviation of PSNR.
    pub fn psnr_stats(&self) -> (f64, f64) {
        mean_std(self.images.iter().map(|s| s.psnr_db))
    }

    pub fn ssim_stats(&self) -> (f64, f64) {
        mean_std(self.images.iter().map(|s| s.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{:.4},{:.6}", s.name, s.psnr_db, s.ssim);
        }
        let (pm, ps) = self.psnr_stats();
        let (sm, ss) = self.ssim_stats();
        let _ = writeln!(out, "mean,{pm:.4},{sm:.6}");
        let _ = writeln!(out, "std,{ps:.4},{ss:.6}");
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>8}  {:>7}\n", "image", "PSNR dB", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>7.4}", s.name, s.psnr_db, s.ssim);
        }
        let (pm, ps) = self.psnr_stats();
        let (sm, ss) = self.ssim_stats();
        let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>7.4}", "mean", pm, sm);
        let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>7.4}", "std", ps, ss);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform())
    }

    #[test]
    fn psnr_of_uniform_error() {
        let x = Tensor::full(&[1, 8, 8], 0.5);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(f64::INFINITY), PSNR_CAP);
    }

    #[test]
    fn psnr_matches_a_spelled_out_computation() {
        let (a, b) = (random(&[8, 8], 1), random(&[8, 8], 2));
        let mut sum = 0.0;
        for i in 0..64 {
            let d = a.data()[i] - b.data()[i];
            sum += d * d;
        }
        let want = 10.0 * (1.0 / (sum / 64.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_drops_as_noise_grows() {
        let x = random(&[1, 16, 16], 3);
        let noise = random(&[1, 16, 16], 4);
        let scores: Vec<f64> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&s| {
                let y = Tensor::from_fn(&[1, 16, 16], |i| x.data()[i] + s * (noise.data()[i] - 0.5));
                psnr(&y, &x, 1.0).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2]);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = random(&[1, 16, 20], 5);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let rgb = random(&[3, 12, 12], 6);
        assert_eq!(ssim(&rgb, &rgb).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let x = Tensor::from_fn(&[16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_naive_sliding_window() {
        let (a, b) = (random(&[14, 15], 7), random(&[14, 15], 8));
        let g = gaussian_window();
        let (h, w) = (14, 15);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy] * g[dx];
                        let (p, q) = (a.data()[(y0 + dy) * w + x0 + dx], b.data()[(y0 + dy) * w + x0 + dx]);
                        ma += k * p;
                        mb += k * q;
                        aa += k * p * p;
                        bb += k * q * q;
                        ab += k * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count as f64).abs() < 1e-6);
    }

    #[test]
    fn permutation_invariance_of_psnr_but_not_ssim() {
        let x = Tensor::from_fn(&[16, 16], |i| ((i % 16) as f64 / 15.0).powi(2));
        let y = random(&[16, 16], 9).map(|v| 0.9 * v);
        let y = Tensor::from_fn(&[16, 16], |i| 0.5 * x.data()[i] + 0.5 * y.data()[i]);
        let perm: Vec<usize> = (0..256).map(|i| (i * 97) % 256).collect();
        let px = Tensor::from_fn(&[16, 16], |i| x.data()[perm[i]]);
        let py = Tensor::from_fn(&[16, 16], |i| y.data()[perm[i]]);
        assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&px, &py, 1.0).unwrap()).abs() < 1e-9);
        assert!((ssim(&x, &y).unwrap() - ssim(&px, &py).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn small_images_and_mismatches_are_errors() {
        let a = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(ssim(&a, &a).is_err());
        assert!(psnr(&a, &Tensor::zeros(&[1, 8, 9]), 1.0).is_err());
    }

    #[test]
    fn luma_weights_and_report() {
        let rgb = Tensor::from_fn(&[3, 1, 1], |i| [1.0f64, 0.0, 0.0][i]);
        assert!((luma(&rgb).unwrap().item() - 0.299).abs() < 1e-12);
        let x = random(&[3, 12, 12], 10);
        let mut report = EvalReport::default();
        report.push("a", &x, &x, EvalMode::Luma).unwrap();
        report.push("b", &x.map(|v| v * 0.9), &x, EvalMode::Rgb).unwrap();
        let (pm, _) = report.psnr_stats();
        assert!((pm - (report.images[0].psnr_db + report.images[1].psnr_db) / 2.0).abs() < 1e-12);
        assert!(report.to_csv().starts_with("image,psnr_db,ssim\na,99.9900,1.000000\n"));
    }
}
