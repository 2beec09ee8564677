//! Block-based compressed sensing physics.
//!
//! An image `[C, H, W]` is cut into `B×B` tiles; every tile of every channel
//! is measured with the same matrix `A_blk` (`M×N`, `N = B²`) whose rows are
//! orthonormal, so the pseudo-inverse is simply `A_blkᵀ`. Measurements are
//! stored channel-major, then tile in row-major tile order, then the `M`
//! coefficients of that tile.

mod ops;

use std::fs;
use std::path::Path;

use crate::codec::{extent_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, DType, Real, Tensor};

pub use ops::Physics;

const MATRIX_MAGIC: &[u8; 4] = b"RCSA";
const MEASUREMENT_MAGIC: &[u8; 4] = b"RCSM";
const FORMAT_VERSION: u16 = 1;

/// Row count for ratio `γ` on `B×B` blocks: `round(γ·B²)`, at least one.
pub fn rows_for(block: usize, ratio: f64) -> Result<usize> {
    if block == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("sampling ratio {ratio} outside (0, 1]")));
    }
    let m = (ratio * (block * block) as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!("ratio {ratio} leaves no measurements for {block}x{block} blocks")));
    }
    Ok(m)
}

/// Orthonormalizes the rows of a row-major `m×n` matrix in place.
///
/// Modified Gram–Schmidt applied twice; equivalent to taking `Q` from the QR
/// factorization of the transpose with a positive diagonal in `R`.
fn orthonormalize_rows(a: &mut [f64], m: usize, n: usize) -> Result<()> {
    for i in 0..m {
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = a.split_at_mut(i * n);
                let prev = &done[j * n..(j + 1) * n];
                let row = &mut rest[..n];
                let d: f64 = prev.iter().zip(row.iter()).map(|(p, r)| p * r).sum();
                row.iter_mut().zip(prev).for_each(|(r, p)| *r -= d * p);
            }
        }
        let row = &mut a[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::invalid("sampling rows are linearly dependent"));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// The measurement operator `A` together with its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOperator {
    block: usize,
    ratio: f64,
    seed: u64,
    m: usize,
    rows64: Vec<f64>,
    rows32: Vec<f32>,
    rows32_wide: Vec<f64>,
}

impl SamplingOperator {
    /// Draws an i.i.d. Gaussian `M×B²` matrix from `seed` and orthonormalizes
    /// its rows.
    pub fn build(block: usize, ratio: f64, seed: u64) -> Result<Self> {
        let m = rows_for(block, ratio)?;
        let n = block * block;
        let mut rng = Rng::new(seed);
        let mut rows: Vec<f64> = rng.normal_vec(m * n);
        orthonormalize_rows(&mut rows, m, n)?;
        Ok(Self::assemble(block, ratio, seed, m, rows, None))
    }

    /// Uses the given rows, which must already be orthonormal.
    pub fn from_rows(block: usize, seed: u64, rows: Vec<f64>) -> Result<Self> {
        let n = block * block;
        if n == 0 || rows.is_empty() || rows.len() % n != 0 || rows.len() / n > n {
            return Err(Error::invalid(format!("{} values do not form rows of length {n}", rows.len())));
        }
        let m = rows.len() / n;
        let op = Self::assemble(block, m as f64 / n as f64, seed, m, rows, None);
        let err = op.orthonormality_error::<f64>();
        if err > 1e-9 {
            return Err(Error::invalid(format!("rows are not orthonormal (max |AAᵀ − I| = {err:.3e})")));
        }
        Ok(op)
    }

    fn assemble(block: usize, ratio: f64, seed: u64, m: usize, rows64: Vec<f64>, rows32: Option<Vec<f32>>) -> Self {
        let rows32 = rows32.unwrap_or_else(|| rows64.iter().map(|&v| v as f32).collect());
        let rows32_wide = rows32.iter().map(|&v| v as f64).collect();
        SamplingOperator { block, ratio, seed, m, rows64, rows32, rows32_wide }
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// The requested ratio `γ`; the realized one is `m_blk / n_blk`.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn m_blk(&self) -> usize {
        self.m
    }

    pub fn n_blk(&self) -> usize {
        self.block * self.block
    }

    /// `A_blk` at precision `R`, row-major `M×N`.
    pub fn matrix<R: Real>(&self) -> &[R] {
        R::pick(&self.rows32, &self.rows64)
    }

    /// The precision-`R` matrix widened to `f64`, for residual checks that
    /// should not add rounding of their own.
    fn matrix_wide<R: Real>(&self) -> &[f64] {
        match R::DTYPE {
            DType::F32 => &self.rows32_wide,
            DType::F64 => &self.rows64,
        }
    }

    /// `max |A_blk·A_blkᵀ − I|` evaluated at precision `R`.
    pub fn orthonormality_error<R: Real>(&self) -> f64 {
        let (m, n) = (self.m, self.n_blk());
        let a = self.matrix::<R>();
        let mut g = vec![R::zero(); m * m];
        gemm(m, n, m, a, false, a, true, &mut g, false);
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[i * m + j].f64() - target).abs());
            }
        }
        worst
    }

    /// Number of tiles in an image of `shape = [C, H, W]`.
    pub fn tile_count(&self, shape: &[usize]) -> Result<usize> {
        let &[c, h, w] = shape else {
            return Err(Error::shape("sampling", format!("image must be [C, H, W], got {shape:?}")));
        };
        let b = self.block;
        if c == 0 || h == 0 || w == 0 || h % b != 0 || w % b != 0 {
            return Err(Error::shape("sampling", format!("image {shape:?} does not split into {b}x{b} tiles")));
        }
        Ok(c * (h / b) * (w / b))
    }

    pub fn measurement_len(&self, shape: &[usize]) -> Result<usize> {
        Ok(self.tile_count(shape)? * self.m)
    }

    /// Gathers tiles into a `tiles × N` row-major matrix.
    fn gather<R: Real>(&self, x: &[R], shape: &[usize]) -> Vec<R> {
        let (h, w, b) = (shape[1], shape[2], self.block);
        let (ty, tx) = (h / b, w / b);
        let n = b * b;
        let mut out = vec![R::zero(); x.len()];
        for c in 0..shape[0] {
            for by in 0..ty {
                for bx in 0..tx {
                    let t = (c * ty + by) * tx + bx;
                    for i in 0..b {
                        let src = c * h * w + (by * b + i) * w + bx * b;
                        out[t * n + i * b..t * n + (i + 1) * b].copy_from_slice(&x[src..src + b]);
                    }
                }
            }
        }
        out
    }

    fn scatter<R: Real>(&self, tiles: &[R], shape: &[usize]) -> Vec<R> {
        let (h, w, b) = (shape[1], shape[2], self.block);
        let (ty, tx) = (h / b, w / b);
        let n = b * b;
        let mut out = vec![R::zero(); tiles.len()];
        for c in 0..shape[0] {
            for by in 0..ty {
                for bx in 0..tx {
                    let t = (c * ty + by) * tx + bx;
                    for i in 0..b {
                        let dst = c * h * w + (by * b + i) * w + bx * b;
                        out[dst..dst + b].copy_from_slice(&tiles[t * n + i * b..t * n + (i + 1) * b]);
                    }
                }
            }
        }
        out
    }

    /// `A·x` on raw image data.
    pub fn apply<R: Real>(&self, x: &[R], shape: &[usize]) -> Result<Vec<R>> {
        let tiles = self.tile_count(shape)?;
        if x.len() != tiles * self.n_blk() {
            return Err(Error::shape("sample", format!("{} values for image {shape:?}", x.len())));
        }
        let xt = self.gather(x, shape);
        let mut y = vec![R::zero(); tiles * self.m];
        gemm(tiles, self.n_blk(), self.m, &xt, false, self.matrix::<R>(), true, &mut y, false);
        Ok(y)
    }

    /// `Aᵀ·y`, producing an image of `shape`.
    pub fn adjoint<R: Real>(&self, y: &[R], shape: &[usize]) -> Result<Vec<R>> {
        let tiles = self.tile_count(shape)?;
        if y.len() != tiles * self.m {
            return Err(Error::shape("back_project", format!("{} measurements, image {shape:?} needs {}", y.len(), tiles * self.m)));
        }
        let mut xt = vec![R::zero(); tiles * self.n_blk()];
        gemm(tiles, self.m, self.n_blk(), y, false, self.matrix::<R>(), false, &mut xt, false);
        Ok(self.scatter(&xt, shape))
    }

    /// `AᵀA·x`.
    pub fn gram<R: Real>(&self, x: &[R], shape: &[usize]) -> Result<Vec<R>> {
        let y = self.apply(x, shape)?;
        self.adjoint(&y, shape)
    }

    /// `x + Aᵀ(y − A·x)`, the range-nullspace projection onto `{x : A·x = y}`.
    pub fn project<R: Real>(&self, x: &[R], shape: &[usize], y: &[R]) -> Result<Vec<R>> {
        let ax = self.apply(x, shape)?;
        if ax.len() != y.len() {
            return Err(Error::shape("rnd_project", format!("{} measurements, image {shape:?} needs {}", y.len(), ax.len())));
        }
        let r: Vec<R> = y.iter().zip(&ax).map(|(&a, &b)| a - b).collect();
        let mut out = self.adjoint(&r, shape)?;
        out.iter_mut().zip(x).for_each(|(o, &v)| *o += v);
        Ok(out)
    }

    /// `‖A·x − y‖_∞`, evaluated in `f64` with the precision-`R` matrix.
    pub fn residual_inf<R: Real>(&self, x: &[R], shape: &[usize], y: &[R]) -> Result<f64> {
        let wide: Vec<f64> = x.iter().map(|v| v.f64()).collect();
        let tiles = self.tile_count(shape)?;
        if wide.len() != tiles * self.n_blk() || y.len() != tiles * self.m {
            return Err(Error::shape("residual", format!("image {shape:?} with {} measurements", y.len())));
        }
        let xt = self.gather(&wide, shape);
        let mut ax = vec![0.0; tiles * self.m];
        gemm(tiles, self.n_blk(), self.m, &xt, false, self.matrix_wide::<R>(), true, &mut ax, false);
        Ok(ax.iter().zip(y).fold(0.0f64, |acc, (&a, b)| acc.max((a - b.f64()).abs())))
    }

    pub fn sample<R: Real>(&self, x: &Tensor<R>) -> Result<Measurement<R>> {
        let y = self.apply(x.data(), x.shape())?;
        Measurement::new(self, x.shape(), y)
    }

    pub fn back_project<R: Real>(&self, y: &Measurement<R>) -> Result<Tensor<R>> {
        self.check_measurement(y)?;
        Tensor::new(y.shape.to_vec(), self.adjoint(&y.values, &y.shape)?)
    }

    pub fn rnd_project<R: Real>(&self, x: &Tensor<R>, y: &Measurement<R>) -> Result<Tensor<R>> {
        self.check_measurement(y)?;
        if x.shape() != y.shape {
            return Err(Error::shape("rnd_project", format!("estimate {:?} vs measured image {:?}", x.shape(), y.shape)));
        }
        Tensor::new(x.shape().to_vec(), self.project(x.data(), x.shape(), &y.values)?)
    }

    pub(crate) fn check_measurement<R: Real>(&self, y: &Measurement<R>) -> Result<()> {
        if y.block != self.block || y.m_blk != self.m {
            return Err(Error::invalid(format!(
                "measurement taken with {}x{} blocks and {} rows, operator has {}x{} and {}",
                y.block, y.block, y.m_blk, self.block, self.block, self.m
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MATRIX_MAGIC)
            .u16(FORMAT_VERSION)
            .u32(extent_u32(self.block, "block size")?)
            .f64(self.ratio)
            .u64(self.seed)
            .u32(extent_u32(self.m, "rows")?)
            .u32(extent_u32(self.n_blk(), "columns")?)
            .f32s(&self.rows32);
        Ok(w.finish())
    }

    /// Parses an operator file. The stored 32-bit entries are used verbatim
    /// at single precision and widened for double precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MATRIX_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let block = r.extent("block size")?;
        let ratio = r.f64("ratio")?;
        let seed = r.u64("seed")?;
        let at = r.pos();
        let m = r.extent("rows")?;
        let n = r.extent("columns")?;
        if n != block * block || m > n {
            return Err(Error::parse(at, format!("{m}x{n} matrix does not fit {block}x{block} blocks")));
        }
        let rows32 = r.f32_vec(m * n, "matrix entries")?;
        r.finish()?;
        if !rows32.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(at, "non-finite matrix entry"));
        }
        let rows64 = rows32.iter().map(|&v| v as f64).collect();
        Ok(Self::assemble(block, ratio, seed, m, rows64, Some(rows32)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Measurements `y = A·x` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<R> {
    values: Vec<R>,
    shape: [usize; 3],
    block: usize,
    m_blk: usize,
    ratio: f64,
    seed: u64,
}

impl<R: Real> Measurement<R> {
    pub fn new(op: &SamplingOperator, shape: &[usize], values: Vec<R>) -> Result<Self> {
        let len = op.measurement_len(shape)?;
        if values.len() != len {
            return Err(Error::shape("measurement", format!("{} values, image {shape:?} needs {len}", values.len())));
        }
        Ok(Measurement {
            values,
            shape: [shape[0], shape[1], shape[2]],
            block: op.block_size(),
            m_blk: op.m_blk(),
            ratio: op.ratio(),
            seed: op.seed(),
        })
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    /// Shape `[C, H, W]` of the measured image.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Seed of the operator that produced these measurements.
    pub fn operator_seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<S: Real>(&self) -> Measurement<S> {
        Measurement {
            values: self.values.iter().map(|v| S::lit(v.f64())).collect(),
            shape: self.shape,
            block: self.block,
            m_blk: self.m_blk,
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        let values: Vec<f32> = self.values.iter().map(|v| v.f64() as f32).collect();
        w.bytes(MEASUREMENT_MAGIC)
            .u16(FORMAT_VERSION)
            .u32(extent_u32(self.block, "block size")?)
            .f64(self.ratio)
            .u64(self.seed)
            .u32(extent_u32(self.m_blk, "rows")?);
        for &e in &self.shape {
            w.u32(extent_u32(e, "image extent")?);
        }
        w.u64(self.values.len() as u64).f32s(&values);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MEASUREMENT_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let block = r.extent("block size")?;
        let ratio = r.f64("ratio")?;
        let seed = r.u64("seed")?;
        let m_blk = r.extent("rows")?;
        let shape = [r.extent("channels")?, r.extent("height")?, r.extent("width")?];
        let at = r.pos();
        let len = r.u64("measurement count")? as usize;
        let (h, w) = (shape[1], shape[2]);
        if h % block != 0 || w % block != 0 || len != shape[0] * (h / block) * (w / block) * m_blk {
            return Err(Error::parse(at, format!("{len} measurements inconsistent with image {shape:?}")));
        }
        let values = r.f32_vec(len, "measurements")?;
        r.finish()?;
        Ok(Measurement { values: values.iter().map(|&v| R::lit(v as f64)).collect(), shape, block, m_blk, ratio, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selector() -> SamplingOperator {
        SamplingOperator::from_rows(2, 0, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn row_count_rounds_with_floor_of_one() {
        assert_eq!(rows_for(8, 0.25).unwrap(), 16);
        assert_eq!(rows_for(32, 0.1).unwrap(), 102);
        assert_eq!(rows_for(4, 0.5).unwrap(), 8);
        assert!(rows_for(2, 0.01).is_err());
        assert!(rows_for(8, 0.0).is_err());
        assert!(rows_for(8, 1.5).is_err());
    }

    #[test]
    fn built_rows_are_orthonormal() {
        let op = SamplingOperator::build(8, 0.25, 3).unwrap();
        assert_eq!((op.m_blk(), op.n_blk()), (16, 64));
        assert!(op.orthonormality_error::<f64>() < 1e-12);
        assert!(op.orthonormality_error::<f32>() < 1e-6);
        assert_eq!(op, SamplingOperator::build(8, 0.25, 3).unwrap());
    }

    #[test]
    fn selector_back_projection_and_projection() {
        let op = selector();
        let y = Measurement::new(&op, &[1, 2, 2], vec![3.0f64, 5.0]).unwrap();
        assert_eq!(op.back_project(&y).unwrap().data(), &[3.0, 5.0, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Measurement::new(&op, &[1, 2, 2], vec![9.0, 8.0]).unwrap();
        assert_eq!(op.rnd_project(&x, &y).unwrap().data(), &[9.0, 8.0, 3.0, 4.0]);
    }

    #[test]
    fn tile_layout_is_channel_then_row_major_tiles() {
        let op = selector();
        // Two channels of a 2x4 image: tiles (c0,t0),(c0,t1),(c1,t0),(c1,t1).
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y = op.apply(&x, &[2, 2, 4]).unwrap();
        assert_eq!(y, vec![0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn full_sampling_recovers_the_image() {
        let op = SamplingOperator::build(4, 1.0, 11).unwrap();
        let x = Tensor::from_fn(&[1, 8, 8], |i| ((i * 37) % 17) as f32 / 17.0);
        let y = op.sample(&x).unwrap();
        let back = op.back_project(&y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn indivisible_and_mismatched_shapes_are_errors() {
        let op = SamplingOperator::build(4, 0.5, 0).unwrap();
        assert!(op.sample(&Tensor::<f32>::zeros(&[1, 6, 8])).is_err());
        assert!(op.apply(&[0.0f32; 10], &[1, 4, 4]).is_err());
        assert!(Measurement::new(&op, &[1, 4, 4], vec![0.0f32; 3]).is_err());
        let other = SamplingOperator::build(4, 0.25, 0).unwrap();
        let y = other.sample(&Tensor::<f32>::zeros(&[1, 4, 4])).unwrap();
        assert!(op.back_project(&y).is_err());
    }

    #[test]
    fn operator_file_round_trip() {
        let op = SamplingOperator::build(4, 0.5, 9).unwrap();
        let bytes = op.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RCSA");
        let back = SamplingOperator::from_bytes(&bytes).unwrap();
        assert_eq!(back.matrix::<f32>(), op.matrix::<f32>());
        assert_eq!((back.block_size(), back.m_blk(), back.seed()), (4, 8, 9));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let err = SamplingOperator::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn measurement_file_round_trip() {
        let op = SamplingOperator::build(4, 0.5, 9).unwrap();
        let y = op.sample(&Tensor::from_fn(&[2, 4, 8], |i| i as f32 * 0.01)).unwrap();
        let back = Measurement::<f32>::from_bytes(&y.to_bytes().unwrap()).unwrap();
        assert_eq!(back, y);
    }
}
