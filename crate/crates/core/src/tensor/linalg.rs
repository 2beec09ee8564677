use super::tape::{ClosureOp, Saved};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Row-major matrix product `c = op(a)·op(b) + beta·c`.
///
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when
/// `b_t`), `c` is `m×n`. With `accumulate == false` the prior contents of `c`
/// are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_t: bool,
    b: &[R],
    b_t: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = R::zero());
        }
        return;
    }
    let sa = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let sb = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    R::gemm_raw(m, k, n, a, sa, b, sb, beta, c);
}

impl<'a, R: Real> Tape<'a, R> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?} is not rank 2", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2}")));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(m, k, n, a.value(), false, b.value(), false, &mut out, false);
        self.record("matmul", vec![m, n], out, &[a, b], |_, ledger| {
            let saved = vec![Saved::of(a, ledger), Saved::of(b, ledger)];
            ClosureOp::boxed("matmul", saved, move |g, needs, s| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![R::zero(); m * k];
                    gemm(m, n, k, g, false, &s[1], true, &mut ga, false);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![R::zero(); k * n];
                    gemm(k, m, n, &s[0], true, g, false, &mut gb, false);
                    gb
                });
                Ok(vec![ga, gb])
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamSet, Tensor};

    #[test]
    fn gemm_transposes_agree_with_loops() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                want[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn identity_times_column() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let eye = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let col = tape.constant(&Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        assert_eq!(tape.matmul(&eye, &col).unwrap().value(), &[3.0, 5.0]);
        let zeros = tape.constant(&Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(&eye, &zeros).unwrap().value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Shape { .. })));
    }
}
