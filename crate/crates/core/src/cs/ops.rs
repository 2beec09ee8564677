use std::cell::Cell;

use super::{Measurement, SamplingOperator};
use crate::error::{Error, Result};
use crate::tensor::{ClosureOp, Real, Tape, Tensor, Var};

/// Absolute consistency bound at unit data scale, see [`Tape::rnd_project`].
pub const CONSISTENCY_TOL: f64 = 1e-5;

/// Operator plus the measurements of one image, shared by every place in a
/// reconstruction that needs `y` or `A†y`.
///
/// Every projection records its residual `‖A·x̄ − y‖_∞`; the largest one seen
/// is available from [`Physics::worst_residual`].
#[derive(Debug)]
pub struct Physics<'o, R> {
    op: &'o SamplingOperator,
    shape: [usize; 3],
    y: Vec<R>,
    aty: Vec<R>,
    worst: Cell<f64>,
    projections: Cell<usize>,
}

impl<'o, R: Real> Physics<'o, R> {
    pub fn new(op: &'o SamplingOperator, y: &Measurement<R>) -> Result<Self> {
        op.check_measurement(y)?;
        let shape = y.image_shape();
        let aty = op.adjoint(y.values(), &shape)?;
        Ok(Physics { op, shape, y: y.values().to_vec(), aty, worst: Cell::new(0.0), projections: Cell::new(0) })
    }

    /// Measures `x` and wraps the result.
    pub fn of_image(op: &'o SamplingOperator, x: &Tensor<R>) -> Result<Self> {
        Self::new(op, &op.sample(x)?)
    }

    pub fn operator(&self) -> &'o SamplingOperator {
        self.op
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn measurements(&self) -> &[R] {
        &self.y
    }

    /// `A†y`.
    pub fn back_projection(&self) -> &[R] {
        &self.aty
    }

    pub fn back_projection_tensor(&self) -> Tensor<R> {
        Tensor::new(self.shape.to_vec(), self.aty.clone()).expect("shape checked at construction")
    }

    /// Largest `‖A·x̄ − y‖_∞` over all projections so far.
    pub fn worst_residual(&self) -> f64 {
        self.worst.get()
    }

    pub fn projection_count(&self) -> usize {
        self.projections.get()
    }

    pub fn reset_probe(&self) {
        self.worst.set(0.0);
        self.projections.set(0);
    }
}

fn inf_norm<R: Real>(v: &[R]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.f64().abs()))
}

impl<'a, R: Real> Tape<'a, R> {
    /// `A·x` for an image var; the result is a flat measurement vector.
    pub fn measure(&mut self, op: &'a SamplingOperator, x: &Var<R>) -> Result<Var<R>> {
        let shape = x.shape().to_vec();
        let y = op.apply(x.value(), &shape)?;
        let len = y.len();
        self.record("measure", vec![len], y, &[x], move |_, _| {
            ClosureOp::boxed("measure", Vec::new(), move |g, _, _| Ok(vec![Some(op.adjoint(g, &shape)?)]))
        })
    }

    /// `Aᵀ·y` producing an image of `shape`.
    pub fn back_project(&mut self, op: &'a SamplingOperator, y: &Var<R>, shape: &[usize]) -> Result<Var<R>> {
        let shape = shape.to_vec();
        let x = op.adjoint(y.value(), &shape)?;
        self.record("back_project", shape.clone(), x, &[y], move |_, _| {
            ClosureOp::boxed("back_project", Vec::new(), move |g, _, _| Ok(vec![Some(op.apply(g, &shape)?)]))
        })
    }

    /// `A†A·x`.
    pub fn gram(&mut self, op: &'a SamplingOperator, x: &Var<R>) -> Result<Var<R>> {
        let shape = x.shape().to_vec();
        let out = op.gram(x.value(), &shape)?;
        self.record("gram", shape.clone(), out, &[x], move |_, _| {
            ClosureOp::boxed("gram", Vec::new(), move |g, _, _| Ok(vec![Some(op.gram(g, &shape)?)]))
        })
    }

    /// `x̄ = x + A†(y − A·x)` against the measurements held by `phys`.
    ///
    /// The residual `‖A·x̄ − y‖_∞` is recorded in `phys`; debug builds assert
    /// it stays below `1e-5` relative to the data scale (at least 1).
    pub fn rnd_project<'o: 'a>(&mut self, phys: &Physics<'o, R>, x: &Var<R>) -> Result<Var<R>> {
        let op = phys.op;
        if x.shape() != phys.shape {
            return Err(Error::shape("rnd_project", format!("estimate {:?} vs measured image {:?}", x.shape(), phys.shape)));
        }
        let shape = x.shape().to_vec();
        let out = op.project(x.value(), &shape, &phys.y)?;
        if out.iter().all(|v| v.is_finite()) {
            let res = op.residual_inf(&out, &shape, &phys.y)?;
            phys.worst.set(phys.worst.get().max(res));
            phys.projections.set(phys.projections.get() + 1);
            let scale = 1f64.max(inf_norm(&phys.y)).max(inf_norm(x.value()));
            debug_assert!(res <= CONSISTENCY_TOL * scale, "measurement consistency violated: residual {res:e} at scale {scale}");
        }
        self.record("rnd_project", shape.clone(), out, &[x], move |_, _| {
            ClosureOp::boxed("rnd_project", Vec::new(), move |g, _, _| {
                let ag = op.gram(g, &shape)?;
                Ok(vec![Some(g.iter().zip(&ag).map(|(&a, &b)| a - b).collect())])
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;

    #[test]
    fn projection_gradient_is_the_nullspace_projector() {
        let op = SamplingOperator::build(2, 0.5, 4).unwrap();
        let x_true = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.37).sin());
        let phys = Physics::of_image(&op, &x_true).unwrap();
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(&Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.11).cos()));
        let p = tape.rnd_project(&phys, &x).unwrap();
        let w = tape.constant(&Tensor::from_fn(&[1, 4, 4], |i| i as f64 - 7.0));
        let pw = tape.mul(&p, &w).unwrap();
        let loss = tape.sum(&pw).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let want = {
            let ag = op.gram(w.value(), &[1, 4, 4]).unwrap();
            w.value().iter().zip(&ag).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let got = grads.input(&x).unwrap();
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(phys.worst_residual() < 1e-12);
        assert_eq!(phys.projection_count(), 1);
    }

    #[test]
    fn measure_and_back_project_are_adjoint_on_tape() {
        let op = SamplingOperator::build(4, 0.5, 1).unwrap();
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(&Tensor::from_fn(&[1, 4, 8], |i| i as f64 * 0.1));
        let y = tape.measure(&op, &x).unwrap();
        assert_eq!(y.shape(), &[16]);
        let back = tape.back_project(&op, &y, &[1, 4, 8]).unwrap();
        let loss = tape.sum(&back).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // d/dx sum(AᵀA x) = AᵀA 1.
        let want = op.gram(&[1.0; 32], &[1, 4, 8]).unwrap();
        assert!(grads.input(&x).unwrap().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
