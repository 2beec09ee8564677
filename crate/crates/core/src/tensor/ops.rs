use super::tape::{ClosureOp, Saved};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

fn same_shape<R: Real>(op: &'static str, a: &Var<R>, b: &Var<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn expect_scalar<R: Real>(op: &'static str, s: &Var<R>) -> Result<()> {
    if s.numel() != 1 {
        return Err(Error::shape(op, format!("expected a scalar, got {:?}", s.shape())));
    }
    Ok(())
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<'a, R: Real> Tape<'a, R> {
    pub fn add(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("add", a, b)?;
        let out = a.value().iter().zip(b.value()).map(|(&x, &y)| x + y).collect();
        self.record("add", a.shape().to_vec(), out, &[a, b], |_, _| {
            ClosureOp::boxed("add", Vec::new(), |g, needs, _| {
                Ok(vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())])
            })
        })
    }

    pub fn sub(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("sub", a, b)?;
        let out = a.value().iter().zip(b.value()).map(|(&x, &y)| x - y).collect();
        self.record("sub", a.shape().to_vec(), out, &[a, b], |_, _| {
            ClosureOp::boxed("sub", Vec::new(), |g, needs, _| {
                Ok(vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())])
            })
        })
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("mul", a, b)?;
        let out = a.value().iter().zip(b.value()).map(|(&x, &y)| x * y).collect();
        self.record("mul", a.shape().to_vec(), out, &[a, b], |_, ledger| {
            let saved = vec![Saved::of(a, ledger), Saved::of(b, ledger)];
            ClosureOp::boxed("mul", saved, |g, needs, s| {
                let ga = needs[0].then(|| g.iter().zip(s[1].iter()).map(|(&g, &y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(s[0].iter()).map(|(&g, &x)| g * x).collect());
                Ok(vec![ga, gb])
            })
        })
    }

    /// Multiplies a tensor by a scalar-valued var.
    pub fn scale(&mut self, x: &Var<R>, s: &Var<R>) -> Result<Var<R>> {
        expect_scalar("scale", s)?;
        let k = s.item();
        let out = x.value().iter().map(|&v| v * k).collect();
        self.record("scale", x.shape().to_vec(), out, &[x, s], |_, ledger| {
            let saved = if s.tracked() { vec![Saved::of(x, ledger)] } else { Vec::new() };
            ClosureOp::boxed("scale", saved, move |g, needs, saved| {
                let gx = needs[0].then(|| g.iter().map(|&v| v * k).collect());
                let gs = needs[1].then(|| vec![dot(g, &saved[0])]);
                Ok(vec![gx, gs])
            })
        })
    }

    /// `mul·x + add` with constant coefficients.
    pub fn affine(&mut self, x: &Var<R>, mul: R, add: R) -> Result<Var<R>> {
        let out = x.value().iter().map(|&v| mul * v + add).collect();
        self.record("affine", x.shape().to_vec(), out, &[x], |_, _| {
            ClosureOp::boxed("affine", Vec::new(), move |g, _, _| Ok(vec![Some(g.iter().map(|&v| v * mul).collect())]))
        })
    }

    pub fn relu(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let out = x.value().iter().map(|&v| v.max(R::zero())).collect();
        self.record("relu", x.shape().to_vec(), out, &[x], |out, ledger| {
            ClosureOp::boxed("relu", vec![Saved::new(out, ledger)], |g, _, s| {
                Ok(vec![Some(g.iter().zip(s[0].iter()).map(|(&g, &y)| if y > R::zero() { g } else { R::zero() }).collect())])
            })
        })
    }

    pub fn sigmoid(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let out = x.value().iter().map(|&v| R::one() / (R::one() + (-v).exp())).collect();
        self.record("sigmoid", x.shape().to_vec(), out, &[x], |out, ledger| {
            ClosureOp::boxed("sigmoid", vec![Saved::new(out, ledger)], |g, _, s| {
                Ok(vec![Some(g.iter().zip(s[0].iter()).map(|(&g, &y)| g * y * (R::one() - y)).collect())])
            })
        })
    }

    pub fn sqrt(&mut self, x: &Var<R>) -> Result<Var<R>> {
        if x.value().iter().any(|&v| v < R::zero()) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let out = x.value().iter().map(|&v| v.sqrt()).collect();
        self.record("sqrt", x.shape().to_vec(), out, &[x], |out, ledger| {
            ClosureOp::boxed("sqrt", vec![Saved::new(out, ledger)], |g, _, s| {
                let half = R::lit(0.5);
                Ok(vec![Some(g.iter().zip(s[0].iter()).map(|(&g, &y)| g * half / y).collect())])
            })
        })
    }

    pub fn recip(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let out = x.value().iter().map(|&v| R::one() / v).collect();
        self.record("recip", x.shape().to_vec(), out, &[x], |out, ledger| {
            ClosureOp::boxed("recip", vec![Saved::new(out, ledger)], |g, _, s| {
                Ok(vec![Some(g.iter().zip(s[0].iter()).map(|(&g, &y)| -g * y * y).collect())])
            })
        })
    }

    pub fn sum(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let total = x.value().iter().fold(R::zero(), |a, &v| a + v);
        let n = x.numel();
        self.record("sum", Vec::new(), vec![total], &[x], |_, _| {
            ClosureOp::boxed("sum", Vec::new(), move |g, _, _| Ok(vec![Some(vec![g[0]; n])]))
        })
    }

    pub fn mean(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let n = R::lit(x.numel() as f64);
        let s = self.sum(x)?;
        self.affine(&s, R::one() / n, R::zero())
    }

    /// Sum of squares.
    pub fn sq_sum(&mut self, x: &Var<R>) -> Result<Var<R>> {
        let total = dot(x.value(), x.value());
        self.record("sq_sum", Vec::new(), vec![total], &[x], |_, ledger| {
            ClosureOp::boxed("sq_sum", vec![Saved::of(x, ledger)], |g, _, s| {
                let two = R::lit(2.0) * g[0];
                Ok(vec![Some(s[0].iter().map(|&v| two * v).collect())])
            })
        })
    }

    /// Mean absolute difference `(1/N)·Σ|a − b|`; the subgradient at a tie is 0.
    pub fn l1_mean(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("l1_mean", a, b)?;
        let n = R::lit(a.numel() as f64);
        let total = a.value().iter().zip(b.value()).fold(R::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        self.record("l1_mean", Vec::new(), vec![total / n], &[a, b], |_, ledger| {
            let sign: Vec<R> = a
                .value()
                .iter()
                .zip(b.value())
                .map(|(&x, &y)| match x.partial_cmp(&y) {
                    Some(std::cmp::Ordering::Greater) => R::one(),
                    Some(std::cmp::Ordering::Less) => -R::one(),
                    _ => R::zero(),
                })
                .collect();
            ClosureOp::boxed("l1_mean", vec![Saved::from_vec(sign, ledger)], move |g, needs, s| {
                let k = g[0] / n;
                let ga: Vec<R> = s[0].iter().map(|&v| v * k).collect();
                let gb = needs[1].then(|| ga.iter().map(|&v| -v).collect());
                Ok(vec![needs[0].then_some(ga), gb])
            })
        })
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>> {
        same_shape("mse", a, b)?;
        let n = R::lit(a.numel() as f64);
        let diff: Vec<R> = a.value().iter().zip(b.value()).map(|(&x, &y)| x - y).collect();
        let total = dot(&diff, &diff) / n;
        self.record("mse", Vec::new(), vec![total], &[a, b], |_, ledger| {
            ClosureOp::boxed("mse", vec![Saved::from_vec(diff, ledger)], move |g, needs, s| {
                let k = R::lit(2.0) * g[0] / n;
                let ga: Vec<R> = s[0].iter().map(|&v| v * k).collect();
                let gb = needs[1].then(|| ga.iter().map(|&v| -v).collect());
                Ok(vec![needs[0].then_some(ga), gb])
            })
        })
    }

    pub fn reshape(&mut self, x: &Var<R>, shape: &[usize]) -> Result<Var<R>> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        self.record("reshape", shape.to_vec(), x.value().to_vec(), &[x], |_, _| {
            ClosureOp::boxed("reshape", Vec::new(), |g, _, _| Ok(vec![Some(g.to_vec())]))
        })
    }

    /// Concatenates `[C_i, ...]` tensors along the leading axis.
    pub fn concat(&mut self, parts: &[&Var<R>]) -> Result<Var<R>> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat of nothing"));
        };
        let tail = &first.shape()[1..];
        if parts.iter().any(|p| p.shape().is_empty() || &p.shape()[1..] != tail) {
            return Err(Error::shape("concat", "trailing extents differ"));
        }
        let lead: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let mut out = Vec::with_capacity(shape.iter().product());
        for p in parts {
            out.extend_from_slice(p.value());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        self.record("concat", shape, out, parts, move |_, _| {
            ClosureOp::boxed("concat", Vec::new(), move |g, needs, _| {
                let mut offset = 0;
                Ok(sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let part = need.then(|| g[offset..offset + n].to_vec());
                        offset += n;
                        part
                    })
                    .collect())
            })
        })
    }
}
