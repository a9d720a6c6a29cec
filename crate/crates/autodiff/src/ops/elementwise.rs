//! Pointwise arithmetic and activations.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn mish_scalar(x: f64) -> f64 {
    x * softplus_scalar(x).tanh()
}

fn mish_derivative(x: f64) -> f64 {
    let t = softplus_scalar(x).tanh();
    t + x * (1.0 - t * t) * sigmoid_scalar(x)
}

pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    /// Records `y = f(x)` with derivative `dy/dx = df(x, y)`.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.custom(
            value,
            &[x],
            Box::new(move |g, inputs, out, _| {
                let x = inputs[0].data();
                let y = out.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).unwrap())]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| {
                needs.iter().map(|&n| n.then(|| g.clone())).collect()
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.map(|v| -v)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(|g, inputs, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(inputs[1], |gi, b| gi * b)),
                    needs[1].then(|| g.zip_map(inputs[0], |gi, a| gi * a)),
                ]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                index: i,
                value: 0.0,
            });
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.custom(
            value,
            &[a, b],
            Box::new(|g, inputs, out, needs| {
                let ga = needs[0].then(|| g.zip_map(inputs[1], |gi, b| gi / b));
                let gb = needs[1].then(|| {
                    let t = g.zip_map(out, |gi, y| gi * y);
                    t.zip_map(inputs[1], |ti, b| -ti / b)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, move |_, _| c)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// `|x|`; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, &v)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0 || !v.is_finite())
        {
            return Err(AutodiffError::Domain {
                op: "log",
                index: i,
                value: v,
            });
        }
        Ok(self.unary(x, f64::ln, |x, _| 1.0 / x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    /// Like [`Graph::exp`] but rejects inputs whose exponential overflows.
    pub fn exp_checked(&mut self, x: Var) -> Result<Var> {
        if let Some((i, &v)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !v.exp().is_finite())
        {
            return Err(AutodiffError::Domain {
                op: "exp",
                index: i,
                value: v,
            });
        }
        Ok(self.exp(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn mish(&mut self, x: Var) -> Var {
        self.unary(x, mish_scalar, |x, _| mish_derivative(x))
    }

    /// Clamps into `[lo, hi]`; saturated entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, smooth_l1_scalar, |x, _| {
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        })
    }
}
