//! Reductions, softmax and layout operations.

use crate::error::{invalid, AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axis_split, Tensor};

impl Graph {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        dx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(&shape, dx).unwrap())]
            }),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (src[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, y, _| {
                let (gd, yd) = (g.data(), y.data());
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape(), dx).unwrap())]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.custom(
            value,
            xs,
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (k, &len) in lens.iter().enumerate() {
                    if needs[k] {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        grads.push(Some(Tensor::new(inputs[k].shape(), dx).unwrap()));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}+{len} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    dx[s..s + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, dx).unwrap())]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let original = self.shape(x).to_vec();
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.reshape(&original).unwrap())]),
        ))
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("flip", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let flip = move |src: &[f64]| {
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for a in 0..len {
                    let s = (o * len + a) * inner;
                    let d = (o * len + (len - 1 - a)) * inner;
                    out[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
            out
        };
        let value = Tensor::new(&shape, flip(self.value(x).data()))?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(Tensor::new(g.shape(), flip(g.data())).unwrap())]),
        ))
    }
}
