//! 2D/3D convolution and 3D transposed convolution via im2col + GEMM.
//!
//! 2D tensors `[N, C, H, W]` are handled as 3D volumes with a unit depth
//! axis, so both share one set of kernels.

use rayon::prelude::*;

use crate::error::{invalid, AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel + output_pad).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_len(input[a], kernel[a], stride[a], pad[a])?;
        }
        Some(Self {
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Input coordinate hit by output index `o` and kernel tap `k` on axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k) as isize - self.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }
}

/// Unfolds `channels` input volumes into a `(channels * K) x P` matrix.
fn im2col(src: &[f64], channels: usize, geo: &Geometry) -> Vec<f64> {
    let [kd, kh, kw] = geo.kernel;
    let [od, oh, ow] = geo.output;
    let [_, ih, iw] = geo.input;
    let p = geo.output_len();
    let mut cols = vec![0.0; channels * geo.kernel_len() * p];
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * geo.input_len()..(c + 1) * geo.input_len()];
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let Some(sz) = geo.source(0, z, a) else { continue };
                        for y in 0..oh {
                            let Some(sy) = geo.source(1, y, b) else { continue };
                            let base = (sz * ih + sy) * iw;
                            let out_base = (z * oh + y) * ow;
                            for x in 0..ow {
                                if let Some(sx) = geo.source(2, x, k) {
                                    dst[out_base + x] = plane[base + sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters the matrix back, accumulating overlaps.
fn col2im(cols: &[f64], channels: usize, geo: &Geometry, dst: &mut [f64]) {
    let [kd, kh, kw] = geo.kernel;
    let [od, oh, ow] = geo.output;
    let [_, ih, iw] = geo.input;
    let p = geo.output_len();
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * geo.input_len()..(c + 1) * geo.input_len()];
        for a in 0..kd {
            for b in 0..kh {
                for k in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let Some(sz) = geo.source(0, z, a) else { continue };
                        for y in 0..oh {
                            let Some(sy) = geo.source(1, y, b) else { continue };
                            let base = (sz * ih + sy) * iw;
                            let out_base = (z * oh + y) * ow;
                            for x in 0..ow {
                                if let Some(sx) = geo.source(2, x, k) {
                                    plane[base + sx] += src[out_base + x];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers are exactly the sizes implied by (m, k, n) and
    // the strides address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for n in 0..batch {
        for (c, slot) in db.iter_mut().enumerate() {
            let s = (n * channels + c) * plane;
            *slot += g[s..s + plane].iter().sum::<f64>();
        }
    }
    db
}

/// Spatial dims of `shape` lifted to three axes (2D gets a unit depth).
fn volume_dims(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        _ => [shape[2], shape[3], shape[4]],
    }
}

fn check_bias(g: &Graph, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        g.value(b).expect_shape(op, &[channels])?;
    }
    Ok(())
}

impl Graph {
    /// 2D convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.value(x).expect_rank("conv2d", 4)?;
        self.value(w).expect_rank("conv2d", 4)?;
        let ws = self.shape(w);
        let kernel = [1, ws[2], ws[3]];
        self.conv_forward("conv2d", x, w, bias, kernel, [1, stride, stride], [0, padding, padding])
    }

    /// 3D convolution. `x: [N, C, D, H, W]`, `w: [O, C, kd, kh, kw]`, `bias: [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.value(x).expect_rank("conv3d", 5)?;
        self.value(w).expect_rank("conv3d", 5)?;
        let ws = self.shape(w);
        let kernel = [ws[2], ws[3], ws[4]];
        self.conv_forward("conv3d", x, w, bias, kernel, [stride; 3], [padding; 3])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_forward(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        if ws[1] != cin {
            return Err(AutodiffError::ShapeMismatch {
                op,
                expected: vec![cout, cin],
                got: ws[..2].to_vec(),
            });
        }
        check_bias(self, bias, cout, op)?;
        let geo = Geometry::new(volume_dims(&xs), kernel, stride, pad)
            .ok_or_else(|| invalid(op, format!("kernel {kernel:?} does not fit input {xs:?}")))?;
        let (k, p, in_len) = (cin * geo.kernel_len(), geo.output_len(), cin * geo.input_len());

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let outs: Vec<Vec<f64>> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let cols = im2col(&xd[n * in_len..(n + 1) * in_len], cin, &geo);
                let mut out = vec![0.0; cout * p];
                if let Some(bd) = &bd {
                    for (c, &bv) in bd.iter().enumerate() {
                        out[c * p..(c + 1) * p].fill(bv);
                    }
                }
                gemm(cout, k, p, wd, false, &cols, false, 1.0, &mut out);
                out
            })
            .collect();
        let mut out_shape = xs.clone();
        out_shape[1] = cout;
        let spatial = if xs.len() == 4 { &geo.output[1..] } else { &geo.output[..] };
        out_shape.truncate(2);
        out_shape.extend_from_slice(spatial);
        let value = Tensor::new(&out_shape, outs.concat())?;

        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.custom(
            value,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let (xd, wd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..batch)
                    .into_par_iter()
                    .map(|n| {
                        let gn = &gd[n * cout * p..(n + 1) * cout * p];
                        let dw = needs[1].then(|| {
                            let cols = im2col(&xd[n * in_len..(n + 1) * in_len], cin, &geo);
                            let mut dw = vec![0.0; cout * k];
                            gemm(cout, p, k, gn, false, &cols, true, 0.0, &mut dw);
                            dw
                        });
                        let dx = needs[0].then(|| {
                            let mut dcols = vec![0.0; k * p];
                            gemm(k, cout, p, wd, true, gn, false, 0.0, &mut dcols);
                            let mut dx = vec![0.0; in_len];
                            col2im(&dcols, cin, &geo, &mut dx);
                            dx
                        });
                        (dx, dw)
                    })
                    .collect();
                let (dxs, dws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
                let dx = needs[0].then(|| {
                    let data: Vec<f64> = dxs.into_iter().flatten().flatten().collect();
                    Tensor::new(inputs[0].shape(), data).unwrap()
                });
                let dw = needs[1].then(|| {
                    let parts: Vec<Vec<f64>> = dws.into_iter().flatten().collect();
                    Tensor::new(inputs[1].shape(), sum_in_order(parts, cout * k)).unwrap()
                });
                let mut grads = vec![dx, dw];
                if inputs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        Tensor::new(&[cout], bias_grad(gd, batch, cout, p)).unwrap()
                    }));
                }
                grads
            }),
        ))
    }

    /// 3D transposed convolution. `x: [N, Cin, D, H, W]`,
    /// `w: [Cin, Cout, k, k, k]`, `bias: [Cout]`. With kernel 3, padding 1
    /// and output padding 1 a stride-2 layer exactly doubles each extent.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose3d";
        self.value(x).expect_rank(OP, 5)?;
        self.value(w).expect_rank(OP, 5)?;
        if output_padding >= stride {
            return Err(invalid(OP, "output padding must be smaller than the stride"));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, cout) = (xs[0], xs[1], ws[1]);
        if ws[0] != cin {
            return Err(AutodiffError::ShapeMismatch {
                op: OP,
                expected: vec![cin, cout],
                got: ws[..2].to_vec(),
            });
        }
        check_bias(self, bias, cout, OP)?;
        let kernel = [ws[2], ws[3], ws[4]];
        let mut big = [0; 3];
        for a in 0..3 {
            big[a] = conv_transpose_output_len(xs[2 + a], kernel[a], stride, padding, output_padding)
                .filter(|&v| v > 0)
                .ok_or_else(|| invalid(OP, format!("kernel {kernel:?} too small for padding")))?;
        }
        // The adjoint forward convolution maps the output volume back onto
        // the input volume.
        let geo = Geometry::new(big, kernel, [stride; 3], [padding; 3])
            .filter(|g| g.output == [xs[2], xs[3], xs[4]])
            .ok_or_else(|| invalid(OP, "inconsistent transposed geometry"))?;
        let (k, p, out_len) = (cout * geo.kernel_len(), geo.output_len(), cout * geo.input_len());

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let outs: Vec<Vec<f64>> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let xn = &xd[n * cin * p..(n + 1) * cin * p];
                let mut cols = vec![0.0; k * p];
                gemm(k, cin, p, wd, true, xn, false, 0.0, &mut cols);
                let mut out = vec![0.0; out_len];
                col2im(&cols, cout, &geo, &mut out);
                if let Some(bd) = &bd {
                    let plane = geo.input_len();
                    for (c, &bv) in bd.iter().enumerate() {
                        for v in &mut out[c * plane..(c + 1) * plane] {
                            *v += bv;
                        }
                    }
                }
                out
            })
            .collect();
        let out_shape = vec![batch, cout, big[0], big[1], big[2]];
        let value = Tensor::new(&out_shape, outs.concat())?;

        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.custom(
            value,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let (xd, wd, gd) = (inputs[0].data(), inputs[1].data(), g.data());
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..batch)
                    .into_par_iter()
                    .map(|n| {
                        let gcols = im2col(&gd[n * out_len..(n + 1) * out_len], cout, &geo);
                        let dx = needs[0].then(|| {
                            let mut dx = vec![0.0; cin * p];
                            gemm(cin, k, p, wd, false, &gcols, false, 0.0, &mut dx);
                            dx
                        });
                        let dw = needs[1].then(|| {
                            let xn = &xd[n * cin * p..(n + 1) * cin * p];
                            let mut dw = vec![0.0; cin * k];
                            gemm(cin, p, k, xn, false, &gcols, true, 0.0, &mut dw);
                            dw
                        });
                        (dx, dw)
                    })
                    .collect();
                let (dxs, dws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
                let dx = needs[0].then(|| {
                    let data: Vec<f64> = dxs.into_iter().flatten().flatten().collect();
                    Tensor::new(inputs[0].shape(), data).unwrap()
                });
                let dw = needs[1].then(|| {
                    let parts: Vec<Vec<f64>> = dws.into_iter().flatten().collect();
                    Tensor::new(inputs[1].shape(), sum_in_order(parts, cin * k)).unwrap()
                });
                let mut grads = vec![dx, dw];
                if inputs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        Tensor::new(&[cout], bias_grad(gd, batch, cout, geo.input_len())).unwrap()
                    }));
                }
                grads
            }),
        ))
    }
}
