use crate::error::{invalid, Result};
use crate::graph::{Graph, Mode, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics observed on a training batch, for updating the
/// running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Graph {
    /// Batch normalization over every axis except the channel axis 1.
    ///
    /// In [`Mode::Train`] the batch statistics are used and returned; in
    /// [`Mode::Eval`] the supplied running statistics are used and the layer
    /// is a fixed affine map of `x`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm", format!("shape {shape:?} has no channel axis")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        for t in [self.value(gamma), self.value(beta), running_mean, running_var] {
            t.expect_shape("batch_norm", &[channels])?;
        }
        let count = batch * plane;
        let xd = self.value(x).data();
        let idx = move |n: usize, c: usize| (n * channels + c) * plane;

        let (mean, inv_std, stats) = match self.mode() {
            Mode::Train => {
                if count < 2 {
                    return Err(invalid("batch_norm", "training mode needs at least two values per channel"));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for n in 0..batch {
                        s += xd[idx(n, c)..idx(n, c) + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for n in 0..batch {
                        q += xd[idx(n, c)..idx(n, c) + plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = q / count as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1) as f64)
                    .collect();
                (mean.clone(), inv_std, Some(BatchStats { mean, var: unbiased }))
            }
            Mode::Eval => (
                running_mean.data().to_vec(),
                running_var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                None,
            ),
        };

        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..batch {
            for c in 0..channels {
                let s = idx(n, c);
                for i in s..s + plane {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let training = self.mode() == Mode::Train;
        let var = self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |g, inputs, _, needs| {
                let gdat = g.data();
                let gamma = inputs[1].data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let s = idx(n, c);
                        for i in s..s + plane {
                            dgamma[c] += gdat[i] * xhat[i];
                            dbeta[c] += gdat[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gdat.len()];
                    for c in 0..channels {
                        let k = gamma[c] * inv_std[c];
                        if training {
                            let mean_g = dbeta[c] / count as f64;
                            let mean_gx = dgamma[c] / count as f64;
                            for n in 0..batch {
                                let s = idx(n, c);
                                for i in s..s + plane {
                                    dx[i] = k * (gdat[i] - mean_g - xhat[i] * mean_gx);
                                }
                            }
                        } else {
                            for n in 0..batch {
                                let s = idx(n, c);
                                for i in s..s + plane {
                                    dx[i] = k * gdat[i];
                                }
                            }
                        }
                    }
                    Tensor::new(inputs[0].shape(), dx).unwrap()
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::new(&[channels], dgamma).unwrap()),
                    needs[2].then(|| Tensor::new(&[channels], dbeta).unwrap()),
                ]
            }),
        );
        Ok((var, stats))
    }
}
