use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, weight of i1)` for half-pixel-centred resampling of
/// an axis of length `len` by an integer `factor`.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Graph {
    /// Bilinear upsampling of `[N, C, H, W]` by an integer factor, with
    /// half-pixel centres and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.value(x).expect_rank("upsample_bilinear", 4)?;
        if factor == 0 {
            return Err(invalid("upsample_bilinear", "factor must be positive"));
        }
        let s = self.shape(x).to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = taps(h, factor);
        let tx = taps(w, factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    dst[y * ow + xx] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        Ok(self.custom(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let v = gp[y * ow + xx];
                            dp[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                            dp[y0 * w + x1] += v * (1.0 - wy) * wx;
                            dp[y1 * w + x0] += v * wy * (1.0 - wx);
                            dp[y1 * w + x1] += v * wy * wx;
                        }
                    }
                }
                vec![Some(Tensor::new(&s, dx).unwrap())]
            }),
        ))
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_bilinear(x, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_stays_constant() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 1.75));
        let y = g.upsample_bilinear(x, 8).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 24, 40]);
        assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn two_x_interpolates_between_neighbours() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 4.0]).unwrap());
        let y = g.upsample_bilinear_2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }
}
