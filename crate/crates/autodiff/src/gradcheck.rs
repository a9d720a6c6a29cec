//! Reverse-mode gradients checked against central finite differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Checks at most this many coordinates per input, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            seed: 0,
            max_coords_per_input: None,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - b| / max(|a|, |b|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `L = <r, f(inputs)>` against
/// central differences, where `r` is a fixed random weighting whose
/// entries have magnitude in `[0.5, 1.5]` and random sign.
///
/// Finite differences are taken per output element before weighting, so
/// outputs that do not depend on the perturbed coordinate contribute
/// exactly zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new(opts.mode);
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let out_shape = g.value(out).shape().to_vec();
    let weights: Vec<f64> = (0..g.value(out).numel())
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let seed = Tensor::new(&out_shape, weights.clone())?;
    let grads = g.backward_with(out, seed)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + opts.step;
            let (gp, _, op) = eval(&work)?;
            work[k].data_mut()[i] = x0 - opts.step;
            let (gm, _, om) = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric: f64 = gp
                .value(op)
                .data()
                .iter()
                .zip(gm.value(om).data())
                .zip(&weights)
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * opts.step);
            let err = relative_error(analytic[k].data()[i], numeric);
            report.coords_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = grad_check(|g, v| g.add(v[0], v[1]), &[a, b], GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.coords_checked, 24);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::new(&[3], vec![0.3, 1.2, -0.7]).unwrap();
        let r = grad_check(
            |g, v| {
                let value = g.value(v[0]).map(|t| t * t);
                Ok(g.custom(value, &[v[0]], Box::new(|gr, _, _, _| vec![Some(gr.clone())])))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::ones(&[100]);
        let opts = GradCheckOptions {
            max_coords_per_input: Some(7),
            ..Default::default()
        };
        let r = grad_check(|g, v| Ok(g.exp(v[0])), &[x], opts).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
