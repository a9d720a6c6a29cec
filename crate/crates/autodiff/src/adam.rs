use std::collections::BTreeMap;

use crate::error::{invalid, AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter updated so far.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(config.beta1) || !ok(config.beta2) {
            return Err(invalid("adam", "betas must lie in [0, 1)"));
        }
        if config.lr < 0.0 || config.epsilon <= 0.0 {
            return Err(invalid("adam", "lr must be non-negative and epsilon positive"));
        }
        Ok(Self {
            config,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        if params.is_buffer(name) {
            return Err(invalid("adam", format!("`{name}` is a buffer, not a parameter")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate: `initial` until `decay_at`, then
/// `decayed`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_at: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_at {
            self.initial
        } else {
            self.decayed
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            decayed: 0.33e-3,
            decay_at: 35,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s
    }

    fn grads(vals: &[f64]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            adam_step(&mut p, &grads(&[0.0, 0.0]), &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        let g = [3.0, -0.25, 1e-3];
        adam_step(&mut p, &grads(&g), &mut st).unwrap();
        for (v, gi) in p.get("w").unwrap().data().iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((v - expected).abs() < 1e-15);
            assert!((v + 1e-3 * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        assert!(adam_step(&mut p, &grads(&[1.0]), &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut p = store(&[0.3, -0.7]);
            let mut st = AdamState::new(AdamConfig::default()).unwrap();
            let mut traj = Vec::new();
            for k in 0..20 {
                let w = p.get("w").unwrap().data().to_vec();
                let g = [2.0 * w[0] + k as f64 * 0.01, w[1].sin()];
                adam_step(&mut p, &grads(&g), &mut st).unwrap();
                traj.extend_from_slice(p.get("w").unwrap().data());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_steps_down() {
        let s = StepSchedule::default();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(34), 1e-3);
        assert_eq!(s.lr_at(35), 0.33e-3);
    }

    #[test]
    fn invalid_betas_rejected() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(cfg).is_err());
    }
}
