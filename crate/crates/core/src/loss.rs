//! Training objectives.
//!
//! Scalar versions operate on rasters with a validity mask and are used by
//! tests and diagnostics. The `*_var` versions build the same quantities on
//! an autodiff graph over `[N, 1, H, W]` tensors, where invalid pixels carry
//! a zero in the mask tensor.

use autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::Grid;

pub use autodiff::ops::elementwise::smooth_l1_scalar as smooth_l1;

/// Floor and ceiling of predicted uncertainties.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1.0 - 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// One weight per hourglass output, first to last.
    pub alpha: Vec<f64>,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: vec![0.5, 0.7, 1.0],
            eta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, hourglasses: usize) -> Result<()> {
        if self.alpha.len() != hourglasses {
            return Err(invalid(
                "loss weights",
                format!("{} alpha weights for {hourglasses} hourglasses", self.alpha.len()),
            ));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(invalid("loss weights", "alpha weights must be positive"));
        }
        Ok(())
    }
}

fn checked_count(mask: &[bool], len: usize, what: &'static str) -> Result<usize> {
    if mask.len() != len {
        return Err(Error::Shape {
            what,
            expected: vec![len],
            got: vec![mask.len()],
        });
    }
    match mask.iter().filter(|m| **m).count() {
        0 => Err(Error::EmptyMask { what }),
        n => Ok(n),
    }
}

/// `(1/N) sum_i sum_j alpha_i * smooth_l1(gt_j - pred_ij)` over valid pixels.
pub fn disparity_loss(preds: &[Grid], gt: &Grid, mask: &[bool], w: &LossWeights) -> Result<f64> {
    w.validate(preds.len())?;
    let n = checked_count(mask, gt.len(), "disparity loss")?;
    let mut total = 0.0;
    for (pred, alpha) in preds.iter().zip(&w.alpha) {
        gt.same_shape(pred, "disparity loss")?;
        let s: f64 = (0..gt.len())
            .filter(|&j| mask[j])
            .map(|j| smooth_l1(gt.data[j] - pred.data[j]))
            .sum();
        total += alpha * s;
    }
    Ok(total / n as f64)
}

/// Scale-invariant log loss: `mean(c^2) - mean(c)^2 + eta` with
/// `c = log(gt) - log(pred)`.
pub fn silog_depth_loss(pred: &Grid, gt: &Grid, mask: &[bool], eta: f64) -> Result<f64> {
    gt.same_shape(pred, "silog loss")?;
    let n = checked_count(mask, gt.len(), "silog loss")? as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for j in (0..gt.len()).filter(|&j| mask[j]) {
        let (p, g) = (pred.data[j], gt.data[j]);
        if !(p > 0.0) || !(g > 0.0) {
            return Err(Error::NonPositive {
                what: "silog loss depth",
                index: j,
                value: if p > 0.0 { g } else { p },
            });
        }
        let c = g.ln() - p.ln();
        s += c;
        s2 += c * c;
    }
    Ok(s2 / n - (s * s) / (n * n) + eta)
}

/// Laplace negative log-likelihood surrogate for one pixel, without the
/// clamp-range check.
pub fn uncertainty_term(error: f64, sigma: f64) -> f64 {
    sigma.ln() + error.abs() / sigma
}

/// Mean of `log(sigma) + |pred - gt| / sigma` over valid pixels.
pub fn uncertainty_loss(pred: &Grid, gt: &Grid, sigma: &Grid, mask: &[bool]) -> Result<f64> {
    gt.same_shape(pred, "uncertainty loss")?;
    gt.same_shape(sigma, "uncertainty loss")?;
    let n = checked_count(mask, gt.len(), "uncertainty loss")?;
    let mut total = 0.0;
    for j in (0..gt.len()).filter(|&j| mask[j]) {
        let s = sigma.data[j];
        if !(SIGMA_MIN..=SIGMA_MAX).contains(&s) {
            return Err(invalid(
                "uncertainty loss",
                format!("sigma {s} at pixel {j} is outside [{SIGMA_MIN}, {SIGMA_MAX}]"),
            ));
        }
        total += uncertainty_term(pred.data[j] - gt.data[j], s);
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Disparity and depth regression only.
    Base,
    /// Adds both uncertainty losses.
    #[default]
    Ugdf,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "ugdf" => Ok(Self::Ugdf),
            _ => Err(invalid("loss mode", format!("expected base or ugdf, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub disp: f64,
    pub depth: f64,
    pub mono_unc: f64,
    pub ster_unc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_disp: f64,
    pub loss_depth: f64,
    /// Present in UGDF mode only.
    pub loss_mono_unc: Option<f64>,
    pub loss_ster_unc: Option<f64>,
    pub total: f64,
}

pub fn total_loss(mode: LossMode, parts: LossParts) -> LossBreakdown {
    let base = parts.disp + parts.depth;
    match mode {
        LossMode::Base => LossBreakdown {
            loss_disp: parts.disp,
            loss_depth: parts.depth,
            loss_mono_unc: None,
            loss_ster_unc: None,
            total: base,
        },
        LossMode::Ugdf => LossBreakdown {
            loss_disp: parts.disp,
            loss_depth: parts.depth,
            loss_mono_unc: Some(parts.mono_unc),
            loss_ster_unc: Some(parts.ster_unc),
            total: base + parts.mono_unc + parts.ster_unc,
        },
    }
}

/// Ground truth packed for graph losses: NaN replaced by `fill`, and a 0/1
/// mask tensor.
pub struct Target {
    pub values: Tensor,
    pub mask: Tensor,
    /// Valid pixels per batch element.
    pub counts: Vec<usize>,
}

impl Target {
    /// Stacks rasters into `[N, 1, H, W]`.
    pub fn from_grids(grids: &[&Grid], fill: f64) -> Result<Self> {
        let first = grids.first().ok_or_else(|| invalid("target", "empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut values = Vec::with_capacity(grids.len() * h * w);
        let mut mask = Vec::with_capacity(values.capacity());
        let mut counts = Vec::new();
        for g in grids {
            first.same_shape(g, "target")?;
            counts.push(g.valid_count());
            for &v in &g.data {
                values.push(if v.is_nan() { fill } else { v });
                mask.push(if v.is_nan() { 0.0 } else { 1.0 });
            }
        }
        let shape = [grids.len(), 1, h, w];
        Ok(Self {
            values: Tensor::new(&shape, values)?,
            mask: Tensor::new(&shape, mask)?,
            counts,
        })
    }

    fn total(&self, what: &'static str) -> Result<usize> {
        match self.counts.iter().sum() {
            0 => Err(Error::EmptyMask { what }),
            n => Ok(n),
        }
    }
}

fn masked_sum(g: &mut Graph, x: Var, mask: Var) -> Result<Var> {
    let m = g.mul(x, mask)?;
    Ok(g.sum(m))
}

/// Graph form of [`disparity_loss`], pooled over the batch.
pub fn disparity_loss_var(g: &mut Graph, preds: &[Var], target: &Target, w: &LossWeights) -> Result<Var> {
    w.validate(preds.len())?;
    let n = target.total("disparity loss")? as f64;
    let gt = g.constant(target.values.clone());
    let mask = g.constant(target.mask.clone());
    let mut terms = Vec::new();
    for (&pred, alpha) in preds.iter().zip(&w.alpha) {
        let diff = g.sub(gt, pred)?;
        let l = g.smooth_l1(diff);
        let s = masked_sum(g, l, mask)?;
        terms.push(g.scale(s, alpha / n));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Graph form of [`silog_depth_loss`], computed per batch element and
/// averaged. Predictions are floored at `1e-6` before the logarithm.
pub fn silog_depth_loss_var(g: &mut Graph, pred: Var, target: &Target, eta: f64) -> Result<Var> {
    target.total("silog loss")?;
    let log_gt = target.values.zip_map(&target.mask, |v, m| if m > 0.0 { v.ln() } else { 0.0 });
    let log_gt = g.constant(log_gt);
    let mask = g.constant(target.mask.clone());
    let floored = g.clamp(pred, 1e-6, f64::INFINITY);
    let log_pred = g.log(floored)?;
    let c = g.sub(log_gt, log_pred)?;
    let c = g.mul(c, mask)?;
    let mut total: Option<Var> = None;
    let mut used = 0;
    for (b, &n) in target.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        used += 1;
        let n = n as f64;
        let cb = g.narrow(c, 0, b, 1)?;
        let sq = g.square(cb);
        let s2 = g.sum(sq);
        let s = g.sum(cb);
        let s_sq = g.square(s);
        let a = g.scale(s2, 1.0 / n);
        let b2 = g.scale(s_sq, 1.0 / (n * n));
        let l = g.sub(a, b2)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let mean = g.scale(total.expect("nonempty"), 1.0 / used as f64);
    Ok(g.add_scalar(mean, eta))
}

/// Graph form of [`uncertainty_loss`], pooled over the batch.
pub fn uncertainty_loss_var(g: &mut Graph, pred: Var, sigma: Var, target: &Target) -> Result<Var> {
    let n = target.total("uncertainty loss")? as f64;
    let gt = g.constant(target.values.clone());
    let mask = g.constant(target.mask.clone());
    let log_sigma = g.log(sigma)?;
    let diff = g.sub(pred, gt)?;
    let err = g.abs(diff);
    let ratio = g.div(err, sigma)?;
    let per_pixel = g.add(log_sigma, ratio)?;
    let s = masked_sum(g, per_pixel, mask)?;
    Ok(g.scale(s, 1.0 / n))
}
