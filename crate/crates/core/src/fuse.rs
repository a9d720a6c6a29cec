//! Uncertainty-guided selection between monocular and stereo depth, plus the
//! uniform ensemble baseline. All maps are metric depth in meters.

use autodiff::ops::elementwise::sigmoid_scalar;

use crate::error::{invalid, Result};
use crate::raster::{DepthMap, Grid, UncertaintyMap};

/// `d_max * e^(2(sm - ss)) / (1 + e^(2(sm - ss)))` per pixel.
pub fn distance_threshold(sigma_m: &UncertaintyMap, sigma_s: &UncertaintyMap, d_max: f64) -> Result<Grid> {
    sigma_m.same_shape(sigma_s, "distance threshold")?;
    if !(d_max > 0.0) {
        return Err(invalid("distance threshold", format!("d_max must be positive, got {d_max}")));
    }
    for (name, map) in [("sigma_m", sigma_m), ("sigma_s", sigma_s)] {
        if let Some(v) = map.data.iter().find(|v| !(**v > 0.0 && **v < 1.0) && !v.is_nan()) {
            return Err(invalid("distance threshold", format!("{name} value {v} is outside (0, 1)")));
        }
    }
    let data = sigma_m
        .data
        .iter()
        .zip(&sigma_s.data)
        .map(|(m, s)| d_max * sigmoid_scalar(2.0 * (m - s)))
        .collect();
    Grid::new(sigma_m.height, sigma_m.width, data)
}

/// `true` (monocular) where the monocular depth exceeds the threshold;
/// equality and invalid pixels select stereo.
pub fn fusion_mask(mono: &DepthMap, threshold: &Grid) -> Result<Vec<bool>> {
    mono.same_shape(threshold, "fusion mask")?;
    Ok(mono.data.iter().zip(&threshold.data).map(|(m, t)| m > t).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedDepth {
    pub depth: DepthMap,
    /// Pixels valid in exactly one input, which passed through unchanged.
    pub single_source: Vec<bool>,
}

fn combine(mono: &DepthMap, stereo: &DepthMap, both: impl Fn(usize, f64, f64) -> f64) -> Result<FusedDepth> {
    mono.same_shape(stereo, "fusion")?;
    let mut single_source = vec![false; mono.len()];
    let data = (0..mono.len())
        .map(|i| {
            let (m, s) = (mono.data[i], stereo.data[i]);
            match (m.is_nan(), s.is_nan()) {
                (false, false) => both(i, m, s),
                (true, true) => f64::NAN,
                (false, true) => {
                    single_source[i] = true;
                    m
                }
                (true, false) => {
                    single_source[i] = true;
                    s
                }
            }
        })
        .collect();
    Ok(FusedDepth {
        depth: DepthMap(Grid::new(mono.height, mono.width, data)?),
        single_source,
    })
}

/// `F * mono + (1 - F) * stereo`, realized as a per-pixel selection.
pub fn fuse(mono: &DepthMap, stereo: &DepthMap, mask: &[bool]) -> Result<FusedDepth> {
    if mask.len() != mono.len() {
        return Err(invalid("fuse", format!("mask has {} pixels, maps have {}", mask.len(), mono.len())));
    }
    combine(mono, stereo, |i, m, s| if mask[i] { m } else { s })
}

/// Uniform linear blend of both branches.
pub fn ensemble_fuse(mono: &DepthMap, stereo: &DepthMap) -> Result<FusedDepth> {
    combine(mono, stereo, |_, m, s| 0.5 * m + 0.5 * s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub fused_depth: DepthMap,
    /// `true` where the monocular branch was chosen.
    pub mask: Vec<bool>,
    /// Distance threshold in meters.
    pub threshold: Grid,
    pub single_source: Vec<bool>,
}

/// Threshold, mask and selection in one call.
pub fn guided_fusion(
    mono: &DepthMap,
    stereo: &DepthMap,
    sigma_m: &UncertaintyMap,
    sigma_s: &UncertaintyMap,
    d_max: f64,
) -> Result<FusionResult> {
    let threshold = distance_threshold(sigma_m, sigma_s, d_max)?;
    let mask = fusion_mask(mono, &threshold)?;
    let fused = fuse(mono, stereo, &mask)?;
    Ok(FusionResult {
        fused_depth: fused.depth,
        mask,
        threshold,
        single_source: fused.single_source,
    })
}
