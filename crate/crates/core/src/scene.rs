//! Procedural stereo scenes with exact depth and disparity ground truth.
//!
//! A scene is a stack of textured fronto-parallel layers. The farthest layer
//! fills the frame; nearer layers are rectangles that occlude what lies
//! behind them. The right camera sees every layer shifted left by its
//! disparity `f * b / depth`. Two monocular cues are rendered: texture
//! features shrink with distance, and aerial haze pulls far layers towards
//! a bright, low-contrast veil.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::{DepthMap, DisparityMap, Grid};
use crate::spike::IntensityClip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub focal_px: f64,
    /// Stereo baseline in meters.
    pub baseline_m: f64,
    /// Depth normalization ceiling in meters.
    pub d_max: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            focal_px: 256.0,
            baseline_m: 2.0,
            d_max: 500.0,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("focal_px", self.focal_px),
            ("baseline_m", self.baseline_m),
            ("d_max", self.d_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid("camera rig", format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `f * b`: disparity (px) times depth (m).
    pub fn focal_baseline(&self) -> f64 {
        self.focal_px * self.baseline_m
    }

    pub fn disparity_of(&self, depth: f64) -> f64 {
        self.focal_baseline() / depth
    }

    pub fn depth_of(&self, disparity: f64) -> f64 {
        self.focal_baseline() / disparity
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    Checker,
    #[default]
    Noise,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub layer_count: usize,
    /// `[d_near, d_far]` in meters.
    pub depth_range: [f64; 2],
    pub texture_mode: TextureMode,
    pub motion_px_per_frame: f64,
    /// Distance over which haze halves contrast by a factor e.
    pub haze_length_m: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            frames: 100,
            layer_count: 4,
            depth_range: [5.0, 500.0],
            texture_mode: TextureMode::Noise,
            motion_px_per_frame: 0.02,
            haze_length_m: 250.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        rig.validate()?;
        let [near, far] = self.depth_range;
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(invalid("scene config", "width, height and frames must be at least 1"));
        }
        if self.layer_count == 0 {
            return Err(invalid("scene config", "layer_count must be at least 1"));
        }
        if !(near > 0.0 && near < far && far <= rig.d_max) {
            return Err(invalid(
                "scene config",
                format!("need 0 < d_near < d_far <= d_max, got [{near}, {far}] with d_max {}", rig.d_max),
            ));
        }
        if !self.motion_px_per_frame.is_finite() || !(self.haze_length_m > 0.0) {
            return Err(invalid("scene config", "motion must be finite and haze length positive"));
        }
        Ok(())
    }
}

/// One fronto-parallel layer, in left-view pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub depth: f64,
    /// Covered columns `[x0, x1)` and rows `[y0, y1)` in the left view.
    pub x0: f64,
    pub x1: f64,
    pub y0: usize,
    pub y1: usize,
    pub texture: Texture,
}

impl Layer {
    fn covers(&self, x_left: f64, row: usize) -> bool {
        row >= self.y0 && row < self.y1 && x_left >= self.x0 && x_left < self.x1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub mode: TextureMode,
    /// Feature size in pixels.
    pub cell_px: f64,
    pub low: f64,
    pub high: f64,
    pub key: u64,
}

fn hash01(key: u64, ix: i64, iy: i64) -> f64 {
    // SplitMix64 finalizer over the lattice coordinates.
    let mut z = key
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    /// Albedo at continuous layer coordinates.
    pub fn albedo(&self, u: f64, v: f64) -> f64 {
        let (cu, cv) = (u / self.cell_px, v / self.cell_px);
        let t = match self.mode {
            TextureMode::Checker => ((cu.floor() as i64 + cv.floor() as i64).rem_euclid(2)) as f64,
            TextureMode::Stripes => (cu.floor() as i64).rem_euclid(2) as f64,
            TextureMode::Noise => {
                let (ix, iy) = (cu.floor(), cv.floor());
                let (fx, fy) = (cu - ix, cv - iy);
                let (ix, iy) = (ix as i64, iy as i64);
                let a = hash01(self.key, ix, iy);
                let b = hash01(self.key, ix + 1, iy);
                let c = hash01(self.key, ix, iy + 1);
                let d = hash01(self.key, ix + 1, iy + 1);
                let top = a + (b - a) * fx;
                let bot = c + (d - c) * fx;
                top + (bot - top) * fy
            }
        };
        self.low + (self.high - self.low) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left_clip: IntensityClip,
    pub right_clip: IntensityClip,
    pub left_depth_gt: DepthMap,
    pub right_depth_gt: DepthMap,
    pub right_disparity_gt: DisparityMap,
    /// Layers far to near.
    pub layers: Vec<Layer>,
}

/// Haze veil luminance.
const HAZE_LEVEL: f64 = 0.92;
/// World feature size in meters; projected size is `f * s / depth` pixels.
const FEATURE_SIZE_M: f64 = 0.6;
const MIN_CELL_PX: f64 = 1.5;

fn sample_layers(cfg: &SceneConfig, rig: &CameraRig, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let [near, far] = cfg.depth_range;
    let (ln_near, ln_far) = (near.ln(), far.ln());
    let mut depths: Vec<f64> = (0..cfg.layer_count)
        .map(|_| rng.random_range(ln_near..=ln_far).exp())
        .collect();
    depths.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    depths
        .into_iter()
        .enumerate()
        .map(|(i, depth)| {
            let lo: f64 = rng.random_range(0.05..0.35);
            let span: f64 = rng.random_range(0.25..0.6);
            let texture = Texture {
                mode: cfg.texture_mode,
                cell_px: (rig.focal_px * FEATURE_SIZE_M / depth).max(MIN_CELL_PX),
                low: lo,
                high: (lo + span).min(1.0),
                key: rng.random(),
            };
            if i == 0 {
                // Background: covers the frame in both views.
                return Layer {
                    depth,
                    x0: f64::NEG_INFINITY,
                    x1: f64::INFINITY,
                    y0: 0,
                    y1: cfg.height,
                    texture,
                };
            }
            let lw = rng.random_range(0.2..0.6) * w;
            let lh = rng.random_range(0.25..0.7) * h;
            let x0 = rng.random_range(0.0..(w - lw).max(1.0));
            let y0 = rng.random_range(0.0..(h - lh).max(1.0)) as usize;
            let y1 = (y0 + lh.round() as usize).clamp(y0 + 1, cfg.height);
            Layer {
                depth,
                x0,
                x1: x0 + lw,
                y0,
                y1,
                texture,
            }
        })
        .collect()
}

/// Renders one view. `shift` maps a view column to left-view layer
/// coordinates: `x_left = x + shift(layer)`.
fn render_view(
    cfg: &SceneConfig,
    layers: &[Layer],
    disparities: &[f64],
    right: bool,
) -> (IntensityClip, DepthMap) {
    let (w, h, t_len) = (cfg.width, cfg.height, cfg.frames);
    let plane = w * h;
    let offset = |li: usize| if right { disparities[li] } else { 0.0 };
    // Topmost layer index per pixel; the view geometry is static.
    let mut top = vec![usize::MAX; plane];
    for (li, layer) in layers.iter().enumerate() {
        for row in 0..h {
            for col in 0..w {
                let x = col as f64 + 0.5 + offset(li);
                if layer.covers(x, row) {
                    top[row * w + col] = li;
                }
            }
        }
    }
    let depth_data = top
        .iter()
        .map(|&li| if li == usize::MAX { f64::NAN } else { layers[li].depth })
        .collect();
    let depth = DepthMap(Grid::new(h, w, depth_data).expect("dims"));

    let contrast: Vec<f64> = layers
        .iter()
        .map(|l| (-l.depth / cfg.haze_length_m).exp())
        .collect();
    let mut data = vec![0.0; t_len * plane];
    for t in 0..t_len {
        let drift = cfg.motion_px_per_frame * t as f64;
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                let li = top[p];
                let value = if li == usize::MAX {
                    HAZE_LEVEL
                } else {
                    let u = col as f64 + 0.5 + offset(li) - drift;
                    let a = layers[li].texture.albedo(u, row as f64 + 0.5);
                    HAZE_LEVEL + (a - HAZE_LEVEL) * contrast[li]
                };
                data[t * plane + p] = value.clamp(0.0, 1.0);
            }
        }
    }
    let clip = IntensityClip::new(t_len, h, w, data, 1.0).expect("rendered clip is valid");
    (clip, depth)
}

/// Composites explicit layers (far to near) into a stereo sample.
pub fn render_layers(cfg: &SceneConfig, rig: &CameraRig, layers: Vec<Layer>) -> Result<StereoSample> {
    rig.validate()?;
    if layers.iter().any(|l| !(l.depth > 0.0)) {
        return Err(invalid("layer", "depths must be positive"));
    }
    let disparities: Vec<f64> = layers.iter().map(|l| rig.disparity_of(l.depth)).collect();
    let (left_clip, left_depth_gt) = render_view(cfg, &layers, &disparities, false);
    let (right_clip, right_depth_gt) = render_view(cfg, &layers, &disparities, true);
    let right_disparity_gt = depth_to_disparity(&right_depth_gt, rig)?;
    Ok(StereoSample {
        left_clip,
        right_clip,
        left_depth_gt,
        right_depth_gt,
        right_disparity_gt,
        layers,
    })
}

/// Generates a scene; a pure function of `(cfg, rig)`.
pub fn generate_scene(cfg: &SceneConfig, rig: &CameraRig) -> Result<StereoSample> {
    cfg.validate(rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = sample_layers(cfg, rig, &mut rng);
    render_layers(cfg, rig, layers)
}

pub fn depth_to_disparity(depth: &DepthMap, rig: &CameraRig) -> Result<DisparityMap> {
    rig.validate()?;
    depth.check_positive("depth")?;
    let data = depth.data.iter().map(|&d| rig.disparity_of(d)).collect();
    Ok(DisparityMap(Grid::new(depth.height, depth.width, data)?))
}

pub fn disparity_to_depth(disparity: &DisparityMap, rig: &CameraRig) -> Result<DepthMap> {
    rig.validate()?;
    disparity.check_positive("disparity")?;
    let data = disparity.data.iter().map(|&d| rig.depth_of(d)).collect();
    Ok(DepthMap(Grid::new(disparity.height, disparity.width, data)?))
}

/// Depth divided by `d_max`, with the number of valid pixels that exceeded
/// `d_max` and were clamped to 1.
pub fn normalize_depth(depth: &DepthMap, rig: &CameraRig) -> Result<(Grid, usize)> {
    rig.validate()?;
    depth.check_positive("depth")?;
    let mut clamped = 0;
    let data = depth
        .data
        .iter()
        .map(|&d| {
            if d.is_nan() {
                d
            } else if d > rig.d_max {
                clamped += 1;
                1.0
            } else {
                d / rig.d_max
            }
        })
        .collect();
    Ok((Grid::new(depth.height, depth.width, data)?, clamped))
}

pub fn denormalize_depth(normalized: &Grid, rig: &CameraRig) -> DepthMap {
    DepthMap(Grid {
        height: normalized.height,
        width: normalized.width,
        data: normalized.data.iter().map(|v| v * rig.d_max).collect(),
    })
}
