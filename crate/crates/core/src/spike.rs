//! Integrate-and-fire spike camera model and spike-voxel utilities.
//!
//! Every pixel integrates luminance over discrete time steps and fires a
//! one-bit spike whenever the accumulated charge reaches the threshold.
//! The resulting `T x H x W` binary stack is stored bit-packed.

use autodiff::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};
use crate::raster::Grid;

/// Normalized luminance over time, `frames[t][row][col]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Seconds (or frame periods) per step.
    pub dt: f64,
}

impl IntensityClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>, dt: f64) -> Result<Self> {
        let clip = Self {
            frames,
            height,
            width,
            data,
            dt,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn constant(frames: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width], 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("intensity clip", "all dimensions must be at least 1"));
        }
        if self.data.len() != self.frames * self.height * self.width {
            return Err(Error::Shape {
                what: "intensity clip",
                expected: vec![self.frames, self.height, self.width],
                got: vec![self.data.len()],
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("intensity clip", format!("dt must be positive, got {}", self.dt)));
        }
        if let Some((i, v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(invalid(
                "intensity clip",
                format!("intensity {v} at flat index {i} is outside [0, 1]"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    /// Charge returns to zero after a spike.
    #[default]
    ResetToZero,
    /// The threshold is subtracted, keeping residual charge.
    SubtractThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FiringConfig {
    pub theta: f64,
    pub reset_mode: ResetMode,
}

impl Default for FiringConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            reset_mode: ResetMode::ResetToZero,
        }
    }
}

/// Bit-packed `T x H x W` binary spike stack, `(t, row, col)` row-major,
/// most significant bit first within each byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeVoxel {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

pub fn packed_len(elements: usize) -> usize {
    elements.div_ceil(8)
}

impl SpikeVoxel {
    /// Wraps an already packed payload.
    pub fn from_packed(frames: usize, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        let n = frames * height * width;
        if bits.len() != packed_len(n) {
            return Err(Error::Shape {
                what: "spike voxel payload",
                expected: vec![packed_len(n)],
                got: vec![bits.len()],
            });
        }
        let mut v = Self {
            frames,
            height,
            width,
            bits,
        };
        // Padding bits of the last byte are kept clear so equality is exact.
        if n % 8 != 0 {
            if let Some(last) = v.bits.last_mut() {
                *last &= 0xFFu8 << (8 - n % 8);
            }
        }
        Ok(v)
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            bits: vec![0; packed_len(frames * height * width)],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        self.bits[i / 8] & (0x80 >> (i % 8)) != 0
    }

    #[inline]
    fn set_flat(&mut self, i: usize) {
        self.bits[i / 8] |= 0x80 >> (i % 8);
    }

    pub fn get(&self, t: usize, row: usize, col: usize) -> bool {
        self.get_flat((t * self.height + row) * self.width + col)
    }

    /// Spike count of every pixel over the whole stack.
    pub fn counts(&self) -> Vec<u32> {
        let plane = self.height * self.width;
        let mut counts = vec![0u32; plane];
        for t in 0..self.frames {
            for (p, c) in counts.iter_mut().enumerate() {
                *c += self.get_flat(t * plane + p) as u32;
            }
        }
        counts
    }

    /// Frames as `f64` 0/1 values, shape `[T, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = (0..self.len()).map(|i| self.get_flat(i) as u8 as f64).collect();
        Tensor::new(&[self.frames, self.height, self.width], data).expect("voxel dims")
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<SpikeVoxel> {
        if start + len > self.frames {
            return Err(invalid("frame range", format!("{start}+{len} exceeds {}", self.frames)));
        }
        let plane = self.height * self.width;
        let mut out = SpikeVoxel::zeros(len, self.height, self.width);
        for i in 0..len * plane {
            if self.get_flat(start * plane + i) {
                out.set_flat(i);
            }
        }
        Ok(out)
    }

    /// The same scene translated `shift` columns to the right; columns that
    /// enter from the left edge are silent.
    pub fn shift_columns(&self, shift: usize) -> SpikeVoxel {
        let mut out = SpikeVoxel::zeros(self.frames, self.height, self.width);
        for t in 0..self.frames {
            for r in 0..self.height {
                for c in shift..self.width {
                    if self.get(t, r, c - shift) {
                        out.set_flat((t * self.height + r) * self.width + c);
                    }
                }
            }
        }
        out
    }
}

/// Packs a `T x H x W` binary stack given as `0`/`1` bytes.
pub fn pack_voxel(frames: usize, height: usize, width: usize, values: &[u8]) -> Result<SpikeVoxel> {
    let n = frames * height * width;
    if values.len() != n {
        return Err(Error::Shape {
            what: "spike frames",
            expected: vec![frames, height, width],
            got: vec![values.len()],
        });
    }
    let mut v = SpikeVoxel::zeros(frames, height, width);
    for (i, &b) in values.iter().enumerate() {
        match b {
            0 => {}
            1 => v.set_flat(i),
            other => {
                return Err(invalid(
                    "spike frames",
                    format!("value {other} at flat index {i} is not binary"),
                ))
            }
        }
    }
    Ok(v)
}

pub fn unpack_voxel(voxel: &SpikeVoxel) -> Vec<u8> {
    (0..voxel.len()).map(|i| voxel.get_flat(i) as u8).collect()
}

/// Discrete integrate-and-fire: per pixel, `V += I * dt` each step and a
/// spike is emitted when `V >= theta`, followed by the configured reset.
pub fn integrate_and_fire(clip: &IntensityClip, cfg: &FiringConfig) -> Result<SpikeVoxel> {
    clip.validate()?;
    if !(cfg.theta > 0.0 && cfg.theta.is_finite()) {
        return Err(invalid("firing threshold", format!("theta must be positive, got {}", cfg.theta)));
    }
    let plane = clip.height * clip.width;
    let mut charge = vec![0.0f64; plane];
    let mut out = SpikeVoxel::zeros(clip.frames, clip.height, clip.width);
    for t in 0..clip.frames {
        let frame = &clip.data[t * plane..(t + 1) * plane];
        for (p, v) in charge.iter_mut().enumerate() {
            *v += frame[p] * clip.dt;
            if *v >= cfg.theta {
                out.set_flat(t * plane + p);
                match cfg.reset_mode {
                    ResetMode::ResetToZero => *v = 0.0,
                    ResetMode::SubtractThreshold => *v -= cfg.theta,
                }
            }
        }
    }
    Ok(out)
}

/// A voxel cut into consecutive fixed-width time windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSequenceSet {
    pub window_width: usize,
    pub sequences: Vec<SpikeVoxel>,
}

impl SpikeSequenceSet {
    pub fn count(&self) -> usize {
        self.sequences.len()
    }
}

/// Splits a voxel into `floor(T / n)` windows of `n` frames; trailing
/// frames that do not fill a window are dropped.
pub fn chunk_windows(voxel: &SpikeVoxel, n: usize) -> Result<SpikeSequenceSet> {
    if n == 0 || n > voxel.frames() {
        return Err(invalid(
            "window width",
            format!("{n} must lie in [1, {}]", voxel.frames()),
        ));
    }
    let count = voxel.frames() / n;
    let sequences = (0..count)
        .map(|s| voxel.slice_frames(s * n, n))
        .collect::<Result<_>>()?;
    Ok(SpikeSequenceSet {
        window_width: n,
        sequences,
    })
}

/// Per-pixel firing rate (spike count / T).
pub fn rate_map(voxel: &SpikeVoxel) -> Grid {
    let t = voxel.frames().max(1) as f64;
    let data = voxel.counts().into_iter().map(|c| c as f64 / t).collect();
    Grid::new(voxel.height(), voxel.width(), data).expect("voxel dims")
}

/// Magnitudes of the first `k` DFT coefficients (DC first) of every
/// pixel's 0/1 time series, divided by `T`. Shape `[k, H, W]`.
pub fn temporal_frequency_features(voxel: &SpikeVoxel, k: usize) -> Result<Tensor> {
    let (frames, h, w) = voxel.dims();
    if k == 0 || k > frames / 2 + 1 {
        return Err(invalid(
            "frequency coefficient count",
            format!("{k} must lie in [1, {}]", frames / 2 + 1),
        ));
    }
    let plane = h * w;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frames);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut series = vec![Complex::new(0.0, 0.0); frames];
    let mut out = vec![0.0; k * plane];
    let norm = frames as f64;
    for p in 0..plane {
        for (t, s) in series.iter_mut().enumerate() {
            *s = Complex::new(voxel.get_flat(t * plane + p) as u8 as f64, 0.0);
        }
        fft.process_with_scratch(&mut series, &mut scratch);
        for (c, coeff) in series.iter().take(k).enumerate() {
            out[c * plane + p] = coeff.norm() / norm;
        }
    }
    Ok(Tensor::new(&[k, h, w], out)?)
}
