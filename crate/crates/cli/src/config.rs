//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use spikedepth::dataio::SplitFractions;
use spikedepth::dataio::Split;
use spikedepth::net::NetConfig;
use spikedepth::scene::{CameraRig, SceneConfig};
use spikedepth::spike::FiringConfig;
use spikedepth::train::{Branch, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub scenes: usize,
    pub fractions: SplitFractions,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            scenes: 60,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub branches: Vec<Branch>,
    pub split: Split,
    /// Interval bin edges in meters; empty means `[0, 25, 50, 100, 200, d_max]`.
    pub bin_edges: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            branches: Branch::ALL.to_vec(),
            split: Split::Test,
            bin_edges: Vec::new(),
        }
    }
}

/// Fully resolved settings of one invocation. Every seed in a run derives
/// from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rig: CameraRig,
    pub firing: FiringConfig,
    pub scene: SceneConfig,
    pub dataset: DatasetOptions,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<spikedepth::loss::LossMode>,
    pub branches: Vec<Branch>,
    pub window_width: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub iterations: Option<usize>,
    pub scenes: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.mode {
            self.train.mode = v;
        }
        if !o.branches.is_empty() {
            self.eval.branches = o.branches.clone();
        }
        if let Some(v) = o.window_width {
            self.net.window_width = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
            self.train.iterations = None;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = o.iterations {
            self.train.iterations = Some(v);
        }
        if let Some(v) = o.scenes {
            self.dataset.scenes = v;
        }
        self.train.seed = self.seed;
        self.scene.seed = self.seed;
    }

    /// Rejects contradictions before any work starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.rig.validate()?;
        self.net.validate()?;
        self.scene.validate(&self.rig)?;
        self.train.weights.validate(self.net.hourglass_count)?;
        if (self.scene.height, self.scene.width) != (self.net.height, self.net.width) {
            bail!(
                "scene is {}x{} but the network expects {}x{}",
                self.scene.height,
                self.scene.width,
                self.net.height,
                self.net.width
            );
        }
        if self.net.window_width == 0 || self.net.window_width > self.scene.frames {
            bail!(
                "window width {} must lie in [1, {}] for {}-frame voxels",
                self.net.window_width,
                self.scene.frames,
                self.scene.frames
            );
        }
        if self.net.fft_k > self.scene.frames {
            bail!("fft_k {} exceeds the {} frames per voxel", self.net.fft_k, self.scene.frames);
        }
        if !(self.train.lr > 0.0 && self.train.decayed_lr > 0.0) {
            bail!("learning rates must be positive");
        }
        if self.train.batch_size == 0 {
            bail!("batch size must be at least 1");
        }
        if self.eval.branches.is_empty() {
            bail!("no evaluation branch selected");
        }
        Ok(())
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        if self.eval.bin_edges.is_empty() {
            spikedepth::eval::default_bin_edges(self.rig.d_max)
        } else {
            self.eval.bin_edges.clone()
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
