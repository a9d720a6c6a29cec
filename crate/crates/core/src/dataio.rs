//! Spike-voxel and depth-map files, dataset manifests and checkpoints.
//!
//! SPKV: `"SPKV1\0"`, u32 LE `T, H, W`, then `ceil(T*H*W/8)` packed bytes.
//! DPTH: `"DPTH1\0"`, u32 LE `H, W`, then `H*W` f32 LE meters, NaN invalid.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use autodiff::{checkpoint, ParamStore, Tensor};
use byteorder::{ByteOrder, LittleEndian};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::{DepthMap, Grid};
use crate::scene::{generate_scene, CameraRig, SceneConfig};
use crate::spike::{integrate_and_fire, packed_len, FiringConfig, SpikeVoxel};

pub const SPKV_MAGIC: &[u8; 6] = b"SPKV1\0";
pub const DPTH_MAGIC: &[u8; 6] = b"DPTH1\0";
/// Largest extent accepted on any axis.
pub const MAX_AXIS: usize = 1 << 16;

fn format_err(format: &'static str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format,
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn check_axes(format: &'static str, dims: &[(&str, usize)]) -> Result<()> {
    for (name, d) in dims {
        if *d == 0 || *d > MAX_AXIS {
            return Err(invalid(format, format!("{name} = {d} is outside [1, {MAX_AXIS}]")));
        }
    }
    Ok(())
}

/// Parses the magic and `count` u32 dimensions.
fn read_header(format: &'static str, magic: &[u8; 6], bytes: &[u8], names: &[&str]) -> Result<Vec<usize>> {
    let header_len = 6 + 4 * names.len();
    if let Some(i) = (0..6).find(|&i| bytes.get(i) != Some(&magic[i])) {
        if i >= bytes.len() {
            return Err(format_err(format, i, format!("file ends inside the {}-byte magic", magic.len())));
        }
        return Err(format_err(format, i, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < header_len {
        return Err(format_err(
            format,
            bytes.len(),
            format!("truncated header: expected {header_len} bytes, found {}", bytes.len()),
        ));
    }
    let mut dims = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let off = 6 + 4 * k;
        let d = LittleEndian::read_u32(&bytes[off..off + 4]) as usize;
        if d == 0 || d > MAX_AXIS {
            return Err(format_err(format, off, format!("{name} = {d} is outside [1, {MAX_AXIS}]")));
        }
        dims.push(d);
    }
    Ok(dims)
}

fn check_payload(format: &'static str, bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(format_err(
            format,
            bytes.len(),
            format!(
                "truncated payload: expected {payload} bytes, found {} ({expected} bytes total)",
                bytes.len() - header
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(format, expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Ok(())
}

pub fn encode_spkv(voxel: &SpikeVoxel) -> Result<Vec<u8>> {
    let (t, h, w) = voxel.dims();
    check_axes("SPKV", &[("T", t), ("H", h), ("W", w)])?;
    let mut out = Vec::with_capacity(18 + voxel.packed().len());
    out.extend_from_slice(SPKV_MAGIC);
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(voxel.packed());
    Ok(out)
}

pub fn decode_spkv(bytes: &[u8]) -> Result<SpikeVoxel> {
    let dims = read_header("SPKV", SPKV_MAGIC, bytes, &["T", "H", "W"])?;
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    check_payload("SPKV", bytes, 18, packed_len(t * h * w))?;
    SpikeVoxel::from_packed(t, h, w, bytes[18..].to_vec())
}

pub fn encode_dpth(depth: &DepthMap) -> Result<Vec<u8>> {
    check_axes("DPTH", &[("H", depth.height), ("W", depth.width)])?;
    let mut out = Vec::with_capacity(14 + 4 * depth.len());
    out.extend_from_slice(DPTH_MAGIC);
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dpth(bytes: &[u8]) -> Result<DepthMap> {
    let dims = read_header("DPTH", DPTH_MAGIC, bytes, &["H", "W"])?;
    let (h, w) = (dims[0], dims[1]);
    check_payload("DPTH", bytes, 14, 4 * h * w)?;
    let data = bytes[14..]
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    Ok(DepthMap(Grid::new(h, w, data)?))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_spkv(path: impl AsRef<Path>, voxel: &SpikeVoxel) -> Result<()> {
    write_file(path.as_ref(), &encode_spkv(voxel)?)
}

pub fn read_spkv(path: impl AsRef<Path>) -> Result<SpikeVoxel> {
    decode_spkv(&read_file(path.as_ref())?)
}

pub fn write_dpth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_file(path.as_ref(), &encode_dpth(depth)?)
}

pub fn read_dpth(path: impl AsRef<Path>) -> Result<DepthMap> {
    decode_dpth(&read_file(path.as_ref())?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    Ok(checkpoint::save(path, &params.to_map())?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    Ok(checkpoint::load(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(invalid("split", format!("expected train, val or test, got {s:?}"))),
        }
    }
}

/// One stereo voxel pair with its right-view ground truth. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub left_spkv: PathBuf,
    pub right_spkv: PathBuf,
    pub right_depth: PathBuf,
    pub rig: CameraRig,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| invalid("manifest", format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(self.to_json_lines()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_lines(&text)
    }

    /// Checks that every referenced file exists and parses.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            read_spkv(root.join(&r.left_spkv))?;
            read_spkv(root.join(&r.right_spkv))?;
            read_dpth(root.join(&r.right_depth))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// Scene counts per split: floors for val and test, remainder to train.
    pub fn allocate(&self, n: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("split fractions", format!("{parts:?} must be nonnegative and sum to 1")));
        }
        // The small epsilon keeps 0.2 * 10 from flooring to 1.
        let val = (self.val * n as f64 + 1e-9).floor() as usize;
        let test = (self.test * n as f64 + 1e-9).floor() as usize;
        Ok((n - val - test, val, test))
    }
}

/// Generates every scene, fires both views and writes SPKV/DPTH files plus
/// `manifest.jsonl` under `out_dir`. Split membership is a seeded shuffle.
pub fn build_dataset(
    configs: &[SceneConfig],
    rig: &CameraRig,
    firing: &FiringConfig,
    fractions: SplitFractions,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (n_train, n_val, _) = fractions.allocate(configs.len())?;
    let mut order: Vec<usize> = (0..configs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; configs.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    fs::create_dir_all(out_dir).map_err(|source| Error::File {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let records = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let sample = generate_scene(cfg, rig)?;
            let left = integrate_and_fire(&sample.left_clip, firing)?;
            let right = integrate_and_fire(&sample.right_clip, firing)?;
            let rec = ManifestRecord {
                left_spkv: format!("scene_{i:05}_left.spkv").into(),
                right_spkv: format!("scene_{i:05}_right.spkv").into(),
                right_depth: format!("scene_{i:05}_right.dpth").into(),
                rig: *rig,
                split: splits[i],
                seed: cfg.seed,
            };
            write_spkv(out_dir.join(&rec.left_spkv), &left)?;
            write_spkv(out_dir.join(&rec.right_spkv), &right)?;
            write_dpth(out_dir.join(&rec.right_depth), &sample.right_depth_gt)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { records };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
