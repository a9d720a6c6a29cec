//! Training loop, inference and per-branch evaluation.

use std::path::Path;
use std::time::Instant;

use autodiff::{
    adam_step, grad_check, AdamConfig, AdamState, GradCheckOptions, GradCheckReport, Graph, Mode, ParamStore, StepSchedule,
    Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_dpth, read_spkv, DatasetManifest, Split};
use crate::error::{invalid, Result};
use crate::eval::{compute_metrics, interval_accuracy, joint_valid_mask, IntervalReport, MetricsReport};
use crate::fuse::{ensemble_fuse, guided_fusion};
use crate::loss::{
    disparity_loss_var, silog_depth_loss_var, total_loss, uncertainty_loss_var, LossBreakdown, LossMode, LossParts,
    LossWeights, Target,
};
use crate::net::{
    forward, forward_vars, init_params, prepare_input, update_running_stats, Ctx, InputVars, NetConfig, NetOutput,
};
use crate::raster::{DepthMap, Grid, UncertaintyMap};
use crate::scene::{depth_to_disparity, generate_scene, normalize_depth, CameraRig, SceneConfig};
use crate::spike::{integrate_and_fire, FiringConfig, SpikeVoxel};

/// One stereo voxel pair with right-view depth ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub left: SpikeVoxel,
    pub right: SpikeVoxel,
    pub depth: DepthMap,
    pub rig: CameraRig,
}

pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|r| {
            Ok(Sample {
                left: read_spkv(root.join(&r.left_spkv))?,
                right: read_spkv(root.join(&r.right_spkv))?,
                depth: read_dpth(root.join(&r.right_depth))?,
                rig: r.rig,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: LossMode,
    /// Stops after this many steps when set; otherwise runs `epochs`.
    pub iterations: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decayed_lr: f64,
    pub decay_epoch: usize,
    pub bn_momentum: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = StepSchedule::default();
        Self {
            mode: LossMode::Ugdf,
            iterations: None,
            epochs: 10,
            batch_size: 1,
            lr: schedule.initial,
            decayed_lr: schedule.decayed,
            decay_epoch: schedule.decay_at,
            bn_momentum: 0.1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub forward_ms: f64,
}

impl LogRow {
    pub fn header(mode: LossMode) -> &'static str {
        match mode {
            LossMode::Base => "step,loss_disp,loss_depth,total,forward_ms",
            LossMode::Ugdf => "step,loss_disp,loss_depth,loss_mono_unc,loss_ster_unc,total,forward_ms",
        }
    }

    pub fn csv(&self) -> String {
        let l = &self.loss;
        match (l.loss_mono_unc, l.loss_ster_unc) {
            (Some(m), Some(s)) => format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                self.step, l.loss_disp, l.loss_depth, m, s, l.total, self.forward_ms
            ),
            _ => format!(
                "{},{:.6},{:.6},{:.6},{:.3}",
                self.step, l.loss_disp, l.loss_depth, l.total, self.forward_ms
            ),
        }
    }
}

/// Graph losses of one forward pass against a batch.
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds every loss term of `mode` for the batch on the graph.
pub fn batch_loss(
    g: &mut Graph,
    out: &NetOutput,
    depths: &[&DepthMap],
    rig: &CameraRig,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let disps = depths
        .iter()
        .map(|d| depth_to_disparity(d, rig).map(|m| m.0))
        .collect::<Result<Vec<Grid>>>()?;
    let norms = depths
        .iter()
        .map(|d| normalize_depth(d, rig).map(|(n, _)| n))
        .collect::<Result<Vec<Grid>>>()?;
    let disp_target = Target::from_grids(&disps.iter().collect::<Vec<_>>(), 0.0)?;
    let depth_target = Target::from_grids(&norms.iter().collect::<Vec<_>>(), 1.0)?;

    let disp = disparity_loss_var(g, &out.disparities, &disp_target, weights)?;
    let depth = silog_depth_loss_var(g, out.mono_depth, &depth_target, weights.eta)?;
    let mut total = g.add(disp, depth)?;
    let mut parts = LossParts {
        disp: g.value(disp).item(),
        depth: g.value(depth).item(),
        ..Default::default()
    };
    if mode == LossMode::Ugdf {
        let mono = uncertainty_loss_var(g, out.mono_depth, out.sigma_m, &depth_target)?;
        let stereo_norm = stereo_normalized_depth(g, *out.disparities.last().expect("hourglass"), rig)?;
        let ster = uncertainty_loss_var(g, stereo_norm, out.sigma_s, &depth_target)?;
        parts.mono_unc = g.value(mono).item();
        parts.ster_unc = g.value(ster).item();
        total = g.add(total, mono)?;
        total = g.add(total, ster)?;
    }
    let breakdown = total_loss(mode, parts);
    Ok(BatchLoss { total, breakdown })
}

/// Disparity to depth over `d_max`; disparities below `f*b/d_max` are
/// raised to it so depth never exceeds `d_max`.
pub fn stereo_normalized_depth(g: &mut Graph, disp: Var, rig: &CameraRig) -> Result<Var> {
    let floor = rig.focal_baseline() / rig.d_max;
    let clamped = g.clamp(disp, floor, f64::INFINITY);
    let shape = g.shape(disp).to_vec();
    let num = g.constant(Tensor::full(&shape, floor));
    Ok(g.div(num, clamped)?)
}

/// Trains `store` in place, calling `on_step` after every step.
pub fn train(
    net: &NetConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    store: &mut ParamStore,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    net.validate()?;
    cfg.weights.validate(net.hourglass_count)?;
    if samples.is_empty() {
        return Err(invalid("training", "the train split is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("training", "batch size must be at least 1"));
    }
    let schedule = StepSchedule {
        initial: cfg.lr,
        decayed: cfg.decayed_lr,
        decay_at: cfg.decay_epoch,
    };
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    })?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.iterations.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
        }
        adam.set_lr(schedule.lr_at(epoch));
        let batch: Vec<&Sample> = order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(samples.len())]
            .iter()
            .map(|&i| &samples[i])
            .collect();
        let rig = batch[0].rig;
        let left: Vec<SpikeVoxel> = batch.iter().map(|s| s.left.clone()).collect();
        let right: Vec<SpikeVoxel> = batch.iter().map(|s| s.right.clone()).collect();
        let li = prepare_input(&left, net)?;
        let ri = prepare_input(&right, net)?;

        let mut g = Graph::new(Mode::Train);
        let started = Instant::now();
        let (loss, stats) = {
            let mut ctx = Ctx::new(&mut g, store);
            let out = forward(&mut ctx, net, &li, &ri)?;
            let stats = std::mem::take(&mut ctx.stats);
            let depths: Vec<&DepthMap> = batch.iter().map(|s| &s.depth).collect();
            (batch_loss(ctx.g, &out, &depths, &rig, cfg.mode, &cfg.weights)?, stats)
        };
        let forward_ms = started.elapsed().as_secs_f64() * 1e3;
        if !loss.breakdown.total.is_finite() {
            return Err(invalid("training", format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss.total)?.params(store);
        drop(g);
        adam_step(store, &grads, &mut adam)?;
        update_running_stats(store, &stats, cfg.bn_momentum)?;
        let row = LogRow {
            step,
            epoch,
            loss: loss.breakdown,
            forward_ms,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

/// Branch maps of one sample in meters.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mono: DepthMap,
    pub stereo: DepthMap,
    pub sigma_m: UncertaintyMap,
    pub sigma_s: UncertaintyMap,
    /// Full-resolution disparity of the last hourglass.
    pub disparity: Grid,
    /// Last-hourglass disparity at 1/8 resolution.
    pub low_res_disparity: Grid,
    pub forward_ms: f64,
}

fn grid_of(t: &Tensor) -> Grid {
    let s = t.shape();
    Grid::new(s[2], s[3], t.data().to_vec()).expect("[1, 1, H, W]")
}

/// Inference with frozen normalization statistics.
pub fn predict(net: &NetConfig, store: &ParamStore, sample: &Sample) -> Result<Prediction> {
    let li = prepare_input(std::slice::from_ref(&sample.left), net)?;
    let ri = prepare_input(std::slice::from_ref(&sample.right), net)?;
    let rig = sample.rig;
    let mut g = Graph::new(Mode::Eval);
    let started = Instant::now();
    let mut ctx = Ctx::new(&mut g, store);
    let out = forward(&mut ctx, net, &li, &ri)?;
    let forward_ms = started.elapsed().as_secs_f64() * 1e3;
    let disp_var = *out.disparities.last().expect("hourglass");
    let disparity = grid_of(g.value(disp_var));
    let low = g.value(out.prob);
    let s = low.shape().to_vec();
    let plane = s[2] * s[3];
    let low_res: Vec<f64> = (0..plane)
        .map(|p| (0..s[1]).map(|d| d as f64 * low.data()[d * plane + p]).sum())
        .collect();
    let floor = rig.focal_baseline() / rig.d_max;
    let stereo = disparity.data.iter().map(|d| rig.focal_baseline() / d.max(floor)).collect();
    let mono = g.value(out.mono_depth).data().iter().map(|v| v * rig.d_max).collect();
    Ok(Prediction {
        mono: DepthMap(Grid::new(disparity.height, disparity.width, mono)?),
        stereo: DepthMap(Grid::new(disparity.height, disparity.width, stereo)?),
        sigma_m: UncertaintyMap(grid_of(g.value(out.sigma_m))),
        sigma_s: UncertaintyMap(grid_of(g.value(out.sigma_s))),
        low_res_disparity: Grid::new(s[2], s[3], low_res)?,
        disparity,
        forward_ms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Mono,
    Stereo,
    Fused,
    Ensemble,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Mono, Branch::Stereo, Branch::Fused, Branch::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Mono => "mono",
            Branch::Stereo => "stereo",
            Branch::Fused => "fused",
            Branch::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| invalid("branch", format!("expected mono, stereo, fused or ensemble, got {s:?}")))
    }
}

/// The depth map a branch reports for a prediction.
pub fn branch_depth(p: &Prediction, branch: Branch, d_max: f64) -> Result<DepthMap> {
    Ok(match branch {
        Branch::Mono => p.mono.clone(),
        Branch::Stereo => p.stereo.clone(),
        Branch::Fused => guided_fusion(&p.mono, &p.stereo, &p.sigma_m, &p.sigma_s, d_max)?.fused_depth,
        Branch::Ensemble => ensemble_fuse(&p.mono, &p.stereo)?.depth,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Pooled metrics per requested branch.
    pub reports: Vec<(Branch, MetricsReport)>,
    /// Per-sample metrics, indexed like `reports`.
    pub per_sample: Vec<Vec<MetricsReport>>,
    /// Interval accuracy for mono, stereo and fused.
    pub intervals: IntervalReport,
    pub mean_forward_ms: f64,
}

pub fn evaluate(
    net: &NetConfig,
    store: &ParamStore,
    samples: &[Sample],
    branches: &[Branch],
    bin_edges: &[f64],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(invalid("evaluation", "no samples"));
    }
    let mut per_branch: Vec<Vec<MetricsReport>> = vec![Vec::new(); branches.len()];
    let mut intervals: Option<IntervalReport> = None;
    let mut ms = 0.0;
    for s in samples {
        let p = predict(net, store, s)?;
        ms += p.forward_ms;
        let d_max = s.rig.d_max;
        for (k, &b) in branches.iter().enumerate() {
            let d = branch_depth(&p, b, d_max)?;
            let mask = joint_valid_mask(&d, &s.depth);
            per_branch[k].push(compute_metrics(&d, &s.depth, &mask)?);
        }
        let fused = branch_depth(&p, Branch::Fused, d_max)?;
        let r = interval_accuracy(
            &[("mono", &p.mono), ("stereo", &p.stereo), ("fused", &fused)],
            &s.depth,
            bin_edges,
        )?;
        match &mut intervals {
            Some(acc) => acc.merge(&r)?,
            None => intervals = Some(r),
        }
    }
    let reports = branches
        .iter()
        .zip(&per_branch)
        .map(|(&b, rs)| Ok((b, crate::eval::assemble_report(rs)?)))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        reports,
        per_sample: per_branch,
        intervals: intervals.expect("nonempty"),
        mean_forward_ms: ms / samples.len() as f64,
    })
}

/// Toy network size used by the end-to-end gradient check.
pub fn toy_net_config() -> NetConfig {
    NetConfig {
        height: 16,
        width: 32,
        base_channels: 8,
        max_disp: 4,
        hourglass_count: 3,
        window_width: 4,
        fft_k: 4,
        hidden_rnn_channels: 4,
    }
}

/// Checks input gradients of the full UGDF loss through the whole network
/// (encoding, both branches, fusion-side heads and every loss term) on an
/// 8-frame 16x32 scene. Normalization runs on stored statistics.
pub fn composition_grad_check(seed: u64) -> Result<GradCheckReport> {
    let net = toy_net_config();
    let rig = CameraRig::default();
    let scene_cfg = SceneConfig {
        width: net.width,
        height: net.height,
        frames: 8,
        layer_count: 3,
        seed,
        ..Default::default()
    };
    let scene = generate_scene(&scene_cfg, &rig)?;
    let firing = FiringConfig::default();
    let left = prepare_input(&[integrate_and_fire(&scene.left_clip, &firing)?], &net)?;
    let right = prepare_input(&[integrate_and_fire(&scene.right_clip, &firing)?], &net)?;
    let store = init_params(&net, seed)?;
    let depth = scene.right_depth_gt;
    let n_windows = left.windows.len();

    let mut inputs: Vec<Tensor> = Vec::new();
    for view in [&left, &right] {
        inputs.extend(view.windows.iter().cloned());
        inputs.push(view.frequency.clone());
    }
    let f = |g: &mut Graph, v: &[Var]| -> autodiff::Result<Var> {
        let as_input = |k: usize| InputVars {
            windows: v[k..k + n_windows].to_vec(),
            frequency: v[k + n_windows],
        };
        let (l, r) = (as_input(0), as_input(n_windows + 1));
        let run = |g: &mut Graph| -> Result<Var> {
            let mut ctx = Ctx::new(g, &store);
            let out = forward_vars(&mut ctx, &net, &l, &r)?;
            Ok(batch_loss(ctx.g, &out, &[&depth], &rig, LossMode::Ugdf, &LossWeights::default())?.total)
        };
        run(g).map_err(|e| autodiff::AutodiffError::InvalidArgument {
            op: "composition",
            msg: e.to_string(),
        })
    };
    let opts = GradCheckOptions {
        step: 1e-4,
        seed,
        max_coords_per_input: Some(24),
        mode: Mode::Eval,
    };
    Ok(grad_check(f, &inputs, opts)?)
}

