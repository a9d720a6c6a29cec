use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spikedepth::dataio::{
    self, load_checkpoint, read_dpth, save_checkpoint, write_dpth, write_spkv, DatasetManifest,
};
use spikedepth::eval::{assemble_report, render_interval_csv, render_json_lines, render_table, IntervalReport, MetricsReport};
use spikedepth::fuse::guided_fusion;
use spikedepth::net::{init_params, parameter_count};
use spikedepth::scene::{generate_scene, SceneConfig};
use spikedepth::spike::{integrate_and_fire, IntensityClip};
use spikedepth::train::{self as trainer, branch_depth, load_split, predict, Branch, LogRow};
use spikedepth::{DepthMap, Grid, UncertaintyMap};

use crate::config::RunConfig;

const MANIFEST: &str = "manifest.jsonl";
const CHECKPOINT: &str = "checkpoint.ugdf";

fn echo(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_json(path: PathBuf, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn simulate(cfg: RunConfig, out: &Path, intensity: Option<f64>) -> anyhow::Result<()> {
    cfg.rig.validate()?;
    echo(&cfg, out)?;
    let s = &cfg.scene;
    if let Some(level) = intensity {
        let clip = IntensityClip::new(s.frames, s.height, s.width, vec![level; s.frames * s.height * s.width], 1.0)?;
        let voxel = integrate_and_fire(&clip, &cfg.firing)?;
        write_spkv(out.join("voxel.spkv"), &voxel)?;
        let counts = voxel.counts();
        let summary = json!({
            "intensity": level,
            "frames": s.frames,
            "min_count": counts.iter().min(),
            "max_count": counts.iter().max(),
        });
        println!("{}", serde_json::to_string(&summary)?);
        return write_json(out.join("summary.json"), &summary);
    }
    cfg.scene.validate(&cfg.rig)?;
    let scene = generate_scene(&cfg.scene, &cfg.rig)?;
    let left = integrate_and_fire(&scene.left_clip, &cfg.firing)?;
    let right = integrate_and_fire(&scene.right_clip, &cfg.firing)?;
    write_spkv(out.join("left.spkv"), &left)?;
    write_spkv(out.join("right.spkv"), &right)?;
    write_dpth(out.join("left_depth.dpth"), &scene.left_depth_gt)?;
    write_dpth(out.join("right_depth.dpth"), &scene.right_depth_gt)?;
    let summary = json!({
        "layer_depths": scene.layers.iter().map(|l| l.depth).collect::<Vec<_>>(),
        "left_spikes": left.counts().iter().map(|&c| c as u64).sum::<u64>(),
        "right_spikes": right.counts().iter().map(|&c| c as u64).sum::<u64>(),
        "valid_right_pixels": scene.right_depth_gt.valid_count(),
    });
    println!("{}", serde_json::to_string(&summary)?);
    write_json(out.join("summary.json"), &summary)
}

pub fn build_dataset(cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.rig.validate()?;
    cfg.scene.validate(&cfg.rig)?;
    echo(&cfg, out)?;
    let configs: Vec<SceneConfig> = (0..cfg.dataset.scenes)
        .map(|i| SceneConfig {
            seed: (cfg.seed << 32) | i as u64,
            ..cfg.scene.clone()
        })
        .collect();
    let started = Instant::now();
    let manifest = dataio::build_dataset(&configs, &cfg.rig, &cfg.firing, cfg.dataset.fractions, cfg.seed, out)?;
    let count = |s| manifest.split(s).count();
    let summary = json!({
        "scenes": manifest.records.len(),
        "train": count(dataio::Split::Train),
        "val": count(dataio::Split::Val),
        "test": count(dataio::Split::Test),
        "manifest": MANIFEST,
        "seconds": started.elapsed().as_secs_f64(),
    });
    println!("{}", serde_json::to_string(&summary)?);
    write_json(out.join("summary.json"), &summary)
}

fn load_manifest(dataset: &Path) -> anyhow::Result<DatasetManifest> {
    let manifest = DatasetManifest::load(dataset.join(MANIFEST))
        .with_context(|| format!("loading dataset {}", dataset.display()))?;
    manifest.verify(dataset)?;
    Ok(manifest)
}

pub fn train(cfg: RunConfig, out: &Path, dataset: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    let manifest = load_manifest(dataset)?;
    let samples = load_split(&manifest, dataset, dataio::Split::Train)?;
    if samples.is_empty() {
        bail!("dataset {} has an empty train split", dataset.display());
    }
    echo(&cfg, out)?;
    let mut store = init_params(&cfg.net, cfg.seed)?;
    let mut csv = String::from(LogRow::header(cfg.train.mode));
    csv.push('\n');
    let started = Instant::now();
    let log = trainer::train(&cfg.net, &cfg.train, &samples, &mut store, |row| {
        csv.push_str(&row.csv());
        csv.push('\n');
        if row.step % 25 == 0 {
            eprintln!("step {} loss {:.4} ({:.0} ms forward)", row.step, row.loss.total, row.forward_ms);
        }
    })?;
    let seconds = started.elapsed().as_secs_f64();
    fs::write(out.join("train_log.csv"), csv)?;
    save_checkpoint(out.join(CHECKPOINT), &store)?;

    let k = 20.min(log.len()).max(1);
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len().max(1) as f64;
    let summary = json!({
        "mode": cfg.train.mode,
        "steps": log.len(),
        "train_samples": samples.len(),
        "parameters": parameter_count(&cfg.net),
        "first_loss": log.first().map(|r| r.loss.total),
        "last_loss": log.last().map(|r| r.loss.total),
        "first_window_mean": mean(&log[..k.min(log.len())]),
        "last_window_mean": mean(&log[log.len() - k.min(log.len())..]),
        "window": k,
        "mean_forward_ms": log.iter().map(|r| r.forward_ms).sum::<f64>() / log.len().max(1) as f64,
        "seconds": seconds,
        "checkpoint": CHECKPOINT,
    });
    println!("{}", serde_json::to_string(&summary)?);
    write_json(out.join("summary.json"), &summary)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    branch: Branch,
    sample: usize,
    report: MetricsReport,
}

pub fn eval(mut cfg: RunConfig, out: &Path, dataset: &Path, model: &Path, save_maps: bool) -> anyhow::Result<()> {
    let trained = RunConfig::load(Some(&model.join("config.toml")))?;
    // The architecture is the one the checkpoint was trained with.
    cfg.net = trained.net;
    cfg.scene.width = cfg.net.width;
    cfg.scene.height = cfg.net.height;
    cfg.net.validate()?;
    let manifest = load_manifest(dataset)?;
    let samples = load_split(&manifest, dataset, cfg.eval.split)?;
    if samples.is_empty() {
        bail!("dataset {} has no {:?} samples", dataset.display(), cfg.eval.split);
    }
    let mut store = init_params(&cfg.net, 0)?;
    store.assign_from(&load_checkpoint(model.join(CHECKPOINT))?)?;
    echo(&cfg, out)?;

    let edges = cfg.bin_edges();
    let ev = trainer::evaluate(&cfg.net, &store, &samples, &cfg.eval.branches, &edges)?;
    if save_maps {
        let dir = out.join("maps");
        fs::create_dir_all(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            let p = predict(&cfg.net, &store, s)?;
            for &b in &cfg.eval.branches {
                write_dpth(dir.join(format!("{i:05}_{}.dpth", b.name())), &branch_depth(&p, b, s.rig.d_max)?)?;
            }
            write_dpth(dir.join(format!("{i:05}_sigma_m.dpth")), &DepthMap(p.sigma_m.0.clone()))?;
            write_dpth(dir.join(format!("{i:05}_sigma_s.dpth")), &DepthMap(p.sigma_s.0.clone()))?;
            write_dpth(dir.join(format!("{i:05}_gt.dpth")), &s.depth)?;
        }
    }

    let mut lines = String::new();
    for (k, &(b, _)) in ev.reports.iter().enumerate() {
        for (i, r) in ev.per_sample[k].iter().enumerate() {
            lines.push_str(&serde_json::to_string(&SampleRecord {
                branch: b,
                sample: i,
                report: *r,
            })?);
            lines.push('\n');
        }
    }
    fs::write(out.join("per_sample.jsonl"), lines)?;
    write_json(out.join("intervals.json"), &ev.intervals)?;
    let rows: Vec<(String, MetricsReport)> = ev.reports.iter().map(|(b, r)| (b.name().to_string(), *r)).collect();
    write_tables(out, &rows, &ev.intervals)?;
    print!("{}", render_table(&rows));
    write_json(
        out.join("summary.json"),
        &json!({
            "split": cfg.eval.split,
            "samples": samples.len(),
            "reports": rows.iter().map(|(b, r)| json!({"branch": b, "metrics": r})).collect::<Vec<_>>(),
            "mean_forward_ms": ev.mean_forward_ms,
        }),
    )
}

fn write_tables(out: &Path, rows: &[(String, MetricsReport)], intervals: &IntervalReport) -> anyhow::Result<()> {
    fs::write(out.join("metrics.txt"), render_table(rows))?;
    fs::write(out.join("metrics.jsonl"), render_json_lines(rows)?)?;
    fs::write(out.join("intervals.csv"), render_interval_csv(intervals))?;
    Ok(())
}

pub fn fuse(cfg: RunConfig, out: &Path, inputs: [&PathBuf; 4]) -> anyhow::Result<()> {
    cfg.rig.validate()?;
    let [mono, stereo, sm, ss] = inputs.map(|p| read_dpth(p).with_context(|| format!("reading {}", p.display())));
    let (mono, stereo) = (mono?, stereo?);
    let (sm, ss) = (UncertaintyMap(sm?.0), UncertaintyMap(ss?.0));
    echo(&cfg, out)?;
    let r = guided_fusion(&mono, &stereo, &sm, &ss, cfg.rig.d_max)?;
    write_dpth(out.join("fused.dpth"), &r.fused_depth)?;
    write_dpth(out.join("threshold.dpth"), &DepthMap(r.threshold.clone()))?;
    let mask = r.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_dpth(out.join("mask.dpth"), &DepthMap(Grid::new(mono.height, mono.width, mask)?))?;
    let summary = json!({
        "pixels": r.mask.len(),
        "mono_pixels": r.mask.iter().filter(|&&m| m).count(),
        "single_source_pixels": r.single_source.iter().filter(|&&s| s).count(),
        "valid_pixels": r.fused_depth.valid_count(),
        "d_max": cfg.rig.d_max,
    });
    println!("{}", serde_json::to_string(&summary)?);
    write_json(out.join("summary.json"), &summary)
}

pub const OPERATOR_TOLERANCE: f64 = 1e-4;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;

pub fn gradcheck(cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    echo(&cfg, out)?;
    let started = Instant::now();
    let mut rows = Vec::new();
    for (name, r) in autodiff::suite::operator_suite(cfg.seed)? {
        rows.push((name.to_string(), r.max_rel_error, OPERATOR_TOLERANCE, r.passes(OPERATOR_TOLERANCE)));
    }
    let r = trainer::composition_grad_check(cfg.seed)?;
    rows.push((
        "network_loss".to_string(),
        r.max_rel_error,
        COMPOSITION_TOLERANCE,
        r.passes(COMPOSITION_TOLERANCE),
    ));
    for (name, err, tol, ok) in &rows {
        println!("{name:<24} {err:.3e} (tol {tol:.0e}) {}", if *ok { "ok" } else { "FAIL" });
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.3).map(|r| r.0.as_str()).collect();
    write_json(
        out.join("gradcheck.json"),
        &json!({
            "checks": rows.iter().map(|(n, e, t, ok)| json!({"name": n, "max_rel_error": e, "tolerance": t, "pass": ok})).collect::<Vec<_>>(),
            "seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn report(cfg: RunConfig, out: &Path, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut by_branch: Vec<(Branch, Vec<MetricsReport>)> = Vec::new();
    let mut intervals: Option<IntervalReport> = None;
    for dir in inputs {
        let path = dir.join("per_sample.jsonl");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: SampleRecord =
                serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), n + 1))?;
            match by_branch.iter_mut().find(|(b, _)| *b == rec.branch) {
                Some((_, v)) => v.push(rec.report),
                None => by_branch.push((rec.branch, vec![rec.report])),
            }
        }
        let path = dir.join("intervals.json");
        let r: IntervalReport = serde_json::from_str(&fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        match &mut intervals {
            Some(acc) => acc.merge(&r)?,
            None => intervals = Some(r),
        }
    }
    let Some(intervals) = intervals else {
        bail!("no inputs");
    };
    echo(&cfg, out)?;
    let rows = by_branch
        .iter()
        .map(|(b, rs)| Ok((b.name().to_string(), assemble_report(rs)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_tables(out, &rows, &intervals)?;
    print!("{}", render_table(&rows));
    Ok(())
}
