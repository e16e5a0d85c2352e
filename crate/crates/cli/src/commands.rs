use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fear_core::bench::{run_offline, run_online, BenchReport, DeviceProfile, LatencySource, WallClock};
use fear_core::datapipe::{
    generate_synthetic, load_video, read_annotations, save_video, SyntheticVideo, ANNOTATION_FILE,
};
use fear_core::metrics::evaluate;
use fear_core::model::{count_cost, load_checkpoint};
use fear_core::tracker::{read_results, track_sequence, write_results};
use fear_core::trainer::Trainer;
use fear_core::{BBox, EvalMetrics, FearError, Network, RunConfig, TrackSession};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Common, DeviceArg, Protocol};

/// Seed offset separating validation videos from training videos.
const VAL_SEED_OFFSET: u64 = 100_000;

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(stride) = &common.stride {
        cfg.model.final_stride = stride.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    common
        .out
        .as_deref()
        .context("--out is required for this command")
}

fn start(command: &str, common: &Common, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = out_dir(common)?.to_path_buf();
    RunManifest::new(command, common.config.as_deref(), cfg.to_toml_string(), common.seed, &out).write()?;
    Ok(out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// A single video directory, or every video directory inside `path`, sorted
/// by name.
fn video_dirs(path: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let name_of = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into())
    };
    if path.join(ANNOTATION_FILE).exists() {
        return Ok(vec![(name_of(path), path.to_path_buf())]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
        let p = entry?.path();
        if p.join(ANNOTATION_FILE).exists() {
            dirs.push((name_of(&p), p));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("no videos found under {}", path.display());
    }
    Ok(dirs)
}

fn load_videos(path: &Path) -> anyhow::Result<Vec<SyntheticVideo>> {
    video_dirs(path)?
        .into_iter()
        .map(|(_, p)| load_video(&p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn synth(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = start("synth", common, &cfg)?;
    let d = &cfg.data;
    let drift = d.drift_profile()?;
    for (split, count, offset) in [("train", d.train_videos, 0), ("val", d.val_videos, VAL_SEED_OFFSET)] {
        for k in 0..count {
            let seed = d.seed.wrapping_add(offset + k as u64);
            let video = generate_synthetic(seed, d.frames, (d.width, d.height), drift.clone());
            let dir = out.join(split).join(format!("video_{k:03}"));
            save_video(&video, &dir)?;
        }
    }
    log::info!(
        "wrote {} training and {} validation videos to {}",
        d.train_videos,
        d.val_videos,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    best_val_mean_iou: f64,
    best_checkpoint: Option<PathBuf>,
    final_lr: f64,
}

pub fn train(common: &Common, data: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = start("train", common, &cfg)?;
    let train = load_videos(&data.join("train"))?;
    let val = load_videos(&data.join("val"))?;
    let mut trainer = match resume {
        Some(p) => Trainer::<f32>::resume(p, cfg.train.clone(), cfg.loss.clone(), cfg.sampler.clone())?,
        None => Trainer::new(
            Network::<f32>::new(cfg.model.clone())?,
            cfg.train.clone(),
            cfg.loss.clone(),
            cfg.sampler.clone(),
        )?,
    };
    trainer.tracker = cfg.tracker.clone();
    let report = trainer.fit(&train, &val, Some(&out))?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            epochs: report.history.len(),
            best_epoch: report.best_epoch,
            best_val_mean_iou: report.best_metric,
            best_checkpoint: report.best_checkpoint,
            final_lr: trainer.lr(),
        },
    )
}

#[derive(Serialize)]
struct TrackSummary {
    video: String,
    frames: usize,
    template_updates: usize,
}

pub fn track(common: &Common, checkpoint: &Path, data: &Path, init_box: Option<BBox>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = start("track", common, &cfg)?;
    let (net, _) = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut summary = Vec::new();
    for (name, dir) in video_dirs(data)? {
        let video = load_video(&dir)?;
        let start_box = init_box.unwrap_or(video.boxes[0]);
        let (w, h) = video.size();
        if !BBox::new(0.0, 0.0, w as f64, h as f64).contains_box(&start_box) {
            return Err(FearError::BoxOutOfBounds(format!("{start_box:?} outside the {w}x{h} first frame of {name}")).into());
        }
        let (outputs, updates) = track_sequence(&net, &video.frames, start_box, &cfg.tracker)?;
        write_results(&out.join(format!("{name}.txt")), &outputs)?;
        log::info!("{name}: {} frames, {updates} template updates", outputs.len());
        summary.push(TrackSummary {
            video: name,
            frames: outputs.len(),
            template_updates: updates,
        });
    }
    write_json(&out.join("track_summary.json"), &summary)
}

#[derive(Serialize)]
struct EvalReport {
    /// Pooled over every frame of every video.
    overall: EvalMetrics,
    /// Average of the per-video mean IoU.
    mean_video_iou: f64,
    videos: BTreeMap<String, EvalMetrics>,
}

pub fn eval(common: &Common, results: &Path, data: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = start("eval", common, &cfg)?;
    let mut videos = BTreeMap::new();
    let mut all_pred: Vec<BBox> = Vec::new();
    let mut all_gt: Vec<BBox> = Vec::new();
    let pairs: Vec<(String, PathBuf, PathBuf)> = if results.is_file() {
        let ann = if data.is_file() { data.to_path_buf() } else { data.join(ANNOTATION_FILE) };
        let name = results
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        vec![(name, results.to_path_buf(), ann)]
    } else {
        video_dirs(data)?
            .into_iter()
            .map(|(name, dir)| {
                let res = results.join(format!("{name}.txt"));
                (name, res, dir.join(ANNOTATION_FILE))
            })
            .collect()
    };
    for (name, res_path, ann_path) in pairs {
        if !res_path.exists() {
            bail!("missing results for {name}: {}", res_path.display());
        }
        let pred: Vec<BBox> = read_results(&res_path)?.into_iter().map(|o| o.bbox).collect();
        let gt = read_annotations(&ann_path)?;
        let m = evaluate(&pred, &gt).with_context(|| format!("scoring {name}"))?;
        all_pred.extend(pred);
        all_gt.extend(gt);
        videos.insert(name, m);
    }
    let mean_video_iou = videos.values().map(|m| m.mean_iou).sum::<f64>() / videos.len() as f64;
    let report = EvalReport {
        overall: evaluate(&all_pred, &all_gt)?,
        mean_video_iou,
        videos,
    };
    println!("{}", serde_json::to_string_pretty(&report.overall)?);
    write_json(&out.join("metrics.json"), &report)
}

fn device_profile(arg: &DeviceArg) -> anyhow::Result<DeviceProfile> {
    let profile = match arg {
        DeviceArg::Efficient => DeviceProfile::efficient(),
        DeviceArg::Inefficient => DeviceProfile::inefficient(),
        DeviceArg::Custom(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| FearError::InvalidConfig {
                field: "device".into(),
                reason: e.to_string(),
            })?
        }
    };
    profile.validate().map_err(|e| match e {
        FearError::InvalidConfig { field, reason } => FearError::InvalidConfig {
            field: format!("device.{field}"),
            reason,
        },
        other => other,
    })?;
    Ok(profile)
}

fn run_protocol(
    source: &mut dyn LatencySource,
    protocol: Protocol,
    cfg: &RunConfig,
    profile: &DeviceProfile,
) -> fear_core::Result<BenchReport> {
    match protocol {
        Protocol::Online => run_online(source, &cfg.online, &profile.device),
        Protocol::Offline => run_offline(source, &cfg.offline, &profile.device),
    }
}

pub fn bench(common: &Common, protocol: Protocol, device: &DeviceArg, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let profile = device_profile(device)?;
    let out = start("bench", common, &cfg)?;
    write_json(&out.join("device_profile.json"), &profile)?;
    let report = match checkpoint {
        Some(path) => {
            let (net, _) = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
            let video = generate_synthetic(cfg.data.seed, 64, (cfg.data.width, cfg.data.height), cfg.data.drift_profile()?);
            let mut session = TrackSession::init(&net, video.frames[0].view(), video.boxes[0], cfg.tracker.clone())?;
            let mut k = 0usize;
            let mut failure = None;
            let mut clock = WallClock::new(|| {
                k = k % (video.len() - 1) + 1;
                if let Err(e) = session.step(video.frames[k].view()) {
                    failure.get_or_insert(e);
                }
            });
            let report = run_protocol(&mut clock, protocol, &cfg, &profile)?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            report
        }
        None => run_protocol(profile.latency.source()?.as_mut(), protocol, &cfg, &profile)?,
    };
    report.write_all(&out)?;
    println!("{}", report.summary_json()?);
    Ok(())
}

pub fn cost(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let report = count_cost(&cfg.model)?;
    let json = serde_json::to_string_pretty(&report)?;
    if common.out.is_some() {
        let out = start("cost", common, &cfg)?;
        std::fs::write(out.join("cost.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}
