//! Training loop: one optimization step over a batch of sampled pairs, epoch
//! driver with plateau learning-rate control, validation by full tracking runs
//! and checkpointing.

mod optim;

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, Adam, PlateauScheduler};

use crate::datapipe::{augment, sample_pair, SamplerConfig, SyntheticVideo, TrainingSample};
use crate::error::{FearError, Result};
use crate::float::{sigmoid, Float};
use crate::geometry::BBox;
use crate::losses::{
    cell_center, encode_targets, focal_grad, focal_loss, iou_loss, iou_loss_grad, total_loss,
    triplet_grad, triplet_loss, LossConfig,
};
use crate::metrics::evaluate;
use crate::model::layers::Module;
use crate::model::{
    images_to_batch, load_checkpoint, pool_batch, reduce_template, save_checkpoint, Network,
    PairGrads,
};
use crate::template_policy::{
    combine_features, mean_pool_backward, mean_pool_batch, weighted_pool_backward,
    weighted_pool_batch,
};
use crate::tracker::{argmax_first, decode_regression, track_sequence, TrackerConfig};

/// Optimization settings. Defaults are sized for a single CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Apply shift/scale/photometric augmentation to sampled pairs.
    pub augment: bool,
    /// Global gradient-norm limit; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Frames of each validation video used for the tracking metric.
    pub val_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            batch_size: 16,
            epochs: 20,
            steps_per_epoch: 50,
            seed: 0,
            augment: true,
            max_grad_norm: None,
            val_frames: 150,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FearError::config("learning_rate", "must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(FearError::config("plateau_factor", "must be in (0, 1)"));
        }
        if self.plateau_patience == 0 {
            return Err(FearError::config("plateau_patience", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FearError::config("batch_size", "must be at least 1"));
        }
        if self.steps_per_epoch == 0 {
            return Err(FearError::config("steps_per_epoch", "must be at least 1"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(FearError::config("max_grad_norm", "must be positive"));
            }
        }
        if self.val_frames < 2 {
            return Err(FearError::config("val_frames", "must be at least 2"));
        }
        Ok(())
    }
}

/// Loss components of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub triplet: f64,
    pub iou: f64,
    pub focal: f64,
    /// Positive regression cells in the batch.
    pub positives: usize,
}

fn check_finite(v: f64, component: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FearError::NonFiniteLoss { component })
    }
}

/// Regression targets and classification labels for a batch, in the layouts
/// the losses expect.
struct BatchTargets<T> {
    /// `P x 4` ground-truth boxes for every positive cell.
    boxes: Array2<T>,
    /// `(sample, row, col)` of each positive cell.
    cells: Vec<(usize, usize, usize)>,
    labels: Array4<i8>,
}

fn batch_targets<T: Float>(samples: &[&TrainingSample], stride: usize, side: usize) -> Result<BatchTargets<T>> {
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut labels = Array4::from_elem((samples.len(), 1, side, side), -1i8);
    for (b, s) in samples.iter().enumerate() {
        let enc = encode_targets(&s.gt_box, stride, side)?;
        labels
            .slice_mut(s![b, 0, .., ..])
            .assign(&enc.cls_labels);
        for ((i, j), &pos) in enc.regression.positive_mask.indexed_iter() {
            if pos {
                let g = s.gt_box;
                rows.extend([g.x_min, g.y_min, g.x_max, g.y_max].map(T::c));
                cells.push((b, i, j));
            }
        }
    }
    let boxes = Array2::from_shape_vec((cells.len(), 4), rows).expect("four columns");
    Ok(BatchTargets {
        boxes,
        cells,
        labels,
    })
}

/// Predicted xyxy boxes (unclamped) at the given cells.
fn decode_cells<T: Float>(reg: &Array4<T>, cells: &[(usize, usize, usize)], stride: usize) -> Array2<T> {
    let s = T::c(stride as f64);
    let mut out = Array2::zeros((cells.len(), 4));
    for (k, &(b, i, j)) in cells.iter().enumerate() {
        let (cx, cy) = cell_center(i, j, stride);
        let (cx, cy) = (T::c(cx), T::c(cy));
        let d = |c: usize| reg[[b, c, i, j]].exp() * s;
        out[[k, 0]] = cx - d(0);
        out[[k, 1]] = cy - d(1);
        out[[k, 2]] = cx + d(2);
        out[[k, 3]] = cy + d(3);
    }
    out
}

/// Chain rule from box-coordinate gradients to raw regression activations.
fn decode_cells_backward<T: Float>(
    reg: &Array4<T>,
    cells: &[(usize, usize, usize)],
    d_boxes: &Array2<T>,
    stride: usize,
) -> Array4<T> {
    let s = T::c(stride as f64);
    let mut d = Array4::zeros(reg.raw_dim());
    for (k, &(b, i, j)) in cells.iter().enumerate() {
        for c in 0..4 {
            let e = reg[[b, c, i, j]].exp() * s;
            let sign = if c < 2 { -T::one() } else { T::one() };
            d[[b, c, i, j]] += d_boxes[[k, c]] * sign * e;
        }
    }
    d
}

fn probability_weights<T: Float>(cls: &Array4<T>) -> Array3<T> {
    cls.index_axis(Axis(1), 0).mapv(sigmoid)
}

/// One optimization step (forward, loss, backward, Adam update) on `batch`.
///
/// The negative crop goes through the backbone in training mode; its weighted
/// pooling uses classification probabilities from an inference-mode pass of
/// fusion and heads against the same templates. Pooling weights are treated
/// as constants.
pub fn train_step<T: Float>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &[&TrainingSample],
    loss_cfg: &LossConfig,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<StepLosses> {
    let (losses, _) = forward_backward(net, batch, loss_cfg)?;
    if let Some(limit) = max_grad_norm {
        clip_grad_norm(net, limit);
    }
    adam.update(net, lr);
    Ok(losses)
}

/// Computes the losses and leaves their gradients accumulated in `net`
/// (after zeroing). Returns the losses and the `raw_mix` gradient.
pub fn forward_backward<T: Float>(
    net: &mut Network<T>,
    batch: &[&TrainingSample],
    loss_cfg: &LossConfig,
) -> Result<(StepLosses, Option<f64>)> {
    if batch.is_empty() {
        return Err(FearError::LengthMismatch("empty training batch".into()));
    }
    let cfg = net.config().clone();
    let stride = cfg.final_stride;
    let side = cfg.map_side();
    let n = batch.len();
    let targets = batch_targets::<T>(batch, stride, side)?;
    // ReLU and clamps would silently swallow NaN pixels further down
    for s in batch {
        let imgs = [&s.template_img, &s.dynamic_img, &s.search_img, &s.negative_img];
        if imgs.iter().any(|im| im.iter().any(|v| !v.is_finite())) {
            return Err(FearError::NonFiniteLoss { component: "input" });
        }
    }

    let template = images_to_batch::<T>(&batch.iter().map(|s| &s.template_img).collect::<Vec<_>>())?;
    let dynamic = images_to_batch::<T>(&batch.iter().map(|s| &s.dynamic_img).collect::<Vec<_>>())?;
    let search = images_to_batch::<T>(&batch.iter().map(|s| &s.search_img).collect::<Vec<_>>())?;
    let negative = images_to_batch::<T>(&batch.iter().map(|s| &s.negative_img).collect::<Vec<_>>())?;

    net.zero_grad();
    let fwd = net.forward_pair(&template, &dynamic, &search)?;
    let (neg_feats, neg_cache) = net.forward_features(&negative);
    let reduced = pool_batch(&fwd.combined, cfg.corr_side());
    let neg_fused = net.infer_fusion(&neg_feats, &reduced)?;
    let (neg_cls, _) = net.infer_heads(&neg_fused);

    // triplet on pooled embeddings
    let w_s = probability_weights(&fwd.cls);
    let w_n = probability_weights(&neg_cls);
    let e_t = mean_pool_batch(&fwd.combined);
    let e_s = weighted_pool_batch(&fwd.search_feats, &w_s);
    let e_n = weighted_pool_batch(&neg_feats, &w_n);
    let mut l_t = 0.0;
    let mut d_et = Array2::zeros(e_t.raw_dim());
    let mut d_es = Array2::zeros(e_s.raw_dim());
    let mut d_en = Array2::zeros(e_n.raw_dim());
    let inv_n = T::c(1.0 / n as f64);
    for b in 0..n {
        let (t, s_, ng) = (e_t.row(b), e_s.row(b), e_n.row(b));
        l_t += triplet_loss(t, s_, ng, loss_cfg.margin).f64();
        let (gt, gs, gn) = triplet_grad(t, s_, ng, loss_cfg.margin);
        d_et.row_mut(b).assign(&(gt * inv_n));
        d_es.row_mut(b).assign(&(gs * inv_n));
        d_en.row_mut(b).assign(&(gn * inv_n));
    }
    let l_t = check_finite(l_t / n as f64, "triplet")?;

    // IoU over positive cells
    let mask = vec![true; targets.cells.len()];
    let pred = decode_cells(&fwd.reg, &targets.cells, stride);
    let iou = iou_loss(&pred, &targets.boxes, &mask);
    let l_reg = check_finite(iou.value, "iou")?;
    let d_pred = iou_loss_grad(&pred, &targets.boxes, &mask);
    let d_reg = decode_cells_backward(&fwd.reg, &targets.cells, &d_pred, stride);

    // focal over the whole map
    let l_c = check_finite(focal_loss(fwd.cls.view(), targets.labels.view(), loss_cfg.gamma).f64(), "focal")?;
    let d_cls = focal_grad(fwd.cls.view(), targets.labels.view(), loss_cfg.gamma);

    let total = check_finite(total_loss(l_t, l_reg, l_c, loss_cfg), "total")?;

    let (l1, l2, l3) = (T::c(loss_cfg.lambda1), T::c(loss_cfg.lambda2), T::c(loss_cfg.lambda3));
    let (_, _, th, tw) = fwd.combined.dim();
    let (_, _, sh, sw) = fwd.search_feats.dim();
    let d_combined = mean_pool_backward(&d_et, th, tw) * l1;
    let d_search = weighted_pool_backward(&d_es, &w_s) * l1;
    let d_negative = weighted_pool_backward(&d_en, &w_n) * l1;
    debug_assert_eq!((sh, sw), (side, side));
    net.backward_pair(
        fwd.cache,
        PairGrads {
            cls: d_cls * l3,
            reg: d_reg * l2,
            combined: Some(d_combined),
            search_feats: Some(d_search),
        },
    );
    net.backward_features(neg_cache, &d_negative);

    Ok((
        StepLosses {
            total,
            triplet: l_t,
            iou: l_reg,
            focal: l_c,
            positives: targets.cells.len(),
        },
        net.raw_mix_grad().map(|g| g.f64()),
    ))
}

/// Inference on one training pair: returns the box at the highest-scoring
/// cell (no window penalty) in search-crop coordinates.
pub fn predict_pair<T: Float>(net: &Network<T>, sample: &TrainingSample) -> Result<BBox> {
    let cfg = net.config();
    let st = net.extract_features(&sample.template_img)?;
    let combined = if net.raw_mix().is_some() {
        let dy = net.extract_features(&sample.dynamic_img)?;
        let mixed = combine_features(&st.data, &dy.data, net.mix_weight());
        crate::model::FeatureMap::new(mixed, st.stride)?
    } else {
        st
    };
    let reduced = reduce_template(&combined, cfg.template_corr_cells)?;
    let search = net.extract_features(&sample.search_img)?;
    let fused = net.fusion_block(&search, &reduced)?;
    let heads = net.run_heads(&fused)?;
    let scores = heads.scores().mapv(|v| v.f64());
    let cell = argmax_first(&scores);
    Ok(decode_regression(heads.reg.view(), cell, cfg.final_stride, cfg.search_size as f64))
}

/// Mean IoU between predicted and ground-truth boxes over `samples`.
pub fn pair_mean_iou<T: Float>(net: &Network<T>, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in samples {
        sum += predict_pair(net, s)?.iou(&s.gt_box);
    }
    Ok(sum / samples.len() as f64)
}

/// Mean IoU of full tracking runs over the first `max_frames` of each video.
pub fn tracking_mean_iou<T: Float>(
    net: &Network<T>,
    videos: &[SyntheticVideo],
    tracker: &TrackerConfig,
    max_frames: usize,
) -> Result<f64> {
    if videos.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for v in videos {
        let n = v.len().min(max_frames);
        let (out, _) = track_sequence(net, &v.frames[..n], v.boxes[0], tracker)?;
        let pred: Vec<BBox> = out.iter().map(|o| o.bbox).collect();
        sum += evaluate(&pred, &v.boxes[..n])?.mean_iou;
    }
    Ok(sum / videos.len() as f64)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_triplet: f64,
    pub loss_iou: f64,
    pub loss_focal: f64,
    pub val_mean_iou: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";

/// Owns the network, optimizer state and sampling stream of a training run.
pub struct Trainer<T> {
    pub net: Network<T>,
    pub adam: Adam<T>,
    pub scheduler: PlateauScheduler,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    /// Last completed epoch.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl<T: Float> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig, loss: LossConfig, sampler: SamplerConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        sampler.validate()?;
        let mc = net.config();
        if sampler.template_size != mc.template_size || sampler.search_size != mc.search_size {
            return Err(FearError::config(
                "template_size",
                "sampler and model crop sizes must agree",
            ));
        }
        Ok(Trainer {
            net,
            adam: Adam::default(),
            scheduler: PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            loss,
            sampler,
            tracker: TrackerConfig::default(),
            epoch: 0,
        })
    }

    /// Continues from a checkpoint; epoch numbering resumes after the stored
    /// epoch. Optimizer moments start fresh.
    pub fn resume(path: &Path, config: TrainConfig, loss: LossConfig, sampler: SamplerConfig) -> Result<Self> {
        let (net, meta) = load_checkpoint::<T>(path)?;
        let mut t = Trainer::new(net, config, loss, sampler)?;
        t.epoch = meta.epoch;
        t.rng = ChaCha8Rng::seed_from_u64(t.config.seed ^ (meta.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(t)
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr
    }

    /// Draws one (optionally augmented) pair from a random training video.
    pub fn draw_sample(&mut self, videos: &[SyntheticVideo], epoch: usize) -> Result<TrainingSample> {
        let k = self.rng.random_range(0..videos.len());
        let other = (videos.len() > 1).then(|| &videos[(k + 1) % videos.len()]);
        let pair = sample_pair(&videos[k], other, epoch, &mut self.rng, &self.sampler)?;
        Ok(if self.config.augment {
            augment(pair.sample, &mut self.rng, &self.sampler)
        } else {
            pair.sample
        })
    }

    /// One step on a batch drawn uniformly (with replacement) from `samples`.
    pub fn step_on(&mut self, samples: &[TrainingSample]) -> Result<StepLosses> {
        let batch: Vec<&TrainingSample> = (0..self.config.batch_size)
            .map(|_| &samples[self.rng.random_range(0..samples.len())])
            .collect();
        let lr = self.scheduler.lr;
        train_step(&mut self.net, &mut self.adam, &batch, &self.loss, lr, self.config.max_grad_norm)
    }

    /// Runs one epoch of freshly sampled pairs and returns the mean losses.
    pub fn train_epoch(&mut self, videos: &[SyntheticVideo]) -> Result<StepLosses> {
        let epoch = self.epoch + 1;
        let mut acc = StepLosses::default();
        for _ in 0..self.config.steps_per_epoch {
            let samples = (0..self.config.batch_size)
                .map(|_| self.draw_sample(videos, epoch))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TrainingSample> = samples.iter().collect();
            let lr = self.scheduler.lr;
            let l = train_step(&mut self.net, &mut self.adam, &refs, &self.loss, lr, self.config.max_grad_norm)?;
            acc.total += l.total;
            acc.triplet += l.triplet;
            acc.iou += l.iou;
            acc.focal += l.focal;
            acc.positives += l.positives;
        }
        let k = self.config.steps_per_epoch as f64;
        acc.total /= k;
        acc.triplet /= k;
        acc.iou /= k;
        acc.focal /= k;
        self.epoch = epoch;
        Ok(acc)
    }

    /// Epoch loop with validation tracking, plateau control and checkpoints.
    /// With `out_dir`, writes `best.safetensors`, `last.safetensors` and
    /// `metrics.csv` there.
    pub fn fit(
        &mut self,
        train: &[SyntheticVideo],
        val: &[SyntheticVideo],
        out_dir: Option<&Path>,
    ) -> Result<FitReport> {
        if train.is_empty() || val.is_empty() {
            return Err(FearError::LengthMismatch(
                "fit needs at least one training and one validation video".into(),
            ));
        }
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(csv::Writer::from_path(dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut best_path = None;
        let last_epoch = self.epoch + self.config.epochs;
        while self.epoch < last_epoch {
            let lr = self.scheduler.lr;
            let losses = self.train_epoch(train)?;
            let metric = tracking_mean_iou(&self.net, val, &self.tracker, self.config.val_frames)?;
            let record = EpochRecord {
                epoch: self.epoch,
                loss_total: losses.total,
                loss_triplet: losses.triplet,
                loss_iou: losses.iou,
                loss_focal: losses.focal,
                val_mean_iou: metric,
                lr,
            };
            log::info!(
                "epoch {} loss {:.4} (t {:.4} iou {:.4} focal {:.4}) val mIoU {:.4} lr {:.2e}",
                record.epoch,
                record.loss_total,
                record.loss_triplet,
                record.loss_iou,
                record.loss_focal,
                metric,
                lr
            );
            if let Some(w) = writer.as_mut() {
                w.serialize(&record)?;
                w.flush()?;
            }
            if metric > best.1 {
                best = (self.epoch, metric);
                if let Some(dir) = out_dir {
                    let p = dir.join(BEST_CHECKPOINT);
                    save_checkpoint(&self.net, self.epoch, &p)?;
                    best_path = Some(p);
                }
            }
            if let Some(dir) = out_dir {
                save_checkpoint(&self.net, self.epoch, &dir.join(LAST_CHECKPOINT))?;
            }
            self.scheduler.observe(metric);
            history.push(record);
        }
        Ok(FitReport {
            history,
            best_epoch: best.0,
            best_metric: best.1,
            best_checkpoint: best_path,
        })
    }
}
