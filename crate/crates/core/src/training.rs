//! Two-stage training. Stage 1 fits the classifier with cross-entropy only;
//! stage 2 freezes it and fits the decoder with the pixel-alignment loss.
//! Both stages keep the checkpoint with the best validation localization.
//!
//! Samples inside a batch are processed in parallel and their gradients are
//! summed in batch order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{gap_cam_from_features, CamExtractor, CamMethod};
use crate::classifier::ClassifierBundle;
use crate::datasets::SampleRecord;
use crate::decoder::{fcam_inference, Decoder};
use crate::error::{FcamError, Result};
use crate::evaluation::{evaluate, mask_extent, BoundingBox, EvalReport, EvalSample};
use crate::losses::{
    classification_ce, classification_ce_logit_grad, total_loss, update_barrier_t, LossBreakdown,
    LossConfig, LossInputs, LossLogEntry, Stage,
};
use crate::nn::Sgd;
use crate::sampling::{build_pseudo_mask, build_sampling_regions, sample_pixels};
use crate::tensor::{bilinear_upscale, Cam, ImageTensor};

/// Validation score used to rank checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    MaxBoxAcc,
    #[default]
    MaxBoxAccV2,
    Pxap,
}

impl SelectMetric {
    pub fn score(&self, report: &EvalReport) -> f64 {
        match self {
            SelectMetric::MaxBoxAcc => report.box_acc(0.5).unwrap_or(0.0),
            SelectMetric::MaxBoxAccV2 => report.max_box_acc_v2,
            SelectMetric::Pxap => report.pxap.unwrap_or(report.max_box_acc_v2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub stage1_lr: f32,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub resize: usize,
    pub crop: usize,
    pub flip: bool,
    pub n_minus: f64,
    pub k_fg: usize,
    pub k_bg: usize,
    pub n_minus_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// CAM guiding the decoder during stage 2 and scored during stage 1.
    pub cam_method: CamMethod,
    pub select_metric: SelectMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 20,
            batch_size: 32,
            stage1_lr: 0.01,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            resize: 256,
            crop: 224,
            flip: true,
            n_minus: 0.3,
            k_fg: 1,
            k_bg: 1,
            n_minus_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            alpha_grid: vec![1.0, 0.1],
            cam_method: CamMethod::GapCam,
            select_metric: SelectMetric::MaxBoxAccV2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FcamError::Config("batch_size must be positive".into()));
        }
        if self.crop == 0 || self.crop > self.resize {
            return Err(FcamError::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        if !(self.n_minus > 0.0 && self.n_minus <= 1.0) {
            return Err(FcamError::Config(format!("n_minus {} outside (0, 1]", self.n_minus)));
        }
        for v in [self.stage1_lr, self.lr, self.momentum, self.weight_decay] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FcamError::Config(format!("optimizer setting {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Validation summary of one epoch's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub param_hash: String,
    pub val_localization: f64,
    pub val_accuracy: f64,
}

/// Highest validation localization; ties go to the earliest epoch.
pub fn select_model(records: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        best = match best {
            Some(b) if r.val_localization > b.val_localization
                || (r.val_localization == b.val_localization && r.epoch < b.epoch) =>
            {
                Some(r)
            }
            None => Some(r),
            keep => keep,
        };
    }
    best.ok_or(FcamError::Empty("checkpoint list"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_localization: f64,
    pub barrier_t: f64,
}

/// What a training stage leaves behind. The trained model is updated in place
/// with the selected parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub iterations: Vec<LossLogEntry>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected: CheckpointRecord,
    /// Loss configuration after the last epoch (barrier schedule advanced).
    pub final_loss: Option<LossConfig>,
}

const STAGE1_TAG: u64 = 0x5157_0001;
const STAGE2_TAG: u64 = 0x5157_0002;
const HELD_OUT_TAG: u64 = 0x5157_0003;

/// Independent RNG stream for `(tag, a, b)` under `seed`.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((a << 32) ^ b);
    rng
}

/// Training view: resize to `resize²` when needed, random `crop²` window,
/// optional horizontal flip.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, cfg: &TrainConfig, rng: &mut R) -> Result<ImageTensor> {
    let mut img = if (image.height(), image.width()) == (cfg.resize, cfg.resize) {
        image.clone()
    } else {
        image.resize(cfg.resize, cfg.resize)?
    };
    if cfg.crop < cfg.resize {
        let y0 = rng.random_range(0..=cfg.resize - cfg.crop);
        let x0 = rng.random_range(0..=cfg.resize - cfg.crop);
        img = img.crop(y0, x0, cfg.crop, cfg.crop)?;
    }
    if cfg.flip && rng.random_bool(0.5) {
        img = img.flip_horizontal();
    }
    Ok(img)
}

fn resize_mask_nearest(mask: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
        for x in 0..ow {
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
            out.push(mask[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Evaluation view: resize to `resize²` then center-crop `crop²`, with boxes
/// and masks carried along. Identity when the image already is `crop²` and
/// `resize == crop`.
pub fn eval_view(record: &SampleRecord, resize: usize, crop: usize) -> Result<SampleRecord> {
    let (h, w) = (record.image.height(), record.image.width());
    if (h, w) == (crop, crop) && resize == crop {
        return Ok(record.clone());
    }
    let image = record.image.resize(resize, resize)?;
    let off = (resize - crop) / 2;
    let image = image.crop(off, off, crop, crop)?;
    let (sx, sy) = (resize as f64 / w as f64, resize as f64 / h as f64);
    let clip = |v: f64| (v.max(off as f64) - off as f64).min(crop as f64);
    let gt_mask = record.gt_mask.as_ref().map(|m| {
        let big = resize_mask_nearest(m, h, w, resize, resize);
        let mut out = Vec::with_capacity(crop * crop);
        for y in off..off + crop {
            out.extend_from_slice(&big[y * resize + off..y * resize + off + crop]);
        }
        out
    });
    let mut gt_boxes: Vec<BoundingBox> = record
        .gt_boxes
        .iter()
        .map(|b| BoundingBox {
            x0: clip((b.x0 as f64 * sx).floor()) as usize,
            y0: clip((b.y0 as f64 * sy).floor()) as usize,
            x1: clip((b.x1 as f64 * sx).ceil()) as usize,
            y1: clip((b.y1 as f64 * sy).ceil()) as usize,
        })
        .filter(|b| !b.is_empty())
        .collect();
    if gt_boxes.is_empty() {
        if let Some(m) = &gt_mask {
            gt_boxes.push(mask_extent(m, crop));
        }
    }
    Ok(SampleRecord {
        id: record.id.clone(),
        image,
        label: record.label,
        gt_boxes,
        gt_mask,
        split: record.split,
    })
}

/// Which map is scored during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Localizer<'a> {
    Cam(CamMethod),
    Fcam(&'a Decoder),
}

impl Localizer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Localizer::Cam(m) => m.name(),
            Localizer::Fcam(_) => "fcam",
        }
    }
}

/// Localization map and class probabilities for the true label of each record.
pub fn localize(
    bundle: &ClassifierBundle,
    localizer: Localizer<'_>,
    image: &ImageTensor,
    label: usize,
) -> Result<(Cam, Vec<f64>)> {
    match localizer {
        Localizer::Fcam(dec) => {
            let (probs, cam) = fcam_inference(bundle, dec, image)?;
            Ok((cam, probs))
        }
        Localizer::Cam(method) => {
            let cam = method.extract_full(bundle, image, label)?;
            Ok((cam, bundle.forward_classify(image)?))
        }
    }
}

/// Scores a localizer on records that are already in evaluation view.
pub fn evaluate_model(
    bundle: &ClassifierBundle,
    localizer: Localizer<'_>,
    records: &[SampleRecord],
    operating_tau: Option<f64>,
) -> Result<EvalReport> {
    let samples: Vec<EvalSample> = records
        .par_iter()
        .map(|r| {
            let (cam, probs) = localize(bundle, localizer, &r.image, r.label)?;
            Ok(EvalSample {
                cam,
                boxes: r.gt_boxes.clone(),
                mask: r.gt_mask.clone(),
                probs,
                label: r.label,
            })
        })
        .collect::<Result<_>>()?;
    evaluate(localizer.name(), &samples, operating_tau)
}

fn check_records(records: &[SampleRecord], what: &'static str) -> Result<()> {
    if records.is_empty() {
        return Err(FcamError::Empty(what));
    }
    Ok(())
}

fn sum_in_order(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; len];
    for p in parts {
        for (a, g) in acc.iter_mut().zip(p) {
            *a += g;
        }
    }
    acc
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Stage 1: cross-entropy on the classifier only. The bundle ends up holding
/// the parameters of the selected epoch.
pub fn train_classifier(
    bundle: &mut ClassifierBundle,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_records(train, "training set")?;
    check_records(val, "validation set")?;
    let val_view: Vec<SampleRecord> = val
        .iter()
        .map(|r| eval_view(r, cfg.resize, cfg.crop))
        .collect::<Result<_>>()?;
    let mut opt = Sgd::new(bundle.params().len(), cfg.stage1_lr, cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::new();
    let mut iterations = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut iteration = 0u64;
    for epoch in 0..cfg.stage1_epochs {
        let order = shuffled(train.len(), &mut stream_rng(cfg.seed, STAGE1_TAG, epoch as u64, u64::MAX >> 32));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &ClassifierBundle = bundle;
            let results: Vec<(Vec<f32>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, STAGE1_TAG, epoch as u64, i as u64);
                    let img = augment(&train[i].image, cfg, &mut rng)?;
                    classifier_sample_grad(frozen, &img, train[i].label)
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f32;
            let loss: f64 = results.iter().map(|r| r.1).sum::<f64>() / n as f64;
            let mut grads = sum_in_order(results.into_iter().map(|r| r.0).collect(), bundle.params().len());
            grads.iter_mut().for_each(|g| *g /= n);
            opt.step(bundle.params_mut(), &grads);
            epoch_loss += loss * batch.len() as f64;
            iterations.push(LossLogEntry {
                iteration,
                epoch: epoch as u32,
                stage: Stage::Classifier,
                classification: loss,
                partial_ce: 0.0,
                crf: 0.0,
                asc: 0.0,
                total: loss,
                t: 1.0,
                alpha: 0.0,
                lambda: 0.0,
            });
            iteration += 1;
        }
        let report = evaluate_model(bundle, Localizer::Cam(cfg.cam_method), &val_view, None)?;
        let score = cfg.select_metric.score(&report);
        let record = CheckpointRecord {
            epoch,
            stage: Stage::Classifier,
            param_hash: bundle.param_hash(),
            val_localization: score,
            val_accuracy: report.classification_accuracy,
        };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, bundle.params().to_vec()));
        }
        epochs.push(EpochLog {
            stage: Stage::Classifier,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy: report.classification_accuracy,
            val_localization: score,
            barrier_t: 1.0,
        });
        checkpoints.push(record);
    }
    if let Some((_, params)) = best {
        bundle.set_params(params)?;
    }
    let selected = match select_model(&checkpoints) {
        Ok(r) => r.clone(),
        Err(_) => CheckpointRecord {
            epoch: 0,
            stage: Stage::Classifier,
            param_hash: bundle.param_hash(),
            val_localization: 0.0,
            val_accuracy: 0.0,
        },
    };
    Ok(TrainOutcome {
        epochs,
        iterations,
        checkpoints,
        selected,
        final_loss: None,
    })
}

/// Gradient of the cross-entropy for one image, with the loss value.
pub fn classifier_sample_grad(
    bundle: &ClassifierBundle,
    image: &ImageTensor,
    label: usize,
) -> Result<(Vec<f32>, f64)> {
    bundle.check_class(label)?;
    let (feats, trace) = bundle.encode_train(image)?;
    let top = &feats.top;
    let out = bundle.head_forward(top);
    let probs = out.probabilities();
    let loss = classification_ce(&probs, label)?;
    let dlogits: Vec<f32> = classification_ce_logit_grad(&probs, label)
        .into_iter()
        .map(|g| g as f32)
        .collect();
    let mut grads = vec![0.0f32; bundle.params().len()];
    let dtop = bundle.head_backward(&out, (top.c, top.h, top.w), &dlogits, &mut grads);
    bundle.encoder_backward(&trace, dtop, &mut grads);
    Ok((grads, loss))
}

/// Stage-2 objective and decoder gradient for one (already augmented) image.
pub fn decoder_sample_grad<R: Rng + ?Sized>(
    bundle: &ClassifierBundle,
    decoder: &Decoder,
    image: &ImageTensor,
    label: usize,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<(Vec<f32>, LossBreakdown)> {
    bundle.check_class(label)?;
    let feats = bundle.encode(image)?;
    let low = match cfg.cam_method {
        CamMethod::GapCam => gap_cam_from_features(bundle, &feats, label)?,
        other => other.extract(bundle, image, label)?,
    };
    let cam = if (low.height(), low.width()) == (image.height(), image.width()) {
        low
    } else {
        bilinear_upscale(&low, image.height(), image.width())?
    };
    let (k_fg, k_bg) = if loss_cfg.terms.sampling {
        (cfg.k_fg, cfg.k_bg)
    } else {
        (0, 0)
    };
    let regions = build_sampling_regions(&cam, cfg.n_minus)?;
    let drawn = sample_pixels(&regions, k_fg, k_bg, rng)?;
    let mask = build_pseudo_mask(image.height(), image.width(), &drawn)?;
    let probs = bundle.head_forward(&feats.top).probabilities();
    let (maps, trace) = decoder.decode_train(&feats)?;
    let inputs = LossInputs {
        probs: &probs,
        label,
        maps: &maps,
        mask: &mask,
        image,
    };
    let (breakdown, grad) = total_loss(&inputs, loss_cfg, Stage::Decoder)?;
    let grad = grad.expect("decoder stage yields a map gradient");
    let mut grads = vec![0.0f32; decoder.param_count()];
    decoder.backward(&trace, grad.to_logit_grad(&maps), &mut grads);
    Ok((grads, breakdown))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for b in parts {
        m.classification += b.classification / n;
        m.partial_ce += b.partial_ce / n;
        m.crf += b.crf / n;
        m.asc += b.asc / n;
        m.total += b.total / n;
    }
    m
}

/// Stage 2: fits the decoder against the frozen classifier. Fails with
/// [`FcamError::FreezeViolation`] if the classifier parameters changed.
pub fn finetune_decoder(
    bundle: &ClassifierBundle,
    decoder: &mut Decoder,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_records(train, "training set")?;
    check_records(val, "validation set")?;
    let frozen_hash = bundle.param_hash();
    let val_view: Vec<SampleRecord> = val
        .iter()
        .map(|r| eval_view(r, cfg.resize, cfg.crop))
        .collect::<Result<_>>()?;
    let mut loss_cfg = loss_cfg.clone();
    let mut opt = Sgd::new(decoder.param_count(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::new();
    let mut iterations = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut iteration = 0u64;
    for epoch in 0..cfg.stage2_epochs {
        let order = shuffled(train.len(), &mut stream_rng(cfg.seed, STAGE2_TAG, epoch as u64, u64::MAX >> 32));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let dec: &Decoder = decoder;
            let lc = &loss_cfg;
            let results: Vec<(Vec<f32>, LossBreakdown)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, STAGE2_TAG, epoch as u64, i as u64);
                    let img = augment(&train[i].image, cfg, &mut rng)?;
                    decoder_sample_grad(bundle, dec, &img, train[i].label, cfg, lc, &mut rng)
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f32;
            let mean = mean_breakdown(&results.iter().map(|r| r.1).collect::<Vec<_>>());
            let mut grads = sum_in_order(results.into_iter().map(|r| r.0).collect(), decoder.param_count());
            grads.iter_mut().for_each(|g| *g /= n);
            opt.step(decoder.params_mut(), &grads);
            epoch_loss += mean.total * batch.len() as f64;
            iterations.push(LossLogEntry {
                iteration,
                epoch: epoch as u32,
                stage: Stage::Decoder,
                classification: mean.classification,
                partial_ce: mean.partial_ce,
                crf: mean.crf,
                asc: mean.asc,
                total: mean.total,
                t: loss_cfg.barrier_t,
                alpha: loss_cfg.alpha,
                lambda: loss_cfg.lambda_crf,
            });
            iteration += 1;
        }
        let t_used = loss_cfg.barrier_t;
        loss_cfg = update_barrier_t(loss_cfg);
        let report = evaluate_model(bundle, Localizer::Fcam(decoder), &val_view, None)?;
        let score = cfg.select_metric.score(&report);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, decoder.params().to_vec()));
        }
        checkpoints.push(CheckpointRecord {
            epoch,
            stage: Stage::Decoder,
            param_hash: decoder.param_hash(),
            val_localization: score,
            val_accuracy: report.classification_accuracy,
        });
        epochs.push(EpochLog {
            stage: Stage::Decoder,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy: report.classification_accuracy,
            val_localization: score,
            barrier_t: t_used,
        });
    }
    if bundle.param_hash() != frozen_hash {
        return Err(FcamError::FreezeViolation);
    }
    if let Some((_, params)) = best {
        decoder.set_params(params)?;
    }
    let selected = select_model(&checkpoints)
        .cloned()
        .unwrap_or_else(|_| CheckpointRecord {
            epoch: 0,
            stage: Stage::Decoder,
            param_hash: decoder.param_hash(),
            val_localization: 0.0,
            val_accuracy: 0.0,
        });
    Ok(TrainOutcome {
        epochs,
        iterations,
        checkpoints,
        selected,
        final_loss: Some(loss_cfg),
    })
}

/// One `(n⁻, α)` point of a stage-2 grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_minus: f64,
    pub alpha: f64,
    pub val_localization: f64,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub points: Vec<GridPoint>,
    /// Index into `points` of the winner; ties go to the earliest point.
    pub best: usize,
    pub decoder: Decoder,
    pub outcome: TrainOutcome,
}

/// Runs stage 2 once per `(n⁻, α)` pair of the configured grids, each from a
/// fresh decoder initialized with `decoder_seed`, and keeps the pair with the
/// best validation localization.
pub fn grid_search_decoder(
    bundle: &ClassifierBundle,
    template: &Decoder,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<GridSearchOutcome> {
    if cfg.n_minus_grid.is_empty() || cfg.alpha_grid.is_empty() {
        return Err(FcamError::Empty("search grid"));
    }
    let mut points = Vec::new();
    let mut best: Option<(usize, Decoder, TrainOutcome)> = None;
    for &n_minus in &cfg.n_minus_grid {
        for &alpha in &cfg.alpha_grid {
            let point_cfg = TrainConfig { n_minus, ..cfg.clone() };
            let point_loss = LossConfig { alpha, ..loss_cfg.clone() };
            let mut decoder = template.clone();
            let outcome = finetune_decoder(bundle, &mut decoder, train, val, &point_cfg, &point_loss)?;
            let score = outcome.selected.val_localization;
            points.push(GridPoint {
                n_minus,
                alpha,
                val_localization: score,
                selected_epoch: outcome.selected.epoch,
            });
            if best.as_ref().is_none_or(|(i, _, _)| score > points[*i].val_localization) {
                best = Some((points.len() - 1, decoder, outcome));
            }
        }
    }
    let (best, decoder, outcome) = best.expect("grid is non-empty");
    Ok(GridSearchOutcome {
        points,
        best,
        decoder,
        outcome,
    })
}

/// Mean stage-2 objective over fixed records with fixed pixel draws and no
/// augmentation; comparable across decoder states.
pub fn decoder_loss_on(
    bundle: &ClassifierBundle,
    decoder: &Decoder,
    records: &[SampleRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_records(records, "held-out batch")?;
    let parts: Vec<LossBreakdown> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = stream_rng(cfg.seed, HELD_OUT_TAG, 0, i as u64);
            decoder_sample_grad(bundle, decoder, &r.image, r.label, cfg, loss_cfg, &mut rng).map(|x| x.1)
        })
        .collect::<Result<_>>()?;
    Ok(mean_breakdown(&parts))
}
