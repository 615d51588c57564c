//! WSOL localization metrics: threshold sweeps, box extraction, IoU,
//! MaxBoxAcc / MaxBoxAccV2, top-k localization, pixel AP and activation
//! statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcamError, Result};
use crate::tensor::Cam;

/// Number of thresholds in a sweep over `[0, 1]` with step 0.001.
pub const TAU_STEPS: usize = 1001;
pub const BOX_SIGMAS: [f64; 3] = [0.3, 0.5, 0.7];
pub const HISTOGRAM_BINS: usize = 256;

pub fn tau(i: usize) -> f64 {
    i as f64 / (TAU_STEPS - 1) as f64
}

pub fn taus() -> Vec<f64> {
    (0..TAU_STEPS).map(tau).collect()
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 < x0 || y1 < y0 {
            return Err(FcamError::InvalidArgument(format!(
                "inverted box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `cam ≥ τ`, row-major.
pub fn threshold_mask(cam: &Cam, tau: f64) -> Vec<bool> {
    cam.data().iter().map(|&v| v as f64 >= tau).collect()
}

/// Tight box around the largest 4-connected component of `mask`; on ties
/// the component reached first in raster order wins. Empty mask gives an
/// empty box.
pub fn mask_to_box(mask: &[bool], height: usize, width: usize) -> BoundingBox {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / width, p % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, BoundingBox { x0, y0, x1, y1 }));
        }
    }
    best.map(|(_, b)| b).unwrap_or_default()
}

/// Tight box of the whole mask (used for ground truth consistency checks).
pub fn mask_extent(mask: &[bool], width: usize) -> BoundingBox {
    let mut b: Option<BoundingBox> = None;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (p / width, p % width);
        let e = b.get_or_insert(BoundingBox {
            x0: x,
            y0: y,
            x1: x + 1,
            y1: y + 1,
        });
        e.x0 = e.x0.min(x);
        e.y0 = e.y0.min(y);
        e.x1 = e.x1.max(x + 1);
        e.y1 = e.y1.max(y + 1);
    }
    b.unwrap_or_default()
}

/// Best IoU against any ground-truth box, for every threshold of the sweep.
pub fn iou_sweep(cam: &Cam, gt: &[BoundingBox]) -> Vec<f64> {
    let mut sorted: Vec<f32> = cam.data().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out = Vec::with_capacity(TAU_STEPS);
    let mut last: Option<(usize, f64)> = None;
    for i in 0..TAU_STEPS {
        let t = tau(i);
        let count = sorted.partition_point(|&v| v as f64 >= t);
        let score = match last {
            Some((c, s)) if c == count => s,
            _ => {
                let b = mask_to_box(&threshold_mask(cam, t), cam.height(), cam.width());
                gt.iter().map(|g| iou(&b, g)).fold(0.0, f64::max)
            }
        };
        last = Some((count, score));
        out.push(score);
    }
    out
}

/// Metric value at each threshold of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub taus: Vec<f64>,
    pub scores: Vec<f64>,
}

impl SweepCurve {
    pub fn max(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Threshold of the first maximum.
    pub fn argmax_tau(&self) -> f64 {
        let m = self.max();
        self.taus[self.scores.iter().position(|&s| s == m).unwrap_or(0)]
    }

    /// Width of the longest contiguous τ run whose score is at least
    /// `fraction × peak`, measured as points × step.
    pub fn robust_width(&self, fraction: f64) -> f64 {
        let floor = fraction * self.max();
        let (mut best, mut run) = (0usize, 0usize);
        for &s in &self.scores {
            run = if s >= floor { run + 1 } else { 0 };
            best = best.max(run);
        }
        best as f64 / (TAU_STEPS - 1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,score\n");
        for (t, v) in self.taus.iter().zip(&self.scores) {
            s.push_str(&format!("{t:.3},{v}\n"));
        }
        s
    }
}

fn check_inputs(cams: &[Cam], gts: &[Vec<BoundingBox>]) -> Result<()> {
    if cams.is_empty() {
        return Err(FcamError::Empty("evaluation set"));
    }
    if cams.len() != gts.len() {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{} ground-truth entries", cams.len()),
            actual: gts.len().to_string(),
        });
    }
    if let Some(i) = gts.iter().position(|g| g.is_empty()) {
        return Err(FcamError::InvalidArgument(format!("image {i} has no ground-truth box")));
    }
    Ok(())
}

/// Per-image IoU sweeps, computed in parallel.
pub fn iou_sweeps(cams: &[Cam], gts: &[Vec<BoundingBox>]) -> Result<Vec<Vec<f64>>> {
    check_inputs(cams, gts)?;
    Ok(cams
        .par_iter()
        .zip(gts.par_iter())
        .map(|(c, g)| iou_sweep(c, g))
        .collect())
}

/// Box accuracy at every threshold from precomputed IoU sweeps.
pub fn box_accuracy_curve(sweeps: &[Vec<f64>], sigma: f64) -> SweepCurve {
    let n = sweeps.len() as f64;
    let scores = (0..TAU_STEPS)
        .map(|i| sweeps.iter().filter(|s| s[i] >= sigma).count() as f64 / n)
        .collect();
    SweepCurve {
        taus: taus(),
        scores,
    }
}

/// MaxBoxAcc at `sigma` with its threshold curve.
pub fn max_box_acc(cams: &[Cam], gts: &[Vec<BoundingBox>], sigma: f64) -> Result<(f64, SweepCurve)> {
    let sweeps = iou_sweeps(cams, gts)?;
    let curve = box_accuracy_curve(&sweeps, sigma);
    Ok((curve.max(), curve))
}

/// Mean of MaxBoxAcc over σ ∈ {0.3, 0.5, 0.7}, with the three scores.
pub fn max_box_acc_v2(cams: &[Cam], gts: &[Vec<BoundingBox>]) -> Result<(f64, [f64; 3])> {
    let sweeps = iou_sweeps(cams, gts)?;
    let scores = BOX_SIGMAS.map(|s| box_accuracy_curve(&sweeps, s).max());
    Ok((scores.iter().sum::<f64>() / 3.0, scores))
}

/// Fraction of images whose label is among the top-`k` predictions and
/// whose box at threshold `tau` reaches IoU ≥ `sigma`.
pub fn topk_localization(
    cams: &[Cam],
    gts: &[Vec<BoundingBox>],
    probs: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    sigma: f64,
    tau: f64,
) -> Result<f64> {
    check_inputs(cams, gts)?;
    if probs.len() != cams.len() || labels.len() != cams.len() {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{} predictions and labels", cams.len()),
            actual: format!("{} / {}", probs.len(), labels.len()),
        });
    }
    let hits: Vec<bool> = (0..cams.len())
        .into_par_iter()
        .map(|i| {
            if !in_top_k(&probs[i], labels[i], k) {
                return false;
            }
            let cam = &cams[i];
            let b = mask_to_box(&threshold_mask(cam, tau), cam.height(), cam.width());
            gts[i].iter().any(|g| iou(&b, g) >= sigma)
        })
        .collect();
    Ok(hits.iter().filter(|&&h| h).count() as f64 / cams.len() as f64)
}

/// Whether `label` ranks among the `k` largest scores (ties broken by index).
pub fn in_top_k(probs: &[f64], label: usize, k: usize) -> bool {
    let Some(&p) = probs.get(label) else {
        return false;
    };
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count();
    ahead < k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub taus: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,precision,recall\n");
        for i in 0..self.taus.len() {
            s.push_str(&format!("{:.3},{},{}\n", self.taus[i], self.precision[i], self.recall[i]));
        }
        s
    }
}

/// Pixel average precision pooled over every pixel of the split:
/// `Σ_i (R_i − R_{i+1}) · P_i` over the ascending threshold sweep with
/// `R` past the last threshold taken as 0.
pub fn pxap(cams: &[Cam], masks: &[Vec<bool>]) -> Result<(f64, PrCurve)> {
    if cams.is_empty() {
        return Err(FcamError::Empty("evaluation set"));
    }
    if cams.len() != masks.len() {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{} masks", cams.len()),
            actual: masks.len().to_string(),
        });
    }
    let grid = taus();
    // pos[i] / neg[i]: pixels whose score clears exactly thresholds 0..i
    let mut pos = vec![0u64; TAU_STEPS];
    let mut neg = vec![0u64; TAU_STEPS];
    let mut below = (0u64, 0u64);
    for (i, (cam, mask)) in cams.iter().zip(masks).enumerate() {
        if mask.len() != cam.len() {
            return Err(FcamError::ShapeMismatch {
                expected: format!("mask {i} with {} pixels", cam.len()),
                actual: mask.len().to_string(),
            });
        }
        for (&v, &m) in cam.data().iter().zip(mask) {
            let cleared = grid.partition_point(|&t| v as f64 >= t);
            match (cleared, m) {
                (0, true) => below.0 += 1,
                (0, false) => below.1 += 1,
                (c, true) => pos[c - 1] += 1,
                (c, false) => neg[c - 1] += 1,
            }
        }
    }
    let total_pos: u64 = pos.iter().sum::<u64>() + below.0;
    if total_pos == 0 {
        return Err(FcamError::InvalidArgument(
            "ground truth has no foreground pixel".into(),
        ));
    }
    let mut precision = vec![0.0; TAU_STEPS];
    let mut recall = vec![0.0; TAU_STEPS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..TAU_STEPS).rev() {
        tp += pos[i];
        fp += neg[i];
        precision[i] = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        recall[i] = tp as f64 / total_pos as f64;
    }
    let mut ap = 0.0;
    for i in 0..TAU_STEPS {
        let next = if i + 1 < TAU_STEPS { recall[i + 1] } else { 0.0 };
        ap += (recall[i] - next) * precision[i];
    }
    Ok((
        ap,
        PrCurve {
            taus: grid,
            precision,
            recall,
        },
    ))
}

/// Pooled activation histogram over `[0, 1]`; mass sums to 1.
pub fn activation_histogram(cams: &[Cam], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(FcamError::InvalidArgument("zero histogram bins".into()));
    }
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for cam in cams {
        for &v in cam.data() {
            counts[((v as f64 * bins as f64) as usize).min(bins - 1)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(FcamError::Empty("activation histogram input"));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Fraction of pooled pixels with `lo < v < hi`.
pub fn interior_mass(cams: &[Cam], lo: f32, hi: f32) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for cam in cams {
        for &v in cam.data() {
            total += 1;
            if v > lo && v < hi {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// One image to score.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub cam: Cam,
    pub boxes: Vec<BoundingBox>,
    pub mask: Option<Vec<bool>>,
    pub probs: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaScore {
    pub sigma: f64,
    pub score: f64,
    pub best_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub num_images: usize,
    pub max_box_acc: Vec<SigmaScore>,
    pub max_box_acc_v2: f64,
    pub operating_tau: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub classification_accuracy: f64,
    pub pxap: Option<f64>,
    /// Width of the τ run where σ = 0.5 box accuracy stays ≥ 0.9 × peak.
    pub tau_robust_width: f64,
    /// Pooled pixel mass strictly inside (0.2, 0.8).
    pub interior_mass: f64,
    pub box_curves: Vec<SweepCurve>,
    pub pr_curve: Option<PrCurve>,
    pub histogram: Vec<f64>,
}

impl EvalReport {
    pub fn box_acc(&self, sigma: f64) -> Option<f64> {
        self.max_box_acc
            .iter()
            .find(|s| (s.sigma - sigma).abs() < 1e-12)
            .map(|s| s.score)
    }

    pub fn box_curve(&self, sigma: f64) -> Option<&SweepCurve> {
        BOX_SIGMAS
            .iter()
            .position(|&s| (s - sigma).abs() < 1e-12)
            .and_then(|i| self.box_curves.get(i))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Full metric suite. `operating_tau` fixes the threshold for top-k
/// localization (normally the validation optimum); when `None` the σ = 0.5
/// optimum on this split is used.
pub fn evaluate(method: &str, samples: &[EvalSample], operating_tau: Option<f64>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(FcamError::Empty("evaluation set"));
    }
    let cams: Vec<Cam> = samples.iter().map(|s| s.cam.clone()).collect();
    let gts: Vec<Vec<BoundingBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let probs: Vec<Vec<f64>> = samples.iter().map(|s| s.probs.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let sweeps = iou_sweeps(&cams, &gts)?;
    let box_curves: Vec<SweepCurve> = BOX_SIGMAS
        .iter()
        .map(|&s| box_accuracy_curve(&sweeps, s))
        .collect();
    let max_box_acc: Vec<SigmaScore> = BOX_SIGMAS
        .iter()
        .zip(&box_curves)
        .map(|(&sigma, c)| SigmaScore {
            sigma,
            score: c.max(),
            best_tau: c.argmax_tau(),
        })
        .collect();
    let v2 = max_box_acc.iter().map(|s| s.score).sum::<f64>() / 3.0;
    let op_tau = operating_tau.unwrap_or(max_box_acc[1].best_tau);
    let top1 = topk_localization(&cams, &gts, &probs, &labels, 1, 0.5, op_tau)?;
    let top5 = topk_localization(&cams, &gts, &probs, &labels, 5, 0.5, op_tau)?;
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| in_top_k(p, l, 1))
        .count();
    let (pxap_score, pr_curve) = if samples.iter().all(|s| s.mask.is_some()) {
        let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.mask.clone().unwrap()).collect();
        let (ap, curve) = pxap(&cams, &masks)?;
        (Some(ap), Some(curve))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        method: method.to_string(),
        num_images: samples.len(),
        tau_robust_width: box_curves[1].robust_width(0.9),
        max_box_acc,
        max_box_acc_v2: v2,
        operating_tau: op_tau,
        top1_loc: top1,
        top5_loc: top5,
        classification_accuracy: correct as f64 / samples.len() as f64,
        pxap: pxap_score,
        interior_mass: interior_mass(&cams, 0.2, 0.8),
        box_curves,
        pr_curve,
        histogram: activation_histogram(&cams, HISTOGRAM_BINS)?,
    })
}
