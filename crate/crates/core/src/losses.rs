//! Training objective: classification cross-entropy for the classifier, and
//! the pixel-alignment loss for the decoder (partial cross-entropy on the
//! sampled pixels, dense CRF regularizer, absolute-size log-barrier).
//!
//! Every decoder term returns its value together with the analytic gradient
//! with respect to both softmax planes. All arithmetic is `f64`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FcamError, Result};
use crate::sampling::{PixelLabel, PseudoLabelMask};
use crate::tensor::{ImageTensor, SoftmaxMaps};

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which decoder terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub sampling: bool,
    pub crf: bool,
    pub asc: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            sampling: true,
            crf: true,
            asc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda_crf: f64,
    /// Current barrier sharpness `t`.
    pub barrier_t: f64,
    pub t_factor: f64,
    pub t_max: f64,
    /// Epochs elapsed since `t` was last reset to 1.
    pub barrier_epoch: u32,
    pub crf_sigma_xy: f64,
    pub crf_sigma_rgb: f64,
    /// Average-pool factor applied before the dense CRF; `None` picks 2 above 128².
    pub crf_downsample: Option<usize>,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_crf: 2e-9,
            barrier_t: 1.0,
            t_factor: 1.01,
            t_max: 10.0,
            barrier_epoch: 0,
            crf_sigma_xy: 15.0,
            crf_sigma_rgb: 0.1,
            crf_downsample: None,
            terms: LossTerms::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("alpha", self.alpha, 0.0),
            ("lambda_crf", self.lambda_crf, 0.0),
            ("barrier_t", self.barrier_t, 1.0),
            ("t_factor", self.t_factor, 1.0),
            ("t_max", self.t_max, 1.0),
        ];
        for (name, v, min) in checks {
            if !(v.is_finite() && v >= min) {
                return Err(FcamError::Config(format!("{name} = {v} must be finite and >= {min}")));
            }
        }
        for (name, v) in [("crf_sigma_xy", self.crf_sigma_xy), ("crf_sigma_rgb", self.crf_sigma_rgb)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(FcamError::Config(format!("{name} = {v} must be finite and positive")));
            }
        }
        if self.crf_downsample == Some(0) {
            return Err(FcamError::Config("crf_downsample must be positive".into()));
        }
        Ok(())
    }

    pub fn crf_factor(&self, height: usize, width: usize) -> usize {
        self.crf_downsample
            .unwrap_or(if height * width > 128 * 128 { 2 } else { 1 })
            .max(1)
    }
}

/// `t` after `epoch` epochs: `min(factor^epoch, t_max)`.
pub fn barrier_t_at(epoch: u32, factor: f64, t_max: f64) -> f64 {
    factor.powf(epoch as f64).min(t_max)
}

/// Advances the barrier schedule by one epoch.
pub fn update_barrier_t(mut cfg: LossConfig) -> LossConfig {
    cfg.barrier_epoch += 1;
    cfg.barrier_t = barrier_t_at(cfg.barrier_epoch, cfg.t_factor, cfg.t_max);
    cfg
}

/// `−log g(X)[y]`.
pub fn classification_ce(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        FcamError::InvalidArgument(format!("label {label} outside 0..{}", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of [`classification_ce`] with respect to the logits.
pub fn classification_ce_logit_grad(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p - if k == label { 1.0 } else { 0.0 })
        .collect()
}

/// Gradient with respect to both softmax planes.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrad {
    pub background: Vec<f64>,
    pub foreground: Vec<f64>,
}

impl MapGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            background: vec![0.0; n],
            foreground: vec![0.0; n],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        if c == 0 {
            &self.background
        } else {
            &self.foreground
        }
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        if c == 0 {
            &mut self.background
        } else {
            &mut self.foreground
        }
    }

    pub fn add_scaled(&mut self, other: &MapGrad, scale: f64) {
        for c in 0..2 {
            for (a, b) in self.channel_mut(c).iter_mut().zip(other.channel(c)) {
                *a += scale * b;
            }
        }
    }

    /// Chains through the per-pixel softmax; returns logit gradients laid out
    /// `[background | foreground]`.
    pub fn to_logit_grad(&self, maps: &SoftmaxMaps) -> Vec<f32> {
        let n = maps.len();
        let mut out = vec![0.0f32; 2 * n];
        for p in 0..n {
            let (s0, s1) = (maps.background()[p], maps.foreground()[p]);
            let (g0, g1) = (self.background[p], self.foreground[p]);
            let mean = g0 * s0 + g1 * s1;
            out[p] = (s0 * (g0 - mean)) as f32;
            out[n + p] = (s1 * (g1 - mean)) as f32;
        }
        out
    }
}

fn check_dims(maps: &SoftmaxMaps, h: usize, w: usize) -> Result<()> {
    if (maps.height(), maps.width()) != (h, w) {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{h}x{w}"),
            actual: format!("{}x{}", maps.height(), maps.width()),
        });
    }
    Ok(())
}

/// `Σ_{p labeled} −log S_p^{Y_p}`; unknown pixels contribute nothing.
pub fn partial_cross_entropy(maps: &SoftmaxMaps, mask: &PseudoLabelMask) -> Result<(f64, MapGrad)> {
    check_dims(maps, mask.height, mask.width)?;
    let mut grad = MapGrad::zeros(maps.len());
    let mut loss = 0.0;
    for (p, label) in mask.labeled() {
        let c = match label {
            PixelLabel::Background => 0,
            PixelLabel::Foreground => 1,
            PixelLabel::Unknown => continue,
        };
        let s = maps.channel(c)[p];
        loss -= s.max(PROB_FLOOR).ln();
        if s > PROB_FLOOR {
            grad.channel_mut(c)[p] -= 1.0 / s;
        }
    }
    Ok((loss, grad))
}

fn check_bandwidth(v: f64, name: &str) -> Result<()> {
    if v.is_nan() || v <= 0.0 {
        return Err(FcamError::InvalidArgument(format!(
            "{name} must be positive, got {v}"
        )));
    }
    Ok(())
}

/// Dense CRF regularizer at full resolution:
/// `Σ_c Σ_{p≠q} w_pq S^c_p (1 − S^c_q)` with a Gaussian bilateral kernel
/// over pixel position and color.
///
/// Pairs are visited once (`p < q`) in raster order, so the reduction order
/// is fixed and results are reproducible.
pub fn crf_loss(
    maps: &SoftmaxMaps,
    image: &ImageTensor,
    sigma_xy: f64,
    sigma_rgb: f64,
) -> Result<(f64, MapGrad)> {
    check_bandwidth(sigma_xy, "sigma_xy")?;
    check_bandwidth(sigma_rgb, "sigma_rgb")?;
    check_dims(maps, image.height(), image.width())?;
    let (h, w) = (image.height(), image.width());
    let n = h * w;

    // spatial exponent by |dy|, |dx|
    let inv_xy = 1.0 / (2.0 * sigma_xy * sigma_xy);
    let inv_rgb = 1.0 / (2.0 * sigma_rgb * sigma_rgb);
    let spatial: Vec<f64> = (0..h)
        .flat_map(|dy| (0..w).map(move |dx| -((dy * dy + dx * dx) as f64) * inv_xy))
        .collect();
    let rgb: Vec<[f64; 3]> = (0..n)
        .map(|p| {
            let c = image.rgb(p / w, p % w);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect();

    let s0 = maps.background();
    let s1 = maps.foreground();
    let mut degree = vec![0.0f64; n];
    let mut k0 = vec![0.0f64; n];
    let mut k1 = vec![0.0f64; n];
    for p in 0..n {
        let (py, px) = (p / w, p % w);
        let cp = rgb[p];
        let (mut dp, mut a0, mut a1) = (0.0, 0.0, 0.0);
        for q in p + 1..n {
            let (qy, qx) = (q / w, q % w);
            let cq = rgb[q];
            let dc = (cp[0] - cq[0]).powi(2) + (cp[1] - cq[1]).powi(2) + (cp[2] - cq[2]).powi(2);
            let e = spatial[(qy - py) * w + qx.abs_diff(px)] - dc * inv_rgb;
            let wpq = e.exp();
            dp += wpq;
            a0 += wpq * s0[q];
            a1 += wpq * s1[q];
            degree[q] += wpq;
            k0[q] += wpq * s0[p];
            k1[q] += wpq * s1[p];
        }
        degree[p] += dp;
        k0[p] += a0;
        k1[p] += a1;
    }

    let mut loss = 0.0;
    let mut grad = MapGrad::zeros(n);
    for p in 0..n {
        loss += s0[p] * (degree[p] - k0[p]) + s1[p] * (degree[p] - k1[p]);
        // symmetric kernel: ∂/∂S_p = Σ_q w_pq (1 − S_q) − Σ_q w_qp S_q
        grad.background[p] = degree[p] - 2.0 * k0[p];
        grad.foreground[p] = degree[p] - 2.0 * k1[p];
    }
    Ok((loss, grad))
}

fn avg_pool_plane(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh * f {
        for x in 0..ow * f {
            out[(y / f) * ow + x / f] += src[y * w + x] * inv;
        }
    }
    out
}

/// CRF evaluated on `f × f` average-pooled maps and image, with the spatial
/// bandwidth rescaled to the pooled grid; gradients are spread back evenly.
pub fn crf_loss_pooled(
    maps: &SoftmaxMaps,
    image: &ImageTensor,
    sigma_xy: f64,
    sigma_rgb: f64,
    factor: usize,
) -> Result<(f64, MapGrad)> {
    if factor <= 1 {
        return crf_loss(maps, image, sigma_xy, sigma_rgb);
    }
    check_dims(maps, image.height(), image.width())?;
    let (h, w) = (maps.height(), maps.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(FcamError::ShapeMismatch {
            expected: format!("sides divisible by {factor}"),
            actual: format!("{h}x{w}"),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let pooled = SoftmaxMaps::from_planes(
        oh,
        ow,
        avg_pool_plane(maps.background(), h, w, factor),
        avg_pool_plane(maps.foreground(), h, w, factor),
    )?;
    let mut img = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        let plane: Vec<f64> = image.plane(c).iter().map(|&v| v as f64).collect();
        img.extend(
            avg_pool_plane(&plane, h, w, factor)
                .into_iter()
                .map(|v| (v as f32).clamp(0.0, 1.0)),
        );
    }
    let small = ImageTensor::new(oh, ow, img)?;
    let (loss, g) = crf_loss(&pooled, &small, sigma_xy / factor as f64, sigma_rgb)?;
    let inv = 1.0 / (factor * factor) as f64;
    let mut grad = MapGrad::zeros(h * w);
    for y in 0..h {
        for x in 0..w {
            let q = (y / factor) * ow + x / factor;
            grad.background[y * w + x] = g.background[q] * inv;
            grad.foreground[y * w + x] = g.foreground[q] * inv;
        }
    }
    Ok((loss, grad))
}

/// Extended log-barrier `ψ̃_t(u)` for the constraint `u ≤ 0`.
pub fn extended_log_barrier(u: f64, t: f64) -> f64 {
    if u <= -1.0 / (t * t) {
        -(-u).ln() / t
    } else {
        t * u - (1.0 / (t * t)).ln() / t + 1.0 / t
    }
}

pub fn extended_log_barrier_grad(u: f64, t: f64) -> f64 {
    if u <= -1.0 / (t * t) {
        -1.0 / (t * u)
    } else {
        t
    }
}

/// Absolute-size constraint on both channels: `Σ_r ψ̃_t(−Σ_p S^r_p / N)`.
pub fn asc_log_barrier(maps: &SoftmaxMaps, t: f64) -> Result<(f64, MapGrad)> {
    if t.is_nan() || t < 1.0 {
        return Err(FcamError::InvalidArgument(format!("barrier t must be >= 1, got {t}")));
    }
    let n = maps.len();
    let mut grad = MapGrad::zeros(n);
    let mut loss = 0.0;
    for c in 0..2 {
        let size = maps.channel(c).iter().sum::<f64>() / n as f64;
        let u = -size;
        loss += extended_log_barrier(u, t);
        let g = -extended_log_barrier_grad(u, t) / n as f64;
        grad.channel_mut(c).fill(g);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Classifier training with the classification term only.
    Classifier,
    /// Decoder fine-tuning with the pixel-alignment loss; classifier frozen.
    Decoder,
}

impl FromStr for Stage {
    type Err = FcamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "classifier" => Ok(Stage::Classifier),
            "2" | "decoder" => Ok(Stage::Decoder),
            other => Err(FcamError::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub partial_ce: f64,
    pub crf: f64,
    pub asc: f64,
    pub total: f64,
}

/// Everything the objective looks at for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub probs: &'a [f64],
    pub label: usize,
    pub maps: &'a SoftmaxMaps,
    pub mask: &'a PseudoLabelMask,
    pub image: &'a ImageTensor,
}

/// Evaluates the objective for a stage. In the decoder stage the gradient
/// with respect to the softmax planes is returned; the classification term
/// is reported but takes no part in the total.
pub fn total_loss(
    inputs: &LossInputs<'_>,
    cfg: &LossConfig,
    stage: Stage,
) -> Result<(LossBreakdown, Option<MapGrad>)> {
    let classification = classification_ce(inputs.probs, inputs.label)?;
    match stage {
        Stage::Classifier => Ok((
            LossBreakdown {
                classification,
                total: classification,
                ..Default::default()
            },
            None,
        )),
        Stage::Decoder => {
            let maps = inputs.maps;
            let mut grad = MapGrad::zeros(maps.len());
            let mut out = LossBreakdown {
                classification,
                ..Default::default()
            };
            if cfg.terms.sampling {
                let (v, g) = partial_cross_entropy(maps, inputs.mask)?;
                out.partial_ce = v;
                grad.add_scaled(&g, cfg.alpha);
            }
            if cfg.terms.crf {
                let factor = cfg.crf_factor(maps.height(), maps.width());
                let (v, g) = crf_loss_pooled(
                    maps,
                    inputs.image,
                    cfg.crf_sigma_xy,
                    cfg.crf_sigma_rgb,
                    factor,
                )?;
                out.crf = v;
                grad.add_scaled(&g, cfg.lambda_crf);
            }
            if cfg.terms.asc {
                let (v, g) = asc_log_barrier(maps, cfg.barrier_t)?;
                out.asc = v;
                grad.add_scaled(&g, 1.0);
            }
            out.total = cfg.alpha * out.partial_ce + cfg.lambda_crf * out.crf + out.asc;
            Ok((out, Some(grad)))
        }
    }
}

/// One line of the line-delimited JSON training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub iteration: u64,
    pub epoch: u32,
    pub stage: Stage,
    pub classification: f64,
    pub partial_ce: f64,
    pub crf: f64,
    pub asc: f64,
    pub total: f64,
    pub t: f64,
    pub alpha: f64,
    pub lambda: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::PseudoLabelMask;

    fn uniform_maps(h: usize, w: usize, fg: f64) -> SoftmaxMaps {
        SoftmaxMaps::from_foreground(h, w, vec![fg; h * w]).unwrap()
    }

    #[test]
    fn classification_values() {
        assert_eq!(classification_ce(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((classification_ce(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let e = (-1.0f64).exp();
        assert!((classification_ce(&[1.0 - e, e], 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(classification_ce(&[0.5, 0.5], 2).is_err());
        assert!(classification_ce(&[1.0, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn partial_ce_values() {
        let mut mask = PseudoLabelMask::unknown(1, 2);
        assert_eq!(partial_cross_entropy(&uniform_maps(1, 2, 0.5), &mask).unwrap().0, 0.0);
        mask.labels[0] = PixelLabel::Foreground;
        let perfect = SoftmaxMaps::from_foreground(1, 2, vec![1.0, 0.3]).unwrap();
        assert_eq!(partial_cross_entropy(&perfect, &mask).unwrap().0, 0.0);
        let half = partial_cross_entropy(&uniform_maps(1, 2, 0.5), &mask).unwrap().0;
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn crf_uniform_two_by_two() {
        let img = ImageTensor::filled(2, 2, [0.3, 0.6, 0.1]);
        let (r, _) = crf_loss(&uniform_maps(2, 2, 0.5), &img, f64::INFINITY, 0.1).unwrap();
        assert!((r - 6.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn crf_separated_clusters_vanish() {
        // two same-colored blobs far apart, each with a hard label
        let (h, w) = (4, 40);
        let mut fg = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..2 {
                fg[y * w + x] = 1.0;
            }
        }
        let img = ImageTensor::filled(h, w, [0.5, 0.5, 0.5]);
        let maps = SoftmaxMaps::from_foreground(h, w, fg).unwrap();
        // background pixels x >= 2 are all within the kernel of each other, but
        // the only cross-label pairs are across the blob boundary; tiny sigma_xy kills them
        let (r, _) = crf_loss(&maps, &img, 0.05, 0.1).unwrap();
        assert!(r < 1e-50, "{r}");
    }

    #[test]
    fn crf_rejects_zero_bandwidth() {
        let img = ImageTensor::filled(2, 2, [0.0; 3]);
        assert!(crf_loss(&uniform_maps(2, 2, 0.5), &img, 0.0, 0.1).is_err());
        assert!(crf_loss(&uniform_maps(2, 2, 0.5), &img, 1.0, 0.0).is_err());
    }

    #[test]
    fn pooled_crf_spreads_gradient() {
        let img = ImageTensor::filled(4, 4, [0.2, 0.2, 0.2]);
        let maps = uniform_maps(4, 4, 0.3);
        let (full, _) = crf_loss_pooled(&maps, &img, 3.0, 0.1, 1).unwrap();
        let (pooled, g) = crf_loss_pooled(&maps, &img, 3.0, 0.1, 2).unwrap();
        assert!(full > pooled && pooled > 0.0);
        assert!(g.foreground.iter().all(|&v| (v - g.foreground[0]).abs() < 1e-12));
    }

    #[test]
    fn barrier_values() {
        let full = uniform_maps(2, 2, 1.0);
        // background size 0 -> u = 0 -> linear branch; foreground size 1 -> -log(1) = 0
        let (v, _) = asc_log_barrier(&full, 1.0).unwrap();
        assert!((extended_log_barrier(-1.0, 1.0) - 0.0).abs() < 1e-15);
        assert!((extended_log_barrier(-0.5, 1.0) - 0.5).abs() < 1e-15);
        assert!((v - extended_log_barrier(0.0, 1.0)).abs() < 1e-15);
        assert!(asc_log_barrier(&full, 0.5).is_err());
    }

    #[test]
    fn barrier_decreases_with_size() {
        for t in [1.0, 2.5, 10.0] {
            let mut prev = f64::INFINITY;
            for i in 1..=10 {
                let v = extended_log_barrier(-(i as f64) / 10.0, t);
                assert!(v < prev, "t={t} size={i}");
                prev = v;
            }
        }
    }

    #[test]
    fn barrier_continuous_at_switch() {
        for t in [1.0, 3.0, 10.0] {
            let u = -1.0 / (t * t);
            let below = extended_log_barrier(u - 1e-12, t);
            let above = extended_log_barrier(u + 1e-12, t);
            assert!((below - above).abs() < 1e-9);
            let gl = extended_log_barrier_grad(u, t);
            assert!((gl - t).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule() {
        let cfg = update_barrier_t(LossConfig::default());
        assert_eq!(cfg.barrier_t, 1.01);
        let mut c = LossConfig::default();
        for _ in 0..232 {
            c = update_barrier_t(c);
        }
        assert_eq!(c.barrier_t, 10.0);
        assert!(1.01f64.powi(232) > 10.0);
        c = update_barrier_t(c);
        assert_eq!(c.barrier_t, 10.0);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("decoder".parse::<Stage>().unwrap(), Stage::Decoder);
        assert!("3".parse::<Stage>().is_err());
    }

    #[test]
    fn isolated_partial_ce_total() {
        let img = ImageTensor::filled(2, 2, [0.5; 3]);
        let maps = uniform_maps(2, 2, 0.25);
        let mut mask = PseudoLabelMask::unknown(2, 2);
        mask.labels[1] = PixelLabel::Foreground;
        mask.labels[2] = PixelLabel::Background;
        let cfg = LossConfig {
            lambda_crf: 0.0,
            terms: LossTerms {
                sampling: true,
                crf: true,
                asc: false,
            },
            ..Default::default()
        };
        let inputs = LossInputs {
            probs: &[0.2, 0.8],
            label: 1,
            maps: &maps,
            mask: &mask,
            image: &img,
        };
        let (b, g) = total_loss(&inputs, &cfg, Stage::Decoder).unwrap();
        assert_eq!(b.total, b.partial_ce);
        assert!(g.is_some());
        let (b1, g1) = total_loss(&inputs, &cfg, Stage::Classifier).unwrap();
        assert_eq!(b1.total, b1.classification);
        assert!(g1.is_none());
    }

    #[test]
    fn logit_grad_matches_finite_differences() {
        let logits = [0.3f32, -1.2, 2.0, 0.1, -0.4, 0.9, 1.5, -2.0];
        let maps = SoftmaxMaps::from_logits(2, 2, &logits).unwrap();
        let coeff = [0.7, -1.3, 0.2, 2.2, -0.5, 0.4, 1.1, -0.9];
        let f = |m: &SoftmaxMaps| -> f64 {
            (0..4)
                .map(|p| coeff[p] * m.background()[p] + coeff[4 + p] * m.foreground()[p])
                .sum()
        };
        let grad = MapGrad {
            background: coeff[..4].to_vec(),
            foreground: coeff[4..].to_vec(),
        };
        let dz = grad.to_logit_grad(&maps);
        for i in 0..8 {
            let eps = 1e-3f32;
            let mut p = logits;
            p[i] += eps;
            let mut m = logits;
            m[i] -= eps;
            let fd = (f(&SoftmaxMaps::from_logits(2, 2, &p).unwrap())
                - f(&SoftmaxMaps::from_logits(2, 2, &m).unwrap()))
                / (2.0 * eps as f64);
            assert!((fd - dz[i] as f64).abs() < 1e-4, "{i}: {fd} vs {}", dz[i]);
        }
    }

    fn perturbed(maps: &SoftmaxMaps, c: usize, p: usize, d: f64) -> SoftmaxMaps {
        let mut m = maps.clone();
        m.channel_mut(c)[p] += d;
        m
    }

    fn check_map_grad(maps: &SoftmaxMaps, grad: &MapGrad, f: impl Fn(&SoftmaxMaps) -> f64) {
        let eps = 1e-6;
        for c in 0..2 {
            for p in 0..maps.len() {
                let fd = (f(&perturbed(maps, c, p, eps)) - f(&perturbed(maps, c, p, -eps))) / (2.0 * eps);
                let g = grad.channel(c)[p];
                assert!((fd - g).abs() < 1e-5 * (1.0 + fd.abs()), "c{c} p{p}: {fd} vs {g}");
            }
        }
    }

    fn sample_maps() -> (SoftmaxMaps, ImageTensor) {
        let fg: Vec<f64> = (0..12).map(|i| ((i * 7) % 11) as f64 / 11.0 + 0.02).collect();
        let img: Vec<f32> = (0..36).map(|i| ((i * 5) % 13) as f32 / 13.0).collect();
        (
            SoftmaxMaps::from_foreground(3, 4, fg).unwrap(),
            ImageTensor::new(3, 4, img).unwrap(),
        )
    }

    #[test]
    fn crf_gradient_matches_finite_differences() {
        let (maps, img) = sample_maps();
        let (_, g) = crf_loss(&maps, &img, 2.0, 0.3).unwrap();
        check_map_grad(&maps, &g, |m| crf_loss(m, &img, 2.0, 0.3).unwrap().0);
    }

    #[test]
    fn barrier_gradient_matches_finite_differences() {
        let (maps, _) = sample_maps();
        for t in [1.0, 4.0] {
            let (_, g) = asc_log_barrier(&maps, t).unwrap();
            check_map_grad(&maps, &g, |m| asc_log_barrier(m, t).unwrap().0);
        }
    }

    #[test]
    fn partial_ce_gradient_matches_finite_differences() {
        let (maps, _) = sample_maps();
        let mut mask = PseudoLabelMask::unknown(3, 4);
        mask.labels[0] = PixelLabel::Foreground;
        mask.labels[5] = PixelLabel::Background;
        let (_, g) = partial_cross_entropy(&maps, &mask).unwrap();
        check_map_grad(&maps, &g, |m| partial_cross_entropy(m, &mask).unwrap().0);
    }
}
