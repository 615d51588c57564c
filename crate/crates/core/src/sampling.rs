//! Foreground/background sampling regions estimated from a CAM, the
//! stochastic pixel draw, and the partial pseudo-label mask built from it.

use rand::seq::index;
use rand::Rng;

use crate::error::{FcamError, Result};
use crate::raster::{Raster, RasterMeta, UNKNOWN_LABEL};
use crate::tensor::Cam;

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Lower edge of the first bin assigned to the upper class.
    pub threshold: f64,
    /// All values fell into a single histogram bin.
    pub degenerate: bool,
}

pub(crate) fn histogram_bin(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64) as usize).min(bins - 1)
}

/// Otsu threshold over `bins` uniform bins on `[0, 1]`.
///
/// Candidate thresholds are the bin lower edges `k / bins`; the split puts
/// bins `< k` in the lower class. Between-class variance is compared in exact
/// integer arithmetic on bin indices, and ties resolve to the smallest edge.
pub fn otsu_threshold(cam: &Cam, bins: usize) -> Result<OtsuResult> {
    if bins < 2 {
        return Err(FcamError::InvalidArgument("otsu needs at least 2 bins".into()));
    }
    let mut hist = vec![0u64; bins];
    for &v in cam.data() {
        hist[histogram_bin(v, bins)] += 1;
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        return Ok(OtsuResult {
            threshold: 0.0,
            degenerate: true,
        });
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    // maximize (s0·w1 − s1·w0)² / (w0·w1), proportional to between-class variance
    let (mut best_num, mut best_den) = (0u128, 1u128);
    let mut best_k = 0usize;
    let (mut w0, mut s0) = (0u64, 0u64);
    for k in 1..bins {
        w0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let diff = (s0 as i128 * w1 as i128 - s1 as i128 * w0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = w0 as u128 * w1 as u128;
        if num * best_den > best_num * den {
            best_num = num;
            best_den = den;
            best_k = k;
        }
    }
    Ok(OtsuResult {
        threshold: best_k as f64 / bins as f64,
        degenerate: false,
    })
}

/// Pixel sets `ℂ⁺` (foreground) and `ℂ⁻` (background), as raster indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRegions {
    pub height: usize,
    pub width: usize,
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
    pub otsu_threshold: f64,
    pub n_minus: f64,
}

impl SamplingRegions {
    pub fn coord(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

/// Number of pixels selected by a fraction, robust to `0.3 * 10 = 3.0000000000000004`.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices ordered by activation low → high, raster index breaking ties.
fn ascending_order(cam: &Cam) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cam.len()).collect();
    let data = cam.data();
    order.sort_by(|&a, &b| data[a].total_cmp(&data[b]).then(a.cmp(&b)));
    order
}

/// The lowest `⌈n_minus·N⌉` pixels, before removing foreground pixels.
pub fn bottom_fraction(cam: &Cam, n_minus: f64) -> Vec<usize> {
    let order = ascending_order(cam);
    let k = fraction_count(n_minus, order.len());
    order[..k].to_vec()
}

pub fn build_sampling_regions(cam: &Cam, n_minus: f64) -> Result<SamplingRegions> {
    if !(n_minus > 0.0 && n_minus <= 1.0) {
        return Err(FcamError::InvalidArgument(format!(
            "n_minus must lie in (0, 1], got {n_minus}"
        )));
    }
    let otsu = otsu_threshold(cam, DEFAULT_BINS)?;
    let data = cam.data();
    let mut foreground: Vec<usize> = if otsu.degenerate {
        Vec::new()
    } else {
        (0..data.len())
            .filter(|&p| data[p] as f64 > otsu.threshold)
            .collect()
    };
    if foreground.is_empty() {
        let argmax = data
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > data[best] { i } else { best });
        foreground.push(argmax);
    }
    let mut in_fg = vec![false; data.len()];
    for &p in &foreground {
        in_fg[p] = true;
    }
    let mut background: Vec<usize> = bottom_fraction(cam, n_minus)
        .into_iter()
        .filter(|&p| !in_fg[p])
        .collect();
    background.sort_unstable();
    Ok(SamplingRegions {
        height: cam.height(),
        width: cam.width(),
        foreground,
        background,
        otsu_threshold: otsu.threshold,
        n_minus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelLabel {
    Background,
    Foreground,
    Unknown,
}

/// The pixels drawn for one iteration (`Ω′`), as raster indices with labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StochasticPixelSet {
    pub pixels: Vec<(usize, PixelLabel)>,
}

impl StochasticPixelSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Uniform draws without replacement: `k_fg` from `ℂ⁺`, `k_bg` from `ℂ⁻`,
/// each clamped to the region size.
pub fn sample_pixels<R: Rng + ?Sized>(
    regions: &SamplingRegions,
    k_fg: usize,
    k_bg: usize,
    rng: &mut R,
) -> Result<StochasticPixelSet> {
    if k_fg > 0 && regions.foreground.is_empty() {
        return Err(FcamError::Empty("foreground region"));
    }
    let mut pixels = Vec::with_capacity(k_fg + k_bg);
    let mut draw = |set: &[usize], k: usize, label: PixelLabel| {
        let k = k.min(set.len());
        for i in index::sample(rng, set.len(), k) {
            pixels.push((set[i], label));
        }
    };
    draw(&regions.foreground, k_fg, PixelLabel::Foreground);
    draw(&regions.background, k_bg, PixelLabel::Background);
    Ok(StochasticPixelSet { pixels })
}

/// Partial pseudo-label mask `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<PixelLabel>,
}

impl PseudoLabelMask {
    pub fn unknown(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![PixelLabel::Unknown; height * width],
        }
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, PixelLabel)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l != PixelLabel::Unknown)
            .map(|(i, l)| (i, *l))
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled().count()
    }

    /// Byte-coded raster: 0 background, 1 foreground, 255 unknown.
    pub fn to_raster(&self) -> (Raster, RasterMeta) {
        let data = self
            .labels
            .iter()
            .map(|l| match l {
                PixelLabel::Background => 0.0,
                PixelLabel::Foreground => 1.0,
                PixelLabel::Unknown => UNKNOWN_LABEL,
            })
            .collect();
        let raster = Raster {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        };
        let meta = RasterMeta {
            encoding: Some("label-byte: 0=background 1=foreground 255=unknown".into()),
            ..Default::default()
        };
        (raster, meta)
    }
}

pub fn build_pseudo_mask(
    height: usize,
    width: usize,
    sampled: &StochasticPixelSet,
) -> Result<PseudoLabelMask> {
    let mut mask = PseudoLabelMask::unknown(height, width);
    for &(p, label) in &sampled.pixels {
        if p >= height * width {
            return Err(FcamError::InvalidArgument(format!(
                "pixel {p} outside {height}x{width}"
            )));
        }
        let slot = &mut mask.labels[p];
        if *slot != PixelLabel::Unknown && *slot != label {
            return Err(FcamError::InvalidArgument(format!(
                "pixel {p} drawn with conflicting labels"
            )));
        }
        *slot = label;
    }
    Ok(mask)
}
