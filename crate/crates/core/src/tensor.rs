//! Raster types shared by every stage: input images, activation maps and
//! the decoder's two-channel softmax output.

use serde::{Deserialize, Serialize};

use crate::error::{FcamError, Result};

/// Color image with values in `[0, 1]`, stored channel-planar (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FcamError::Empty("image must be at least 1x1"));
        }
        let expected = Self::CHANNELS * height * width;
        if data.len() != expected {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FcamError::NonFinite { index });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FcamError::InvalidArgument(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(v.clamp(0.0, 1.0));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Copies the window `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(FcamError::InvalidArgument(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear resize of every channel (any target size).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(FcamError::InvalidArgument("zero target size".into()));
        }
        let mut data = Vec::with_capacity(3 * out_h * out_w);
        for c in 0..3 {
            data.extend(resample_bilinear(
                self.plane(c),
                self.height,
                self.width,
                out_h,
                out_w,
            ));
        }
        Ok(Self {
            height: out_h,
            width: out_w,
            data,
        })
    }
}

/// Provenance of an activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    Raw,
    Interpolated,
    FcamForeground,
}

/// Single-channel activation map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    height: usize,
    width: usize,
    data: Vec<f32>,
    source: CamSource,
    /// Set when the map it was normalized from had zero range.
    degenerate: bool,
}

impl Cam {
    /// Wraps values that are already in `[0, 1]`.
    pub fn from_unit(
        height: usize,
        width: usize,
        data: Vec<f32>,
        source: CamSource,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FcamError::Empty("cam must be at least 1x1"));
        }
        if data.len() != height * width {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} values", height * width),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FcamError::NonFinite { index });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FcamError::InvalidArgument("cam values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            source,
            degenerate: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source(&self) -> CamSource {
        self.source
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn with_source(mut self, source: CamSource) -> Self {
        self.source = source;
        self
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Min-max normalizes a raw activation map to `[0, 1]`.
///
/// A zero-range map yields all zeros with the degenerate flag set.
pub fn normalize_cam(height: usize, width: usize, raw: &[f64]) -> Result<Cam> {
    if raw.is_empty() || height * width == 0 {
        return Err(FcamError::Empty("cam needs at least one element"));
    }
    if raw.len() != height * width {
        return Err(FcamError::ShapeMismatch {
            expected: format!("{} values", height * width),
            actual: format!("{} values", raw.len()),
        });
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(FcamError::NonFinite { index });
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let (data, degenerate) = if range > 0.0 {
        let data = raw
            .iter()
            .map(|&v| (((v - lo) / range) as f32).clamp(0.0, 1.0))
            .collect();
        (data, false)
    } else {
        (vec![0.0; raw.len()], true)
    };
    Ok(Cam {
        height,
        width,
        data,
        source: CamSource::Raw,
        degenerate,
    })
}

/// Bilinear upscaling with half-pixel-center alignment.
pub fn bilinear_upscale(cam: &Cam, out_h: usize, out_w: usize) -> Result<Cam> {
    if out_h == 0 || out_w == 0 {
        return Err(FcamError::InvalidArgument("zero target size".into()));
    }
    if out_h < cam.height || out_w < cam.width {
        return Err(FcamError::InvalidArgument(format!(
            "upscale target {out_h}x{out_w} smaller than {}x{}",
            cam.height, cam.width
        )));
    }
    Ok(Cam {
        height: out_h,
        width: out_w,
        data: resample_bilinear(&cam.data, cam.height, cam.width, out_h, out_w),
        source: CamSource::Interpolated,
        degenerate: cam.degenerate,
    })
}

fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn resample_bilinear(
    src: &[f32],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ys = axis_weights(in_h, out_h);
    let xs = axis_weights(in_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = src[y0 * in_w + x0] as f64;
            let b = src[y0 * in_w + x1] as f64;
            let c = src[y1 * in_w + x0] as f64;
            let d = src[y1 * in_w + x1] as f64;
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

/// Per-pixel two-class distribution `(background, foreground)` from the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMaps {
    height: usize,
    width: usize,
    background: Vec<f64>,
    foreground: Vec<f64>,
}

impl SoftmaxMaps {
    /// Builds the maps from a foreground probability map; background is its complement.
    pub fn from_foreground(height: usize, width: usize, foreground: Vec<f64>) -> Result<Self> {
        if foreground.len() != height * width || foreground.is_empty() {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} values", height * width),
                actual: format!("{} values", foreground.len()),
            });
        }
        if foreground.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FcamError::InvalidArgument(
                "foreground probabilities must lie in [0, 1]".into(),
            ));
        }
        let background = foreground.iter().map(|v| 1.0 - v).collect();
        Ok(Self {
            height,
            width,
            background,
            foreground,
        })
    }

    /// Per-pixel softmax over two logit planes laid out `[background | foreground]`.
    pub fn from_logits(height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        let n = height * width;
        if logits.len() != 2 * n || n == 0 {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} logits", 2 * n),
                actual: format!("{} logits", logits.len()),
            });
        }
        let mut background = Vec::with_capacity(n);
        let mut foreground = Vec::with_capacity(n);
        for p in 0..n {
            let (z0, z1) = (logits[p] as f64, logits[n + p] as f64);
            // sigmoid of the logit difference is the two-way softmax
            let fg = 1.0 / (1.0 + (z0 - z1).exp());
            foreground.push(fg);
            background.push(1.0 / (1.0 + (z1 - z0).exp()));
        }
        Ok(Self {
            height,
            width,
            background,
            foreground,
        })
    }

    /// Wraps two independent planes without enforcing the sum-to-one contract;
    /// used when differentiating with respect to each plane separately.
    pub fn from_planes(
        height: usize,
        width: usize,
        background: Vec<f64>,
        foreground: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        if background.len() != n || foreground.len() != n || n == 0 {
            return Err(FcamError::ShapeMismatch {
                expected: format!("2 x {n} values"),
                actual: format!("{} + {}", background.len(), foreground.len()),
            });
        }
        Ok(Self {
            height,
            width,
            background,
            foreground,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn foreground(&self) -> &[f64] {
        &self.foreground
    }

    /// Channel `0` is background, `1` foreground.
    pub fn channel(&self, c: usize) -> &[f64] {
        if c == 0 {
            &self.background
        } else {
            &self.foreground
        }
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        if c == 0 {
            &mut self.background
        } else {
            &mut self.foreground
        }
    }

    /// The foreground plane as a localization map.
    pub fn foreground_cam(&self) -> Cam {
        Cam {
            height: self.height,
            width: self.width,
            data: self
                .foreground
                .iter()
                .map(|&v| (v as f32).clamp(0.0, 1.0))
                .collect(),
            source: CamSource::FcamForeground,
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_ramp() {
        let cam = normalize_cam(1, 3, &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(cam.data(), &[0.0, 0.5, 1.0]);
        assert!(!cam.is_degenerate());
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let cam = normalize_cam(1, 3, &[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(cam.data(), &[0.0, 0.0, 0.0]);
        assert!(cam.is_degenerate());
    }

    #[test]
    fn normalize_identity_on_unit_map() {
        let cam = normalize_cam(1, 2, &[0.0, 1.0]).unwrap();
        assert_eq!(cam.data(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let err = normalize_cam(1, 2, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, FcamError::NonFinite { index: 1 }));
    }

    #[test]
    fn upscale_constant() {
        let cam = Cam::from_unit(1, 1, vec![0.7], CamSource::Raw).unwrap();
        let up = bilinear_upscale(&cam, 5, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upscale_ramp_half_pixel() {
        let cam = Cam::from_unit(2, 2, vec![0.0, 1.0, 0.0, 1.0], CamSource::Raw).unwrap();
        let up = bilinear_upscale(&cam, 2, 4).unwrap();
        // src x = (dst + 0.5) * 0.5 - 0.5, clamped: -0.25, 0.25, 0.75, 1.25
        let row = [0.0, 0.25, 0.75, 1.0];
        assert_eq!(&up.data()[..4], &row);
        assert_eq!(&up.data()[4..], &row);
        assert_eq!(up.source(), CamSource::Interpolated);
    }

    #[test]
    fn upscale_rejects_zero_and_shrink() {
        let cam = Cam::from_unit(2, 2, vec![0.0; 4], CamSource::Raw).unwrap();
        assert!(bilinear_upscale(&cam, 0, 4).is_err());
        assert!(bilinear_upscale(&cam, 1, 4).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = [3.0f32, -2.0, 0.0, 50.0, -1.0, 4.0, 0.0, -50.0];
        let s = SoftmaxMaps::from_logits(2, 2, &logits).unwrap();
        for p in 0..4 {
            assert!((s.background()[p] + s.foreground()[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn image_crop_and_flip() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 / 12.0).collect();
        let img = ImageTensor::new(2, 2, data).unwrap();
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.rgb(0, 0), img.rgb(0, 1));
        let c = img.crop(1, 0, 1, 2).unwrap();
        assert_eq!(c.rgb(0, 1), img.rgb(1, 1));
    }

    proptest! {
        #[test]
        fn normalize_idempotent(raw in prop::collection::vec(-100.0f64..100.0, 2..64)) {
            let n = raw.len();
            let cam = normalize_cam(1, n, &raw).unwrap();
            prop_assume!(!cam.is_degenerate());
            let again: Vec<f64> = cam.data().iter().map(|&v| v as f64).collect();
            let twice = normalize_cam(1, n, &again).unwrap();
            prop_assert_eq!(cam.data(), twice.data());
        }

        #[test]
        fn upscale_stays_in_bounds(
            h in 1usize..6, w in 1usize..6, fy in 1usize..5, fx in 1usize..5, seed in any::<u64>()
        ) {
            let mut state = seed;
            let data: Vec<f32> = (0..h * w)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 40) as f32 / (1u64 << 24) as f32
                })
                .collect();
            let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let cam = Cam::from_unit(h, w, data, CamSource::Raw).unwrap();
            let up = bilinear_upscale(&cam, h * fy, w * fx).unwrap();
            prop_assert!(up.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
