//! Wall-clock cost of building one localization map.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cam::{extract_cam_gap, extract_gradcam};
use crate::classifier::ClassifierBundle;
use crate::decoder::{fcam_inference, Decoder};
use crate::error::{FcamError, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: usize,
    pub image_size: (usize, usize),
    /// Encoder + head + decoder, one forward pass.
    pub fcam_median_ms: f64,
    /// Forward plus backward pass.
    pub gradcam_median_ms: f64,
    pub gap_cam_median_ms: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median milliseconds of `f` over `runs` calls after one warm-up call.
pub fn median_ms<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    if runs == 0 {
        return Err(FcamError::InvalidArgument("timing needs at least one run".into()));
    }
    std::hint::black_box(f()?);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut times))
}

/// Times the three map builders on the same image.
pub fn time_cam_builders(
    bundle: &ClassifierBundle,
    decoder: &Decoder,
    image: &ImageTensor,
    class: usize,
    runs: usize,
) -> Result<TimingReport> {
    let fcam = median_ms(runs, || fcam_inference(bundle, decoder, image))?;
    let gradcam = median_ms(runs, || extract_gradcam(bundle, image, class))?;
    let gap = median_ms(runs, || extract_cam_gap(bundle, image, class))?;
    Ok(TimingReport {
        runs,
        image_size: (image.height(), image.width()),
        fcam_median_ms: fcam,
        gradcam_median_ms: gradcam,
        gap_cam_median_ms: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn zero_runs_rejected() {
        assert!(median_ms(0, || Ok(())).is_err());
    }
}
