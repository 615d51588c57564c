//! Criterion benchmarks live under `benches/`; this crate holds their shared fixtures.

use fcam_core::{Cam, CamSource, ImageTensor, SoftmaxMaps};

/// Smooth deterministic color image with a bright disc near the center.
pub fn image(side: usize) -> ImageTensor {
    let c = side as f32 / 2.0;
    let mut data = vec![0.0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f32 - c, x as f32 - c);
            let inside = dy * dy + dx * dx < (side as f32 / 4.0).powi(2);
            let p = y * side + x;
            data[p] = if inside { 0.9 } else { 0.2 + 0.1 * (x as f32 / side as f32) };
            data[side * side + p] = if inside { 0.3 } else { 0.5 };
            data[2 * side * side + p] = 0.25 + 0.5 * (y as f32 / side as f32);
        }
    }
    ImageTensor::new(side, side, data).expect("valid image")
}

/// Radial map peaking at the center, scaled to `[0, 1]`.
pub fn cam(side: usize, phase: f32) -> Cam {
    let c = side as f32 / 2.0;
    let data = (0..side * side)
        .map(|p| {
            let (dy, dx) = ((p / side) as f32 - c, (p % side) as f32 - c);
            let r = (dy * dy + dx * dx).sqrt() / side as f32;
            (0.5 + 0.5 * (6.0 * r + phase).cos()) * (1.0 - r).max(0.0)
        })
        .collect();
    Cam::from_unit(side, side, data, CamSource::Raw).expect("values in [0, 1]")
}

pub fn maps(side: usize) -> SoftmaxMaps {
    let fg = cam(side, 0.0).data().iter().map(|&v| 0.05 + 0.9 * v as f64).collect();
    SoftmaxMaps::from_foreground(side, side, fg).expect("valid maps")
}
