//! Low-resolution class activation maps from a classifier, and the
//! center-Gaussian baseline.
//!
//! Any function `(bundle, image, class) -> Cam` can act as the CAM source
//! guiding the decoder; implement [`CamExtractor`] to plug in a new one.

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierBundle, EncoderFeatures, HeadKind};
use crate::error::{FcamError, Result};
use crate::nn::Feat;
use crate::tensor::{bilinear_upscale, normalize_cam, Cam, ImageTensor};

pub trait CamExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Normalized CAM at the resolution the method naturally produces.
    fn extract(&self, bundle: &ClassifierBundle, image: &ImageTensor, class: usize) -> Result<Cam>;

    /// CAM interpolated to the image resolution.
    fn extract_full(
        &self,
        bundle: &ClassifierBundle,
        image: &ImageTensor,
        class: usize,
    ) -> Result<Cam> {
        let cam = self.extract(bundle, image, class)?;
        if (cam.height(), cam.width()) == (image.height(), image.width()) {
            return Ok(cam);
        }
        bilinear_upscale(&cam, image.height(), image.width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMethod {
    GapCam,
    GradCam,
    CenterBaseline,
}

impl std::str::FromStr for CamMethod {
    type Err = FcamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap_cam" | "cam" => Ok(CamMethod::GapCam),
            "grad_cam" | "gradcam" => Ok(CamMethod::GradCam),
            "center_baseline" | "center" => Ok(CamMethod::CenterBaseline),
            other => Err(FcamError::InvalidArgument(format!("unknown CAM method `{other}`"))),
        }
    }
}

impl CamExtractor for CamMethod {
    fn name(&self) -> &'static str {
        match self {
            CamMethod::GapCam => "gap_cam",
            CamMethod::GradCam => "grad_cam",
            CamMethod::CenterBaseline => "center_baseline",
        }
    }

    fn extract(&self, bundle: &ClassifierBundle, image: &ImageTensor, class: usize) -> Result<Cam> {
        match self {
            CamMethod::GapCam => extract_cam_gap(bundle, image, class),
            CamMethod::GradCam => extract_gradcam(bundle, image, class),
            CamMethod::CenterBaseline => center_gaussian_baseline(image.height(), image.width()),
        }
    }
}

/// `Σ_d w_{y,d} A_d` over the top feature maps, before normalization.
pub fn gap_cam_raw(bundle: &ClassifierBundle, top: &Feat, class: usize) -> Result<Vec<f64>> {
    if bundle.spec().head != HeadKind::GapLinear {
        return Err(FcamError::UnsupportedMethod(
            "GAP-CAM requires a global-average-pooling linear head".into(),
        ));
    }
    let weights = bundle.class_weights(class)?;
    Ok(weighted_sum(top, weights.iter().map(|&w| w as f64)))
}

fn weighted_sum(top: &Feat, weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = vec![0.0f64; top.plane_len()];
    for (d, w) in weights.enumerate() {
        for (a, &v) in acc.iter_mut().zip(top.plane(d)) {
            *a += w * v as f64;
        }
    }
    acc
}

/// GAP-CAM from features that were already computed.
pub fn gap_cam_from_features(
    bundle: &ClassifierBundle,
    feats: &EncoderFeatures,
    class: usize,
) -> Result<Cam> {
    let raw = gap_cam_raw(bundle, &feats.top, class)?;
    normalize_cam(feats.top.h, feats.top.w, &raw)
}

pub fn extract_cam_gap(bundle: &ClassifierBundle, image: &ImageTensor, class: usize) -> Result<Cam> {
    bundle.check_class(class)?;
    let feats = bundle.encode(image)?;
    gap_cam_from_features(bundle, &feats, class)
}

/// GradCAM combination `Σ_d α_d A_d` before the ReLU, with
/// `α_d` the spatial mean of `∂ score_y / ∂ A_d`.
///
/// The score is back-propagated through the whole network, as a generic
/// autograd engine would, and the top-feature gradient is read on the way.
pub fn gradcam_raw(
    bundle: &ClassifierBundle,
    image: &ImageTensor,
    class: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    if bundle.is_inference_only() {
        return Err(FcamError::GradientUnavailable);
    }
    bundle.check_class(class)?;
    let (feats, trace) = bundle.encode_train(image)?;
    let top = &feats.top;
    let out = bundle.head_forward(top);
    let mut dlogits = vec![0.0f32; bundle.num_classes()];
    dlogits[class] = 1.0;
    let mut grads = vec![0.0f32; bundle.table().len()];
    let dtop = bundle.head_backward(&out, (top.c, top.h, top.w), &dlogits, &mut grads);
    let alphas: Vec<f64> = (0..top.c)
        .map(|d| dtop.plane(d).iter().map(|&g| g as f64).sum::<f64>() / top.plane_len() as f64)
        .collect();
    bundle.encoder_backward(&trace, dtop, &mut grads);
    Ok((weighted_sum(top, alphas.into_iter()), top.h, top.w))
}

pub fn extract_gradcam(bundle: &ClassifierBundle, image: &ImageTensor, class: usize) -> Result<Cam> {
    let (raw, h, w) = gradcam_raw(bundle, image, class)?;
    let relu: Vec<f64> = raw.into_iter().map(|v| v.max(0.0)).collect();
    normalize_cam(h, w, &relu)
}

/// Standard deviation of the center baseline, in pixels.
pub fn center_sigma(h: usize, w: usize) -> f64 {
    h.min(w) as f64 / 4.0
}

pub fn center_gaussian_baseline(h: usize, w: usize) -> Result<Cam> {
    if h == 0 || w == 0 {
        return Err(FcamError::Empty("baseline needs at least one pixel"));
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let two_var = 2.0 * center_sigma(h, w).powi(2);
    let raw: Vec<f64> = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (-d2 / two_var).exp()
            })
        })
        .collect();
    normalize_cam(h, w, &raw)
}
