//! Full-resolution class activation maps (F-CAM).
//!
//! A frozen classifier provides a coarse CAM for the true class; sampled
//! foreground/background pixels from that CAM, a dense CRF term and an
//! absolute-size log-barrier train a U-Net style decoder whose foreground
//! map replaces the interpolated CAM at inference time. The crate also
//! ships the WSOL evaluation protocol used to score both.

pub mod cam;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod raster;
pub mod sampling;
pub mod tensor;
pub mod timing;
pub mod training;

pub use classifier::{ClassifierBundle, ClassifierSpec, EncoderSpec};
pub use config::RunConfig;
pub use decoder::{fcam_inference, Decoder, DecoderSpec};
pub use error::{FcamError, Result};
pub use evaluation::{BoundingBox, EvalReport, SweepCurve};
pub use losses::{LossConfig, Stage};
pub use training::TrainConfig;
pub use tensor::{bilinear_upscale, normalize_cam, Cam, CamSource, ImageTensor, SoftmaxMaps};
