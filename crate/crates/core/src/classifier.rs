//! Toy strided-convolution encoder with a pooling head.
//!
//! The encoder has a full-resolution stem followed by stride-2 stages; every
//! stage output except the last is exposed as a skip feature for the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcamError, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward,
    param_hash, ConvBlock, ConvBlockCache, Feat, Linear, ParamTable,
};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub stem_width: usize,
    pub stem_convs: usize,
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            stem_width: 16,
            stem_convs: 2,
            stage_widths: vec![16, 32, 64, 128],
            convs_per_stage: 3,
        }
    }
}

impl EncoderSpec {
    pub fn downscale(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn top_width(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }

    /// Channel counts of the skip features, full resolution first.
    pub fn skip_widths(&self) -> Vec<usize> {
        let mut w = vec![self.stem_width];
        w.extend(&self.stage_widths[..self.stage_widths.len() - 1]);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stem_convs == 0 || self.convs_per_stage == 0 {
            return Err(FcamError::InvalidArgument(
                "encoder needs a stem and at least one stage".into(),
            ));
        }
        if self.stem_width == 0 || self.stage_widths.contains(&0) {
            return Err(FcamError::InvalidArgument("zero-width encoder layer".into()));
        }
        Ok(())
    }
}

/// Pooling applied to the top feature stack before the linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    GapLinear,
    MaxLinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub encoder: EncoderSpec,
    pub num_classes: usize,
    pub head: HeadKind,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            num_classes: 3,
            head: HeadKind::GapLinear,
        }
    }
}

/// Skip features (full resolution first) and the top feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures {
    pub skips: Vec<Feat>,
    pub top: Feat,
}

/// Saved activations of a training-mode encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    stem: Vec<ConvBlockCache>,
    stages: Vec<Vec<ConvBlockCache>>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub pooled: Vec<f32>,
    pub logits: Vec<f32>,
    argmax: Vec<usize>,
}

impl HeadOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Classifier `g`: encoder plus pooling head, with its parameters.
#[derive(Debug, Clone)]
pub struct ClassifierBundle {
    spec: ClassifierSpec,
    stem: Vec<ConvBlock>,
    stages: Vec<Vec<ConvBlock>>,
    head: Linear,
    table: ParamTable,
    params: Vec<f32>,
    inference_only: bool,
}

pub(crate) fn image_feat(img: &ImageTensor) -> Feat {
    Feat::from_vec(3, img.height(), img.width(), img.data().to_vec())
}

impl ClassifierBundle {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        if spec.num_classes < 2 {
            return Err(FcamError::InvalidArgument("need at least two classes".into()));
        }
        let enc = &spec.encoder;
        let mut table = ParamTable::default();
        let mut stem = Vec::new();
        let mut cin = 3;
        for i in 0..enc.stem_convs {
            stem.push(ConvBlock::new(&mut table, &format!("stem.{i}"), cin, enc.stem_width, 1));
            cin = enc.stem_width;
        }
        let mut stages = Vec::new();
        for (s, &width) in enc.stage_widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..enc.convs_per_stage {
                let stride = if i == 0 { 2 } else { 1 };
                blocks.push(ConvBlock::new(
                    &mut table,
                    &format!("stage{}.{i}", s + 1),
                    cin,
                    width,
                    stride,
                ));
                cin = width;
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut table, "head", cin, spec.num_classes);
        let mut params = vec![0.0; table.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in stem.iter().chain(stages.iter().flatten()) {
            b.init(&mut params, &mut rng);
        }
        head.init(&mut params, &mut rng);
        Ok(Self {
            spec,
            stem,
            stages,
            head,
            table,
            params,
            inference_only: false,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn table(&self) -> &ParamTable {
        &self.table
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.table.len() {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} parameters", self.table.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn is_inference_only(&self) -> bool {
        self.inference_only
    }

    /// Drops the ability to compute gradients (as an exported inference graph would).
    pub fn into_inference_only(mut self) -> Self {
        self.inference_only = true;
        self
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Classifier weights `w_{y,·}` of the linear layer.
    pub fn class_weights(&self, class: usize) -> Result<&[f32]> {
        self.check_class(class)?;
        Ok(self.head.weights_for(&self.params, class))
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.spec.num_classes {
            return Err(FcamError::InvalidArgument(format!(
                "class {class} outside 0..{}",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let d = self.spec.encoder.downscale();
        if !img.height().is_multiple_of(d) || !img.width().is_multiple_of(d) {
            return Err(FcamError::ShapeMismatch {
                expected: format!("image sides divisible by {d}"),
                actual: format!("{}x{}", img.height(), img.width()),
            });
        }
        Ok(())
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<EncoderFeatures> {
        self.check_image(img)?;
        let mut x = image_feat(img);
        for b in &self.stem {
            x = b.forward(&self.params, &x);
        }
        let mut skips = vec![x.clone()];
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(&self.params, &x);
            }
            if s + 1 < self.stages.len() {
                skips.push(x.clone());
            }
        }
        Ok(EncoderFeatures { skips, top: x })
    }

    pub fn encode_train(&self, img: &ImageTensor) -> Result<(EncoderFeatures, EncoderTrace)> {
        self.check_image(img)?;
        let mut x = image_feat(img);
        let mut stem = Vec::with_capacity(self.stem.len());
        for b in &self.stem {
            let c = b.forward_train(&self.params, &x);
            x = c.output().clone();
            stem.push(c);
        }
        let mut skips = vec![x.clone()];
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            let mut caches = Vec::with_capacity(blocks.len());
            for b in blocks {
                let c = b.forward_train(&self.params, &x);
                x = c.output().clone();
                caches.push(c);
            }
            stages.push(caches);
            if s + 1 < self.stages.len() {
                skips.push(x.clone());
            }
        }
        Ok((EncoderFeatures { skips, top: x }, EncoderTrace { stem, stages }))
    }

    pub fn head_forward(&self, top: &Feat) -> HeadOutput {
        let (pooled, argmax) = match self.spec.head {
            HeadKind::GapLinear => (global_avg_pool(top), Vec::new()),
            HeadKind::MaxLinear => global_max_pool(top),
        };
        let logits = self.head.forward(&self.params, &pooled);
        HeadOutput {
            pooled,
            logits,
            argmax,
        }
    }

    /// Backward through the head; returns the gradient w.r.t. the top features.
    pub fn head_backward(
        &self,
        out: &HeadOutput,
        top_dims: (usize, usize, usize),
        dlogits: &[f32],
        grads: &mut [f32],
    ) -> Feat {
        let dpooled = self.head.backward(&self.params, &out.pooled, dlogits, grads);
        let (c, h, w) = top_dims;
        match self.spec.head {
            HeadKind::GapLinear => global_avg_pool_backward(&dpooled, c, h, w),
            HeadKind::MaxLinear => global_max_pool_backward(&dpooled, &out.argmax, c, h, w),
        }
    }

    /// Backward through the encoder, accumulating parameter gradients.
    pub fn encoder_backward(&self, trace: &EncoderTrace, dtop: Feat, grads: &mut [f32]) {
        let mut d = dtop;
        for (s, blocks) in self.stages.iter().enumerate().rev() {
            for (i, b) in blocks.iter().enumerate().rev() {
                d = b
                    .backward(&self.params, &trace.stages[s][i], d, grads, true)
                    .expect("dx requested");
            }
        }
        for (i, b) in self.stem.iter().enumerate().rev() {
            let need_dx = i > 0;
            if let Some(dx) = b.backward(&self.params, &trace.stem[i], d.clone(), grads, need_dx) {
                d = dx;
            }
        }
    }

    pub fn forward_classify(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let feats = self.encode(img)?;
        Ok(self.head_forward(&feats.top).probabilities())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec(classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            encoder: EncoderSpec {
                stem_width: 4,
                stem_convs: 1,
                stage_widths: vec![4, 8],
                convs_per_stage: 1,
            },
            num_classes: classes,
            head: HeadKind::GapLinear,
        }
    }

    fn test_image(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w)
            .map(|i| ((i * 37 % 101) as f32) / 100.0)
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let bundle = ClassifierBundle::new(tiny_spec(5), 1).unwrap();
        let p = bundle.forward_classify(&test_image(8, 12)).unwrap();
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tied_logits_give_uniform() {
        let mut bundle = ClassifierBundle::new(tiny_spec(2), 1).unwrap();
        let w = bundle.head.weight_range();
        bundle.params_mut()[w].fill(0.0);
        let p = bundle.forward_classify(&test_image(8, 8)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn indivisible_image_rejected() {
        let bundle = ClassifierBundle::new(tiny_spec(2), 1).unwrap();
        assert!(matches!(
            bundle.forward_classify(&test_image(6, 8)),
            Err(FcamError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn skip_shapes_follow_stages() {
        let bundle = ClassifierBundle::new(tiny_spec(2), 1).unwrap();
        let f = bundle.encode(&test_image(16, 8)).unwrap();
        let dims: Vec<_> = f.skips.iter().map(|s| (s.c, s.h, s.w)).collect();
        assert_eq!(dims, vec![(4, 16, 8), (4, 8, 4)]);
        assert_eq!((f.top.c, f.top.h, f.top.w), (8, 4, 2));
    }

    #[test]
    fn train_and_eval_encoders_agree() {
        let bundle = ClassifierBundle::new(tiny_spec(3), 9).unwrap();
        let img = test_image(8, 8);
        let a = bundle.encode(&img).unwrap();
        let (b, _) = bundle.encode_train(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let mut bundle = ClassifierBundle::new(tiny_spec(3), 4).unwrap();
        let img = test_image(8, 8);
        let target = 1;
        let loss = |b: &ClassifierBundle| -> f64 {
            let p = b.forward_classify(&img).unwrap();
            -p[target].ln()
        };
        let (feats, trace) = bundle.encode_train(&img).unwrap();
        let out = bundle.head_forward(&feats.top);
        let probs = out.probabilities();
        let dlogits: Vec<f32> = probs
            .iter()
            .enumerate()
            .map(|(k, p)| (*p - if k == target { 1.0 } else { 0.0 }) as f32)
            .collect();
        let mut grads = vec![0.0; bundle.table().len()];
        let t = &feats.top;
        let dtop = bundle.head_backward(&out, (t.c, t.h, t.w), &dlogits, &mut grads);
        bundle.encoder_backward(&trace, dtop, &mut grads);
        let eps = 1e-2f32;
        let mut checked = 0;
        for i in (0..grads.len()).step_by(13) {
            let orig = bundle.params[i];
            bundle.params[i] = orig + eps;
            let lp = loss(&bundle);
            bundle.params[i] = orig - eps;
            let lm = loss(&bundle);
            bundle.params[i] = orig;
            let fd = (lp - lm) / (2.0 * eps as f64);
            assert!(
                (fd - grads[i] as f64).abs() < 3e-2 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs {}",
                grads[i]
            );
            checked += 1;
        }
        assert!(checked > 10);
    }
}
