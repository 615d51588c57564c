//! U-Net style decoder `f` producing full-resolution two-channel softmax
//! maps from the encoder's top features and skips.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierBundle, EncoderFeatures, EncoderSpec};
use crate::error::{FcamError, Result};
use crate::nn::{
    concat_channels, param_hash, upsample_nearest2x, upsample_nearest2x_backward, Conv2d,
    ConvBlock, ConvBlockCache, Feat, ParamTable,
};
use crate::tensor::{Cam, ImageTensor, SoftmaxMaps};

/// Skip fusion strategy. Only channel concatenation is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    #[default]
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    /// Output width of each stage, coarsest first. One stage per encoder stage.
    pub stage_widths: Vec<usize>,
    pub skip_fusion: SkipFusion,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            stage_widths: vec![64, 32, 16, 8],
            skip_fusion: SkipFusion::Concat,
        }
    }
}

impl DecoderSpec {
    /// Closed-form parameter count when paired with `encoder`.
    pub fn param_count(&self, encoder: &EncoderSpec) -> usize {
        let skips = encoder.skip_widths();
        let mut cin = encoder.top_width();
        let mut total = 0;
        for (i, &w) in self.stage_widths.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            // two 3x3 convs without bias, each followed by a gain/shift norm
            total += (cin + skip) * w * 9 + 2 * w;
            total += w * w * 9 + 2 * w;
            cin = w;
        }
        total + cin * 2 + 2
    }
}

/// Trainable decoder state: layer layout plus a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Decoder {
    spec: DecoderSpec,
    seed: u64,
    stages: Vec<[ConvBlock; 2]>,
    head: Conv2d,
    table: ParamTable,
    params: Vec<f32>,
}

/// Intermediate values kept for [`Decoder::backward`].
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    stages: Vec<[ConvBlockCache; 2]>,
    head_cols: Vec<f32>,
    last: (usize, usize, usize),
    skip_channels: Vec<usize>,
}

impl Decoder {
    /// He fan-in initialization under `seed`.
    pub fn new(spec: DecoderSpec, encoder: &EncoderSpec, seed: u64) -> Result<Self> {
        if spec.stage_widths.len() != encoder.stage_widths.len() {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} decoder stages", encoder.stage_widths.len()),
                actual: format!("{} decoder stages", spec.stage_widths.len()),
            });
        }
        if spec.stage_widths.contains(&0) {
            return Err(FcamError::InvalidArgument("zero-width decoder stage".into()));
        }
        let skips = encoder.skip_widths();
        let mut table = ParamTable::default();
        let mut stages = Vec::new();
        let mut cin = encoder.top_width();
        for (i, &w) in spec.stage_widths.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            let a = ConvBlock::new(&mut table, &format!("dec{i}.0"), cin + skip, w, 1);
            let b = ConvBlock::new(&mut table, &format!("dec{i}.1"), w, w, 1);
            stages.push([a, b]);
            cin = w;
        }
        let head = Conv2d::new(&mut table, "dec.head", cin, 2, 1, 1, true);
        let mut params = vec![0.0; table.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in stages.iter().flatten() {
            b.init(&mut params, &mut rng);
        }
        head.init(&mut params, &mut rng);
        Ok(Self {
            spec,
            seed,
            stages,
            head,
            table,
            params,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.table.len() {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{} parameters", self.table.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(FcamError::NonFinite { index: i });
        }
        self.params = params;
        Ok(())
    }

    fn check_features(&self, feats: &EncoderFeatures) -> Result<()> {
        let n = self.stages.len();
        if feats.skips.len() != n {
            return Err(FcamError::ShapeMismatch {
                expected: format!("{n} skip features"),
                actual: format!("{} skip features", feats.skips.len()),
            });
        }
        let (mut h, mut w) = (feats.top.h, feats.top.w);
        for i in 0..n {
            let skip = &feats.skips[n - 1 - i];
            h *= 2;
            w *= 2;
            let expect_c = self.stages[i][0].conv.cin - if i == 0 {
                feats.top.c
            } else {
                self.stages[i - 1][1].conv.cout
            };
            if (skip.h, skip.w, skip.c) != (h, w, expect_c) {
                return Err(FcamError::ShapeMismatch {
                    expected: format!("skip {i}: {expect_c}x{h}x{w}"),
                    actual: format!("{}x{}x{}", skip.c, skip.h, skip.w),
                });
            }
        }
        Ok(())
    }

    /// Two-channel logits `[background | foreground]` at skip-0 resolution.
    pub fn logits(&self, feats: &EncoderFeatures) -> Result<Feat> {
        self.check_features(feats)?;
        let n = self.stages.len();
        let mut x = feats.top.clone();
        for (i, [a, b]) in self.stages.iter().enumerate() {
            let up = upsample_nearest2x(&x);
            let cat = concat_channels(&up, &feats.skips[n - 1 - i]);
            x = b.forward(&self.params, &a.forward(&self.params, &cat));
        }
        Ok(self.head.forward(&self.params, &x))
    }

    pub fn decode(&self, feats: &EncoderFeatures) -> Result<SoftmaxMaps> {
        let z = self.logits(feats)?;
        SoftmaxMaps::from_logits(z.h, z.w, &z.data)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn decode_train(&self, feats: &EncoderFeatures) -> Result<(SoftmaxMaps, DecoderTrace)> {
        self.check_features(feats)?;
        let n = self.stages.len();
        let mut x = feats.top.clone();
        let mut caches = Vec::with_capacity(n);
        let mut skip_channels = Vec::with_capacity(n);
        for (i, [a, b]) in self.stages.iter().enumerate() {
            let skip = &feats.skips[n - 1 - i];
            skip_channels.push(skip.c);
            let cat = concat_channels(&upsample_nearest2x(&x), skip);
            let ca = a.forward_train(&self.params, &cat);
            let cb = b.forward_train(&self.params, ca.output());
            x = cb.output().clone();
            caches.push([ca, cb]);
        }
        let (z, head_cols) = self.head.forward_train(&self.params, &x);
        let maps = SoftmaxMaps::from_logits(z.h, z.w, &z.data)?;
        Ok((
            maps,
            DecoderTrace {
                stages: caches,
                head_cols,
                last: (x.c, x.h, x.w),
                skip_channels,
            },
        ))
    }

    /// Accumulates decoder parameter gradients from logit gradients laid out
    /// `[background | foreground]`. Nothing flows back into the encoder.
    pub fn backward(&self, trace: &DecoderTrace, dlogits: Vec<f32>, grads: &mut [f32]) {
        let (c, h, w) = trace.last;
        let dz = Feat::from_vec(2, h, w, dlogits);
        let mut d = self
            .head
            .backward(&self.params, &trace.head_cols, (h, w), &dz, grads, true)
            .expect("dx requested");
        debug_assert_eq!(d.c, c);
        for (i, [a, b]) in self.stages.iter().enumerate().rev() {
            let [ca, cb] = &trace.stages[i];
            d = b
                .backward(&self.params, cb, d, grads, true)
                .expect("dx requested");
            let Some(dcat) = a.backward(&self.params, ca, d.clone(), grads, i > 0) else {
                break;
            };
            let up_c = dcat.c - trace.skip_channels[i];
            let plane = dcat.h * dcat.w;
            let dup = Feat::from_vec(up_c, dcat.h, dcat.w, dcat.data[..up_c * plane].to_vec());
            d = upsample_nearest2x_backward(&dup);
        }
    }
}

/// Fused inference: one encoder pass feeds both the pooling head and the
/// decoder. Returns class probabilities and the foreground map.
pub fn fcam_inference(
    bundle: &ClassifierBundle,
    decoder: &Decoder,
    image: &ImageTensor,
) -> Result<(Vec<f64>, Cam)> {
    let feats = bundle.encode(image)?;
    let probs = bundle.head_forward(&feats.top).probabilities();
    let maps = decoder.decode(&feats)?;
    Ok((probs, maps.foreground_cam()))
}
