//! Minimal CPU network building blocks with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `Vec<f32>`; layers only
//! store offsets into it. Gradients share the same layout, which makes
//! per-sample accumulation, SGD, hashing and checkpointing trivial.

mod conv;
mod layers;
mod optim;

pub use conv::{Conv2d, ConvBlock, ConvBlockCache};
pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, global_max_pool,
    global_max_pool_backward, upsample_nearest2x, upsample_nearest2x_backward, GroupNorm,
    Linear,
};
pub use optim::Sgd;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Channel-planar feature stack `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature buffer size");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names and offsets of every tensor in a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTable {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamTable {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let entry = ParamEntry {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        };
        self.len += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }
}

/// He-normal initialization for weights with the given fan-in.
pub(crate) fn he_normal<R: Rng + ?Sized>(dst: &mut [f32], fan_in: usize, rng: &mut R) {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in dst {
        *v = normal.sample(rng) as f32;
    }
}

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn param_hash(params: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Element-wise `acc += other`.
pub fn accumulate(acc: &mut [f32], other: &[f32]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// `C = A·B (+ C)` for row-major slices with explicit transposition flags.
///
/// `A` is `m × k` (or `k × m` stored when `a_t`), `B` is `k × n` (or `n × k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds checked above; strides describe the dense row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
