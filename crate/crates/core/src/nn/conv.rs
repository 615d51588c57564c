use rand::Rng;

use super::layers::{GroupNorm, GroupNormCache};
use super::{gemm, he_normal, Feat, ParamTable};

/// Square convolution with zero padding `k / 2`, lowered to a GEMM via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    weight: usize,
    bias: Option<usize>,
}

impl Conv2d {
    pub fn new(
        table: &mut ParamTable,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        assert!(k % 2 == 1 && stride >= 1);
        let weight = table.add(format!("{name}.weight"), &[cout, cin, k, k]);
        let bias = bias.then(|| table.add(format!("{name}.bias"), &[cout]));
        Self {
            cin,
            cout,
            k,
            stride,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias.is_some() { self.cout } else { 0 }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f32], rng: &mut R) {
        let n = self.cout * self.patch();
        he_normal(&mut params[self.weight..self.weight + n], self.patch(), rng);
        if let Some(b) = self.bias {
            params[b..b + self.cout].fill(0.0);
        }
    }

    fn im2col(&self, x: &Feat, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.k;
        let pad = (k / 2) as isize;
        let p = oh * ow;
        let mut cols = vec![0.0f32; self.patch() * p];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if self.stride == 1 {
                            // valid output columns satisfy 0 <= ox + kx - pad < w
                            let shift = kx as isize - pad;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((x.w as isize - shift).min(ow as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + shift) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Feat {
        let k = self.k;
        let pad = (k / 2) as isize;
        let p = oh * ow;
        let mut dx = Feat::zeros(self.cin, h, w);
        let plane_len = h * w;
        for ci in 0..self.cin {
            let plane = &mut dx.data[ci * plane_len..(ci + 1) * plane_len];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn lower(&self, x: &Feat) -> (Vec<f32>, usize, usize) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let cols = if self.k == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        (cols, oh, ow)
    }

    fn apply(&self, params: &[f32], cols: &[f32], oh: usize, ow: usize) -> Feat {
        let p = oh * ow;
        let mut out = Feat::zeros(self.cout, oh, ow);
        let w = &params[self.weight..self.weight + self.cout * self.patch()];
        gemm(self.cout, self.patch(), p, w, false, cols, false, &mut out.data, false);
        if let Some(b) = self.bias {
            for (co, chunk) in out.data.chunks_mut(p).enumerate() {
                let bias = params[b + co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        out
    }

    /// Forward pass returning the lowered input for a later backward pass.
    pub fn forward_train(&self, params: &[f32], x: &Feat) -> (Feat, Vec<f32>) {
        let (cols, oh, ow) = self.lower(x);
        let out = self.apply(params, &cols, oh, ow);
        (out, cols)
    }

    pub fn forward(&self, params: &[f32], x: &Feat) -> Feat {
        let (cols, oh, ow) = self.lower(x);
        self.apply(params, &cols, oh, ow)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx` is set. `in_dims` is the input `(h, w)`.
    pub fn backward(
        &self,
        params: &[f32],
        cols: &[f32],
        in_dims: (usize, usize),
        dout: &Feat,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feat> {
        let p = dout.h * dout.w;
        let kk = self.patch();
        let wlen = self.cout * kk;
        gemm(
            self.cout,
            p,
            kk,
            &dout.data,
            false,
            cols,
            true,
            &mut grads[self.weight..self.weight + wlen],
            true,
        );
        if let Some(b) = self.bias {
            for (co, chunk) in dout.data.chunks(p).enumerate() {
                grads[b + co] += chunk.iter().sum::<f32>();
            }
        }
        if !need_dx {
            return None;
        }
        let w = &params[self.weight..self.weight + wlen];
        let mut dcols = vec![0.0f32; kk * p];
        gemm(kk, self.cout, p, w, true, &dout.data, false, &mut dcols, false);
        if self.k == 1 && self.stride == 1 {
            Some(Feat::from_vec(self.cin, in_dims.0, in_dims.1, dcols))
        } else {
            Some(self.col2im(&dcols, in_dims.0, in_dims.1, dout.h, dout.w))
        }
    }
}

/// `conv (no bias) → group norm → ReLU`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

/// Everything the backward pass of a [`ConvBlock`] needs.
#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    cols: Vec<f32>,
    in_dims: (usize, usize),
    norm: GroupNormCache,
    out: Feat,
}

impl ConvBlockCache {
    pub fn output(&self) -> &Feat {
        &self.out
    }
}

impl ConvBlock {
    pub fn new(
        table: &mut ParamTable,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(table, &format!("{name}.conv"), cin, cout, 3, stride, false);
        let norm = GroupNorm::new(table, &format!("{name}.norm"), cout);
        Self { conv, norm }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f32], rng: &mut R) {
        self.conv.init(params, rng);
        self.norm.init(params);
    }

    pub fn forward(&self, params: &[f32], x: &Feat) -> Feat {
        let mut y = self.conv.forward(params, x);
        self.norm.forward_inplace(params, &mut y);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward_train(&self, params: &[f32], x: &Feat) -> ConvBlockCache {
        let (mut y, cols) = self.conv.forward_train(params, x);
        let norm = self.norm.forward_train(params, &mut y);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        ConvBlockCache {
            cols,
            in_dims: (x.h, x.w),
            norm,
            out: y,
        }
    }

    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvBlockCache,
        mut dout: Feat,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feat> {
        for (d, o) in dout.data.iter_mut().zip(&cache.out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        self.norm.backward_inplace(params, &cache.norm, &mut dout, grads);
        self.conv
            .backward(params, &cache.cols, cache.in_dims, &dout, grads, need_dx)
    }
}
