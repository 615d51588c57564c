use rand::Rng;

use super::{he_normal, Feat, ParamTable};

const GN_EPS: f32 = 1e-5;
const GN_MAX_GROUPS: usize = 8;

/// Group normalization with per-channel affine; statistics never cross samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(table: &mut ParamTable, name: &str, channels: usize) -> Self {
        let mut groups = GN_MAX_GROUPS.min(channels);
        while !channels.is_multiple_of(groups) {
            groups -= 1;
        }
        let gamma = table.add(format!("{name}.gamma"), &[channels]);
        let beta = table.add(format!("{name}.beta"), &[channels]);
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init(&self, params: &mut [f32]) {
        params[self.gamma..self.gamma + self.channels].fill(1.0);
        params[self.beta..self.beta + self.channels].fill(0.0);
    }

    fn normalize(&self, params: &[f32], x: &mut Feat, mut cache: Option<&mut GroupNormCache>) {
        let per_group = self.channels / self.groups;
        let plane = x.plane_len();
        let span = per_group * plane;
        for g in 0..self.groups {
            let chunk = &mut x.data[g * span..(g + 1) * span];
            let n = chunk.len() as f64;
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = chunk
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv_std = (1.0 / (var + GN_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            for (ci, ch) in chunk.chunks_mut(plane).enumerate() {
                let c = g * per_group + ci;
                let (gam, bet) = (params[self.gamma + c], params[self.beta + c]);
                if let Some(cache) = cache.as_deref_mut() {
                    let base = c * plane;
                    for (i, v) in ch.iter_mut().enumerate() {
                        let xh = (*v - mean) * inv_std;
                        cache.xhat[base + i] = xh;
                        *v = gam * xh + bet;
                    }
                } else {
                    for v in ch.iter_mut() {
                        *v = gam * (*v - mean) * inv_std + bet;
                    }
                }
            }
            if let Some(cache) = cache.as_deref_mut() {
                cache.inv_std[g] = inv_std;
            }
        }
    }

    pub fn forward_inplace(&self, params: &[f32], x: &mut Feat) {
        assert_eq!(x.c, self.channels);
        self.normalize(params, x, None);
    }

    pub fn forward_train(&self, params: &[f32], x: &mut Feat) -> GroupNormCache {
        assert_eq!(x.c, self.channels);
        let mut cache = GroupNormCache {
            xhat: vec![0.0; x.data.len()],
            inv_std: vec![0.0; self.groups],
        };
        self.normalize(params, x, Some(&mut cache));
        cache
    }

    /// Turns the output gradient in `dy` into the input gradient, in place.
    pub fn backward_inplace(
        &self,
        params: &[f32],
        cache: &GroupNormCache,
        dy: &mut Feat,
        grads: &mut [f32],
    ) {
        let per_group = self.channels / self.groups;
        let plane = dy.plane_len();
        for c in 0..self.channels {
            let d = &dy.data[c * plane..(c + 1) * plane];
            let xh = &cache.xhat[c * plane..(c + 1) * plane];
            let (mut dg, mut db) = (0.0f64, 0.0f64);
            for (a, b) in d.iter().zip(xh) {
                dg += (a * b) as f64;
                db += *a as f64;
            }
            grads[self.gamma + c] += dg as f32;
            grads[self.beta + c] += db as f32;
        }
        for g in 0..self.groups {
            let span = per_group * plane;
            let n = span as f64;
            let range = g * span..(g + 1) * span;
            // dxhat = dy * gamma
            for ci in 0..per_group {
                let c = g * per_group + ci;
                let gam = params[self.gamma + c];
                dy.data[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v *= gam);
            }
            let dxh = &dy.data[range.clone()];
            let xh = &cache.xhat[range.clone()];
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for (a, b) in dxh.iter().zip(xh) {
                s1 += *a as f64;
                s2 += (a * b) as f64;
            }
            let (m1, m2) = ((s1 / n) as f32, (s2 / n) as f32);
            let inv_std = cache.inv_std[g];
            for (v, x) in dy.data[range].iter_mut().zip(xh) {
                *v = inv_std * (*v - m1 - x * m2);
            }
        }
    }
}

/// Dense layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(table: &mut ParamTable, name: &str, din: usize, dout: usize) -> Self {
        let weight = table.add(format!("{name}.weight"), &[dout, din]);
        let bias = table.add(format!("{name}.bias"), &[dout]);
        Self {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.dout * self.din + self.dout
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f32], rng: &mut R) {
        he_normal(
            &mut params[self.weight..self.weight + self.din * self.dout],
            self.din,
            rng,
        );
        params[self.bias..self.bias + self.dout].fill(0.0);
    }

    /// Row `class` of the weight matrix.
    pub fn weights_for<'a>(&self, params: &'a [f32], class: usize) -> &'a [f32] {
        let start = self.weight + class * self.din;
        &params[start..start + self.din]
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight..self.weight + self.din * self.dout
    }

    pub fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.din);
        (0..self.dout)
            .map(|o| {
                let row = self.weights_for(params, o);
                params[self.bias + o]
                    + row
                        .iter()
                        .zip(x)
                        .map(|(w, v)| (*w as f64) * (*v as f64))
                        .sum::<f64>() as f32
            })
            .collect()
    }

    pub fn backward(&self, params: &[f32], x: &[f32], dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.din];
        for (o, &d) in dy.iter().enumerate() {
            grads[self.bias + o] += d;
            let start = self.weight + o * self.din;
            for i in 0..self.din {
                grads[start + i] += d * x[i];
                dx[i] += d * params[start + i];
            }
        }
        dx
    }
}

pub fn global_avg_pool(x: &Feat) -> Vec<f32> {
    let n = x.plane_len() as f64;
    (0..x.c)
        .map(|c| (x.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
        .collect()
}

pub fn global_avg_pool_backward(d: &[f32], c: usize, h: usize, w: usize) -> Feat {
    let n = (h * w) as f32;
    let mut out = Feat::zeros(c, h, w);
    for (ch, plane) in out.data.chunks_mut(h * w).enumerate() {
        plane.fill(d[ch] / n);
    }
    out
}

/// Global max pooling; returns the pooled values and the arg-max index per channel.
pub fn global_max_pool(x: &Feat) -> (Vec<f32>, Vec<usize>) {
    (0..x.c)
        .map(|c| {
            let (i, v) = x
                .plane(c)
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            (v, i)
        })
        .unzip()
}

pub fn global_max_pool_backward(d: &[f32], argmax: &[usize], c: usize, h: usize, w: usize) -> Feat {
    let mut out = Feat::zeros(c, h, w);
    for ch in 0..c {
        out.data[ch * h * w + argmax[ch]] = d[ch];
    }
    out
}

pub fn upsample_nearest2x(x: &Feat) -> Feat {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward(d: &Feat) -> Feat {
    let (h, w) = (d.h / 2, d.w / 2);
    let mut out = Feat::zeros(d.c, h, w);
    for c in 0..d.c {
        let src = d.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..d.h {
            for x in 0..d.w {
                dst[(y / 2) * w + x / 2] += src[y * d.w + x];
            }
        }
    }
    out
}

pub fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat::from_vec(a.c + b.c, a.h, a.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut table = ParamTable::default();
        let gn = GroupNorm::new(&mut table, "gn", 4);
        let mut params = vec![0.0; table.len()];
        for v in params.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        let x = Feat::from_vec(4, 3, 3, (0..36).map(|_| rng.random_range(-2.0..2.0)).collect());
        let probe: Vec<f32> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f32], x: &Feat| -> f64 {
            let mut y = x.clone();
            gn.forward_inplace(p, &mut y);
            y.data.iter().zip(&probe).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut y = x.clone();
        let cache = gn.forward_train(&params, &mut y);
        let mut dy = Feat::from_vec(4, 3, 3, probe.clone());
        let mut grads = vec![0.0; table.len()];
        gn.backward_inplace(&params, &cache, &mut dy, &mut grads);
        let eps = 1e-3;
        for i in 0..36 {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (f(&params, &p) - f(&params, &m)) / (2.0 * eps as f64);
            assert!((fd - dy.data[i] as f64).abs() < 5e-3, "{i}: {fd} vs {}", dy.data[i]);
        }
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += eps;
            let mut m = params.clone();
            m[i] -= eps;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps as f64);
            assert!((fd - grads[i] as f64).abs() < 5e-3);
        }
    }

    #[test]
    fn upsample_round_trip_sums() {
        let x = Feat::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let up = upsample_nearest2x(&x);
        assert_eq!(up.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let back = upsample_nearest2x_backward(&up);
        assert_eq!(back.data, vec![4.0, 8.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Feat::from_vec(2, 1, 3, vec![0.0, 3.0, 1.0, -1.0, -2.0, -0.5]);
        let (v, idx) = global_max_pool(&x);
        assert_eq!(v, vec![3.0, -0.5]);
        let d = global_max_pool_backward(&[1.0, 2.0], &idx, 2, 1, 3);
        assert_eq!(d.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
    }
}
