//! Convolutions, group normalization, linear maps, pooling and FiLM-style
//! modulation. Every `backward` accumulates parameter gradients into `g`
//! and returns the input gradient.

use super::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::{gemm, gemm_nt, gemm_tn, Scalar};
use crate::tensor::LatentSet;

/// 3×3, zero-padded patches of a `c×h×w` plane stack as a `(c·9)×(h·w)`
/// matrix.
pub fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &xc[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`], accumulated into `dx`.
pub fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dxc = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut dxc[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T], hw: usize) {
    for (co, &bv) in b.iter().enumerate() {
        y[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
    }
}

fn accumulate_bias_grad<T: Scalar>(db: &mut [T], dy: &[T], hw: usize) {
    for (co, d) in db.iter_mut().enumerate() {
        *d += dy[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
    }
}

/// Per-view 2D convolution, kernel 1 or 3, stride 1, "same" zero padding.
/// Weight layout `[cout, cin, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(ksize == 1 || ksize == 3, "kernel size {ksize}");
        let fan_in = cin * ksize * ksize;
        let w = store.fan_in(format!("{name}.weight"), &[cout, cin, ksize, ksize], fan_in, rng);
        let b = store.zeros(format!("{name}.bias"), &[cout]);
        Conv2d {
            w,
            b,
            cin,
            cout,
            ksize,
        }
    }

    fn k2(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>) -> LatentSet<T> {
        assert_eq!(x.channels, self.cin, "conv2d input channels");
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut y = LatentSet::zeros(x.n_views, self.cout, h, w);
        let wt = p.get(self.w);
        let mut col = if self.ksize == 3 { vec![T::zero(); self.k2() * hw] } else { Vec::new() };
        for v in 0..x.n_views {
            let src = if self.ksize == 3 {
                im2col3(x.view(v), self.cin, h, w, &mut col);
                &col[..]
            } else {
                x.view(v)
            };
            let out = y.view_mut(v);
            gemm(self.cout, self.k2(), hw, T::one(), wt, src, T::zero(), out);
            add_bias(out, p.get(self.b), hw);
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &LatentSet<T>,
        dy: &LatentSet<T>,
    ) -> LatentSet<T> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let k2 = self.k2();
        let mut dx = x.zeros_like();
        let mut col = vec![T::zero(); if self.ksize == 3 { k2 * hw } else { 0 }];
        let mut dcol = vec![T::zero(); if self.ksize == 3 { k2 * hw } else { 0 }];
        for v in 0..x.n_views {
            let dyv = dy.view(v);
            accumulate_bias_grad(g.get_mut(self.b), dyv, hw);
            if self.ksize == 3 {
                im2col3(x.view(v), self.cin, h, w, &mut col);
                gemm_nt(self.cout, hw, k2, T::one(), dyv, &col, T::one(), g.get_mut(self.w));
                gemm_tn(k2, self.cout, hw, T::one(), p.get(self.w), dyv, T::zero(), &mut dcol);
                col2im3(&dcol, self.cin, h, w, dx.view_mut(v));
            } else {
                gemm_nt(self.cout, hw, k2, T::one(), dyv, x.view(v), T::one(), g.get_mut(self.w));
                gemm_tn(k2, self.cout, hw, T::one(), p.get(self.w), dyv, T::zero(), dx.view_mut(v));
            }
        }
        dx
    }
}

/// 3×3×3 convolution over (view, height, width) with zero padding on all
/// three axes. Weight layout `[cout, cin, 3 (view), 3, 3]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let w = store.fan_in(format!("{name}.weight"), &[cout, cin, 3, 3, 3], cin * 27, rng);
        let b = store.zeros(format!("{name}.bias"), &[cout]);
        Conv3d { w, b, cin, cout }
    }

    /// Copies a 3×3 2D kernel into the central view slice and fills the
    /// outer slices with `N(0, noise_std²)`.
    pub fn init_from_2d<T: Scalar>(&self, store: &mut ParamStore<T>, conv: &Conv2d, noise_std: f64, rng: &mut Rng) {
        use rand_distr::{Distribution, StandardNormal};
        assert!(conv.ksize == 3 && conv.cin == self.cin && conv.cout == self.cout);
        let w2 = store.get(conv.w).to_vec();
        let b2 = store.get(conv.b).to_vec();
        let w3 = store.get_mut(self.w);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for dv in 0..3 {
                    for k in 0..9 {
                        let dst = ((co * self.cin + ci) * 3 + dv) * 9 + k;
                        w3[dst] = if dv == 1 {
                            w2[(co * self.cin + ci) * 9 + k]
                        } else {
                            let z: f64 = StandardNormal.sample(rng);
                            T::from_f64_lossy(z * noise_std)
                        };
                    }
                }
            }
        }
        store.get_mut(self.b).copy_from_slice(&b2);
    }

    /// `[cout, cin·9]` slice for view offset `dv − 1`.
    fn slice<T: Scalar>(&self, w: &[T], dv: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.cout * self.cin * 9];
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let src = ((co * self.cin + ci) * 3 + dv) * 9;
                out[(co * self.cin + ci) * 9..][..9].copy_from_slice(&w[src..src + 9]);
            }
        }
        out
    }

    fn cols<T: Scalar>(&self, x: &LatentSet<T>) -> Vec<Vec<T>> {
        let k2 = self.cin * 9;
        (0..x.n_views)
            .map(|v| {
                let mut col = vec![T::zero(); k2 * x.plane()];
                im2col3(x.view(v), self.cin, x.height, x.width, &mut col);
                col
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>) -> LatentSet<T> {
        assert_eq!(x.channels, self.cin, "conv3d input channels");
        let hw = x.plane();
        let k2 = self.cin * 9;
        let n = x.n_views;
        let cols = self.cols(x);
        let slices: Vec<Vec<T>> = (0..3).map(|dv| self.slice(p.get(self.w), dv)).collect();
        let mut y = LatentSet::zeros(n, self.cout, x.height, x.width);
        for v in 0..n {
            let out = y.view_mut(v);
            for (dv, ws) in slices.iter().enumerate() {
                let Some(s) = (v + dv).checked_sub(1).filter(|s| *s < n) else {
                    continue;
                };
                gemm(self.cout, k2, hw, T::one(), ws, &cols[s], T::one(), out);
            }
            add_bias(out, p.get(self.b), hw);
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &LatentSet<T>,
        dy: &LatentSet<T>,
    ) -> LatentSet<T> {
        let hw = x.plane();
        let k2 = self.cin * 9;
        let n = x.n_views;
        let cols = self.cols(x);
        let slices: Vec<Vec<T>> = (0..3).map(|dv| self.slice(p.get(self.w), dv)).collect();
        let mut dslices = vec![vec![T::zero(); self.cout * k2]; 3];
        let mut dcols = vec![vec![T::zero(); k2 * hw]; n];
        for v in 0..n {
            let dyv = dy.view(v);
            accumulate_bias_grad(g.get_mut(self.b), dyv, hw);
            for dv in 0..3 {
                let Some(s) = (v + dv).checked_sub(1).filter(|s| *s < n) else {
                    continue;
                };
                gemm_nt(self.cout, hw, k2, T::one(), dyv, &cols[s], T::one(), &mut dslices[dv]);
                gemm_tn(k2, self.cout, hw, T::one(), &slices[dv], dyv, T::one(), &mut dcols[s]);
            }
        }
        let gw = g.get_mut(self.w);
        for (dv, ds) in dslices.iter().enumerate() {
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    let dst = ((co * self.cin + ci) * 3 + dv) * 9;
                    let src = &ds[(co * self.cin + ci) * 9..][..9];
                    gw[dst..dst + 9].iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                }
            }
        }
        let mut dx = x.zeros_like();
        for (v, dc) in dcols.iter().enumerate() {
            col2im3(dc, self.cin, x.height, x.width, dx.view_mut(v));
        }
        dx
    }
}

/// Per-view group normalization with affine `gamma`, `beta`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub xhat: LatentSet<T>,
    /// `1/σ` per (view, group).
    pub rstd: Vec<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        let gamma = store.filled(format!("{name}.gamma"), &[channels], T::one());
        let beta = store.zeros(format!("{name}.beta"), &[channels]);
        GroupNorm {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>) -> (LatentSet<T>, GroupNormCache<T>) {
        assert_eq!(x.channels, self.channels, "groupnorm channels");
        let hw = x.plane();
        let cg = self.channels / self.groups;
        let m = cg * hw;
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        let mut rstd = Vec::with_capacity(x.n_views * self.groups);
        for v in 0..x.n_views {
            let xv = x.view(v);
            for gi in 0..self.groups {
                let seg = &xv[gi * m..(gi + 1) * m];
                let mean = seg.iter().map(|a| a.to_f64_lossy()).sum::<f64>() / m as f64;
                let var = seg.iter().map(|a| (a.to_f64_lossy() - mean).powi(2)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + self.eps).sqrt();
                let (mean_t, r_t) = (T::from_f64_lossy(mean), T::from_f64_lossy(r));
                rstd.push(r_t);
                let off = v * x.view_len() + gi * m;
                for (i, &a) in seg.iter().enumerate() {
                    let c = gi * cg + i / hw;
                    let xh = (a - mean_t) * r_t;
                    xhat.data[off + i] = xh;
                    y.data[off + i] = xh * gamma[c] + beta[c];
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &LatentSet<T>,
    ) -> LatentSet<T> {
        let hw = dy.plane();
        let cg = self.channels / self.groups;
        let m = cg * hw;
        let gamma = p.get(self.gamma).to_vec();
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        let mut dx = dy.zeros_like();
        let mut dxhat = vec![T::zero(); m];
        let mt = T::from_usize(m).unwrap();
        for v in 0..dy.n_views {
            for gi in 0..self.groups {
                let off = v * dy.view_len() + gi * m;
                let dys = &dy.data[off..off + m];
                let xh = &cache.xhat.data[off..off + m];
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for i in 0..m {
                    let c = gi * cg + i / hw;
                    dgamma[c] += dys[i] * xh[i];
                    dbeta[c] += dys[i];
                    dxhat[i] = dys[i] * gamma[c];
                    s1 += dxhat[i];
                    s2 += dxhat[i] * xh[i];
                }
                let r = cache.rstd[v * self.groups + gi] / mt;
                for i in 0..m {
                    dx.data[off + i] = r * (mt * dxhat[i] - s1 - xh[i] * s2);
                }
            }
        }
        g.get_mut(self.gamma).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += *b);
        g.get_mut(self.beta).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += *b);
        dx
    }
}

/// Dense `y = W x + b` on a single vector. Weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.fan_in(format!("{name}.weight"), &[fan_out, fan_in], fan_in, rng);
        let b = store.zeros(format!("{name}.bias"), &[fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = p.get(self.w);
        p.get(self.b)
            .iter()
            .enumerate()
            .map(|(o, &b)| b + w[o * self.fan_in..(o + 1) * self.fan_in].iter().zip(x).map(|(a, c)| *a * *c).sum::<T>())
            .collect()
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T> {
        let w = p.get(self.w);
        let mut dx = vec![T::zero(); self.fan_in];
        {
            let gw = g.get_mut(self.w);
            for (o, &d) in dy.iter().enumerate() {
                for i in 0..self.fan_in {
                    gw[o * self.fan_in + i] += d * x[i];
                    dx[i] += d * w[o * self.fan_in + i];
                }
            }
        }
        g.get_mut(self.b).iter_mut().zip(dy).for_each(|(a, b)| *a += *b);
        dx
    }
}

pub fn silu_set<T: Scalar>(x: &LatentSet<T>) -> LatentSet<T> {
    let mut y = x.clone();
    y.data = super::silu_vec(&x.data);
    y
}

pub fn silu_set_backward<T: Scalar>(x: &LatentSet<T>, dy: &LatentSet<T>) -> LatentSet<T> {
    let mut dx = x.clone();
    dx.data = super::silu_backward(&x.data, &dy.data);
    dx
}

/// 2×2 mean pooling (even sizes).
pub fn avgpool2<T: Scalar>(x: &LatentSet<T>) -> LatentSet<T> {
    assert!(x.height.is_multiple_of(2) && x.width.is_multiple_of(2), "pooling needs even sizes");
    let (h2, w2) = (x.height / 2, x.width / 2);
    let mut y = LatentSet::zeros(x.n_views, x.channels, h2, w2);
    let q = T::from_f64_lossy(0.25);
    for plane in 0..x.n_views * x.channels {
        let src = &x.data[plane * x.plane()..];
        let dst = &mut y.data[plane * h2 * w2..];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * yy * x.width + 2 * xx;
                dst[yy * w2 + xx] = (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]) * q;
            }
        }
    }
    y
}

pub fn avgpool2_backward<T: Scalar>(dy: &LatentSet<T>) -> LatentSet<T> {
    let (h, w) = (dy.height * 2, dy.width * 2);
    let mut dx = LatentSet::zeros(dy.n_views, dy.channels, h, w);
    let q = T::from_f64_lossy(0.25);
    for plane in 0..dy.n_views * dy.channels {
        let src = &dy.data[plane * dy.plane()..];
        let dst = &mut dx.data[plane * h * w..];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * dy.width + xx / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &LatentSet<T>) -> LatentSet<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut y = LatentSet::zeros(x.n_views, x.channels, h, w);
    for plane in 0..x.n_views * x.channels {
        let src = &x.data[plane * x.plane()..];
        let dst = &mut y.data[plane * h * w..];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.width + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &LatentSet<T>) -> LatentSet<T> {
    let (h2, w2) = (dy.height / 2, dy.width / 2);
    let mut dx = LatentSet::zeros(dy.n_views, dy.channels, h2, w2);
    for plane in 0..dy.n_views * dy.channels {
        let src = &dy.data[plane * dy.plane()..];
        let dst = &mut dx.data[plane * h2 * w2..];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * yy * dy.width + 2 * xx;
                dst[yy * w2 + xx] = src[i] + src[i + 1] + src[i + dy.width] + src[i + dy.width + 1];
            }
        }
    }
    dx
}

/// `h·(1 + s_c) + t_c` with `ss = [s_0..s_C, t_0..t_C]`.
pub fn scale_shift<T: Scalar>(h: &LatentSet<T>, ss: &[T]) -> LatentSet<T> {
    let c = h.channels;
    let hw = h.plane();
    let mut y = h.clone();
    for v in 0..h.n_views {
        let yv = y.view_mut(v);
        for ch in 0..c {
            let (s, t) = (T::one() + ss[ch], ss[c + ch]);
            yv[ch * hw..(ch + 1) * hw].iter_mut().for_each(|a| *a = *a * s + t);
        }
    }
    y
}

/// Returns `(dh, dss)`.
pub fn scale_shift_backward<T: Scalar>(h: &LatentSet<T>, ss: &[T], dy: &LatentSet<T>) -> (LatentSet<T>, Vec<T>) {
    let c = h.channels;
    let hw = h.plane();
    let mut dh = dy.clone();
    let mut dss = vec![T::zero(); 2 * c];
    for v in 0..h.n_views {
        let (hv, dyv) = (h.view(v), dy.view(v));
        let dhv = dh.view_mut(v);
        for ch in 0..c {
            let s = T::one() + ss[ch];
            let r = ch * hw..(ch + 1) * hw;
            dss[ch] += hv[r.clone()].iter().zip(&dyv[r.clone()]).map(|(a, b)| *a * *b).sum::<T>();
            dss[c + ch] += dyv[r.clone()].iter().copied().sum::<T>();
            dhv[r].iter_mut().for_each(|a| *a *= s);
        }
    }
    (dh, dss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn naive_conv2d(x: &LatentSet<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> LatentSet<f64> {
        let (n, cin, h, wd) = (x.n_views, x.channels, x.height, x.width);
        let r = (k / 2) as isize;
        let mut y = LatentSet::zeros(n, cout, h, wd);
        for v in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - r;
                                    let sx = xx as isize + kx as isize - r;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        s += w[((co * cin + ci) * k + ky) * k + kx] * x.at(v, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        y.data[((v * cout + co) * h + yy) * wd + xx] = s;
                    }
                }
            }
        }
        y
    }

    fn naive_conv3d(x: &LatentSet<f64>, w: &[f64], b: &[f64], cout: usize) -> LatentSet<f64> {
        let (n, cin, h, wd) = (x.n_views, x.channels, x.height, x.width);
        let mut y = LatentSet::zeros(n, cout, h, wd);
        for v in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for dv in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let sv = v as isize + dv as isize - 1;
                                        let sy = yy as isize + ky as isize - 1;
                                        let sx = xx as isize + kx as isize - 1;
                                        if sv < 0 || sy < 0 || sx < 0 || sv as usize >= n || sy as usize >= h || sx as usize >= wd {
                                            continue;
                                        }
                                        s += w[(((co * cin + ci) * 3 + dv) * 3 + ky) * 3 + kx]
                                            * x.at(sv as usize, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        y.data[((v * cout + co) * h + yy) * wd + xx] = s;
                    }
                }
            }
        }
        y
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv2d_matches_loops() {
        let mut rng = rng_from_seed(3);
        for k in [1, 3] {
            let mut s = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut s, "c", 3, 4, k, &mut rng);
            s.get_mut(conv.b).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
            let x = LatentSet::randn(2, 3, 5, 6, &mut rng);
            let want = naive_conv2d(&x, s.get(conv.w), s.get(conv.b), 4, k);
            close(&conv.forward(&s, &x).data, &want.data, 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_loops() {
        let mut rng = rng_from_seed(4);
        let mut s = ParamStore::<f64>::new();
        let conv = Conv3d::new(&mut s, "c", 2, 3, &mut rng);
        s.get_mut(conv.b).copy_from_slice(&[0.1, -0.2, 0.3]);
        for n in [1, 2, 4] {
            let x = LatentSet::randn(n, 2, 4, 5, &mut rng);
            let want = naive_conv3d(&x, s.get(conv.w), s.get(conv.b), 3);
            close(&conv.forward(&s, &x).data, &want.data, 1e-12);
        }
    }

    #[test]
    fn conv3d_single_view_is_central_slice() {
        let mut rng = rng_from_seed(5);
        let mut s = ParamStore::<f64>::new();
        let c2 = Conv2d::new(&mut s, "a", 3, 2, 3, &mut rng);
        let c3 = Conv3d::new(&mut s, "b", 3, 2, &mut rng);
        // central slice into the 2D kernel
        let w3 = s.get(c3.w).to_vec();
        let w2 = s.get_mut(c2.w);
        for co in 0..2 {
            for ci in 0..3 {
                for k in 0..9 {
                    w2[(co * 3 + ci) * 9 + k] = w3[((co * 3 + ci) * 3 + 1) * 9 + k];
                }
            }
        }
        let x = LatentSet::randn(1, 3, 6, 7, &mut rng);
        close(&c3.forward(&s, &x).data, &c2.forward(&s, &x).data, 1e-6);
    }

    fn directional_check<F>(x: &LatentSet<f64>, f: F, dx_analytic: &LatentSet<f64>, dy: &LatentSet<f64>)
    where
        F: Fn(&LatentSet<f64>) -> LatentSet<f64>,
    {
        let mut rng = rng_from_seed(99);
        let dir = LatentSet::<f64>::randn(x.n_views, x.channels, x.height, x.width, &mut rng);
        let h = 1e-6;
        let mut xp = x.clone();
        xp.axpy(h, &dir);
        let mut xm = x.clone();
        xm.axpy(-h, &dir);
        let (yp, ym) = (f(&xp), f(&xm));
        let fd: f64 = yp.data.iter().zip(&ym.data).zip(&dy.data).map(|((a, b), g)| (a - b) / (2.0 * h) * g).sum();
        let an: f64 = dx_analytic.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "fd {fd} vs analytic {an}");
    }

    #[test]
    fn input_gradients_match_differences() {
        let mut rng = rng_from_seed(6);
        let mut s = ParamStore::<f64>::new();
        let c2 = Conv2d::new(&mut s, "a", 2, 3, 3, &mut rng);
        let c1 = Conv2d::new(&mut s, "b", 2, 3, 1, &mut rng);
        let c3 = Conv3d::new(&mut s, "c", 2, 3, &mut rng);
        let gn = GroupNorm::new(&mut s, "g", 4, 2);
        s.get_mut(gn.gamma).copy_from_slice(&[1.0, 0.5, -0.3, 2.0]);
        let mut g = s.zeros_like();
        let x = LatentSet::randn(3, 2, 4, 6, &mut rng);
        let dy = LatentSet::randn(3, 3, 4, 6, &mut rng);
        for conv in [&c2, &c1] {
            let dx = conv.backward(&s, &mut g, &x, &dy);
            directional_check(&x, |z| conv.forward(&s, z), &dx, &dy);
        }
        let dx = c3.backward(&s, &mut g, &x, &dy);
        directional_check(&x, |z| c3.forward(&s, z), &dx, &dy);

        let x4 = LatentSet::randn(2, 4, 4, 6, &mut rng);
        let dy4 = LatentSet::randn(2, 4, 4, 6, &mut rng);
        let (_, cache) = gn.forward(&s, &x4);
        let dx = gn.backward(&s, &mut g, &cache, &dy4);
        directional_check(&x4, |z| gn.forward(&s, z).0, &dx, &dy4);

        let dx = avgpool2_backward(&dy4);
        let small = LatentSet::randn(2, 4, 2, 3, &mut rng);
        let dxu = upsample2_backward(&dy4);
        directional_check(&small, upsample2, &dxu, &dy4);
        let dyp = LatentSet::randn(2, 4, 2, 3, &mut rng);
        let dxp = avgpool2_backward(&dyp);
        directional_check(&x4, avgpool2, &dxp, &dyp);
        assert_eq!(dx.shape(), [2, 4, 8, 12]);

        let ss: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
        let (dh, _) = scale_shift_backward(&x4, &ss, &dy4);
        directional_check(&x4, |z| scale_shift(z, &ss), &dh, &dy4);
        let dxs = silu_set_backward(&x4, &dy4);
        directional_check(&x4, silu_set, &dxs, &dy4);
    }

    #[test]
    fn groupnorm_output_is_standardized() {
        let mut rng = rng_from_seed(8);
        let mut s = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut s, "g", 8, 4);
        let x = LatentSet::randn(2, 8, 5, 5, &mut rng).scaled(3.0);
        let (y, _) = gn.forward(&s, &x);
        let m = 2 * 25;
        for seg in y.data.chunks(m) {
            let mean: f64 = seg.iter().sum::<f64>() / m as f64;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
    }
}
