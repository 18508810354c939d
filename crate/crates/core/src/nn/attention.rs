//! Joint multi-head self-attention over every spatial position of every
//! view: `N·h·w` tokens attend to each other.

use super::layers::{Conv2d, GroupNorm, GroupNormCache};
use super::ParamStore;
use crate::rng::Rng;
use crate::scalar::{gemm, gemm_nt, gemm_tn, Scalar};
use crate::tensor::LatentSet;

#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    norm: GroupNormCache<T>,
    xn: LatentSet<T>,
    qkv: LatentSet<T>,
    /// Row-softmax matrices `[L, L]`, one per head.
    probs: Vec<Vec<T>>,
    mixed: LatentSet<T>,
}

/// Channels `[c0, c0+d)` of every view as a `[d, N·h·w]` matrix.
fn gather<T: Scalar>(x: &LatentSet<T>, c0: usize, d: usize) -> Vec<T> {
    let p = x.plane();
    let l = x.n_views * p;
    let mut out = vec![T::zero(); d * l];
    for j in 0..d {
        for v in 0..x.n_views {
            let src = &x.view(v)[(c0 + j) * p..(c0 + j + 1) * p];
            out[j * l + v * p..j * l + (v + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn scatter<T: Scalar>(m: &[T], x: &mut LatentSet<T>, c0: usize, d: usize) {
    let p = x.plane();
    let l = x.n_views * p;
    for j in 0..d {
        for v in 0..x.n_views {
            let dst = &mut x.view_mut(v)[(c0 + j) * p..(c0 + j + 1) * p];
            dst.copy_from_slice(&m[j * l + v * p..j * l + (v + 1) * p]);
        }
    }
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(heads >= 1 && channels.is_multiple_of(heads), "{channels} channels over {heads} heads");
        Attention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * channels, 1, rng),
            out: Conv2d::new(store, &format!("{name}.proj"), channels, channels, 1, rng),
            channels,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &LatentSet<T>) -> (LatentSet<T>, AttentionCache<T>) {
        let (xn, norm) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &xn);
        let d = self.head_dim();
        let l = x.n_views * x.plane();
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let mut mixed = x.zeros_like();
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qt = gather(&qkv, h * d, d);
            let kt = gather(&qkv, self.channels + h * d, d);
            let vt = gather(&qkv, 2 * self.channels + h * d, d);
            let mut s = vec![T::zero(); l * l];
            gemm_tn(l, d, l, scale, &qt, &kt, T::zero(), &mut s);
            for row in s.chunks_mut(l) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                let inv = T::one() / z;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            let mut ot = vec![T::zero(); d * l];
            gemm_nt(d, l, l, T::one(), &vt, &s, T::zero(), &mut ot);
            scatter(&ot, &mut mixed, h * d, d);
            probs.push(s);
        }
        let mut y = self.out.forward(p, &mixed);
        y.add_assign(x);
        (
            y,
            AttentionCache {
                norm,
                xn,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        cache: &AttentionCache<T>,
        dy: &LatentSet<T>,
    ) -> LatentSet<T> {
        let d = self.head_dim();
        let l = dy.n_views * dy.plane();
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let dmixed = self.out.backward(p, g, &cache.mixed, dy);
        let mut dqkv = cache.qkv.zeros_like();
        for h in 0..self.heads {
            let qt = gather(&cache.qkv, h * d, d);
            let kt = gather(&cache.qkv, self.channels + h * d, d);
            let vt = gather(&cache.qkv, 2 * self.channels + h * d, d);
            let dot = gather(&dmixed, h * d, d);
            let pr = &cache.probs[h];
            let mut ds = vec![T::zero(); l * l];
            gemm_tn(l, d, l, T::one(), &dot, &vt, T::zero(), &mut ds);
            let mut dvt = vec![T::zero(); d * l];
            gemm(d, l, l, T::one(), &dot, pr, T::zero(), &mut dvt);
            for (drow, prow) in ds.chunks_mut(l).zip(pr.chunks(l)) {
                let dotp: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                drow.iter_mut().zip(prow).for_each(|(a, b)| *a = *b * (*a - dotp));
            }
            let mut dqt = vec![T::zero(); d * l];
            gemm_nt(d, l, l, scale, &kt, &ds, T::zero(), &mut dqt);
            let mut dkt = vec![T::zero(); d * l];
            gemm(d, l, l, scale, &qt, &ds, T::zero(), &mut dkt);
            scatter(&dqt, &mut dqkv, h * d, d);
            scatter(&dkt, &mut dqkv, self.channels + h * d, d);
            scatter(&dvt, &mut dqkv, 2 * self.channels + h * d, d);
        }
        let dxn = self.qkv.backward(p, g, &cache.xn, &dqkv);
        let mut dx = self.norm.backward(p, g, &cache.norm, &dxn);
        dx.add_assign(dy);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn input_gradient_matches_differences() {
        let mut rng = rng_from_seed(2);
        let mut s = ParamStore::<f64>::new();
        let att = Attention::new(&mut s, "a", 4, 2, 2, &mut rng);
        let x = LatentSet::randn(2, 4, 2, 3, &mut rng);
        let dy = LatentSet::randn(2, 4, 2, 3, &mut rng);
        let mut g = s.zeros_like();
        let (_, cache) = att.forward(&s, &x);
        let dx = att.backward(&s, &mut g, &cache, &dy);
        let dir = LatentSet::randn(2, 4, 2, 3, &mut rng);
        let h = 1e-6;
        let mut xp = x.clone();
        xp.axpy(h, &dir);
        let mut xm = x.clone();
        xm.axpy(-h, &dir);
        let (yp, ym) = (att.forward(&s, &xp).0, att.forward(&s, &xm).0);
        let fd: f64 = yp.data.iter().zip(&ym.data).zip(&dy.data).map(|((a, b), g)| (a - b) / (2.0 * h) * g).sum();
        let an: f64 = dx.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
    }

    #[test]
    fn view_permutation_equivariance() {
        let mut rng = rng_from_seed(3);
        let mut s = ParamStore::<f64>::new();
        let att = Attention::new(&mut s, "a", 8, 2, 4, &mut rng);
        let x = LatentSet::randn(3, 8, 2, 2, &mut rng);
        let (y, _) = att.forward(&s, &x);
        let perm = [2, 0, 1];
        let (yp, _) = att.forward(&s, &x.select_views(&perm));
        let want = y.select_views(&perm);
        for (a, b) in yp.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
