//! Dense `[views, channels, height, width]` arrays.

use rand_distr::{Distribution, StandardNormal};

use crate::dataio::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet<T> {
    pub n_views: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentSet<T> {
    pub fn zeros(n_views: usize, channels: usize, height: usize, width: usize) -> Self {
        LatentSet {
            n_views,
            channels,
            height,
            width,
            data: vec![T::zero(); n_views * channels * height * width],
        }
    }

    pub fn from_vec(n_views: usize, channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n_views * channels * height * width, "latent buffer size");
        LatentSet {
            n_views,
            channels,
            height,
            width,
            data,
        }
    }

    pub fn randn(n_views: usize, channels: usize, height: usize, width: usize, rng: &mut Rng) -> Self {
        let data = (0..n_views * channels * height * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z)
            })
            .collect();
        Self::from_vec(n_views, channels, height, width, data)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_views, self.channels, self.height, self.width)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.n_views, self.channels, self.height, self.width]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per view.
    #[inline]
    pub fn view_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn view(&self, v: usize) -> &[T] {
        let n = self.view_len();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [T] {
        let n = self.view_len();
        &mut self.data[v * n..(v + 1) * n]
    }

    #[inline]
    pub fn at(&self, v: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((v * self.channels + c) * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += alpha * *b);
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Views picked (and possibly reordered) by index.
    pub fn select_views(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.view_len());
        for &v in order {
            data.extend_from_slice(self.view(v));
        }
        Self::from_vec(order.len(), self.channels, self.height, self.width, data)
    }

    /// Stacks along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!((a.n_views, a.height, a.width), (b.n_views, b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for v in 0..a.n_views {
            data.extend_from_slice(a.view(v));
            data.extend_from_slice(b.view(v));
        }
        Self::from_vec(a.n_views, a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let (h, w) = (self.height, self.width);
        let p = h * w;
        let mut a = Vec::with_capacity(self.n_views * first * p);
        let mut b = Vec::with_capacity(self.n_views * (self.channels - first) * p);
        for v in 0..self.n_views {
            let s = self.view(v);
            a.extend_from_slice(&s[..first * p]);
            b.extend_from_slice(&s[first * p..]);
        }
        (
            Self::from_vec(self.n_views, first, h, w, a),
            Self::from_vec(self.n_views, self.channels - first, h, w, b),
        )
    }

    pub fn cast<U: Scalar>(&self) -> LatentSet<U> {
        LatentSet::from_vec(
            self.n_views,
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        )
    }

    /// Stacks same-shape images as views.
    pub fn from_images(images: &[Image]) -> Self {
        let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            assert!(im.height == h && im.width == w && im.channels == c, "image shapes differ");
            for ch in 0..c {
                data.extend(im.data.iter().skip(ch).step_by(c).map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
        Self::from_vec(images.len(), c, h, w, data)
    }

    /// One image per view, values clipped to `[0, 1]`.
    pub fn to_images(&self) -> Vec<Image> {
        let p = self.plane();
        (0..self.n_views)
            .map(|v| {
                let s = self.view(v);
                Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
                    s[c * p + y * self.width + x].to_f64_lossy()
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn concat_split_round_trip() {
        let mut rng = rng_from_seed(1);
        let a = LatentSet::<f64>::randn(3, 2, 4, 5, &mut rng);
        let b = LatentSet::<f64>::randn(3, 3, 4, 5, &mut rng);
        let c = LatentSet::concat_channels(&a, &b);
        assert_eq!(c.at(1, 2, 3, 4), b.at(1, 0, 3, 4));
        let (a2, b2) = c.split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn image_round_trip() {
        let im = Image::from_fn(8, 9, 3, |y, x, c| ((y * 9 + x) * 3 + c) as f64 / 255.0);
        let l = LatentSet::<f32>::from_images(&[im.clone(), im.clone()]);
        assert_eq!(l.at(1, 2, 0, 1), im.get(0, 1, 2));
        assert_eq!(l.to_images()[1], im);
    }
}
