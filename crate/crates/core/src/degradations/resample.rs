//! Separable Catmull-Rom (a = −0.5) resampling with half-pixel centers and
//! edge-replicated borders.

use crate::dataio::Image;

const A: f64 = -0.5;

#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for each output sample along one axis.
fn taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let t = x - base;
            let mut out = [(0usize, 0.0f64); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, (n_in - 1) as f64) as usize;
                *slot = (idx, cubic_weight(t - offset));
            }
            out
        })
        .collect()
}

/// Unclipped bicubic resize over planar f64 channels.
pub fn resize_planes(planes: &[Vec<f64>], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<Vec<f64>> {
    let tx = taps(w, new_w);
    let ty = taps(h, new_h);
    planes
        .iter()
        .map(|plane| {
            let mut rows = vec![0.0; h * new_w];
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                for (x, tap) in tx.iter().enumerate() {
                    rows[y * new_w + x] = tap.iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
            let mut out = vec![0.0; new_h * new_w];
            for (y, tap) in ty.iter().enumerate() {
                for x in 0..new_w {
                    out[y * new_w + x] = tap.iter().map(|&(i, wt)| rows[i * new_w + x] * wt).sum();
                }
            }
            out
        })
        .collect()
}

pub fn to_planes(image: &Image) -> Vec<Vec<f64>> {
    (0..image.channels)
        .map(|c| image.data.iter().skip(c).step_by(image.channels).map(|&v| v as f64).collect())
        .collect()
}

/// Interleaves planes back into an image, clipping to `[0, 1]`.
pub fn from_planes(planes: &[Vec<f64>], h: usize, w: usize) -> Image {
    let channels = planes.len();
    Image::from_fn(h, w, channels, |y, x, c| planes[c][y * w + x])
}

pub fn resize_bicubic(image: &Image, new_h: usize, new_w: usize) -> Image {
    let planes = resize_planes(&to_planes(image), image.height, image.width, new_h, new_w);
    from_planes(&planes, new_h, new_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for t in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2).map(|k| cubic_weight(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn same_size_is_identity() {
        let im = Image::from_fn(9, 11, 1, |y, x, _| ((y * 3 + x * 5) % 7) as f64 / 7.0);
        let out = resize_bicubic(&im, 9, 11);
        for (a, b) in im.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
