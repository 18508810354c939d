//! Random motion-blur kernels from a curved camera-shake trajectory.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{BlurParams, DegradeError};
use crate::rng::Rng;

/// Odd-sized, non-negative, unit-sum convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    /// Row-major `size×size`.
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn delta(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        BlurKernel { size, weights }
    }

    pub fn uniform(size: usize) -> Self {
        BlurKernel {
            size,
            weights: vec![1.0 / (size * size) as f64; size * size],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Rounds `raw` to the nearest odd integer and clamps it to
/// `[3, 2·size_mean − 1]`.
pub fn kernel_size_from_draw(raw: f64, size_mean: f64) -> usize {
    let upper = {
        let u = (2.0 * size_mean - 1.0).floor().max(3.0) as i64;
        if u % 2 == 0 {
            u - 1
        } else {
            u
        }
    };
    let odd = 2 * ((raw - 1.0) / 2.0).round() as i64 + 1;
    odd.clamp(3, upper) as usize
}

pub fn sample_kernel_size(params: &BlurParams, rng: &mut Rng) -> usize {
    let raw = if params.size_std > 0.0 {
        Normal::new(params.size_mean, params.size_std)
            .expect("validated std")
            .sample(rng)
    } else {
        params.size_mean
    };
    kernel_size_from_draw(raw, params.size_mean)
}

/// Splats trajectory points (kernel-centered pixel offsets) bilinearly onto a
/// `size×size` grid and normalizes to unit sum.
pub fn rasterize_trajectory(points: &[(f64, f64)], size: usize) -> BlurKernel {
    let mut weights = vec![0.0; size * size];
    let c = (size as f64 - 1.0) / 2.0;
    for &(px, py) in points {
        let (x, y) = (px + c, py + c);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                    weights[yi as usize * size + xi as usize] += wx * wy;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        return BlurKernel::delta(size);
    }
    BlurKernel { size, weights }
}

/// Camera-shake path of `⌈3·size⌉` unit steps whose heading random-walks
/// with per-step std `intensity·π/2`, centered at its centroid and scaled so
/// every point lies within `(size−2)/2` px of the kernel center.
pub fn motion_trajectory(size: usize, intensity: f64, rng: &mut Rng) -> Vec<(f64, f64)> {
    let steps = 3 * size;
    let mut heading = rng.random_range(0.0..TAU);
    let wiggle = intensity * FRAC_PI_2;
    let mut pts = Vec::with_capacity(steps + 1);
    let (mut x, mut y) = (0.0f64, 0.0f64);
    pts.push((x, y));
    for _ in 0..steps {
        let z: f64 = StandardNormal.sample(rng);
        heading += wiggle * z;
        x += heading.cos();
        y += heading.sin();
        pts.push((x, y));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let reach = pts
        .iter()
        .map(|p| (p.0 - mx).abs().max((p.1 - my).abs()))
        .fold(0.0, f64::max);
    let half = (size as f64 - 2.0) / 2.0;
    let scale = if reach > 1e-12 { half / reach } else { 0.0 };
    pts.iter().map(|p| ((p.0 - mx) * scale, (p.1 - my) * scale)).collect()
}

pub fn synth_motion_kernel(size: usize, intensity: f64, rng: &mut Rng) -> Result<BlurKernel, DegradeError> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(DegradeError::Contract(format!("kernel size {size} must be odd and >= 3")));
    }
    if !(0.0..=1.0).contains(&intensity) {
        return Err(DegradeError::Contract(format!("intensity {intensity} outside [0,1]")));
    }
    Ok(rasterize_trajectory(&motion_trajectory(size, intensity, rng), size))
}
