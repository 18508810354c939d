//! Paired degraded/clean data: per-view motion blur and ×factor bicubic
//! down-up resampling.

mod kernel;
mod resample;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Image, ViewSet};
use crate::rng::derived_rng;

pub use kernel::{
    kernel_size_from_draw, motion_trajectory, rasterize_trajectory, sample_kernel_size, synth_motion_kernel,
    BlurKernel,
};
pub use resample::{cubic_weight, from_planes, resize_bicubic, resize_planes, to_planes};

#[derive(Debug, Error, PartialEq)]
pub enum DegradeError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Kernel size distribution and intensity range for motion blur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurParams {
    pub size_mean: f64,
    pub size_std: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl BlurParams {
    /// Full-resolution setting (640×480 training images).
    pub fn full_scale() -> Self {
        BlurParams {
            size_mean: 85.0,
            size_std: 12.75,
            intensity_min: 0.0,
            intensity_max: 1.0,
        }
    }

    /// The same size-to-width ratio scaled to 64 px wide images.
    pub fn desk() -> Self {
        BlurParams {
            size_mean: 9.0,
            size_std: 1.35,
            intensity_min: 0.0,
            intensity_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        let ok = self.size_mean > 0.0
            && self.size_std >= 0.0
            && 0.0 <= self.intensity_min
            && self.intensity_min <= self.intensity_max
            && self.intensity_max <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(DegradeError::Contract(format!("invalid blur params {self:?}")))
        }
    }
}

/// What a degraded view set is synthesized for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationTask {
    Deblur(BlurParams),
    Sr { factor: usize },
}

/// Convolution with reflect padding (edge not repeated), clipped to `[0, 1]`.
pub fn apply_blur(image: &Image, kernel: &BlurKernel) -> Result<Image, DegradeError> {
    Ok(clip(image, &blur_unclipped(image, kernel)?))
}

/// The linear part of [`apply_blur`], before clipping.
pub fn blur_unclipped(image: &Image, kernel: &BlurKernel) -> Result<Vec<f64>, DegradeError> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let k = kernel.size;
    if k >= h || k >= w {
        return Err(DegradeError::Contract(format!(
            "kernel size {k} not smaller than image {h}x{w}"
        )));
    }
    let r = (k / 2) as i64;
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        j as usize
    };
    // precomputed reflected indices for every tap offset
    let rows: Vec<Vec<usize>> = (0..h as i64)
        .map(|y| (0..k as i64).map(|i| reflect(y - (i - r), h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..w as i64)
        .map(|x| (0..k as i64).map(|j| reflect(x - (j - r), w)).collect())
        .collect();
    let mut out = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, &sy) in rows[y].iter().enumerate() {
                    let krow = &kernel.weights[i * k..(i + 1) * k];
                    for (kw, &sx) in krow.iter().zip(&cols[x]) {
                        if *kw != 0.0 {
                            acc += kw * image.data[(sy * w + sx) * ch + c] as f64;
                        }
                    }
                }
                out[(y * w + x) * ch + c] = acc;
            }
        }
    }
    Ok(out)
}

fn clip(like: &Image, values: &[f64]) -> Image {
    Image {
        height: like.height,
        width: like.width,
        channels: like.channels,
        data: values.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    }
}

/// Bicubic downsample by `factor`, then bicubic upsample back; clipped once.
pub fn degrade_sr(image: &Image, factor: usize) -> Result<Image, DegradeError> {
    Ok(clip(image, &degrade_sr_unclipped(image, factor)?))
}

pub fn degrade_sr_unclipped(image: &Image, factor: usize) -> Result<Vec<f64>, DegradeError> {
    let (h, w) = (image.height, image.width);
    if factor < 2 || h % factor != 0 || w % factor != 0 {
        return Err(DegradeError::Contract(format!(
            "{h}x{w} not divisible by factor {factor}"
        )));
    }
    let planes = resample::to_planes(image);
    let low = resize_planes(&planes, h, w, h / factor, w / factor);
    let up = resize_planes(&low, h / factor, w / factor, h, w);
    let mut out = vec![0.0; h * w * image.channels];
    for (c, plane) in up.iter().enumerate() {
        for (i, v) in plane.iter().enumerate() {
            out[i * image.channels + c] = *v;
        }
    }
    Ok(out)
}

/// Degrades one image with the view's own sub-seed; returns the kernel used
/// for deblurring tasks.
pub fn degrade_image(
    image: &Image,
    task: &DegradationTask,
    seed: u64,
) -> Result<(Image, Option<BlurKernel>), DegradeError> {
    match task {
        DegradationTask::Deblur(params) => {
            params.validate()?;
            let mut rng = derived_rng(seed, 0);
            let size = sample_kernel_size(params, &mut rng);
            let intensity = if params.intensity_max > params.intensity_min {
                rng.random_range(params.intensity_min..=params.intensity_max)
            } else {
                params.intensity_min
            };
            let kernel = synth_motion_kernel(size, intensity, &mut rng)?;
            Ok((apply_blur(image, &kernel)?, Some(kernel)))
        }
        DegradationTask::Sr { factor } => Ok((degrade_sr(image, *factor)?, None)),
    }
}

/// Per-view independent degradation; view `i` uses sub-seed `(seed, i)`.
pub fn degrade_viewset_with_kernels(
    vs: &ViewSet,
    task: &DegradationTask,
    seed: u64,
) -> Result<(ViewSet, Vec<Option<BlurKernel>>), DegradeError> {
    let mut images = Vec::with_capacity(vs.len());
    let mut kernels = Vec::with_capacity(vs.len());
    for (i, im) in vs.images.iter().enumerate() {
        let (d, k) = degrade_image(im, task, crate::rng::sub_seed(seed, i as u64))?;
        images.push(d);
        kernels.push(k);
    }
    let out = ViewSet {
        images,
        ..vs.clone()
    };
    Ok((out, kernels))
}

pub fn degrade_viewset(vs: &ViewSet, task: &DegradationTask, seed: u64) -> Result<ViewSet, DegradeError> {
    degrade_viewset_with_kernels(vs, task, seed).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| 0.1 + 0.006 * x as f64 + 0.004 * y as f64 + 0.05 * c as f64)
    }

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random_range(0.2..0.8))
    }

    #[test]
    fn constant_image_is_preserved() {
        let im = Image::filled(16, 20, 3, 0.37);
        let k = synth_motion_kernel(7, 0.6, &mut rng_from_seed(1)).unwrap();
        let out = apply_blur(&im, &k).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-6));
        let sr = degrade_sr(&im, 4).unwrap();
        assert!(sr.data.iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let im = textured(12, 12, 3);
        assert_eq!(apply_blur(&im, &BlurKernel::delta(5)).unwrap(), im);
    }

    #[test]
    fn uniform_kernel_matches_nested_loops() {
        let im = Image::from_fn(5, 5, 1, |y, x, _| (y * 5 + x) as f64 / 24.0);
        let k = BlurKernel::uniform(3);
        let out = apply_blur(&im, &k).unwrap();
        let refl = |i: i64| -> usize { if i < 0 { (-i) as usize } else if i > 4 { (8 - i) as usize } else { i as usize } };
        for y in 0..5i64 {
            for x in 0..5i64 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += im.get(refl(y + dy), refl(x + dx), 0) as f64 / 9.0;
                    }
                }
                assert!((out.get(y as usize, x as usize, 0) as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let im = Image::filled(8, 8, 1, 0.5);
        assert!(apply_blur(&im, &BlurKernel::uniform(9)).is_err());
        assert!(degrade_sr(&Image::filled(10, 12, 1, 0.5), 4).is_err());
    }

    #[test]
    fn sr_keeps_shape_and_reproduces_ramps_in_the_interior() {
        let im = ramp(48, 64);
        let out = degrade_sr(&im, 4).unwrap();
        assert_eq!((out.height, out.width, out.channels), (48, 64, 3));
        // stencils touching the replicated border are excluded
        let margin = 8;
        for y in margin..48 - margin {
            for x in margin..64 - margin {
                for c in 0..3 {
                    assert!((out.get(y, x, c) - im.get(y, x, c)).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let im = textured(48, 64, 9);
        let k = synth_motion_kernel(9, 0.5, &mut rng_from_seed(2)).unwrap();
        let out = apply_blur(&im, &k).unwrap();
        assert!((out.mean() - im.mean()).abs() < 1e-3);
    }

    #[test]
    fn viewset_kernels_are_independent_and_deterministic() {
        let images: Vec<Image> = (0..4).map(|s| textured(32, 32, s)).collect();
        let vs = ViewSet::from_images("t", images).unwrap();
        let task = DegradationTask::Deblur(BlurParams::desk());
        let (a, ka) = degrade_viewset_with_kernels(&vs, &task, 42).unwrap();
        let (b, _) = degrade_viewset_with_kernels(&vs, &task, 42).unwrap();
        assert_eq!(a, b);
        let ks: Vec<BlurKernel> = ka.into_iter().map(Option::unwrap).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(ks[i], ks[j]);
            }
        }
        assert_eq!(vs.images[0], textured(32, 32, 0), "clean set untouched");
    }

    #[test]
    fn single_view_reduces_to_apply_blur() {
        let im = textured(24, 24, 5);
        let vs = ViewSet::from_images("t", vec![im.clone()]).unwrap();
        let task = DegradationTask::Deblur(BlurParams::desk());
        let (out, ks) = degrade_viewset_with_kernels(&vs, &task, 8).unwrap();
        let direct = apply_blur(&im, ks[0].as_ref().unwrap()).unwrap();
        assert_eq!(out.images[0], direct);
        let (again, _) = degrade_image(&im, &task, crate::rng::sub_seed(8, 0)).unwrap();
        assert_eq!(again, direct);
    }

    proptest! {
        #[test]
        fn blur_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, seed in 0u64..1000) {
            let x = textured(16, 16, seed);
            let y = textured(16, 16, seed + 1);
            let k = synth_motion_kernel(5, 0.5, &mut rng_from_seed(seed)).unwrap();
            let combo: Vec<f32> = x.data.iter().zip(&y.data).map(|(p, q)| (a * *p as f64 + b * *q as f64) as f32).collect();
            // the linear path accepts any values; only the final clip is bounded
            let z = Image { height: 16, width: 16, channels: 3, data: combo };
            let lhs = blur_unclipped(&z, &k).unwrap();
            let bx = blur_unclipped(&x, &k).unwrap();
            let by = blur_unclipped(&y, &k).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * bx[i] + b * by[i])).abs() < 1e-5);
            }
        }

        #[test]
        fn sr_idempotent_when_downsample_is_fixed(v in 0.0..1.0f64, factor in 2usize..5) {
            let im = Image::filled(8 * factor, 8 * factor, 3, v as f32);
            let once = degrade_sr(&im, factor).unwrap();
            let low = |x: &Image| resize_bicubic(x, x.height / factor, x.width / factor);
            let fixed = low(&im).data.iter().zip(&low(&once).data).all(|(p, q)| (p - q).abs() < 1e-9);
            if fixed {
                let twice = degrade_sr(&once, factor).unwrap();
                for (p, q) in once.data.iter().zip(&twice.data) {
                    prop_assert!((p - q).abs() < 1e-6);
                }
            }
        }
    }
}
