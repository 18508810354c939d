//! Restoration and consistency metrics: PSNR, SSIM, visual consistency over
//! affine-warped patches, geometric consistency of depth predictions,
//! AbsRel/δ1, and a corner-matching correspondence counter.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{CameraView, DepthMap, Image, ViewSet};
use crate::geometry::{
    fit_affine, match_pixel, nearest_pixel, unproject, warp_patch_affine, world_to_camera, PixelMatch,
    DEFAULT_OCCLUSION_THRESHOLD,
};
use crate::rng::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// No data to average; never reported as 0.
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("missing input: {0}")]
    Missing(String),
}

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_shape(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )))
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filter of a `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(MetricError::Shape(format!("{h}x{w} is smaller than the 11x11 window")));
    }
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * a.channels + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * b.channels + c] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let ma = filter_valid(&pa, h, w, &k);
        let mb = filter_valid(&pb, h, w, &k);
        let saa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let sbb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let sab = filter_valid(&prod(&pa, &pb), h, w, &k);
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        count += ma.len();
    }
    Ok(total / count as f64)
}

/// Distance between equal-size RGB patches.
pub trait PerceptualBackend {
    fn distance(&self, a: &Image, b: &Image) -> f64;
}

const PYRAMID_LEVELS: usize = 3;
const N_PROJ: usize = 8;
const PROJ_K: usize = 5;
const PROJ_SEED: u64 = 0x7065_7263;
/// Brings mid-gray vs σ = 0.1 noise to a distance of 0.1.
pub const PERCEPTUAL_SCALE: f64 = 0.1 / 0.007_308_5;

/// Random-projection feature distance over an image pyramid.
#[derive(Debug, Clone)]
pub struct ProjectionBackend {
    /// `[N_PROJ][PROJ_K·PROJ_K·3]`.
    weights: Vec<Vec<f64>>,
    pub scale: f64,
}

pub fn default_perceptual_backend() -> ProjectionBackend {
    ProjectionBackend::new(PROJ_SEED, PERCEPTUAL_SCALE)
}

fn downsample2(img: &Image) -> Image {
    let (h, w) = (img.height / 2, img.width / 2);
    Image::from_fn(h, w, img.channels, |y, x, c| {
        let s = img.get(2 * y, 2 * x, c) + img.get(2 * y, 2 * x + 1, c) + img.get(2 * y + 1, 2 * x, c)
            + img.get(2 * y + 1, 2 * x + 1, c);
        s as f64 / 4.0
    })
}

impl ProjectionBackend {
    pub fn new(seed: u64, scale: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let len = PROJ_K * PROJ_K * 3;
        let weights = (0..N_PROJ)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        ProjectionBackend { weights, scale }
    }

    fn features(&self, img: &Image) -> Vec<[f64; N_PROJ]> {
        let (h, w) = (img.height, img.width);
        if h < PROJ_K || w < PROJ_K {
            return Vec::new();
        }
        let mut out = Vec::with_capacity((h + 1 - PROJ_K) * (w + 1 - PROJ_K));
        let mut patch = Vec::with_capacity(PROJ_K * PROJ_K * 3);
        for y in 0..=h - PROJ_K {
            for x in 0..=w - PROJ_K {
                patch.clear();
                for dy in 0..PROJ_K {
                    for dx in 0..PROJ_K {
                        for c in 0..3 {
                            patch.push(img.get(y + dy, x + dx, c.min(img.channels - 1)) as f64);
                        }
                    }
                }
                let mut f = [0.0; N_PROJ];
                for (fi, wt) in f.iter_mut().zip(&self.weights) {
                    *fi = wt.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
                out.push(f);
            }
        }
        out
    }

    /// Unscaled distance.
    pub fn raw_distance(&self, a: &Image, b: &Image) -> f64 {
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut total = 0.0;
        let mut levels = 0;
        for level in 0..PYRAMID_LEVELS {
            if level > 0 {
                a = downsample2(&a);
                b = downsample2(&b);
            }
            let (fa, fb) = (self.features(&a), self.features(&b));
            if fa.is_empty() {
                break;
            }
            let d: f64 = fa.iter().zip(&fb).map(|(p, q)| unit_distance(p, q)).sum();
            total += d / fa.len() as f64;
            levels += 1;
        }
        if levels == 0 {
            0.0
        } else {
            total / levels as f64
        }
    }
}

/// `‖p̂ − q̂‖² / 2` on normalized vectors: `1 − cos` when both are nonzero,
/// and exactly 0 for identical inputs.
fn unit_distance(p: &[f64; N_PROJ], q: &[f64; N_PROJ]) -> f64 {
    const EPS: f64 = 1e-6;
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
    p.iter().zip(q).map(|(a, b)| (a / np - b / nq).powi(2)).sum::<f64>() / 2.0
}

impl PerceptualBackend for ProjectionBackend {
    fn distance(&self, a: &Image, b: &Image) -> f64 {
        self.scale * self.raw_distance(a, b)
    }
}

/// Mid-gray `size×size` image and the same with clipped `N(0, σ²)` noise.
pub fn calibration_pair(size: usize, sigma: f64, seed: u64) -> (Image, Image) {
    let gray = Image::filled(size, size, 3, 0.5);
    let mut rng = rng_from_seed(seed);
    let noisy = Image::from_fn(size, size, 3, |_, _, _| {
        let n: f64 = StandardNormal.sample(&mut rng);
        0.5 + sigma * n
    });
    (gray, noisy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VConsisOptions {
    pub patch: usize,
    pub min_pts: usize,
    pub gt_gate: f64,
}

impl Default for VConsisOptions {
    fn default() -> Self {
        VConsisOptions {
            patch: 30,
            min_pts: 300,
            gt_gate: 0.1,
        }
    }
}

/// Visual-consistency contribution of one ordered view pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConsistency {
    pub src: usize,
    pub dst: usize,
    /// Patches that passed the point count and the GT gate.
    pub n_patches: usize,
    /// Mean excess patch distance, `None` without kept patches.
    pub mean: Option<f64>,
}

fn gt_geometry(gt: &ViewSet) -> Result<(&[DepthMap], &[CameraView]), MetricError> {
    match (&gt.depths, &gt.cameras) {
        (Some(d), Some(c)) => Ok((d, c)),
        _ => Err(MetricError::Missing("ground-truth depth and cameras".into())),
    }
}

/// Per-pair patch distances; see [`visual_consistency`].
pub fn visual_consistency_pairs(
    restored: &[Image],
    gt: &ViewSet,
    backend: &dyn PerceptualBackend,
    opts: &VConsisOptions,
) -> Result<Vec<PairConsistency>, MetricError> {
    let (depths, cams) = gt_geometry(gt)?;
    let n = gt.images.len();
    if restored.len() != n {
        return Err(MetricError::Shape(format!("{} restored views for {n} ground-truth views", restored.len())));
    }
    for (r, g) in restored.iter().zip(&gt.images) {
        check_shape(r, g)?;
    }
    let (h, w) = (gt.images[0].height, gt.images[0].width);
    let p = opts.patch;
    if p == 0 || p > h || p > w {
        return Err(MetricError::Shape(format!("patch {p} does not fit {h}x{w}")));
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let mut dists = Vec::new();
            for top in (0..=h - p).step_by(p) {
                for left in (0..=w - p).step_by(p) {
                    let mut src = Vec::new();
                    let mut dst = Vec::new();
                    for y in top..top + p {
                        for x in left..left + p {
                            let m = match_pixel(
                                y,
                                x,
                                (&depths[i], &cams[i]),
                                (&depths[j], &cams[j]),
                                DEFAULT_OCCLUSION_THRESHOLD,
                            );
                            if let PixelMatch::Valid { u, v, .. } = m {
                                src.push((x as f64, y as f64));
                                dst.push((u, v));
                            }
                        }
                    }
                    if src.len() < opts.min_pts {
                        continue;
                    }
                    // destination → source, so warped patches live on view j's grid
                    let Ok(affine) = fit_affine(&dst, &src) else {
                        continue;
                    };
                    let k = dst.len() as f64;
                    let cu = dst.iter().map(|d| d.0).sum::<f64>() / k;
                    let cv = dst.iter().map(|d| d.1).sum::<f64>() / k;
                    let half = p as f64 / 2.0;
                    let dtop = ((cv - half).round().max(0.0) as usize).min(h - p);
                    let dleft = ((cu - half).round().max(0.0) as usize).min(w - p);
                    let boxed = (dtop, dleft, p);
                    let gt_warp = warp_patch_affine(&gt.images[i], boxed, &affine);
                    let gt_dst = gt.images[j].crop(dtop, dleft, p);
                    let d_gt = backend.distance(&gt_warp, &gt_dst);
                    if d_gt >= opts.gt_gate {
                        continue;
                    }
                    let r_warp = warp_patch_affine(&restored[i], boxed, &affine);
                    let r_dst = restored[j].crop(dtop, dleft, p);
                    // resampling error of the warp itself is present in both terms
                    dists.push((backend.distance(&r_warp, &r_dst) - d_gt).abs());
                }
            }
            out.push(PairConsistency {
                src: i,
                dst: j,
                n_patches: dists.len(),
                mean: (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64),
            });
        }
    }
    Ok(out)
}

/// Patch-weighted mean of per-pair means; `None` when no patch was kept.
pub fn pooled_consistency(pairs: &[PairConsistency]) -> Option<f64> {
    let n: usize = pairs.iter().map(|p| p.n_patches).sum();
    (n > 0).then(|| {
        pairs
            .iter()
            .filter_map(|p| p.mean.map(|m| m * p.n_patches as f64))
            .sum::<f64>()
            / n as f64
    })
}

/// Mean over every kept patch of every ordered pair of
/// `|d(restored warp, restored patch) − d(gt warp, gt patch)|`, on the raw
/// (unscaled by 100) backend scale. Zero when `restored` equals the GT.
pub fn visual_consistency(
    restored: &[Image],
    gt: &ViewSet,
    backend: &dyn PerceptualBackend,
    opts: &VConsisOptions,
) -> Result<f64, MetricError> {
    let pairs = visual_consistency_pairs(restored, gt, backend, opts)?;
    pooled_consistency(&pairs).ok_or_else(|| MetricError::Undefined("no patch survived the point count and gate".into()))
}

/// Least-squares `s·pred + b ≈ gt` over pixels valid in both.
pub fn fit_scale_bias(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, f64), MetricError> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.depth.len() {
        if pred.valid[i] && gt.valid[i] {
            let (x, y) = (pred.depth[i] as f64, gt.depth[i] as f64);
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
    }
    if n == 0.0 {
        return Err(MetricError::Undefined("no shared valid depth".into()));
    }
    let var = sxx - sx * sx / n;
    if var <= 1e-12 * sxx.max(1e-300) {
        return Ok((0.0, sy / n));
    }
    let s = (sxy - sx * sy / n) / var;
    Ok((s, (sy - s * sx) / n))
}

/// Valid pixels mapped through `s·d + b`, kept in f64.
fn aligned_depth(pred: &DepthMap, gt: &DepthMap, align: bool) -> Result<Vec<Option<f64>>, MetricError> {
    let (s, b) = if align { fit_scale_bias(pred, gt)? } else { (1.0, 0.0) };
    Ok(pred
        .depth
        .iter()
        .zip(&pred.valid)
        .map(|(d, v)| v.then(|| s * *d as f64 + b))
        .collect())
}

/// Per-ordered-pair residual sum and count of geometric consistency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGeometric {
    pub src: usize,
    pub dst: usize,
    pub n_points: usize,
    pub mean: Option<f64>,
}

/// Warps each source prediction into the destination camera and compares
/// its depth with the destination prediction at the GT correspondence. The
/// same warp applied to GT depth is subtracted, so pixel rounding on slanted
/// surfaces does not count as inconsistency.
pub fn geometric_consistency_pairs(
    pred: &[DepthMap],
    gt: &ViewSet,
    align: bool,
) -> Result<Vec<PairGeometric>, MetricError> {
    let (depths, cams) = gt_geometry(gt)?;
    let n = depths.len();
    if pred.len() != n {
        return Err(MetricError::Shape(format!("{} predictions for {n} views", pred.len())));
    }
    let mut aligned = Vec::with_capacity(n);
    for (p, g) in pred.iter().zip(depths) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(MetricError::Shape("prediction and ground-truth depth differ in size".into()));
        }
        aligned.push(aligned_depth(p, g, align)?);
    }
    let (h, w) = (depths[0].height, depths[0].width);
    // source depth seen from the destination camera
    let z_in = |d: f64, y: usize, x: usize, src: &CameraView, dst: &CameraView| {
        let p = unproject((x as f64, y as f64), d, src).ok()?;
        Some(world_to_camera(p, dst)[2])
    };
    let mut out = Vec::new();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let (mut sum, mut count) = (0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    let m = match_pixel(
                        y,
                        x,
                        (&depths[i], &cams[i]),
                        (&depths[j], &cams[j]),
                        DEFAULT_OCCLUSION_THRESHOLD,
                    );
                    let PixelMatch::Valid { u, v, projected_depth } = m else {
                        continue;
                    };
                    let Some((qy, qx)) = nearest_pixel(u, v, h, w) else {
                        continue;
                    };
                    let (Some(ps), Some(pd)) = (aligned[i][y * w + x], aligned[j][qy * w + qx]) else {
                        continue;
                    };
                    if ps <= 0.0 {
                        continue;
                    }
                    let Some(zp) = z_in(ps, y, x, &cams[i], &cams[j]) else {
                        continue;
                    };
                    let gd = depths[j].at(qy, qx).expect("valid match has destination depth");
                    sum += ((zp - pd) - (projected_depth - gd)).abs();
                    count += 1;
                }
            }
            out.push(PairGeometric {
                src: i,
                dst: j,
                n_points: count,
                mean: (count > 0).then(|| sum / count as f64),
            });
        }
    }
    Ok(out)
}

/// Mean residual in meters over all correspondences of all ordered pairs.
pub fn geometric_consistency(pred: &[DepthMap], gt: &ViewSet, align: bool) -> Result<f64, MetricError> {
    let pairs = geometric_consistency_pairs(pred, gt, align)?;
    pooled_geometric(&pairs).ok_or_else(|| MetricError::Undefined("no valid correspondences".into()))
}

pub fn pooled_geometric(pairs: &[PairGeometric]) -> Option<f64> {
    let n: usize = pairs.iter().map(|p| p.n_points).sum();
    (n > 0).then(|| {
        pairs
            .iter()
            .filter_map(|p| p.mean.map(|m| m * p.n_points as f64))
            .sum::<f64>()
            / n as f64
    })
}

/// `(AbsRel, δ1 in percent)` over pixels valid in both maps.
pub fn absrel_delta1(pred: &DepthMap, gt: &DepthMap, align: bool) -> Result<(f64, f64), MetricError> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(MetricError::Shape("depth maps differ in size".into()));
    }
    let p = aligned_depth(pred, gt, align)?;
    let (mut rel, mut good, mut n) = (0.0, 0usize, 0usize);
    for (i, pv) in p.iter().enumerate() {
        let (Some(pv), true) = (*pv, gt.valid[i]) else {
            continue;
        };
        let g = gt.depth[i] as f64;
        rel += (pv - g).abs() / g;
        if pv > 0.0 && (pv / g).max(g / pv) < 1.25 {
            good += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Undefined("no shared valid depth".into()));
    }
    Ok((rel / n as f64, 100.0 * good as f64 / n as f64))
}

/// Finds matches between two images.
pub trait Matcher {
    fn count_matches(&self, a: &Image, b: &Image) -> usize;
}

/// Harris corners matched by normalized cross-correlation with a ratio
/// test and mutual-best filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarrisNccMatcher {
    pub max_corners: usize,
    pub window: usize,
    pub ratio: f64,
}

impl Default for HarrisNccMatcher {
    fn default() -> Self {
        HarrisNccMatcher {
            max_corners: 512,
            window: 9,
            ratio: 0.9,
        }
    }
}

/// Corner positions `(y, x)`, strongest first.
pub fn harris_corners(gray: &[f64], h: usize, w: usize, max_corners: usize, border: usize) -> Vec<(usize, usize)> {
    if h < 2 * border + 3 || w < 2 * border + 3 {
        return Vec::new();
    }
    let at = |y: usize, x: usize| gray[y * w + x];
    let mut ixx = vec![0.0; h * w];
    let mut iyy = vec![0.0; h * w];
    let mut ixy = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let mut resp = vec![f64::NEG_INFINITY; h * w];
    for y in border..h - border {
        for x in border..w - border {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    a += ixx[yy * w + xx];
                    b += iyy[yy * w + xx];
                    c += ixy[yy * w + xx];
                }
            }
            resp[y * w + x] = a * b - c * c - 0.04 * (a + b) * (a + b);
        }
    }
    let max = resp.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            let r = resp[y * w + x];
            if r <= 1e-6 * max || r <= 0.0 {
                continue;
            }
            let is_max = (y - 1..=y + 1)
                .flat_map(|yy| (x - 1..=x + 1).map(move |xx| (yy, xx)))
                .filter(|&(yy, xx)| (yy, xx) != (y, x))
                .all(|(yy, xx)| {
                    let o = resp[yy * w + xx];
                    // ties resolve toward the earlier raster position
                    o < r || (o == r && (yy, xx) > (y, x))
                });
            if is_max {
                out.push((y, x));
            }
        }
    }
    out.sort_by(|p, q| resp[q.0 * w + q.1].total_cmp(&resp[p.0 * w + p.1]).then(p.cmp(q)));
    out.truncate(max_corners);
    out
}

/// Zero-mean, unit-norm window; `None` for flat windows.
fn ncc_descriptor(gray: &[f64], w: usize, y: usize, x: usize, r: usize) -> Option<Vec<f64>> {
    let mut v: Vec<f64> = (y - r..=y + r)
        .flat_map(|yy| (x - r..=x + r).map(move |xx| (yy, xx)))
        .map(|(yy, xx)| gray[yy * w + xx])
        .collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= m);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (n > 1e-9).then(|| {
        v.iter_mut().for_each(|a| *a /= n);
        v
    })
}

impl HarrisNccMatcher {
    fn describe(&self, img: &Image) -> Vec<Vec<f64>> {
        let gray = img.to_gray();
        let r = self.window / 2;
        harris_corners(&gray, img.height, img.width, self.max_corners, r.max(1))
            .into_iter()
            .filter_map(|(y, x)| ncc_descriptor(&gray, img.width, y, x, r))
            .collect()
    }

    /// Best match per row if it passes the ratio test. Distances are
    /// Euclidean between unit descriptors, `√(2 − 2·NCC)`.
    fn best(&self, from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<Option<usize>> {
        from.iter()
            .map(|d| {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut second = f64::INFINITY;
                for (k, e) in to.iter().enumerate() {
                    let ncc = d.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                    let dist = (2.0 - 2.0 * ncc).max(0.0).sqrt();
                    if dist < best.0 {
                        second = best.0;
                        best = (dist, k);
                    } else if dist < second {
                        second = dist;
                    }
                }
                (best.1 != usize::MAX && best.0 < self.ratio * second).then_some(best.1)
            })
            .collect()
    }
}

impl Matcher for HarrisNccMatcher {
    fn count_matches(&self, a: &Image, b: &Image) -> usize {
        let (da, db) = (self.describe(a), self.describe(b));
        let ab = self.best(&da, &db);
        let ba = self.best(&db, &da);
        ab.iter()
            .enumerate()
            .filter(|(i, m)| m.is_some_and(|j| ba[j] == Some(*i)))
            .count()
    }
}

/// Number of corners the default matcher detects (and can describe) in `img`.
pub fn corner_count(img: &Image) -> usize {
    HarrisNccMatcher::default().describe(img).len()
}

pub fn count_correspondences(a: &Image, b: &Image, matcher: &dyn Matcher) -> Result<usize, MetricError> {
    check_shape(a, b)?;
    Ok(matcher.count_matches(a, b))
}

/// Per-view image and depth scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairMetrics {
    pub src: usize,
    pub dst: usize,
    /// ×100.
    pub vconsis: Option<f64>,
    pub n_patches: usize,
    pub gconsis: Option<f64>,
    pub n_points: usize,
    pub n_correspondences: Option<usize>,
}

/// Aggregates are means of the per-view entries; pair aggregates are
/// weighted by each pair's patch or point count, matching the pooled
/// definitions. Undefined values are `null`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// ×100.
    pub vconsis: Option<f64>,
    pub gconsis: Option<f64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub n_correspondences: Option<f64>,
    pub n_patches: usize,
    pub n_pairs: usize,
    pub views: Vec<ViewMetrics>,
    pub pairs: Vec<PairMetrics>,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Recomputes every aggregate from the stored entries.
    pub fn aggregate(&mut self) {
        self.psnr = mean_of(self.views.iter().map(|v| v.psnr));
        self.ssim = mean_of(self.views.iter().map(|v| v.ssim));
        self.absrel = mean_of(self.views.iter().map(|v| v.absrel));
        self.delta1 = mean_of(self.views.iter().map(|v| v.delta1));
        self.n_correspondences = mean_of(self.pairs.iter().map(|p| p.n_correspondences.map(|c| c as f64)));
        self.n_patches = self.pairs.iter().map(|p| p.n_patches).sum();
        self.n_pairs = self.pairs.len();
        let weighted = |f: &dyn Fn(&PairMetrics) -> (Option<f64>, usize)| {
            let n: usize = self.pairs.iter().map(|p| f(p).1).sum();
            (n > 0).then(|| {
                self.pairs
                    .iter()
                    .filter_map(|p| {
                        let (m, k) = f(p);
                        m.map(|m| m * k as f64)
                    })
                    .sum::<f64>()
                    / n as f64
            })
        };
        self.vconsis = weighted(&|p| (p.vconsis, p.n_patches));
        self.gconsis = weighted(&|p| (p.gconsis, p.n_points));
    }
}

/// Image-restoration report: PSNR/SSIM per view, visual consistency and
/// matcher counts per ordered pair.
pub fn image_report(
    restored: &[Image],
    gt: &ViewSet,
    backend: &dyn PerceptualBackend,
    opts: &VConsisOptions,
    matcher: Option<&dyn Matcher>,
) -> Result<MetricReport, MetricError> {
    if restored.len() != gt.images.len() {
        return Err(MetricError::Shape(format!(
            "{} restored views for {} ground-truth views",
            restored.len(),
            gt.images.len()
        )));
    }
    let mut report = MetricReport::default();
    for (k, (r, g)) in restored.iter().zip(&gt.images).enumerate() {
        report.views.push(ViewMetrics {
            view: gt.view_indices[k],
            psnr: Some(psnr(r, g)?),
            ssim: ssim(r, g).ok(),
            ..ViewMetrics::default()
        });
    }
    let consistency = if gt.depths.is_some() && gt.cameras.is_some() && restored.len() > 1 {
        Some(visual_consistency_pairs(restored, gt, backend, opts)?)
    } else {
        None
    };
    let n = restored.len();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let c = consistency.as_ref().and_then(|c| c.iter().find(|p| p.src == i && p.dst == j));
            report.pairs.push(PairMetrics {
                src: gt.view_indices[i],
                dst: gt.view_indices[j],
                vconsis: c.and_then(|c| c.mean).map(|m| 100.0 * m),
                n_patches: c.map_or(0, |c| c.n_patches),
                n_correspondences: matcher.map(|m| m.count_matches(&restored[i], &restored[j])),
                ..PairMetrics::default()
            });
        }
    }
    report.aggregate();
    Ok(report)
}

/// Depth report: AbsRel/δ1 per view and geometric consistency per pair.
pub fn depth_report(pred: &[DepthMap], gt: &ViewSet, align: bool) -> Result<MetricReport, MetricError> {
    let depths = gt
        .depths
        .as_ref()
        .ok_or_else(|| MetricError::Missing("ground-truth depth".into()))?;
    if pred.len() != depths.len() {
        return Err(MetricError::Shape(format!("{} predictions for {} views", pred.len(), depths.len())));
    }
    let mut report = MetricReport::default();
    for (k, (p, g)) in pred.iter().zip(depths).enumerate() {
        let (a, d) = absrel_delta1(p, g, align)?;
        report.views.push(ViewMetrics {
            view: gt.view_indices[k],
            absrel: Some(a),
            delta1: Some(d),
            ..ViewMetrics::default()
        });
    }
    if gt.cameras.is_some() {
        for pg in geometric_consistency_pairs(pred, gt, align)? {
            report.pairs.push(PairMetrics {
                src: gt.view_indices[pg.src],
                dst: gt.view_indices[pg.dst],
                gconsis: pg.mean,
                n_points: pg.n_points,
                ..PairMetrics::default()
            });
        }
    }
    report.aggregate();
    Ok(report)
}
