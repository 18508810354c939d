//! Pinhole projection, depth-based cross-view correspondence with occlusion
//! masking, overlap ratios, view-set selection, and affine patch warping.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataio::{CameraView, DepthMap, Image, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("resolution mismatch: {0:?} vs {1:?}")]
    ResolutionMismatch((usize, usize), (usize, usize)),
    #[error("degenerate affine fit: {0}")]
    DegenerateFit(String),
}

pub type Point3 = [f64; 3];

/// Occlusion gate in meters.
pub const DEFAULT_OCCLUSION_THRESHOLD: f64 = 0.1;

pub fn world_to_camera(point: Point3, cam: &CameraView) -> Point3 {
    let m = &cam.world_to_camera;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * point[0] + m[i][1] * point[1] + m[i][2] * point[2] + m[i][3];
    }
    out
}

pub fn camera_to_world(point: Point3, cam: &CameraView) -> Point3 {
    let r = cam.rotation();
    let t = cam.translation();
    let q = [point[0] - t[0], point[1] - t[1], point[2] - t[2]];
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2];
    }
    out
}

/// World point seen at pixel `(u, v)` with camera-frame depth `depth`.
pub fn unproject(pixel: (f64, f64), depth: f64, cam: &CameraView) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let p = [
        (pixel.0 - cam.cx) / cam.fx * depth,
        (pixel.1 - cam.cy) / cam.fy * depth,
        depth,
    ];
    Ok(camera_to_world(p, cam))
}

/// `(u, v, depth)`, or `None` for points at or behind the camera plane.
pub fn project(point: Point3, cam: &CameraView) -> Option<(f64, f64, f64)> {
    let p = world_to_camera(point, cam);
    if p[2] <= 1e-9 {
        return None;
    }
    Some((cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy, p[2]))
}

/// Nearest pixel to sub-pixel `(u, v)`, if it lies inside a `h×w` frame.
#[inline]
pub fn nearest_pixel(u: f64, v: f64, h: usize, w: usize) -> Option<(usize, usize)> {
    let (x, y) = (u.round(), v.round());
    (x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h).then_some((y as usize, x as usize))
}

/// Per-source-pixel mapping into a destination view.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub src_index: usize,
    pub dst_index: usize,
    pub height: usize,
    pub width: usize,
    /// Destination `(u, v)` for valid pixels.
    pub map: Vec<Option<(f64, f64)>>,
    pub occluded: Vec<bool>,
    pub valid: Vec<bool>,
}

impl CorrespondenceField {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn n_occluded(&self) -> usize {
        self.occluded.iter().filter(|v| **v).count()
    }
}

/// Outcome of warping one source pixel into the destination view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelMatch {
    Valid { u: f64, v: f64, projected_depth: f64 },
    Occluded,
    /// Out of frame, behind the camera, invalid depth on either side, or
    /// projected in front of the stored destination surface.
    Unmatched,
}

pub fn match_pixel(
    y: usize,
    x: usize,
    src: (&DepthMap, &CameraView),
    dst: (&DepthMap, &CameraView),
    occl_thresh: f64,
) -> PixelMatch {
    let Some(d) = src.0.at(y, x) else {
        return PixelMatch::Unmatched;
    };
    let Ok(world) = unproject((x as f64, y as f64), d, src.1) else {
        return PixelMatch::Unmatched;
    };
    let Some((u, v, z)) = project(world, dst.1) else {
        return PixelMatch::Unmatched;
    };
    let Some((qy, qx)) = nearest_pixel(u, v, dst.0.height, dst.0.width) else {
        return PixelMatch::Unmatched;
    };
    let Some(dst_depth) = dst.0.at(qy, qx) else {
        return PixelMatch::Unmatched;
    };
    let diff = z - dst_depth;
    if diff.abs() < occl_thresh {
        PixelMatch::Valid {
            u,
            v,
            projected_depth: z,
        }
    } else if diff >= occl_thresh {
        PixelMatch::Occluded
    } else {
        PixelMatch::Unmatched
    }
}

pub fn compute_correspondences(
    src: (&DepthMap, &CameraView),
    dst: (&DepthMap, &CameraView),
    occl_thresh: f64,
) -> Result<CorrespondenceField, GeometryError> {
    let (h, w) = (src.0.height, src.0.width);
    if (dst.0.height, dst.0.width) != (h, w) {
        return Err(GeometryError::ResolutionMismatch(
            (h, w),
            (dst.0.height, dst.0.width),
        ));
    }
    let mut field = CorrespondenceField {
        src_index: 0,
        dst_index: 1,
        height: h,
        width: w,
        map: vec![None; h * w],
        occluded: vec![false; h * w],
        valid: vec![false; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match match_pixel(y, x, src, dst, occl_thresh) {
                PixelMatch::Valid { u, v, .. } => {
                    field.valid[i] = true;
                    field.map[i] = Some((u, v));
                }
                PixelMatch::Occluded => field.occluded[i] = true,
                PixelMatch::Unmatched => {}
            }
        }
    }
    Ok(field)
}

/// Fraction of `a`'s valid-depth pixels with a non-occluded match in `b`.
pub fn overlap_ratio(a: (&DepthMap, &CameraView), b: (&DepthMap, &CameraView)) -> f64 {
    let n_valid = a.0.n_valid();
    if n_valid == 0 || (a.0.height, a.0.width) != (b.0.height, b.0.width) {
        return 0.0;
    }
    let field = compute_correspondences(a, b, DEFAULT_OCCLUSION_THRESHOLD)
        .expect("shapes checked above");
    field.n_valid() as f64 / n_valid as f64
}

/// Anchor-centric candidate lists: for each anchor, the other views (in
/// index order) whose overlap from the anchor lies in `[lo, hi]`, capped at
/// `list_size`.
pub fn select_view_sets(
    scene: &Scene,
    range: (f64, f64),
    list_size: usize,
) -> BTreeMap<usize, Vec<usize>> {
    select_view_sets_with(scene.views.len(), range, list_size, |a, c| {
        let (va, vc) = (&scene.views[a], &scene.views[c]);
        overlap_ratio((&va.depth, &va.camera), (&vc.depth, &vc.camera))
    })
}

/// Selection over an arbitrary overlap function.
pub fn select_view_sets_with(
    n_views: usize,
    range: (f64, f64),
    list_size: usize,
    mut overlap: impl FnMut(usize, usize) -> f64,
) -> BTreeMap<usize, Vec<usize>> {
    let mut out = BTreeMap::new();
    for anchor in 0..n_views {
        let mut list = Vec::new();
        for cand in (0..n_views).filter(|&c| c != anchor) {
            if list.len() >= list_size {
                break;
            }
            let r = overlap(anchor, cand);
            if r >= range.0 && r <= range.1 {
                list.push(cand);
            }
        }
        out.insert(anchor, list);
    }
    out
}

/// Test-time candidate pool: the `window` views nearest to `anchor` by index
/// (ties broken toward lower indices), excluding the anchor.
pub fn nearby_views(anchor: usize, n_views: usize, window: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..n_views).filter(|&i| i != anchor).collect();
    others.sort_by_key(|&i| (i.abs_diff(anchor), i));
    others.truncate(window);
    others.sort_unstable();
    others
}

/// 2×3 affine map `[u', v'] = A·[u, v, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    pub m: [[f64; 3]; 2],
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2D {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    #[inline]
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * u + m[0][1] * v + m[0][2],
            m[1][0] * u + m[1][1] * v + m[1][2],
        )
    }
}

/// Least-squares affine fit of `dst ≈ A·src`, solved on centered coordinates.
pub fn fit_affine(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Affine2D, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateFit(format!(
            "{} source vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegenerateFit(format!("{} points", src.len())));
    }
    let n = src.len() as f64;
    let su = src.iter().map(|p| p.0).sum::<f64>() / n;
    let sv = src.iter().map(|p| p.1).sum::<f64>() / n;
    let du = dst.iter().map(|p| p.0).sum::<f64>() / n;
    let dv = dst.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cuu, mut cuv, mut cvv) = (0.0, 0.0, 0.0);
    let mut rhs = [[0.0; 2]; 2];
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s.0 - su, s.1 - sv);
        let (x, y) = (d.0 - du, d.1 - dv);
        cuu += a * a;
        cuv += a * b;
        cvv += b * b;
        rhs[0][0] += a * x;
        rhs[0][1] += b * x;
        rhs[1][0] += a * y;
        rhs[1][1] += b * y;
    }
    let det = cuu * cvv - cuv * cuv;
    let scale = (cuu + cvv).powi(2);
    if !(det > 1e-12 * scale) || scale == 0.0 {
        return Err(GeometryError::DegenerateFit("source points are collinear".into()));
    }
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        let (bx, by) = (rhs[r][0], rhs[r][1]);
        let a0 = (cvv * bx - cuv * by) / det;
        let a1 = (cuu * by - cuv * bx) / det;
        let mean_dst = if r == 0 { du } else { dv };
        m[r] = [a0, a1, mean_dst - a0 * su - a1 * sv];
    }
    Ok(Affine2D { m })
}

/// Bilinear sample at sub-pixel `(u, v)`; coordinates clamp to the border.
pub fn sample_bilinear(image: &Image, u: f64, v: f64, c: usize) -> f64 {
    let u = u.clamp(0.0, (image.width - 1) as f64);
    let v = v.clamp(0.0, (image.height - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(image.width - 1), (y0 + 1).min(image.height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let p = |y: usize, x: usize| image.get(y, x, c) as f64;
    (p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx) * (1.0 - fy) + (p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx) * fy
}

/// `size×size` patch whose pixel `(top+i, left+j)` samples `image` at
/// `affine(left+j, top+i)`.
pub fn warp_patch_affine(image: &Image, patch_box: (usize, usize, usize), affine: &Affine2D) -> Image {
    let (top, left, size) = patch_box;
    let mut out = Image::filled(size, size, image.channels, 0.0);
    for i in 0..size {
        for j in 0..size {
            let (u, v) = affine.apply((left + j) as f64, (top + i) as f64);
            for c in 0..image.channels {
                out.set(i, j, c, sample_bilinear(image, u, v, c) as f32);
            }
        }
    }
    out
}
