//! Procedural posed RGB-D scenes: a textured back wall and floor with a few
//! boxes, viewed by cameras on a horizontal arc. Depth is exact ray casting.

use rand::Rng as _;

use super::{CameraView, DataError, DepthMap, Image, Scene, SceneView};
use crate::rng::{derived_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_views: usize,
    /// `(height, width)`
    pub resolution: (usize, usize),
    pub seed: u64,
}

type Vec3 = [f64; 3];
type Rgb = [f64; 3];

#[derive(Debug, Clone)]
struct Blob {
    center: [f64; 2],
    radius: f64,
    color: Rgb,
}

#[derive(Debug, Clone)]
struct Checker {
    cell: f64,
    colors: [Rgb; 2],
    blobs: Vec<Blob>,
}

impl Checker {
    fn color(&self, a: f64, b: f64) -> Rgb {
        for blob in &self.blobs {
            let (da, db) = (a - blob.center[0], b - blob.center[1]);
            if da * da + db * db < blob.radius * blob.radius {
                return blob.color;
            }
        }
        let parity = ((a / self.cell).floor() + (b / self.cell).floor()).rem_euclid(2.0);
        self.colors[(parity > 0.5) as usize]
    }
}

#[derive(Debug, Clone)]
struct BoxPrim {
    min: Vec3,
    max: Vec3,
    texture: Checker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Wall,
    Floor,
    Box(usize),
}

/// Scene content shared by every view of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticLayout {
    /// Back wall plane `z = wall_z`.
    pub wall_z: f64,
    /// Floor plane `y = floor_y` (world +y points down).
    pub floor_y: f64,
    wall_tex: Checker,
    floor_tex: Checker,
    boxes: Vec<BoxPrim>,
    pub look_at: Vec3,
    pub radius: f64,
    pub arc_step: f64,
    pub camera_lift: f64,
}

const SUPERSAMPLE: usize = 4;

fn quantize(c: Rgb) -> Rgb {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn random_color(rng: &mut Rng) -> Rgb {
    quantize([rng.random(), rng.random(), rng.random()])
}

fn random_checker(rng: &mut Rng, cell: f64, n_blobs: usize, extent: [f64; 4]) -> Checker {
    let a = random_color(rng);
    // second tone: a visibly different color
    let mut b = random_color(rng);
    while (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() < 0.6 {
        b = random_color(rng);
    }
    let blobs = (0..n_blobs)
        .map(|_| Blob {
            center: [
                rng.random_range(extent[0]..extent[1]),
                rng.random_range(extent[2]..extent[3]),
            ],
            radius: rng.random_range(0.15..0.5),
            color: random_color(rng),
        })
        .collect();
    Checker {
        cell,
        colors: [a, b],
        blobs,
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl SyntheticLayout {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = derived_rng(seed, 0x5CE7E);
        let wall_z = 5.5 + rng.random_range(-0.3..0.3);
        let floor_y = 1.3;
        let wall_tex = random_checker(&mut rng, 0.3, 8, [-4.0, 4.0, -2.0, 1.3]);
        let floor_tex = random_checker(&mut rng, 0.4, 3, [-3.0, 3.0, 1.0, 5.0]);
        let boxes = (0..3)
            .map(|_| {
                let cx = rng.random_range(-1.3..1.3);
                let cz = rng.random_range(2.7..4.3);
                let hx = rng.random_range(0.25..0.5);
                let hz = rng.random_range(0.25..0.5);
                let height = rng.random_range(0.5..1.4);
                BoxPrim {
                    min: [cx - hx, floor_y - height, cz - hz],
                    max: [cx + hx, floor_y, cz + hz],
                    texture: random_checker(&mut rng, 0.15, 1, [-1.0, 1.0, -1.0, 1.0]),
                }
            })
            .collect();
        SyntheticLayout {
            wall_z,
            floor_y,
            wall_tex,
            floor_tex,
            boxes,
            look_at: [0.0, 0.3, 3.4],
            radius: 3.4,
            arc_step: 0.16,
            camera_lift: -0.35,
        }
    }

    /// Camera `index` of `n_views` on the arc around `look_at`.
    pub fn camera(&self, index: usize, n_views: usize, resolution: (usize, usize)) -> CameraView {
        let (h, w) = resolution;
        let theta = (index as f64 - (n_views as f64 - 1.0) / 2.0) * self.arc_step;
        let center = [
            self.look_at[0] + self.radius * theta.sin(),
            self.look_at[1] + self.camera_lift,
            self.look_at[2] - self.radius * theta.cos(),
        ];
        let forward = normalize(sub(self.look_at, center));
        let right = normalize(cross([0.0, 1.0, 0.0], forward));
        let down = cross(forward, right);
        let rows = [right, down, forward];
        let mut m = [[0.0; 4]; 4];
        for (i, r) in rows.iter().enumerate() {
            m[i][..3].copy_from_slice(r);
            m[i][3] = -(r[0] * center[0] + r[1] * center[1] + r[2] * center[2]);
        }
        m[3][3] = 1.0;
        // 60 degree horizontal field of view
        let fx = (w as f64 / 2.0) / (30f64.to_radians()).tan();
        CameraView::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, resolution)
            .with_pose(m)
    }

    /// Nearest hit along `origin + t·dir` for `t > 0`, with its color.
    fn trace(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Rgb)> {
        self.trace_surface(origin, dir).map(|(t, c, _)| (t, c))
    }

    fn trace_surface(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Rgb, Surface)> {
        let mut best: Option<(f64, Rgb, Surface)> = None;
        let mut consider = |t: f64, color: &dyn Fn() -> Rgb, surface: Surface| {
            if t > 1e-9 && best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, color(), surface));
            }
        };
        if dir[2].abs() > 1e-12 {
            let t = (self.wall_z - origin[2]) / dir[2];
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
            consider(t, &|| self.wall_tex.color(p[0], p[1]), Surface::Wall);
        }
        if dir[1].abs() > 1e-12 {
            let t = (self.floor_y - origin[1]) / dir[1];
            let p = [origin[0] + t * dir[0], origin[2] + t * dir[2]];
            consider(t, &|| self.floor_tex.color(p[0], p[1]), Surface::Floor);
        }
        for (bi, b) in self.boxes.iter().enumerate() {
            if let Some((t, axis)) = slab_hit(origin, dir, b.min, b.max) {
                let p = [
                    origin[0] + t * dir[0],
                    origin[1] + t * dir[1],
                    origin[2] + t * dir[2],
                ];
                // face coordinates: the two axes spanning the hit face
                let (a, c) = match axis {
                    0 => (p[1], p[2]),
                    1 => (p[0], p[2]),
                    _ => (p[0], p[1]),
                };
                consider(t, &|| {
                    let base = b.texture.color(a, c);
                    let shade = [1.0, 0.85, 0.7][axis];
                    quantize(base.map(|v| v * shade))
                }, Surface::Box(bi));
            }
        }
        best
    }

    /// World-space ray through pixel `(u, v)` with camera-frame direction
    /// `((u-cx)/fx, (v-cy)/fy, 1)`, so the hit parameter equals depth.
    fn pixel_ray(cam: &CameraView, u: f64, v: f64) -> (Vec3, Vec3) {
        let d = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
        let r = cam.rotation();
        let mut dir = [0.0; 3];
        for (i, di) in dir.iter_mut().enumerate() {
            *di = r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2];
        }
        (cam.center(), dir)
    }

    /// Which primitive is seen at sub-pixel `(u, v)`.
    pub fn surface_at(&self, cam: &CameraView, u: f64, v: f64) -> Option<Surface> {
        let (o, d) = Self::pixel_ray(cam, u, v);
        self.trace_surface(o, d).map(|(_, _, s)| s)
    }

    /// Exact depth of the first surface seen at sub-pixel `(u, v)`.
    pub fn ray_depth(&self, cam: &CameraView, u: f64, v: f64) -> Option<f64> {
        let (o, d) = Self::pixel_ray(cam, u, v);
        self.trace(o, d).map(|(t, _)| t)
    }

    /// Box-filtered color over a 4×4 sub-pixel grid; depth from the pixel center.
    pub fn render(&self, cam: &CameraView) -> (Image, DepthMap) {
        let (h, w) = cam.image_size;
        let mut image = Image::filled(h, w, 3, 0.0);
        let mut depth = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (o, d) = Self::pixel_ray(cam, x as f64, y as f64);
                if let Some((t, _)) = self.trace(o, d) {
                    depth[y * w + x] = t as f32;
                }
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let off = |s: usize| (s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let (o, d) = Self::pixel_ray(cam, x as f64 + off(sx), y as f64 + off(sy));
                        if let Some((_, color)) = self.trace(o, d) {
                            (0..3).for_each(|c| acc[c] += color[c]);
                        }
                    }
                }
                let color = quantize(acc.map(|v| v / (SUPERSAMPLE * SUPERSAMPLE) as f64));
                for (c, v) in color.iter().enumerate() {
                    image.set(y, x, c, *v as f32);
                }
            }
        }
        (image, DepthMap::from_values(h, w, depth))
    }
}

/// Ray/AABB entry point and the axis of the entered face.
fn slab_hit(o: Vec3, d: Vec3, min: Vec3, max: Vec3) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            if o[i] < min[i] || o[i] > max[i] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = i;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis))
}

pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> Result<Scene, DataError> {
    if spec.n_views < 2 {
        return Err(DataError::Invalid(format!("n_views {} < 2", spec.n_views)));
    }
    let (h, w) = spec.resolution;
    if h < 8 || w < 8 {
        return Err(DataError::Invalid(format!("resolution {h}x{w} below 8x8")));
    }
    let layout = SyntheticLayout::from_seed(spec.seed);
    let views = (0..spec.n_views)
        .map(|i| {
            let camera = layout.camera(i, spec.n_views, spec.resolution);
            let (image, depth) = layout.render(&camera);
            SceneView { image, depth, camera }
        })
        .collect();
    Ok(Scene {
        scene_id: format!("synthetic_{:016x}", spec.seed),
        views,
    })
}
