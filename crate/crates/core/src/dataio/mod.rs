//! Scene data: images, depth maps, pinhole cameras, and the on-disk layout
//!
//! ```text
//! scene_id/images/0000.png      8-bit gray or RGB
//! scene_id/depth/0000.fdepth    "FDEPTH", u32 h, u32 w, h·w f32 (LE)
//! scene_id/poses.json           [{fx, fy, cx, cy, world_to_camera: [16 reals, row-major]}]
//! ```
//!
//! Camera frame: +z forward, +x right, +y down. Depth is camera-frame z in
//! meters; invalid depth is written as 0.

mod synthetic;

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{generate_synthetic_scene, Surface, SyntheticLayout, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("poses not found: {0}")]
    PosesNotFound(PathBuf),
    #[error("shape mismatch at {path}: {detail}")]
    ShapeMismatch { path: PathBuf, detail: String },
    #[error("non-rigid pose for view {view} in {path}")]
    NonRigidPose { path: PathBuf, view: usize },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major, channel-last image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, DataError> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Invalid(format!("{channels} channels")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(DataError::Invalid(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(DataError::Invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(y, x, c)` and clipping to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luma for RGB (Rec. 601 weights), identity for gray.
    pub fn to_gray(&self) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|i| {
                if self.channels == 1 {
                    self.data[i] as f64
                } else {
                    let p = &self.data[i * 3..i * 3 + 3];
                    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
                }
            })
            .collect()
    }

    /// Round-half-up quantization to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Self {
        Image {
            height,
            width,
            channels,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Snaps every value onto the 8-bit grid.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Image::from_u8(self.height, self.width, self.channels, &bytes)
    }

    /// `size×size` crop; panics if the box leaves the image.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Image {
        assert!(top + size <= self.height && left + size <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in top..top + size {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + size * self.channels]);
        }
        Image {
            height: size,
            width: size,
            channels: self.channels,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel metric depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Validity is derived: finite and strictly positive.
    pub fn from_values(height: usize, width: usize, depth: Vec<f32>) -> Self {
        assert_eq!(depth.len(), height * width, "depth buffer size");
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        DepthMap {
            height,
            width,
            depth,
            valid,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i] as f64)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Pinhole intrinsics plus a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: [[f64; 4]; 4],
    pub image_size: (usize, usize),
}

impl CameraView {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_size: (usize, usize)) -> Self {
        CameraView {
            fx,
            fy,
            cx,
            cy,
            world_to_camera: IDENTITY4,
            image_size,
        }
    }

    pub fn with_pose(mut self, world_to_camera: [[f64; 4]; 4]) -> Self {
        self.world_to_camera = world_to_camera;
        self
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]);
        }
        c
    }

    /// Checks positive focal lengths and a proper rotation block.
    pub fn is_rigid(&self) -> bool {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return false;
        }
        let m = &self.world_to_camera;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return false;
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return false;
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return false;
                }
            }
        }
        det3(&r) > 0.0
    }
}

pub const IDENTITY4: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub image: Image,
    pub depth: DepthMap,
    pub camera: CameraView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub views: Vec<SceneView>,
}

impl Scene {
    pub fn resolution(&self) -> (usize, usize) {
        let v = &self.views[0].image;
        (v.height, v.width)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.views.len() < 2 {
            return Err(DataError::Invalid(format!(
                "scene {} has {} views, need at least 2",
                self.scene_id,
                self.views.len()
            )));
        }
        let (h, w) = self.resolution();
        if h < 8 || w < 8 {
            return Err(DataError::Invalid(format!("resolution {h}x{w} below 8x8")));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.image.height != h || v.image.width != w {
                return Err(DataError::Invalid(format!("view {i} resolution differs")));
            }
            if v.depth.height != h || v.depth.width != w {
                return Err(DataError::Invalid(format!("view {i} depth shape differs")));
            }
            if !v.camera.is_rigid() {
                return Err(DataError::Invalid(format!("view {i} pose is not rigid")));
            }
        }
        Ok(())
    }

    /// Gathers the listed views into a set with geometry attached.
    pub fn view_set(&self, indices: &[usize]) -> Result<ViewSet, DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for &i in indices {
            if i >= self.views.len() {
                return Err(DataError::Invalid(format!("view index {i} out of range")));
            }
            if !seen.insert(i) {
                return Err(DataError::Invalid(format!("duplicate view index {i}")));
            }
        }
        let vs = ViewSet {
            scene_id: self.scene_id.clone(),
            view_indices: indices.to_vec(),
            images: indices.iter().map(|&i| self.views[i].image.clone()).collect(),
            depths: Some(indices.iter().map(|&i| self.views[i].depth.clone()).collect()),
            cameras: Some(indices.iter().map(|&i| self.views[i].camera.clone()).collect()),
        };
        vs.validate()?;
        Ok(vs)
    }
}

/// N same-shape images of one scene, optionally with depth and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub scene_id: String,
    pub view_indices: Vec<usize>,
    pub images: Vec<Image>,
    pub depths: Option<Vec<DepthMap>>,
    pub cameras: Option<Vec<CameraView>>,
}

pub const MAX_SET_VIEWS: usize = 16;

impl ViewSet {
    pub fn from_images(scene_id: &str, images: Vec<Image>) -> Result<Self, DataError> {
        let vs = ViewSet {
            scene_id: scene_id.to_string(),
            view_indices: (0..images.len()).collect(),
            images,
            depths: None,
            cameras: None,
        };
        vs.validate()?;
        Ok(vs)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.images.len();
        if n == 0 || n > MAX_SET_VIEWS {
            return Err(DataError::Invalid(format!("view set size {n} outside 1..=16")));
        }
        if self.view_indices.len() != n {
            return Err(DataError::Invalid("view_indices length differs".into()));
        }
        let mut idx = self.view_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        if idx.len() != n {
            return Err(DataError::Invalid("view indices are not unique".into()));
        }
        if self.images.iter().any(|im| !im.same_shape(&self.images[0])) {
            return Err(DataError::Invalid("images in a set differ in shape".into()));
        }
        if self.images[0].height < 8 || self.images[0].width < 8 {
            return Err(DataError::Invalid("images smaller than 8x8".into()));
        }
        if self.depths.as_ref().is_some_and(|d| d.len() != n)
            || self.cameras.as_ref().is_some_and(|c| c.len() != n)
        {
            return Err(DataError::Invalid("geometry not aligned with images".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: Vec<f64>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Image, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let image = match info.color_type {
        png::ColorType::Grayscale => Image::from_u8(h, w, 1, bytes),
        png::ColorType::Rgb => Image::from_u8(h, w, 3, bytes),
        png::ColorType::Rgba => {
            let rgb: Vec<u8> = bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
            Image::from_u8(h, w, 3, &rgb)
        }
        png::ColorType::GrayscaleAlpha => {
            let g: Vec<u8> = bytes.chunks(2).map(|p| p[0]).collect();
            Image::from_u8(h, w, 1, &g)
        }
        other => {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    Ok(image)
}

pub fn write_png(path: &Path, image: &Image) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(if image.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| DataError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(fmt)?;
    writer.write_image_data(&image.to_u8()).map_err(fmt)?;
    writer.finish().map_err(fmt)?;
    Ok(())
}

const DEPTH_MAGIC: &[u8; 6] = b"FDEPTH";

pub fn read_depth(path: &Path) -> Result<DepthMap, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |detail: &str| DataError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 14 || &bytes[..6] != DEPTH_MAGIC {
        return Err(bad("missing FDEPTH header"));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    if body.len() != h * w * 4 {
        return Err(bad("payload size does not match header"));
    }
    let depth = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DepthMap::from_values(h, w, depth))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(14 + depth.depth.len() * 4);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for (d, ok) in depth.depth.iter().zip(&depth.valid) {
        let v = if *ok { *d } else { 0.0 };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(io_err(path))
}

pub fn load_scene(path: &Path) -> Result<Scene, DataError> {
    let poses_path = path.join("poses.json");
    if !poses_path.is_file() {
        return Err(DataError::PosesNotFound(poses_path));
    }
    let text = fs::read_to_string(&poses_path).map_err(io_err(&poses_path))?;
    let poses: Vec<PoseRecord> = serde_json::from_str(&text).map_err(|e| DataError::Format {
        path: poses_path.clone(),
        detail: e.to_string(),
    })?;
    let images = sorted_files(&path.join("images"), "png")?;
    let depths = sorted_files(&path.join("depth"), "fdepth")?;
    if images.len() != poses.len() || depths.len() != poses.len() {
        return Err(DataError::ShapeMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "{} images, {} depth maps, {} poses",
                images.len(),
                depths.len(),
                poses.len()
            ),
        });
    }
    let mut views = Vec::with_capacity(poses.len());
    for (i, ((ip, dp), pose)) in images.iter().zip(&depths).zip(&poses).enumerate() {
        let image = read_png(ip)?;
        let depth = read_depth(dp)?;
        if depth.height != image.height || depth.width != image.width {
            return Err(DataError::ShapeMismatch {
                path: dp.clone(),
                detail: format!(
                    "depth {}x{} vs image {}x{}",
                    depth.height, depth.width, image.height, image.width
                ),
            });
        }
        if pose.world_to_camera.len() != 16 {
            return Err(DataError::Format {
                path: poses_path.clone(),
                detail: format!("view {i}: world_to_camera needs 16 values"),
            });
        }
        let mut m = [[0.0; 4]; 4];
        for (k, v) in pose.world_to_camera.iter().enumerate() {
            m[k / 4][k % 4] = *v;
        }
        let camera = CameraView {
            fx: pose.fx,
            fy: pose.fy,
            cx: pose.cx,
            cy: pose.cy,
            world_to_camera: m,
            image_size: (image.height, image.width),
        };
        if !camera.is_rigid() {
            return Err(DataError::NonRigidPose {
                path: poses_path.clone(),
                view: i,
            });
        }
        views.push(SceneView { image, depth, camera });
    }
    let scene_id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let scene = Scene { scene_id, views };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DataError> {
    let images_dir = path.join("images");
    let depth_dir = path.join("depth");
    for dir in [&images_dir, &depth_dir] {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut poses = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        write_png(&images_dir.join(format!("{i:04}.png")), &v.image)?;
        write_depth(&depth_dir.join(format!("{i:04}.fdepth")), &v.depth)?;
        poses.push(PoseRecord {
            fx: v.camera.fx,
            fy: v.camera.fy,
            cx: v.camera.cx,
            cy: v.camera.cy,
            world_to_camera: v.camera.world_to_camera.iter().flatten().copied().collect(),
        });
    }
    let poses_path = path.join("poses.json");
    let text = serde_json::to_string_pretty(&poses).expect("poses serialize");
    fs::write(&poses_path, text).map_err(io_err(&poses_path))
}

/// Writes images as `%04d.png` into `dir`, creating it.
pub fn save_images(dir: &Path, images: &[Image], indices: &[usize]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (im, i) in images.iter().zip(indices) {
        write_png(&dir.join(format!("{i:04}.png")), im)?;
    }
    Ok(())
}

/// Reads every `%04d.png` in `dir`, returning `(index, image)` sorted by name.
pub fn load_indexed_images(dir: &Path) -> Result<Vec<(usize, Image)>, DataError> {
    let mut out = Vec::new();
    for p in sorted_files(dir, "png")? {
        let idx = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| DataError::Format {
                path: p.clone(),
                detail: "file name is not a view index".into(),
            })?;
        out.push((idx, read_png(&p)?));
    }
    Ok(out)
}

/// Reads every `%04d.fdepth` in `dir`, returning `(index, depth)`.
pub fn load_indexed_depths(dir: &Path) -> Result<Vec<(usize, DepthMap)>, DataError> {
    let mut out = Vec::new();
    for p in sorted_files(dir, "fdepth")? {
        let idx = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| DataError::Format {
                path: p.clone(),
                detail: "file name is not a view index".into(),
            })?;
        out.push((idx, read_depth(&p)?));
    }
    Ok(out)
}
