//! Posed RGB-D sequences: on-disk loading and pinhole projection.
//!
//! A scene directory looks like
//!
//! ```text
//! <id>/color/<index>.png|jpg
//! <id>/depth/<index>.png      16-bit, millimeters, 0 = invalid
//! <id>/pose/<index>.txt       4x4 row-major camera-to-world
//! <id>/intrinsics.json        {fx, fy, cx, cy, width, height}
//! <id>/meta.json              optional
//! ```
//!
//! Pixel `(u, v)` maps to the ray through `(u, v)` exactly; no half-pixel
//! offset is applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality and determinant tolerance for pose rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("frame {frame:?} is missing {asset}")]
    MissingAsset { frame: Option<u32>, asset: String },
    #[error("malformed pose for frame {frame}: {reason}")]
    MalformedPose { frame: u32, reason: String },
    #[error("dimension mismatch in frame {frame:?}: {reason}")]
    DimensionMismatch { frame: Option<u32>, reason: String },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("scene {0} has no frames")]
    NoFrames(String),
    #[error("failed to decode {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("depth must be positive and finite, got {0}")]
    ZeroDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds {
        u: u32,
        v: u32,
        width: u32,
        height: u32,
    },
    #[error("point is behind the camera (camera-space z = {0})")]
    BehindCamera(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, SceneError> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(SceneError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn in_bounds(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Checks `RᵀR = I` and `det R = 1` within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, String> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if !(ortho_err <= ROTATION_TOLERANCE) {
            return Err(format!("rotation is not orthonormal (max |RᵀR - I| = {ortho_err:e})"));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(format!("rotation determinant is {det}, expected 1"));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err("translation is not finite".into());
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, String> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        if bottom
            .iter()
            .zip(expected)
            .any(|(a, b)| !((a - b).abs() <= ROTATION_TOLERANCE))
        {
            return Err(format!("last row is {bottom:?}, expected [0, 0, 0, 1]"));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::new(rotation, translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera coordinates to world coordinates.
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// World coordinates to camera coordinates.
    pub fn inverse_transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }
}

/// Depth in meters, row-major. Zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (width as usize) * (height as usize));
        let data = data
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        DepthMap {
            width,
            height,
            data,
        }
    }

    pub fn from_millimeters(width: u32, height: u32, raw: &[u16]) -> Self {
        DepthMap::new(
            width,
            height,
            raw.iter().map(|&mm| mm as f64 / 1000.0).collect(),
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[(v as usize) * (self.width as usize) + u as usize]
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.get(u, v) > 0.0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&d| d > 0.0).collect()
    }

    /// Nearest-neighbor resampling; invalid pixels stay invalid.
    pub fn resample_nearest(&self, width: u32, height: u32) -> DepthMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity((width as usize) * (height as usize));
        for v in 0..height {
            let sv = (((v as f64 + 0.5) * self.height as f64 / height as f64) as u32).min(self.height - 1);
            for u in 0..width {
                let su = (((u as f64 + 0.5) * self.width as f64 / width as f64) as u32).min(self.width - 1);
                data.push(self.get(su, sv));
            }
        }
        DepthMap {
            width,
            height,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub index: u32,
    pub color: RgbImage,
    pub depth: DepthMap,
    pub camera: CameraModel,
    pub pose: Pose,
}

impl Frame {
    pub fn valid_depth_mask(&self) -> Vec<bool> {
        self.depth.valid_mask()
    }
}

#[derive(Debug, Clone)]
pub struct SceneSequence {
    pub scene_id: String,
    pub frames: Vec<Frame>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl SceneSequence {
    pub fn frame(&self, index: u32) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|i| &self.frames[i])
    }
}

/// Back-projects pixel `(u, v)` at `depth` meters into world coordinates.
pub fn unproject(
    camera: &CameraModel,
    pose: &Pose,
    (u, v): (u32, u32),
    depth: f64,
) -> Result<Point3<f64>, ProjectionError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(ProjectionError::ZeroDepth(depth));
    }
    if !camera.in_bounds(u, v) {
        return Err(ProjectionError::OutOfBounds {
            u,
            v,
            width: camera.width,
            height: camera.height,
        });
    }
    let x = (u as f64 - camera.cx) * depth / camera.fx;
    let y = (v as f64 - camera.cy) * depth / camera.fy;
    Ok(pose.transform_point(&Point3::new(x, y, depth)))
}

/// Continuous pixel coordinates plus camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(camera: &CameraModel, pose: &Pose, point: &Point3<f64>) -> Result<Projection, ProjectionError> {
    let pc = pose.inverse_transform_point(point);
    if !(pc.z > 0.0) {
        return Err(ProjectionError::BehindCamera(pc.z));
    }
    Ok(Projection {
        u: camera.fx * pc.x / pc.z + camera.cx,
        v: camera.fy * pc.y / pc.z + camera.cy,
        depth: pc.z,
    })
}

#[derive(Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

fn indexed_files(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<u32, PathBuf>, SceneError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let Some(ext) = ext else { continue };
        if !extensions.contains(&ext.as_str()) {
            continue;
        }
        if let Some(index) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
        {
            out.insert(index, path);
        }
    }
    Ok(out)
}

pub fn read_pose_file(path: &Path, frame: u32) -> Result<Pose, SceneError> {
    let text = fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| SceneError::MalformedPose {
            frame,
            reason: format!("unparsable number: {e}"),
        })?;
    if values.len() != 16 {
        return Err(SceneError::MalformedPose {
            frame,
            reason: format!("expected 16 values, found {}", values.len()),
        });
    }
    let m = Matrix4::from_row_slice(&values);
    Pose::from_matrix(&m).map_err(|reason| SceneError::MalformedPose { frame, reason })
}

pub fn write_pose_file(path: &Path, pose: &Pose) -> std::io::Result<()> {
    let m = pose.to_matrix();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)
}

fn read_depth(path: &Path, frame: u32) -> Result<DepthMap, SceneError> {
    let img = image::open(path).map_err(|source| SceneError::Image {
        path: path.to_owned(),
        source,
    })?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(DepthMap::from_millimeters(w, h, buf.as_raw()))
        }
        other => Err(SceneError::DimensionMismatch {
            frame: Some(frame),
            reason: format!("depth image must be 16-bit single channel, found {:?}", other.color()),
        }),
    }
}

/// Loads a scene directory. The scene id is the directory name.
pub fn load_scene(path: &Path) -> Result<SceneSequence, SceneError> {
    let scene_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_owned();

    let intr_path = path.join("intrinsics.json");
    if !intr_path.is_file() {
        return Err(SceneError::MissingAsset {
            frame: None,
            asset: "intrinsics.json".into(),
        });
    }
    let intr: IntrinsicsFile =
        serde_json::from_slice(&fs::read(&intr_path)?).map_err(|e| SceneError::Parse {
            path: intr_path.clone(),
            reason: e.to_string(),
        })?;
    let camera = CameraModel::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)?;

    let metadata = match fs::read(path.join("meta.json")) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| SceneError::Parse {
            path: path.join("meta.json"),
            reason: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(e.into()),
    };

    let colors = indexed_files(&path.join("color"), &["png", "jpg", "jpeg"])?;
    let depths = indexed_files(&path.join("depth"), &["png"])?;
    let poses = indexed_files(&path.join("pose"), &["txt"])?;

    let indices: BTreeSet<u32> = colors
        .keys()
        .chain(depths.keys())
        .chain(poses.keys())
        .copied()
        .collect();
    if indices.is_empty() {
        return Err(SceneError::NoFrames(scene_id));
    }

    let mut frames = Vec::with_capacity(indices.len());
    for index in indices {
        let missing = |asset: &str| SceneError::MissingAsset {
            frame: Some(index),
            asset: asset.into(),
        };
        let color_path = colors.get(&index).ok_or_else(|| missing("color"))?;
        let depth_path = depths.get(&index).ok_or_else(|| missing("depth"))?;
        let pose_path = poses.get(&index).ok_or_else(|| missing("pose"))?;

        let color = image::open(color_path)
            .map_err(|source| SceneError::Image {
                path: color_path.clone(),
                source,
            })?
            .to_rgb8();
        if color.dimensions() != (camera.width, camera.height) {
            return Err(SceneError::DimensionMismatch {
                frame: Some(index),
                reason: format!(
                    "color is {:?} but intrinsics say {}x{}",
                    color.dimensions(),
                    camera.width,
                    camera.height
                ),
            });
        }
        let depth = read_depth(depth_path, index)?.resample_nearest(camera.width, camera.height);
        let pose = read_pose_file(pose_path, index)?;
        frames.push(Frame {
            index,
            color,
            depth,
            camera,
            pose,
        });
    }

    Ok(SceneSequence {
        scene_id,
        frames,
        metadata,
    })
}
