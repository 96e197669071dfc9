//! Core 3D primitives: point clouds, pinhole cameras, rigid transforms,
//! spatial indexing, and RANSAC plane removal.

mod kdtree;
mod ransac;

pub use kdtree::SpatialIndex;
pub use ransac::ransac_remove_plane;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidValue(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidValue(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Project a camera-frame point to pixel coordinates and depth.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        Some((u, v, p_cam.z))
    }

    /// Back-project a pixel with depth to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// Rigid body transform: orthonormal rotation plus translation in meters.
///
/// Serializes as `{"rotation": [[..]; 3], "translation": [..]}` with the
/// rotation in row-major order; orthonormality is re-checked on load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        RigidTransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(d)?;
        let m = repr.rotation;
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2],
            m[1][0], m[1][1], m[1][2],
            m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(repr.translation[0], repr.translation[1], repr.translation[2]);
        RigidTransform::try_new(rotation, translation).map_err(serde::de::Error::custom)
    }
}

impl RigidTransform {
    /// Build a transform, checking `RᵀR = I` and `det R = +1` within 1e-9.
    pub fn try_new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMALITY_TOL {
            return Err(Error::InvalidValue(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::InvalidValue(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidValue("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle,
        );
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction without translating it.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 4x4 homogeneous matrix, for serialization.
    pub fn to_matrix4_row_major(&self) -> [f64; 16] {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_matrix4_row_major(values: &[f64; 16]) -> Result<Self> {
        let bottom = &values[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidValue(
                "last row of a rigid transform matrix must be [0, 0, 0, 1]".into(),
            ));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2],
            values[4], values[5], values[6],
            values[8], values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::try_new(rotation, translation)
    }
}

/// A set of 3D points in meters, world frame. All coordinates are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "point {i} has non-finite coordinates"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }
}

/// Pixel coordinates (u = column, v = row) a point was back-projected from.
pub type PixelIndex = (u32, u32);

/// Row-major depth grid in meters. Values that are NaN or <= 0 mark
/// invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthGrid {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::Dimension {
                context: "depth grid",
                expected,
                actual: data.len(),
            });
        }
        for (i, &d) in data.iter().enumerate() {
            // NaN and <= 0 both mark invalid pixels; +inf is neither.
            if d.is_infinite() && d > 0.0 {
                return Err(Error::InvalidValue(format!(
                    "depth value at flat index {i} is +inf"
                )));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn is_valid(&self, d: f32) -> bool {
        d.is_finite() && d > 0.0
    }
}

/// Back-project a depth grid to a world-frame point cloud.
///
/// Each valid pixel `(u, v, d)` maps to `pose ∘ ((u-cx)d/fx, (v-cy)d/fy, d)`.
/// Invalid pixels (NaN or <= 0) produce no point. The returned pixel indices
/// record the source `(u, v)` of every output point, in row-major pixel
/// order.
pub fn backproject_depth(
    depth: &DepthGrid,
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<(PointCloud, Vec<PixelIndex>)> {
    if depth.width() != intr.width || depth.height() != intr.height {
        return Err(Error::Dimension {
            context: "depth grid vs intrinsics",
            expected: intr.width as usize * intr.height as usize,
            actual: depth.width() as usize * depth.height() as usize,
        });
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let d = depth.get(u, v);
            if !depth.is_valid(d) {
                continue;
            }
            let p_cam = intr.unproject(u as f64, v as f64, d as f64);
            points.push(pose.apply(&p_cam));
            pixels.push((u, v));
        }
    }
    Ok((PointCloud { points }, pixels))
}

/// Apply a rigid transform to every point.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
    }
}
