//! Camera poses and similarity transforms.
//!
//! Cameras are stored camera-to-world. A camera looks along +Z of its own
//! frame and image up is -Y, so the world-frame forward vector is the third
//! column of the rotation and the world-frame up vector is the negated
//! second column.

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rotation = UnitQuaternion<f64>;

const UNIT_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
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
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    /// The same field of view at a different raster size.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }
}

/// A calibrated camera, camera-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub id: String,
    pub rotation: Rotation,
    pub center: Vec3,
    pub intrinsics: CameraIntrinsics,
}

impl CameraPose {
    pub fn new(
        id: impl Into<String>,
        rotation: Rotation,
        center: Vec3,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        Self {
            id: id.into(),
            rotation,
            center,
            intrinsics,
        }
    }

    /// Camera placed at `center` looking at `target`, with image up as close
    /// to `up_hint` as the viewing direction allows.
    pub fn look_at(
        id: impl Into<String>,
        center: Vec3,
        target: Vec3,
        up_hint: Vec3,
        intrinsics: CameraIntrinsics,
    ) -> Self {
        let forward = (target - center).normalize();
        let mut up = up_hint - forward * up_hint.dot(&forward);
        if up.norm() < 1e-9 {
            up = perpendicular_to(&forward);
        }
        let up = up.normalize();
        let y = -up;
        let x = y.cross(&forward);
        let m = Matrix3::from_columns(&[x, y, forward]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self::new(id, rotation, center, intrinsics)
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    pub fn up(&self) -> Vec3 {
        self.rotation * -Vec3::y()
    }

    pub fn right(&self) -> Vec3 {
        self.rotation * Vec3::x()
    }

    /// World point expressed in this camera's frame.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(p - self.center))
    }
}

/// Unit vector orthogonal to `v`: `v` crossed with the standard basis vector
/// least aligned with it. Ties pick the lower axis index.
pub fn perpendicular_to(v: &Vec3) -> Vec3 {
    let a = v.abs();
    let e = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    v.cross(&e).normalize()
}

/// An ordered set of cameras sharing one coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub label: String,
    poses: Vec<CameraPose>,
    index: HashMap<String, usize>,
}

impl PoseSet {
    pub fn new(label: impl Into<String>, poses: Vec<CameraPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("pose set must not be empty"));
        }
        let mut index = HashMap::with_capacity(poses.len());
        for (i, p) in poses.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate camera id {}", p.id)));
            }
        }
        Ok(Self {
            label: label.into(),
            poses,
            index,
        })
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CameraPose> {
        self.index.get(id).map(|&i| &self.poses[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.poses.iter().map(|p| p.id.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CameraPose> {
        self.poses.iter()
    }

    /// Cameras with the given ids, in the given order.
    pub fn subset<'a>(
        &self,
        label: impl Into<String>,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<PoseSet> {
        let poses = ids
            .into_iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::IdMismatch(format!("{id} not in {}", self.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        PoseSet::new(label, poses)
    }

    /// Cameras whose id satisfies `keep`, original order.
    pub fn filter(&self, label: impl Into<String>, keep: impl Fn(&str) -> bool) -> Result<PoseSet> {
        let poses = self.poses.iter().filter(|p| keep(&p.id)).cloned().collect();
        PoseSet::new(label, poses)
    }

    pub fn transformed(&self, t: &Sim3) -> PoseSet {
        PoseSet {
            label: self.label.clone(),
            poses: self.poses.iter().map(|p| t.apply_pose(p)).collect(),
            index: self.index.clone(),
        }
    }

    pub fn relabeled(mut self, label: impl Into<String>) -> PoseSet {
        self.label = label.into();
        self
    }

    /// Concatenation; fails on shared ids.
    pub fn merged(&self, other: &PoseSet, label: impl Into<String>) -> Result<PoseSet> {
        let mut poses = self.poses.clone();
        poses.extend(other.poses.iter().cloned());
        PoseSet::new(label, poses)
    }

    /// Largest distance between two camera centers.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.poses.iter().enumerate() {
            for b in &self.poses[i + 1..] {
                d = d.max((a.center - b.center).norm());
            }
        }
        d
    }
}

impl<'a> IntoIterator for &'a PoseSet {
    type Item = &'a CameraPose;
    type IntoIter = std::slice::Iter<'a, CameraPose>;
    fn into_iter(self) -> Self::IntoIter {
        self.poses.iter()
    }
}

/// Similarity transform acting as `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn new(scale: f64, rotation: Rotation, translation: Vec3) -> Self {
        debug_assert!(scale > 0.0);
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, Rotation::identity(), Vec3::zeros())
    }

    pub fn rigid(rotation: Rotation, translation: Vec3) -> Self {
        Self::new(1.0, rotation, translation)
    }

    pub fn from_scale(scale: f64) -> Self {
        Self::new(scale, Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(1.0, Rotation::identity(), translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Sim3 {
            scale: self.scale * other.scale,
            rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Sim3 {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -inv_scale * (inv_rot * self.translation),
        }
    }

    /// Moves the camera center and rotates its orientation; intrinsics are
    /// untouched and scale never affects orientation.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        let mut rotation = self.rotation * pose.rotation;
        rotation.renormalize();
        CameraPose {
            id: pose.id.clone(),
            rotation,
            center: self.transform_point(&pose.center),
            intrinsics: pose.intrinsics,
        }
    }

    pub fn rotation_angle_deg(&self) -> f64 {
        self.rotation.angle().to_degrees()
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && (self.rotation.as_ref().norm() - 1.0).abs() < UNIT_TOL
            && self.translation.iter().all(|v| v.is_finite())
    }
}

fn check_unit(pose: &CameraPose) -> Result<()> {
    if (pose.rotation.as_ref().norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::DegenerateAlignment("camera quaternion is not unit"));
    }
    Ok(())
}

/// Rigid transform that moves `src` onto `tgt`: centers coincide and forward
/// vectors agree. The roll about the forward axis is chosen so the moved
/// source up vector is as close as possible to the target up vector.
pub fn align_pose_pair(src: &CameraPose, tgt: &CameraPose) -> Result<Sim3> {
    check_unit(src)?;
    check_unit(tgt)?;
    let fs = src.forward();
    let ft = tgt.forward();

    let swing = UnitQuaternion::rotation_between(&fs, &ft).unwrap_or_else(|| {
        // anti-parallel: any axis orthogonal to fs works
        let axis = Unit::new_normalize(perpendicular_to(&fs));
        UnitQuaternion::from_axis_angle(&axis, std::f64::consts::PI)
    });

    let up_swung = swing * src.up();
    let up_tgt = tgt.up();
    let roll = ft
        .dot(&up_swung.cross(&up_tgt))
        .atan2(up_swung.dot(&up_tgt));
    let twist = UnitQuaternion::from_axis_angle(&Unit::new_normalize(ft), roll);

    let mut rotation = twist * swing;
    rotation.renormalize();
    let translation = tgt.center - rotation * src.center;
    Ok(Sim3::rigid(rotation, translation))
}

/// Ratio of target to source center distances for a corresponding pair.
/// Fails when the source centers are closer than `eps_dist`.
pub fn pair_scale(
    src1: &CameraPose,
    src2: &CameraPose,
    tgt1: &CameraPose,
    tgt2: &CameraPose,
    eps_dist: f64,
) -> Result<f64> {
    let ds = (src1.center - src2.center).norm();
    if ds <= eps_dist {
        return Err(Error::DegeneratePair(src1.id.clone(), src2.id.clone()));
    }
    Ok((tgt1.center - tgt2.center).norm() / ds)
}

/// Angle in degrees between two vectors, robust near 0 and 180.
pub fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}
