//! Pure geometry kernels: distances, sampling, canonicalization, rotations,
//! rigid transforms. Everything here is a pure function over immutable inputs.

mod chamfer;
mod pca;
mod rotation;
mod sampling;

pub use chamfer::{chamfer_distance, chamfer_distance_sum};
pub use pca::{pca_canonicalize, CanonicalFrame};
pub use rotation::{quat_conjugate, quat_mul, quat_normalize, rodrigues, RotationMatrix};
pub use sampling::{farthest_point_sample, farthest_point_sample_indices};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point in normalized object-scale coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn sub(&self, other: &Point3) -> Point3 {
        Point3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(&self, other: &Point3) -> Point3 {
        Point3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }
}

/// One part's point cloud in canonical space plus its identity within a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPointCloud {
    pub points: Vec<Point3>,
    pub part_index: usize,
}

impl PartPointCloud {
    pub fn new(points: Vec<Point3>, part_index: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("part point cloud must be non-empty"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("part point cloud contains non-finite coordinates"));
        }
        Ok(PartPointCloud { points, part_index })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A rigid 6-DoF pose: translation plus unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

pub const QUAT_NORM_TOL: f64 = 1e-6;

impl Pose6DoF {
    pub fn identity() -> Self {
        Pose6DoF {
            translation: [0.0; 3],
            quaternion: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn new(translation: [f64; 3], quaternion: [f64; 4]) -> Result<Self> {
        let pose = Pose6DoF {
            translation,
            quaternion,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let n: f64 = self.quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::invalid(format!(
                "quaternion norm {n} deviates from 1 beyond {QUAT_NORM_TOL}"
            )));
        }
        Ok(())
    }

    /// Inverse pose: conjugate quaternion, translation t' = -R^T t.
    pub fn inverse(&self) -> Pose6DoF {
        let qc = quat_conjugate(self.quaternion);
        let rt = rodrigues(qc).expect("conjugate of unit quaternion is unit");
        let t = self.translation;
        let ti = rt.apply(&Point3::new(-t[0], -t[1], -t[2]));
        Pose6DoF {
            translation: [ti.x, ti.y, ti.z],
            quaternion: qc,
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Box side lengths (max - min) per axis.
    pub fn extents(&self) -> [f64; 3] {
        [
            self.max.x - self.min.x,
            self.max.y - self.min.y,
            self.max.z - self.min.z,
        ]
    }
}

/// Componentwise min/max of a part's points.
pub fn aabb_of(p: &PartPointCloud) -> Result<Aabb> {
    if p.points.is_empty() {
        return Err(Error::invalid("aabb_of: empty point cloud"));
    }
    let mut min = p.points[0];
    let mut max = p.points[0];
    for pt in &p.points[1..] {
        min.x = min.x.min(pt.x);
        min.y = min.y.min(pt.y);
        min.z = min.z.min(pt.z);
        max.x = max.x.max(pt.x);
        max.y = max.y.max(pt.y);
        max.z = max.z.max(pt.z);
    }
    Ok(Aabb { min, max })
}

/// Rigid transform of every point: x -> R x + t. Point count and order preserved.
pub fn apply_pose(p: &PartPointCloud, pose: &Pose6DoF) -> Result<PartPointCloud> {
    pose.validate()?;
    let r = rodrigues(pose.quaternion)?;
    let t = pose.translation;
    let points = p
        .points
        .iter()
        .map(|pt| {
            let r = r.apply(pt);
            Point3::new(r.x + t[0], r.y + t[1], r.z + t[2])
        })
        .collect();
    Ok(PartPointCloud {
        points,
        part_index: p.part_index,
    })
}

/// Composition `outer . inner`: applying the result equals applying `inner`
/// first, then `outer`.
pub fn compose_pose(outer: &Pose6DoF, inner: &Pose6DoF) -> Result<Pose6DoF> {
    outer.validate()?;
    inner.validate()?;
    let r = rodrigues(outer.quaternion)?;
    let ti = r.apply(&Point3::new(
        inner.translation[0],
        inner.translation[1],
        inner.translation[2],
    ));
    let q = quat_normalize(quat_mul(outer.quaternion, inner.quaternion))
        .ok_or_else(|| Error::invalid("compose_pose: degenerate quaternion product"))?;
    Ok(Pose6DoF {
        translation: [
            ti.x + outer.translation[0],
            ti.y + outer.translation[1],
            ti.z + outer.translation[2],
        ],
        quaternion: q,
    })
}

/// Rotate points by the pose's quaternion only, dropping the translation.
pub fn apply_rotation(p: &PartPointCloud, quaternion: [f64; 4]) -> Result<PartPointCloud> {
    let r = rodrigues(quaternion)?;
    let points = p.points.iter().map(|pt| r.apply(pt)).collect();
    Ok(PartPointCloud {
        points,
        part_index: p.part_index,
    })
}
