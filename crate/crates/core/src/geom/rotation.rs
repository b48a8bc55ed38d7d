use crate::error::{Error, Result};
use crate::geom::{Point3, QUAT_NORM_TOL};
use serde::{Deserialize, Serialize};

/// A 3x3 rotation matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let m = &self.0;
        Point3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
        )
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max absolute entry of M^T M - I.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = &self.0;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn rodrigues(q: [f64; 4]) -> Result<RotationMatrix> {
    let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::invalid(format!(
            "rodrigues: quaternion norm {n} not within {QUAT_NORM_TOL} of 1"
        )));
    }
    let [r0, r1, r2, r3] = q;
    Ok(RotationMatrix([
        [
            1.0 - 2.0 * r2 * r2 - 2.0 * r3 * r3,
            2.0 * r1 * r2 - 2.0 * r0 * r3,
            2.0 * r1 * r3 + 2.0 * r0 * r2,
        ],
        [
            2.0 * r1 * r2 + 2.0 * r0 * r3,
            1.0 - 2.0 * r1 * r1 - 2.0 * r3 * r3,
            2.0 * r2 * r3 - 2.0 * r0 * r1,
        ],
        [
            2.0 * r1 * r3 - 2.0 * r0 * r2,
            2.0 * r2 * r3 + 2.0 * r0 * r1,
            1.0 - 2.0 * r1 * r1 - 2.0 * r2 * r2,
        ],
    ]))
}

pub fn quat_conjugate(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Hamilton product a * b of two (w, x, y, z) quaternions; composing the
/// rotations so that rodrigues(a * b) = rodrigues(a) . rodrigues(b).
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Normalize to unit norm. Zero-norm input yields None.
pub fn quat_normalize(q: [f64; 4]) -> Option<[f64; 4]> {
    let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}
