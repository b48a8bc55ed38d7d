use crate::error::{Error, Result};
use crate::geom::{PartPointCloud, Point3, Pose6DoF, RotationMatrix};

/// Frame recovered by PCA canonicalization. Applying it to the canonical
/// cloud reproduces the input: x = R y + t.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalFrame {
    pub rotation: RotationMatrix,
    pub translation: [f64; 3],
}

impl CanonicalFrame {
    pub fn apply(&self, p: &PartPointCloud) -> PartPointCloud {
        let points = p
            .points
            .iter()
            .map(|pt| {
                let r = self.rotation.apply(pt);
                Point3::new(
                    r.x + self.translation[0],
                    r.y + self.translation[1],
                    r.z + self.translation[2],
                )
            })
            .collect();
        PartPointCloud {
            points,
            part_index: p.part_index,
        }
    }

    /// The frame as a 6-DoF pose (rotation converted to a quaternion).
    pub fn to_pose(&self) -> Pose6DoF {
        Pose6DoF {
            translation: self.translation,
            quaternion: quat_from_matrix(&self.rotation),
        }
    }
}

/// Jacobi eigendecomposition of a symmetric 3x3 matrix.
/// Returns (eigenvalues, eigenvectors as columns of v).
fn jacobi_eigen(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for p in 0..2 {
            for q in (p + 1)..3 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..3 {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

fn quat_from_matrix(r: &RotationMatrix) -> [f64; 4] {
    let m = &r.0;
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    let n: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// PCA canonicalization: zero-center, align covariance eigenvectors to axes
/// sorted by descending eigenvalue. Eigenvector signs are chosen so the
/// third moment of the projections along each axis is >= 0; if the resulting
/// basis is left-handed, the axis with the smallest absolute moment is
/// flipped (lowest axis index on ties) so the frame is a proper rotation.
pub fn pca_canonicalize(p: &PartPointCloud) -> Result<(PartPointCloud, CanonicalFrame)> {
    if p.points.is_empty() {
        return Err(Error::invalid("pca_canonicalize: empty point cloud"));
    }
    let n = p.points.len() as f64;
    let mut mean = [0.0; 3];
    for pt in &p.points {
        mean[0] += pt.x;
        mean[1] += pt.y;
        mean[2] += pt.z;
    }
    mean[0] /= n;
    mean[1] /= n;
    mean[2] /= n;

    let mut cov = [[0.0f64; 3]; 3];
    for pt in &p.points {
        let d = [pt.x - mean[0], pt.y - mean[1], pt.z - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }

    let (evals, evecs) = jacobi_eigen(cov);

    // Sort axes by descending eigenvalue; equal eigenvalues fall back to the
    // index of each eigenvector's dominant original axis.
    let mut order = [0usize, 1, 2];
    let dominant = |c: usize| -> usize {
        let mut best = 0;
        for k in 1..3 {
            if evecs[k][c].abs() > evecs[best][c].abs() {
                best = k;
            }
        }
        best
    };
    order.sort_by(|&a, &b| {
        evals[b]
            .partial_cmp(&evals[a])
            .unwrap()
            .then(dominant(a).cmp(&dominant(b)))
    });

    // Basis columns after ordering.
    let mut basis = [[0.0f64; 3]; 3]; // basis[axis][component]
    for (slot, &c) in order.iter().enumerate() {
        for k in 0..3 {
            basis[slot][k] = evecs[k][c];
        }
    }

    // Sign convention: per-axis third moment of the projections >= 0. The
    // plain coordinate sum is identically zero after centering, so the cubed
    // sum serves as the deterministic, rotation-invariant disambiguator.
    let mut sums = [0.0f64; 3];
    for pt in &p.points {
        let d = [pt.x - mean[0], pt.y - mean[1], pt.z - mean[2]];
        for axis in 0..3 {
            let proj = basis[axis][0] * d[0] + basis[axis][1] * d[1] + basis[axis][2] * d[2];
            sums[axis] += proj * proj * proj;
        }
    }
    for axis in 0..3 {
        let flip = if sums[axis].abs() > 1e-12 {
            sums[axis] < 0.0
        } else {
            // zero sum: positive first nonzero component
            let first = basis[axis]
                .iter()
                .find(|v| v.abs() > 1e-12)
                .copied()
                .unwrap_or(1.0);
            first < 0.0
        };
        if flip {
            for k in 0..3 {
                basis[axis][k] = -basis[axis][k];
            }
            sums[axis] = -sums[axis];
        }
    }

    // Enforce right-handedness.
    let cross = [
        basis[0][1] * basis[1][2] - basis[0][2] * basis[1][1],
        basis[0][2] * basis[1][0] - basis[0][0] * basis[1][2],
        basis[0][0] * basis[1][1] - basis[0][1] * basis[1][0],
    ];
    let det = cross[0] * basis[2][0] + cross[1] * basis[2][1] + cross[2] * basis[2][2];
    if det < 0.0 {
        let mut flip_axis = 0;
        for axis in 1..3 {
            if sums[axis].abs() < sums[flip_axis].abs() {
                flip_axis = axis;
            }
        }
        for k in 0..3 {
            basis[flip_axis][k] = -basis[flip_axis][k];
        }
    }

    // Rotation with eigenvectors as columns: x = R y + mean, y = R^T (x - mean).
    let rotation = RotationMatrix([
        [basis[0][0], basis[1][0], basis[2][0]],
        [basis[0][1], basis[1][1], basis[2][1]],
        [basis[0][2], basis[1][2], basis[2][2]],
    ]);

    let canonical_points = p
        .points
        .iter()
        .map(|pt| {
            let d = [pt.x - mean[0], pt.y - mean[1], pt.z - mean[2]];
            Point3::new(
                basis[0][0] * d[0] + basis[0][1] * d[1] + basis[0][2] * d[2],
                basis[1][0] * d[0] + basis[1][1] * d[1] + basis[1][2] * d[2],
                basis[2][0] * d[0] + basis[2][1] * d[1] + basis[2][2] * d[2],
            )
        })
        .collect();

    Ok((
        PartPointCloud {
            points: canonical_points,
            part_index: p.part_index,
        },
        CanonicalFrame {
            rotation,
            translation: mean,
        },
    ))
}
