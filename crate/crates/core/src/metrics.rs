//! Assembly-quality and diversity metrics: shape Chamfer distance (SCD),
//! part accuracy (PA), connectivity accuracy (CA), their threshold means
//! (mPA/mCA), diversity scores (DS/QDS/WQDS), and minimum-matching-distance
//! variant selection.

use crate::error::{Error, Result};
use crate::geom::{apply_pose, chamfer_distance, PartPointCloud, Point3, Pose6DoF};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const DEFAULT_ADJACENCY_EPS: f64 = 0.01;

/// Threshold sets for the accuracy metrics and the diversity quality gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    /// Shared threshold set for PA and CA.
    pub tau_set: Vec<f64>,
    /// Quality gate on CA (as a fraction) for QDS/WQDS.
    pub tau_q: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            tau_set: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            tau_q: 0.5,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.tau_set.is_empty() || self.tau_set.iter().any(|&t| t <= 0.0) {
            return Err(Error::invalid("thresholds must be positive and non-empty"));
        }
        if self.tau_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
        if self.tau_q <= 0.0 {
            return Err(Error::invalid("tau_q must be positive"));
        }
        Ok(())
    }
}

/// A ground-truth contact between two adjacent parts, with the contact
/// points stored in each part's canonical space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPair {
    pub part_i: usize,
    pub part_j: usize,
    pub c_ij: Point3,
    pub c_ji: Point3,
}

/// Per-shape metric results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub scd: f64,
    /// (threshold, percent) pairs in threshold order.
    pub pa: Vec<(f64, f64)>,
    pub ca: Vec<(f64, f64)>,
    pub mpa: f64,
    pub mca: f64,
    pub ds: f64,
    pub qds: f64,
    pub wqds: f64,
}

/// Union of all posed parts as one point set.
pub fn assemble_shape(parts: &[PartPointCloud], poses: &[Pose6DoF]) -> Result<Vec<Point3>> {
    if parts.is_empty() || parts.len() != poses.len() {
        return Err(Error::invalid(format!(
            "assemble: {} parts vs {} poses",
            parts.len(),
            poses.len()
        )));
    }
    let mut out = Vec::new();
    for (part, pose) in parts.iter().zip(poses) {
        out.extend(apply_pose(part, pose)?.points);
    }
    Ok(out)
}

/// Shape Chamfer distance over the full concatenated assemblies.
pub fn shape_chamfer(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    chamfer_distance(pred, gt)
}

/// Percentage of parts whose posed cloud lies within Chamfer distance
/// `tau_p` of the ground-truth posed cloud.
pub fn part_accuracy(
    parts: &[PartPointCloud],
    pred_poses: &[Pose6DoF],
    gt_poses: &[Pose6DoF],
    tau_p: f64,
) -> Result<f64> {
    if parts.len() != pred_poses.len() || parts.len() != gt_poses.len() || parts.is_empty() {
        return Err(Error::invalid("part_accuracy: length mismatch"));
    }
    let mut matched = 0usize;
    for i in 0..parts.len() {
        let p = apply_pose(&parts[i], &pred_poses[i])?;
        let g = apply_pose(&parts[i], &gt_poses[i])?;
        if chamfer_distance(&p.points, &g.points)? < tau_p {
            matched += 1;
        }
    }
    Ok(100.0 * matched as f64 / parts.len() as f64)
}

/// For every pair of parts whose minimum inter-part distance in the
/// ground-truth assembly is below `adjacency_eps`, record the mutually
/// closest points mapped back into each part's canonical space.
pub fn extract_contact_pairs(
    parts: &[PartPointCloud],
    gt_poses: &[Pose6DoF],
    adjacency_eps: f64,
) -> Result<Vec<ContactPair>> {
    if parts.len() != gt_poses.len() {
        return Err(Error::invalid("extract_contact_pairs: length mismatch"));
    }
    let posed: Vec<PartPointCloud> = parts
        .iter()
        .zip(gt_poses)
        .map(|(p, pose)| apply_pose(p, pose))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            // closest point of i to part j, and of j to part i
            let (di, ai) = closest_to_set(&posed[i].points, &posed[j].points);
            let (_, aj) = closest_to_set(&posed[j].points, &posed[i].points);
            if di.sqrt() < adjacency_eps {
                pairs.push(ContactPair {
                    part_i: i,
                    part_j: j,
                    c_ij: parts[i].points[ai],
                    c_ji: parts[j].points[aj],
                });
            }
        }
    }
    Ok(pairs)
}

/// Minimum squared distance from `a` to `b` and the index in `a` achieving it.
fn closest_to_set(a: &[Point3], b: &[Point3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0usize);
    for (i, p) in a.iter().enumerate() {
        for q in b {
            let d = p.dist2(q);
            if d < best.0 {
                best = (d, i);
            }
        }
    }
    best
}

/// Percentage of ground-truth contacts preserved by the predicted poses:
/// the squared distance between the two posed contact points must fall
/// below `tau_c`. No contacts means nothing can be wrong: 100%.
pub fn connectivity_accuracy(
    pred_poses: &[Pose6DoF],
    pairs: &[ContactPair],
    tau_c: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(100.0);
    }
    let mut kept = 0usize;
    for pair in pairs {
        if pair.part_i >= pred_poses.len() || pair.part_j >= pred_poses.len() {
            return Err(Error::invalid("connectivity_accuracy: pair index out of range"));
        }
        let a = pose_point(&pred_poses[pair.part_i], &pair.c_ij)?;
        let b = pose_point(&pred_poses[pair.part_j], &pair.c_ji)?;
        if a.dist2(&b) < tau_c {
            kept += 1;
        }
    }
    Ok(100.0 * kept as f64 / pairs.len() as f64)
}

fn pose_point(pose: &Pose6DoF, p: &Point3) -> Result<Point3> {
    let r = crate::geom::rodrigues(pose.quaternion)?;
    let v = r.apply(p);
    Ok(Point3::new(
        v.x + pose.translation[0],
        v.y + pose.translation[1],
        v.z + pose.translation[2],
    ))
}

/// Arithmetic mean of an accuracy curve over the full threshold set.
pub fn mean_accuracy(curve: &[(f64, f64)], thresholds: &MetricThresholds) -> Result<f64> {
    for &tau in &thresholds.tau_set {
        if !curve.iter().any(|&(t, _)| t == tau) {
            return Err(Error::invalid(format!(
                "accuracy curve missing threshold {tau}"
            )));
        }
    }
    let vals: Vec<f64> = thresholds
        .tau_set
        .iter()
        .map(|&tau| curve.iter().find(|&&(t, _)| t == tau).unwrap().1)
        .collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Diversity scores over K assembled variants of one part set.
///
/// `ca_fractions` are per-variant connectivity accuracies in [0, 1].
/// DS averages pairwise Chamfer distances; QDS zeroes pairs where either
/// variant's CA fails the `tau_q` gate; WQDS additionally weights surviving
/// pairs by the product of the CAs.
pub fn diversity_scores(
    assembled: &[Vec<Point3>],
    ca_fractions: &[f64],
    tau_q: f64,
) -> Result<(f64, f64, f64)> {
    let k = assembled.len();
    if k == 0 || ca_fractions.len() != k {
        return Err(Error::invalid("diversity_scores: need K >= 1 assemblies with CAs"));
    }
    if ca_fractions.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
        return Err(Error::invalid("diversity_scores: CA weights must be in [0,1]"));
    }
    let (mut ds, mut qds, mut wqds) = (0.0, 0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = chamfer_distance(&assembled[i], &assembled[j])?;
            ds += d;
            if ca_fractions[i] > tau_q && ca_fractions[j] > tau_q {
                qds += d;
                wqds += d * ca_fractions[i] * ca_fractions[j];
            }
        }
    }
    let norm = (k * k) as f64;
    Ok((ds / norm, qds / norm, wqds / norm))
}

/// Index of the variant closest to the ground-truth assembly (minimum
/// matching distance); ties resolve to the lowest index.
pub fn select_closest_variant(assembled: &[Vec<Point3>], gt: &[Point3]) -> Result<usize> {
    if assembled.is_empty() {
        return Err(Error::invalid("select_closest_variant: no variants"));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, v) in assembled.iter().enumerate() {
        let d = shape_chamfer(v, gt)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Full per-shape evaluation: PA/CA/SCD on the MMD-selected variant,
/// diversity over all variants. `variants` holds K predicted pose sets.
pub fn evaluate_shape(
    parts: &[PartPointCloud],
    gt_poses: &[Pose6DoF],
    variants: &[Vec<Pose6DoF>],
    thresholds: &MetricThresholds,
    adjacency_eps: f64,
) -> Result<MetricReport> {
    thresholds.validate()?;
    if variants.is_empty() {
        return Err(Error::invalid("evaluate_shape: no variants"));
    }
    let gt_assembled = assemble_shape(parts, gt_poses)?;
    let assembled: Vec<Vec<Point3>> = variants
        .iter()
        .map(|poses| assemble_shape(parts, poses))
        .collect::<Result<_>>()?;
    let pairs = extract_contact_pairs(parts, gt_poses, adjacency_eps)?;

    let best = select_closest_variant(&assembled, &gt_assembled)?;
    let scd = shape_chamfer(&assembled[best], &gt_assembled)?;
    let mut pa = Vec::new();
    let mut ca = Vec::new();
    for &tau in &thresholds.tau_set {
        pa.push((tau, part_accuracy(parts, &variants[best], gt_poses, tau)?));
        ca.push((tau, connectivity_accuracy(&variants[best], &pairs, tau)?));
    }
    let mpa = mean_accuracy(&pa, thresholds)?;
    let mca = mean_accuracy(&ca, thresholds)?;

    // diversity weights: per-variant mean CA as a fraction
    let mut ca_fracs = Vec::with_capacity(variants.len());
    for poses in variants {
        let curve: Vec<(f64, f64)> = thresholds
            .tau_set
            .iter()
            .map(|&tau| Ok((tau, connectivity_accuracy(poses, &pairs, tau)?)))
            .collect::<Result<_>>()?;
        ca_fracs.push(mean_accuracy(&curve, thresholds)? / 100.0);
    }
    let (ds, qds, wqds) = diversity_scores(&assembled, &ca_fracs, thresholds.tau_q)?;

    Ok(MetricReport {
        scd,
        pa,
        ca,
        mpa,
        mca,
        ds,
        qds,
        wqds,
    })
}

/// Write per-shape reports plus a final `mean` aggregate row as CSV.
///
/// Columns: `shape_id,scd,pa_<tau>...,ca_<tau>...,mpa,mca,ds,qds,wqds`.
pub fn write_metrics_csv(
    w: &mut impl Write,
    rows: &[(String, MetricReport)],
    thresholds: &MetricThresholds,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("write_metrics_csv: no rows"));
    }
    let mut header = String::from("shape_id,scd");
    for &tau in &thresholds.tau_set {
        header.push_str(&format!(",pa_{tau}"));
    }
    for &tau in &thresholds.tau_set {
        header.push_str(&format!(",ca_{tau}"));
    }
    header.push_str(",mpa,mca,ds,qds,wqds");
    writeln!(w, "{header}")?;

    let emit = |w: &mut dyn Write, id: &str, r: &MetricReport| -> Result<()> {
        let mut line = format!("{id},{:.12}", r.scd);
        for &(_, v) in &r.pa {
            line.push_str(&format!(",{v:.6}"));
        }
        for &(_, v) in &r.ca {
            line.push_str(&format!(",{v:.6}"));
        }
        line.push_str(&format!(
            ",{:.6},{:.6},{:.12},{:.12},{:.12}",
            r.mpa, r.mca, r.ds, r.qds, r.wqds
        ));
        writeln!(w, "{line}")?;
        Ok(())
    };
    for (id, report) in rows {
        emit(w, id, report)?;
    }

    // aggregate: arithmetic mean over shapes, column by column
    let n = rows.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    let agg = MetricReport {
        scd: mean_of(&|r| r.scd),
        pa: thresholds
            .tau_set
            .iter()
            .enumerate()
            .map(|(k, &tau)| (tau, mean_of(&|r| r.pa[k].1)))
            .collect(),
        ca: thresholds
            .tau_set
            .iter()
            .enumerate()
            .map(|(k, &tau)| (tau, mean_of(&|r| r.ca[k].1)))
            .collect(),
        mpa: mean_of(&|r| r.mpa),
        mca: mean_of(&|r| r.mca),
        ds: mean_of(&|r| r.ds),
        qds: mean_of(&|r| r.qds),
        wqds: mean_of(&|r| r.wqds),
    };
    emit(w, "mean", &agg)
}
