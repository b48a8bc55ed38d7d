//! Shape file format, preprocessing (FPS + PCA canonicalization with
//! ground-truth pose recovery), a deterministic synthetic furniture
//! generator, dataset splitting, and OBJ/PLY export.

use crate::error::{Error, Result};
use crate::geom::{
    apply_pose, chamfer_distance, compose_pose, farthest_point_sample, pca_canonicalize,
    PartPointCloud, Point3, Pose6DoF,
};
use crate::hierarchy::{build_super_parts, GroupingConfig};
use crate::metrics::ContactPair;
use crate::model::ShapeInput;
use crate::train::TrainSample;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const DEFAULT_POINTS_PER_PART: usize = 1000;

/// One part as stored on disk: a flat `[x0,y0,z0, x1,y1,z1, ...]` point
/// array in part-local coordinates plus the pose placing it in the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub points: Vec<f64>,
    pub gt_translation: [f64; 3],
    pub gt_quaternion: [f64; 4],
}

/// One shape per file. See `docs/shape-schema.md` for the field-by-field
/// format description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub category: String,
    pub parts: Vec<PartRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contacts: Option<Vec<ContactPair>>,
}

const RECORD_QUAT_TOL: f64 = 1e-5;

impl ShapeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Validation {
                field: "parts".into(),
                reason: "shape must have at least one part".into(),
            });
        }
        for (i, part) in self.parts.iter().enumerate() {
            if part.points.is_empty() || part.points.len() % 3 != 0 {
                return Err(Error::Validation {
                    field: format!("parts[{i}].points"),
                    reason: format!(
                        "length {} is not a positive multiple of 3",
                        part.points.len()
                    ),
                });
            }
            if part.points.iter().any(|v| !v.is_finite())
                || part.gt_translation.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Validation {
                    field: format!("parts[{i}]"),
                    reason: "non-finite coordinate".into(),
                });
            }
            let n: f64 = part.gt_quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > RECORD_QUAT_TOL {
                return Err(Error::Validation {
                    field: format!("parts[{i}].gt_quaternion"),
                    reason: format!("norm {n} deviates from 1 beyond {RECORD_QUAT_TOL}"),
                });
            }
        }
        Ok(())
    }

    fn part_cloud(&self, i: usize) -> Result<PartPointCloud> {
        let pts = self.parts[i]
            .points
            .chunks(3)
            .map(|c| Point3::new(c[0], c[1], c[2]))
            .collect();
        PartPointCloud::new(pts, i)
    }

    fn gt_pose(&self, i: usize) -> Result<Pose6DoF> {
        Pose6DoF::new(self.parts[i].gt_translation, self.parts[i].gt_quaternion)
    }
}

/// Load and validate one shape file.
pub fn load_shape(path: &Path) -> Result<ShapeRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        context: "open".into(),
        reason: e.to_string(),
    })?;
    let record: ShapeRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        context: format!("line {}, column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    record.validate()?;
    Ok(record)
}

/// Save one shape file (pretty-printed JSON).
pub fn save_shape(path: &Path, record: &ShapeRecord) -> Result<()> {
    record.validate()?;
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        context: "serialize".into(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

/// A shape after preprocessing: canonical equal-size part clouds and the
/// ground-truth poses that reproduce the original world placement.
#[derive(Debug, Clone)]
pub struct PreprocessedShape {
    pub shape_id: String,
    pub category: String,
    pub parts: Vec<PartPointCloud>,
    pub gt_poses: Vec<Pose6DoF>,
    pub contacts: Option<Vec<ContactPair>>,
}

/// FPS-downsample (after cyclic upsampling if needed) every part to
/// `points_per_part` points and PCA-canonicalize it; the returned poses map
/// each canonical part back onto its original world placement.
pub fn preprocess(record: &ShapeRecord, points_per_part: usize) -> Result<PreprocessedShape> {
    record.validate()?;
    if points_per_part < 2 {
        return Err(Error::invalid("points_per_part must be >= 2"));
    }
    let mut parts = Vec::with_capacity(record.parts.len());
    let mut gt_poses = Vec::with_capacity(record.parts.len());
    for i in 0..record.parts.len() {
        let cloud = record.part_cloud(i)?;
        if cloud.len() < 2 {
            return Err(Error::invalid(format!(
                "shape {}, part {i}: degenerate single-point part",
                record.shape_id
            )));
        }
        // cyclic duplication up to the target, then deterministic FPS
        let mut pts = cloud.points.clone();
        let mut k = 0usize;
        while pts.len() < points_per_part {
            pts.push(cloud.points[k % cloud.points.len()]);
            k += 1;
        }
        let sampled = farthest_point_sample(&pts, points_per_part, 0)?;
        let sampled = PartPointCloud::new(sampled, i)?;
        let (canonical, frame) = pca_canonicalize(&sampled)?;
        // world = gt_pose(local) and local = frame(canonical), so the
        // recovered pose is the composition gt_pose . frame
        let pose = compose_pose(&record.gt_pose(i)?, &frame.to_pose())?;
        parts.push(canonical);
        gt_poses.push(pose);
    }
    Ok(PreprocessedShape {
        shape_id: record.shape_id.clone(),
        category: record.category.clone(),
        parts,
        gt_poses,
        contacts: record.contacts.clone(),
    })
}

impl PreprocessedShape {
    /// Group the canonical parts and package the shape for training.
    pub fn to_train_sample(
        &self,
        grouping: &GroupingConfig,
        pad_to: Option<usize>,
    ) -> Result<TrainSample> {
        let assignment = build_super_parts(&self.parts, grouping)?;
        let input = ShapeInput::new(&self.parts, &assignment, pad_to)?;
        TrainSample::new(self.shape_id.clone(), input, self.gt_poses.clone())
    }
}

/// Category templates of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthCategory {
    Table,
    Chair,
    Lamp,
}

impl std::str::FromStr for SynthCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(SynthCategory::Table),
            "chair" => Ok(SynthCategory::Chair),
            "lamp" => Ok(SynthCategory::Lamp),
            other => Err(Error::invalid(format!("unknown category `{other}`"))),
        }
    }
}

/// Synthetic-dataset specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub category: SynthCategory,
    pub num_shapes: usize,
    /// Approximate surface-sample count per part before preprocessing.
    pub points_per_part: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            category: SynthCategory::Table,
            num_shapes: 20,
            points_per_part: 64,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_shapes == 0 {
            return Err(Error::invalid("num_shapes must be >= 1"));
        }
        if self.points_per_part < 8 {
            return Err(Error::invalid("points_per_part must be >= 8"));
        }
        Ok(())
    }
}

/// Roughly `count` points on the surface of an axis-aligned cuboid with the
/// given half-extents, centered at the origin, on a deterministic grid.
fn cuboid_surface(half: [f64; 3], count: usize) -> Vec<Point3> {
    let per_face = (count / 6).max(1);
    let steps = (per_face as f64).sqrt().ceil() as usize + 1;
    let mut pts = Vec::new();
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
    for a in 0..steps {
        for b in 0..steps {
            let u = lin(-half[0], half[0], a);
            let v = lin(-half[1], half[1], b);
            let w = lin(-half[2], half[2], b);
            pts.push(Point3::new(u, v, -half[2]));
            pts.push(Point3::new(u, v, half[2]));
            pts.push(Point3::new(u, -half[1], w));
            pts.push(Point3::new(u, half[1], w));
            let v2 = lin(-half[1], half[1], a);
            pts.push(Point3::new(-half[0], v2, w));
            pts.push(Point3::new(half[0], v2, w));
        }
    }
    pts
}

struct TemplatePart {
    half: [f64; 3],
    center: [f64; 3],
}

fn template_parts(category: SynthCategory, rng: &mut ChaCha8Rng) -> Vec<TemplatePart> {
    let r = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
    match category {
        SynthCategory::Table => {
            let top_half = [r(rng, 0.5, 0.8), r(rng, 0.03, 0.07), r(rng, 0.4, 0.7)];
            let leg_h = r(rng, 0.3, 0.5);
            let leg_half = [r(rng, 0.03, 0.06), leg_h, r(rng, 0.03, 0.06)];
            let y_top = leg_h * 2.0 + top_half[1];
            let lx = top_half[0] - leg_half[0];
            let lz = top_half[2] - leg_half[2];
            let mut parts = vec![TemplatePart {
                half: top_half,
                center: [0.0, y_top, 0.0],
            }];
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                parts.push(TemplatePart {
                    half: leg_half,
                    center: [sx * lx, leg_h, sz * lz],
                });
            }
            parts
        }
        SynthCategory::Chair => {
            let seat_half = [r(rng, 0.35, 0.5), r(rng, 0.03, 0.06), r(rng, 0.35, 0.5)];
            let leg_h = r(rng, 0.2, 0.35);
            let leg_half = [r(rng, 0.03, 0.05), leg_h, r(rng, 0.03, 0.05)];
            let back_half = [seat_half[0], r(rng, 0.3, 0.45), r(rng, 0.03, 0.05)];
            let y_seat = leg_h * 2.0 + seat_half[1];
            let lx = seat_half[0] - leg_half[0];
            let lz = seat_half[2] - leg_half[2];
            let mut parts = vec![TemplatePart {
                half: seat_half,
                center: [0.0, y_seat, 0.0],
            }];
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                parts.push(TemplatePart {
                    half: leg_half,
                    center: [sx * lx, leg_h, sz * lz],
                });
            }
            parts.push(TemplatePart {
                half: back_half,
                center: [
                    0.0,
                    y_seat + seat_half[1] + back_half[1],
                    -(seat_half[2] - back_half[2]),
                ],
            });
            parts
        }
        SynthCategory::Lamp => {
            let base_half = [r(rng, 0.25, 0.4), r(rng, 0.03, 0.06), r(rng, 0.25, 0.4)];
            let pole_h = r(rng, 0.4, 0.6);
            let pole_half = [r(rng, 0.02, 0.04), pole_h, r(rng, 0.02, 0.04)];
            let shade_half = [r(rng, 0.15, 0.3), r(rng, 0.08, 0.15), r(rng, 0.15, 0.3)];
            let y_pole = base_half[1] * 2.0 + pole_h;
            vec![
                TemplatePart {
                    half: base_half,
                    center: [0.0, base_half[1], 0.0],
                },
                TemplatePart {
                    half: pole_half,
                    center: [0.0, y_pole, 0.0],
                },
                TemplatePart {
                    half: shade_half,
                    center: [0.0, y_pole + pole_h + shade_half[1], 0.0],
                },
            ]
        }
    }
}

/// Deterministic synthetic dataset. Part points are stored centered
/// (part-local space) with identity rotations; translations place the parts
/// and are normalized so the assembled shape fits in [-1, 1]^3.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ShapeRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = match spec.category {
        SynthCategory::Table => "table",
        SynthCategory::Chair => "chair",
        SynthCategory::Lamp => "lamp",
    };
    let mut records = Vec::with_capacity(spec.num_shapes);
    for s in 0..spec.num_shapes {
        let template = template_parts(spec.category, &mut rng);
        // normalize: assembled extent must fit inside [-1,1]^3 with margin
        let mut extent = 0.0f64;
        for p in &template {
            for k in 0..3 {
                extent = extent.max(p.center[k].abs() + p.half[k]);
            }
        }
        let scale = 0.9 / extent;
        // center the assembly vertically around the origin
        let y_mid = template
            .iter()
            .map(|p| p.center[1])
            .sum::<f64>()
            / template.len() as f64;

        let mut parts = Vec::with_capacity(template.len());
        let mut clouds = Vec::with_capacity(template.len());
        let mut poses = Vec::with_capacity(template.len());
        for (i, p) in template.iter().enumerate() {
            let half = [p.half[0] * scale, p.half[1] * scale, p.half[2] * scale];
            let translation = [
                p.center[0] * scale,
                (p.center[1] - y_mid) * scale,
                p.center[2] * scale,
            ];
            let surface = cuboid_surface(half, spec.points_per_part);
            parts.push(PartRecord {
                points: surface.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
                gt_translation: translation,
                gt_quaternion: [1.0, 0.0, 0.0, 0.0],
            });
            let pose = Pose6DoF::new(translation, [1.0, 0.0, 0.0, 0.0])?;
            clouds.push(PartPointCloud::new(surface, i)?);
            poses.push(pose);
        }
        let contacts = crate::metrics::extract_contact_pairs(
            &clouds,
            &poses,
            crate::metrics::DEFAULT_ADJACENCY_EPS,
        )?;
        records.push(ShapeRecord {
            shape_id: format!("{name}-{:04}", s),
            category: name.to_string(),
            parts,
            contacts: Some(contacts),
        });
    }
    Ok(records)
}

/// Seeded 70/10/20-style split: shuffle then partition. Returns
/// (train, val, test) index lists that are disjoint and exhaustive.
pub fn split_dataset(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("split_dataset: empty input"));
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::invalid("split ratios must be non-negative and sum to 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios.0).round() as usize;
    let n_val = (((n as f64) * ratios.1).round() as usize).min(n - n_train);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// OBJ export of an assembled prediction: vertices only, one object per
/// part, part index in comments.
pub fn export_obj(w: &mut impl Write, posed_parts: &[PartPointCloud]) -> Result<()> {
    if posed_parts.is_empty() {
        return Err(Error::invalid("export_obj: no parts"));
    }
    writeln!(w, "# assembled shape, {} parts", posed_parts.len())?;
    for part in posed_parts {
        writeln!(w, "# part {}", part.part_index)?;
        writeln!(w, "o part_{}", part.part_index)?;
        for p in &part.points {
            writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

/// ASCII PLY export of an assembled prediction (vertex positions only).
pub fn export_ply(w: &mut impl Write, posed_parts: &[PartPointCloud]) -> Result<()> {
    if posed_parts.is_empty() {
        return Err(Error::invalid("export_ply: no parts"));
    }
    let total: usize = posed_parts.iter().map(|p| p.len()).sum();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    for part in posed_parts {
        writeln!(w, "comment part {} has {} vertices", part.part_index, part.len())?;
    }
    writeln!(w, "element vertex {total}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for part in posed_parts {
        for p in &part.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

/// Assemble a preprocessed shape under arbitrary poses, keeping parts
/// separate for export.
pub fn posed_parts(parts: &[PartPointCloud], poses: &[Pose6DoF]) -> Result<Vec<PartPointCloud>> {
    if parts.len() != poses.len() {
        return Err(Error::invalid("posed_parts: length mismatch"));
    }
    parts
        .iter()
        .zip(poses)
        .map(|(part, pose)| apply_pose(part, pose))
        .collect()
}

/// Verify the preprocess round-trip contract for one part: the canonical
/// cloud posed by the recovered pose must reproduce the original world
/// placement of the FPS-selected points.
pub fn roundtrip_chamfer(
    record: &ShapeRecord,
    shape: &PreprocessedShape,
    part: usize,
) -> Result<f64> {
    let cloud = record.part_cloud(part)?;
    let n = shape.parts[part].len();
    let mut pts = cloud.points.clone();
    let mut k = 0usize;
    while pts.len() < n {
        pts.push(cloud.points[k % cloud.points.len()]);
        k += 1;
    }
    let sampled = PartPointCloud::new(farthest_point_sample(&pts, n, 0)?, part)?;
    let world = apply_pose(&sampled, &record.gt_pose(part)?)?;
    let rebuilt = apply_pose(&shape.parts[part], &shape.gt_poses[part])?;
    chamfer_distance(&rebuilt.points, &world.points)
}
