//! Unsupervised super-part construction: cluster geometrically-equivalent
//! parts by AABB extents and Chamfer distance.

use crate::error::{Error, Result};
use crate::geom::{aabb_of, chamfer_distance, farthest_point_sample, PartPointCloud};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_AABB_TOL: f64 = 0.1;
pub const DEFAULT_CHAMFER_TOL: f64 = 0.2;

/// Equivalence-test configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub aabb_tol: f64,
    pub chamfer_tol: f64,
    /// Downsample parts to this many points before the pairwise Chamfer test.
    /// `None` compares full clouds.
    pub chamfer_sample: Option<usize>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            aabb_tol: DEFAULT_AABB_TOL,
            chamfer_tol: DEFAULT_CHAMFER_TOL,
            chamfer_sample: Some(100),
        }
    }
}

/// Partition of parts into super-parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperPartAssignment {
    pub part_to_super: Vec<usize>,
    pub num_supers: usize,
    pub members: BTreeMap<usize, Vec<usize>>,
}

impl SuperPartAssignment {
    pub fn super_of(&self, part: usize) -> usize {
        self.part_to_super[part]
    }

    pub fn members_of(&self, super_index: usize) -> &[usize] {
        &self.members[&super_index]
    }

    /// Rank of a part among its equivalence-class siblings (position in the
    /// cluster's member list). Used to build instance encodings.
    pub fn rank_within_super(&self, part: usize) -> usize {
        let s = self.part_to_super[part];
        self.members[&s].iter().position(|&p| p == part).unwrap()
    }
}

/// True iff the AABB-extent and Chamfer criteria both hold.
pub fn geometric_equivalence(
    a: &PartPointCloud,
    b: &PartPointCloud,
    aabb_tol: f64,
    chamfer_tol: f64,
) -> Result<bool> {
    let ea = aabb_of(a)?.extents();
    let eb = aabb_of(b)?.extents();
    let max_diff = ea
        .iter()
        .zip(eb.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    if max_diff > aabb_tol {
        return Ok(false);
    }
    Ok(chamfer_distance(&a.points, &b.points)? < chamfer_tol)
}

fn maybe_downsample(p: &PartPointCloud, sample: Option<usize>) -> Result<PartPointCloud> {
    match sample {
        Some(k) if p.len() > k => {
            let points = farthest_point_sample(&p.points, k, 0)?;
            Ok(PartPointCloud {
                points,
                part_index: p.part_index,
            })
        }
        _ => Ok(p.clone()),
    }
}

/// Greedy seeded clustering: iterate parts in index order, assign each part to
/// the first existing cluster whose seed (first member) it is equivalent to,
/// else open a new cluster. Clusters are ordered by lowest member part index.
pub fn build_super_parts(
    parts: &[PartPointCloud],
    config: &GroupingConfig,
) -> Result<SuperPartAssignment> {
    if parts.is_empty() {
        return Err(Error::invalid("build_super_parts: no parts"));
    }
    let sampled: Vec<PartPointCloud> = parts
        .iter()
        .map(|p| maybe_downsample(p, config.chamfer_sample))
        .collect::<Result<_>>()?;

    let mut seeds: Vec<usize> = Vec::new(); // index into `parts` of each cluster seed
    let mut part_to_super = vec![usize::MAX; parts.len()];
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for i in 0..parts.len() {
        let mut assigned = None;
        for (cluster, &seed) in seeds.iter().enumerate() {
            if geometric_equivalence(
                &sampled[i],
                &sampled[seed],
                config.aabb_tol,
                config.chamfer_tol,
            )? {
                assigned = Some(cluster);
                break;
            }
        }
        let cluster = match assigned {
            Some(c) => c,
            None => {
                seeds.push(i);
                seeds.len() - 1
            }
        };
        part_to_super[i] = cluster;
        members.entry(cluster).or_default().push(i);
    }

    Ok(SuperPartAssignment {
        part_to_super,
        num_supers: seeds.len(),
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cuboid(ex: f64, ey: f64, ez: f64, n: usize, seed: u64, idx: usize) -> PartPointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Point3::new(
                    r.gen_range(-ex / 2.0..ex / 2.0),
                    r.gen_range(-ey / 2.0..ey / 2.0),
                    r.gen_range(-ez / 2.0..ez / 2.0),
                )
            })
            .collect();
        PartPointCloud {
            points,
            part_index: idx,
        }
    }

    #[test]
    fn identical_clouds_equivalent() {
        let a = cuboid(0.2, 0.2, 0.6, 64, 1, 0);
        assert!(geometric_equivalence(&a, &a, 0.1, 0.2).unwrap());
    }

    #[test]
    fn scaled_cube_fails_aabb_filter() {
        let a = cuboid(1.0, 1.0, 1.0, 64, 2, 0);
        let mut b = a.clone();
        for p in &mut b.points {
            p.x *= 2.0;
            p.y *= 2.0;
            p.z *= 2.0;
        }
        assert!(!geometric_equivalence(&a, &b, 0.1, 0.2).unwrap());
    }

    #[test]
    fn near_identical_within_thresholds() {
        // extent diff ~0.05, chamfer well below 0.2
        let a = cuboid(0.4, 0.4, 0.4, 256, 3, 0);
        let mut b = cuboid(0.4, 0.4, 0.4, 256, 3, 1);
        for p in &mut b.points {
            p.x *= 1.1;
        }
        let ea = aabb_of(&a).unwrap().extents();
        let eb = aabb_of(&b).unwrap().extents();
        let diff = ea
            .iter()
            .zip(eb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 0.1, "fixture extent diff {diff}");
        let cd = chamfer_distance(&a.points, &b.points).unwrap();
        assert!(cd < 0.2, "fixture chamfer {cd}");
        assert!(geometric_equivalence(&a, &b, 0.1, 0.2).unwrap());
    }

    #[test]
    fn chair_like_grouping() {
        // 4 identical legs + 1 seat + 1 back -> 3 clusters
        let mut parts = Vec::new();
        for i in 0..4 {
            parts.push(cuboid(0.08, 0.08, 0.5, 128, 10, i));
        }
        parts.push(cuboid(0.8, 0.8, 0.06, 128, 11, 4)); // seat
        parts.push(cuboid(0.8, 0.06, 0.6, 128, 12, 5)); // back
        let asg = build_super_parts(&parts, &GroupingConfig::default()).unwrap();
        assert_eq!(asg.num_supers, 3);
        assert_eq!(asg.members_of(0), &[0, 1, 2, 3]);
        assert_eq!(asg.members_of(1), &[4]);
        assert_eq!(asg.members_of(2), &[5]);
    }

    #[test]
    fn single_part_single_cluster() {
        let parts = vec![cuboid(0.3, 0.3, 0.3, 32, 20, 0)];
        let asg = build_super_parts(&parts, &GroupingConfig::default()).unwrap();
        assert_eq!(asg.num_supers, 1);
        assert_eq!(asg.part_to_super, vec![0]);
    }

    /// Brute-force oracle: same greedy seeded rule, recomputed from scratch
    /// with the full pairwise equivalence matrix.
    pub fn clustering_oracle(parts: &[PartPointCloud], cfg: &GroupingConfig) -> Vec<usize> {
        let sampled: Vec<PartPointCloud> = parts
            .iter()
            .map(|p| maybe_downsample(p, cfg.chamfer_sample).unwrap())
            .collect();
        let n = parts.len();
        let mut eq = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                eq[i][j] =
                    geometric_equivalence(&sampled[i], &sampled[j], cfg.aabb_tol, cfg.chamfer_tol)
                        .unwrap();
            }
        }
        let mut seeds: Vec<usize> = Vec::new();
        let mut out = vec![usize::MAX; n];
        for i in 0..n {
            match seeds.iter().position(|&s| eq[i][s]) {
                Some(c) => out[i] = c,
                None => {
                    seeds.push(i);
                    out[i] = seeds.len() - 1;
                }
            }
        }
        out
    }

    #[test]
    fn matches_clustering_oracle() {
        let cfg = GroupingConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(30);
        for trial in 0..20 {
            let n = r.gen_range(2..8);
            let parts: Vec<PartPointCloud> = (0..n)
                .map(|i| {
                    // a few repeated templates so clusters of size > 1 occur
                    let template = r.gen_range(0..3u64);
                    cuboid(
                        0.1 + 0.2 * template as f64,
                        0.15,
                        0.3,
                        96,
                        trial * 100 + template,
                        i,
                    )
                })
                .collect();
            let asg = build_super_parts(&parts, &cfg).unwrap();
            assert_eq!(asg.part_to_super, clustering_oracle(&parts, &cfg));
            // partition property
            let total: usize = asg.members.values().map(|m| m.len()).sum();
            assert_eq!(total, parts.len());
        }
    }

    #[test]
    fn permutation_yields_same_partition_as_sets() {
        let cfg = GroupingConfig::default();
        let mut parts = Vec::new();
        for i in 0..3 {
            parts.push(cuboid(0.1, 0.1, 0.5, 96, 40, i));
        }
        parts.push(cuboid(0.7, 0.7, 0.05, 96, 41, 3));
        let asg1 = build_super_parts(&parts, &cfg).unwrap();

        let perm = [3usize, 1, 0, 2];
        let permuted: Vec<PartPointCloud> = perm
            .iter()
            .enumerate()
            .map(|(new_idx, &old)| PartPointCloud {
                points: parts[old].points.clone(),
                part_index: new_idx,
            })
            .collect();
        let asg2 = build_super_parts(&permuted, &cfg).unwrap();

        let sets = |asg: &SuperPartAssignment, relabel: &dyn Fn(usize) -> usize| {
            let mut out: Vec<Vec<usize>> = asg
                .members
                .values()
                .map(|m| {
                    let mut v: Vec<usize> = m.iter().map(|&i| relabel(i)).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            out.sort();
            out
        };
        let s1 = sets(&asg1, &|i| i);
        let s2 = sets(&asg2, &|i| perm[i]);
        assert_eq!(s1, s2);
    }
}
