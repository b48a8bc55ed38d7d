//! Acceptance suite: one test per criterion, each printing a single
//! `ACCEPTANCE <n> (<name>): PASS` line on success. Criteria 7 and 8 (the
//! desk-scale learnability and ablation runs) live in `acceptance_training.rs`
//! because of their runtime.

use hapw_core::data::{generate_synthetic, SynthCategory, SynthSpec};
use hapw_core::geom::{
    aabb_of, chamfer_distance, farthest_point_sample_indices, quat_conjugate, quat_mul,
    quat_normalize, rodrigues, PartPointCloud, Point3, Pose6DoF,
};
use hapw_core::hierarchy::{build_super_parts, GroupingConfig};
use hapw_core::metrics::{evaluate_shape, MetricThresholds};
use hapw_core::model::{Model, ModelConfig, NoiseVector, ShapeInput};
use hapw_core::train::{mon_loss, total_loss, LossWeights, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn criterion(n: usize, name: &str, run: impl FnOnce() -> Result<(), String>) {
    match run() {
        Ok(()) => println!("ACCEPTANCE {n} ({name}): PASS"),
        Err(reason) => {
            println!("ACCEPTANCE {n} ({name}): FAIL — {reason}");
            panic!("acceptance criterion {n} ({name}) failed: {reason}");
        }
    }
}

fn check(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Small but structurally complete model config used by the forward-pass
/// criteria (3, 4, 6); dimensions scaled down for runtime only.
fn small_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 16,
        num_heads: 2,
        super_encoder_layers: 1,
        part_encoder_layers: 1,
        instance_enc_dim: 4,
        noise_dim: 8,
        head_hidden: [8, 8, 16],
        ff_dim: 16,
        max_parts: 8,
        pointnet_dims: [8, 8, 16],
        ..ModelConfig::default()
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: [f64; 3], index: usize) -> PartPointCloud {
    // pin the two extreme corners so the AABB extent is exactly 2*half,
    // making the super-part structure of the fixtures deterministic
    let mut points = vec![
        Point3::new(-half[0], -half[1], -half[2]),
        Point3::new(half[0], half[1], half[2]),
    ];
    points.extend((0..n.saturating_sub(2)).map(|_| {
        Point3::new(
            rng.gen_range(-half[0]..half[0]),
            rng.gen_range(-half[1]..half[1]),
            rng.gen_range(-half[2]..half[2]),
        )
    }));
    PartPointCloud::new(points, index).unwrap()
}

/// Parts with well-separated extents so each lands in its own super-part.
fn distinct_parts(rng: &mut ChaCha8Rng, count: usize, points: usize) -> Vec<PartPointCloud> {
    (0..count)
        .map(|i| {
            let base = 0.2 + 0.2 * i as f64;
            let half = [
                base + rng.gen_range(0.0..0.02),
                base * 0.6 + rng.gen_range(0.0..0.02),
                base * 0.3 + rng.gen_range(0.0..0.02),
            ];
            random_cloud(rng, points, half, i)
        })
        .collect()
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if let Some(u) = quat_normalize(q) {
            return u;
        }
    }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn acceptance_1_gradient_suite() {
    criterion(1, "gradient suite", || {
        let start = Instant::now();
        // primitives (tol 1e-4) and op-level composites (tol 1e-3) over 20 seeds
        for seed in 0..20u64 {
            for report in hapw_cli::gradcheck::run_suite(seed, false).map_err(|e| e.to_string())? {
                check(report.passed(), || {
                    format!(
                        "seed {seed}: {} max_rel_err {:.3e} exceeds {:.0e}",
                        report.name, report.max_rel_err, report.tolerance
                    )
                })?;
            }
        }
        // model composites (PointNet-lite, attention layer, pose head,
        // total_loss) via finite differences on named parameters, 20 seeds
        let config = small_config();
        let weights = LossWeights::default();
        let probed = [
            "pointnet1.l0.w",
            "part.layer0.attn.wq.w",
            "super.layer0.ff.l1.w",
            "part.head.l3.w",
            "super.head.l0.w",
        ];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
            let parts = distinct_parts(&mut rng, 4, 12);
            let assignment = build_super_parts(&parts, &GroupingConfig::default())
                .map_err(|e| e.to_string())?;
            let input = ShapeInput::new(&parts, &assignment, None).map_err(|e| e.to_string())?;
            let gt: Vec<Pose6DoF> = (0..parts.len())
                .map(|_| {
                    Pose6DoF::new(
                        [
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                        ],
                        random_unit_quat(&mut rng),
                    )
                    .unwrap()
                })
                .collect();
            let sample = TrainSample::new(format!("fd-{seed}"), input, gt)
                .map_err(|e| e.to_string())?;
            let noise = NoiseVector::standard_normal(&mut rng, config.noise_dim);
            let mut values = Model::init_values(&config, seed).map_err(|e| e.to_string())?;

            let eval = |values: &hapw_core::autodiff::ParamValues| -> Result<f64, String> {
                let model =
                    Model::from_values(config.clone(), values).map_err(|e| e.to_string())?;
                let out = model.forward(&sample.input, &noise).map_err(|e| e.to_string())?;
                let (loss, _) = total_loss(&out.part_pose_tensor, &sample, &weights)
                    .map_err(|e| e.to_string())?;
                Ok(loss.item())
            };

            // analytic gradients once
            let model = Model::from_values(config.clone(), &values).map_err(|e| e.to_string())?;
            let out = model.forward(&sample.input, &noise).map_err(|e| e.to_string())?;
            let (loss, _) =
                total_loss(&out.part_pose_tensor, &sample, &weights).map_err(|e| e.to_string())?;
            let store = loss.backward().map_err(|e| e.to_string())?;
            let grads = model.named_grads(&store);

            let h = 1e-5;
            for name in probed {
                let analytic = grads.get(name).cloned().unwrap_or_default();
                let len = values.get(name).expect("param exists").1.len();
                // probe a handful of elements per parameter
                for k in 0..4usize {
                    let idx = (k * 7919) % len;
                    let orig = values.entries.get_mut(name).unwrap().1[idx];
                    values.entries.get_mut(name).unwrap().1[idx] = orig + h;
                    let plus = eval(&values)?;
                    values.entries.get_mut(name).unwrap().1[idx] = orig - h;
                    let minus = eval(&values)?;
                    values.entries.get_mut(name).unwrap().1[idx] = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    let a = analytic.get(idx).copied().unwrap_or(0.0);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    check(rel < 1e-3, || {
                        format!("seed {seed} {name}[{idx}]: rel err {rel:.3e} >= 1e-3")
                    })?;
                }
            }
        }
        let elapsed = start.elapsed();
        check(elapsed.as_secs() < 120, || {
            format!("gradient suite took {elapsed:?}, budget 2 min")
        })
    });
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn acceptance_2_geometry_oracles() {
    criterion(2, "geometry oracles", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2);

        // chamfer vs independent brute force
        for t in 0..1000 {
            let n = rng.gen_range(1..20);
            let m = rng.gen_range(1..20);
            let a = random_cloud(&mut rng, n, [1.0, 1.0, 1.0], 0);
            let b = random_cloud(&mut rng, m, [1.0, 1.0, 1.0], 1);
            let got = chamfer_distance(&a.points, &b.points).map_err(|e| e.to_string())?;
            let dir = |x: &[Point3], y: &[Point3]| -> f64 {
                x.iter()
                    .map(|p| y.iter().map(|q| p.dist2(q)).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / x.len() as f64
            };
            let want = dir(&a.points, &b.points) + dir(&b.points, &a.points);
            check((got - want).abs() < 1e-12, || {
                format!("chamfer trial {t}: {got} vs oracle {want}")
            })?;
        }

        // FPS vs independent greedy oracle
        for t in 0..1000 {
            let n = rng.gen_range(2..30);
            let k = rng.gen_range(1..=n);
            let cloud = random_cloud(&mut rng, n, [1.0, 1.0, 1.0], 0);
            let got = farthest_point_sample_indices(&cloud.points, k, 0)
                .map_err(|e| e.to_string())?;
            let mut chosen = vec![0usize];
            let mut taken = vec![false; n];
            taken[0] = true;
            while chosen.len() < k {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for i in 0..n {
                    if taken[i] {
                        continue;
                    }
                    let d = chosen
                        .iter()
                        .map(|&c| cloud.points[i].dist2(&cloud.points[c]))
                        .fold(f64::INFINITY, f64::min);
                    if d > best.0 {
                        best = (d, i);
                    }
                }
                chosen.push(best.1);
                taken[best.1] = true;
            }
            check(got == chosen, || {
                format!("fps trial {t}: {got:?} vs oracle {chosen:?}")
            })?;
        }

        // AABB vs min/max fold
        for t in 0..1000 {
            let n = rng.gen_range(1..40);
            let cloud = random_cloud(&mut rng, n, [1.3, 0.8, 2.1], 0);
            let aabb = aabb_of(&cloud).map_err(|e| e.to_string())?;
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for p in &cloud.points {
                for (d, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                    min[d] = min[d].min(v);
                    max[d] = max[d].max(v);
                }
            }
            let e = aabb.extents();
            for d in 0..3 {
                check((e[d] - (max[d] - min[d])).abs() < 1e-15, || {
                    format!("aabb trial {t} axis {d}")
                })?;
            }
        }

        // rodrigues vs quaternion sandwich product
        for t in 0..1000 {
            let q = random_unit_quat(&mut rng);
            let r = rodrigues(q).map_err(|e| e.to_string())?;
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let rp = r.apply(&p);
            let sandwich = quat_mul(quat_mul(q, [0.0, p.x, p.y, p.z]), quat_conjugate(q));
            let err = (rp.x - sandwich[1]).abs()
                + (rp.y - sandwich[2]).abs()
                + (rp.z - sandwich[3]).abs();
            check(err < 1e-12, || format!("rodrigues trial {t}: err {err:.3e}"))?;
        }

        // orthonormality and determinant on 10k unit quaternions
        for t in 0..10_000 {
            let q = random_unit_quat(&mut rng);
            let r = rodrigues(q).map_err(|e| e.to_string())?;
            check(r.orthonormality_defect() < 1e-6, || {
                format!("quat {t}: orthonormality defect {}", r.orthonormality_defect())
            })?;
            check((r.det() - 1.0).abs() < 1e-6, || {
                format!("quat {t}: det {}", r.det())
            })?;
        }

        let elapsed = start.elapsed();
        check(elapsed.as_secs() < 60, || {
            format!("geometry oracles took {elapsed:?}, budget 1 min")
        })
    });
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn acceptance_3_constraint_invariants() {
    criterion(3, "constraint invariants", || {
        let config = small_config();
        let values = Model::init_values(&config, 3).map_err(|e| e.to_string())?;
        let model = Model::from_values(config.clone(), &values).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..100 {
            let n = rng.gen_range(2..=5usize);
            let parts = distinct_parts(&mut rng, n, 10);
            let assignment = build_super_parts(&parts, &GroupingConfig::default())
                .map_err(|e| e.to_string())?;
            // pad some shapes to exercise the masked paths
            let pad = if trial % 2 == 0 { Some(n + 2) } else { None };
            let input = ShapeInput::new(&parts, &assignment, pad).map_err(|e| e.to_string())?;
            let noise = NoiseVector::standard_normal(&mut rng, config.noise_dim);
            let out = model.forward(&input, &noise).map_err(|e| e.to_string())?;

            for (i, pose) in out.part_poses.iter().enumerate() {
                let qn: f64 = pose.quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
                check((qn - 1.0).abs() < 1e-6, || {
                    format!("trial {trial} part {i}: |q| = {qn}")
                })?;
                for (d, t) in pose.translation.iter().enumerate() {
                    check(t.abs() < 1.0, || {
                        format!("trial {trial} part {i} axis {d}: t = {t}")
                    })?;
                }
            }

            for (name, attn) in &out.attention_trace {
                let shape = attn.shape().to_vec();
                let (h, rows, keys) = (shape[0], shape[1], shape[2]);
                let data = attn.to_vec();
                // part-level layers attend over (possibly padded) parts
                let key_mask: Option<&[bool]> =
                    if name.starts_with("part.layer") { Some(&input.mask) } else { None };
                for b in 0..h {
                    for r in 0..rows {
                        let row = &data[(b * rows + r) * keys..(b * rows + r + 1) * keys];
                        let sum: f64 = row.iter().sum();
                        check((sum - 1.0).abs() < 1e-6, || {
                            format!("trial {trial} {name} head {b} row {r}: sum {sum}")
                        })?;
                        if let Some(mask) = key_mask {
                            for (j, &m) in mask.iter().enumerate() {
                                if !m {
                                    check(row[j] == 0.0, || {
                                        format!(
                                            "trial {trial} {name} head {b} row {r} key {j}: \
                                             masked entry {} not exactly 0",
                                            row[j]
                                        )
                                    })?;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn acceptance_4_permutation_equivariance() {
    criterion(4, "part-permutation equivariance", || {
        use rand::seq::SliceRandom;
        let config = small_config();
        let values = Model::init_values(&config, 4).map_err(|e| e.to_string())?;
        let model = Model::from_values(config.clone(), &values).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..50 {
            let n = rng.gen_range(3..=6usize);
            let parts = distinct_parts(&mut rng, n, 10);
            let noise = NoiseVector::standard_normal(&mut rng, config.noise_dim);

            let forward = |ordered: &[PartPointCloud]| -> Result<(Vec<Pose6DoF>, usize), String> {
                let relabeled: Vec<PartPointCloud> = ordered
                    .iter()
                    .enumerate()
                    .map(|(i, p)| PartPointCloud::new(p.points.clone(), i).unwrap())
                    .collect();
                let assignment = build_super_parts(&relabeled, &GroupingConfig::default())
                    .map_err(|e| e.to_string())?;
                let input =
                    ShapeInput::new(&relabeled, &assignment, None).map_err(|e| e.to_string())?;
                let out = model.forward(&input, &noise).map_err(|e| e.to_string())?;
                Ok((out.part_poses, assignment.num_supers))
            };

            let (base, supers_a) = forward(&parts)?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted_parts: Vec<PartPointCloud> =
                perm.iter().map(|&i| parts[i].clone()).collect();
            let (permuted, supers_b) = forward(&permuted_parts)?;

            for (j, &i) in perm.iter().enumerate() {
                let dt: f64 = base[i]
                    .translation
                    .iter()
                    .zip(&permuted[j].translation)
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                let dq: f64 = base[i]
                    .quaternion
                    .iter()
                    .zip(&permuted[j].quaternion)
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                check(dt < 1e-5 && dq < 1e-5, || {
                    format!(
                        "trial {trial} part {i}->{j}: dt {dt:.2e} dq {dq:.2e} \
                         (n {n}, perm {perm:?}, supers {supers_a}/{supers_b})"
                    )
                })?;
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn acceptance_5_clustering_oracle() {
    criterion(5, "hierarchy clustering", || {
        let grouping = GroupingConfig::default();
        let mut shapes = Vec::new();
        for (category, count, seed) in [
            (SynthCategory::Table, 34usize, 50u64),
            (SynthCategory::Chair, 33, 51),
            (SynthCategory::Lamp, 33, 52),
        ] {
            let spec = SynthSpec {
                category,
                num_shapes: count,
                points_per_part: 48,
                seed,
            };
            for record in generate_synthetic(&spec).map_err(|e| e.to_string())? {
                shapes.push(
                    hapw_core::data::preprocess(&record, 48).map_err(|e| e.to_string())?,
                );
            }
        }
        assert_eq!(shapes.len(), 100);

        for shape in &shapes {
            let got = build_super_parts(&shape.parts, &grouping).map_err(|e| e.to_string())?;

            // independent greedy oracle over brute-force equivalence
            let equivalent = |a: &PartPointCloud, b: &PartPointCloud| -> Result<bool, String> {
                let (ea, eb) = (
                    aabb_of(a).map_err(|e| e.to_string())?.extents(),
                    aabb_of(b).map_err(|e| e.to_string())?.extents(),
                );
                let aabb_ok = (0..3).all(|d| (ea[d] - eb[d]).abs() <= grouping.aabb_tol);
                if !aabb_ok {
                    return Ok(false);
                }
                let d = chamfer_distance(&a.points, &b.points).map_err(|e| e.to_string())?;
                Ok(d < grouping.chamfer_tol)
            };
            let mut seeds: Vec<usize> = Vec::new();
            let mut oracle = vec![0usize; shape.parts.len()];
            for i in 0..shape.parts.len() {
                let mut assigned = None;
                for (c, &s) in seeds.iter().enumerate() {
                    if equivalent(&shape.parts[i], &shape.parts[s])? {
                        assigned = Some(c);
                        break;
                    }
                }
                oracle[i] = assigned.unwrap_or_else(|| {
                    seeds.push(i);
                    seeds.len() - 1
                });
            }
            let got_assignment: Vec<usize> =
                (0..shape.parts.len()).map(|i| got.super_of(i)).collect();
            check(got_assignment == oracle, || {
                format!(
                    "{}: clustering {:?} vs oracle {:?}",
                    shape.shape_id, got_assignment, oracle
                )
            })?;

            // identical parts always co-clustered; AABB-distant parts never
            for i in 0..shape.parts.len() {
                for j in i + 1..shape.parts.len() {
                    let identical = shape.parts[i].points == shape.parts[j].points;
                    if identical {
                        check(got.super_of(i) == got.super_of(j), || {
                            format!("{}: identical parts {i},{j} split", shape.shape_id)
                        })?;
                    }
                    let (ei, ej) = (
                        aabb_of(&shape.parts[i]).unwrap().extents(),
                        aabb_of(&shape.parts[j]).unwrap().extents(),
                    );
                    let far = (0..3).any(|d| (ei[d] - ej[d]).abs() > grouping.aabb_tol);
                    if far {
                        check(got.super_of(i) != got.super_of(j), || {
                            format!("{}: AABB-distant parts {i},{j} co-clustered", shape.shape_id)
                        })?;
                    }
                }
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn acceptance_6_metric_suite() {
    criterion(6, "metric suite", || {
        let thresholds = MetricThresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(66);

        let spec = SynthSpec {
            category: SynthCategory::Table,
            num_shapes: 5,
            points_per_part: 32,
            seed: 6,
        };
        let shapes: Vec<_> = generate_synthetic(&spec)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|r| hapw_core::data::preprocess(r, 32).unwrap())
            .collect();

        // perfect predictions
        for shape in &shapes {
            let report = evaluate_shape(
                &shape.parts,
                &shape.gt_poses,
                &[shape.gt_poses.clone()],
                &thresholds,
                hapw_core::metrics::DEFAULT_ADJACENCY_EPS,
            )
            .map_err(|e| e.to_string())?;
            check(report.scd.abs() < 1e-12, || {
                format!("{}: perfect SCD {}", shape.shape_id, report.scd)
            })?;
            for &(tau, v) in report.pa.iter().chain(report.ca.iter()) {
                check((v - 100.0).abs() < 1e-9, || {
                    format!("{}: perfect PA/CA({tau}) = {v}", shape.shape_id)
                })?;
            }
        }

        // random K=10 variant sets: monotonicity, exact means, DS ordering
        let perturbed = |gt: &[Pose6DoF], rng: &mut ChaCha8Rng, scale: f64| -> Vec<Pose6DoF> {
            gt.iter()
                .map(|p| {
                    let t = [
                        p.translation[0] + rng.gen_range(-scale..scale),
                        p.translation[1] + rng.gen_range(-scale..scale),
                        p.translation[2] + rng.gen_range(-scale..scale),
                    ];
                    let dq = quat_normalize([
                        1.0,
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                    ])
                    .unwrap();
                    Pose6DoF::new(t, quat_normalize(quat_mul(dq, p.quaternion)).unwrap()).unwrap()
                })
                .collect()
        };
        for trial in 0..100 {
            let shape = &shapes[trial % shapes.len()];
            let scale = rng.gen_range(0.01..0.6);
            let variants: Vec<Vec<Pose6DoF>> = (0..10)
                .map(|_| perturbed(&shape.gt_poses, &mut rng, scale))
                .collect();
            let report = evaluate_shape(
                &shape.parts,
                &shape.gt_poses,
                &variants,
                &thresholds,
                hapw_core::metrics::DEFAULT_ADJACENCY_EPS,
            )
            .map_err(|e| e.to_string())?;

            for curve in [&report.pa, &report.ca] {
                for w in curve.windows(2) {
                    check(w[0].1 <= w[1].1 + 1e-12, || {
                        format!("trial {trial}: curve not monotone: {curve:?}")
                    })?;
                }
            }
            let mean = |c: &[(f64, f64)]| c.iter().map(|&(_, v)| v).sum::<f64>() / c.len() as f64;
            check((report.mpa - mean(&report.pa)).abs() < 1e-12, || {
                format!("trial {trial}: mPA {} vs exact mean", report.mpa)
            })?;
            check((report.mca - mean(&report.ca)).abs() < 1e-12, || {
                format!("trial {trial}: mCA {} vs exact mean", report.mca)
            })?;
            check(
                0.0 <= report.wqds && report.wqds <= report.qds + 1e-12
                    && report.qds <= report.ds + 1e-12,
                || {
                    format!(
                        "trial {trial}: DS ordering violated: ds {} qds {} wqds {}",
                        report.ds, report.qds, report.wqds
                    )
                },
            )?;
        }

        // MoN(N) is the minimum over the sampled losses
        let config = small_config();
        let model = Model::from_values(config.clone(), &Model::init_values(&config, 6).unwrap())
            .map_err(|e| e.to_string())?;
        let weights = LossWeights::default();
        for trial in 0..10 {
            let shape = &shapes[trial % shapes.len()];
            let assignment = build_super_parts(&shape.parts, &GroupingConfig::default())
                .map_err(|e| e.to_string())?;
            let input = ShapeInput::new(&shape.parts, &assignment, None)
                .map_err(|e| e.to_string())?;
            let sample = TrainSample::new("mon".into(), input, shape.gt_poses.clone())
                .map_err(|e| e.to_string())?;
            let seed = 600 + trial as u64;
            let mut sampled = Vec::new();
            let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                let noise = NoiseVector::standard_normal(&mut rng_a, config.noise_dim);
                let out = model.forward(&sample.input, &noise).map_err(|e| e.to_string())?;
                let (_, values) = total_loss(&out.part_pose_tensor, &sample, &weights)
                    .map_err(|e| e.to_string())?;
                sampled.push(values.total);
            }
            let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
            let mon = mon_loss(&model, &sample, &weights, 5, &mut rng_b)
                .map_err(|e| e.to_string())?;
            for (k, &s) in sampled.iter().enumerate() {
                check(mon.values.total <= s, || {
                    format!("trial {trial}: MoN {} > sample {k} loss {s}", mon.values.total)
                })?;
            }
            let min = sampled.iter().cloned().fold(f64::INFINITY, f64::min);
            check(mon.values.total == min, || {
                format!("trial {trial}: MoN {} != min {min}", mon.values.total)
            })?;
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn acceptance_9_determinism() {
    criterion(9, "determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let hapw = env!("CARGO_BIN_EXE_hapw");
        let run = |args: &[&str]| -> Result<(), String> {
            let out = std::process::Command::new(hapw)
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            if out.status.success() {
                Ok(())
            } else {
                Err(String::from_utf8_lossy(&out.stderr).into_owned())
            }
        };

        let data = dir.path().join("data");
        run(&[
            "gen-data", "--category", "table", "--num-shapes", "3",
            "--points-per-part", "16", "--out", data.to_str().unwrap(),
        ])?;
        let config = dir.path().join("cfg.toml");
        std::fs::write(
            &config,
            "points_per_part = 16\n[model]\nfeat_dim = 16\nnum_heads = 2\n\
             super_encoder_layers = 1\npart_encoder_layers = 1\ninstance_enc_dim = 4\n\
             noise_dim = 8\nhead_hidden = [8, 8, 16]\nff_dim = 16\nmax_parts = 8\n\
             pointnet_dims = [8, 8, 16]\n[train]\nepochs = 3\nbatch_size = 2\nmon_samples = 2\n",
        )
        .unwrap();

        // two independent training runs, identical seeds
        let mut csvs = Vec::new();
        for tag in ["a", "b"] {
            let csv = dir.path().join(format!("loss-{tag}.csv"));
            run(&[
                "train", "--config", config.to_str().unwrap(),
                "--data-dir", data.to_str().unwrap(),
                "--out-checkpoint", dir.path().join(format!("m-{tag}.hapw")).to_str().unwrap(),
                "--loss-csv", csv.to_str().unwrap(), "--seed", "5",
            ])?;
            csvs.push(std::fs::read(&csv).unwrap());
        }
        check(csvs[0] == csvs[1], || {
            "identical seeds produced different loss CSVs".into()
        })?;

        // two assemble runs, fixed seed, byte-identical prediction files
        let ckpt = dir.path().join("m-a.hapw");
        let mut preds = Vec::new();
        for tag in ["p1", "p2"] {
            let out_dir = dir.path().join(tag);
            run(&[
                "assemble", "--checkpoint", ckpt.to_str().unwrap(),
                "--shape", data.join("table-0000.json").to_str().unwrap(),
                "--config", config.to_str().unwrap(),
                "--variants", "2", "--seed", "11",
                "--out-dir", out_dir.to_str().unwrap(),
            ])?;
            preds.push((
                std::fs::read(out_dir.join("table-0000.pred0.json")).unwrap(),
                std::fs::read(out_dir.join("table-0000.pred1.json")).unwrap(),
            ));
        }
        check(preds[0] == preds[1], || {
            "fixed-seed assemble produced different bytes".into()
        })
    });
}
