use super::*;
use crate::autodiff::finite_difference_check;
use crate::geom::Point3;
use crate::hierarchy::{build_super_parts, GroupingConfig};

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
        use_super_encoder: true,
        pointnet_dims: [8, 8, 16],
    }
}

/// Axis-aligned box sampled on its 8 corners, scaled per axis and shifted.
fn box_part(index: usize, scale: [f64; 3], offset: [f64; 3]) -> PartPointCloud {
    let mut pts = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                pts.push(Point3::new(
                    sx * scale[0] + offset[0],
                    sy * scale[1] + offset[1],
                    sz * scale[2] + offset[2],
                ));
            }
        }
    }
    PartPointCloud::new(pts, index).unwrap()
}

fn grouped(parts: &[PartPointCloud]) -> SuperPartAssignment {
    build_super_parts(parts, &GroupingConfig::default()).unwrap()
}

fn mixed_shape() -> (Vec<PartPointCloud>, SuperPartAssignment) {
    // parts are given in canonical (centered) coordinates, as produced by
    // preprocessing: four equivalent legs + a distinct top -> two super-parts
    let parts = vec![
        box_part(0, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(1, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(2, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(3, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(4, [0.6, 0.05, 0.6], [0.0; 3]),
    ];
    let asg = grouped(&parts);
    assert_eq!(asg.num_supers, 2);
    (parts, asg)
}

fn fixed_noise(dim: usize) -> NoiseVector {
    NoiseVector((0..dim).map(|i| ((i as f64) * 0.37).sin()).collect())
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let cfg = small_config();
    let a = Model::init_values(&cfg, 7).unwrap();
    let b = Model::init_values(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let c = Model::init_values(&cfg, 8).unwrap();
    assert_ne!(a, c);
    for (name, (_, data)) in &a.entries {
        if name.ends_with(".b") {
            assert!(data.iter().all(|&v| v == 0.0), "bias {name} not zero");
        }
    }
}

#[test]
fn pointnet_is_point_permutation_invariant() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 3).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();

    // reverse the point order within every part
    let rev: Vec<PartPointCloud> = parts
        .iter()
        .map(|p| {
            let mut pts = p.points.clone();
            pts.reverse();
            PartPointCloud::new(pts, p.part_index).unwrap()
        })
        .collect();
    let input_rev = ShapeInput::new(&rev, &asg, None).unwrap();

    let mask = vec![true; parts.len()];
    let a = model.pointnet_encode("pointnet1", &input.points, &mask).unwrap();
    let b = model
        .pointnet_encode("pointnet1", &input_rev.points, &mask)
        .unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn forward_satisfies_pose_constraints() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 11).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let out = model.forward(&input, &fixed_noise(cfg.noise_dim)).unwrap();

    assert_eq!(out.part_poses.len(), parts.len());
    assert_eq!(out.super_poses.len(), asg.num_supers);
    for pose in out.part_poses.iter().chain(&out.super_poses) {
        for &t in &pose.translation {
            assert!(t.is_finite() && t.abs() < 1.0, "translation out of range: {t}");
        }
        let n: f64 = pose.quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9, "quaternion norm {n}");
    }
}

#[test]
fn single_super_attention_weight_is_one() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 5).unwrap()).unwrap();
    // four equivalent legs only: a single super-part
    let parts = vec![
        box_part(0, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(1, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(2, [0.05, 0.4, 0.05], [0.0; 3]),
        box_part(3, [0.05, 0.4, 0.05], [0.0; 3]),
    ];
    let asg = grouped(&parts);
    assert_eq!(asg.num_supers, 1);
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let out = model.forward(&input, &fixed_noise(cfg.noise_dim)).unwrap();

    for (name, attn) in &out.attention_trace {
        if name == "cross" || name.starts_with("super.layer") {
            // single key: every softmax row collapses to exactly 1
            assert!(
                attn.data().iter().all(|&w| w == 1.0),
                "{name} weights not exactly 1: {:?}",
                attn.data()
            );
        }
    }
}

#[test]
fn forward_is_part_permutation_equivariant() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 9).unwrap()).unwrap();
    // all parts geometrically distinct so each is its own super-part
    let parts = vec![
        box_part(0, [0.1, 0.1, 0.1], [0.0, 0.0, 0.0]),
        box_part(1, [0.3, 0.1, 0.1], [0.4, 0.0, 0.0]),
        box_part(2, [0.1, 0.5, 0.1], [0.0, 0.5, 0.0]),
        box_part(3, [0.1, 0.1, 0.8], [0.0, 0.0, 0.6]),
    ];
    let asg = grouped(&parts);
    assert_eq!(asg.num_supers, parts.len());
    let noise = fixed_noise(cfg.noise_dim);
    let base = model
        .forward(&ShapeInput::new(&parts, &asg, None).unwrap(), &noise)
        .unwrap();

    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<PartPointCloud> = perm.iter().map(|&i| parts[i].clone()).collect();
    let asg_p = grouped(&permuted);
    let out = model
        .forward(&ShapeInput::new(&permuted, &asg_p, None).unwrap(), &noise)
        .unwrap();

    for (j, &i) in perm.iter().enumerate() {
        let a = &base.part_poses[i];
        let b = &out.part_poses[j];
        for k in 0..3 {
            assert!((a.translation[k] - b.translation[k]).abs() < 1e-6);
        }
        for k in 0..4 {
            assert!((a.quaternion[k] - b.quaternion[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn padding_leaves_real_outputs_unchanged() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 13).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let noise = fixed_noise(cfg.noise_dim);
    let plain = model
        .forward(&ShapeInput::new(&parts, &asg, None).unwrap(), &noise)
        .unwrap();
    let padded = model
        .forward(&ShapeInput::new(&parts, &asg, Some(8)).unwrap(), &noise)
        .unwrap();
    assert_eq!(plain.part_poses.len(), padded.part_poses.len());
    for (a, b) in plain
        .part_pose_tensor
        .data()
        .iter()
        .zip(padded.part_pose_tensor.data())
    {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 21).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let noise = fixed_noise(cfg.noise_dim);
    let a = model.forward(&input, &noise).unwrap();
    let b = model.forward(&input, &noise).unwrap();
    assert_eq!(a.part_pose_tensor.data(), b.part_pose_tensor.data());
    assert_eq!(a.super_pose_tensor.data(), b.super_pose_tensor.data());
}

#[test]
fn ablation_uses_identity_latent_poses() {
    let mut cfg = small_config();
    cfg.use_super_encoder = false;
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 2).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let out = model.forward(&input, &fixed_noise(cfg.noise_dim)).unwrap();
    for pose in &out.super_poses {
        assert_eq!(pose.translation, [0.0; 3]);
        assert_eq!(pose.quaternion, [1.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn gradients_reach_both_stages() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 17).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let out = model.forward(&input, &fixed_noise(cfg.noise_dim)).unwrap();
    let loss = out.part_pose_tensor.square().sum_all();
    let store = loss.backward().unwrap();
    let grads = model.named_grads(&store);
    for name in [
        "pointnet1.l0.w",
        "pointnet2.l0.w",
        "super.head.l0.w",
        "part.head.l3.w",
        "super.layer0.attn.wq.w",
        "part.layer0.attn.wq.w",
        "cross.attn.wk.w",
    ] {
        let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "gradient for {name} is identically zero"
        );
    }
}

#[test]
fn forward_gradients_match_finite_differences() {
    let cfg = small_config();
    let values = Model::init_values(&cfg, 23).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    let noise = fixed_noise(cfg.noise_dim);

    for target in ["pointnet1.l0.w", "super.head.l3.w", "part.layer0.attn.wq.w"] {
        let (shape, data) = values.get(target).unwrap().clone();
        let leaf = Tensor::leaf(&shape, data).unwrap();
        let cfg_c = cfg.clone();
        let values_c = values.clone();
        let input_c = input.clone();
        let noise_c = noise.clone();
        let f = move |inputs: &[Tensor]| -> crate::error::Result<Tensor> {
            let mut params = values_c.to_leaves();
            for p in params.iter_mut() {
                if p.name == target {
                    p.tensor = inputs[0].clone();
                }
            }
            let model = Model::from_parameters(cfg_c.clone(), params)?;
            let out = model.forward(&input_c, &noise_c)?;
            Ok(out.part_pose_tensor.square().sum_all())
        };
        let report =
            finite_difference_check(target, &[leaf], &f, 1e-5, 1e-3, Some(12)).unwrap();
        assert!(
            report.passed(),
            "{target}: max rel err {} over {} probes",
            report.max_rel_err,
            report.checked
        );
    }
}

#[test]
fn rejects_too_many_parts_and_bad_noise() {
    let cfg = small_config();
    let model = Model::from_values(cfg.clone(), &Model::init_values(&cfg, 1).unwrap()).unwrap();
    let (parts, asg) = mixed_shape();
    let input = ShapeInput::new(&parts, &asg, None).unwrap();
    assert!(model.forward(&input, &NoiseVector(vec![0.0; 3])).is_err());
    let big = ShapeInput::new(&parts, &asg, Some(cfg.max_parts + 1)).unwrap();
    assert!(model.forward(&big, &fixed_noise(cfg.noise_dim)).is_err());
}

#[test]
fn instance_encodings_are_frozen_and_rank_dependent() {
    let a = instance_encoding(0, 40);
    let b = instance_encoding(0, 40);
    let c = instance_encoding(1, 40);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn config_validation_catches_bad_dims() {
    let mut cfg = small_config();
    cfg.num_heads = 3; // 16 % 3 != 0
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.pointnet_dims = [8, 8, 32];
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
    assert_eq!(ModelConfig::default().part_hidden(), 296);
}
