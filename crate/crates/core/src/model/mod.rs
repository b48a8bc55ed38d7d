//! The two-stage network: a super-part encoder predicting latent super-part
//! poses, and a part encoder with cross-level and within-level attention
//! predicting the final part poses.

mod config;
#[cfg(test)]
mod tests;

pub use config::ModelConfig;

use crate::autodiff::{GradStore, ParamValues, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::geom::{PartPointCloud, Pose6DoF};
use crate::hierarchy::SuperPartAssignment;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Fixed seed for the frozen instance-encoding table; shared across shapes
/// and training runs.
const INSTANCE_ENC_SEED: u64 = 0x1357_9bdf;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Frozen instance encoding for the part with the given rank among its
/// geometric-equivalence siblings.
pub fn instance_encoding(rank: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(INSTANCE_ENC_SEED ^ (rank as u64).wrapping_mul(0x9e37_79b9));
    (0..dim)
        .map(|_| {
            // Box-Muller standard normal
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// One noise draw conditioning a forward pass.
#[derive(Debug, Clone)]
pub struct NoiseVector(pub Vec<f64>);

impl NoiseVector {
    pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> NoiseVector {
        let v = (0..dim)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        NoiseVector(v)
    }
}

/// A shape prepared for the network: equal-length canonical part clouds,
/// grouping, instance ranks, and an optional padding mask.
#[derive(Debug, Clone)]
pub struct ShapeInput {
    /// Constant (n_total, d, 3) tensor of canonical part points; padded rows
    /// repeat zeros.
    pub points: Tensor,
    /// True for real parts, false for padding.
    pub mask: Vec<bool>,
    /// Assignment over the real parts only.
    pub assignment: SuperPartAssignment,
    /// Parent super index per row (padded rows map to 0).
    pub part_super: Vec<usize>,
    /// Instance rank per row.
    pub instance_ranks: Vec<usize>,
    pub num_real: usize,
    pub points_per_part: usize,
}

impl ShapeInput {
    pub fn new(
        parts: &[PartPointCloud],
        assignment: &SuperPartAssignment,
        pad_to: Option<usize>,
    ) -> Result<ShapeInput> {
        if parts.is_empty() {
            return Err(Error::invalid("ShapeInput: no parts"));
        }
        let d = parts[0].len();
        if parts.iter().any(|p| p.len() != d) {
            return Err(Error::invalid(
                "ShapeInput: all parts must have the same point count",
            ));
        }
        let n_real = parts.len();
        let n_total = pad_to.unwrap_or(n_real).max(n_real);
        let mut data = vec![0.0; n_total * d * 3];
        for (i, p) in parts.iter().enumerate() {
            for (j, pt) in p.points.iter().enumerate() {
                let base = (i * d + j) * 3;
                data[base] = pt.x;
                data[base + 1] = pt.y;
                data[base + 2] = pt.z;
            }
        }
        let mut mask = vec![true; n_real];
        mask.resize(n_total, false);
        let mut part_super: Vec<usize> = (0..n_real).map(|i| assignment.super_of(i)).collect();
        part_super.resize(n_total, 0);
        let mut instance_ranks: Vec<usize> =
            (0..n_real).map(|i| assignment.rank_within_super(i)).collect();
        instance_ranks.resize(n_total, 0);
        Ok(ShapeInput {
            points: Tensor::from_vec(&[n_total, d, 3], data)?,
            mask,
            assignment: assignment.clone(),
            part_super,
            instance_ranks,
            num_real: n_real,
            points_per_part: d,
        })
    }

    pub fn num_total(&self) -> usize {
        self.mask.len()
    }

    pub fn num_supers(&self) -> usize {
        self.assignment.num_supers
    }
}

/// One noise sample's prediction: per-part poses plus the latent super-part
/// poses, with the tensors still attached to the tape for training.
pub struct ForwardOutput {
    /// (n_real, 7) rows of [t; q], tanh-bounded translation, unit quaternion.
    pub part_pose_tensor: Tensor,
    /// (M, 7) latent super-part poses (identity rows when the super encoder
    /// is disabled).
    pub super_pose_tensor: Tensor,
    pub part_poses: Vec<Pose6DoF>,
    pub super_poses: Vec<Pose6DoF>,
    /// Count of zero-norm raw quaternions replaced by the identity.
    pub quat_fallbacks: usize,
    /// Attention weight matrices recorded during the pass, keyed by stage.
    pub attention_trace: Vec<(String, Tensor)>,
}

/// Decoded prediction detached from the tape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AssemblyPrediction {
    pub part_poses: Vec<Pose6DoF>,
    pub super_poses: Vec<Pose6DoF>,
    pub part_super: Vec<usize>,
}

impl ForwardOutput {
    pub fn to_prediction(&self, input: &ShapeInput) -> AssemblyPrediction {
        AssemblyPrediction {
            part_poses: self.part_poses.clone(),
            super_poses: self.super_poses.clone(),
            part_super: input.part_super[..input.num_real].to_vec(),
        }
    }
}

/// Model instance: immutable leaf tensors created from a [`ParamValues`]
/// master copy. Cheap to re-instantiate per worker.
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    by_name: HashMap<String, Tensor>,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (1.0 / rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Model {
    /// Deterministic parameter initialization: linear weights uniform in
    /// +-sqrt(1/fan_in), biases zero.
    pub fn init_values(config: &ModelConfig, seed: u64) -> Result<ParamValues> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = ParamValues::new();
        let mut linear = |values: &mut ParamValues, name: &str, fan_in: usize, fan_out: usize| {
            values.insert(
                &format!("{name}.w"),
                vec![fan_in, fan_out],
                uniform_fan_in(&mut rng, fan_in, fan_out),
            );
            values.insert(&format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]);
        };

        let f = config.feat_dim;
        let [p0, p1, p2] = config.pointnet_dims;
        for pn in ["pointnet1", "pointnet2"] {
            linear(&mut values, &format!("{pn}.l0"), 3, p0);
            linear(&mut values, &format!("{pn}.l1"), p0, p1);
            linear(&mut values, &format!("{pn}.l2"), p1, p2);
        }

        linear(&mut values, "super.noise_proj", f + config.noise_dim, f);
        for layer in 0..config.super_encoder_layers {
            let base = format!("super.layer{layer}");
            for m in ["wq", "wk", "wv", "wo"] {
                linear(&mut values, &format!("{base}.attn.{m}"), f, f);
            }
            linear(&mut values, &format!("{base}.ff.l1"), f, config.ff_dim);
            linear(&mut values, &format!("{base}.ff.l2"), config.ff_dim, f);
        }
        let [h0, h1, h2] = config.head_hidden;
        linear(&mut values, "super.head.l0", f, h0);
        linear(&mut values, "super.head.l1", h0, h1);
        linear(&mut values, "super.head.l2", h1, h2);
        linear(&mut values, "super.head.l3", h2, 7);

        linear(&mut values, "part.noise_proj", f + config.noise_dim, f);
        for m in ["wq", "wk", "wv", "wo"] {
            linear(&mut values, &format!("cross.attn.{m}"), f, f);
        }
        linear(&mut values, "cross.ff.l1", f, config.ff_dim);
        linear(&mut values, "cross.ff.l2", config.ff_dim, f);

        let h = config.part_hidden();
        for layer in 0..config.part_encoder_layers {
            let base = format!("part.layer{layer}");
            // queries/keys see the 7-dim parent pose appended to the hidden state
            linear(&mut values, &format!("{base}.attn.wq"), h + 7, h);
            linear(&mut values, &format!("{base}.attn.wk"), h + 7, h);
            linear(&mut values, &format!("{base}.attn.wv"), h, h);
            linear(&mut values, &format!("{base}.attn.wo"), h, h);
            linear(&mut values, &format!("{base}.ff.l1"), h, config.ff_dim);
            linear(&mut values, &format!("{base}.ff.l2"), config.ff_dim, h);
        }
        linear(&mut values, "part.head.l0", h, h0);
        linear(&mut values, "part.head.l1", h0, h1);
        linear(&mut values, "part.head.l2", h1, h2);
        linear(&mut values, "part.head.l3", h2, 7);

        Ok(values)
    }

    /// Instantiate differentiable leaves from the master values.
    pub fn from_values(config: ModelConfig, values: &ParamValues) -> Result<Model> {
        Self::from_parameters(config, values.to_leaves())
    }

    /// Build a model around pre-existing leaf tensors (used by gradient
    /// checks that need to own a specific leaf).
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Model> {
        config.validate()?;
        let by_name = params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        Ok(Model {
            config,
            params,
            by_name,
        })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    /// Collect the gradients of this model's leaves from a store, keyed by
    /// parameter name.
    pub fn named_grads(&self, store: &GradStore) -> std::collections::BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter_map(|p| store.get(&p.tensor).map(|g| (p.name.clone(), g.to_vec())))
            .collect()
    }

    fn p(&self, name: &str) -> Tensor {
        self.by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone()
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        x.matmul(&self.p(&format!("{name}.w")))?
            .add(&self.p(&format!("{name}.b")))
    }

    /// Shared per-point MLP followed by max-pool over points; padded parts
    /// yield zero features.
    pub fn pointnet_encode(&self, which: &str, points: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let (n, d) = (points.shape()[0], points.shape()[1]);
        let flat = points.reshape(&[n * d, 3])?;
        let mut x = self.linear(&flat, &format!("{which}.l0"))?.relu();
        x = self.linear(&x, &format!("{which}.l1"))?.relu();
        x = self.linear(&x, &format!("{which}.l2"))?;
        let feat = x
            .reshape(&[n, d, self.config.feat_dim])?
            .max_axis(1)?;
        self.apply_row_mask(&feat, mask)
    }

    fn apply_row_mask(&self, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        if mask.iter().all(|&m| m) {
            return Ok(x.clone());
        }
        let rows: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(&[mask.len(), 1], rows)?;
        x.mul(&m)
    }

    /// Multi-head attention with optional separate query/key inputs and key
    /// masking. `q_in`/`k_in` feed the score projections while `v_in` feeds
    /// the values; output width equals the value width.
    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        base: &str,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        key_mask: Option<&[bool]>,
        trace: &mut Vec<(String, Tensor)>,
        trace_name: &str,
    ) -> Result<Tensor> {
        let heads = self.config.num_heads;
        let q = self.linear(q_in, &format!("{base}.wq"))?;
        let k = self.linear(k_in, &format!("{base}.wk"))?;
        let v = self.linear(v_in, &format!("{base}.wv"))?;
        let (n, width) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        let dh = width / heads;
        let split = |t: &Tensor, rows: usize| -> Result<Tensor> {
            t.reshape(&[rows, heads, dh])?.permute(&[1, 0, 2])
        };
        let qh = split(&q, n)?;
        let kh = split(&k, m)?;
        let vh = split(&v, m)?;
        let scores = qh
            .bmm(&kh.permute(&[0, 2, 1])?)?
            .scale(1.0 / (dh as f64).sqrt());
        let attn = scores.masked_softmax_last(key_mask)?;
        trace.push((trace_name.to_string(), attn.clone()));
        let ctx = attn.bmm(&vh)?.permute(&[1, 0, 2])?.reshape(&[n, width])?;
        self.linear(&ctx, &format!("{base}.wo"))
    }

    /// Post-norm transformer encoder layer: MHA + residual + layer norm,
    /// then a two-layer feed-forward with ReLU + residual + layer norm.
    #[allow(clippy::too_many_arguments)]
    fn encoder_layer(
        &self,
        base: &str,
        x: &Tensor,
        qk_extra: Option<&Tensor>,
        kv: Option<&Tensor>,
        key_mask: Option<&[bool]>,
        row_mask: &[bool],
        trace: &mut Vec<(String, Tensor)>,
        trace_name: &str,
    ) -> Result<Tensor> {
        let q_in = match qk_extra {
            Some(e) => Tensor::concat(&[x.clone(), e.clone()], 1)?,
            None => x.clone(),
        };
        let kv_x = kv.unwrap_or(x);
        let k_in = match (qk_extra, kv) {
            // within-level: keys also see the pose extra
            (Some(e), None) => Tensor::concat(&[x.clone(), e.clone()], 1)?,
            _ => kv_x.clone(),
        };
        let attn = self.mha(
            &format!("{base}.attn"),
            &q_in,
            &k_in,
            kv_x,
            key_mask,
            trace,
            trace_name,
        )?;
        let y = x.add(&attn)?.layer_norm(LAYER_NORM_EPS)?;
        let ff = self.linear(&y, &format!("{base}.ff.l1"))?.relu();
        let ff = self.linear(&ff, &format!("{base}.ff.l2"))?;
        let out = y.add(&ff)?.layer_norm(LAYER_NORM_EPS)?;
        self.apply_row_mask(&out, row_mask)
    }

    /// Four-layer pose head: ReLU-separated hidden layers, then a linear map
    /// to 7; tanh bounds the translation and the quaternion is normalized to
    /// unit norm (zero-norm raw quaternions fall back to the identity).
    fn pose_head(&self, base: &str, x: &Tensor, fallbacks: &mut usize) -> Result<Tensor> {
        let h = self.linear(x, &format!("{base}.l0"))?.relu();
        let h = self.linear(&h, &format!("{base}.l1"))?.relu();
        let h = self.linear(&h, &format!("{base}.l2"))?.relu();
        let raw = self.linear(&h, &format!("{base}.l3"))?;
        let n = raw.shape()[0];
        let t = raw.slice(1, 0, 3)?.tanh_op();
        let q = raw.slice(1, 3, 7)?;
        // rows with zero raw quaternion get the identity substituted
        let norms: Vec<f64> = (0..n)
            .map(|i| {
                q.data()[4 * i..4 * i + 4]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let zero_rows: Vec<bool> = norms.iter().map(|&v| v < 1e-12).collect();
        *fallbacks += zero_rows.iter().filter(|&&z| z).count();
        // the guard sits inside the sqrt so zero rows see sqrt(0 + 1),
        // keeping the backward pass finite
        let guard = Tensor::from_vec(
            &[n, 1],
            zero_rows.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect(),
        )?;
        let norm_t = q
            .square()
            .sum_axis(1)?
            .reshape(&[n, 1])?
            .add(&guard)?
            .sqrt_op();
        let q_unit = q.div(&norm_t)?;
        let identity_rows = Tensor::from_vec(
            &[n, 4],
            zero_rows
                .iter()
                .flat_map(|&z| {
                    if z {
                        [1.0, 0.0, 0.0, 0.0]
                    } else {
                        [0.0; 4]
                    }
                })
                .collect(),
        )?;
        let q_final = q_unit.add(&identity_rows)?;
        Tensor::concat(&[t, q_final], 1)
    }

    /// Build per-row 3x3 rotation matrices (n, 3, 3) from unit quaternion
    /// rows (n, 4), differentiable through the quaternion entries.
    fn rotation_matrices(q: &Tensor) -> Result<Tensor> {
        let n = q.shape()[0];
        let col = |i: usize| q.slice(1, i, i + 1);
        let (w, x, y, z) = (col(0)?, col(1)?, col(2)?, col(3)?);
        let two = 2.0;
        let one_minus = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            // 1 - 2a^2 - 2b^2
            Ok(a.square()
                .add(&b.square())?
                .scale(-two)
                .add_scalar(1.0))
        };
        let pm = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, sign: f64| -> Result<Tensor> {
            // 2ab + sign * 2cd
            Ok(a.mul(b)?.add(&c.mul(d)?.scale(sign))?.scale(two))
        };
        let entries = [
            one_minus(&y, &z)?,
            pm(&x, &y, &w, &z, -1.0)?,
            pm(&x, &z, &w, &y, 1.0)?,
            pm(&x, &y, &w, &z, 1.0)?,
            one_minus(&x, &z)?,
            pm(&y, &z, &w, &x, -1.0)?,
            pm(&x, &z, &w, &y, -1.0)?,
            pm(&y, &z, &w, &x, 1.0)?,
            one_minus(&x, &y)?,
        ];
        Tensor::concat(&entries, 1)?.reshape(&[n, 3, 3])
    }

    /// Transform part clouds (n, d, 3) by per-row poses (n, 7):
    /// p -> R p + t.
    fn transform_points(points: &Tensor, poses: &Tensor) -> Result<Tensor> {
        let (n, d) = (points.shape()[0], points.shape()[1]);
        let t = poses.slice(1, 0, 3)?.reshape(&[n, 1, 3])?;
        let q = poses.slice(1, 3, 7)?;
        let r = Self::rotation_matrices(&q)?;
        // row-vector convention: p R^T
        let rotated = points.bmm(&r.permute(&[0, 2, 1])?)?;
        rotated.add(&t.broadcast_to(&[n, d, 3])?)
    }

    /// Full pipeline for one shape and one noise draw.
    pub fn forward(&self, input: &ShapeInput, noise: &NoiseVector) -> Result<ForwardOutput> {
        if noise.0.len() != self.config.noise_dim {
            return Err(Error::invalid(format!(
                "noise dim {} != configured {}",
                noise.0.len(),
                self.config.noise_dim
            )));
        }
        if input.num_total() > self.config.max_parts {
            return Err(Error::invalid(format!(
                "shape has {} parts, exceeding max_parts {}",
                input.num_total(),
                self.config.max_parts
            )));
        }
        let mut trace = Vec::new();
        let mut fallbacks = 0usize;
        let n = input.num_total();
        let m = input.num_supers();
        let f = self.config.feat_dim;

        // stage 1: super-part encoder
        let part_feats = self.pointnet_encode("pointnet1", &input.points, &input.mask)?;
        // mean-aggregate member part features per super-part
        let mut agg = vec![0.0; m * n];
        for s in 0..m {
            let members = input.assignment.members_of(s);
            for &i in members {
                agg[s * n + i] = 1.0 / members.len() as f64;
            }
        }
        let agg_t = Tensor::from_vec(&[m, n], agg)?;
        let super_agg = agg_t.matmul(&part_feats)?;
        let noise_super = Tensor::from_vec(&[1, self.config.noise_dim], noise.0.clone())?
            .broadcast_to(&[m, self.config.noise_dim])?;
        let mut super_feats = self
            .linear(
                &Tensor::concat(&[super_agg, noise_super], 1)?,
                "super.noise_proj",
            )?;

        let super_mask = vec![true; m];
        let super_poses = if self.config.use_super_encoder {
            for layer in 0..self.config.super_encoder_layers {
                super_feats = self.encoder_layer(
                    &format!("super.layer{layer}"),
                    &super_feats,
                    None,
                    None,
                    Some(&super_mask),
                    &super_mask,
                    &mut trace,
                    &format!("super.layer{layer}"),
                )?;
            }
            self.pose_head("super.head", &super_feats, &mut fallbacks)?
        } else {
            // ablation: identity latent poses
            let mut rows = Vec::with_capacity(m * 7);
            for _ in 0..m {
                rows.extend_from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
            }
            Tensor::from_vec(&[m, 7], rows)?
        };

        // stage 2: part encoder
        let parent_poses = super_poses.index_select_rows(&input.part_super)?;
        let transformed = Self::transform_points(&input.points, &parent_poses)?;
        let hat_feats = self.pointnet_encode("pointnet2", &transformed, &input.mask)?;
        let noise_part = Tensor::from_vec(&[1, self.config.noise_dim], noise.0.clone())?
            .broadcast_to(&[n, self.config.noise_dim])?;
        let hat_proj = self.linear(
            &Tensor::concat(&[hat_feats, noise_part], 1)?,
            "part.noise_proj",
        )?;

        // cross-level attention: parts query the super-part representations
        let fused = self.encoder_layer(
            "cross",
            &hat_proj,
            None,
            Some(&super_feats),
            Some(&super_mask),
            &input.mask,
            &mut trace,
            "cross",
        )?;

        // within-level attention over parts, pose-conditioned scores
        let inst_dim = self.config.instance_enc_dim;
        let inst_data: Vec<f64> = input
            .instance_ranks
            .iter()
            .flat_map(|&r| instance_encoding(r, inst_dim))
            .collect();
        let inst = Tensor::from_vec(&[n, inst_dim], inst_data)?;
        let mut hidden = Tensor::concat(&[fused, inst], 1)?;
        debug_assert_eq!(hidden.shape()[1], f + inst_dim);
        for layer in 0..self.config.part_encoder_layers {
            hidden = self.encoder_layer(
                &format!("part.layer{layer}"),
                &hidden,
                Some(&parent_poses),
                None,
                Some(&input.mask),
                &input.mask,
                &mut trace,
                &format!("part.layer{layer}"),
            )?;
        }

        let all_part_poses = self.pose_head("part.head", &hidden, &mut fallbacks)?;
        let real_rows: Vec<usize> = (0..input.num_real).collect();
        let part_pose_tensor = all_part_poses.index_select_rows(&real_rows)?;

        let decode = |t: &Tensor| -> Vec<Pose6DoF> {
            t.data()
                .chunks(7)
                .map(|row| Pose6DoF {
                    translation: [row[0], row[1], row[2]],
                    quaternion: [row[3], row[4], row[5], row[6]],
                })
                .collect()
        };
        let part_poses = decode(&part_pose_tensor);
        let super_pose_list = decode(&super_poses);

        Ok(ForwardOutput {
            part_pose_tensor,
            super_pose_tensor: super_poses,
            part_poses,
            super_poses: super_pose_list,
            quat_fallbacks: fallbacks,
            attention_trace: trace,
        })
    }

    /// Rotation matrices for predicted pose rows, exposed for the loss.
    pub fn pose_rotation_matrices(poses: &Tensor) -> Result<Tensor> {
        Self::rotation_matrices(&poses.slice(1, 3, 7)?)
    }

    /// Transform (n, d, 3) points by (n, 7) pose rows, exposed for the loss.
    pub fn pose_transform_points(points: &Tensor, poses: &Tensor) -> Result<Tensor> {
        Self::transform_points(points, poses)
    }
}
