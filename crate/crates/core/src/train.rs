//! Losses (translation, rotation, shape), the Min-of-N objective, and the
//! optimization loop.

use crate::autodiff::{save_checkpoint, AdamW, AdamWConfig, ParamValues, Tensor};
use crate::error::{Error, Result};
use crate::geom::{rodrigues, Point3, Pose6DoF};
use crate::model::{Model, NoiseVector, ShapeInput};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_t: 1.0,
            lambda_r: 10.0,
            lambda_s: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_t < 0.0 || self.lambda_r < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Optimization-loop configuration. Defaults are desk-scale; paper-scale
/// values (batch 64, ~1000 epochs) are reachable through the same fields.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mon_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Save an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Where intermediate/final checkpoints go; `None` disables saving.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mon_samples: 5,
            batch_size: 8,
            epochs: 300,
            lr: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mon_samples == 0 {
            return Err(Error::invalid("mon_samples must be >= 1"));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::invalid("batch_size and lr must be positive"));
        }
        self.weights.validate()
    }
}

/// One shape ready for training: network input plus ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub input: ShapeInput,
    pub gt_poses: Vec<Pose6DoF>,
    gt: GroundTruthTensors,
}

/// Precomputed constant tensors derived from the ground-truth poses.
#[derive(Debug, Clone)]
struct GroundTruthTensors {
    /// (n_real, 3) ground-truth translations.
    translations: Tensor,
    /// Per part: (d, 3) canonical cloud rotated by the ground-truth
    /// quaternion (no translation).
    rotated_clouds: Vec<Tensor>,
    /// (n_real * d, 3) fully assembled ground-truth shape.
    assembled: Tensor,
}

impl TrainSample {
    pub fn new(id: String, input: ShapeInput, gt_poses: Vec<Pose6DoF>) -> Result<TrainSample> {
        if gt_poses.len() != input.num_real {
            return Err(Error::invalid(format!(
                "shape {id}: {} ground-truth poses for {} parts",
                gt_poses.len(),
                input.num_real
            )));
        }
        let d = input.points_per_part;
        let mut rotated_clouds = Vec::with_capacity(gt_poses.len());
        let mut assembled = Vec::with_capacity(gt_poses.len() * d * 3);
        let mut translations = Vec::with_capacity(gt_poses.len() * 3);
        for (i, pose) in gt_poses.iter().enumerate() {
            pose.validate()
                .map_err(|e| Error::invalid(format!("shape {id}, part {i}: {e}")))?;
            let r = rodrigues(pose.quaternion)?;
            let base = &input.points.data()[i * d * 3..(i + 1) * d * 3];
            let mut rot = Vec::with_capacity(d * 3);
            for p in base.chunks(3) {
                let v = r.apply(&Point3::new(p[0], p[1], p[2]));
                rot.extend_from_slice(&[v.x, v.y, v.z]);
                assembled.extend_from_slice(&[
                    v.x + pose.translation[0],
                    v.y + pose.translation[1],
                    v.z + pose.translation[2],
                ]);
            }
            rotated_clouds.push(Tensor::from_vec(&[d, 3], rot)?);
            translations.extend_from_slice(&pose.translation);
        }
        let n = gt_poses.len();
        Ok(TrainSample {
            id,
            gt: GroundTruthTensors {
                translations: Tensor::from_vec(&[n, 3], translations)?,
                rotated_clouds,
                assembled: Tensor::from_vec(&[n * d, 3], assembled)?,
            },
            input,
            gt_poses,
        })
    }
}

/// Scalar loss values recorded alongside the differentiable total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub translation: f64,
    pub rotation: f64,
    pub shape: f64,
}

/// Sum of squared translation errors over real parts:
/// `sum_i ||t_i - t*_i||^2`.
pub fn translation_loss(pred_poses: &Tensor, sample: &TrainSample) -> Result<Tensor> {
    check_pred(pred_poses, sample)?;
    Ok(pred_poses
        .slice(1, 0, 3)?
        .sub(&sample.gt.translations)?
        .square()
        .sum_all())
}

/// Sum over parts of the Chamfer distance between the part rotated by the
/// predicted quaternion and by the ground-truth quaternion (no translation).
pub fn rotation_loss(pred_poses: &Tensor, sample: &TrainSample) -> Result<Tensor> {
    check_pred(pred_poses, sample)?;
    let n = sample.gt_poses.len();
    let d = sample.input.points_per_part;
    // translation zeroed: rotate-only poses
    let zeros = Tensor::zeros(&[n, 3]);
    let rot_only = Tensor::concat(&[zeros, pred_poses.slice(1, 3, 7)?], 1)?;
    let points = sample.input.points.index_select_rows(&(0..n).collect::<Vec<_>>())?;
    let rotated = Model::pose_transform_points(&points, &rot_only)?;
    let mut total = Tensor::scalar(0.0);
    for i in 0..n {
        let part = rotated.slice(0, i, i + 1)?.reshape(&[d, 3])?;
        total = total.add(&part.chamfer(&sample.gt.rotated_clouds[i])?)?;
    }
    Ok(total)
}

/// Chamfer distance between the assembled prediction (union of fully posed
/// parts) and the assembled ground truth.
pub fn shape_loss(pred_poses: &Tensor, sample: &TrainSample) -> Result<Tensor> {
    check_pred(pred_poses, sample)?;
    let n = sample.gt_poses.len();
    let d = sample.input.points_per_part;
    let points = sample.input.points.index_select_rows(&(0..n).collect::<Vec<_>>())?;
    let assembled = Model::pose_transform_points(&points, pred_poses)?.reshape(&[n * d, 3])?;
    assembled.chamfer(&sample.gt.assembled)
}

fn check_pred(pred_poses: &Tensor, sample: &TrainSample) -> Result<()> {
    let expect = [sample.gt_poses.len(), 7];
    if pred_poses.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: pred_poses.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

/// Weighted total loss, differentiable end-to-end.
pub fn total_loss(
    pred_poses: &Tensor,
    sample: &TrainSample,
    weights: &LossWeights,
) -> Result<(Tensor, LossValues)> {
    let lt = translation_loss(pred_poses, sample)?;
    let lr = rotation_loss(pred_poses, sample)?;
    let ls = shape_loss(pred_poses, sample)?;
    let total = lt
        .scale(weights.lambda_t)
        .add(&lr.scale(weights.lambda_r))?
        .add(&ls.scale(weights.lambda_s))?;
    let values = LossValues {
        total: total.item(),
        translation: lt.item(),
        rotation: lr.item(),
        shape: ls.item(),
    };
    Ok((total, values))
}

/// Result of one Min-of-N evaluation.
pub struct MonOutcome {
    /// Differentiable loss of the argmin draw; only this branch's tape is
    /// retained.
    pub loss: Tensor,
    pub values: LossValues,
    pub best: crate::model::AssemblyPrediction,
    pub best_index: usize,
    pub quat_fallbacks: usize,
}

/// Min-of-N loss: draw `num_samples` noise vectors, keep the draw with the
/// lowest total loss. Gradients flow only through the argmin branch.
pub fn mon_loss(
    model: &Model,
    sample: &TrainSample,
    weights: &LossWeights,
    num_samples: usize,
    rng: &mut impl Rng,
) -> Result<MonOutcome> {
    if num_samples == 0 {
        return Err(Error::invalid("mon_loss: num_samples must be >= 1"));
    }
    let mut best: Option<MonOutcome> = None;
    for k in 0..num_samples {
        let noise = NoiseVector::standard_normal(rng, model.config.noise_dim);
        let out = model.forward(&sample.input, &noise)?;
        let (loss, values) = total_loss(&out.part_pose_tensor, sample, weights)?;
        if best.as_ref().map_or(true, |b| values.total < b.values.total) {
            best = Some(MonOutcome {
                loss,
                values,
                best: out.to_prediction(&sample.input),
                best_index: k,
                quat_fallbacks: out.quat_fallbacks,
            });
        }
    }
    Ok(best.expect("num_samples >= 1"))
}

/// One row of the per-epoch loss log.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub loss_t: f64,
    pub loss_r: f64,
    pub loss_s: f64,
    pub wall_ms: u128,
}

/// Write the loss log as CSV: `epoch,mean_loss,loss_t,loss_r,loss_s`.
///
/// Wall time stays out of the file so identical runs produce identical
/// bytes; it is available on [`EpochLog`] for progress reporting.
pub fn write_loss_csv(w: &mut impl Write, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,mean_loss,loss_t,loss_r,loss_s")?;
    for row in log {
        writeln!(
            w,
            "{},{:.12},{:.12},{:.12},{:.12}",
            row.epoch, row.mean_loss, row.loss_t, row.loss_r, row.loss_s
        )?;
    }
    Ok(())
}

/// Trained parameters plus the loss curve.
pub struct TrainOutcome {
    pub values: ParamValues,
    pub log: Vec<EpochLog>,
    pub quat_fallbacks: usize,
}

fn shape_rng(seed: u64, epoch: usize, dataset_index: usize) -> ChaCha8Rng {
    let s = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64) << 24)
        .wrapping_add(dataset_index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Full optimization loop: seeded shuffling, Min-of-N per shape, batch-mean
/// gradients, AdamW updates. Bitwise reproducible for a fixed
/// (seed, config, dataset) regardless of thread count.
pub fn train(
    model_config: &crate::model::ModelConfig,
    init: ParamValues,
    dataset: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_monitor(model_config, init, dataset, config, |_, _| Ok(false))
}

/// [`train`] with a per-epoch monitor. The monitor sees the epoch index and
/// the current parameter values after that epoch's updates; returning
/// `Ok(true)` stops training early (optimizer state is preserved up to that
/// point, unlike stopping and resuming from a checkpoint).
pub fn train_with_monitor(
    model_config: &crate::model::ModelConfig,
    init: ParamValues,
    dataset: &[TrainSample],
    config: &TrainConfig,
    mut monitor: impl FnMut(usize, &ParamValues) -> Result<bool>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }
    let mut values = init;
    let mut optimizer = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let mut log = Vec::with_capacity(config.epochs);
    let mut fallbacks_total = 0usize;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_sum = LossValues {
            total: 0.0,
            translation: 0.0,
            rotation: 0.0,
            shape: 0.0,
        };
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let model = Model::from_values(model_config.clone(), &values)?;
            let inv = 1.0 / batch.len() as f64;
            // deterministic: workers keyed by dataset index, reduced in
            // batch order below
            let results: Vec<Result<_>> = batch
                .par_iter()
                .map(|&idx| {
                    let sample = &dataset[idx];
                    let mut rng = shape_rng(config.seed, epoch, idx);
                    let outcome =
                        mon_loss(&model, sample, &config.weights, config.mon_samples, &mut rng)?;
                    if !outcome.values.total.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss {} at epoch {epoch}, batch {batch_no}, shape {}",
                            outcome.values.total, sample.id
                        )));
                    }
                    let store = outcome.loss.scale(inv).backward()?;
                    Ok((outcome, store))
                })
                .collect();

            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for res in results {
                let (outcome, store) = res?;
                fallbacks_total += outcome.quat_fallbacks;
                epoch_sum.total += outcome.values.total;
                epoch_sum.translation += outcome.values.translation;
                epoch_sum.rotation += outcome.values.rotation;
                epoch_sum.shape += outcome.values.shape;
                for (name, g) in model.named_grads(&store) {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for {name} at epoch {epoch}, batch {batch_no}"
                        )));
                    }
                    match grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            optimizer.step(&mut values, &grads)?;
        }

        let n = dataset.len() as f64;
        log.push(EpochLog {
            epoch,
            mean_loss: epoch_sum.total / n,
            loss_t: epoch_sum.translation / n,
            loss_r: epoch_sum.rotation / n,
            loss_s: epoch_sum.shape / n,
            wall_ms: start.elapsed().as_millis(),
        });

        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(path, &values)?;
            }
        }

        if monitor(epoch, &values)? {
            break;
        }
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(path, &values)?;
    }
    Ok(TrainOutcome {
        values,
        log,
        quat_fallbacks: fallbacks_total,
    })
}
