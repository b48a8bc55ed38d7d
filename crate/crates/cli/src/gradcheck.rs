//! Finite-difference gradient suite behind `hapw gradcheck`.
//!
//! Primitives are checked at 1e-4, composites at 1e-3. The hidden
//! `--corrupt` flag injects a deliberately wrong gradient so the failure
//! path (exit 3, named op) stays testable.

use hapw_core::autodiff::{finite_difference_check, GradCheckReport, Tensor};
use hapw_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // keep magnitudes away from relu/max kinks and sqrt's origin
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.75)).collect();
    Tensor::leaf(shape, data).unwrap()
}

fn signed_leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.25..1.25);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::leaf(shape, data).unwrap()
}

type CheckFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct Check {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: CheckFn,
    tolerance: f64,
}

fn primitives(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor>, f: CheckFn| {
        checks.push(Check {
            name,
            inputs,
            f,
            tolerance: PRIMITIVE_TOL,
        });
    };

    push(
        "add",
        vec![signed_leaf(rng, &[3, 4]), signed_leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].add(&t[1])?.square().sum_all())),
    );
    push(
        "sub",
        vec![signed_leaf(rng, &[3, 4]), signed_leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].sub(&t[1])?.square().sum_all())),
    );
    push(
        "mul",
        vec![signed_leaf(rng, &[3, 4]), signed_leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].mul(&t[1])?.sum_all())),
    );
    push(
        "div",
        vec![signed_leaf(rng, &[3, 4]), leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].div(&t[1])?.sum_all())),
    );
    push(
        "matmul",
        vec![signed_leaf(rng, &[3, 5]), signed_leaf(rng, &[5, 4])],
        Box::new(|t| Ok(t[0].matmul(&t[1])?.square().sum_all())),
    );
    push(
        "bmm",
        vec![signed_leaf(rng, &[2, 3, 4]), signed_leaf(rng, &[2, 4, 5])],
        Box::new(|t| Ok(t[0].bmm(&t[1])?.square().sum_all())),
    );
    push(
        "relu",
        vec![signed_leaf(rng, &[4, 4])],
        Box::new(|t| Ok(t[0].relu().square().sum_all())),
    );
    push(
        "tanh",
        vec![signed_leaf(rng, &[4, 4])],
        Box::new(|t| Ok(t[0].tanh_op().square().sum_all())),
    );
    push(
        "sqrt",
        vec![leaf(rng, &[4, 4])],
        Box::new(|t| Ok(t[0].sqrt_op().sum_all())),
    );
    push(
        "softmax_last",
        vec![signed_leaf(rng, &[3, 5])],
        Box::new(|t| Ok(t[0].softmax_last()?.square().sum_all())),
    );
    push(
        "masked_softmax_last",
        vec![signed_leaf(rng, &[3, 5])],
        Box::new(|t| {
            let mask = [true, true, false, true, false];
            Ok(t[0].masked_softmax_last(Some(&mask))?.square().sum_all())
        }),
    );
    push(
        "layer_norm",
        vec![signed_leaf(rng, &[3, 6])],
        Box::new(|t| Ok(t[0].layer_norm(1e-5)?.mul(&t[0])?.sum_all())),
    );
    push(
        "sum_axis",
        vec![signed_leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].sum_axis(1)?.square().sum_all())),
    );
    push(
        "mean_axis",
        vec![signed_leaf(rng, &[3, 4])],
        Box::new(|t| Ok(t[0].mean_axis(0)?.square().sum_all())),
    );
    push(
        "max_axis",
        vec![signed_leaf(rng, &[2, 5, 3])],
        Box::new(|t| Ok(t[0].max_axis(1)?.square().sum_all())),
    );
    push(
        "concat",
        vec![signed_leaf(rng, &[2, 3]), signed_leaf(rng, &[2, 4])],
        Box::new(|t| Ok(Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?.square().sum_all())),
    );
    push(
        "slice",
        vec![signed_leaf(rng, &[4, 6])],
        Box::new(|t| Ok(t[0].slice(1, 1, 4)?.square().sum_all())),
    );
    push(
        "index_select_rows",
        vec![signed_leaf(rng, &[5, 3])],
        Box::new(|t| Ok(t[0].index_select_rows(&[3, 0, 3, 1])?.square().sum_all())),
    );
    push(
        "chamfer",
        vec![signed_leaf(rng, &[6, 3]), signed_leaf(rng, &[5, 3])],
        Box::new(|t| t[0].chamfer(&t[1])),
    );
    checks
}

fn composites(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor>, f: CheckFn| {
        checks.push(Check {
            name,
            inputs,
            f,
            tolerance: COMPOSITE_TOL,
        });
    };

    // linear -> relu -> linear -> layer_norm, the MLP backbone shape
    push(
        "mlp_layer_norm",
        vec![
            signed_leaf(rng, &[4, 6]),
            signed_leaf(rng, &[6, 8]),
            signed_leaf(rng, &[8, 5]),
        ],
        Box::new(|t| {
            let h = t[0].matmul(&t[1])?.relu().matmul(&t[2])?;
            Ok(h.layer_norm(1e-5)?.square().sum_all())
        }),
    );
    // scaled dot-product attention with a masked key
    push(
        "attention",
        vec![
            signed_leaf(rng, &[3, 4]),
            signed_leaf(rng, &[5, 4]),
            signed_leaf(rng, &[5, 4]),
        ],
        Box::new(|t| {
            let scores = t[0].matmul(&t[1].transpose()?)?.scale(0.5);
            let mask = [true, true, true, false, true];
            let attn = scores.masked_softmax_last(Some(&mask))?;
            Ok(attn.matmul(&t[2])?.square().sum_all())
        }),
    );
    // quaternion-style row normalization with the zero-norm guard
    push(
        "pose_normalize",
        vec![signed_leaf(rng, &[4, 4])],
        Box::new(|t| {
            let sumsq = t[0].square().sum_axis(1)?.reshape(&[4, 1])?;
            let norm = sumsq.add_scalar(1e-12).sqrt_op().broadcast_to(&[4, 4])?;
            Ok(t[0].div(&norm)?.square().sum_all())
        }),
    );
    // translate two clouds toward each other and take their chamfer
    push(
        "chamfer_alignment",
        vec![
            signed_leaf(rng, &[6, 3]),
            signed_leaf(rng, &[5, 3]),
            signed_leaf(rng, &[1, 3]),
        ],
        Box::new(|t| {
            let shifted = t[0].add(&t[2].broadcast_to(&[6, 3])?)?;
            shifted.tanh_op().chamfer(&t[1])
        }),
    );
    checks
}

/// Check whose analytic gradient deliberately misses half the loss: the
/// second term goes through a detached (constant) copy of the input, so
/// finite differences see it but backprop does not.
fn corrupted_check(rng: &mut ChaCha8Rng) -> Check {
    let input = signed_leaf(rng, &[3, 3]);
    Check {
        name: "mul (corrupted)",
        inputs: vec![input],
        f: Box::new(|t| {
            let detached = Tensor::from_vec(t[0].shape(), t[0].to_vec())?;
            Ok(t[0].square().sum_all().add(&t[0].mul(&detached)?.sum_all())?)
        }),
        tolerance: PRIMITIVE_TOL,
    }
}

/// Run the whole suite for one seed and return the per-op reports.
pub fn run_suite(seed: u64, corrupt: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = primitives(&mut rng);
    checks.extend(composites(&mut rng));
    if corrupt {
        checks.push(corrupted_check(&mut rng));
    }
    checks
        .iter()
        .map(|c| finite_difference_check(c.name, &c.inputs, &c.f, H, c.tolerance, None))
        .collect()
}

pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<()> {
    let reports = run_suite(seed, corrupt)?;
    let mut failures: Vec<String> = Vec::new();
    println!("{:<22} {:>8} {:>14} {:>10} {:>6}", "op", "checked", "max_rel_err", "tol", "status");
    for report in &reports {
        let status = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<22} {:>8} {:>14.3e} {:>10.0e} {:>6}",
            report.name, report.checked, report.max_rel_err, report.tolerance, status
        );
        if !report.passed() {
            failures.push(format!("{} (max_rel_err {:.3e})", report.name, report.max_rel_err));
        }
    }
    if failures.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )))
    }
}
