use crate::error::{Error, Result};
use crate::geom::Point3;

fn nearest_sq(p: &Point3, ys: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for y in ys {
        let d = p.dist2(y);
        if d < best {
            best = d;
        }
    }
    best
}

/// Symmetric Chamfer distance, each directional sum averaged over its source
/// set size. Accumulation in f64.
pub fn chamfer_distance(x: &[Point3], y: &[Point3]) -> Result<f64> {
    let (sx, sy) = directional_sums(x, y)?;
    Ok(sx / x.len() as f64 + sy / y.len() as f64)
}

/// Raw-sum Chamfer variant: directional sums are not normalized.
pub fn chamfer_distance_sum(x: &[Point3], y: &[Point3]) -> Result<f64> {
    let (sx, sy) = directional_sums(x, y)?;
    Ok(sx + sy)
}

fn directional_sums(x: &[Point3], y: &[Point3]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("chamfer_distance: empty point set"));
    }
    let sx: f64 = x.iter().map(|p| nearest_sq(p, y)).sum();
    let sy: f64 = y.iter().map(|p| nearest_sq(p, x)).sum();
    Ok((sx, sy))
}
