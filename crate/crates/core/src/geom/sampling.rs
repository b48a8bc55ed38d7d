use crate::error::{Error, Result};
use crate::geom::Point3;

/// Greedy farthest point sampling. Returns the indices of the chosen points,
/// in visitation order, starting at `seed_index`. Distance ties pick the
/// lowest index.
pub fn farthest_point_sample_indices(
    points: &[Point3],
    k: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::invalid(format!(
            "farthest_point_sample: k = {k} exceeds point count {}",
            points.len()
        )));
    }
    if seed_index >= points.len() {
        return Err(Error::invalid(format!(
            "farthest_point_sample: seed index {seed_index} out of range"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = seed_index;
    chosen.push(current);
    taken[current] = true;
    for _ in 1..k {
        let cp = points[current];
        let mut best_idx = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d2 = p.dist2(&cp);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // ties pick the lowest untaken index
            if !taken[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best_idx = i;
            }
        }
        current = best_idx;
        chosen.push(current);
        taken[current] = true;
    }
    Ok(chosen)
}

/// Greedy FPS returning the sampled points themselves.
pub fn farthest_point_sample(points: &[Point3], k: usize, seed_index: usize) -> Result<Vec<Point3>> {
    let idx = farthest_point_sample_indices(points, k, seed_index)?;
    Ok(idx.into_iter().map(|i| points[i]).collect())
}
