//! Shared fixtures for the criterion benches.

use hapw_core::geom::{PartPointCloud, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random cloud in the unit box.
pub fn random_points(seed: u64, n: usize) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect()
}

/// Parts with well-separated sizes (one super-part each).
pub fn distinct_parts(seed: u64, count: usize, points: usize) -> Vec<PartPointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let h = 0.2 + 0.2 * i as f64;
            let mut pts = vec![
                Point3::new(-h, -h * 0.6, -h * 0.3),
                Point3::new(h, h * 0.6, h * 0.3),
            ];
            pts.extend((0..points.saturating_sub(2)).map(|_| {
                Point3::new(
                    rng.gen_range(-h..h),
                    rng.gen_range(-h * 0.6..h * 0.6),
                    rng.gen_range(-h * 0.3..h * 0.3),
                )
            }));
            PartPointCloud::new(pts, i).unwrap()
        })
        .collect()
}
