//! Lloyd's k-means with k-means++ seeding, used to seed quantizer
//! dictionaries.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::DenseMatrix;

/// Clusters the columns of `data` into `k` centroids. Returns the `D × k`
/// centroid matrix and each column's centroid index.
///
/// With fewer distinct points than `k`, the surplus centroids are copies of
/// random points with a tiny perturbation so that every centroid is usable.
pub fn kmeans<R: Rng>(data: &DenseMatrix, k: usize, iterations: usize, rng: &mut R) -> (DenseMatrix, Vec<u32>) {
    let (d, n) = data.shape();
    assert!(k > 0, "k must be positive");
    let mut centroids = DenseMatrix::zeros(d, k);
    if n == 0 {
        return (centroids, Vec::new());
    }
    let scale = (data.norm_squared() / n as f64).sqrt().max(1e-12);

    // k-means++ seeding
    let first = rng.random_range(0..n);
    centroids.set_column(0, &data.column(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| (data.column(i) - data.column(first)).norm_squared())
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            centroids.set_column(c, &data.column(pick));
        } else {
            let pick = rng.random_range(0..n);
            let mut col = data.column(pick).into_owned();
            for v in col.iter_mut() {
                *v += 1e-6 * scale * rng.sample::<f64, _>(StandardNormal);
            }
            centroids.set_column(c, &col);
        }
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min((data.column(i) - centroids.column(c)).norm_squared());
        }
    }

    let mut assignment = vec![0u32; n];
    for _ in 0..iterations {
        let changed = assign(data, &centroids, &mut assignment);
        let mut sums = DenseMatrix::zeros(d, k);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let mut col = sums.column_mut(a as usize);
            col += data.column(i);
            counts[a as usize] += 1;
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids.set_column(c, &(sums.column(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    assign(data, &centroids, &mut assignment);
    (centroids, assignment)
}

/// Nearest-centroid assignment (ties to the lowest index). Returns whether
/// any assignment changed.
fn assign(data: &DenseMatrix, centroids: &DenseMatrix, assignment: &mut [u32]) -> bool {
    let norms: Vec<f64> = centroids.column_iter().map(|c| c.norm_squared()).collect();
    let dots = centroids.transpose() * data;
    let mut changed = false;
    for (i, slot) in assignment.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for c in 0..centroids.ncols() {
            let v = norms[c] - 2.0 * dots[(c, i)];
            if v < best_val {
                best_val = v;
                best = c;
            }
        }
        if *slot != best as u32 {
            *slot = best as u32;
            changed = true;
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_well_spaced_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let data = DenseMatrix::from_fn(2, 90, |r, c| centers[c % 3][r] + 0.1 * rng.random::<f64>());
        let (centroids, assignment) = kmeans(&data, 3, 50, &mut rng);
        for c in 0..90 {
            let same = assignment[c] == assignment[c % 3];
            assert!(same);
        }
        for center in centers {
            let found = centroids
                .column_iter()
                .any(|col| (col[0] - center[0]).abs() < 0.2 && (col[1] - center[1]).abs() < 0.2);
            assert!(found);
        }
    }

    #[test]
    fn more_centroids_than_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = DenseMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (centroids, assignment) = kmeans(&data, 5, 10, &mut rng);
        assert_eq!(centroids.ncols(), 5);
        assert!(centroids.iter().all(|v| v.is_finite()));
        assert_ne!(assignment[0], assignment[1]);
    }

    #[test]
    fn deterministic_for_seed() {
        let data = DenseMatrix::from_fn(3, 40, |r, c| ((r * 7 + c * 13) % 11) as f64);
        let a = kmeans(&data, 4, 20, &mut ChaCha8Rng::seed_from_u64(7));
        let b = kmeans(&data, 4, 20, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }
}
