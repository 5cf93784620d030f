use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{squared_distance, Matrix};

pub const KMEANS_MAX_ITERATIONS: usize = 300;
/// Lloyd iterations stop once no centroid moves farther than this.
pub const KMEANS_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Cluster id in `[0, k)` for every point.
    pub assignments: Vec<usize>,
    /// `k × d` centroids.
    pub centroids: Matrix,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Lloyd iterations performed.
    pub iterations: usize,
    /// Inertia after seeding and after every iteration.
    pub inertia_trace: Vec<f64>,
}

/// k-means over the rows of `points`: k-means++ seeding from `seed`, then
/// Lloyd iterations until centroids stop moving or the iteration cap.
///
/// Nearest-centroid ties go to the lowest centroid index. A cluster left
/// empty by an assignment step is refilled with the point farthest from its
/// own centroid (taken from a cluster that has at least two members), so
/// every cluster is non-empty on return and inertia never increases.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::domain("k-means needs k >= 1"));
    }
    if n < k {
        return Err(Error::domain(format!(
            "k-means needs at least k points: got {n} points for k = {k}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];

    assign(points, &centroids, &mut assignments, &mut dists);
    refill_empty(points, &mut centroids, &mut assignments, &mut dists);
    let mut inertia_trace = vec![dists.iter().sum::<f64>()];

    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let updated = cluster_means(points, &assignments, &centroids);
        let shift = (0..k)
            .map(|c| squared_distance(updated.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        assign(points, &centroids, &mut assignments, &mut dists);
        refill_empty(points, &mut centroids, &mut assignments, &mut dists);
        inertia_trace.push(dists.iter().sum());
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }

    Ok(KmeansResult {
        inertia: *inertia_trace.last().unwrap(),
        assignments,
        centroids,
        iterations,
        inertia_trace,
    })
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();

    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Matrix, centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]) {
    for i in 0..points.rows() {
        let p = points.row(i);
        let mut best = 0;
        let mut best_d = squared_distance(p, centroids.row(0));
        for c in 1..centroids.rows() {
            let d = squared_distance(p, centroids.row(c));
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
    }
}

fn refill_empty(
    points: &Matrix,
    centroids: &mut Matrix,
    assignments: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..points.rows())
            .filter(|&i| sizes[assignments[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a cluster with two members");
        sizes[assignments[donor]] -= 1;
        sizes[empty] = 1;
        assignments[donor] = empty;
        dists[donor] = 0.0;
        centroids.row_mut(empty).copy_from_slice(points.row(donor));
    }
}

fn cluster_means(points: &Matrix, assignments: &[usize], previous: &Matrix) -> Matrix {
    let (k, d) = previous.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s *= inv);
        }
    }
    sums
}
