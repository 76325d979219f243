//! k-means with k-means++ seeding, Lloyd iterations, restarts and a final
//! single-point (Hartigan) refinement pass.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart, then after refinement.
    pub history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|x| sq_dist(x, centroids.row(0))).collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // All remaining mass is zero: duplicates only.
            Err(_) => rng.gen_range(0..n),
        };
        centroids.row_mut(j).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centroids.row(j)));
        }
    }
    centroids
}

fn recompute(data: ArrayView2<f64>, assign: &[usize], centroids: &mut Array2<f64>) -> Vec<usize> {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    for (x, &a) in data.rows().into_iter().zip(assign) {
        counts[a] += 1;
        let mut row = sums.row_mut(a);
        row += &x;
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mean = &sums.row(j) / n as f64;
            centroids.row_mut(j).assign(&mean);
        }
    }
    counts
}

fn inertia_of(data: ArrayView2<f64>, assign: &[usize], centroids: &Array2<f64>) -> f64 {
    data.rows()
        .into_iter()
        .zip(assign)
        .map(|(x, &a)| sq_dist(x, centroids.row(a)))
        .sum()
}

/// Move a point from the largest-cost position into each empty cluster.
fn reseed_empty(data: ArrayView2<f64>, assign: &mut [usize], centroids: &mut Array2<f64>, counts: &mut [usize]) {
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let far = (0..data.nrows())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(data.row(a), centroids.row(assign[a]));
                let db = sq_dist(data.row(b), centroids.row(assign[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            });
        let Some(i) = far else { return };
        counts[assign[i]] -= 1;
        assign[i] = empty;
        counts[empty] = 1;
        centroids.row_mut(empty).assign(&data.row(i));
    }
}

fn lloyd(data: ArrayView2<f64>, k: usize, max_iter: usize, tol: f64, rng: &mut ChaCha8Rng) -> KMeansResult {
    let mut centroids = plus_plus(data, k, rng);
    let mut assign = vec![0usize; data.nrows()];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut total = 0.0;
        for (i, x) in data.rows().into_iter().enumerate() {
            let (j, d) = nearest(x, &centroids);
            assign[i] = j;
            total += d;
        }
        history.push(total);
        let before = centroids.clone();
        let mut counts = recompute(data, &assign, &mut centroids);
        if counts.contains(&0) {
            reseed_empty(data, &mut assign, &mut centroids, &mut counts);
            recompute(data, &assign, &mut centroids);
            continue;
        }
        let shift = before
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        if shift < tol {
            break;
        }
    }
    let inertia = inertia_of(data, &assign, &centroids);
    KMeansResult {
        assignments: assign,
        centroids,
        inertia,
        history,
    }
}

/// Move single points between clusters while that strictly lowers inertia.
fn hartigan(data: ArrayView2<f64>, r: &mut KMeansResult) {
    let k = r.centroids.nrows();
    let mut counts = vec![0usize; k];
    for &a in &r.assignments {
        counts[a] += 1;
    }
    let mut improved = true;
    let mut rounds = 0;
    while improved && rounds < 100 {
        improved = false;
        rounds += 1;
        for i in 0..data.nrows() {
            let from = r.assignments[i];
            if counts[from] <= 1 {
                continue;
            }
            let x = data.row(i);
            let nf = counts[from] as f64;
            let removal_gain = nf / (nf - 1.0) * sq_dist(x, r.centroids.row(from));
            let mut best = (from, 0.0);
            for to in (0..k).filter(|&j| j != from) {
                let nt = counts[to] as f64;
                let cost = nt / (nt + 1.0) * sq_dist(x, r.centroids.row(to));
                let delta = cost - removal_gain;
                if delta < best.1 - 1e-12 {
                    best = (to, delta);
                }
            }
            if best.0 != from {
                let to = best.0;
                let xf = x.to_owned();
                let mut cf = r.centroids.row(from).to_owned();
                cf = (&cf * nf - &xf) / (nf - 1.0);
                r.centroids.row_mut(from).assign(&cf);
                let nt = counts[to] as f64;
                let ct = (&r.centroids.row(to) * nt + &xf) / (nt + 1.0);
                r.centroids.row_mut(to).assign(&ct);
                counts[from] -= 1;
                counts[to] += 1;
                r.assignments[i] = to;
                improved = true;
            }
        }
    }
    // Recompute exactly to shed incremental rounding.
    recompute(data, &r.assignments, &mut r.centroids);
    r.inertia = inertia_of(data, &r.assignments, &r.centroids);
    r.history.push(r.inertia);
}

/// Best of [`DEFAULT_N_INIT`] restarts.
pub fn kmeans(vectors: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    kmeans_restarts(vectors, k, seed, max_iter, tol, DEFAULT_N_INIT)
}

pub fn kmeans_restarts(
    vectors: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    n_init: usize,
) -> Result<KMeansResult> {
    let n = vectors.nrows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must be in [1, n = {n}]")));
    }
    if max_iter == 0 || n_init == 0 {
        return Err(Error::Argument("max_iter and n_init must be at least 1".into()));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input vector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..n_init {
        let mut r = lloyd(vectors, k, max_iter, tol, &mut rng);
        hartigan(vectors, &mut r);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_points_single_cluster() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let r = kmeans(x.view(), 1, 0, 300, 1e-4).unwrap();
        assert_eq!(r.centroids, array![[1.0, 2.0]]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn n_equals_k() {
        let x = array![[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, 9.0]];
        let r = kmeans(x.view(), 4, 3, 300, 1e-4).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn k_too_large() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(kmeans(x.view(), 3, 0, 10, 1e-4), Err(Error::Argument(_))));
        assert!(matches!(kmeans(x.view(), 0, 0, 10, 1e-4), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicates_with_more_clusters_than_values() {
        let x = array![[0.0], [0.0], [0.0], [1.0]];
        let r = kmeans(x.view(), 3, 1, 50, 1e-4).unwrap();
        let mut used = r.assignments.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 3);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn history_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((60, 3), |_| rng.gen_range(-1.0..1.0));
        for seed in 0..5 {
            let r = kmeans_restarts(x.view(), 4, seed, 300, 0.0, 1).unwrap();
            for w in r.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.history);
            }
        }
    }
}
