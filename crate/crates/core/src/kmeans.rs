//! Seeded k-means with k-means++ initialization and best-of-n restarts.

use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seed used wherever the library clusters without a caller-supplied seed.
pub const DEFAULT_SEED: u64 = 0x5EED_A4C4;
pub const DEFAULT_RESTARTS: usize = 20;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        KMeansParams {
            k,
            seed: DEFAULT_SEED,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Contiguous ids in order of first appearance.
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centers.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a chosen center
            Err(_) => rng.random_range(0..n),
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>) -> (Vec<usize>, f64) {
    let (n, d) = points.shape();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut inertia = 0.0;
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        inertia = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(points, i, &centers, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            inertia += dist;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += points.row(i);
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                let mean = sums.row(c) / counts[c] as f64;
                centers.row_mut(c).copy_from(&mean);
            }
        }
    }
    (labels, inertia)
}

/// Renumbers labels so ids appear as 0, 1, 2, ... in token order.
pub fn relabel_by_first_occurrence(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Clusters the rows of `points`.
pub fn kmeans(points: &DMatrix<f64>, params: &KMeansParams) -> Result<KMeansFit> {
    let n = points.nrows();
    if params.k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    if params.k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {} clusters from {} points",
            params.k, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..params.restarts.max(1) {
        let centers = plus_plus(points, params.k, &mut rng);
        let (labels, inertia) = lloyd(points, centers);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    let (labels, inertia) = best.expect("at least one restart");
    Ok(KMeansFit {
        labels: relabel_by_first_occurrence(&labels),
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let pts = DMatrix::from_row_slice(
            6,
            2,
            &[0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 5.0, 5.0, 5.1, 5.0, 5.0, 5.1],
        );
        let fit = kmeans(&pts, &KMeansParams::new(2)).unwrap();
        assert_eq!(fit.labels, vec![0, 0, 0, 1, 1, 1]);
        assert!(fit.inertia < 0.1);
    }

    #[test]
    fn identical_points_are_deterministic() {
        let pts = DMatrix::from_element(5, 3, 1.0);
        let a = kmeans(&pts, &KMeansParams::new(2)).unwrap();
        let b = kmeans(&pts, &KMeansParams::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = DMatrix::from_element(3, 2, 0.0);
        assert!(kmeans(&pts, &KMeansParams::new(0)).is_err());
        assert!(kmeans(&pts, &KMeansParams::new(4)).is_err());
    }

    #[test]
    fn relabeling() {
        assert_eq!(relabel_by_first_occurrence(&[3, 3, 1, 0, 1]), vec![0, 0, 1, 2, 1]);
    }
}
