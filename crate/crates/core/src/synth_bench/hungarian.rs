//! Clustering accuracy under the best one-to-one relabeling.

use crate::error::{Error, Result};

/// Minimum-cost perfect assignment on a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials over 1-based rows/columns; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = next;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            matched_row[col0] = matched_row[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[matched_row[col] - 1] = col - 1;
    }
    assignment
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Fraction of tokens whose predicted cluster maps to their true cluster
/// under the best bijection between cluster ids.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let m = kp.max(kt);
    let mut counts = vec![vec![0.0; m]; m];
    for (&a, &b) in p.iter().zip(&t) {
        counts[a][b] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let assignment = min_cost_assignment(&cost);
    let matched: f64 = assignment.iter().enumerate().map(|(r, &c)| counts[r][c]).sum();
    Ok(matched / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over all bijections (oracle for small label sets).
    fn brute_force(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(k)
            .into_iter()
            .map(|map| pred.iter().zip(truth).filter(|(a, b)| map[**a] == **b).count())
            .max()
            .unwrap() as f64
            / pred.len() as f64
    }

    #[test]
    fn hand_cases() {
        assert_eq!(hungarian_accuracy(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(hungarian_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(hungarian_accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(hungarian_accuracy(&[2, 2, 7, 5], &[0, 0, 1, 2]).unwrap(), 1.0);
        assert!(hungarian_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn unequal_cluster_counts() {
        // three predicted clusters against two true ones
        assert_eq!(hungarian_accuracy(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn assignment_on_known_matrix() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = min_cost_assignment(&cost);
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..24)) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let fast = hungarian_accuracy(&pred, &truth).unwrap();
            prop_assert!((fast - brute_force(&pred, &truth, 4)).abs() < 1e-12);
        }

        #[test]
        fn relabeling_is_free(truth in proptest::collection::vec(0usize..5, 1..30), shift in 1usize..5) {
            let pred: Vec<usize> = truth.iter().map(|l| (l + shift) % 5 + 10).collect();
            prop_assert_eq!(hungarian_accuracy(&pred, &truth).unwrap(), 1.0);
        }
    }
}
