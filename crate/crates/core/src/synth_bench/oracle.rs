//! Reference optimum of the self-expression objective for tiny instances.
//!
//! With `E` eliminated in closed form the objective becomes, per column `j`,
//!
//! ```text
//! f_j(w) = ‖w‖₁ + Σ_d h(x_j - X w)_d,   w_j = 0 [, Σ_i w_i = 1]
//! ```
//!
//! where `h` is the Huber function with knee `τ = le/lz`:
//! `h(r) = lz r²/2` for `|r| ≤ τ`, else `le |r| - le τ/2`. Columns are
//! independent, so each is minimized separately by exact coordinate descent
//! (single coordinates without the affine constraint, coordinate pairs
//! `w_p += t, w_q -= t` with it). Every one-dimensional subproblem is a
//! convex piecewise-quadratic and is solved exactly from its breakpoints.
//! Nothing here shares code with the ADMM solver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ssc_admm::{AdmmConfig, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Random restarts in addition to the all-zero (or uniform) start.
    pub random_starts: usize,
    pub max_sweeps: usize,
    /// Stop a start once no coordinate moves by more than this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            random_starts: 4,
            max_sweeps: 200_000,
            tolerance: 1e-13,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub w: DMatrix<f64>,
    pub objective: f64,
}

struct Huber {
    lambda_z: f64,
    lambda_e: f64,
    knee: f64,
}

impl Huber {
    fn new(cfg: &AdmmConfig) -> Self {
        Huber {
            lambda_z: cfg.lambda_z,
            lambda_e: cfg.lambda_e,
            knee: cfg.lambda_e / cfg.lambda_z,
        }
    }

    fn value(&self, r: f64) -> f64 {
        if r.abs() <= self.knee {
            0.5 * self.lambda_z * r * r
        } else {
            self.lambda_e * r.abs() - 0.5 * self.lambda_e * self.knee
        }
    }
}

/// Minimizes `Σ_k |c_k + s_k t| + Σ_d h(r_d - u_d t)` over scalar `t`.
///
/// The derivative is nondecreasing and affine between breakpoints, so the
/// minimizer is either a breakpoint (checked through one-sided derivatives)
/// or the root of one affine piece. Ties resolve to `t = 0` first.
fn line_minimize(abs_terms: &[(f64, f64)], r: &[f64], u: &[f64], h: &Huber) -> f64 {
    let smooth = |t: f64| -> f64 {
        r.iter()
            .zip(u)
            .map(|(&rd, &ud)| -ud * (h.lambda_z * (rd - ud * t)).clamp(-h.lambda_e, h.lambda_e))
            .sum()
    };
    // one-sided derivative; `side` is -1 (left) or +1 (right)
    let one_sided = |t: f64, side: f64| -> f64 {
        let kinks: f64 = abs_terms
            .iter()
            .map(|&(c, s)| {
                let z = c + s * t;
                if z == 0.0 {
                    side
                } else {
                    s * z.signum()
                }
            })
            .sum();
        kinks + smooth(t)
    };
    let optimal_at = |t: f64| one_sided(t, -1.0) <= 0.0 && one_sided(t, 1.0) >= 0.0;
    if optimal_at(0.0) {
        return 0.0;
    }

    let mut breaks: Vec<f64> = abs_terms.iter().map(|(c, s)| -c / s).collect();
    for (&rd, &ud) in r.iter().zip(u) {
        if ud != 0.0 {
            breaks.push((rd - h.knee) / ud);
            breaks.push((rd + h.knee) / ud);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    if let Some(&b) = breaks.iter().find(|&&b| optimal_at(b)) {
        return b;
    }

    // derivative on the open piece containing `probe`, as offset + slope * t
    let piece = |probe: f64| -> (f64, f64) {
        let mut offset: f64 = abs_terms.iter().map(|&(c, s)| s * (c + s * probe).signum()).sum();
        let mut slope = 0.0;
        for (&rd, &ud) in r.iter().zip(u) {
            let res = rd - ud * probe;
            if res.abs() <= h.knee {
                offset -= ud * h.lambda_z * rd;
                slope += ud * ud * h.lambda_z;
            } else {
                offset -= ud * h.lambda_e * res.signum();
            }
        }
        (offset, slope)
    };
    let m = breaks.len();
    for k in 0..=m {
        let lo = if k == 0 { f64::NEG_INFINITY } else { breaks[k - 1] };
        let hi = if k == m { f64::INFINITY } else { breaks[k] };
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0,
            (true, false) => lo + 1.0,
            (false, false) => 0.0,
        };
        let (offset, slope) = piece(probe);
        if slope > 0.0 {
            let root = -offset / slope;
            if root > lo && root < hi {
                return root;
            }
        } else if offset == 0.0 {
            return probe;
        }
    }
    0.0
}

fn column_objective(x: &DMatrix<f64>, j: usize, w: &DVector<f64>, h: &Huber) -> f64 {
    let r = x.column(j) - x * w;
    w.iter().map(|v| v.abs()).sum::<f64>() + r.iter().map(|&v| h.value(v)).sum::<f64>()
}

fn descend_column(x: &DMatrix<f64>, j: usize, mut w: DVector<f64>, affine: bool, h: &Huber, oc: &OracleConfig) -> DVector<f64> {
    let n = x.ncols();
    let mut r: DVector<f64> = x.column(j) - x * &w;
    let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
    for _ in 0..oc.max_sweeps {
        let mut moved = 0.0f64;
        if affine {
            for (a, &p) in others.iter().enumerate() {
                for &q in &others[a + 1..] {
                    let u: Vec<f64> = (0..x.nrows()).map(|d| x[(d, p)] - x[(d, q)]).collect();
                    let t = line_minimize(&[(w[p], 1.0), (w[q], -1.0)], r.as_slice(), &u, h);
                    if t != 0.0 {
                        w[p] += t;
                        w[q] -= t;
                        for (rd, ud) in r.iter_mut().zip(&u) {
                            *rd -= ud * t;
                        }
                        moved = moved.max(t.abs());
                    }
                }
            }
        } else {
            for &i in &others {
                let xi = x.column(i);
                let base: Vec<f64> = r.iter().zip(xi.iter()).map(|(rd, xd)| rd + xd * w[i]).collect();
                let t = line_minimize(&[(0.0, 1.0)], &base, xi.as_slice(), h);
                let delta = t - w[i];
                if delta != 0.0 {
                    w[i] = t;
                    for (rd, xd) in r.iter_mut().zip(xi.iter()) {
                        *rd -= xd * delta;
                    }
                    moved = moved.max(delta.abs());
                }
            }
        }
        if moved <= oc.tolerance {
            break;
        }
    }
    w
}

/// Best objective found by coordinate descent over several starts.
pub fn coordinate_descent_optimum(x: &EmbeddingMatrix, cfg: &AdmmConfig, oc: &OracleConfig) -> OracleSolution {
    let xm = x.columns();
    let n = xm.ncols();
    let h = Huber::new(cfg);
    let affine = cfg.affine_constraint;
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);
    let mut w_out = DMatrix::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for start in 0..=oc.random_starts {
            let mut w0 = DVector::from_fn(n, |_, _| if start == 0 { 0.0 } else { rng.random_range(-1.0..1.0) });
            w0[j] = 0.0;
            if affine && n > 1 {
                let shift = (1.0 - w0.sum()) / (n - 1) as f64;
                for i in (0..n).filter(|&i| i != j) {
                    w0[i] += shift;
                }
            }
            let w = descend_column(xm, j, w0, affine, &h, oc);
            let f = column_objective(xm, j, &w, &h);
            if best.as_ref().is_none_or(|b| f < b.0) {
                best = Some((f, w));
            }
        }
        let (f, w) = best.expect("at least one start");
        total += f;
        w_out.set_column(j, &w);
    }
    OracleSolution { w: w_out, objective: total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h() -> Huber {
        Huber::new(&AdmmConfig::default())
    }

    /// Dense scan of the same one-dimensional function.
    fn scan(abs_terms: &[(f64, f64)], r: &[f64], u: &[f64], h: &Huber) -> f64 {
        let f = |t: f64| {
            abs_terms.iter().map(|(c, s)| (c + s * t).abs()).sum::<f64>()
                + r.iter().zip(u).map(|(rd, ud)| h.value(rd - ud * t)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0.0);
        for k in -40_000..=40_000 {
            let t = k as f64 * 1e-4;
            let v = f(t);
            if v < best.0 {
                best = (v, t);
            }
        }
        best.1
    }

    #[test]
    fn line_minimize_matches_scan() {
        let h = h();
        let cases: Vec<(Vec<(f64, f64)>, Vec<f64>, Vec<f64>)> = vec![
            (vec![(0.0, 1.0)], vec![0.5, -0.2], vec![0.8, 0.1]),
            (vec![(0.0, 1.0)], vec![1e-4], vec![1.0]),
            (vec![(0.3, 1.0), (0.7, -1.0)], vec![0.4, 0.9, -0.3], vec![0.5, -0.5, 0.2]),
            (vec![(0.0, 1.0)], vec![3.0, 2.5], vec![1.0, 0.9]),
        ];
        for (terms, r, u) in cases {
            let t = line_minimize(&terms, &r, &u, &h);
            assert!((t - scan(&terms, &r, &u, &h)).abs() < 2e-4, "t = {t}");
        }
    }

    #[test]
    fn zero_direction_stays_put() {
        assert_eq!(line_minimize(&[(0.0, 1.0)], &[0.3], &[0.0], &h()), 0.0);
    }

    #[test]
    fn duplicate_tokens() {
        let x = EmbeddingMatrix::from_token_columns(DMatrix::from_row_slice(2, 2, &[0.6, 0.6, 0.8, 0.8])).unwrap();
        let cfg = AdmmConfig { affine_constraint: false, ..AdmmConfig::default() };
        let sol = coordinate_descent_optimum(&x, &cfg, &OracleConfig::default());
        // minimize |w| + 400 (1 - w)^2  ->  w = 1 - 1/800
        assert!((sol.w[(0, 1)] - (1.0 - 1.0 / 800.0)).abs() < 1e-9);
        assert!((sol.w[(1, 0)] - (1.0 - 1.0 / 800.0)).abs() < 1e-9);

        let affine = coordinate_descent_optimum(&x, &AdmmConfig::default(), &OracleConfig::default());
        assert_eq!(affine.w[(0, 1)], 1.0);
        assert_eq!(affine.w[(1, 0)], 1.0);
    }

    #[test]
    fn orthogonal_tokens_zero() {
        let x = EmbeddingMatrix::from_token_columns(DMatrix::identity(3, 3)).unwrap();
        let cfg = AdmmConfig { affine_constraint: false, ..AdmmConfig::default() };
        let sol = coordinate_descent_optimum(&x, &cfg, &OracleConfig::default());
        assert_eq!(sol.w, DMatrix::zeros(3, 3));
        assert!((sol.objective - 3.0 * 400.0).abs() < 1e-9);
    }
}
