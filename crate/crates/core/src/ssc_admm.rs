//! Sparse self-expression by ADMM.
//!
//! Tokens are the columns of a `D x N` data matrix `X`. The solver runs the
//! four-step iteration
//!
//! ```text
//! A  <- (lz XᵀX + ρI + ρ11ᵀ)⁻¹ (lz Xᵀ(X - E) + ρ(W + 11ᵀ) - 1Δ₁ᵀ - Δ₂)
//! W  <- S_{1/ρ}(A + Δ₂/ρ),  diag(W) <- 0
//! E  <- S_{le/lz}(X - XA)
//! Δ₁ <- Δ₁ + ρ(Aᵀ1 - 1)
//! Δ₂ <- Δ₂ + ρ(A - W)
//! ```
//!
//! (the `11ᵀ` and `Δ₁` terms only in affine mode) until `‖A - W‖∞ < ε`.
//! These updates are the exact ADMM for
//!
//! ```text
//! min ‖W‖₁ + le ‖E‖₁ + (lz/2) ‖X - XW - E‖²_F   s.t. diag(W) = 0 [, Wᵀ1 = 1]
//! ```
//!
//! which is the objective `synth_bench::oracle_objective` evaluates.

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Width of the residual monitoring window, in iterations.
pub const MONITOR_WINDOW: usize = 50;

/// Visual-token features stored with one token per column (`D x N_Vis`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(DMatrix<f64>);

impl EmbeddingMatrix {
    /// Takes a `N_Vis x D` matrix (one token per row, the on-disk layout).
    pub fn from_token_rows(rows: DMatrix<f64>) -> Result<Self> {
        Self::from_token_columns(rows.transpose())
    }

    /// Takes a `D x N_Vis` matrix (one token per column).
    pub fn from_token_columns(cols: DMatrix<f64>) -> Result<Self> {
        if let Some(idx) = cols.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(EmbeddingMatrix(cols))
    }

    pub fn n_tokens(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_token_rows(&self) -> DMatrix<f64> {
        self.0.transpose()
    }

    /// Token `perm[i]` of `self` becomes token `i` of the result.
    pub fn permute_tokens(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_tokens())?;
        Ok(EmbeddingMatrix(self.0.select_columns(perm)))
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Shape(format!("permutation of length {} for {n} tokens", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub lambda_e: f64,
    pub lambda_z: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub affine_constraint: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 300.0,
            lambda_e: 800.0,
            lambda_z: 800.0,
            epsilon: 2e-4,
            max_iter: 10_000,
            affine_constraint: true,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("lambda_e", self.lambda_e),
            ("lambda_z", self.lambda_z),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Iterates of the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub delta1: DVector<f64>,
    pub delta2: DMatrix<f64>,
    pub iter: usize,
    pub residual_inf: f64,
}

impl AdmmState {
    pub fn zeros(x: &EmbeddingMatrix) -> Self {
        let n = x.n_tokens();
        AdmmState {
            a: DMatrix::zeros(n, n),
            w: DMatrix::zeros(n, n),
            e: DMatrix::zeros(x.dim(), n),
            delta1: DVector::zeros(n),
            delta2: DMatrix::zeros(n, n),
            iter: 0,
            residual_inf: f64::INFINITY,
        }
    }

    fn check_shapes(&self, x: &EmbeddingMatrix) -> Result<()> {
        let n = x.n_tokens();
        let square = (n, n);
        if self.a.shape() != square
            || self.w.shape() != square
            || self.delta2.shape() != square
            || self.delta1.len() != n
            || self.e.shape() != (x.dim(), n)
        {
            return Err(Error::Shape(format!(
                "ADMM state does not match a {}x{} data matrix",
                x.dim(),
                n
            )));
        }
        Ok(())
    }
}

/// Learned coefficients; `w` has an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfExpressionMatrix {
    pub w: DMatrix<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    pub final_residual: f64,
}

impl SelfExpressionMatrix {
    /// Wraps an externally produced coefficient matrix (e.g. read from disk).
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::Shape(format!(
                "self-expression matrix must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if let Some(i) = (0..w.nrows()).find(|&i| w[(i, i)] != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "self-expression matrix has non-zero diagonal entry at {i}"
            )));
        }
        Ok(SelfExpressionMatrix {
            w,
            converged: true,
            iterations_used: 0,
            final_residual: 0.0,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.w.nrows()
    }
}

#[inline]
pub(crate) fn shrink(v: f64, eta: f64) -> f64 {
    if v > eta {
        v - eta
    } else if v < -eta {
        v + eta
    } else {
        0.0
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta >= 0.0 && !eta.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("soft-threshold level must be >= 0, got {eta}")))
    }
}

/// `sign(v) * max(|v| - eta, 0)`.
pub fn soft_threshold(v: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(shrink(v, eta))
}

/// Elementwise [`soft_threshold`].
pub fn soft_threshold_matrix(m: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    check_eta(eta)?;
    Ok(m.map(|v| shrink(v, eta)))
}

/// Holds the factorized system matrix so that repeated steps reuse it.
pub struct AdmmSolver<'a> {
    x: &'a EmbeddingMatrix,
    cfg: AdmmConfig,
    /// (lz XᵀX + ρI [+ ρ11ᵀ])⁻¹
    system_inv: DMatrix<f64>,
    /// system_inv · lz XᵀX
    data_term: DMatrix<f64>,
    /// system_inv · Xᵀ
    inv_xt: DMatrix<f64>,
    /// system_inv · 1
    inv_ones: DVector<f64>,
}

impl<'a> AdmmSolver<'a> {
    pub fn new(x: &'a EmbeddingMatrix, cfg: &AdmmConfig) -> Result<Self> {
        cfg.validate()?;
        let n = x.n_tokens();
        let xm = x.columns();
        let gram = xm.transpose() * xm;
        let mut system = &gram * cfg.lambda_z;
        for i in 0..n {
            system[(i, i)] += cfg.rho;
        }
        if cfg.affine_constraint {
            system.add_scalar_mut(cfg.rho);
        }
        let chol = Cholesky::new(system).ok_or(Error::SingularSystem)?;
        let system_inv = chol.inverse();
        if system_inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        let data_term = &system_inv * (&gram * cfg.lambda_z);
        let inv_xt = &system_inv * xm.transpose();
        let inv_ones = system_inv.column_sum();
        Ok(AdmmSolver {
            x,
            cfg: *cfg,
            system_inv,
            data_term,
            inv_xt,
            inv_ones,
        })
    }

    /// One full sweep of the four updates, in place.
    pub fn step(&self, s: &mut AdmmState) -> Result<()> {
        s.check_shapes(self.x)?;
        let cfg = &self.cfg;
        let rho = cfg.rho;
        let n = self.x.n_tokens();
        let xm = self.x.columns();

        // A-update, expanded so that only the iterate-dependent parts are
        // multiplied each sweep.
        let mut a = self.data_term.clone();
        let coupling = &s.w * rho - &s.delta2;
        a.gemm(1.0, &self.system_inv, &coupling, 1.0);
        if s.e.iter().any(|&v| v != 0.0) {
            a.gemm(-cfg.lambda_z, &self.inv_xt, &s.e, 1.0);
        }
        if cfg.affine_constraint {
            let shift = s.delta1.map(|d| rho - d);
            a.ger(1.0, &self.inv_ones, &shift, 1.0);
        }

        let eta = 1.0 / rho;
        let mut w = a.zip_map(&s.delta2, |av, dv| shrink(av + dv / rho, eta));
        w.fill_diagonal(0.0);

        let tau = cfg.lambda_e / cfg.lambda_z;
        let mut residual = xm.clone();
        residual.gemm(-1.0, xm, &a, 1.0);
        let e = residual.map(|v| shrink(v, tau));

        if cfg.affine_constraint {
            let sums = a.row_sum().transpose();
            for i in 0..n {
                s.delta1[i] += rho * (sums[i] - 1.0);
            }
        }
        let mut max_gap = 0.0f64;
        for ((d, &av), &wv) in s.delta2.iter_mut().zip(a.iter()).zip(w.iter()) {
            let gap = av - wv;
            *d += rho * gap;
            max_gap = max_gap.max(gap.abs());
        }

        if !(max_gap.is_finite()
            && a.iter().all(|v| v.is_finite())
            && e.iter().all(|v| v.is_finite())
            && s.delta1.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(0));
        }

        s.a = a;
        s.w = w;
        s.e = e;
        s.iter += 1;
        s.residual_inf = max_gap;
        Ok(())
    }
}

/// Applies one ADMM sweep to `state`. Factorizes the system matrix on every
/// call; loops should use [`AdmmSolver`] directly.
pub fn admm_step(state: &AdmmState, x: &EmbeddingMatrix, cfg: &AdmmConfig) -> Result<AdmmState> {
    let solver = AdmmSolver::new(x, cfg)?;
    let mut next = state.clone();
    solver.step(&mut next)?;
    Ok(next)
}

/// Everything a solve produced, including the per-iteration residual trace.
#[derive(Debug, Clone)]
pub struct AdmmRun {
    pub solution: SelfExpressionMatrix,
    pub state: AdmmState,
    pub trace: Vec<f64>,
}

impl AdmmRun {
    /// `‖Aᵀ1 - 1‖∞` of the final coefficient iterate.
    pub fn affine_violation(&self) -> f64 {
        self.state
            .a
            .row_sum()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// The residual trace as `iter,residual_inf` CSV lines.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,residual_inf\n");
        for (i, r) in self.trace.iter().enumerate() {
            out.push_str(&format!("{},{:e}\n", i + 1, r));
        }
        out
    }
}

/// Indices of monitoring windows whose smallest residual exceeds the
/// smallest residual of the preceding window.
///
/// The trace is cut into consecutive windows of `window` iterations (the
/// trailing partial window included); an empty result means every window
/// reached at least as low a residual as the one before it.
pub fn window_regressions(trace: &[f64], window: usize) -> Vec<usize> {
    let minima: Vec<f64> = trace
        .chunks(window.max(1))
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    minima
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, _)| i + 1)
        .collect()
}

pub fn admm_run(x: &EmbeddingMatrix, cfg: &AdmmConfig) -> Result<AdmmRun> {
    if x.n_tokens() < 2 {
        return Err(Error::InvalidArgument(format!(
            "self-expression needs at least 2 tokens, got {}",
            x.n_tokens()
        )));
    }
    let solver = AdmmSolver::new(x, cfg)?;
    let mut state = AdmmState::zeros(x);
    let mut trace = Vec::new();
    let mut converged = false;
    while state.iter < cfg.max_iter {
        solver.step(&mut state)?;
        trace.push(state.residual_inf);
        if state.residual_inf < cfg.epsilon {
            converged = true;
            break;
        }
    }
    let regressions = window_regressions(&trace, MONITOR_WINDOW);
    if !regressions.is_empty() {
        warn!(
            "residual did not improve in {} of {} monitoring windows",
            regressions.len(),
            trace.len().div_ceil(MONITOR_WINDOW)
        );
    }
    debug!(
        "admm: {} iterations, residual {:e}, converged {}",
        state.iter, state.residual_inf, converged
    );
    let solution = SelfExpressionMatrix {
        w: state.w.clone(),
        converged,
        iterations_used: state.iter,
        final_residual: state.residual_inf,
    };
    Ok(AdmmRun {
        solution,
        state,
        trace,
    })
}

/// Solves for the self-expression matrix of `x`. Non-convergence within
/// `max_iter` is reported through [`SelfExpressionMatrix::converged`].
pub fn admm_solve(x: &EmbeddingMatrix, cfg: &AdmmConfig) -> Result<SelfExpressionMatrix> {
    admm_run(x, cfg).map(|run| run.solution)
}
