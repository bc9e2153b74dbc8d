//! Synthetic union-of-subspaces data, clustering metrics, reference optima,
//! and the end-to-end pipeline driver.

mod hungarian;
mod oracle;

pub use hungarian::{hungarian_accuracy, min_cost_assignment};
pub use oracle::{coordinate_descent_optimum, OracleConfig, OracleSolution};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anchor_score::{
    kmeans_anchor_scores, make_scalers, sharing_scores_with, uniform_anchor_scores, AnchorScores, BoostContext,
    ScalerTriple, Scorer,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::ssc_admm::{admm_run, AdmmConfig, AdmmRun, EmbeddingMatrix, SelfExpressionMatrix};
use crate::subspace_graph::{cluster_tokens, AffinityMatrix, SubspaceAssignment};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_subspaces: usize,
    pub subspace_dim: usize,
    pub ambient_dim: usize,
    pub points_per_subspace: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Draw all bases from one orthonormal frame so distinct subspaces are
    /// mutually orthogonal. Needs `n_subspaces * subspace_dim <= ambient_dim`.
    pub orthogonal: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subspaces: 5,
            subspace_dim: 4,
            ambient_dim: 64,
            points_per_subspace: 40,
            noise_sigma: 0.01,
            seed: 0,
            orthogonal: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subspaces == 0 || self.subspace_dim == 0 || self.points_per_subspace == 0 {
            return Err(Error::InvalidConfig("synthetic counts must all be >= 1".into()));
        }
        if self.subspace_dim >= self.ambient_dim {
            return Err(Error::InvalidConfig(format!(
                "subspace_dim = {} must be below ambient_dim = {}",
                self.subspace_dim, self.ambient_dim
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.orthogonal && self.n_subspaces * self.subspace_dim > self.ambient_dim {
            return Err(Error::InvalidConfig(format!(
                "{} orthogonal subspaces of dim {} do not fit in dimension {}",
                self.n_subspaces, self.subspace_dim, self.ambient_dim
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_subspaces * self.points_per_subspace
    }
}

/// Embeddings with the subspace each token was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub x: EmbeddingMatrix,
    pub truth: Vec<usize>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Samples points on a union of random subspaces.
///
/// Each subspace gets a random orthonormal basis; each point is a Gaussian
/// combination of its basis vectors scaled to unit norm, plus isotropic
/// noise of scale `noise_sigma`. Tokens appear in a seeded random order.
pub fn generate_union_of_subspaces(cfg: &SynthConfig) -> Result<LabeledEmbeddings> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dd, d) = (cfg.ambient_dim, cfg.subspace_dim);
    let bases: Vec<DMatrix<f64>> = if cfg.orthogonal {
        let frame = gaussian_matrix(dd, cfg.n_subspaces * d, &mut rng).qr().q();
        (0..cfg.n_subspaces)
            .map(|s| frame.columns(s * d, d).into_owned())
            .collect()
    } else {
        (0..cfg.n_subspaces)
            .map(|_| gaussian_matrix(dd, d, &mut rng).qr().q())
            .collect()
    };

    let mut order: Vec<usize> = (0..cfg.n_tokens()).collect();
    order.shuffle(&mut rng);
    let mut cols = DMatrix::zeros(dd, cfg.n_tokens());
    let mut truth = vec![0; cfg.n_tokens()];
    for (t, &slot) in order.iter().enumerate() {
        let s = t / cfg.points_per_subspace;
        let mut p = loop {
            let c = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let p = &bases[s] * c;
            if p.norm() > 0.0 {
                break p.normalize();
            }
        };
        if cfg.noise_sigma > 0.0 {
            p += DVector::from_fn(dd, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.noise_sigma * z
            });
        }
        cols.set_column(slot, &p);
        truth[slot] = s;
    }
    Ok(LabeledEmbeddings {
        x: EmbeddingMatrix::from_token_columns(cols)?,
        truth,
    })
}

/// `‖W‖₁ + λ_e ‖E‖₁ + (λ_z/2) ‖X - XW - E‖²_F`, the objective the ADMM
/// updates descend.
pub fn oracle_objective(x: &EmbeddingMatrix, w: &DMatrix<f64>, e: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<f64> {
    let xm = x.columns();
    let n = xm.ncols();
    if w.shape() != (n, n) || e.shape() != xm.shape() {
        return Err(Error::Shape(format!(
            "objective needs W {n}x{n} and E {}x{n}, got {:?} and {:?}",
            xm.nrows(),
            w.shape(),
            e.shape()
        )));
    }
    let fit = xm - xm * w - e;
    Ok(w.abs().sum() + cfg.lambda_e * e.abs().sum() + 0.5 * cfg.lambda_z * fit.norm_squared())
}

/// The objective at `W` with the best `E`, i.e. `E = S_{λe/λz}(X - XW)`.
pub fn profile_objective(x: &EmbeddingMatrix, w: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<f64> {
    let xm = x.columns();
    if w.shape() != (xm.ncols(), xm.ncols()) {
        return Err(Error::Shape(format!("W has shape {:?} for {} tokens", w.shape(), xm.ncols())));
    }
    let tau = cfg.lambda_e / cfg.lambda_z;
    let e = (xm - xm * w).map(|r| r.signum() * (r.abs() - tau).max(0.0));
    oracle_objective(x, w, &e, cfg)
}

/// Every intermediate of one pipeline run. Solver and graph stages are
/// absent when the scorer does not use them.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub admm: Option<AdmmRun>,
    pub thresholded: Option<SelfExpressionMatrix>,
    pub affinity: Option<AffinityMatrix>,
    pub assignment: Option<SubspaceAssignment>,
    pub scores: AnchorScores,
    pub scalers: ScalerTriple,
}

/// Embeddings → self-expression → clustering → scores → scalers.
///
/// `x` holds the visual tokens only, in the order of
/// `layout.visual_indices()`. The scorer in `cfg.score` selects the anchor
/// signal: subspace sharing (default), uniform, or k-means cluster size.
pub fn run_pipeline(x: &EmbeddingMatrix, layout: &TokenLayout, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if x.n_tokens() != layout.n_visual() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} visual tokens",
            x.n_tokens(),
            layout.n_visual()
        )));
    }
    match cfg.score.scorer {
        Scorer::Ssc => {
            let run = admm_run(x, &cfg.admm)?;
            let (thresholded, affinity, assignment) = cluster_tokens(&run.solution, &cfg.graph)?;
            let source = if cfg.score.use_unthresholded {
                &run.solution
            } else {
                &thresholded
            };
            let raw = sharing_scores_with(source, &assignment, cfg.score.reduction)?;
            let scores = AnchorScores::from_raw(raw, cfg.score.epsilon, layout)?;
            let ctx = BoostContext {
                assignment: &assignment,
                layout,
            };
            let scalers = make_scalers(&scores.extended, &cfg.scaler, Some(ctx))?;
            Ok(PipelineOutput {
                admm: Some(run),
                thresholded: Some(thresholded),
                affinity: Some(affinity),
                assignment: Some(assignment),
                scores,
                scalers,
            })
        }
        Scorer::Uniform => {
            let scores = uniform_anchor_scores(layout);
            let scalers = make_scalers(&scores.extended, &cfg.scaler, None)?;
            Ok(PipelineOutput {
                admm: None,
                thresholded: None,
                affinity: None,
                assignment: None,
                scores,
                scalers,
            })
        }
        Scorer::KMeans => {
            let (assignment, scores) = kmeans_anchor_scores(x, &cfg.graph.kmeans_params(), layout, cfg.score.epsilon)?;
            let ctx = BoostContext {
                assignment: &assignment,
                layout,
            };
            let scalers = make_scalers(&scores.extended, &cfg.scaler, Some(ctx))?;
            Ok(PipelineOutput {
                admm: None,
                thresholded: None,
                affinity: None,
                assignment: Some(assignment),
                scores,
                scalers,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor_score::ScalerConfig;
    use crate::subspace_graph::GraphConfig;

    fn small(n_subspaces: usize, dim: usize, ambient: usize, pts: usize, sigma: f64, orthogonal: bool) -> SynthConfig {
        SynthConfig {
            n_subspaces,
            subspace_dim: dim,
            ambient_dim: ambient,
            points_per_subspace: pts,
            noise_sigma: sigma,
            seed: 3,
            orthogonal,
        }
    }

    #[test]
    fn config_validation() {
        assert!(small(2, 4, 4, 3, 0.0, false).validate().is_err());
        assert!(small(0, 1, 4, 3, 0.0, false).validate().is_err());
        assert!(small(2, 1, 4, 3, -1.0, false).validate().is_err());
        assert!(small(3, 2, 5, 3, 0.0, true).validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn single_line_is_collinear() {
        let data = generate_union_of_subspaces(&small(1, 1, 6, 10, 0.0, false)).unwrap();
        let x = data.x.columns();
        let first = x.column(0).into_owned();
        for c in x.column_iter() {
            assert!((c.dot(&first).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_labeled() {
        let cfg = small(3, 2, 8, 5, 0.1, false);
        let a = generate_union_of_subspaces(&cfg).unwrap();
        let b = generate_union_of_subspaces(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.truth.len(), 15);
        for s in 0..3 {
            assert_eq!(a.truth.iter().filter(|&&t| t == s).count(), 5);
        }
    }

    #[test]
    fn orthogonal_bases_are_orthogonal() {
        let data = generate_union_of_subspaces(&small(3, 2, 8, 4, 0.0, true)).unwrap();
        let x = data.x.columns();
        for i in 0..x.ncols() {
            for j in 0..x.ncols() {
                if data.truth[i] != data.truth[j] {
                    assert!(x.column(i).dot(&x.column(j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_cost_only_the_error_term() {
        let x = EmbeddingMatrix::from_token_columns(DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]))
            .unwrap();
        let cfg = AdmmConfig::default();
        let f = oracle_objective(&x, &DMatrix::zeros(3, 3), x.columns(), &cfg).unwrap();
        assert_eq!(f, 800.0 * 7.5);
    }

    #[test]
    fn objective_shape_errors() {
        let x = EmbeddingMatrix::from_token_columns(DMatrix::identity(2, 2)).unwrap();
        let cfg = AdmmConfig::default();
        assert!(oracle_objective(&x, &DMatrix::zeros(3, 3), x.columns(), &cfg).is_err());
        assert!(profile_objective(&x, &DMatrix::zeros(2, 3), &cfg).is_err());
    }

    #[test]
    fn duplicate_pair_oracle_beats_grid() {
        let x = EmbeddingMatrix::from_token_columns(DMatrix::from_row_slice(2, 2, &[0.6, 0.6, 0.8, 0.8])).unwrap();
        let cfg = AdmmConfig {
            affine_constraint: false,
            ..AdmmConfig::default()
        };
        let best = coordinate_descent_optimum(&x, &cfg, &OracleConfig::default());
        for a in -20..=20 {
            for b in -20..=20 {
                let w = DMatrix::from_row_slice(2, 2, &[0.0, a as f64 / 10.0, b as f64 / 10.0, 0.0]);
                assert!(best.objective <= profile_objective(&x, &w, &cfg).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn zero_alphas_give_unit_scalers() {
        let data = generate_union_of_subspaces(&small(2, 2, 10, 6, 0.01, false)).unwrap();
        let cfg = RunConfig {
            graph: GraphConfig {
                n_subspaces: 2,
                ..GraphConfig::default()
            },
            ..RunConfig::default()
        };
        let out = run_pipeline(&data.x, &TokenLayout::all_visual(12), &cfg).unwrap();
        assert_eq!(out.scalers, ScalerTriple::ones(12));
    }

    #[test]
    fn orthogonal_lines_recovered() {
        // points on a line carry random signs, so the affine constraint could
        // only be met by cancelling pairs from the other line
        let data = generate_union_of_subspaces(&small(2, 1, 6, 4, 0.0, true)).unwrap();
        let cfg = RunConfig {
            admm: AdmmConfig {
                affine_constraint: false,
                ..AdmmConfig::default()
            },
            graph: GraphConfig {
                n_subspaces: 2,
                ..GraphConfig::default()
            },
            scaler: ScalerConfig::with_alphas(1.0, 1.0, 1.0),
            ..RunConfig::default()
        };
        let out = run_pipeline(&data.x, &TokenLayout::all_visual(8), &cfg).unwrap();
        let aff = out.affinity.unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if data.truth[i] != data.truth[j] {
                    assert_eq!(aff.matrix()[(i, j)], 0.0);
                }
            }
        }
        let acc = hungarian_accuracy(&out.assignment.unwrap().labels, &data.truth).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn duplicated_tokens_share_scores() {
        // two exact copies of each of three directions
        let base = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.6, 0.0, 1.0, 0.8, 0.0, 0.0, 0.0]);
        let cols = DMatrix::from_fn(3, 6, |r, c| base[(r, c / 2)]);
        let x = EmbeddingMatrix::from_token_columns(cols).unwrap();
        let cfg = RunConfig {
            graph: GraphConfig {
                n_subspaces: 3,
                ..GraphConfig::default()
            },
            ..RunConfig::default()
        };
        let out = run_pipeline(&x, &TokenLayout::all_visual(6), &cfg).unwrap();
        for p in 0..3 {
            let (a, b) = (out.scores.raw[2 * p], out.scores.raw[2 * p + 1]);
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_and_kmeans_scorers() {
        let data = generate_union_of_subspaces(&small(2, 2, 10, 6, 0.01, false)).unwrap();
        let layout = TokenLayout::new(14, (0..12).collect()).unwrap();
        let mut cfg = RunConfig {
            graph: GraphConfig {
                n_subspaces: 2,
                ..GraphConfig::default()
            },
            scaler: ScalerConfig::with_alphas(1.0, 2.0, 0.5),
            ..RunConfig::default()
        };
        cfg.score.scorer = Scorer::Uniform;
        let u = run_pipeline(&data.x, &layout, &cfg).unwrap();
        assert_eq!(u.scalers.gamma_k[0], 3.0);
        assert_eq!(u.scalers.gamma_k[13], 1.0);

        cfg.score.scorer = Scorer::KMeans;
        let k = run_pipeline(&data.x, &layout, &cfg).unwrap();
        assert_eq!(k.scalers.len(), 14);
        assert!(k.scalers.gamma_q.iter().all(|&g| (1.0..=2.0).contains(&g)));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let data = generate_union_of_subspaces(&small(2, 2, 10, 3, 0.0, false)).unwrap();
        let cfg = RunConfig {
            graph: GraphConfig {
                n_subspaces: 2,
                ..GraphConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(run_pipeline(&data.x, &TokenLayout::all_visual(5), &cfg).is_err());
    }
}
