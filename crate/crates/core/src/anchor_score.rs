//! Anchor scores and the token-wise Q/K/V scalers derived from them.
//!
//! For token `i` with cluster size `π_i` and coefficient mass
//! `r_i = Σ_j |W_ij|`, the raw score is `ŝ_i = π_i · r_i`. Scores are
//! min–max normalized, placed into the full token sequence with zeros at
//! text positions (`s̃`), and turned into `γ = 1 + α s̃`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::layout::TokenLayout;
use crate::ssc_admm::{EmbeddingMatrix, SelfExpressionMatrix};
use crate::subspace_graph::SubspaceAssignment;

pub const DEFAULT_SCORE_EPSILON: f64 = 1e-12;

/// Which scorer produces `s̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scorer {
    /// Sharing-expression scores from the self-expression matrix.
    #[default]
    Ssc,
    /// 1 at every visual position.
    Uniform,
    /// Cluster sizes from k-means on the raw embeddings.
    KMeans,
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssc" => Ok(Scorer::Ssc),
            "uniform" => Ok(Scorer::Uniform),
            "kmeans" => Ok(Scorer::KMeans),
            other => Err(Error::InvalidArgument(format!("unknown scorer `{other}`"))),
        }
    }
}

/// How the per-token coefficient mass `r_i` is reduced from `|W|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassReduction {
    /// `Σ_j |W_ij|`: how much token `i` contributes to reconstructing others.
    #[default]
    RowSum,
    /// `Σ_j |W_ji|`: diagnostic alternative.
    ColumnSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub scorer: Scorer,
    pub epsilon: f64,
    pub reduction: MassReduction,
    /// Compute `r_i` from W before column thresholding.
    pub use_unthresholded: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            scorer: Scorer::Ssc,
            epsilon: DEFAULT_SCORE_EPSILON,
            reduction: MassReduction::RowSum,
            use_unthresholded: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "score epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalerConfig {
    pub alpha_q: f64,
    pub alpha_k: f64,
    pub alpha_v: f64,
    pub scale_q: bool,
    pub scale_k: bool,
    pub scale_v: bool,
    /// Boost only the `m` most populous subspaces; `None` boosts all.
    pub boost_top_m: Option<usize>,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            alpha_q: 0.0,
            alpha_k: 0.0,
            alpha_v: 0.0,
            scale_q: true,
            scale_k: true,
            scale_v: true,
            boost_top_m: None,
        }
    }
}

/// Per-backbone `(α_Q, α_K, α_V)` used for spatial-reasoning evaluation.
pub const ALPHA_PRESETS: &[(&str, [f64; 3])] = &[
    ("internvl2-4b", [2.5, 2.0, 3.0]),
    ("internvl2-8b", [4.0, 9.5, 2.5]),
    ("llava-video-7b", [2.0, 2.0, 0.5]),
    ("qwen2.5vl-7b", [3.5, 3.5, 0.25]),
];

impl ScalerConfig {
    /// α values of a named backbone from [`ALPHA_PRESETS`] (case-insensitive).
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        ALPHA_PRESETS
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, [q, k, v])| ScalerConfig::with_alphas(*q, *k, *v))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown alpha preset `{name}`")))
    }

    pub fn with_alphas(alpha_q: f64, alpha_k: f64, alpha_v: f64) -> Self {
        ScalerConfig {
            alpha_q,
            alpha_k,
            alpha_v,
            ..ScalerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_q", self.alpha_q), ("alpha_k", self.alpha_k), ("alpha_v", self.alpha_v)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {a}")));
            }
        }
        if self.boost_top_m == Some(0) {
            return Err(Error::InvalidConfig("boost_top_m must be >= 1 when set".into()));
        }
        Ok(())
    }

    /// α values after the per-component toggles.
    pub fn effective_alphas(&self) -> [f64; 3] {
        [
            if self.scale_q { self.alpha_q } else { 0.0 },
            if self.scale_k { self.alpha_k } else { 0.0 },
            if self.scale_v { self.alpha_v } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorScores {
    /// ŝ over visual tokens.
    pub raw: DVector<f64>,
    /// s over visual tokens, in [0, 1].
    pub normalized: DVector<f64>,
    /// s̃ over the full sequence, zero at text positions.
    pub extended: DVector<f64>,
}

impl AnchorScores {
    /// Normalizes `raw` and places it into `layout`.
    pub fn from_raw(raw: DVector<f64>, epsilon: f64, layout: &TokenLayout) -> Result<Self> {
        let normalized = normalize_scores(&raw, epsilon)?;
        let extended = extend_scores(&normalized, layout)?;
        Ok(AnchorScores {
            raw,
            normalized,
            extended,
        })
    }

    /// Positions of the `m` highest extended scores, best first.
    pub fn top_tokens(&self, m: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.extended.len()).collect();
        idx.sort_by(|&a, &b| self.extended[b].total_cmp(&self.extended[a]).then(a.cmp(&b)));
        idx.into_iter().take(m).map(|i| (i, self.extended[i])).collect()
    }
}

/// Per-token multiplicative factors for queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerTriple {
    pub gamma_q: DVector<f64>,
    pub gamma_k: DVector<f64>,
    pub gamma_v: DVector<f64>,
}

impl ScalerTriple {
    pub fn ones(n: usize) -> Self {
        let one = DVector::from_element(n, 1.0);
        ScalerTriple {
            gamma_q: one.clone(),
            gamma_k: one.clone(),
            gamma_v: one,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_q.is_empty()
    }

    /// `N x 3` matrix with columns γ_Q, γ_K, γ_V.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&[self.gamma_q.clone(), self.gamma_k.clone(), self.gamma_v.clone()])
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::Shape(format!("scaler matrix must be N x 3, got {:?}", m.shape())));
        }
        let triple = ScalerTriple {
            gamma_q: m.column(0).into_owned(),
            gamma_k: m.column(1).into_owned(),
            gamma_v: m.column(2).into_owned(),
        };
        if let Some(v) = m.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("scaler entry {v} is not finite and positive")));
        }
        Ok(triple)
    }

    /// `(ln γ_Q, ln γ_K)`: the rank-1 factors of the logit bias.
    pub fn log_factors(&self) -> (DVector<f64>, DVector<f64>) {
        (self.gamma_q.map(f64::ln), self.gamma_k.map(f64::ln))
    }
}

fn check_finite(v: &DVector<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// `ŝ_i = π_i · Σ_j |W_ij|`.
pub fn sharing_scores(w: &SelfExpressionMatrix, labels: &SubspaceAssignment) -> Result<DVector<f64>> {
    sharing_scores_with(w, labels, MassReduction::RowSum)
}

pub fn sharing_scores_with(
    w: &SelfExpressionMatrix,
    labels: &SubspaceAssignment,
    reduction: MassReduction,
) -> Result<DVector<f64>> {
    let n = w.n_tokens();
    if labels.n_tokens() != n {
        return Err(Error::Shape(format!(
            "W covers {n} tokens but {} labels were given",
            labels.n_tokens()
        )));
    }
    let abs = w.w.abs();
    let mass: DVector<f64> = match reduction {
        MassReduction::RowSum => abs.column_sum(),
        MassReduction::ColumnSum => abs.row_sum().transpose(),
    };
    Ok(DVector::from_fn(n, |i, _| labels.size_of(i) as f64 * mass[i]))
}

/// `(ŝ - min ŝ) / (max ŝ - min ŝ + ε)`.
pub fn normalize_scores(raw: &DVector<f64>, epsilon: f64) -> Result<DVector<f64>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty score vector".into()));
    }
    check_finite(raw)?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let lo = raw.min();
    let hi = raw.max();
    let denom = hi - lo + epsilon;
    Ok(raw.map(|v| (v - lo) / denom))
}

/// Places visual-token scores into the full sequence; text positions get 0.
pub fn extend_scores(normalized: &DVector<f64>, layout: &TokenLayout) -> Result<DVector<f64>> {
    if normalized.len() != layout.n_visual() {
        return Err(Error::Shape(format!(
            "{} scores for {} visual tokens",
            normalized.len(),
            layout.n_visual()
        )));
    }
    let mut out = DVector::zeros(layout.n_total());
    for (&pos, &s) in layout.visual_indices().iter().zip(normalized.iter()) {
        out[pos] = s;
    }
    Ok(out)
}

/// Cluster membership needed to restrict boosting to the largest subspaces.
#[derive(Debug, Clone, Copy)]
pub struct BoostContext<'a> {
    pub assignment: &'a SubspaceAssignment,
    pub layout: &'a TokenLayout,
}

/// Ids of the `m` largest clusters; ties go to the lower id.
pub fn top_subspaces(assignment: &SubspaceAssignment, m: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..assignment.k).collect();
    ids.sort_by(|&a, &b| assignment.cluster_sizes[b].cmp(&assignment.cluster_sizes[a]).then(a.cmp(&b)));
    ids.truncate(m);
    ids
}

/// `γ_* = 1 + α_* s̃`, after zeroing s̃ outside the boosted subspaces when
/// `cfg.boost_top_m` is set.
pub fn make_scalers(
    s_tilde: &DVector<f64>,
    cfg: &ScalerConfig,
    boost: Option<BoostContext<'_>>,
) -> Result<ScalerTriple> {
    cfg.validate()?;
    check_finite(s_tilde)?;
    if let Some(v) = s_tilde.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("score {v} lies outside [0, 1]")));
    }
    let mut s = s_tilde.clone();
    if let Some(m) = cfg.boost_top_m {
        let ctx = boost.ok_or_else(|| {
            Error::InvalidArgument("boost_top_m requires subspace labels for the visual tokens".into())
        })?;
        if ctx.layout.n_total() != s.len() || ctx.assignment.n_tokens() != ctx.layout.n_visual() {
            return Err(Error::Shape("boost context does not match the score vector".into()));
        }
        if m > ctx.assignment.k {
            return Err(Error::InvalidConfig(format!(
                "boost_top_m = {m} exceeds the {} subspaces",
                ctx.assignment.k
            )));
        }
        let keep = top_subspaces(ctx.assignment, m);
        for (&pos, &label) in ctx.layout.visual_indices().iter().zip(&ctx.assignment.labels) {
            if !keep.contains(&label) {
                s[pos] = 0.0;
            }
        }
    }
    let [aq, ak, av] = cfg.effective_alphas();
    Ok(ScalerTriple {
        gamma_q: s.map(|v| 1.0 + aq * v),
        gamma_k: s.map(|v| 1.0 + ak * v),
        gamma_v: s.map(|v| 1.0 + av * v),
    })
}

/// Uniform baseline: 1 at visual positions, 0 at text positions.
pub fn uniform_scores(layout: &TokenLayout) -> DVector<f64> {
    let mut out = DVector::zeros(layout.n_total());
    layout.visual_indices().iter().for_each(|&i| out[i] = 1.0);
    out
}

/// Uniform baseline with full intermediates: every visual token scores 1.
pub fn uniform_anchor_scores(layout: &TokenLayout) -> AnchorScores {
    let ones = DVector::from_element(layout.n_visual(), 1.0);
    AnchorScores {
        raw: ones.clone(),
        normalized: ones,
        extended: uniform_scores(layout),
    }
}

/// k-means baseline with full intermediates: `ŝ_i = π_i` under k-means labels.
pub fn kmeans_anchor_scores(
    x: &EmbeddingMatrix,
    params: &KMeansParams,
    layout: &TokenLayout,
    epsilon: f64,
) -> Result<(SubspaceAssignment, AnchorScores)> {
    if x.n_tokens() != layout.n_visual() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} visual tokens",
            x.n_tokens(),
            layout.n_visual()
        )));
    }
    let fit = kmeans(&x.to_token_rows(), params)?;
    let assignment = SubspaceAssignment::new(fit.labels, params.k)?;
    let raw = DVector::from_fn(x.n_tokens(), |i, _| assignment.size_of(i) as f64);
    let scores = AnchorScores::from_raw(raw, epsilon, layout)?;
    Ok((assignment, scores))
}

/// k-means baseline s̃ with the default seed and ε.
pub fn kmeans_scores(x: &EmbeddingMatrix, k: usize, layout: &TokenLayout) -> Result<DVector<f64>> {
    kmeans_anchor_scores(x, &KMeansParams::new(k), layout, DEFAULT_SCORE_EPSILON).map(|(_, s)| s.extended)
}
