//! Subcommand bodies. Each one is a thin wrapper over library calls.

use std::path::Path;
use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use anchorlab::anchor_score::{
    kmeans_anchor_scores, make_scalers, sharing_scores_with, uniform_anchor_scores, AnchorScores, BoostContext,
};
use anchorlab::attention::{attend_baseline, attend_variant, visual_mass, AttentionInput};
use anchorlab::config::load_config_with_overrides;
use anchorlab::ssc_admm::{admm_run, window_regressions, MONITOR_WINDOW};
use anchorlab::subspace_graph::{cluster_tokens, threshold_columns};
use anchorlab::synth_bench::{generate_union_of_subspaces, hungarian_accuracy, run_pipeline};
use anchorlab::tensor_io::{read_tensor, write_tensor};
use anchorlab::{
    DType, EmbeddingMatrix, RunConfig, ScalerTriple, Scorer, SelfExpressionMatrix, SubspaceAssignment, SynthConfig,
    TokenLayout, Variant,
};

use crate::files::{
    read_labels, read_matrix, read_vector, sibling_path, tensor_csv, write_labels, write_matrix, write_text,
    write_vector,
};
use crate::{AlphaArgs, Cli, CliError, CliResult, Command, CommonArgs, ExportFormat};

pub fn run(cli: &Cli) -> CliResult<Value> {
    let common = &cli.common;
    let dtype = DType::from(common.dtype);
    match &cli.command {
        Command::Synth {
            out,
            truth_out,
            n_subspaces,
            subspace_dim,
            ambient_dim,
            points_per_subspace,
            noise_sigma,
            orthogonal,
        } => {
            let cfg = SynthConfig {
                n_subspaces: *n_subspaces,
                subspace_dim: *subspace_dim,
                ambient_dim: *ambient_dim,
                points_per_subspace: *points_per_subspace,
                noise_sigma: *noise_sigma,
                seed: common.seed.unwrap_or(0),
                orthogonal: *orthogonal,
            };
            let data = generate_union_of_subspaces(&cfg)?;
            let truth_path = truth_out.clone().unwrap_or_else(|| sibling_path(out, "truth"));
            write_matrix(out, &data.x.to_token_rows(), dtype)?;
            write_labels(&truth_path, &data.truth)?;
            Ok(json!({
                "command": "synth",
                "n_tokens": data.x.n_tokens(),
                "dim": data.x.dim(),
                "n_subspaces": cfg.n_subspaces,
                "seed": cfg.seed,
                "out": out,
                "truth_out": truth_path,
            }))
        }
        Command::Solve { input, out, trace } => {
            let cfg = load_run_config(common, None)?;
            let x = EmbeddingMatrix::from_token_rows(read_matrix(input)?)?;
            let run = admm_run(&x, &cfg.admm)?;
            write_matrix(out, &run.solution.w, dtype)?;
            if let Some(p) = trace {
                write_text(p, &run.trace_csv())?;
            }
            info!("solve: {} iterations", run.solution.iterations_used);
            Ok(json!({
                "command": "solve",
                "n_tokens": x.n_tokens(),
                "dim": x.dim(),
                "iterations": run.solution.iterations_used,
                "converged": run.solution.converged,
                "final_residual": run.solution.final_residual,
                "affine_violation": cfg.admm.affine_constraint.then(|| run.affine_violation()),
                "regressed_windows": window_regressions(&run.trace, MONITOR_WINDOW),
                "out": out,
            }))
        }
        Command::Cluster {
            input,
            out,
            affinity_out,
        } => {
            let cfg = load_run_config(common, None)?;
            let w = SelfExpressionMatrix::from_matrix(read_matrix(input)?)?;
            let (_, affinity, assignment) = cluster_tokens(&w, &cfg.graph)?;
            write_labels(out, &assignment.labels)?;
            if let Some(p) = affinity_out {
                write_matrix(p, affinity.matrix(), dtype)?;
            }
            Ok(json!({
                "command": "cluster",
                "n_tokens": assignment.n_tokens(),
                "k": assignment.k,
                "cluster_sizes": assignment.cluster_sizes,
                "out": out,
            }))
        }
        Command::Score {
            input,
            labels,
            out,
            raw_out,
            labels_out,
            scorer,
        } => {
            let mut cfg = load_run_config(common, None)?;
            if let Some(s) = scorer {
                cfg.score.scorer = (*s).into();
            }
            let data = read_matrix(input)?;
            let layout = cfg.layout_for(data.nrows())?;
            let scores = match cfg.score.scorer {
                Scorer::Ssc => {
                    let labels = labels
                        .as_deref()
                        .ok_or_else(|| CliError::Usage("the ssc scorer needs --labels".into()))?;
                    let w = SelfExpressionMatrix::from_matrix(data)?;
                    let assignment = SubspaceAssignment::new(read_labels(labels)?, cfg.graph.n_subspaces)?;
                    let source = if cfg.score.use_unthresholded {
                        w
                    } else {
                        threshold_columns(&w, cfg.graph.threshold_c)?
                    };
                    let raw = sharing_scores_with(&source, &assignment, cfg.score.reduction)?;
                    AnchorScores::from_raw(raw, cfg.score.epsilon, &layout)?
                }
                Scorer::Uniform => uniform_anchor_scores(&layout),
                Scorer::KMeans => {
                    let x = EmbeddingMatrix::from_token_rows(data)?;
                    let (assignment, scores) =
                        kmeans_anchor_scores(&x, &cfg.graph.kmeans_params(), &layout, cfg.score.epsilon)?;
                    if let Some(p) = labels_out {
                        write_labels(p, &assignment.labels)?;
                    }
                    scores
                }
            };
            write_vector(out, &scores.extended, dtype)?;
            if let Some(p) = raw_out {
                write_vector(p, &scores.raw, dtype)?;
            }
            Ok(json!({
                "command": "score",
                "scorer": scorer_name(cfg.score.scorer),
                "n_total": layout.n_total(),
                "n_visual": layout.n_visual(),
                "raw_min": scores.raw.min(),
                "raw_max": scores.raw.max(),
                "top_tokens": scores.top_tokens(5),
                "out": out,
            }))
        }
        Command::Scalers {
            input,
            labels,
            out,
            alphas,
        } => {
            let cfg = load_run_config(common, Some(alphas))?;
            let s_tilde = read_vector(input)?;
            let scalers = scalers_from_scores(&cfg, &s_tilde, labels.as_deref())?;
            write_matrix(out, &scalers.to_matrix(), dtype)?;
            Ok(json!({
                "command": "scalers",
                "n_total": scalers.len(),
                "alphas": cfg.scaler.effective_alphas(),
                "gamma_max": [scalers.gamma_q.max(), scalers.gamma_k.max(), scalers.gamma_v.max()],
                "out": out,
            }))
        }
        Command::Attend {
            q,
            k,
            v,
            heads,
            scalers,
            scores,
            labels,
            variant,
            mask,
            causal,
            out,
            attention_out,
            delta_out,
            visual_mass_out,
            alphas,
        } => {
            let cfg = load_run_config(common, Some(alphas))?;
            let (q, k, v) = (read_matrix(q)?, read_matrix(k)?, read_matrix(v)?);
            let n = q.nrows();
            if *heads == 0 || q.ncols() % heads != 0 {
                return Err(CliError::Usage(format!(
                    "--heads {heads} does not divide the {} query columns",
                    q.ncols()
                )));
            }
            let dh = q.ncols() / heads;
            let mask = match (mask, causal) {
                (Some(p), _) => Some(read_matrix(p)?),
                (None, true) => Some(AttentionInput::causal_mask(n)),
                (None, false) => None,
            };
            let triple = match (scalers, scores) {
                (Some(p), _) => ScalerTriple::from_matrix(&read_matrix(p)?)?,
                (None, Some(p)) => scalers_from_scores(&cfg, &read_vector(p)?, labels.as_deref())?,
                (None, None) => ScalerTriple::ones(n),
            };
            let layout = layout_for_total(&cfg, n)?;
            let variant = Variant::from(*variant);

            let mut y = DMatrix::zeros(n, q.ncols());
            let mut attn = DMatrix::zeros(n * heads, n);
            let mut delta = DMatrix::zeros(n * heads, n);
            let mut mass = DVector::zeros(n * heads);
            let mut mean_mass = Vec::new();
            let mut mean_base = Vec::new();
            let query_rows: Vec<usize> = if layout.n_text() > 0 {
                layout.text_indices().to_vec()
            } else {
                (0..n).collect()
            };
            for h in 0..*heads {
                let cols = |m: &DMatrix<f64>| m.columns(h * dh, dh).into_owned();
                let mut input = AttentionInput::new(cols(&q), cols(&k), cols(&v));
                input.mask = mask.clone();
                let res = attend_variant(&input, &triple, variant)?;
                let base = attend_baseline(&input)?;
                let a = res.attention.expect("attention kept");
                let a0 = base.attention.expect("attention kept");
                let vm = visual_mass(&a, &layout)?;
                let vm0 = visual_mass(&a0, &layout)?;
                let mean = |m: &DVector<f64>| query_rows.iter().map(|&i| m[i]).sum::<f64>() / query_rows.len() as f64;
                mean_mass.push(mean(&vm));
                mean_base.push(mean(&vm0));
                y.columns_mut(h * dh, dh).copy_from(&res.y);
                attn.rows_mut(h * n, n).copy_from(&a);
                delta.rows_mut(h * n, n).copy_from(&(&a - &a0));
                mass.rows_mut(h * n, n).copy_from(&vm);
            }
            write_matrix(out, &y, dtype)?;
            if let Some(p) = attention_out {
                write_matrix(p, &attn, dtype)?;
            }
            if let Some(p) = delta_out {
                write_matrix(p, &delta, dtype)?;
            }
            if let Some(p) = visual_mass_out {
                write_vector(p, &mass, dtype)?;
            }
            Ok(json!({
                "command": "attend",
                "variant": variant_name(variant),
                "n_tokens": n,
                "heads": heads,
                "head_dim": dh,
                "query_rows": if layout.n_text() > 0 { "text" } else { "all" },
                "visual_mass": { "baseline": mean_base, "variant": mean_mass },
                "out": out,
            }))
        }
        Command::Bench {
            input,
            truth,
            labels_out,
            scalers_out,
        } => {
            let cfg = load_run_config(common, None)?;
            let x = EmbeddingMatrix::from_token_rows(read_matrix(input)?)?;
            let truth_path = match truth {
                Some(p) => Some(p.clone()),
                None => Some(sibling_path(input, "truth")).filter(|p| p.exists()),
            };
            let truth = truth_path.as_deref().map(read_labels).transpose()?;
            let layout = cfg.layout_for(x.n_tokens())?;
            let start = Instant::now();
            let out = run_pipeline(&x, &layout, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            let accuracy = match (&truth, &out.assignment) {
                (Some(t), Some(a)) => Some(hungarian_accuracy(&a.labels, t)?),
                _ => None,
            };
            if let (Some(p), Some(a)) = (labels_out, &out.assignment) {
                write_labels(p, &a.labels)?;
            }
            if let Some(p) = scalers_out {
                write_matrix(p, &out.scalers.to_matrix(), dtype)?;
            }
            let admm = out.admm.as_ref().map(|r| &r.solution);
            Ok(json!({
                "command": "bench",
                "scorer": scorer_name(cfg.score.scorer),
                "n_tokens": x.n_tokens(),
                "k": out.assignment.as_ref().map(|a| a.k),
                "accuracy": accuracy,
                "iterations": admm.map(|s| s.iterations_used),
                "converged": admm.map(|s| s.converged),
                "final_residual": admm.map(|s| s.final_residual),
                "seconds": seconds,
            }))
        }
        Command::Export { input, out, format } => {
            let t = read_tensor(input)?;
            let dims = t.dims();
            match format {
                ExportFormat::Csv => write_text(out, &tensor_csv(&t))?,
                ExportFormat::Vanc => write_tensor(out, &t, dtype)?,
            }
            Ok(json!({
                "command": "export",
                "dims": dims,
                "format": match format { ExportFormat::Csv => "csv", ExportFormat::Vanc => "vanc" },
                "out": out,
            }))
        }
    }
}

/// Config file, then `--set` overrides, then dedicated flags.
fn load_run_config(common: &CommonArgs, alphas: Option<&AlphaArgs>) -> CliResult<RunConfig> {
    let mut cfg = load_config_with_overrides(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.graph.kmeans_seed = seed;
    }
    if let Some(a) = alphas {
        if let Some(v) = a.alpha_q {
            cfg.scaler.alpha_q = v;
        }
        if let Some(v) = a.alpha_k {
            cfg.scaler.alpha_k = v;
        }
        if let Some(v) = a.alpha_v {
            cfg.scaler.alpha_v = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The configured layout checked against a full-sequence length, or an
/// all-visual layout of that length.
fn layout_for_total(cfg: &RunConfig, n_total: usize) -> CliResult<TokenLayout> {
    match &cfg.token_layout {
        Some(l) if l.n_total() != n_total => Err(anchorlab::Error::Shape(format!(
            "layout covers {} tokens but the data has {n_total}",
            l.n_total()
        ))
        .into()),
        Some(l) => Ok(l.clone()),
        None => Ok(TokenLayout::all_visual(n_total)),
    }
}

fn scalers_from_scores(cfg: &RunConfig, s_tilde: &DVector<f64>, labels: Option<&Path>) -> CliResult<ScalerTriple> {
    let layout = layout_for_total(cfg, s_tilde.len())?;
    let assignment = labels
        .map(|p| read_labels(p).and_then(|l| Ok(SubspaceAssignment::new(l, cfg.graph.n_subspaces)?)))
        .transpose()?;
    if cfg.scaler.boost_top_m.is_some() && assignment.is_none() {
        return Err(CliError::Usage("boost_top_m needs --labels".into()));
    }
    let ctx = assignment.as_ref().map(|assignment| BoostContext {
        assignment,
        layout: &layout,
    });
    Ok(make_scalers(s_tilde, &cfg.scaler, ctx)?)
}

fn scorer_name(s: Scorer) -> &'static str {
    match s {
        Scorer::Ssc => "ssc",
        Scorer::Uniform => "uniform",
        Scorer::KMeans => "kmeans",
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::Gated => "gated",
        Variant::LogitBias => "logit_bias",
        Variant::PreSoftmax => "pre_softmax",
    }
}
