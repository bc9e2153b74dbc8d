//! Run configuration files.
//!
//! A config is UTF-8 text of `key = value` lines, optionally grouped under
//! `[section]` headers; `#` starts a comment. Key names are unique across
//! sections, so a key may also appear before any header or be given as
//! `section.key`. Keys not mentioned keep their defaults:
//!
//! ```text
//! [admm]
//! rho = 300
//! lambda_e = 800
//! lambda_z = 800
//! epsilon = 2e-4
//! max_iter = 10000
//! affine_constraint = true
//!
//! [graph]
//! threshold_c = 1
//! n_subspaces = 24
//! knn = 0
//! kmeans_seed = 1592632516
//! kmeans_restarts = 20
//!
//! [scaler]
//! # alpha_preset = internvl2-8b  (explicit alpha_* keys override it)
//! alpha_q = 0
//! alpha_k = 0
//! alpha_v = 0
//! scale_q = true
//! scale_k = true
//! scale_v = true
//! boost_top_m = all
//!
//! [score]
//! scorer = ssc                  # ssc | uniform | kmeans
//! score_epsilon = 1e-12
//! mass_reduction = row          # row | column
//! score_before_threshold = false
//!
//! [layout]                      # omit to treat every token as visual
//! n_total = 12
//! visual_indices = 0..8, 10
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::anchor_score::{MassReduction, ScalerConfig, ScoreConfig, Scorer};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::ssc_admm::AdmmConfig;
use crate::subspace_graph::GraphConfig;

const KEYS: &[(&str, &str)] = &[
    ("admm", "rho"),
    ("admm", "lambda_e"),
    ("admm", "lambda_z"),
    ("admm", "epsilon"),
    ("admm", "max_iter"),
    ("admm", "affine_constraint"),
    ("graph", "threshold_c"),
    ("graph", "n_subspaces"),
    ("graph", "knn"),
    ("graph", "kmeans_seed"),
    ("graph", "kmeans_restarts"),
    ("scaler", "alpha_preset"),
    ("scaler", "alpha_q"),
    ("scaler", "alpha_k"),
    ("scaler", "alpha_v"),
    ("scaler", "scale_q"),
    ("scaler", "scale_k"),
    ("scaler", "scale_v"),
    ("scaler", "boost_top_m"),
    ("score", "scorer"),
    ("score", "score_epsilon"),
    ("score", "mass_reduction"),
    ("score", "score_before_threshold"),
    ("layout", "n_total"),
    ("layout", "visual_indices"),
];

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub admm: AdmmConfig,
    pub graph: GraphConfig,
    pub scaler: ScalerConfig,
    pub score: ScoreConfig,
    /// `None` means every token is visual.
    pub token_layout: Option<TokenLayout>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.admm.validate()?;
        self.graph.validate()?;
        self.scaler.validate()?;
        self.score.validate()?;
        if let Some(m) = self.scaler.boost_top_m {
            if m > self.graph.n_subspaces {
                return Err(Error::InvalidConfig(format!(
                    "boost_top_m = {m} exceeds n_subspaces = {}",
                    self.graph.n_subspaces
                )));
            }
        }
        Ok(())
    }

    /// The configured layout, or an all-visual layout over `n_visual` tokens.
    pub fn layout_for(&self, n_visual: usize) -> Result<TokenLayout> {
        match &self.token_layout {
            Some(l) if l.n_visual() != n_visual => Err(Error::Shape(format!(
                "layout declares {} visual tokens but the data has {n_visual}",
                l.n_visual()
            ))),
            Some(l) => Ok(l.clone()),
            None => Ok(TokenLayout::all_visual(n_visual)),
        }
    }
}

/// Parsed but not yet interpreted `key -> value` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigEntries(BTreeMap<&'static str, String>);

fn canonical_key(section: Option<&str>, key: &str) -> Result<&'static str> {
    let (section, key) = match key.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (section, key),
    };
    KEYS.iter()
        .find(|(s, k)| *k == key && section.is_none_or(|want| want == *s))
        .map(|(_, k)| *k)
        .ok_or_else(|| match section {
            Some(s) => Error::UnknownKey(format!("{s}.{key}")),
            None => Error::UnknownKey(key.to_string()),
        })
}

impl ConfigEntries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::ConfigSyntax {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::ConfigSyntax {
                        line: line_no,
                        message: format!("unknown section `{name}`"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = canonical_key(section.as_deref(), key.trim())?;
            if entries.insert(key, value.trim().to_string()).is_some() {
                return Err(Error::ConfigSyntax {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(ConfigEntries(entries))
    }

    /// Applies a `key=value` override (later overrides win).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line: 0,
            message: format!("override `{assignment}` is not of the form key=value"),
        })?;
        let key = canonical_key(None, key.trim())?;
        self.0.insert(key, value.trim().to_string());
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &'static str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| Error::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .transpose()
    }

    fn get_bool(&self, key: &'static str) -> Result<Option<bool>> {
        self.0
            .get(key)
            .map(|v| match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                }),
            })
            .transpose()
    }

    fn get_with<T>(&self, key: &'static str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                parse(v).ok_or_else(|| Error::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .transpose()
    }

    /// Interprets the entries on top of the defaults and validates the result.
    pub fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        macro_rules! assign {
            ($target:expr, $key:literal) => {
                if let Some(v) = self.get($key)? {
                    $target = v;
                }
            };
        }
        assign!(cfg.admm.rho, "rho");
        assign!(cfg.admm.lambda_e, "lambda_e");
        assign!(cfg.admm.lambda_z, "lambda_z");
        assign!(cfg.admm.epsilon, "epsilon");
        assign!(cfg.admm.max_iter, "max_iter");
        if let Some(b) = self.get_bool("affine_constraint")? {
            cfg.admm.affine_constraint = b;
        }

        assign!(cfg.graph.threshold_c, "threshold_c");
        assign!(cfg.graph.n_subspaces, "n_subspaces");
        assign!(cfg.graph.knn, "knn");
        assign!(cfg.graph.kmeans_seed, "kmeans_seed");
        assign!(cfg.graph.kmeans_restarts, "kmeans_restarts");

        if let Some(p) = self.0.get("alpha_preset") {
            let preset = ScalerConfig::preset(p).map_err(|_| Error::BadValue {
                key: "alpha_preset".into(),
                value: p.clone(),
            })?;
            cfg.scaler.alpha_q = preset.alpha_q;
            cfg.scaler.alpha_k = preset.alpha_k;
            cfg.scaler.alpha_v = preset.alpha_v;
        }
        assign!(cfg.scaler.alpha_q, "alpha_q");
        assign!(cfg.scaler.alpha_k, "alpha_k");
        assign!(cfg.scaler.alpha_v, "alpha_v");
        for (key, slot) in [
            ("scale_q", &mut cfg.scaler.scale_q),
            ("scale_k", &mut cfg.scaler.scale_k),
            ("scale_v", &mut cfg.scaler.scale_v),
        ] {
            if let Some(b) = self.get_bool(key)? {
                *slot = b;
            }
        }
        if let Some(m) = self.get_with("boost_top_m", |v| match v {
            "all" | "none" => Some(None),
            n => n.parse().ok().map(Some),
        })? {
            cfg.scaler.boost_top_m = m;
        }

        if let Some(s) = self.get_with("scorer", |v| v.parse::<Scorer>().ok())? {
            cfg.score.scorer = s;
        }
        assign!(cfg.score.epsilon, "score_epsilon");
        if let Some(r) = self.get_with("mass_reduction", |v| match v {
            "row" => Some(MassReduction::RowSum),
            "column" => Some(MassReduction::ColumnSum),
            _ => None,
        })? {
            cfg.score.reduction = r;
        }
        if let Some(b) = self.get_bool("score_before_threshold")? {
            cfg.score.use_unthresholded = b;
        }

        let n_total: Option<usize> = self.get("n_total")?;
        let visual = self.get_with("visual_indices", |v| TokenLayout::parse_indices(v).ok())?;
        cfg.token_layout = match (n_total, visual) {
            (None, None) => None,
            (Some(n), Some(v)) => Some(TokenLayout::new(n, v)?),
            _ => {
                return Err(Error::InvalidConfig(
                    "n_total and visual_indices must be given together".into(),
                ))
            }
        };

        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    ConfigEntries::parse(text)?.build()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    parse_config(&fs::read_to_string(path).map_err(Error::file(path))?)
}

/// Reads an optional config file and applies `key=value` overrides on top.
pub fn load_config_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut entries = match path {
        Some(p) => ConfigEntries::parse(&fs::read_to_string(p).map_err(Error::file(p))?)?,
        None => ConfigEntries::default(),
    };
    for o in overrides {
        entries.set(o)?;
    }
    entries.build()
}
