//! Reference attention kernels with anchor scalers.
//!
//! All variants share one row-wise routine: per query row `i` and key `j`,
//! a logit `l_ij` is formed, masked columns are dropped, and the row is
//! normalized with a max-shifted exponential. The variants differ only in
//! how the scalers enter:
//!
//! | variant       | unnormalized weight                         |
//! |---------------|---------------------------------------------|
//! | `Baseline`    | `exp(q·k/√d)`                               |
//! | `Gated`       | `γ_Q,i γ_K,j · exp(q·k/√d)`                 |
//! | `LogitBias`   | `exp(q·k/√d + ln γ_Q,i + ln γ_K,j)`         |
//! | `PreSoftmax`  | `exp(γ_Q,i γ_K,j · q·k/√d)`                 |
//!
//! The output is `Y = A (γ_V ⊙ V)` with `γ_V` broadcast across channels
//! (omitted for the baseline).

use nalgebra::{DMatrix, DVector};

use crate::anchor_score::ScalerTriple;
use crate::error::{Error, Result};
use crate::layout::TokenLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Gated,
    LogitBias,
    PreSoftmax,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "gated" => Ok(Variant::Gated),
            "logit_bias" => Ok(Variant::LogitBias),
            "pre_softmax" => Ok(Variant::PreSoftmax),
            other => Err(Error::InvalidArgument(format!("unknown attention variant `{other}`"))),
        }
    }
}

/// One head's queries, keys and values (`N x d_h` each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Additive `N x N` logit mask: 0 keeps a position, -∞ removes it.
    pub mask: Option<DMatrix<f64>>,
    /// Return the attention matrix alongside `Y`.
    pub keep_attention: bool,
}

impl AttentionInput {
    pub fn new(q: DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>) -> Self {
        AttentionInput {
            q,
            k,
            v,
            mask: None,
            keep_attention: true,
        }
    }

    pub fn with_mask(mut self, mask: DMatrix<f64>) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Lower-triangular causal mask for `n` tokens.
    pub fn causal_mask(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if j <= i { 0.0 } else { f64::NEG_INFINITY })
    }

    pub fn n_tokens(&self) -> usize {
        self.q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.nrows();
        let d = self.q.ncols();
        if d == 0 {
            return Err(Error::InvalidArgument("head dimension must be >= 1".into()));
        }
        if self.k.shape() != (n, d) || self.v.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "Q is {:?} but K is {:?} and V is {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        for m in [&self.q, &self.k, &self.v] {
            if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != (n, n) {
                return Err(Error::Shape(format!("mask is {:?}, expected ({n}, {n})", mask.shape())));
            }
            if mask.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::InvalidArgument("mask entries must be finite or -inf".into()));
            }
            if let Some(i) = (0..n).find(|&i| mask.row(i).iter().all(|v| *v == f64::NEG_INFINITY)) {
                return Err(Error::InvalidArgument(format!("mask row {i} hides every key")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub y: DMatrix<f64>,
    pub attention: Option<DMatrix<f64>>,
}

fn check_scalers(input: &AttentionInput, scalers: &ScalerTriple, need_positive_log: bool) -> Result<()> {
    let n = input.n_tokens();
    for (name, g) in [("gamma_q", &scalers.gamma_q), ("gamma_k", &scalers.gamma_k), ("gamma_v", &scalers.gamma_v)] {
        if g.len() != n {
            return Err(Error::Shape(format!("{name} has length {} for {n} tokens", g.len())));
        }
        if let Some(v) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} entry {v} is not finite")));
        }
    }
    if need_positive_log {
        if let Some(v) = scalers.gamma_q.iter().chain(scalers.gamma_k.iter()).find(|v| **v <= 0.0) {
            return Err(Error::InvalidArgument(format!("log-bias needs positive scalers, found {v}")));
        }
    }
    Ok(())
}

fn attention_matrix(input: &AttentionInput, scalers: Option<&ScalerTriple>, variant: Variant) -> DMatrix<f64> {
    let n = input.n_tokens();
    let scale = 1.0 / (input.head_dim() as f64).sqrt();
    let mut logits = &input.q * input.k.transpose();
    logits *= scale;

    let log_bias = match (variant, scalers) {
        (Variant::LogitBias, Some(s)) => Some(s.log_factors()),
        _ => None,
    };
    let mut a = DMatrix::zeros(n, n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            let l = logits[(i, j)];
            let mut z = match (variant, scalers) {
                (Variant::PreSoftmax, Some(s)) => s.gamma_q[i] * s.gamma_k[j] * l,
                _ => l,
            };
            if let Some((lq, lk)) = &log_bias {
                z += lq[i] + lk[j];
            }
            if let Some(mask) = &input.mask {
                z += mask[(i, j)];
            }
            *r = z;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            let mut e = (*r - max).exp();
            if let (Variant::Gated, Some(s)) = (variant, scalers) {
                e *= s.gamma_q[i] * s.gamma_k[j];
            }
            *r = e;
            total += e;
        }
        for j in 0..n {
            a[(i, j)] = row[j] / total;
        }
    }
    a
}

fn attend(input: &AttentionInput, scalers: Option<&ScalerTriple>, variant: Variant) -> Result<AttentionOutput> {
    input.validate()?;
    if let Some(s) = scalers {
        check_scalers(input, s, variant == Variant::LogitBias)?;
    }
    let a = attention_matrix(input, scalers, variant);
    let y = match scalers {
        Some(s) if variant != Variant::Baseline => {
            let mut scaled_v = input.v.clone();
            for (i, mut r) in scaled_v.row_iter_mut().enumerate() {
                r *= s.gamma_v[i];
            }
            &a * scaled_v
        }
        _ => &a * &input.v,
    };
    Ok(AttentionOutput {
        y,
        attention: input.keep_attention.then_some(a),
    })
}

/// `A = softmax(QKᵀ/√d + mask)`, `Y = AV`.
pub fn attend_baseline(input: &AttentionInput) -> Result<AttentionOutput> {
    attend(input, None, Variant::Baseline)
}

/// Post-exponential gating by `γ_Q γ_Kᵀ` with value amplification by `γ_V`.
pub fn attend_gated(input: &AttentionInput, scalers: &ScalerTriple) -> Result<AttentionOutput> {
    attend(input, Some(scalers), Variant::Gated)
}

/// `softmax(QKᵀ/√d + ln γ_Q,i + ln γ_K,j + mask)`; algebraically equal to
/// [`attend_gated`].
pub fn attend_logit_bias(input: &AttentionInput, scalers: &ScalerTriple) -> Result<AttentionOutput> {
    attend(input, Some(scalers), Variant::LogitBias)
}

/// Ablation: scales the logits themselves, `softmax((γ_Q γ_Kᵀ) ⊙ QKᵀ/√d + mask)`.
pub fn attend_pre_softmax(input: &AttentionInput, scalers: &ScalerTriple) -> Result<AttentionOutput> {
    attend(input, Some(scalers), Variant::PreSoftmax)
}

pub fn attend_variant(input: &AttentionInput, scalers: &ScalerTriple, variant: Variant) -> Result<AttentionOutput> {
    match variant {
        Variant::Baseline => attend_baseline(input),
        other => attend(input, Some(scalers), other),
    }
}

/// Applies `variant` to every head with the same token-level scalers.
pub fn multi_head_attend(
    inputs: &[AttentionInput],
    scalers: &ScalerTriple,
    variant: Variant,
) -> Result<Vec<AttentionOutput>> {
    if let Some(first) = inputs.first() {
        let n = first.n_tokens();
        if let Some((h, _)) = inputs.iter().enumerate().find(|(_, x)| x.n_tokens() != n) {
            return Err(Error::Shape(format!("head {h} has a different token count than head 0")));
        }
    }
    inputs.iter().map(|x| attend_variant(x, scalers, variant)).collect()
}

/// Per query row, the attention mass that lands on visual keys.
pub fn visual_mass(a: &DMatrix<f64>, layout: &TokenLayout) -> Result<DVector<f64>> {
    if a.ncols() != layout.n_total() {
        return Err(Error::Shape(format!(
            "attention has {} key columns, layout covers {}",
            a.ncols(),
            layout.n_total()
        )));
    }
    Ok(DVector::from_fn(a.nrows(), |i, _| {
        layout.visual_indices().iter().map(|&j| a[(i, j)]).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(n: usize, d: usize, seed: u64) -> AttentionInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        AttentionInput::new(m(), m(), m())
    }

    fn random_scalers(n: usize, seed: u64) -> ScalerTriple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || DVector::from_fn(n, |_, _| rng.random_range(1.0..10.0));
        ScalerTriple { gamma_q: g(), gamma_k: g(), gamma_v: g() }
    }

    #[test]
    fn single_token() {
        let input = AttentionInput::new(dmatrix![0.3, -1.0], dmatrix![2.0, 0.5], dmatrix![4.0, 5.0]);
        let out = attend_baseline(&input).unwrap();
        assert_eq!(out.attention.unwrap(), dmatrix![1.0]);
        assert_eq!(out.y, dmatrix![4.0, 5.0]);
    }

    #[test]
    fn dominant_self_similarity() {
        let q = DMatrix::identity(4, 4) * 5.0;
        let input = AttentionInput::new(q.clone(), q, DMatrix::identity(4, 4));
        let a = attend_baseline(&input).unwrap().attention.unwrap();
        for i in 0..4 {
            assert_eq!(a.row(i).transpose().argmax().0, i);
        }
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let k = DMatrix::from_element(3, 2, 0.7);
        let input = AttentionInput::new(dmatrix![1.0, 2.0; -1.0, 0.0; 3.0, 3.0], k, DMatrix::zeros(3, 2));
        let a = attend_baseline(&input).unwrap().attention.unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn gated_hand_case() {
        let input = AttentionInput::new(DMatrix::zeros(2, 1), DMatrix::zeros(2, 1), dmatrix![1.0; 1.0]);
        let scalers = ScalerTriple {
            gamma_q: dvector![1.0, 1.0],
            gamma_k: dvector![1.0, 3.0],
            gamma_v: dvector![1.0, 2.0],
        };
        let out = attend_gated(&input, &scalers).unwrap();
        let a = out.attention.unwrap();
        assert_eq!(a, dmatrix![0.25, 0.75; 0.25, 0.75]);
        // Y = A (γ_V ⊙ V) = 0.25 * 1 + 0.75 * 2
        assert_eq!(out.y, dmatrix![1.75; 1.75]);
    }

    #[test]
    fn all_ones_scalers_match_baseline() {
        let input = random_input(9, 4, 1);
        let base = attend_baseline(&input).unwrap();
        let ones = ScalerTriple::ones(9);
        for v in [Variant::Gated, Variant::LogitBias, Variant::PreSoftmax] {
            let out = attend_variant(&input, &ones, v).unwrap();
            assert!((&out.y - &base.y).amax() <= 1e-12);
            assert!((out.attention.unwrap() - base.attention.as_ref().unwrap()).amax() <= 1e-12);
        }
    }

    #[test]
    fn gated_equals_logit_bias() {
        let input = random_input(16, 8, 2);
        let s = random_scalers(16, 3);
        let g = attend_gated(&input, &s).unwrap();
        let l = attend_logit_bias(&input, &s).unwrap();
        assert!((g.attention.unwrap() - l.attention.unwrap()).amax() <= 1e-6);
        assert!((g.y - l.y).amax() <= 1e-6);
    }

    #[test]
    fn query_scaling_alone_cancels() {
        let input = random_input(6, 3, 4);
        let base = attend_baseline(&input).unwrap().attention.unwrap();
        let mut s = ScalerTriple::ones(6);
        s.gamma_q = dvector![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = attend_logit_bias(&input, &s).unwrap().attention.unwrap();
        assert!((&a - &base).amax() < 1e-12);
        let mut s = ScalerTriple::ones(6);
        s.gamma_k[2] = 4.0;
        let a = attend_logit_bias(&input, &s).unwrap().attention.unwrap();
        assert!((&a - &base).amax() > 1e-3);
    }

    #[test]
    fn pre_softmax_pushes_negative_logits_further_down() {
        // q·k = -1 for key 0 and 0 for key 1; scaling key 0 by 3 lowers its weight
        let input = AttentionInput::new(dmatrix![1.0; 1.0], dmatrix![-1.0; 0.0], dmatrix![1.0; 0.0]);
        let mut s = ScalerTriple::ones(2);
        s.gamma_k = dvector![3.0, 1.0];
        let base = attend_baseline(&input).unwrap().attention.unwrap();
        let pre = attend_pre_softmax(&input, &s).unwrap().attention.unwrap();
        let post = attend_gated(&input, &s).unwrap().attention.unwrap();
        assert!(pre[(0, 0)] < base[(0, 0)]);
        assert!(post[(0, 0)] > base[(0, 0)]);
    }

    #[test]
    fn pre_softmax_differs_from_logit_bias() {
        let input = random_input(12, 4, 5);
        let s = random_scalers(12, 6);
        let p = attend_pre_softmax(&input, &s).unwrap().attention.unwrap();
        let l = attend_logit_bias(&input, &s).unwrap().attention.unwrap();
        assert!((p - l).amax() > 1e-6);
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let input = random_input(7, 3, 7).with_mask(AttentionInput::causal_mask(7));
        let s = random_scalers(7, 8);
        for v in [Variant::Baseline, Variant::Gated, Variant::LogitBias, Variant::PreSoftmax] {
            let a = attend_variant(&input, &s, v).unwrap().attention.unwrap();
            for i in 0..7 {
                for j in (i + 1)..7 {
                    assert_eq!(a[(i, j)], 0.0);
                }
                assert!((a.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_validation() {
        let mut input = random_input(3, 2, 9);
        input.mask = Some(dmatrix![0.0, 0.0, 0.0; f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY; 0.0, 0.0, 0.0]);
        assert!(attend_baseline(&input).is_err());
        let input = AttentionInput::new(DMatrix::zeros(3, 0), DMatrix::zeros(3, 0), DMatrix::zeros(3, 0));
        assert!(attend_baseline(&input).is_err());
        let input = AttentionInput::new(DMatrix::zeros(3, 2), DMatrix::zeros(2, 2), DMatrix::zeros(3, 2));
        assert!(attend_baseline(&input).is_err());
        let input = random_input(3, 2, 9);
        assert!(attend_gated(&input, &ScalerTriple::ones(4)).is_err());
        let mut s = ScalerTriple::ones(3);
        s.gamma_k[0] = 0.0;
        assert!(attend_logit_bias(&input, &s).is_err());
    }

    #[test]
    fn multi_head_shares_scalers() {
        let head = random_input(5, 2, 10);
        let s = random_scalers(5, 11);
        let outs = multi_head_attend(&vec![head.clone(); 4], &s, Variant::Gated).unwrap();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
        let single = multi_head_attend(std::slice::from_ref(&head), &s, Variant::Gated).unwrap();
        assert_eq!(single[0], attend_gated(&head, &s).unwrap());
        let other = random_input(5, 2, 12);
        let outs = multi_head_attend(&[head.clone(), other.clone()], &s, Variant::LogitBias).unwrap();
        assert_eq!(outs[1], attend_logit_bias(&other, &s).unwrap());
        assert!(multi_head_attend(&[head, random_input(6, 2, 1)], &s, Variant::Gated).is_err());
    }

    #[test]
    fn visual_mass_cases() {
        let layout = TokenLayout::new(4, vec![0, 1]).unwrap();
        let uniform = DMatrix::from_element(3, 4, 0.25);
        assert_eq!(visual_mass(&uniform, &layout).unwrap(), dvector![0.5, 0.5, 0.5]);
        let on_text = dmatrix![0.0, 0.0, 1.0, 0.0];
        assert_eq!(visual_mass(&on_text, &layout).unwrap(), dvector![0.0]);
        assert!(visual_mass(&DMatrix::zeros(2, 3), &layout).is_err());
    }

    proptest! {
        #[test]
        fn raising_one_key_gate_moves_mass_to_it(seed in 0u64..1000, j in 0usize..6, bump in 1.0f64..5.0) {
            let input = random_input(6, 3, seed);
            let s = random_scalers(6, seed + 1);
            let mut raised = s.clone();
            raised.gamma_q = DVector::from_element(6, 1.0);
            let mut base = raised.clone();
            raised.gamma_k[j] *= bump;
            base.gamma_k[j] = s.gamma_k[j];
            let a0 = attend_gated(&input, &base).unwrap().attention.unwrap();
            let a1 = attend_gated(&input, &raised).unwrap().attention.unwrap();
            for i in 0..6 {
                prop_assert!(a1[(i, j)] >= a0[(i, j)]);
                for jj in (0..6).filter(|&x| x != j) {
                    prop_assert!(a1[(i, jj)] <= a0[(i, jj)]);
                }
            }
        }
    }
}
