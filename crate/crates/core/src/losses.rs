//! Softmax-family contrastive losses over one positive and `N − 1` negative similarities.
//!
//! Each loss is `−log(e^{l_p} / (e^{l_p} + Σ_j e^{l_n^j}))` for some logits `l` that are
//! functions of the similarities; they differ only in that mapping. Values are computed
//! with log-sum-exp and gradients are exact derivatives of the returned value.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{mismatch, Error, Result};
use crate::matrix::{dot, norm};

/// Cosine similarities may exceed ±1 by rounding; anything beyond this is rejected.
const SCORE_SLACK: f64 = 1e-9;

/// One positive similarity `s_p` and the negatives `s_n^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    positive: f64,
    negatives: Vec<f64>,
}

impl ScoreSet {
    pub fn new(positive: f64, negatives: Vec<f64>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::MalformedInput("score set needs at least one negative".into()));
        }
        let in_range = |s: f64| s.is_finite() && (-1.0 - SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&s);
        if !in_range(positive) || !negatives.iter().all(|&s| in_range(s)) {
            return Err(Error::MalformedInput("similarities must be finite and within [-1, 1]".into()));
        }
        Ok(Self { positive, negatives })
    }

    pub fn positive(&self) -> f64 {
        self.positive
    }

    pub fn negatives(&self) -> &[f64] {
        &self.negatives
    }

    /// Total number of scores `N`.
    pub fn len(&self) -> usize {
        self.negatives.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Circle loss scale `γ` and relaxation margin `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleParams {
    pub gamma: f64,
    pub margin: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self { gamma: 256.0, margin: 0.25 }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("circle gamma {} must be positive", self.gamma)));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidConfig(format!("circle margin {} must be in (0, 1)", self.margin)));
        }
        Ok(())
    }
}

/// Loss value with its derivatives with respect to each similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_sp: f64,
    pub d_sn: Vec<f64>,
}

/// Which objective to train with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Softmax,
    InfoNce { tau: f64 },
    Circle(CircleParams),
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Circle(CircleParams::default())
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::Softmax => Ok(()),
            LossKind::InfoNce { tau } => check_tau(*tau),
            LossKind::Circle(p) => p.validate(),
        }
    }

    pub fn evaluate(&self, scores: &ScoreSet) -> Result<LossOutput> {
        match self {
            LossKind::Softmax => Ok(softmax_loss(scores)),
            LossKind::InfoNce { tau } => infonce_loss(scores, *tau),
            LossKind::Circle(p) => circle_loss(scores, p),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("temperature {tau} must be positive")))
    }
}

/// Softmax probabilities of `[l_p, l_n...]`.
fn softmax_parts(l_p: f64, l_n: &[f64]) -> (f64, Vec<f64>) {
    let max = l_n.iter().copied().fold(l_p, f64::max);
    let e_p = libm::exp(l_p - max);
    let e_n: Vec<f64> = l_n.iter().map(|l| libm::exp(l - max)).collect();
    let total = e_p + e_n.iter().sum::<f64>();
    (e_p / total, e_n.into_iter().map(|e| e / total).collect())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(values.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// `log(1 + e^x)` without overflow or loss of precision for very negative `x`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Shared tail: value `softplus(lse(l_n) − l_p)`, chained through `dl/ds`.
fn from_logits(l_p: f64, dlp_dsp: f64, l_n: &[f64], dln_dsn: &[f64]) -> LossOutput {
    let (sigma_p, sigma_n) = softmax_parts(l_p, l_n);
    LossOutput {
        value: softplus(log_sum_exp(l_n) - l_p),
        d_sp: (sigma_p - 1.0) * dlp_dsp,
        d_sn: sigma_n.iter().zip(dln_dsn).map(|(s, d)| s * d).collect(),
    }
}

pub fn softmax_loss(scores: &ScoreSet) -> LossOutput {
    let ones = alloc::vec![1.0; scores.negatives.len()];
    from_logits(scores.positive, 1.0, &scores.negatives, &ones)
}

/// InfoNCE with temperature applied to every logit, including the positive in the denominator.
pub fn infonce_loss(scores: &ScoreSet, tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let l_n: Vec<f64> = scores.negatives.iter().map(|s| s / tau).collect();
    let d = alloc::vec![1.0 / tau; l_n.len()];
    Ok(from_logits(scores.positive / tau, 1.0 / tau, &l_n, &d))
}

/// Circle loss with self-paced weights `α_p = [1 + m − s_p]₊`, `α_n = [s_n + m]₊`
/// and margins `Δ_p = 1 − m`, `Δ_n = m`.
///
/// Gradients differentiate through `α` as well (the value's true derivative); at a
/// hinge kink the flat-side derivative 0 is used for `α`.
pub fn circle_loss(scores: &ScoreSet, params: &CircleParams) -> Result<LossOutput> {
    params.validate()?;
    let (gamma, m) = (params.gamma, params.margin);
    let sp = scores.positive;
    let raw_p = 1.0 + m - sp;
    let alpha_p = raw_p.max(0.0);
    let dalpha_p = if raw_p > 0.0 { -1.0 } else { 0.0 };
    let l_p = gamma * alpha_p * (sp - (1.0 - m));
    let dlp = gamma * (alpha_p + (sp - (1.0 - m)) * dalpha_p);

    let mut l_n = Vec::with_capacity(scores.negatives.len());
    let mut dln = Vec::with_capacity(scores.negatives.len());
    for &sn in &scores.negatives {
        let raw = sn + m;
        let alpha = raw.max(0.0);
        let dalpha = if raw > 0.0 { 1.0 } else { 0.0 };
        l_n.push(gamma * alpha * (sn - m));
        dln.push(gamma * (alpha + (sn - m) * dalpha));
    }
    Ok(from_logits(l_p, dlp, &l_n, &dln))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(mismatch("similarity operand", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarities of the raw anchor to the raw positive and negatives.
pub fn similarity_scores<N: AsRef<[f64]>>(anchor: &[f64], positive: &[f64], negatives: &[N]) -> Result<ScoreSet> {
    let sp = cosine(anchor, positive)?;
    let sn = negatives.iter().map(|n| cosine(anchor, n.as_ref())).collect::<Result<Vec<_>>>()?;
    ScoreSet::new(sp, sn)
}

/// Closed-form `∂ softmax_loss / ∂ w_a` through the cosine similarities:
/// `(1/‖w_a‖)(I − z_a z_aᵀ)[(σ_p − 1) z_p + Σ_j σ_n^j z_n^j]`.
pub fn anchor_gradient_analytic<N: AsRef<[f64]>>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[N],
) -> Result<Vec<f64>> {
    let scores = similarity_scores(anchor, positive, negatives)?;
    let (sigma_p, sigma_n) = softmax_parts(scores.positive, &scores.negatives);
    let unit = |v: &[f64]| {
        let n = norm(v);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let z_a = unit(anchor);
    let mut bracket: Vec<f64> = unit(positive).iter().map(|p| (sigma_p - 1.0) * p).collect();
    for (neg, s) in negatives.iter().zip(&sigma_n) {
        bracket.iter_mut().zip(unit(neg.as_ref())).for_each(|(b, z)| *b += s * z);
    }
    let radial = dot(&z_a, &bracket);
    let inv = 1.0 / norm(anchor);
    Ok(bracket.iter().zip(&z_a).map(|(b, z)| inv * (b - radial * z)).collect())
}

/// Gradient magnitude contributed by negative `j`: `σ(s)_n^j · √(1 − (s_n^j)²)`.
pub fn negative_contribution(scores: &ScoreSet, j: usize) -> Result<f64> {
    let sn = *scores.negatives.get(j).ok_or_else(|| {
        Error::OutOfRange(format!("negative index {j} of {}", scores.negatives.len()))
    })?;
    let (_, sigma_n) = softmax_parts(scores.positive, &scores.negatives);
    Ok(sigma_n[j] * libm::sqrt((1.0 - sn * sn).max(0.0)))
}
