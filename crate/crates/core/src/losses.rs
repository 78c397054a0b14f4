//! Training objectives with closed-form gradients.
//!
//! Every loss is a function of probabilities (post-sigmoid), clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any logarithm. Each `*_with_grad`
//! variant returns `(value, dvalue/dp)`; the gradient is zero wherever the
//! clamp is active.
//!
//! The localization objective is the boundary-aware loss
//!
//! ```text
//! L_loc = FocalTversky(p, y) + lambda * sum_i w_i BCE(p_i, y_i) / sum_i w_i
//! ```
//!
//! where `w_i = w_boundary` on annotated onset/offset frames and `1`
//! elsewhere, and the full multi-task objective is
//! `w1 * L_me + w2 * L_state + w3 * L_loc` with focal loss for both
//! clip-level classifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn clamp_active(p: f64) -> bool {
    !(PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

fn check_label(y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("label must be 0 or 1, got {y}")))
    }
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: sequence lengths differ ({a} vs {b})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocatorLossKind {
    Bal,
    Bce,
    SmoothL1,
    SoftIou,
    Mse,
    Mae,
}

impl LocatorLossKind {
    pub const ALL: [LocatorLossKind; 6] = [
        LocatorLossKind::Bal,
        LocatorLossKind::Bce,
        LocatorLossKind::SmoothL1,
        LocatorLossKind::SoftIou,
        LocatorLossKind::Mse,
        LocatorLossKind::Mae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LocatorLossKind::Bal => "bal",
            LocatorLossKind::Bce => "bce",
            LocatorLossKind::SmoothL1 => "smooth_l1",
            LocatorLossKind::SoftIou => "soft_iou",
            LocatorLossKind::Mse => "mse",
            LocatorLossKind::Mae => "mae",
        }
    }
}

impl fmt::Display for LocatorLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LocatorLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LocatorLossKind::ALL.into_iter().find(|k| k.name() == s.trim()).ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// Every weight and shape parameter of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lambda: f64,
    pub w_boundary: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub tversky_gamma: f64,
    pub smooth: f64,
    pub locator_loss_kind: LocatorLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w1: 1.0,
            w2: 1.0,
            w3: 2.0,
            lambda: 0.5,
            w_boundary: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            tversky_gamma: 0.75,
            smooth: 1e-6,
            locator_loss_kind: LocatorLossKind::Bal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("loss: {m}")));
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if [self.w1, self.w2, self.w3, self.lambda].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("w1, w2, w3 and lambda must be finite and nonnegative");
        }
        if !(self.w_boundary.is_finite() && self.w_boundary >= 1.0) {
            return bad("w_boundary must be >= 1");
        }
        if !open01(self.focal_alpha) {
            return bad("focal_alpha must lie in (0, 1)");
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !open01(self.tversky_alpha) || !open01(self.tversky_beta) {
            return bad("tversky_alpha and tversky_beta must lie in (0, 1)");
        }
        if !(self.tversky_gamma.is_finite() && self.tversky_gamma > 0.0) {
            return bad("tversky_gamma must be > 0");
        }
        if !(self.smooth.is_finite() && self.smooth > 0.0) {
            return bad("smooth must be > 0");
        }
        Ok(())
    }

    pub fn tversky(&self) -> TverskyParams {
        TverskyParams {
            alpha: self.tversky_alpha,
            beta: self.tversky_beta,
            gamma: self.tversky_gamma,
            smooth: self.smooth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TverskyParams {
    /// Weight on false negatives.
    pub alpha: f64,
    /// Weight on false positives.
    pub beta: f64,
    pub gamma: f64,
    pub smooth: f64,
}

// ---------------------------------------------------------------------------
// Scalar terms

/// Binary cross-entropy of one clamped probability.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if clamp_active(p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Focal loss of one prediction.
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> Result<f64> {
    focal_loss_with_grad(p, y, alpha, gamma).map(|(v, _)| v)
}

pub fn focal_loss_with_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> Result<(f64, f64)> {
    check_label(y)?;
    let frozen = clamp_active(p);
    let p = clamp_prob(p);
    let (value, grad) = if y == 1.0 {
        let m = (1.0 - p).powf(gamma);
        let v = -alpha * m * p.ln();
        // d/dp [(1-p)^g ln p] = -g (1-p)^(g-1) ln p + (1-p)^g / p
        let dm = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - p).powf(gamma - 1.0) };
        (v, -alpha * (dm * p.ln() + m / p))
    } else {
        let m = p.powf(gamma);
        let v = -(1.0 - alpha) * m * (1.0 - p).ln();
        let dm = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        (v, -(1.0 - alpha) * (dm * (1.0 - p).ln() - m / (1.0 - p)))
    };
    Ok((value, if frozen { 0.0 } else { grad }))
}

/// Mean focal loss over a batch of clip-level predictions.
pub fn focal_loss_mean(p: &[f64], y: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_lengths("focal_loss", p.len(), y.len())?;
    let mut sum = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        sum += focal_loss(p, y, alpha, gamma)?;
    }
    Ok(sum / p.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Sequence terms

pub fn focal_tversky(p: &[f64], y: &[f64], params: &TverskyParams) -> Result<f64> {
    focal_tversky_with_grad(p, y, params).map(|(v, _)| v)
}

/// `(1 - TI)^gamma` with `TI = (TP + s) / (TP + alpha FN + beta FP + s)`.
pub fn focal_tversky_with_grad(p: &[f64], y: &[f64], params: &TverskyParams) -> Result<(f64, Vec<f64>)> {
    check_lengths("focal_tversky", p.len(), y.len())?;
    for &v in y {
        check_label(v)?;
    }
    let TverskyParams { alpha, beta, gamma, smooth } = *params;
    let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(y) {
        let pi = clamp_prob(pi);
        tp += pi * yi;
        fn_ += (1.0 - pi) * yi;
        fp += pi * (1.0 - yi);
    }
    let num = tp + smooth;
    let den = tp + alpha * fn_ + beta * fp + smooth;
    let ti = num / den;
    let gap = (1.0 - ti).max(0.0);
    let value = gap.powf(gamma);

    let outer = if gap > 0.0 { -gamma * gap.powf(gamma - 1.0) } else { 0.0 };
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            if clamp_active(pi) {
                return 0.0;
            }
            let dnum = yi;
            let dden = yi * (1.0 - alpha) + beta * (1.0 - yi);
            outer * (dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((value, grad))
}

pub fn boundary_weighted_bce(p: &[f64], y: &[f64], weights: &[f64]) -> Result<f64> {
    boundary_weighted_bce_with_grad(p, y, weights).map(|(v, _)| v)
}

/// `sum_i w_i BCE(p_i, y_i) / sum_i w_i`.
pub fn boundary_weighted_bce_with_grad(p: &[f64], y: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths("boundary_weighted_bce", p.len(), y.len())?;
    check_lengths("boundary_weighted_bce", p.len(), weights.len())?;
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 1.0)) {
        return Err(Error::Domain(format!("boundary weights must be >= 1, got {w}")));
    }
    for &v in y {
        check_label(v)?;
    }
    let wsum: f64 = weights.iter().sum();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&pi, &yi), &wi) in p.iter().zip(y).zip(weights) {
        value += wi * bce(pi, yi);
        grad.push(wi * bce_grad(pi, yi) / wsum);
    }
    Ok((value / wsum, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalTerms {
    pub l_loc: f64,
    pub l_overlap: f64,
    pub l_boundary: f64,
}

/// Boundary-aware localization loss.
pub fn bal(p: &[f64], y: &[f64], weights: &[f64], cfg: &LossConfig) -> Result<BalTerms> {
    bal_with_grad(p, y, weights, cfg).map(|(t, _)| t)
}

pub fn bal_with_grad(p: &[f64], y: &[f64], weights: &[f64], cfg: &LossConfig) -> Result<(BalTerms, Vec<f64>)> {
    let (l_overlap, g_overlap) = focal_tversky_with_grad(p, y, &cfg.tversky())?;
    let (l_boundary, g_boundary) = boundary_weighted_bce_with_grad(p, y, weights)?;
    let grad = g_overlap.iter().zip(&g_boundary).map(|(a, b)| a + cfg.lambda * b).collect();
    Ok((BalTerms { l_loc: l_overlap + cfg.lambda * l_boundary, l_overlap, l_boundary }, grad))
}

/// The five comparison losses for the locator (BAL itself is rejected here).
pub fn baseline_locator_loss(kind: LocatorLossKind, p: &[f64], y: &[f64], smooth: f64) -> Result<f64> {
    baseline_locator_loss_with_grad(kind, p, y, smooth).map(|(v, _)| v)
}

pub fn baseline_locator_loss_with_grad(
    kind: LocatorLossKind,
    p: &[f64],
    y: &[f64],
    smooth: f64,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(kind.name(), p.len(), y.len())?;
    let n = p.len().max(1) as f64;
    let pairs = p.iter().zip(y);
    Ok(match kind {
        LocatorLossKind::Bal => return Err(Error::UnknownKind("bal is not a baseline locator loss".into())),
        LocatorLossKind::Bce => {
            let v = pairs.clone().map(|(&p, &y)| bce(p, y)).sum::<f64>() / n;
            (v, pairs.map(|(&p, &y)| bce_grad(p, y) / n).collect())
        }
        LocatorLossKind::SmoothL1 => {
            let huber = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            let dhuber = |d: f64| if d.abs() < 1.0 { d } else { d.signum() };
            let v = pairs.clone().map(|(&p, &y)| huber(p - y)).sum::<f64>() / n;
            (v, pairs.map(|(&p, &y)| dhuber(p - y) / n).collect())
        }
        LocatorLossKind::SoftIou => {
            let inter: f64 = pairs.clone().map(|(&p, &y)| p * y).sum();
            let sp: f64 = p.iter().sum();
            let sy: f64 = y.iter().sum();
            let union = sp + sy - inter + smooth;
            let iou = (inter + smooth) / union;
            // d/dp_i = -[y_i U - (I + s)(1 - y_i)] / U^2
            let g = y.iter().map(|&y| -(y * union - (inter + smooth) * (1.0 - y)) / (union * union)).collect();
            (1.0 - iou, g)
        }
        LocatorLossKind::Mse => {
            let v = pairs.clone().map(|(&p, &y)| (p - y) * (p - y)).sum::<f64>() / n;
            (v, pairs.map(|(&p, &y)| 2.0 * (p - y) / n).collect())
        }
        LocatorLossKind::Mae => {
            let v = pairs.clone().map(|(&p, &y)| (p - y).abs()).sum::<f64>() / n;
            let sign = |d: f64| {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            (v, pairs.map(|(&p, &y)| sign(p - y) / n).collect())
        }
    })
}

// ---------------------------------------------------------------------------
// Multi-task objective

/// Per-clip training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub has_me: bool,
    pub is_speaking: bool,
    pub frame_mask: Vec<f64>,
    pub boundary_weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_me: f64,
    pub l_state: f64,
    pub l_loc: f64,
    /// Zero unless the locator loss is BAL.
    pub l_overlap: f64,
    /// Zero unless the locator loss is BAL.
    pub l_boundary: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.l_me, self.l_state, self.l_loc, self.l_overlap, self.l_boundary].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.total += b.total;
            acc.l_me += b.l_me;
            acc.l_state += b.l_state;
            acc.l_loc += b.l_loc;
            acc.l_overlap += b.l_overlap;
            acc.l_boundary += b.l_boundary;
        }
        LossBreakdown {
            total: acc.total / n,
            l_me: acc.l_me / n,
            l_state: acc.l_state / n,
            l_loc: acc.l_loc / n,
            l_overlap: acc.l_overlap / n,
            l_boundary: acc.l_boundary / n,
        }
    }

    /// Largest relative violation of the two linear-composition identities.
    /// The BAL identity is only checked for `kind == Bal`.
    pub fn composition_error(&self, cfg: &LossConfig) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        let composed = cfg.w1 * self.l_me + cfg.w2 * self.l_state + cfg.w3 * self.l_loc;
        let mut err = if self.total == composed { 0.0 } else { rel(self.total, composed) };
        if cfg.locator_loss_kind == LocatorLossKind::Bal {
            let loc = self.l_overlap + cfg.lambda * self.l_boundary;
            if self.l_loc != loc {
                err = err.max(rel(self.l_loc, loc));
            }
        }
        err
    }
}

/// Gradients of the total loss with respect to the three model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub p_me: f64,
    pub p_state: f64,
    pub s_loc: Vec<f64>,
}

pub fn total_loss(
    p_me: f64,
    p_state: f64,
    s_loc: &[f64],
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_with_grad(p_me, p_state, s_loc, targets, cfg).map(|(b, _)| b)
}

pub fn total_loss_with_grad(
    p_me: f64,
    p_state: f64,
    s_loc: &[f64],
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads)> {
    let y_me = if targets.has_me { 1.0 } else { 0.0 };
    let y_state = if targets.is_speaking { 1.0 } else { 0.0 };
    let (l_me, g_me) = focal_loss_with_grad(p_me, y_me, cfg.focal_alpha, cfg.focal_gamma)?;
    let (l_state, g_state) = focal_loss_with_grad(p_state, y_state, cfg.focal_alpha, cfg.focal_gamma)?;

    let (l_loc, l_overlap, l_boundary, g_loc) = match cfg.locator_loss_kind {
        LocatorLossKind::Bal => {
            let (t, g) = bal_with_grad(s_loc, &targets.frame_mask, &targets.boundary_weights, cfg)?;
            (t.l_loc, t.l_overlap, t.l_boundary, g)
        }
        kind => {
            let (v, g) = baseline_locator_loss_with_grad(kind, s_loc, &targets.frame_mask, cfg.smooth)?;
            (v, 0.0, 0.0, g)
        }
    };
    let breakdown = LossBreakdown {
        total: cfg.w1 * l_me + cfg.w2 * l_state + cfg.w3 * l_loc,
        l_me,
        l_state,
        l_loc,
        l_overlap,
        l_boundary,
    };
    let grads = OutputGrads {
        p_me: cfg.w1 * g_me,
        p_state: cfg.w2 * g_state,
        s_loc: g_loc.into_iter().map(|g| cfg.w3 * g).collect(),
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const HI: f64 = 1.0 - PROB_EPS;
    const LO: f64 = PROB_EPS;

    #[test]
    fn focal_examples() {
        assert!(focal_loss(1.0, 1.0, 0.25, 2.0).unwrap() < 1e-12);
        assert_relative_eq!(focal_loss(0.5, 1.0, 0.25, 2.0).unwrap(), 0.25 * 0.25 * 2f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(focal_loss(0.5, 1.0, 0.25, 2.0).unwrap(), 0.04332, epsilon = 1e-5);
        for &(p, y) in &[(0.3, 1.0), (0.3, 0.0), (0.91, 1.0)] {
            assert_relative_eq!(focal_loss(p, y, 0.5, 0.0).unwrap(), 0.5 * bce(p, y), max_relative = 1e-14);
        }
        assert!(matches!(focal_loss(0.4, 0.5, 0.25, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn focal_tversky_examples() {
        let p = TverskyParams { alpha: 0.7, beta: 0.3, gamma: 0.75, smooth: 1e-12 };
        let v = focal_tversky(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &p).unwrap();
        // (1 - 1/1.7)^0.75, evaluated directly.
        assert_relative_eq!(v, 0.514_028_07, epsilon = 1e-6);

        let perfect = focal_tversky(&[HI, HI, LO, LO], &[1.0, 1.0, 0.0, 0.0], &TverskyParams { smooth: 1e-6, ..p });
        assert!(perfect.unwrap() <= 1e-5);

        assert!(matches!(focal_tversky(&[0.1], &[1.0, 0.0], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn boundary_bce_examples() {
        let y = [0.0, 1.0, 1.0, 1.0, 0.0];
        let p = [0.1, 0.9, 0.9, 0.9, 0.1];
        let v = boundary_weighted_bce(&p, &y, &[1.0, 5.0, 1.0, 5.0, 1.0]).unwrap();
        assert_relative_eq!(v, -(0.9f64.ln()), max_relative = 1e-12);
        assert_relative_eq!(v, 0.10536, epsilon = 1e-5);

        let p2 = [0.2, 0.7, 0.6, 0.99, 0.35];
        let plain = baseline_locator_loss(LocatorLossKind::Bce, &p2, &y, 1e-6).unwrap();
        assert_relative_eq!(boundary_weighted_bce(&p2, &y, &[1.0; 5]).unwrap(), plain, max_relative = 1e-14);

        assert!(boundary_weighted_bce(&[HI, LO], &[1.0, 0.0], &[5.0, 1.0]).unwrap() <= 1e-5);
        assert!(matches!(boundary_weighted_bce(&p2, &y, &[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn bal_examples() {
        let y = [0.0, 1.0, 1.0, 1.0, 0.0];
        let p = [0.1, 0.9, 0.9, 0.9, 0.1];
        let w = [1.0, 5.0, 1.0, 5.0, 1.0];
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let t = bal(&p, &y, &w, &cfg).unwrap();
        assert_eq!(t.l_loc, t.l_overlap);

        let cfg = LossConfig::default();
        let t = bal(&[HI, HI, LO], &[1.0, 1.0, 0.0], &[5.0, 5.0, 1.0], &cfg).unwrap();
        assert!(t.l_loc <= 2e-5, "{t:?}");

        let cfg = LossConfig { lambda: 0.5, ..LossConfig::default() };
        let t = bal(&p, &y, &w, &cfg).unwrap();
        let overlap = focal_tversky(&p, &y, &cfg.tversky()).unwrap();
        let boundary = boundary_weighted_bce(&p, &y, &w).unwrap();
        assert_relative_eq!(t.l_loc, overlap + 0.5 * boundary, max_relative = 1e-15);
    }

    #[test]
    fn baseline_examples() {
        let p = [0.3, 0.8];
        assert_eq!(baseline_locator_loss(LocatorLossKind::Mse, &p, &p, 1e-6).unwrap(), 0.0);
        assert_eq!(baseline_locator_loss(LocatorLossKind::Mae, &[0.25], &[1.0], 1e-6).unwrap(), 0.75);
        let v = baseline_locator_loss(LocatorLossKind::SoftIou, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 1e-12).unwrap();
        assert!(v.abs() < 1e-12);
        assert_relative_eq!(
            baseline_locator_loss(LocatorLossKind::SmoothL1, &[0.5, 0.0], &[1.0, 0.0], 1e-6).unwrap(),
            0.0625
        );
        assert!(matches!(baseline_locator_loss(LocatorLossKind::Bal, &p, &p, 1e-6), Err(Error::UnknownKind(_))));
        assert!(matches!("hinge".parse::<LocatorLossKind>(), Err(Error::UnknownKind(_))));
        assert_eq!("soft_iou".parse::<LocatorLossKind>().unwrap(), LocatorLossKind::SoftIou);
    }

    #[test]
    fn total_loss_examples() {
        let targets = Targets {
            has_me: true,
            is_speaking: false,
            frame_mask: vec![0.0, 1.0, 1.0, 0.0],
            boundary_weights: vec![1.0, 5.0, 5.0, 1.0],
        };
        let s = [0.2, 0.6, 0.7, 0.1];
        let cfg = LossConfig { w1: 0.0, w2: 0.0, ..LossConfig::default() };
        let b = total_loss(0.3, 0.4, &s, &targets, &cfg).unwrap();
        assert_eq!(b.total, cfg.w3 * b.l_loc);

        let cfg = LossConfig::default();
        let b = total_loss(HI, LO, &[LO, HI, HI, LO], &targets, &cfg).unwrap();
        assert!(b.total <= 1e-4, "{b:?}");

        let b = total_loss(0.3, 0.4, &s, &targets, &cfg).unwrap();
        let l_me = focal_loss(0.3, 1.0, 0.25, 2.0).unwrap();
        let l_state = focal_loss(0.4, 0.0, 0.25, 2.0).unwrap();
        let l_loc = focal_tversky(&s, &targets.frame_mask, &cfg.tversky()).unwrap()
            + 0.5 * boundary_weighted_bce(&s, &targets.frame_mask, &targets.boundary_weights).unwrap();
        assert_relative_eq!(b.total, l_me + l_state + 2.0 * l_loc, max_relative = 1e-12);
        assert!(b.composition_error(&cfg) <= 1e-12);
    }

    #[test]
    fn boundary_term_grows_with_boundary_weight() {
        // Boundary frames are badly predicted, interior frames well.
        let y = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let p = [0.05, 0.3, 0.95, 0.95, 0.25, 0.05];
        let spans = [crate::data::Span::new(1, 4)];
        let mut prev = 0.0;
        for wb in [1.0, 2.0, 5.0, 10.0] {
            let w = crate::data::boundary_weights(6, &spans, wb);
            let v = boundary_weighted_bce(&p, &y, &w).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { smooth: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { w_boundary: 0.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { tversky_alpha: 1.0, ..LossConfig::default() }.validate().is_err());
    }
}
