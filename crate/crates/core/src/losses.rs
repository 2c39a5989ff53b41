//! Training objectives for the two stages, as scalar heads behind the
//! graph output.
//!
//! Stage one trains with dice plus cross-entropy; stage two with pixel-wise
//! MSE plus cross-entropy. Both are computed in fixed pixel order with
//! compensated summation, and both clamp probabilities to
//! `[1e-12, 1 - 1e-12]` before any logarithm so saturated sigmoids keep the
//! loss finite. The dice term carries an ε = 1e-6 in numerator and
//! denominator; an empty prediction against an empty mask therefore scores
//! dice_term = -1, i.e. perfect agreement.

use thiserror::Error;

use crate::graph::{EngineError, Objective};
use crate::numeric::KahanSum;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no pixels to score")]
    EmptyInput,
    #[error("prediction has {p} pixels, mask has {g}")]
    LengthMismatch { p: usize, g: usize },
    #[error("probability {value} at pixel {index} outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("mask value {value} at pixel {index} is not 0 or 1")]
    MaskNotBinary { index: usize, value: f64 },
}

impl From<LossError> for EngineError {
    fn from(e: LossError) -> Self {
        EngineError::ObjectiveFailed(e.to_string())
    }
}

/// A scalar loss with its named parts; `total` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossValue {
    fn from_components(components: Vec<(&'static str, f64)>) -> Self {
        let total = components.iter().map(|(_, v)| v).sum();
        Self { total, components }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }
}

fn validate(p: &[f64], g: &[f64]) -> Result<(), LossError> {
    if p.len() != g.len() {
        return Err(LossError::LengthMismatch {
            p: p.len(),
            g: g.len(),
        });
    }
    if p.is_empty() {
        return Err(LossError::EmptyInput);
    }
    for (i, &v) in p.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::ProbabilityOutOfRange { index: i, value: v });
        }
    }
    for (i, &v) in g.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(LossError::MaskNotBinary { index: i, value: v });
        }
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean negative log-likelihood of the mask under the prediction.
fn cross_entropy(p: &[f64], g: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (&pi, &gi) in p.iter().zip(g) {
        let pc = clamp_prob(pi);
        acc.add(gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln());
    }
    -acc.value() / p.len() as f64
}

/// `d(cross_entropy)/d(p_i)`; zero where the pixel sits in the clamped
/// saturation region.
fn cross_entropy_grad_into(p: &[f64], g: &[f64], scale: f64, out: &mut [f64]) {
    let n = p.len() as f64;
    for ((&pi, &gi), o) in p.iter().zip(g).zip(out.iter_mut()) {
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pi) {
            continue;
        }
        *o += scale * (-(gi / pi - (1.0 - gi) / (1.0 - pi)) / n);
    }
}

/// Stage-one loss: smoothed negative dice plus cross-entropy.
///
/// `total = -(2·Σp·g + ε)/(Σp² + Σg² + ε) + CE`, with components
/// `dice_term` (in `[-1, 0)`) and `ce_term` (`≥ 0`).
pub fn loss_gsm(p: &[f64], g: &[f64]) -> Result<LossValue, LossError> {
    validate(p, g)?;
    let (a, b) = dice_sums(p, g);
    let dice_term = -(2.0 * a + DICE_EPS) / (b + DICE_EPS);
    let ce_term = cross_entropy(p, g);
    Ok(LossValue::from_components(vec![
        ("dice_term", dice_term),
        ("ce_term", ce_term),
    ]))
}

/// `(Σ p_i·g_i, Σ p_i² + Σ g_i²)`.
fn dice_sums(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut pg = KahanSum::new();
    let mut sq = KahanSum::new();
    for (&pi, &gi) in p.iter().zip(g) {
        pg.add(pi * gi);
        sq.add(pi * pi + gi * gi);
    }
    (pg.value(), sq.value())
}

/// `d(loss_gsm)/d(p_i)` scaled by `scale`, accumulated into `out`.
pub fn loss_gsm_grad_into(
    p: &[f64],
    g: &[f64],
    scale: f64,
    out: &mut [f64],
) -> Result<(), LossError> {
    validate(p, g)?;
    let (a, b) = dice_sums(p, g);
    let denom = b + DICE_EPS;
    let numer = 2.0 * a + DICE_EPS;
    for ((&pi, &gi), o) in p.iter().zip(g).zip(out.iter_mut()) {
        *o += scale * (-(2.0 * gi * denom - numer * 2.0 * pi) / (denom * denom));
    }
    cross_entropy_grad_into(p, g, scale, out);
    Ok(())
}

/// Stage-two loss: pixel-wise mean squared error plus cross-entropy.
///
/// `total = (1/N)·Σ(g - p)² + CE`; both components nonnegative.
pub fn loss_lrm(p: &[f64], g: &[f64]) -> Result<LossValue, LossError> {
    validate(p, g)?;
    let mut acc = KahanSum::new();
    for (&pi, &gi) in p.iter().zip(g) {
        let d = gi - pi;
        acc.add(d * d);
    }
    let mse_term = acc.value() / p.len() as f64;
    let ce_term = cross_entropy(p, g);
    Ok(LossValue::from_components(vec![
        ("mse_term", mse_term),
        ("ce_term", ce_term),
    ]))
}

/// `d(loss_lrm)/d(p_i)` scaled by `scale`, accumulated into `out`.
pub fn loss_lrm_grad_into(
    p: &[f64],
    g: &[f64],
    scale: f64,
    out: &mut [f64],
) -> Result<(), LossError> {
    validate(p, g)?;
    let n = p.len() as f64;
    for ((&pi, &gi), o) in p.iter().zip(g).zip(out.iter_mut()) {
        *o += scale * (2.0 * (pi - gi) / n);
    }
    cross_entropy_grad_into(p, g, scale, out);
    Ok(())
}

/// Which of the two stage losses a head computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    DiceCe,
    MseCe,
}

/// Loss head binding a target mask to a graph whose output is a
/// probability map of the same pixel count.
#[derive(Debug, Clone)]
pub struct SegLossHead {
    pub kind: LossKind,
    pub target: Vec<f64>,
}

impl SegLossHead {
    pub fn new(kind: LossKind, target: Vec<f64>) -> Self {
        Self { kind, target }
    }

    pub fn evaluate(&self, output: &Tensor) -> Result<LossValue, LossError> {
        match self.kind {
            LossKind::DiceCe => loss_gsm(output.data(), &self.target),
            LossKind::MseCe => loss_lrm(output.data(), &self.target),
        }
    }
}

impl Objective for SegLossHead {
    fn value(&self, output: &Tensor) -> Result<f64, EngineError> {
        Ok(self.evaluate(output)?.total)
    }

    fn seed(&self, output: &Tensor) -> Result<Tensor, EngineError> {
        let mut grad = vec![0.0; output.len()];
        match self.kind {
            LossKind::DiceCe => loss_gsm_grad_into(output.data(), &self.target, 1.0, &mut grad)?,
            LossKind::MseCe => loss_lrm_grad_into(output.data(), &self.target, 1.0, &mut grad)?,
        }
        Tensor::new(output.shape().to_vec(), grad)
    }
}
