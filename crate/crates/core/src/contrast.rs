//! Masked log-ratio scores between the mature and contrasting distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ProbDist;

/// Contrasting probabilities are floored here before taking logs.
pub const CONTRAST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegInfMode {
    /// Masked tokens score `-inf` (generation).
    #[serde(alias = "inf")]
    TrueNegativeInfinity,
    /// Masked tokens score `-1000` (multiple-choice scoring).
    #[serde(alias = "minus1000")]
    Minus1000,
}

impl NegInfMode {
    pub fn sentinel(self) -> f64 {
        match self {
            NegInfMode::TrueNegativeInfinity => f64::NEG_INFINITY,
            NegInfMode::Minus1000 => -1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Plausibility threshold relative to the mature maximum.
    pub beta: f64,
    pub neg_inf_mode: NegInfMode,
    pub repetition_penalty: f64,
    /// Contrast the raw final layer against the JSD-selected layer with no
    /// extrapolation.
    pub dola_baseline: bool,
    /// Score with the mature log-probabilities only: plain greedy decoding.
    pub passthrough: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            neg_inf_mode: NegInfMode::TrueNegativeInfinity,
            repetition_penalty: 1.0,
            dola_baseline: false,
            passthrough: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::config(format!(
                "repetition_penalty {} must be >= 1",
                self.repetition_penalty
            )));
        }
        if self.dola_baseline && self.passthrough {
            return Err(Error::config("dola_baseline and passthrough are exclusive"));
        }
        Ok(())
    }
}

/// Final scores for one decode step with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub scores: Vec<f64>,
    /// `None` in passthrough mode.
    pub contrast_layer: Option<usize>,
    pub extrapolation_triggered: bool,
    pub plausible_set_size: usize,
}

impl ContrastResult {
    /// Highest-scoring token, lowest index on ties.
    pub fn argmax(&self) -> usize {
        crate::numkit::argmax(&self.scores)
    }
}

/// Tokens whose mature probability is at least `beta` times the maximum.
pub fn plausible_set(mature: &ProbDist, beta: f64) -> Vec<usize> {
    let threshold = beta * mature.max_prob();
    mature
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold && (beta > 0.0 || p > 0.0))
        .map(|(i, _)| i)
        .collect()
}

/// Multiplicative penalty on tokens already generated: positive scores are
/// divided by `penalty`, negative ones multiplied.
pub fn apply_repetition_penalty(scores: &mut [f64], history: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; scores.len()];
    for &t in history {
        if let Some(s) = seen.get_mut(t as usize) {
            *s = true;
        }
    }
    for (score, _) in scores.iter_mut().zip(seen).filter(|(_, s)| *s) {
        if *score > 0.0 {
            *score /= penalty;
        } else {
            *score *= penalty;
        }
    }
}

fn check_lengths(a: &ProbDist, b: &ProbDist) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "vocabulary mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `ln mature(x) - ln contrast(x)` on the plausible set, the sentinel
/// elsewhere. `history` holds tokens subject to the repetition penalty.
pub fn contrast_scores(
    mature: &ProbDist,
    contrast: &ProbDist,
    cfg: &ContrastConfig,
    history: &[u32],
) -> Result<ContrastResult> {
    check_lengths(mature, contrast)?;
    let mut scores: Vec<f64> = mature
        .probs()
        .iter()
        .zip(contrast.probs())
        .map(|(p, q)| p.ln() - q.max(CONTRAST_FLOOR).ln())
        .collect();
    apply_repetition_penalty(&mut scores, history, cfg.repetition_penalty);
    Ok(mask(scores, mature, cfg, None))
}

/// Plain log-probabilities of the mature distribution, unmasked.
pub fn passthrough_scores(
    mature: &ProbDist,
    cfg: &ContrastConfig,
    history: &[u32],
) -> ContrastResult {
    let mut scores: Vec<f64> = mature.probs().iter().map(|p| p.ln()).collect();
    apply_repetition_penalty(&mut scores, history, cfg.repetition_penalty);
    ContrastResult {
        plausible_set_size: scores.len(),
        scores,
        contrast_layer: None,
        extrapolation_triggered: false,
    }
}

fn mask(
    mut scores: Vec<f64>,
    mature: &ProbDist,
    cfg: &ContrastConfig,
    layer: Option<usize>,
) -> ContrastResult {
    let keep = plausible_set(mature, cfg.beta);
    let sentinel = cfg.neg_inf_mode.sentinel();
    let mut inside = vec![false; scores.len()];
    for &i in &keep {
        inside[i] = true;
    }
    for (s, ok) in scores.iter_mut().zip(inside) {
        if !ok {
            *s = sentinel;
        }
    }
    ContrastResult {
        scores,
        contrast_layer: layer,
        extrapolation_triggered: false,
        plausible_set_size: keep.len(),
    }
}
