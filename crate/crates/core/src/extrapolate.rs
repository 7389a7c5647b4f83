//! Logit extrapolation of the final-layer distribution.
//!
//! When the divergence between the last layers changes sharply, the
//! probabilities of the mature distribution's top-k tokens are traced across
//! layers `e_start..=e_end`, tokens with a monotone trajectory get a
//! least-squares line, and the line is read off at the virtual layer
//! `e_infer`. Extrapolated values that would drop out of the top-k set revert
//! to their original probabilities; the rest replace the originals and the
//! distribution is renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerLogitsStack;
use crate::numkit::{
    is_monotonic, jsd, jsd_truncated, ols_fit, ols_predict, top_k_indices, LinearFit, ProbDist,
};

/// Divergences below this count as zero in the trigger ratio.
pub const JSD_ZERO: f64 = 1e-12;
/// Floor applied to extrapolated probabilities.
pub const MIN_EXTRAPOLATED: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolationConfig {
    pub enabled: bool,
    /// Trigger threshold on the relative change of consecutive-layer JSD.
    pub alpha: f64,
    pub top_k: usize,
    pub e_start: usize,
    pub e_end: usize,
    pub e_infer: usize,
    /// Trailing layers considered by the trigger.
    pub window: usize,
    /// Fire on every step regardless of `alpha`.
    pub force_trigger: bool,
    /// Restrict the trigger's JSD to the union of each pair's top-k support.
    pub trigger_support_top_k: Option<usize>,
    /// Ablation only: extrapolate every vocabulary token and skip the
    /// monotonicity filter.
    pub all_token_ablation: bool,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.3,
            top_k: 4,
            e_start: 5,
            e_end: 8,
            e_infer: 11,
            window: 3,
            force_trigger: false,
            trigger_support_top_k: None,
            all_token_ablation: false,
        }
    }
}

impl ExtrapolationConfig {
    /// Checks the fields against a model whose final layer is `layer_count`.
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if self.e_start >= self.e_end || self.e_end > layer_count {
            return Err(Error::config(format!(
                "need e_start < e_end <= {layer_count}, got {}..{}",
                self.e_start, self.e_end
            )));
        }
        if self.e_infer <= self.e_end {
            return Err(Error::config(format!(
                "e_infer {} must lie beyond e_end {}",
                self.e_infer, self.e_end
            )));
        }
        if self.window < 3 || self.window > layer_count + 1 {
            return Err(Error::config(format!(
                "window {} must be in 3..={}",
                self.window,
                layer_count + 1
            )));
        }
        if self.trigger_support_top_k == Some(0) {
            return Err(Error::config("trigger_support_top_k must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationOutcome {
    pub triggered: bool,
    /// Top-k tokens of the mature distribution, most probable first.
    pub top_tokens: Vec<usize>,
    /// Candidates that passed the monotonicity filter and got a fit.
    pub kept_tokens: Vec<usize>,
    pub fits: Vec<LinearFit>,
    /// Clamped prediction at `e_infer` for each kept token.
    pub predicted: Vec<f64>,
    /// Whether each kept token's prediction survived the top-k check.
    pub accepted: Vec<bool>,
    pub merged: ProbDist,
}

impl ExtrapolationOutcome {
    fn untouched(mature: ProbDist, triggered: bool, top_tokens: Vec<usize>) -> Self {
        Self {
            triggered,
            top_tokens,
            kept_tokens: Vec::new(),
            fits: Vec::new(),
            predicted: Vec::new(),
            accepted: Vec::new(),
            merged: mature,
        }
    }
}

fn pair_jsd(a: &ProbDist, b: &ProbDist, support: Option<usize>) -> Result<f64> {
    match support {
        Some(k) => jsd_truncated(a, b, k),
        None => jsd(a, b),
    }
}

/// Relative change `(JSD(p_N, p_N-1) - JSD(p_N-1, p_N-2)) / JSD(p_N-1, p_N-2)`
/// in absolute value; `None` when the denominator is effectively zero.
pub fn trigger_ratio(
    stack: &LayerLogitsStack,
    cfg: &ExtrapolationConfig,
) -> Result<(f64, f64, Option<f64>)> {
    let n = stack.layer_count();
    if n < 2 {
        return Err(Error::invalid("trigger needs at least three rows"));
    }
    let top = stack.probs(n)?;
    let mid = stack.probs(n - 1)?;
    let low = stack.probs(n - 2)?;
    let upper = pair_jsd(&top, &mid, cfg.trigger_support_top_k)?;
    let lower = pair_jsd(&mid, &low, cfg.trigger_support_top_k)?;
    let ratio = (lower >= JSD_ZERO).then(|| ((upper - lower) / lower).abs());
    Ok((upper, lower, ratio))
}

pub fn trigger(stack: &LayerLogitsStack, cfg: &ExtrapolationConfig) -> Result<bool> {
    // the ratio is computed even when forced so both paths cost the same
    let (upper, _, ratio) = trigger_ratio(stack, cfg)?;
    if cfg.force_trigger {
        return Ok(true);
    }
    Ok(match ratio {
        Some(r) => r > cfg.alpha,
        None => upper >= JSD_ZERO,
    })
}

/// Extrapolates the mature distribution of `stack` when the trigger fires.
pub fn run_extrapolation(
    stack: &LayerLogitsStack,
    cfg: &ExtrapolationConfig,
) -> Result<ExtrapolationOutcome> {
    let n = stack.layer_count();
    cfg.validate(n)?;
    let mature = stack.mature()?;
    let k = if cfg.all_token_ablation {
        mature.len()
    } else {
        cfg.top_k.min(mature.len())
    };
    if !trigger(stack, cfg)? {
        return Ok(ExtrapolationOutcome::untouched(mature, false, Vec::new()));
    }
    let top_tokens = top_k_indices(&mature, k)?;

    let layers: Vec<usize> = (cfg.e_start..=cfg.e_end).collect();
    let per_layer = layers
        .iter()
        .map(|&l| stack.probs(l))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = layers.iter().map(|&l| l as f64).collect();

    let mut kept_tokens = Vec::new();
    let mut fits = Vec::new();
    let mut predicted = Vec::new();
    for &token in &top_tokens {
        let series: Vec<f64> = per_layer.iter().map(|d| d.get(token)).collect();
        if !cfg.all_token_ablation && !is_monotonic(&series)? {
            continue;
        }
        let fit = match ols_fit(&xs, &series) {
            Ok(f) => f,
            Err(Error::DegenerateFit) => continue,
            Err(e) => return Err(e),
        };
        kept_tokens.push(token);
        fits.push(fit);
        predicted.push(ols_predict(&fit, cfg.e_infer as f64).clamp(MIN_EXTRAPOLATED, 1.0));
    }

    // Largest original probability outside the top-k set, and the lowest
    // index holding it (for ties under the index tie-break).
    let mut outside: Option<(f64, usize)> = None;
    for (i, &p) in mature.probs().iter().enumerate() {
        if top_tokens.contains(&i) {
            continue;
        }
        if outside.is_none_or(|(best, _)| p > best) {
            outside = Some((p, i));
        }
    }
    let accepted: Vec<bool> = kept_tokens
        .iter()
        .zip(&predicted)
        .map(|(&token, &value)| match outside {
            None => true,
            Some((best, at)) => value > best || (value == best && token < at),
        })
        .collect();

    let mut merged = mature.probs().to_vec();
    for ((&token, &value), &ok) in kept_tokens.iter().zip(&predicted).zip(&accepted) {
        if ok {
            merged[token] = value;
        }
    }
    Ok(ExtrapolationOutcome {
        triggered: true,
        top_tokens,
        kept_tokens,
        fits,
        predicted,
        accepted,
        merged: ProbDist::normalize(merged)?,
    })
}
