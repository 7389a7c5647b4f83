//! One decode step: extrapolate, select the contrasting layer, score.

use serde::{Deserialize, Serialize};

use crate::contrast::{contrast_scores, passthrough_scores, ContrastConfig, ContrastResult};
use crate::error::Result;
use crate::extrapolate::{run_extrapolation, ExtrapolationConfig, ExtrapolationOutcome};
use crate::model::LayerLogitsStack;
use crate::numkit::ProbDist;
use crate::select::{select_contrast_layer, BucketConfig, SelectionPolicy, Strategy};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub buckets: BucketConfig,
    pub policy: SelectionPolicy,
    pub extrapolation: ExtrapolationConfig,
    pub contrast: ContrastConfig,
    /// The JSD baseline measures divergence from the extrapolated
    /// distribution rather than the raw final layer.
    pub jsd_against_extrapolated: bool,
    /// Keep the first step's contrasting layer for the rest of the sequence.
    pub freeze_selection: bool,
}

impl DecoderConfig {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        self.buckets.validate(layer_count)?;
        self.contrast.validate()?;
        if self.extrapolation.enabled && !self.contrast.dola_baseline && !self.contrast.passthrough
        {
            self.extrapolation.validate(layer_count)?;
        }
        Ok(())
    }
}

/// What the pipeline did on one step, without the full score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub token: u32,
    pub score: f64,
    pub contrast_layer: Option<usize>,
    pub triggered: bool,
    pub plausible_set_size: usize,
}

/// Stateful only through the optional frozen contrasting layer.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    frozen: Option<usize>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Self {
        Self { cfg, frozen: None }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Forgets the frozen layer; call at the start of each sequence.
    pub fn reset(&mut self) {
        self.frozen = None;
    }

    /// Scores the next token. `history` is the generated continuation so far.
    pub fn step(&mut self, stack: &LayerLogitsStack, history: &[u32]) -> Result<ContrastResult> {
        let cfg = &self.cfg;
        if cfg.contrast.passthrough {
            return Ok(passthrough_scores(&stack.mature()?, &cfg.contrast, history));
        }
        if cfg.contrast.dola_baseline {
            let mature = stack.mature()?;
            let policy = SelectionPolicy::new(Strategy::JsdBaseline, None)?;
            let layer = choose_layer(cfg, &mut self.frozen, stack, &policy, None)?;
            let mut r = contrast_scores(&mature, &stack.probs(layer)?, &cfg.contrast, history)?;
            r.contrast_layer = Some(layer);
            return Ok(r);
        }
        let outcome = if cfg.extrapolation.enabled {
            run_extrapolation(stack, &cfg.extrapolation)?
        } else {
            ExtrapolationOutcome {
                triggered: false,
                top_tokens: Vec::new(),
                kept_tokens: Vec::new(),
                fits: Vec::new(),
                predicted: Vec::new(),
                accepted: Vec::new(),
                merged: stack.mature()?,
            }
        };
        let against = cfg.jsd_against_extrapolated.then_some(&outcome.merged);
        let layer = choose_layer(cfg, &mut self.frozen, stack, &cfg.policy, against)?;
        let mut r = contrast_scores(
            &outcome.merged,
            &stack.probs(layer)?,
            &cfg.contrast,
            history,
        )?;
        r.contrast_layer = Some(layer);
        r.extrapolation_triggered = outcome.triggered;
        Ok(r)
    }
}

fn choose_layer(
    cfg: &DecoderConfig,
    frozen: &mut Option<usize>,
    stack: &LayerLogitsStack,
    policy: &SelectionPolicy,
    mature: Option<&ProbDist>,
) -> Result<usize> {
    if let Some(l) = *frozen {
        return Ok(l);
    }
    let layer = select_contrast_layer(stack, &cfg.buckets, policy, mature)?;
    if cfg.freeze_selection {
        *frozen = Some(layer);
    }
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::PromptKind;

    fn base() -> DecoderConfig {
        DecoderConfig {
            buckets: BucketConfig {
                buckets: vec![0..2, 2..4],
                active_bucket: 1,
            },
            policy: SelectionPolicy::for_prompt(PromptKind::Open),
            extrapolation: ExtrapolationConfig {
                e_start: 2,
                e_end: 4,
                e_infer: 6,
                top_k: 2,
                ..ExtrapolationConfig::default()
            },
            contrast: ContrastConfig::default(),
            jsd_against_extrapolated: false,
            freeze_selection: false,
        }
    }

    fn stack(seed: f32) -> LayerLogitsStack {
        let rows: Vec<Vec<f32>> = (0..5)
            .map(|l| {
                (0..6)
                    .map(|v| ((l * 7 + v * 3) as f32 * seed).sin() * 3.0)
                    .collect()
            })
            .collect();
        LayerLogitsStack::from_rows(0, &rows).unwrap()
    }

    #[test]
    fn passthrough_is_log_softmax_of_top_row() {
        let mut cfg = base();
        cfg.contrast.passthrough = true;
        let s = stack(0.37);
        let r = Decoder::new(cfg).step(&s, &[]).unwrap();
        let wide: Vec<f64> = s.row(4).iter().map(|&x| x.into()).collect();
        let lp = crate::numkit::log_softmax(&wide).unwrap();
        for (a, b) in r.scores.iter().zip(lp) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.contrast_layer, None);
    }

    #[test]
    fn provenance_is_filled() {
        let s = stack(0.91);
        let r = Decoder::new(base()).step(&s, &[]).unwrap();
        assert!(matches!(r.contrast_layer, Some(2 | 3)));
    }

    #[test]
    fn frozen_selection_reuses_first_layer() {
        let mut cfg = base();
        cfg.freeze_selection = true;
        let mut d = Decoder::new(cfg);
        let first = d.step(&stack(0.11), &[]).unwrap().contrast_layer;
        for seed in [0.2, 0.5, 0.77, 1.3] {
            assert_eq!(d.step(&stack(seed), &[]).unwrap().contrast_layer, first);
        }
        d.reset();
        assert!(d.frozen.is_none());
    }

    #[test]
    fn dola_mode_never_extrapolates() {
        let mut cfg = base();
        cfg.contrast.dola_baseline = true;
        cfg.extrapolation.force_trigger = true;
        let r = Decoder::new(cfg).step(&stack(0.6), &[]).unwrap();
        assert!(!r.extrapolation_triggered);
    }
}
