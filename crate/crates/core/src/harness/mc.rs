use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunMode};
use super::dataset::McItem;
use crate::decode::{Decoder, StepLog};
use crate::error::{Error, Result};
use crate::model::{Provider, TokenId, Trace};

/// Option scores of one item, in option order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub seconds_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<ScoredItem>,
    pub metrics: Option<McMetrics>,
    /// Decode steps scored.
    pub steps: usize,
    /// Fraction of steps on which extrapolation fired.
    pub trigger_fraction: f64,
    /// How often each layer was chosen as the contrasting layer.
    pub selection_histogram: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl EvalReport {
    pub(crate) fn from_steps(
        items: Vec<ScoredItem>,
        metrics: Option<McMetrics>,
        steps: &[StepLog],
    ) -> Self {
        let mut selection_histogram = BTreeMap::new();
        for l in steps.iter().filter_map(|s| s.contrast_layer) {
            *selection_histogram.entry(l).or_insert(0) += 1;
        }
        let triggered = steps.iter().filter(|s| s.triggered).count();
        Self {
            items,
            metrics,
            steps: steps.len(),
            trigger_fraction: if steps.is_empty() {
                0.0
            } else {
                triggered as f64 / steps.len() as f64
            },
            selection_histogram,
            timing: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report values are finite")
    }
}

/// Scores every option of `item` by teacher-forcing its tokens after the
/// prompt and summing the contrast score of each. Appends the per-token
/// provenance to `log`, and each stack with its option token to `recorder`.
pub fn score_mc_item(
    provider: &mut Provider,
    decoder: &mut Decoder,
    item: &McItem,
    length_normalize: bool,
    mut recorder: Option<&mut Trace>,
    log: &mut Vec<StepLog>,
) -> Result<Vec<f64>> {
    let vocab = provider.vocab_size();
    let prompt = item.prompt.tokens(vocab);
    let mut scores = Vec::with_capacity(item.options.len());
    for option in &item.options {
        let tokens = option.tokens(vocab);
        if tokens.is_empty() {
            return Err(Error::invalid("empty option"));
        }
        decoder.reset();
        let mut session = provider.open(&prompt)?;
        let mut total = 0.0;
        let mut prev: Option<TokenId> = None;
        for (i, &t) in tokens.iter().enumerate() {
            let stack = session.next_layer_logits(prev).map_err(|e| e.at_step(i))?;
            let r = decoder
                .step(&stack, &tokens[..i])
                .map_err(|e| e.at_step(i))?;
            let score = *r.scores.get(t as usize).ok_or_else(|| {
                Error::invalid(format!("option token {t} outside the vocabulary"))
            })?;
            total += score;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.push(&stack, t)?;
            }
            log.push(StepLog {
                step: i,
                token: t,
                score,
                contrast_layer: r.contrast_layer,
                triggered: r.extrapolation_triggered,
                plausible_set_size: r.plausible_set_size,
            });
            prev = Some(t);
        }
        scores.push(if length_normalize {
            total / tokens.len() as f64
        } else {
            total
        });
    }
    Ok(scores)
}

/// MC1: the top-scoring option (lowest index on ties) is true.
/// MC2: probability mass on true options after exponentiating scores.
/// MC3: share of true options scoring strictly above every false option.
/// Accuracy: the best true option strictly beats the best false option.
pub fn compute_mc_metrics(items: &[ScoredItem]) -> McMetrics {
    if items.is_empty() {
        return McMetrics {
            mc1: 0.0,
            mc2: 0.0,
            mc3: 0.0,
            accuracy: 0.0,
        };
    }
    let (mut mc1, mut mc2, mut mc3, mut acc) = (0.0, 0.0, 0.0, 0.0);
    for item in items {
        let top = crate::numkit::argmax(&item.scores);
        if item.labels[top] {
            mc1 += 1.0;
        }
        let shift = item
            .scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut true_mass, mut all_mass) = (0.0, 0.0);
        for (s, &l) in item.scores.iter().zip(&item.labels) {
            let w = (s - shift).exp();
            all_mass += w;
            if l {
                true_mass += w;
            }
        }
        mc2 += true_mass / all_mass;
        let best = |want: bool| {
            item.scores
                .iter()
                .zip(&item.labels)
                .filter(|(_, &l)| l == want)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let best_false = best(false);
        let n_true = item.labels.iter().filter(|&&l| l).count();
        let above = item
            .scores
            .iter()
            .zip(&item.labels)
            .filter(|(s, &l)| l && **s > best_false)
            .count();
        mc3 += above as f64 / n_true as f64;
        if best(true) > best_false {
            acc += 1.0;
        }
    }
    let n = items.len() as f64;
    McMetrics {
        mc1: mc1 / n,
        mc2: mc2 / n,
        mc3: mc3 / n,
        accuracy: acc / n,
    }
}

/// Scores `items` on an already built provider. A replay must be consumed
/// exactly.
pub fn mc_eval_with(
    provider: &mut Provider,
    decoder: &mut Decoder,
    items: &[McItem],
    length_normalize: bool,
    mut recorder: Option<&mut Trace>,
) -> Result<EvalReport> {
    let mut log = Vec::new();
    let mut scored = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        item.validate()
            .map_err(|e| Error::Data(format!("item {}: {e}", i + 1)))?;
        let scores = score_mc_item(
            provider,
            decoder,
            item,
            length_normalize,
            recorder.as_deref_mut(),
            &mut log,
        )?;
        scored.push(ScoredItem {
            scores,
            labels: item.labels.clone(),
        });
    }
    if let Provider::Replay(r) = provider {
        if r.remaining() > 0 {
            return Err(Error::Data(format!(
                "{} trace steps left unused; the trace does not match the items",
                r.remaining()
            )));
        }
    }
    let metrics = compute_mc_metrics(&scored);
    Ok(EvalReport::from_steps(scored, Some(metrics), &log))
}

/// Multiple-choice evaluation driven entirely by `cfg`.
pub fn mc_eval(cfg: &RunConfig, items: &[McItem], timed: bool) -> Result<EvalReport> {
    cfg.validate(RunMode::MultipleChoice)?;
    let mut provider = cfg.build_provider()?;
    let mut decoder =
        Decoder::new(cfg.decoder_config(provider.layer_count(), RunMode::MultipleChoice)?);
    let start = Instant::now();
    let mut report = mc_eval_with(
        &mut provider,
        &mut decoder,
        items,
        cfg.length_normalize,
        None,
    )?;
    if timed {
        let seconds = start.elapsed().as_secs_f64();
        report.timing = Some(Timing {
            seconds,
            seconds_per_token: seconds / report.steps.max(1) as f64,
        });
    }
    Ok(report)
}

/// Runs the multiple-choice workload on the live model and returns its trace.
pub fn record_mc_trace(cfg: &RunConfig, items: &[McItem]) -> Result<(Trace, EvalReport)> {
    if cfg.trace.is_some() {
        return Err(Error::config("recording needs the live model, not a trace"));
    }
    cfg.validate(RunMode::MultipleChoice)?;
    let mut provider = cfg.build_provider()?;
    let mut decoder =
        Decoder::new(cfg.decoder_config(provider.layer_count(), RunMode::MultipleChoice)?);
    let mut trace = Trace::new(provider.layer_count(), provider.vocab_size())?;
    let report = mc_eval_with(
        &mut provider,
        &mut decoder,
        items,
        cfg.length_normalize,
        Some(&mut trace),
    )?;
    Ok((trace, report))
}
