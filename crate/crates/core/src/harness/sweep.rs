use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunMode};
use super::dataset::McItem;
use super::mc::{mc_eval_with, EvalReport};
use crate::decode::{Decoder, DecoderConfig, StepLog};
use crate::error::{Error, Result};
use crate::model::{Provider, Trace};
use crate::select::{BucketConfig, Strategy};

/// A trigger threshold, or the keyword `"always"` to fire on every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum AlphaSetting {
    Value(f64),
    Always,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<AlphaRepr> for AlphaSetting {
    type Error = String;

    fn try_from(r: AlphaRepr) -> Result<Self, String> {
        match r {
            AlphaRepr::Number(a) => Ok(AlphaSetting::Value(a)),
            AlphaRepr::Word(w) if w == "always" => Ok(AlphaSetting::Always),
            AlphaRepr::Word(w) => Err(format!("alpha must be a number or \"always\", got {w:?}")),
        }
    }
}

impl From<AlphaSetting> for AlphaRepr {
    fn from(a: AlphaSetting) -> Self {
        match a {
            AlphaSetting::Value(v) => AlphaRepr::Number(v),
            AlphaSetting::Always => AlphaRepr::Word("always".into()),
        }
    }
}

/// Axes of the sweep. A missing axis keeps the base config's value; an
/// empty one yields no cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub buckets: Option<Vec<BucketConfig>>,
    pub strategies: Option<Vec<Strategy>>,
    pub alphas: Option<Vec<AlphaSetting>>,
    pub e_infers: Option<Vec<usize>>,
    /// Timed repetitions per cell; the fastest is kept.
    pub repetitions: usize,
    /// Measure wall-clock against greedy passthrough on the same workload.
    pub timing: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            buckets: None,
            strategies: None,
            alphas: None,
            e_infers: None,
            repetitions: 3,
            timing: true,
        }
    }
}

/// What each cell is evaluated on.
#[derive(Debug, Clone)]
pub enum Workload {
    MultipleChoice(Vec<McItem>),
    /// Each recorded stack decoded on its own, history taken from the
    /// recorded choices.
    Stream(Trace),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub seconds: f64,
    pub passthrough_seconds: f64,
    /// `seconds / passthrough_seconds`.
    pub overhead_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bucket: BucketConfig,
    pub strategy: Strategy,
    pub alpha: AlphaSetting,
    pub e_infer: usize,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<CellTiming>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report values are finite")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "bucket,strategy,alpha,e_infer,mc1,mc2,mc3,accuracy,trigger_fraction,overhead_ratio\n",
        );
        for r in &self.rows {
            let b = r.bucket.active();
            let alpha = match r.alpha {
                AlphaSetting::Value(a) => a.to_string(),
                AlphaSetting::Always => "always".into(),
            };
            let m = |f: fn(&super::mc::McMetrics) -> f64| {
                r.report
                    .metrics
                    .as_ref()
                    .map(|x| f(x).to_string())
                    .unwrap_or_default()
            };
            let strategy = serde_json::to_value(r.strategy).expect("unit enum");
            writeln!(
                out,
                "{}..{},{},{},{},{},{},{},{},{},{}",
                b.start,
                b.end,
                strategy.as_str().unwrap_or_default(),
                alpha,
                r.e_infer,
                m(|x| x.mc1),
                m(|x| x.mc2),
                m(|x| x.mc3),
                m(|x| x.accuracy),
                r.report.trigger_fraction,
                r.timing
                    .map(|t| t.overhead_ratio.to_string())
                    .unwrap_or_default()
            )
            .unwrap();
        }
        out
    }
}

/// Decodes every stack of `trace` independently.
pub fn decode_stream(cfg: DecoderConfig, trace: &Trace) -> Result<EvalReport> {
    let mut decoder = Decoder::new(cfg);
    let mut history = Vec::with_capacity(trace.len());
    let mut log = Vec::with_capacity(trace.len());
    for (i, step) in trace.steps().iter().enumerate() {
        let stack = trace.stack(i)?;
        let r = decoder.step(&stack, &history).map_err(|e| e.at_step(i))?;
        let token = r.argmax() as u32;
        log.push(StepLog {
            step: i,
            token,
            score: r.scores[token as usize],
            contrast_layer: r.contrast_layer,
            triggered: r.extrapolation_triggered,
            plausible_set_size: r.plausible_set_size,
        });
        history.push(step.chosen_token);
    }
    Ok(EvalReport::from_steps(Vec::new(), None, &log))
}

fn run_once(
    provider: &mut Option<Provider>,
    cfg: &RunConfig,
    workload: &Workload,
) -> Result<EvalReport> {
    match workload {
        Workload::Stream(trace) => decode_stream(
            cfg.decoder_config(trace.layer_count(), RunMode::Generate)?,
            trace,
        ),
        Workload::MultipleChoice(items) => {
            let p = provider
                .as_mut()
                .ok_or_else(|| Error::config("no model for a multiple-choice sweep"))?;
            p.rewind();
            let dcfg = cfg.decoder_config(p.layer_count(), RunMode::MultipleChoice)?;
            mc_eval_with(
                p,
                &mut Decoder::new(dcfg),
                items,
                cfg.length_normalize,
                None,
            )
        }
    }
}

fn fastest(
    provider: &mut Option<Provider>,
    cfg: &RunConfig,
    workload: &Workload,
    reps: usize,
) -> Result<(EvalReport, f64)> {
    let mut best = f64::INFINITY;
    let mut report = None;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let r = run_once(provider, cfg, workload)?;
        best = best.min(start.elapsed().as_secs_f64());
        report = Some(r);
    }
    Ok((report.expect("at least one repetition"), best))
}

/// Runs the cartesian product of the grid axes in a fixed order (bucket,
/// strategy, alpha, e_infer), one row per cell.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid, workload: &Workload) -> Result<SweepTable> {
    let mut provider = match workload {
        Workload::MultipleChoice(_) => Some(base.build_provider()?),
        Workload::Stream(_) => None,
    };
    let layers = match (workload, &provider) {
        (Workload::Stream(t), _) => t.layer_count(),
        (_, Some(p)) => p.layer_count(),
        _ => unreachable!(),
    };
    let base_policy = base.policy()?;
    let buckets = match &grid.buckets {
        Some(b) => b.clone(),
        None => vec![base.bucket_config(layers)?],
    };
    let strategies = grid
        .strategies
        .clone()
        .unwrap_or_else(|| vec![base_policy.strategy()]);
    let alphas = grid.alphas.clone().unwrap_or_else(|| {
        vec![if base.extrapolation.force_trigger {
            AlphaSetting::Always
        } else {
            AlphaSetting::Value(base.extrapolation.alpha)
        }]
    });
    let e_infers = grid
        .e_infers
        .clone()
        .unwrap_or_else(|| vec![base.extrapolation.e_infer]);

    let mut cells = Vec::new();
    for b in &buckets {
        for &s in &strategies {
            for &a in &alphas {
                for &e in &e_infers {
                    cells.push((b.clone(), s, a, e));
                }
            }
        }
    }
    if cells.is_empty() {
        return Ok(SweepTable::default());
    }

    let passthrough_seconds = if grid.timing {
        let cfg = RunConfig {
            passthrough: true,
            ..base.clone()
        };
        Some(fastest(&mut provider, &cfg, workload, grid.repetitions)?.1)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (bucket, strategy, alpha, e_infer) in cells {
        let mut cfg = base.clone();
        cfg.buckets = Some(bucket.clone());
        cfg.strategy = Some(strategy);
        if strategy != Strategy::JsdBaseline {
            cfg.prompt_kind = None;
        }
        match alpha {
            AlphaSetting::Value(a) => {
                cfg.extrapolation.alpha = a;
                cfg.extrapolation.force_trigger = false;
            }
            AlphaSetting::Always => cfg.extrapolation.force_trigger = true,
        }
        cfg.extrapolation.e_infer = e_infer;
        let (report, timing) = match passthrough_seconds {
            Some(pt) => {
                let (report, seconds) = fastest(&mut provider, &cfg, workload, grid.repetitions)?;
                let timing = CellTiming {
                    seconds,
                    passthrough_seconds: pt,
                    overhead_ratio: seconds / pt,
                };
                (report, Some(timing))
            }
            None => (run_once(&mut provider, &cfg, workload)?, None),
        };
        rows.push(SweepRow {
            bucket,
            strategy,
            alpha,
            e_infer,
            report,
            timing,
        });
    }
    Ok(SweepTable { rows })
}
