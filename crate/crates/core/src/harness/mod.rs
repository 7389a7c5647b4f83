//! Evaluation surface: generation, multiple-choice scoring, layer analysis
//! and hyperparameter sweeps, plus their file formats.

mod analysis;
mod config;
mod dataset;
mod generate;
mod mc;
mod sweep;

pub use analysis::{layer_analysis, AnalysisReport, LayerSummary};
pub use config::{RunConfig, RunMode};
pub use dataset::{
    byte_tokenize, load_jsonl, load_mc_items, parse_jsonl, AnalysisItem, GenItem, McItem,
    PromptInput,
};
pub use generate::{generate, greedy_generate, Generation};
pub use mc::{
    compute_mc_metrics, mc_eval, mc_eval_with, record_mc_trace, score_mc_item, EvalReport,
    McMetrics, ScoredItem, Timing,
};
pub use sweep::{
    decode_stream, run_sweep, AlphaSetting, CellTiming, SweepGrid, SweepRow, SweepTable, Workload,
};
