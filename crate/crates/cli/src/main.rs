use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use exdec::contrast::NegInfMode;
use exdec::decode::Decoder;
use exdec::harness::{
    decode_stream, generate, greedy_generate, layer_analysis, load_jsonl, load_mc_items, mc_eval,
    record_mc_trace, run_sweep, AnalysisItem, GenItem, RunConfig, RunMode, SweepGrid, Workload,
};
use exdec::model::Trace;
use exdec::select::{BucketConfig, PromptKind, Strategy};

#[derive(Parser)]
#[command(
    name = "exdec",
    version,
    about = "Layer-contrastive decoding with logit extrapolation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy generation from one prompt or a JSON-lines file of prompts.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Score a multiple-choice dataset and report MC1/MC2/MC3.
    McEval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        /// Include wall-clock timing in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Per-layer entropy and divergence over answer tokens, as CSV.
    LayerAnalysis {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the live model and write its layer logits to the `--out` trace.
    TraceRecord {
        #[command(flatten)]
        run: RunArgs,
        /// Record the multiple-choice scoring of this dataset.
        #[arg(long, conflicts_with_all = ["prompt", "prompt_ids", "input"])]
        data: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Decode every stack of the `--trace` file and report what fired.
    TraceReplay {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a grid of buckets, strategies, alphas and inference layers.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// JSON grid; axes left out keep the config's value.
        #[arg(long)]
        grid: PathBuf,
        /// Multiple-choice workload; without it the `--trace` stream is used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args, Default)]
struct PromptArgs {
    /// Prompt text, tokenized bytewise.
    #[arg(long)]
    prompt: Option<String>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    prompt_ids: Option<Vec<u32>>,
    /// JSON lines of {"prompt": ...}.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    MinEntropy,
    MaxEntropy,
    Jsd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Open,
    Factual,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegInfArg {
    Inf,
    Minus1000,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    e_start: Option<usize>,
    #[arg(long)]
    e_end: Option<usize>,
    #[arg(long)]
    e_infer: Option<usize>,
    /// Active bucket: an index into the configured buckets, or a range `LO..HI`.
    #[arg(long)]
    bucket: Option<String>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    prompt_kind: Option<KindArg>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    neg_inf: Option<NegInfArg>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    /// Tiny-model weight seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replay this trace instead of running the model.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Divide option scores by option length.
    #[arg(long)]
    length_normalize: bool,
    /// Contrast the raw final layer with the JSD-selected layer.
    #[arg(long)]
    dola_baseline: bool,
    /// Plain greedy scores from the final layer.
    #[arg(long)]
    passthrough: bool,
}

enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl From<exdec::Error> for Failure {
    fn from(e: exdec::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

impl RunArgs {
    fn resolve(&self) -> Outcome<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let x = &mut cfg.extrapolation;
        if let Some(v) = self.alpha {
            x.alpha = v;
        }
        if let Some(v) = self.top_k {
            x.top_k = v;
        }
        if let Some(v) = self.e_start {
            x.e_start = v;
        }
        if let Some(v) = self.e_end {
            x.e_end = v;
        }
        if let Some(v) = self.e_infer {
            x.e_infer = v;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = Some(match s {
                StrategyArg::MinEntropy => Strategy::MinEntropy,
                StrategyArg::MaxEntropy => Strategy::MaxEntropy,
                StrategyArg::Jsd => Strategy::JsdBaseline,
            });
        }
        if let Some(k) = self.prompt_kind {
            cfg.prompt_kind = Some(match k {
                KindArg::Open => PromptKind::Open,
                KindArg::Factual => PromptKind::Factual,
            });
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(m) = self.neg_inf {
            cfg.neg_inf = Some(match m {
                NegInfArg::Inf => NegInfMode::TrueNegativeInfinity,
                NegInfArg::Minus1000 => NegInfMode::Minus1000,
            });
        }
        if let Some(v) = self.repetition_penalty {
            cfg.repetition_penalty = v;
        }
        if let Some(v) = self.seed {
            cfg.model.seed = v;
        }
        if let Some(p) = &self.trace {
            cfg.trace = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out = Some(p.clone());
        }
        if let Some(v) = self.max_new_tokens {
            cfg.max_new_tokens = v;
        }
        cfg.length_normalize |= self.length_normalize;
        cfg.dola_baseline |= self.dola_baseline;
        cfg.passthrough |= self.passthrough;
        if let Some(b) = &self.bucket {
            cfg.buckets = Some(parse_bucket(b, &cfg)?);
        }
        Ok(cfg)
    }
}

fn parse_bucket(text: &str, cfg: &RunConfig) -> Outcome<BucketConfig> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| config_err(anyhow!("bad bucket start in {text:?}")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| config_err(anyhow!("bad bucket end in {text:?}")))?;
        return Ok(BucketConfig {
            buckets: vec![lo..hi],
            active_bucket: 0,
        });
    }
    let index: usize = text
        .trim()
        .parse()
        .map_err(|_| config_err(anyhow!("--bucket takes an index or LO..HI, got {text:?}")))?;
    let layers = if let Some(path) = &cfg.trace {
        Trace::load(path)?.layer_count()
    } else {
        cfg.model.layers
    };
    let mut b = cfg.bucket_config(layers)?;
    b.active_bucket = index;
    Ok(b)
}

impl PromptArgs {
    fn prompts(&self, vocab: usize) -> Outcome<Vec<Vec<u32>>> {
        match (&self.prompt, &self.prompt_ids, &self.input) {
            (Some(t), None, None) => Ok(vec![exdec::harness::byte_tokenize(t, vocab)]),
            (None, Some(ids), None) => Ok(vec![ids.clone()]),
            (None, None, Some(path)) => {
                let items: Vec<GenItem> = load_jsonl(path)?;
                Ok(items.iter().map(|i| i.prompt.tokens(vocab)).collect())
            }
            _ => Err(config_err(anyhow!(
                "give exactly one of --prompt, --prompt-ids and --input"
            ))),
        }
    }
}

fn vocab_of(cfg: &RunConfig) -> Outcome<usize> {
    match &cfg.trace {
        Some(p) => Ok(Trace::load(p)?.vocab_size()),
        None => Ok(cfg.model.vocab_size),
    }
}

fn emit(cfg: &RunConfig, text: &str) -> Outcome {
    match &cfg.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| {
                    if text.ends_with('\n') {
                        Ok(())
                    } else {
                        out.write_all(b"\n")
                    }
                })
                .map_err(data_err)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_err)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { run, prompt } => {
            let cfg = run.resolve()?;
            cfg.validate(RunMode::Generate)?;
            let prompts = prompt.prompts(vocab_of(&cfg)?)?;
            let gens = generate(&cfg, &prompts)?;
            let mut text = String::new();
            for g in &gens {
                text.push_str(&serde_json::to_string(g).map_err(data_err)?);
                text.push('\n');
            }
            emit(&cfg, &text)
        }
        Command::McEval { run, data, timing } => {
            let cfg = run.resolve()?;
            cfg.validate(RunMode::MultipleChoice)?;
            let items = load_mc_items(&data)?;
            let report = mc_eval(&cfg, &items, timing)?;
            emit(&cfg, &report.to_json())
        }
        Command::LayerAnalysis { run, data } => {
            let cfg = run.resolve()?;
            cfg.validate(RunMode::Generate)?;
            let items: Vec<AnalysisItem> = load_jsonl(&data)?;
            let mut provider = cfg.build_provider()?;
            let report = layer_analysis(&mut provider, &items)?;
            if report.items_skipped > 0 {
                eprintln!("warning: skipped {} invalid item(s)", report.items_skipped);
            }
            emit(&cfg, &report.to_csv())
        }
        Command::TraceRecord { run, data, prompt } => {
            let mut cfg = run.resolve()?;
            let out = cfg
                .out
                .take()
                .ok_or_else(|| config_err(anyhow!("trace-record needs --out")))?;
            if cfg.trace.is_some() {
                return Err(config_err(anyhow!(
                    "trace-record runs the live model; drop --trace"
                )));
            }
            let trace = match data {
                Some(path) => {
                    let items = load_mc_items(&path)?;
                    record_mc_trace(&cfg, &items)?.0
                }
                None => record_generation(&cfg, &prompt)?,
            };
            write_file(&out, &trace.to_bytes())?;
            eprintln!("recorded {} steps to {}", trace.len(), out.display());
            Ok(())
        }
        Command::TraceReplay { run } => {
            let cfg = run.resolve()?;
            let path = cfg
                .trace
                .clone()
                .ok_or_else(|| config_err(anyhow!("trace-replay needs --trace")))?;
            cfg.validate(RunMode::Generate)?;
            let trace = Trace::load(path)?;
            let report = decode_stream(
                cfg.decoder_config(trace.layer_count(), RunMode::Generate)?,
                &trace,
            )?;
            emit(&cfg, &report.to_json())
        }
        Command::Sweep {
            run,
            grid,
            data,
            csv,
        } => {
            let mut cfg = run.resolve()?;
            let text = fs::read_to_string(&grid)
                .with_context(|| format!("reading {}", grid.display()))
                .map_err(config_err)?;
            let grid: SweepGrid = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", grid.display()))
                .map_err(config_err)?;
            let workload = match data {
                Some(path) => Workload::MultipleChoice(load_mc_items(&path)?),
                None => {
                    let path = cfg
                        .trace
                        .take()
                        .ok_or_else(|| config_err(anyhow!("sweep needs --data or --trace")))?;
                    Workload::Stream(Trace::load(path)?)
                }
            };
            let table = run_sweep(&cfg, &grid, &workload)?;
            emit(&cfg, &if csv { table.to_csv() } else { table.to_json() })
        }
    }
}

fn record_generation(cfg: &RunConfig, prompt: &PromptArgs) -> Outcome<Trace> {
    cfg.validate(RunMode::Generate)?;
    let prompts = prompt.prompts(cfg.model.vocab_size)?;
    let mut provider = cfg.build_provider()?;
    let mut decoder = Decoder::new(cfg.decoder_config(provider.layer_count(), RunMode::Generate)?);
    let mut trace = Trace::new(provider.layer_count(), provider.vocab_size())?;
    for p in &prompts {
        greedy_generate(
            &mut provider,
            &mut decoder,
            p,
            cfg.max_new_tokens,
            cfg.end_token,
            Some(&mut trace),
        )?;
    }
    Ok(trace)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
