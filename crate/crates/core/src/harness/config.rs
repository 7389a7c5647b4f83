use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastConfig, NegInfMode};
use crate::decode::DecoderConfig;
use crate::error::{Error, Result};
use crate::extrapolate::ExtrapolationConfig;
use crate::model::{Provider, TinyConfig, TinyModel, Trace, TraceReplay};
use crate::select::{BucketConfig, PromptKind, SelectionPolicy, Strategy};

/// Which scoring surface a run feeds; decides the default mask sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Generate,
    MultipleChoice,
}

/// Everything a harness run needs. Loaded from JSON; CLI flags override
/// individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TinyConfig,
    /// Replay this trace instead of running the tiny model.
    pub trace: Option<PathBuf>,
    /// Defaults to two even buckets with the upper one active.
    pub buckets: Option<BucketConfig>,
    /// Defaults to the entropy strategy implied by `prompt_kind`.
    pub strategy: Option<Strategy>,
    pub prompt_kind: Option<PromptKind>,
    pub extrapolation: ExtrapolationConfig,
    pub beta: f64,
    /// Defaults to `-inf` for generation and `-1000` for multiple choice.
    pub neg_inf: Option<NegInfMode>,
    pub repetition_penalty: f64,
    pub dola_baseline: bool,
    pub passthrough: bool,
    pub jsd_against_extrapolated: bool,
    pub freeze_selection: bool,
    pub max_new_tokens: usize,
    pub end_token: Option<u32>,
    /// Divide multiple-choice option scores by the option length.
    pub length_normalize: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let contrast = ContrastConfig::default();
        Self {
            model: TinyConfig::default(),
            trace: None,
            buckets: None,
            strategy: None,
            prompt_kind: None,
            extrapolation: ExtrapolationConfig::default(),
            beta: contrast.beta,
            neg_inf: None,
            repetition_penalty: contrast.repetition_penalty,
            dola_baseline: false,
            passthrough: false,
            jsd_against_extrapolated: false,
            freeze_selection: false,
            max_new_tokens: 16,
            end_token: None,
            length_normalize: false,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn bucket_config(&self, layer_count: usize) -> Result<BucketConfig> {
        match &self.buckets {
            Some(b) => Ok(b.clone()),
            None if layer_count >= 2 => BucketConfig::even(layer_count, 2, 1),
            None => BucketConfig::even(layer_count, 1, 0),
        }
    }

    pub fn policy(&self) -> Result<SelectionPolicy> {
        match self.strategy {
            Some(s) => SelectionPolicy::new(s, self.prompt_kind),
            None => Ok(SelectionPolicy::for_prompt(
                self.prompt_kind.unwrap_or(PromptKind::Open),
            )),
        }
    }

    pub fn contrast_config(&self, mode: RunMode) -> Result<ContrastConfig> {
        let neg_inf_mode = match (mode, self.neg_inf) {
            (RunMode::MultipleChoice, Some(NegInfMode::TrueNegativeInfinity)) => {
                return Err(Error::config(
                    "multiple-choice scoring needs finite masked scores (neg_inf = minus1000)",
                ))
            }
            (_, Some(m)) => m,
            (RunMode::Generate, None) => NegInfMode::TrueNegativeInfinity,
            (RunMode::MultipleChoice, None) => NegInfMode::Minus1000,
        };
        let cfg = ContrastConfig {
            beta: self.beta,
            neg_inf_mode,
            repetition_penalty: self.repetition_penalty,
            dola_baseline: self.dola_baseline,
            passthrough: self.passthrough,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validated decoder settings for a model of depth `layer_count`.
    pub fn decoder_config(&self, layer_count: usize, mode: RunMode) -> Result<DecoderConfig> {
        let cfg = DecoderConfig {
            buckets: self.bucket_config(layer_count)?,
            policy: self.policy()?,
            extrapolation: self.extrapolation.clone(),
            contrast: self.contrast_config(mode)?,
            jsd_against_extrapolated: self.jsd_against_extrapolated,
            freeze_selection: self.freeze_selection,
        };
        cfg.validate(layer_count)?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self, mode: RunMode) -> Result<()> {
        let layers = match &self.trace {
            Some(_) => None,
            None => {
                self.model.validate()?;
                Some(self.model.layers)
            }
        };
        if let Some(n) = layers {
            self.decoder_config(n, mode)?;
        } else {
            self.policy()?;
            self.contrast_config(mode)?;
        }
        if let Some(t) = self.end_token {
            if self.trace.is_none() && t as usize >= self.model.vocab_size {
                return Err(Error::config(format!(
                    "end_token {t} outside the vocabulary"
                )));
            }
        }
        Ok(())
    }

    /// The live tiny model, or a replay of `trace` when set.
    pub fn build_provider(&self) -> Result<Provider> {
        match &self.trace {
            Some(path) => Ok(Provider::Replay(TraceReplay::new(Trace::load(path)?))),
            None => Ok(Provider::Tiny(TinyModel::new(self.model.clone())?)),
        }
    }
}
