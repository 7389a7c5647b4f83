//! Per-layer early-exit logits from a live tiny transformer or a recorded trace.

mod tiny;
mod trace;
pub mod train;

pub use tiny::{DistractorBias, TinyConfig, TinyModel, TinySession};
pub use trace::{
    record_trace, Trace, TraceRecorder, TraceReplay, TraceStep, TRACE_MAGIC, TRACE_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{softmax_f32, ProbDist};

pub type TokenId = u32;

/// Pre-softmax next-token scores at every layer for one decode step.
///
/// Row 0 is the embedding layer, row `N` the final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogitsStack {
    step: usize,
    vocab_size: usize,
    data: Vec<f32>,
}

impl LayerLogitsStack {
    /// Builds a stack from `N + 1` rows of width `V` stored layer-major.
    pub fn from_flat(step: usize, vocab_size: usize, data: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || data.is_empty() || !data.len().is_multiple_of(vocab_size) {
            return Err(Error::invalid(format!(
                "{} logits do not form rows of width {vocab_size}",
                data.len()
            )));
        }
        if data.len() / vocab_size < 2 {
            return Err(Error::invalid(
                "a stack needs the embedding row and at least one layer",
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite logit in stack"));
        }
        Ok(Self {
            step,
            vocab_size,
            data,
        })
    }

    pub fn from_rows(step: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged layer rows"));
        }
        Self::from_flat(step, width, rows.concat())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `N`, the index of the final layer.
    pub fn layer_count(&self) -> usize {
        self.data.len() / self.vocab_size - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, layer: usize) -> &[f32] {
        &self.data[layer * self.vocab_size..(layer + 1) * self.vocab_size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.vocab_size)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Softmax of one layer's row.
    pub fn probs(&self, layer: usize) -> Result<ProbDist> {
        if layer > self.layer_count() {
            return Err(Error::invalid(format!(
                "layer {layer} beyond final layer {}",
                self.layer_count()
            )));
        }
        softmax_f32(self.row(layer))
    }

    /// Softmax of the final layer.
    pub fn mature(&self) -> Result<ProbDist> {
        self.probs(self.layer_count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    TinyModel,
    TraceReplay,
}

/// Source of layer stacks: either a live model or a trace being replayed.
#[derive(Debug)]
pub enum Provider {
    Tiny(TinyModel),
    Replay(TraceReplay),
}

impl Provider {
    pub fn kind(&self) -> ProviderKind {
        match self {
            Provider::Tiny(_) => ProviderKind::TinyModel,
            Provider::Replay(_) => ProviderKind::TraceReplay,
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            Provider::Tiny(m) => m.config().layers,
            Provider::Replay(r) => r.layer_count(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Provider::Tiny(m) => m.config().vocab_size,
            Provider::Replay(r) => r.vocab_size(),
        }
    }

    /// Moves a replay back to the first recorded step; no-op for a live model.
    pub fn rewind(&mut self) {
        if let Provider::Replay(r) = self {
            r.rewind();
        }
    }

    /// Starts a new decode session on `context`.
    pub fn open(&mut self, context: &[TokenId]) -> Result<ModelSession<'_>> {
        let (layers, vocab) = (self.layer_count(), self.vocab_size());
        check_tokens(context, vocab)?;
        let backend = match self {
            Provider::Tiny(m) => Backend::Tiny(m.session()),
            Provider::Replay(r) => Backend::Replay(r),
        };
        Ok(ModelSession {
            context: context.to_vec(),
            layer_count: layers,
            vocab_size: vocab,
            step: 0,
            backend,
        })
    }
}

fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::invalid(format!(
            "token {t} outside vocabulary of {vocab}"
        ))),
        None => Ok(()),
    }
}

enum Backend<'a> {
    Tiny(TinySession<'a>),
    Replay(&'a mut TraceReplay),
}

/// A single-owner decode session. Each call to
/// [`next_layer_logits`](Self::next_layer_logits) advances the step by one.
pub struct ModelSession<'a> {
    context: Vec<TokenId>,
    layer_count: usize,
    vocab_size: usize,
    step: usize,
    backend: Backend<'a>,
}

impl ModelSession<'_> {
    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of stacks produced so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn kind(&self) -> ProviderKind {
        match self.backend {
            Backend::Tiny(_) => ProviderKind::TinyModel,
            Backend::Replay(_) => ProviderKind::TraceReplay,
        }
    }

    /// Appends `next_token` (required after the first step) and returns the
    /// early-exit logits of every layer at the last position.
    pub fn next_layer_logits(&mut self, next_token: Option<TokenId>) -> Result<LayerLogitsStack> {
        match next_token {
            Some(t) => check_tokens(&[t], self.vocab_size)?,
            None if self.step > 0 => {
                return Err(Error::invalid(
                    "a next token is required after the first step",
                ))
            }
            None => {}
        }
        let step = self.step;
        let data = match &mut self.backend {
            Backend::Tiny(s) => {
                if let Some(t) = next_token {
                    self.context.push(t);
                }
                s.layer_logits(&self.context)?
            }
            Backend::Replay(r) => {
                if let Some(t) = next_token {
                    self.context.push(t);
                }
                r.next(next_token, step > 0)?
            }
        };
        self.step += 1;
        LayerLogitsStack::from_flat(step, self.vocab_size, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_shape_and_rows() {
        let s = LayerLogitsStack::from_rows(3, &[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]])
            .unwrap();
        assert_eq!(s.layer_count(), 2);
        assert_eq!(s.vocab_size(), 2);
        assert_eq!(s.row(1), &[2.0, 3.0]);
        assert_eq!(s.rows().count(), 3);
        assert!(s.probs(3).is_err());
    }

    #[test]
    fn stack_rejects_bad_rows() {
        assert!(LayerLogitsStack::from_rows(0, &[vec![0.0, 1.0], vec![2.0]]).is_err());
        assert!(LayerLogitsStack::from_rows(0, &[vec![0.0, 1.0]]).is_err());
        assert!(LayerLogitsStack::from_rows(0, &[vec![0.0], vec![f32::NAN]]).is_err());
    }

    #[test]
    fn session_contract() {
        let mut p = Provider::Tiny(TinyModel::new(TinyConfig::default()).unwrap());
        assert!(p.open(&[64]).is_err());
        let mut s = p.open(&[1, 2, 3]).unwrap();
        let a = s.next_layer_logits(None).unwrap();
        assert_eq!(a.layer_count(), 8);
        assert_eq!(a.vocab_size(), 64);
        assert_eq!(a.step(), 0);
        assert!(s.next_layer_logits(None).is_err());
        assert!(s.next_layer_logits(Some(99)).is_err());
        let b = s.next_layer_logits(Some(4)).unwrap();
        assert_eq!(b.step(), 1);
        assert_eq!(s.context(), &[1, 2, 3, 4]);
    }
}
