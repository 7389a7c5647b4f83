//! Binary record/replay format for layer stacks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EXDT" | u32 version=1 | u32 N | u32 V | u32 step_count
//! per step: u32 chosen_token | (N+1)·V f32 logits, layer-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerLogitsStack, ModelSession, ProviderKind, TokenId};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"EXDT";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// Token that followed this step: the decoded or teacher-forced choice.
    pub chosen_token: TokenId,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    layer_count: usize,
    vocab_size: usize,
    steps: Vec<TraceStep>,
}

impl Trace {
    pub fn new(layer_count: usize, vocab_size: usize) -> Result<Self> {
        if layer_count == 0 || vocab_size == 0 {
            return Err(Error::invalid("trace needs N >= 1 and V >= 1"));
        }
        u32::try_from(layer_count).map_err(|_| Error::invalid("N too large"))?;
        u32::try_from(vocab_size).map_err(|_| Error::invalid("V too large"))?;
        Ok(Self {
            layer_count,
            vocab_size,
            steps: Vec::new(),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn step_width(&self) -> usize {
        (self.layer_count + 1) * self.vocab_size
    }

    pub fn push(&mut self, stack: &LayerLogitsStack, chosen_token: TokenId) -> Result<()> {
        if stack.layer_count() != self.layer_count || stack.vocab_size() != self.vocab_size {
            return Err(Error::invalid(format!(
                "stack shape {}x{} does not match trace {}x{}",
                stack.layer_count(),
                stack.vocab_size(),
                self.layer_count,
                self.vocab_size
            )));
        }
        if chosen_token as usize >= self.vocab_size {
            return Err(Error::invalid(format!(
                "chosen token {chosen_token} outside vocabulary"
            )));
        }
        self.steps.push(TraceStep {
            chosen_token,
            logits: stack.as_flat().to_vec(),
        });
        Ok(())
    }

    pub fn stack(&self, step: usize) -> Result<LayerLogitsStack> {
        let s = self
            .steps
            .get(step)
            .ok_or(Error::EndOfTrace(self.steps.len()))?;
        LayerLogitsStack::from_flat(step, self.vocab_size, s.logits.clone())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = Error::TraceWrite;
        w.write_all(TRACE_MAGIC).map_err(io)?;
        for field in [
            TRACE_VERSION,
            self.layer_count as u32,
            self.vocab_size as u32,
            u32::try_from(self.steps.len()).map_err(|_| Error::invalid("too many steps"))?,
        ] {
            w.write_all(&field.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(4 + 4 * self.step_width());
        for s in &self.steps {
            buf.clear();
            buf.extend_from_slice(&s.chosen_token.to_le_bytes());
            for x in &s.logits {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path).map_err(Error::TraceWrite)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::TraceFormat(m.to_string());
        if bytes.len() < 20 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != TRACE_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != TRACE_VERSION {
            return Err(bad(&format!("unsupported version {}", word(0))));
        }
        let (n, v, count) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let mut trace = Trace::new(n, v).map_err(|_| bad("zero N or V"))?;
        let step_bytes = 4 + 4 * trace.step_width();
        let body = &bytes[20..];
        if body.len()
            != count
                .checked_mul(step_bytes)
                .ok_or_else(|| bad("size overflow"))?
        {
            return Err(bad(&format!(
                "payload of {} bytes does not hold {count} steps of {step_bytes}",
                body.len()
            )));
        }
        for chunk in body.chunks_exact(step_bytes) {
            let chosen_token = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            if chosen_token as usize >= v {
                return Err(bad("chosen token outside vocabulary"));
            }
            let logits = chunk[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            trace.steps.push(TraceStep {
                chosen_token,
                logits,
            });
        }
        Ok(trace)
    }
}

/// Accumulates stacks and their chosen tokens during a live run.
pub type TraceRecorder = Trace;

/// Replays a trace as a stream of stacks shared by successive sessions.
#[derive(Debug, Clone)]
pub struct TraceReplay {
    trace: Trace,
    cursor: usize,
}

impl TraceReplay {
    pub fn new(trace: Trace) -> Self {
        Self { trace, cursor: 0 }
    }

    pub fn layer_count(&self) -> usize {
        self.trace.layer_count
    }

    pub fn vocab_size(&self) -> usize {
        self.trace.vocab_size
    }

    /// Steps served so far.
    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.trace.len() - self.cursor
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    /// Serves the next step. Within a session, a supplied token must match
    /// the recorded choice of the previous step.
    pub(crate) fn next(
        &mut self,
        next_token: Option<TokenId>,
        in_session: bool,
    ) -> Result<Vec<f32>> {
        if let (Some(got), true) = (next_token, in_session) {
            let expected = self.trace.steps[self.cursor - 1].chosen_token;
            if got != expected {
                return Err(Error::TraceMismatch {
                    step: self.cursor,
                    expected,
                    got,
                });
            }
        }
        let step = self
            .trace
            .steps
            .get(self.cursor)
            .ok_or(Error::EndOfTrace(self.cursor))?;
        self.cursor += 1;
        Ok(step.logits.clone())
    }
}

/// Runs `steps` decode steps on a live session, choosing each next token with
/// `choose`, and writes the resulting trace to `sink`.
pub fn record_trace<W, F>(
    session: &mut ModelSession<'_>,
    steps: usize,
    mut choose: F,
    sink: W,
) -> Result<Trace>
where
    W: Write,
    F: FnMut(&LayerLogitsStack) -> Result<TokenId>,
{
    if session.kind() != ProviderKind::TinyModel {
        return Err(Error::invalid(
            "recording requires a live tiny-model session",
        ));
    }
    let mut trace = Trace::new(session.layer_count(), session.vocab_size())?;
    let mut next = None;
    for i in 0..steps {
        let stack = session.next_layer_logits(next).map_err(|e| e.at_step(i))?;
        let token = choose(&stack).map_err(|e| e.at_step(i))?;
        trace.push(&stack, token)?;
        next = Some(token);
    }
    trace.write_to(sink)?;
    Ok(trace)
}
