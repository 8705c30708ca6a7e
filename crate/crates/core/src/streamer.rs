//! Chunked streaming inference over the frame decoder.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::svlm::{Decoder, Sampling, SpeechLm};
use crate::worldsim::TokenFrame;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub frame_ms: f64,
    /// Source frames per pushed chunk.
    pub chunk: usize,
    /// Frames held back before a frame may be emitted.
    pub lookahead: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            frame_ms: 20.0,
            chunk: 9,
            lookahead: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::Config("chunk size must be at least 1 frame".into()));
        }
        if !(self.frame_ms > 0.0 && self.frame_ms.is_finite()) {
            return Err(Error::Config(format!("frame duration {} ms must be positive", self.frame_ms)));
        }
        Ok(())
    }
}

/// Input the system must buffer before it can emit: `(chunk + lookahead)`
/// frames of audio. Compute time is not included.
pub fn latency_report(cfg: &StreamConfig) -> f64 {
    (cfg.chunk + cfg.lookahead) as f64 * cfg.frame_ms
}

pub struct StreamState<'m> {
    decoder: Decoder<'m>,
    config: StreamConfig,
    pending: VecDeque<usize>,
    consumed: usize,
    finalized: bool,
}

/// Prefills the prompt (and separators) and returns a stream with nothing
/// emitted yet. Greedy decoding keeps the stream deterministic.
pub fn open_stream<'m>(model: &'m SpeechLm, prompt: &[TokenFrame], config: &StreamConfig) -> Result<StreamState<'m>> {
    config.validate()?;
    Ok(StreamState {
        decoder: Decoder::new(model, prompt, Sampling::Greedy)?,
        config: config.clone(),
        pending: VecDeque::new(),
        consumed: 0,
        finalized: false,
    })
}

impl StreamState<'_> {
    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn emitted(&self) -> &[TokenFrame] {
        self.decoder.emitted()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Milliseconds of source audio consumed so far.
    pub fn clock_ms(&self) -> f64 {
        self.consumed as f64 * self.config.frame_ms
    }

    pub fn kernel_count(&self) -> usize {
        self.decoder.kernel_count()
    }

    /// Consumes up to one chunk of source semantic tokens and returns the
    /// frames that became ready.
    pub fn push_chunk(&mut self, semantic: &[usize]) -> Result<Vec<TokenFrame>> {
        if self.finalized {
            return Err(Error::StreamFinalized);
        }
        if semantic.len() > self.config.chunk {
            return Err(Error::InvalidInput(format!(
                "chunk of {} frames exceeds the configured {}",
                semantic.len(),
                self.config.chunk
            )));
        }
        self.pending.extend(semantic);
        self.consumed += semantic.len();
        let mut out = Vec::new();
        while self.pending.len() > self.config.lookahead {
            let s = self.pending.pop_front().expect("non-empty");
            out.push(self.decoder.step(s)?);
        }
        Ok(out)
    }

    /// Flushes frames still held for lookahead and closes the stream.
    pub fn finalize(&mut self) -> Result<Vec<TokenFrame>> {
        if self.finalized {
            return Err(Error::StreamFinalized);
        }
        let mut out = Vec::new();
        while let Some(s) = self.pending.pop_front() {
            out.push(self.decoder.step(s)?);
        }
        self.finalized = true;
        Ok(out)
    }
}

/// Streams a whole source through the given chunk sizes.
pub fn stream_all(
    model: &SpeechLm,
    prompt: &[TokenFrame],
    source: &[usize],
    chunks: &[usize],
    config: &StreamConfig,
) -> Result<Vec<TokenFrame>> {
    if chunks.iter().sum::<usize>() != source.len() {
        return Err(Error::InvalidInput("chunk sizes do not cover the source".into()));
    }
    let mut st = open_stream(model, prompt, config)?;
    let mut out = Vec::with_capacity(source.len());
    let mut at = 0;
    for &c in chunks {
        out.extend(st.push_chunk(&source[at..at + c])?);
        at += c;
    }
    out.extend(st.finalize()?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadProbe {
    pub kernels_with_head: usize,
    pub kernels_stripped: usize,
    pub frames: usize,
    pub outputs_identical: bool,
}

impl OverheadProbe {
    pub fn per_frame(&self) -> (f64, f64) {
        let n = self.frames.max(1) as f64;
        (self.kernels_with_head as f64 / n, self.kernels_stripped as f64 / n)
    }
}

/// Decodes the same input with the distillation head attached and with it
/// stripped, counting decode-path kernels in each configuration.
pub fn overhead_probe(model: &SpeechLm, prompt: &[TokenFrame], source: &[usize]) -> Result<OverheadProbe> {
    let stripped = model.strip_distill();
    let run = |m: &SpeechLm| -> Result<(Vec<TokenFrame>, usize)> {
        let mut d = Decoder::new(m, prompt, Sampling::Greedy)?;
        for &s in source {
            d.step(s)?;
        }
        Ok((d.emitted().to_vec(), d.kernel_count()))
    };
    let (a, ka) = run(model)?;
    let (b, kb) = run(&stripped)?;
    Ok(OverheadProbe {
        kernels_with_head: ka,
        kernels_stripped: kb,
        frames: source.len(),
        outputs_identical: a == b,
    })
}
