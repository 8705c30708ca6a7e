use crate::error::{Error, Result};
use crate::worldsim::TokenFrame;

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Semantic,
    Acoustic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Prompt,
    Separator,
    Source,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PosToken {
    Semantic(usize),
    Acoustic(Vec<usize>),
    Sep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Position {
    pub slot: Slot,
    pub region: Region,
    pub token: PosToken,
    /// Frame index within the region; 0 for separators.
    pub frame: usize,
}

/// Prompt and source frames laid out as `[semantic, acoustic]` per frame,
/// with an optional `[SEP_ling, SEP_acou]` pair between the regions. A
/// trailing source frame may carry only its semantic slot while decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembledSequence {
    pub prompt: Vec<TokenFrame>,
    pub source: Vec<TokenFrame>,
    pub pending: Option<usize>,
    pub use_sep: bool,
}

impl AssembledSequence {
    pub fn n_codebooks(&self) -> usize {
        self.prompt[0].acoustic.len()
    }

    pub fn seps(&self) -> usize {
        if self.use_sep {
            2
        } else {
            0
        }
    }

    pub fn source_offset(&self) -> usize {
        2 * self.prompt.len() + self.seps()
    }

    pub fn len(&self) -> usize {
        self.source_offset() + 2 * self.source.len() + usize::from(self.pending.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All source frames that have a semantic slot, including a pending one.
    pub fn source_semantic_frames(&self) -> usize {
        self.source.len() + usize::from(self.pending.is_some())
    }

    pub fn semantic_pos(&self, region: Region, t: usize) -> usize {
        match region {
            Region::Prompt => 2 * t,
            Region::Source => self.source_offset() + 2 * t,
            Region::Separator => 2 * self.prompt.len(),
        }
    }

    pub fn acoustic_pos(&self, region: Region, t: usize) -> usize {
        self.semantic_pos(region, t) + 1
    }

    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.len());
        let frame = |out: &mut Vec<Position>, region, t, f: &TokenFrame| {
            out.push(Position {
                slot: Slot::Semantic,
                region,
                token: PosToken::Semantic(f.semantic),
                frame: t,
            });
            out.push(Position {
                slot: Slot::Acoustic,
                region,
                token: PosToken::Acoustic(f.acoustic.clone()),
                frame: t,
            });
        };
        for (t, f) in self.prompt.iter().enumerate() {
            frame(&mut out, Region::Prompt, t, f);
        }
        if self.use_sep {
            for slot in [Slot::Semantic, Slot::Acoustic] {
                out.push(Position {
                    slot,
                    region: Region::Separator,
                    token: PosToken::Sep,
                    frame: 0,
                });
            }
        }
        for (t, f) in self.source.iter().enumerate() {
            frame(&mut out, Region::Source, t, f);
        }
        if let Some(s) = self.pending {
            out.push(Position {
                slot: Slot::Semantic,
                region: Region::Source,
                token: PosToken::Semantic(s),
                frame: self.source.len(),
            });
        }
        out
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must have at least one frame".into()));
        }
        let n = cfg.n_codebooks;
        for f in self.prompt.iter().chain(&self.source) {
            if f.acoustic.len() != n {
                return Err(Error::InvalidInput(format!(
                    "frame has {} codebooks, model expects {n}",
                    f.acoustic.len()
                )));
            }
            if f.semantic >= cfg.semantic_vocab {
                return Err(Error::InvalidInput(format!(
                    "semantic token {} outside vocab {}",
                    f.semantic, cfg.semantic_vocab
                )));
            }
            if let Some(&q) = f.acoustic.iter().find(|&&q| q >= cfg.acoustic_vocab) {
                return Err(Error::InvalidInput(format!(
                    "acoustic token {q} outside vocab {}",
                    cfg.acoustic_vocab
                )));
            }
        }
        if self.pending.is_some_and(|s| s >= cfg.semantic_vocab) {
            return Err(Error::InvalidInput("pending semantic token outside vocab".into()));
        }
        if self.len() > cfg.context {
            return Err(Error::ContextOverflow {
                len: self.len(),
                context: cfg.context,
            });
        }
        Ok(())
    }
}

/// Lays out a prompt and source for the model.
pub fn assemble(prompt: &[TokenFrame], source: &[TokenFrame], cfg: &ModelConfig) -> Result<AssembledSequence> {
    if prompt.is_empty() || source.is_empty() {
        return Err(Error::InvalidInput("prompt and source must be non-empty".into()));
    }
    let seq = AssembledSequence {
        prompt: prompt.to_vec(),
        source: source.to_vec(),
        pending: None,
        use_sep: cfg.use_sep,
    };
    seq.check(cfg)?;
    Ok(seq)
}
