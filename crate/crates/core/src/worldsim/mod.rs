//! Synthetic labeled token world.
//!
//! Utterances are sequences of content ids with a speaker and an emotion.
//! Encoding turns them into a semantic stream, which only carries emotion
//! through a controllable leakage channel, and `n` acoustic codebook streams
//! that are a keyed hash of content, speaker and emotion. Oracle decoders
//! invert the hash and stand in for the emotion, speaker and content
//! evaluators.

mod corpus;
mod encode;
mod io;
mod oracle;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use corpus::{gen_corpus, Corpus, SplitSpec, SplitWeights};
pub use encode::{acoustic_code, encode, encode_utterance, semantic_token};
pub use io::{
    format_manifest, format_tokens, parse_manifest, parse_tokens, read_tokens, write_manifest,
    write_tokens, ManifestRecord,
};
pub use oracle::{
    acoustic_transcript, decode_semantic, levenshtein, oracle_content_err,
    oracle_content_err_acoustic, oracle_ser, oracle_ser_acoustic, oracle_ser_semantic, oracle_speaker_score, SerResult,
};

/// The four evaluated emotion classes, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Emotion::Angry => "Ang",
            Emotion::Happy => "Hap",
            Emotion::Neutral => "Neu",
            Emotion::Sad => "Sad",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown emotion `{s}`")))
    }
}

/// Parses a comma-separated emotion list such as `angry,happy,neutral,sad`.
pub fn parse_emotion_list(s: &str) -> Result<Vec<Emotion>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub content_vocab: usize,
    /// Ids per acoustic codebook.
    pub acoustic_vocab: usize,
    pub n_codebooks: usize,
    pub n_speakers: usize,
    /// Probability that a frame's semantic token also encodes the emotion.
    pub leakage: f64,
    /// Probability that an acoustic token is replaced by a uniform draw.
    pub noise_rate: f64,
    /// Emotion frequencies for splits drawn with configured weights, in
    /// [`Emotion::ALL`] order.
    pub emotion_weights: [f64; 4],
    pub min_frames: usize,
    pub max_frames: usize,
    /// Key of the acoustic hash.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            content_vocab: 32,
            acoustic_vocab: 64,
            n_codebooks: 4,
            n_speakers: 16,
            leakage: 0.5,
            noise_rate: 0.05,
            emotion_weights: [0.1, 0.7, 0.1, 0.1],
            min_frames: 6,
            max_frames: 10,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Plain content ids followed by one leaked id per (content, emotion).
    pub fn semantic_vocab(&self) -> usize {
        self.content_vocab * (1 + Emotion::COUNT)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.leakage) {
            return bad(format!("leakage {} outside [0, 1]", self.leakage));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        if self.content_vocab < 2 || self.acoustic_vocab < 2 {
            return bad("vocabulary sizes must be at least 2".into());
        }
        if self.n_codebooks == 0 {
            return bad("need at least one codebook".into());
        }
        if self.n_speakers == 0 {
            return bad("speaker count must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range {}..={} is empty or starts at 0",
                self.min_frames, self.max_frames
            ));
        }
        let w = &self.emotion_weights;
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return bad(format!("emotion weights {w:?} must be non-negative with positive sum"));
        }
        Ok(())
    }
}

/// Ground-truth "speech": a content sequence with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub emotion: Emotion,
    pub quality: f64,
    pub frames: Vec<usize>,
    pub seed: u64,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenFrame {
    pub semantic: usize,
    pub acoustic: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Utterance(String),
    Generated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub frames: Vec<TokenFrame>,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn new(frames: Vec<TokenFrame>, provenance: Provenance) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidInput("token sequence must be non-empty".into()));
        };
        let n = first.acoustic.len();
        if frames.iter().any(|f| f.acoustic.len() != n) {
            return Err(Error::InvalidInput(
                "token frames disagree on the number of codebooks".into(),
            ));
        }
        Ok(Self { frames, provenance })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_codebooks(&self) -> usize {
        self.frames[0].acoustic.len()
    }

    pub fn semantic(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.semantic).collect()
    }

    pub fn id(&self) -> Option<&str> {
        match &self.provenance {
            Provenance::Utterance(id) => Some(id),
            Provenance::Generated => None,
        }
    }
}
