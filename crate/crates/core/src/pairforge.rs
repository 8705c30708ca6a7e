//! Training-pair construction from a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::worldsim::{parse_manifest, Emotion, ManifestRecord};

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFilterConfig {
    pub q_min: f64,
    pub allowed: Vec<Emotion>,
    pub neutral_neutral: bool,
    /// Drop pairs whose prompt and source are the same utterance.
    pub exclude_self_pairs: bool,
}

impl Default for PairFilterConfig {
    fn default() -> Self {
        Self {
            q_min: 0.5,
            allowed: Emotion::ALL.to_vec(),
            neutral_neutral: true,
            exclude_self_pairs: true,
        }
    }
}

impl PairFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q_min) {
            return Err(Error::Config(format!("q_min {} outside [0, 1]", self.q_min)));
        }
        if self.allowed.is_empty() {
            return Err(Error::Config("allowed emotion set is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairPolicy {
    NeutralEmotion,
    NeutralNeutral,
    Continuation,
}

impl PairPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            PairPolicy::NeutralEmotion => "neutral-emotion",
            PairPolicy::NeutralNeutral => "neutral-neutral",
            PairPolicy::Continuation => "continuation",
        }
    }
}

impl fmt::Display for PairPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral-emotion" => Ok(PairPolicy::NeutralEmotion),
            "neutral-neutral" => Ok(PairPolicy::NeutralNeutral),
            "continuation" => Ok(PairPolicy::Continuation),
            _ => Err(Error::InvalidInput(format!("unknown pair policy `{s}`"))),
        }
    }
}

/// A whole utterance or a half-open frame range of one, written `id` or
/// `id@start:end` in pair files.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Segment {
    pub id: String,
    pub range: Option<(usize, usize)>,
}

impl Segment {
    pub fn whole(id: &str) -> Self {
        Self {
            id: id.to_string(),
            range: None,
        }
    }

    pub fn span(id: &str, start: usize, end: usize) -> Self {
        Self {
            id: id.to_string(),
            range: Some((start, end)),
        }
    }

    /// Selects this segment's frames out of the full utterance.
    pub fn slice<'a, T>(&self, full: &'a [T]) -> Result<&'a [T]> {
        match self.range {
            None => Ok(full),
            Some((a, b)) if a < b && b <= full.len() => Ok(&full[a..b]),
            Some(_) => Err(Error::InvalidInput(format!(
                "segment {self} out of range for {} frames",
                full.len()
            ))),
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.range {
            None => f.write_str(&self.id),
            Some((a, b)) => write!(f, "{}@{a}:{b}", self.id),
        }
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some((id, r)) = s.rsplit_once('@') else {
            return Ok(Segment::whole(s));
        };
        let bad = || Error::InvalidInput(format!("bad segment `{s}`"));
        let (a, b) = r.split_once(':').ok_or_else(bad)?;
        let a: usize = a.parse().map_err(|_| bad())?;
        let b: usize = b.parse().map_err(|_| bad())?;
        if a >= b || id.is_empty() {
            return Err(bad());
        }
        Ok(Segment::span(id, a, b))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingPair {
    pub prompt: Segment,
    pub source: Segment,
    pub policy: PairPolicy,
}

/// Keeps records with quality at least `q_min` and an allowed emotion.
pub fn filter(records: &[ManifestRecord], cfg: &PairFilterConfig) -> Vec<ManifestRecord> {
    records
        .iter()
        .filter(|r| r.quality >= cfg.q_min && cfg.allowed.contains(&r.emotion))
        .cloned()
        .collect()
}

/// Same-speaker many-to-many pairing: every neutral utterance prompts every
/// emotional utterance and, optionally, every neutral one. Sorted by
/// (prompt, source).
pub fn build_pairs(records: &[ManifestRecord], cfg: &PairFilterConfig) -> Vec<TrainingPair> {
    let mut by_speaker: BTreeMap<usize, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in records {
        by_speaker.entry(r.speaker).or_default().push(r);
    }
    let mut pairs = Vec::new();
    for recs in by_speaker.values() {
        let neutral: Vec<_> = recs.iter().filter(|r| r.emotion == Emotion::Neutral).collect();
        for p in &neutral {
            for s in recs {
                let policy = if s.emotion == Emotion::Neutral {
                    if !cfg.neutral_neutral || (cfg.exclude_self_pairs && s.id == p.id) {
                        continue;
                    }
                    PairPolicy::NeutralNeutral
                } else {
                    PairPolicy::NeutralEmotion
                };
                pairs.push(TrainingPair {
                    prompt: Segment::whole(&p.id),
                    source: Segment::whole(&s.id),
                    policy,
                });
            }
        }
    }
    pairs.sort();
    pairs
}

/// Frames in the prompt half: `ceil(fraction * len)`, kept within `1..len`.
pub fn prompt_length(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).ceil() as usize).clamp(1, len - 1)
}

/// Splits each utterance into a prompt prefix and a source suffix.
/// Utterances shorter than two frames are skipped with a warning.
pub fn continuation_pairs(records: &[ManifestRecord], fraction: f64) -> Result<Vec<TrainingPair>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        if r.num_frames < 2 {
            log::warn!("skipping {}: {} frame(s) cannot be split", r.id, r.num_frames);
            continue;
        }
        let k = prompt_length(r.num_frames, fraction);
        pairs.push(TrainingPair {
            prompt: Segment::span(&r.id, 0, k),
            source: Segment::span(&r.id, k, r.num_frames),
            policy: PairPolicy::Continuation,
        });
    }
    pairs.sort();
    Ok(pairs)
}

pub fn format_pairs(pairs: &[TrainingPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.prompt, p.source, p.policy))
        .collect()
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = || -> Result<TrainingPair> {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::InvalidInput(format!(
                    "expected 3 tab-separated fields, found {}",
                    f.len()
                )));
            }
            Ok(TrainingPair {
                prompt: f[0].parse()?,
                source: f[1].parse()?,
                policy: f[2].parse()?,
            })
        };
        out.push(parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

/// Checks a pair against its policy. `lookup` resolves utterance ids.
pub fn check_pair<'a>(
    pair: &TrainingPair,
    lookup: impl Fn(&str) -> Option<&'a ManifestRecord>,
) -> Result<()> {
    let fail = |m: &str| Err(Error::InvalidInput(format!("pair {} -> {}: {m}", pair.prompt, pair.source)));
    let (Some(p), Some(s)) = (lookup(&pair.prompt.id), lookup(&pair.source.id)) else {
        return fail("unknown utterance");
    };
    match pair.policy {
        PairPolicy::NeutralEmotion | PairPolicy::NeutralNeutral => {
            if p.speaker != s.speaker {
                return fail("speakers differ");
            }
            if p.emotion != Emotion::Neutral {
                return fail("prompt is not neutral");
            }
            let want_neutral = pair.policy == PairPolicy::NeutralNeutral;
            if (s.emotion == Emotion::Neutral) != want_neutral {
                return fail("source emotion does not match policy");
            }
        }
        PairPolicy::Continuation => {
            let (Some((a, b)), Some((c, d))) = (pair.prompt.range, pair.source.range) else {
                return fail("continuation halves need frame ranges");
            };
            if p.id != s.id || a != 0 || b != c || d != p.num_frames {
                return fail("halves are not contiguous parts of one utterance");
            }
        }
    }
    Ok(())
}
