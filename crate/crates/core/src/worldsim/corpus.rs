use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{Emotion, ManifestRecord, Utterance, WorldConfig};
use crate::error::{Error, Result};
use crate::seed::{derived_rng, hash_str, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitWeights {
    /// Draw emotions with `WorldConfig::emotion_weights`.
    Configured,
    /// Draw all four emotions with equal probability.
    Balanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub name: String,
    pub size: usize,
    pub weights: SplitWeights,
}

impl SplitSpec {
    pub fn new(name: &str, size: usize, weights: SplitWeights) -> Self {
        Self {
            name: name.to_string(),
            size,
            weights,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Utterances whose id carries the `<split>-` prefix.
    pub fn split(&self, name: &str) -> Vec<&Utterance> {
        let prefix = format!("{name}-");
        self.utterances.iter().filter(|u| u.id.starts_with(&prefix)).collect()
    }

    pub fn records_of(&self, name: &str) -> Vec<ManifestRecord> {
        let prefix = format!("{name}-");
        self.records.iter().filter(|r| r.id.starts_with(&prefix)).cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn by_id(&self) -> BTreeMap<&str, &Utterance> {
        self.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
    }
}

/// Regenerates the content frames of an utterance from its seed.
pub(crate) fn content_frames(config: &WorldConfig, seed: u64, len: usize) -> Vec<usize> {
    let mut r = derived_rng(seed, 0xC0);
    (0..len).map(|_| r.random_range(0..config.content_vocab)).collect()
}

/// Generates a deterministic corpus. Speakers are assigned round-robin;
/// within each split, every speaker that appears has at least one neutral
/// utterance (the first one is relabeled if the draw produced none).
pub fn gen_corpus(config: &WorldConfig, splits: &[SplitSpec], seed: u64) -> Result<Corpus> {
    config.validate()?;
    if splits.iter().any(|s| s.size == 0) {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    let uniform = [1.0; 4];
    let mut records = Vec::new();
    let mut utterances = Vec::new();
    for spec in splits {
        let weights = match spec.weights {
            SplitWeights::Configured => &config.emotion_weights,
            SplitWeights::Balanced => &uniform,
        };
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("emotion weights: {e}")))?;
        let mut r = rng(hash_str(seed, &spec.name));
        let start = utterances.len();
        for i in 0..spec.size {
            let speaker = i % config.n_speakers;
            let emotion = Emotion::ALL[dist.sample(&mut r)];
            let quality: f64 = r.random();
            let len = r.random_range(config.min_frames..=config.max_frames);
            let useed: u64 = r.random();
            utterances.push(Utterance {
                id: format!("{}-{:05}", spec.name, i),
                speaker,
                emotion,
                quality,
                frames: content_frames(config, useed, len),
                seed: useed,
            });
        }
        let split = &mut utterances[start..];
        for s in 0..config.n_speakers {
            let has_neutral = split.iter().any(|u| u.speaker == s && u.emotion == Emotion::Neutral);
            if !has_neutral {
                if let Some(first) = split.iter_mut().find(|u| u.speaker == s) {
                    first.emotion = Emotion::Neutral;
                }
            }
        }
    }
    for u in &utterances {
        records.push(ManifestRecord::from_utterance(u));
    }
    Ok(Corpus {
        records,
        utterances,
    })
}
