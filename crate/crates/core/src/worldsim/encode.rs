use rand::Rng;

use super::{Emotion, Provenance, TokenFrame, TokenSequence, Utterance, WorldConfig};
use crate::error::{Error, Result};
use crate::seed::{derived_rng, hash_words};

const LEAK_SALT: u64 = 0x1EA4;
const NOISE_SALT: u64 = 0x4015E;

/// Semantic id of a content id, optionally colored by the emotion.
pub fn semantic_token(config: &WorldConfig, content: usize, leaked: Option<Emotion>) -> usize {
    match leaked {
        None => content,
        Some(e) => config.content_vocab + content * Emotion::COUNT + e.index(),
    }
}

/// Noise-free id of codebook `k` for one (content, speaker, emotion) cell.
pub fn acoustic_code(
    config: &WorldConfig,
    content: usize,
    speaker: usize,
    emotion: Emotion,
    k: usize,
) -> usize {
    let h = hash_words(
        config.seed,
        &[content as u64, speaker as u64, emotion.index() as u64, k as u64],
    );
    (h % config.acoustic_vocab as u64) as usize
}

/// Encodes an utterance. Leakage draws depend only on the utterance seed and
/// `seed`, never on the speaker, so the semantic stream is speaker-free.
pub fn encode(utt: &Utterance, config: &WorldConfig, seed: u64) -> Result<TokenSequence> {
    let frames = encode_utterance(utt, config, seed)?;
    TokenSequence::new(frames, Provenance::Utterance(utt.id.clone()))
}

pub fn encode_utterance(utt: &Utterance, config: &WorldConfig, seed: u64) -> Result<Vec<TokenFrame>> {
    if utt.frames.is_empty() {
        return Err(Error::InvalidInput(format!("utterance {} has no frames", utt.id)));
    }
    if let Some(&c) = utt.frames.iter().find(|&&c| c >= config.content_vocab) {
        return Err(Error::InvalidInput(format!(
            "utterance {} has content id {c} outside vocab {}",
            utt.id, config.content_vocab
        )));
    }
    if utt.speaker >= config.n_speakers {
        return Err(Error::InvalidInput(format!(
            "utterance {} has speaker {} outside 0..{}",
            utt.id, utt.speaker, config.n_speakers
        )));
    }
    let base = hash_words(seed, &[utt.seed]);
    let mut leak = derived_rng(base, LEAK_SALT);
    let mut noise = derived_rng(hash_words(base, &[utt.speaker as u64]), NOISE_SALT);
    Ok(utt
        .frames
        .iter()
        .map(|&c| {
            let leaked = leak.random_bool(config.leakage).then_some(utt.emotion);
            let acoustic = (0..config.n_codebooks)
                .map(|k| {
                    let clean = acoustic_code(config, c, utt.speaker, utt.emotion, k);
                    if noise.random_bool(config.noise_rate) {
                        noise.random_range(0..config.acoustic_vocab)
                    } else {
                        clean
                    }
                })
                .collect();
            TokenFrame {
                semantic: semantic_token(config, c, leaked),
                acoustic,
            }
        })
        .collect())
}
