//! Ground-truth evaluators that invert the world hash.

use super::{acoustic_code, Emotion, TokenFrame, Utterance, WorldConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SerResult {
    pub label: Emotion,
    /// Vote shares per class in [`Emotion::ALL`] order; they sum to 1.
    pub scores: [f64; 4],
    /// Frames that cast no vote.
    pub abstained: usize,
}

/// Splits a semantic id into its content id and leaked emotion, if any.
/// Ids outside the semantic vocabulary decode to `None`.
pub fn decode_semantic(config: &WorldConfig, token: usize) -> Option<(usize, Option<Emotion>)> {
    let c = config.content_vocab;
    if token < c {
        Some((token, None))
    } else if token < config.semantic_vocab() {
        let t = token - c;
        Some((t / Emotion::COUNT, Emotion::from_index(t % Emotion::COUNT)))
    } else {
        None
    }
}

fn matches(config: &WorldConfig, frame: &TokenFrame, c: usize, s: usize, e: Emotion) -> usize {
    frame
        .acoustic
        .iter()
        .enumerate()
        .filter(|&(k, &q)| k < config.n_codebooks && q == acoustic_code(config, c, s, e, k))
        .count()
}

/// Votes from acoustic matches alone; `None` when nothing matches.
fn acoustic_votes(config: &WorldConfig, frame: &TokenFrame, c: usize) -> Option<[f64; 4]> {
    let mut best = 0;
    let mut hit = [false; 4];
    for s in 0..config.n_speakers {
        for e in Emotion::ALL {
            let m = matches(config, frame, c, s, e);
            if m > best {
                best = m;
                hit = [false; 4];
            }
            if m == best && m > 0 {
                hit[e.index()] = true;
            }
        }
    }
    if best == 0 {
        return None;
    }
    let share = 1.0 / hit.iter().filter(|&&h| h).count() as f64;
    let mut votes = [0.0; 4];
    for (v, h) in votes.iter_mut().zip(hit) {
        if h {
            *v = share;
        }
    }
    Some(votes)
}

fn frame_votes(config: &WorldConfig, frame: &TokenFrame) -> Option<[f64; 4]> {
    let (c, leaked) = decode_semantic(config, frame.semantic)?;
    acoustic_votes(config, frame, c).or_else(|| {
        let mut votes = [0.0; 4];
        votes[leaked?.index()] = 1.0;
        Some(votes)
    })
}

fn tally(frames: &[TokenFrame], vote: impl Fn(&TokenFrame) -> Option<[f64; 4]>) -> SerResult {
    let mut total = [0.0; 4];
    let mut abstained = 0;
    for f in frames {
        match vote(f) {
            Some(v) => total.iter_mut().zip(v).for_each(|(t, x)| *t += x),
            None => abstained += 1,
        }
    }
    let sum: f64 = total.iter().sum();
    let scores = if sum > 0.0 {
        total.map(|t| t / sum)
    } else {
        [0.25; 4]
    };
    let mut label = 0;
    for i in 1..4 {
        if scores[i] > scores[label] {
            label = i;
        }
    }
    SerResult {
        label: Emotion::ALL[label],
        scores,
        abstained,
    }
}

/// Per-frame inverse lookup of the acoustic hash, falling back to the
/// semantic leakage cell when no codebook matches, then a majority vote.
/// Ties go to the earliest class in [`Emotion::ALL`].
pub fn oracle_ser(frames: &[TokenFrame], config: &WorldConfig) -> SerResult {
    tally(frames, |f| frame_votes(config, f))
}

/// Emotion read from the acoustic codebooks alone, with no fallback to
/// semantic leakage. Used for generated outputs, whose semantic stream is a
/// copy of the source.
pub fn oracle_ser_acoustic(frames: &[TokenFrame], config: &WorldConfig) -> SerResult {
    tally(frames, |f| {
        let (c, _) = decode_semantic(config, f.semantic)?;
        acoustic_votes(config, f, c)
    })
}

/// Emotion read from semantic leakage alone.
pub fn oracle_ser_semantic(frames: &[TokenFrame], config: &WorldConfig) -> SerResult {
    tally(frames, |f| {
        let (_, leaked) = decode_semantic(config, f.semantic)?;
        let e = leaked?;
        let mut v = [0.0; 4];
        v[e.index()] = 1.0;
        Some(v)
    })
}

/// Mean over frames of the best per-emotion fraction of codebooks that agree
/// with `claimed`. Frames with an unknown semantic id score 0.
pub fn oracle_speaker_score(frames: &[TokenFrame], claimed: usize, config: &WorldConfig) -> f64 {
    if frames.is_empty() || config.n_codebooks == 0 {
        return 0.0;
    }
    let n = config.n_codebooks as f64;
    let total: f64 = frames
        .iter()
        .map(|f| match decode_semantic(config, f.semantic) {
            Some((c, _)) => Emotion::ALL
                .iter()
                .map(|&e| matches(config, f, c, claimed, e))
                .max()
                .unwrap_or(0) as f64
                / n,
            None => 0.0,
        })
        .sum();
    total / frames.len() as f64
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn error_rate(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    (levenshtein(reference, hypothesis) as f64 / reference.len() as f64).min(1.0)
}

/// Content error of the semantic stream, ignoring leakage coloring.
/// Unknown semantic ids decode to an impossible content id. Clamped to 1.
pub fn oracle_content_err(reference: &Utterance, hypothesis: &[TokenFrame], config: &WorldConfig) -> f64 {
    let decoded: Vec<usize> = hypothesis
        .iter()
        .map(|f| decode_semantic(config, f.semantic).map_or(usize::MAX, |(c, _)| c))
        .collect();
    error_rate(&reference.frames, &decoded)
}

/// Content ids recovered from the acoustic codebooks alone: per frame, the
/// content whose best (speaker, emotion) cell matches the most codebooks.
pub fn acoustic_transcript(frames: &[TokenFrame], config: &WorldConfig) -> Vec<usize> {
    frames
        .iter()
        .map(|f| {
            let mut best = (0, usize::MAX);
            for c in 0..config.content_vocab {
                for s in 0..config.n_speakers {
                    for e in Emotion::ALL {
                        let m = matches(config, f, c, s, e);
                        if m > best.0 {
                            best = (m, c);
                        }
                    }
                }
            }
            best.1
        })
        .collect()
}

/// Content error of the acoustic stream. Used for generated outputs, whose
/// semantic stream is copied from the source and so carries no error signal.
pub fn oracle_content_err_acoustic(
    reference: &Utterance,
    hypothesis: &[TokenFrame],
    config: &WorldConfig,
) -> f64 {
    error_rate(&reference.frames, &acoustic_transcript(hypothesis, config))
}
