use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::AnonymizedOutput;
use crate::error::{Error, Result};
use crate::worldsim::{oracle_speaker_score, TokenFrame, WorldConfig};

#[derive(Clone, Copy, Debug)]
pub enum Attack<'a> {
    /// Knows the original token statistics of every speaker.
    Lazy,
    /// Fits one acoustic-histogram centroid per speaker on anonymized
    /// enrollment outputs.
    Semi { enrollment: &'a [AnonymizedOutput] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: String,
    pub claimed: usize,
    pub truth: usize,
    pub score: f64,
}

impl Trial {
    pub fn is_genuine(&self) -> bool {
        self.claimed == self.truth
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScorePools {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScorePools {
    pub fn from_trials(trials: &[Trial]) -> Self {
        let mut p = Self::default();
        for t in trials {
            if t.is_genuine() {
                p.genuine.push(t.score);
            } else {
                p.impostor.push(t.score);
            }
        }
        p
    }
}

/// Concatenated per-codebook token histograms, L2-normalized.
fn histogram(frames: &[TokenFrame], config: &WorldConfig) -> Vec<f64> {
    let v = config.acoustic_vocab;
    let mut h = vec![0.0; v * config.n_codebooks];
    for f in frames {
        for (k, &q) in f.acoustic.iter().enumerate().take(config.n_codebooks) {
            if q < v {
                h[k * v + q] += 1.0;
            }
        }
    }
    normalize(&mut h);
    h
}

fn normalize(h: &mut [f64]) {
    let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        h.iter_mut().for_each(|x| *x /= norm);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // Both sides are unit length or zero.
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn speakers(outputs: &[AnonymizedOutput]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = outputs.iter().map(|o| o.source.speaker).collect();
    if set.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "speaker verification needs at least 2 source speakers, got {}",
            set.len()
        )));
    }
    Ok(set.into_iter().collect())
}

type Scorer<'s> = Box<dyn Fn(&AnonymizedOutput, usize) -> f64 + 's>;

/// Scores every output against every represented speaker.
pub fn attack_sim(outputs: &[AnonymizedOutput], attack: &Attack<'_>, config: &WorldConfig) -> Result<Vec<Trial>> {
    let claims = speakers(outputs)?;
    let score: Scorer<'_> = match attack {
        Attack::Lazy => Box::new(|o, c| oracle_speaker_score(&o.frames, c, config)),
        Attack::Semi { enrollment } => {
            let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for o in enrollment.iter() {
                let h = histogram(&o.frames, config);
                let e = sums.entry(o.source.speaker).or_insert_with(|| (vec![0.0; h.len()], 0));
                e.0.iter_mut().zip(&h).for_each(|(s, x)| *s += x);
                e.1 += 1;
            }
            if let Some(c) = claims.iter().find(|c| !sums.contains_key(c)) {
                return Err(Error::InvalidInput(format!("no enrollment outputs for speaker {c}")));
            }
            let centroids: BTreeMap<usize, Vec<f64>> = sums
                .into_iter()
                .map(|(s, (mut sum, _))| {
                    normalize(&mut sum);
                    (s, sum)
                })
                .collect();
            Box::new(move |o, c| cosine(&histogram(&o.frames, config), &centroids[&c]))
        }
    };
    let mut trials = Vec::with_capacity(outputs.len() * claims.len());
    for o in outputs {
        for &c in &claims {
            trials.push(Trial {
                id: format!("{}:{c}", o.id),
                claimed: c,
                truth: o.source.speaker,
                score: score(o, c),
            });
        }
    }
    Ok(trials)
}

pub const SCORE_HEADER: &str = "trial_id,claimed_speaker,true_speaker,score";

pub fn format_scores(trials: &[Trial]) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for t in trials {
        writeln!(out, "{},{},{},{}", t.id, t.claimed, t.truth, t.score).expect("string write");
    }
    out
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORE_HEADER) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header `{SCORE_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Parse {
                path: path.into(),
                line: i + 2,
                msg: format!("bad score line `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Trial {
                id: f[0].to_string(),
                claimed: f[1].parse().map_err(|_| bad())?,
                truth: f[2].parse().map_err(|_| bad())?,
                score: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, trials: &[Trial]) -> Result<()> {
    fs::write(path, format_scores(trials)).map_err(|e| Error::io(path, e))
}
