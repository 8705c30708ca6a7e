use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Emotion, TokenFrame, Utterance, WorldConfig};
use crate::error::{Error, Result};

/// One manifest line. The utterance content is regenerated from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker: usize,
    pub emotion: Emotion,
    pub quality: f64,
    pub num_frames: usize,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            speaker: u.speaker,
            emotion: u.emotion,
            quality: u.quality,
            num_frames: u.frames.len(),
            seed: u.seed,
        }
    }

    pub fn to_utterance(&self, config: &WorldConfig) -> Utterance {
        Utterance {
            id: self.id.clone(),
            speaker: self.speaker,
            emotion: self.emotion,
            quality: self.quality,
            frames: super::corpus::content_frames(config, self.seed, self.num_frames),
            seed: self.seed,
        }
    }
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id, r.speaker, r.emotion, r.quality, r.num_frames, r.seed
        );
    }
    out
}

fn field<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} `{s}`"))
}

fn parse_record(line: &str) -> std::result::Result<ManifestRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, found {}", f.len()));
    }
    let quality: f64 = field(f[3], "quality")?;
    if !(0.0..=1.0).contains(&quality) {
        return Err(format!("quality {quality} outside [0, 1]"));
    }
    let num_frames: usize = field(f[4], "frame count")?;
    if num_frames == 0 {
        return Err("frame count must be at least 1".into());
    }
    Ok(ManifestRecord {
        id: f[0].to_string(),
        speaker: field(f[1], "speaker")?,
        emotion: f[2].parse().map_err(|_| format!("unknown emotion `{}`", f[2]))?,
        quality,
        num_frames,
        seed: field(f[5], "seed")?,
    })
}

/// Parses manifest text; `path` only labels errors. Blank lines are skipped.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

pub fn format_tokens<'a>(seqs: impl IntoIterator<Item = (&'a str, &'a [TokenFrame])>) -> String {
    let mut out = String::new();
    for (id, frames) in seqs {
        for (t, f) in frames.iter().enumerate() {
            let ac: Vec<String> = f.acoustic.iter().map(|q| q.to_string()).collect();
            let _ = writeln!(out, "{id}\t{t}\t{}\t{}", f.semantic, ac.join(","));
        }
    }
    out
}

/// Groups token lines by utterance id, keeping first-appearance order.
/// Frame indices must be contiguous from 0 within each utterance.
pub fn parse_tokens(text: &str, path: &Path) -> Result<Vec<(String, Vec<TokenFrame>)>> {
    let mut out: Vec<(String, Vec<TokenFrame>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let t: usize = field(f[1], "frame index").map_err(err)?;
        let semantic: usize = field(f[2], "semantic token").map_err(err)?;
        let acoustic = f[3]
            .split(',')
            .map(|q| field::<usize>(q, "acoustic token"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(err)?;
        if out.last().is_none_or(|(id, _)| id != f[0]) {
            if out.iter().any(|(id, _)| id == f[0]) {
                return Err(err(format!("utterance `{}` is not contiguous", f[0])));
            }
            out.push((f[0].to_string(), Vec::new()));
        }
        let frames = &mut out.last_mut().expect("pushed above").1;
        if t != frames.len() {
            return Err(err(format!("expected frame index {}, found {t}", frames.len())));
        }
        if frames.first().is_some_and(|f0| f0.acoustic.len() != acoustic.len()) {
            return Err(err("codebook count differs from earlier frames".into()));
        }
        frames.push(TokenFrame { semantic, acoustic });
    }
    Ok(out)
}

pub fn write_tokens<'a>(
    path: &Path,
    seqs: impl IntoIterator<Item = (&'a str, &'a [TokenFrame])>,
) -> Result<()> {
    fs::write(path, format_tokens(seqs)).map_err(|e| Error::io(path, e))
}

pub fn read_tokens(path: &Path) -> Result<Vec<(String, Vec<TokenFrame>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text, path)
}
