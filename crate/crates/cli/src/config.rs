//! Flat `section.key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown or repeated keys are rejected with their line number.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emoanon::pairforge::PairFilterConfig;
use emoanon::streamer::StreamConfig;
use emoanon::svlm::ModelConfig;
use emoanon::trainer::{AblationPlan, TrainConfig};
use emoanon::worldsim::{parse_emotion_list, WorldConfig};
use emoanon::{Error, Result};

/// Utterance counts per corpus split.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSizes {
    pub pretrain: usize,
    pub finetune: usize,
    pub enroll: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        let plan = AblationPlan::default();
        Self {
            pretrain: plan.pretrain_size,
            finetune: plan.finetune_size,
            enroll: plan.enroll_size,
            test: plan.test_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub corpus: CorpusSizes,
    pub pairs: PairFilterConfig,
    pub continuation_fraction: f64,
    /// Vocabulary sizes are copied from `world` by [`RunConfig::resolve`].
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub target_speaker: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = AblationPlan::default();
        Self {
            seed: 0,
            out: PathBuf::from("."),
            world: plan.world,
            corpus: CorpusSizes::default(),
            pairs: plan.filter,
            continuation_fraction: plan.continuation_fraction,
            model: plan.model,
            train: plan.pretrain,
            stream: plan.stream,
            target_speaker: plan.target_speaker,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "world.content_vocab",
    "world.acoustic_vocab",
    "world.n_codebooks",
    "world.n_speakers",
    "world.leakage",
    "world.noise_rate",
    "world.emotion_weights",
    "world.min_frames",
    "world.max_frames",
    "corpus.pretrain",
    "corpus.finetune",
    "corpus.enroll",
    "corpus.test",
    "pairs.q_min",
    "pairs.emotions",
    "pairs.neutral_neutral",
    "pairs.exclude_self_pairs",
    "pairs.continuation_fraction",
    "model.d_model",
    "model.slow_layers",
    "model.fast_layers",
    "model.heads",
    "model.context",
    "model.distill_layers",
    "model.branch",
    "model.aggregation",
    "model.distill_weight",
    "model.teacher_dim",
    "model.teacher_seed",
    "model.use_sep",
    "model.source_only",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.max_steps",
    "stream.frame_ms",
    "stream.chunk",
    "stream.lookahead",
    "eval.target_speaker",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found `{v}`")),
    }
}

fn optional<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let w = &mut self.world;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(v)?,
            "out" => self.out = PathBuf::from(v),
            "world.content_vocab" => w.content_vocab = num(v)?,
            "world.acoustic_vocab" => w.acoustic_vocab = num(v)?,
            "world.n_codebooks" => w.n_codebooks = num(v)?,
            "world.n_speakers" => w.n_speakers = num(v)?,
            "world.leakage" => w.leakage = num(v)?,
            "world.noise_rate" => w.noise_rate = num(v)?,
            "world.emotion_weights" => {
                let ws = v.split(',').map(|x| num::<f64>(x.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
                w.emotion_weights = ws
                    .try_into()
                    .map_err(|_| "expected four comma-separated weights".to_string())?;
            }
            "world.min_frames" => w.min_frames = num(v)?,
            "world.max_frames" => w.max_frames = num(v)?,
            "corpus.pretrain" => self.corpus.pretrain = num(v)?,
            "corpus.finetune" => self.corpus.finetune = num(v)?,
            "corpus.enroll" => self.corpus.enroll = num(v)?,
            "corpus.test" => self.corpus.test = num(v)?,
            "pairs.q_min" => self.pairs.q_min = num(v)?,
            "pairs.emotions" => self.pairs.allowed = parse_emotion_list(v).map_err(|e| e.to_string())?,
            "pairs.neutral_neutral" => self.pairs.neutral_neutral = flag(v)?,
            "pairs.exclude_self_pairs" => self.pairs.exclude_self_pairs = flag(v)?,
            "pairs.continuation_fraction" => self.continuation_fraction = num(v)?,
            "model.d_model" => m.d_model = num(v)?,
            "model.slow_layers" => m.slow_layers = num(v)?,
            "model.fast_layers" => m.fast_layers = num(v)?,
            "model.heads" => m.heads = num(v)?,
            "model.context" => m.context = num(v)?,
            "model.distill_layers" => m.distill_layers = num(v)?,
            "model.branch" => m.branch = v.parse().map_err(|e: Error| e.to_string())?,
            "model.aggregation" => m.aggregation = v.parse().map_err(|e: Error| e.to_string())?,
            "model.distill_weight" => m.distill_weight = num(v)?,
            "model.teacher_dim" => m.teacher_dim = num(v)?,
            "model.teacher_seed" => m.teacher_seed = num(v)?,
            "model.use_sep" => m.use_sep = flag(v)?,
            "model.source_only" => m.source_only = flag(v)?,
            "train.epochs" => self.train.epochs = num(v)?,
            "train.lr" => self.train.lr = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.max_steps" => self.train.max_steps = optional(v)?,
            "stream.frame_ms" => self.stream.frame_ms = num(v)?,
            "stream.chunk" => self.stream.chunk = num(v)?,
            "stream.lookahead" => self.stream.lookahead = num(v)?,
            "eval.target_speaker" => self.target_speaker = optional(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.world;
        let m = &self.model;
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "world.content_vocab" => w.content_vocab.to_string(),
            "world.acoustic_vocab" => w.acoustic_vocab.to_string(),
            "world.n_codebooks" => w.n_codebooks.to_string(),
            "world.n_speakers" => w.n_speakers.to_string(),
            "world.leakage" => w.leakage.to_string(),
            "world.noise_rate" => w.noise_rate.to_string(),
            "world.emotion_weights" => join(w.emotion_weights),
            "world.min_frames" => w.min_frames.to_string(),
            "world.max_frames" => w.max_frames.to_string(),
            "corpus.pretrain" => self.corpus.pretrain.to_string(),
            "corpus.finetune" => self.corpus.finetune.to_string(),
            "corpus.enroll" => self.corpus.enroll.to_string(),
            "corpus.test" => self.corpus.test.to_string(),
            "pairs.q_min" => self.pairs.q_min.to_string(),
            "pairs.emotions" => join(&self.pairs.allowed),
            "pairs.neutral_neutral" => self.pairs.neutral_neutral.to_string(),
            "pairs.exclude_self_pairs" => self.pairs.exclude_self_pairs.to_string(),
            "pairs.continuation_fraction" => self.continuation_fraction.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.slow_layers" => m.slow_layers.to_string(),
            "model.fast_layers" => m.fast_layers.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.context" => m.context.to_string(),
            "model.distill_layers" => m.distill_layers.to_string(),
            "model.branch" => m.branch.to_string(),
            "model.aggregation" => m.aggregation.to_string(),
            "model.distill_weight" => m.distill_weight.to_string(),
            "model.teacher_dim" => m.teacher_dim.to_string(),
            "model.teacher_seed" => m.teacher_seed.to_string(),
            "model.use_sep" => m.use_sep.to_string(),
            "model.source_only" => m.source_only.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.max_steps" => show_opt(&self.train.max_steps),
            "stream.frame_ms" => self.stream.frame_ms.to_string(),
            "stream.chunk" => self.stream.chunk.to_string(),
            "stream.lookahead" => self.stream.lookahead.to_string(),
            "eval.target_speaker" => show_opt(&self.target_speaker),
            _ => return None,
        })
    }

    /// Parses config text over the defaults and resolves it. `path` only
    /// labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(err(format!("key `{key}` set twice")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Propagates derived values and validates every section. The run seed
    /// keys the world and the batch schedule.
    pub fn resolve(&mut self) -> Result<()> {
        self.world.seed = self.seed;
        self.train.seed = self.seed;
        self.model.semantic_vocab = self.world.semantic_vocab();
        self.model.acoustic_vocab = self.world.acoustic_vocab;
        self.model.n_codebooks = self.world.n_codebooks;
        self.world.validate()?;
        self.pairs.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.stream.validate()?;
        if !(self.continuation_fraction > 0.0 && self.continuation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "continuation fraction {} outside (0, 1)",
                self.continuation_fraction
            )));
        }
        if let Some(t) = self.target_speaker {
            if t >= self.world.n_speakers {
                return Err(Error::Config(format!("target speaker {t} outside 0..{}", self.world.n_speakers)));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, re-parseable by
    /// [`RunConfig::parse`]. The run directory is left out so that echoes of
    /// the same run in different places compare equal.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .filter(|&&k| k != "out")
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn plan(&self) -> AblationPlan {
        AblationPlan {
            world: self.world.clone(),
            model: self.model.clone(),
            pretrain_size: self.corpus.pretrain,
            finetune_size: self.corpus.finetune,
            enroll_size: self.corpus.enroll,
            test_size: self.corpus.test,
            pretrain: self.train.clone(),
            finetune: self.train.clone(),
            filter: self.pairs.clone(),
            continuation_fraction: self.continuation_fraction,
            target_speaker: self.target_speaker,
            stream: self.stream.clone(),
        }
    }
}
