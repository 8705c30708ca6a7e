//! Seeded training loop with exact resume, plus the ablation grid.

mod ablation;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use emoanon_numerics::{AdamConfig, NumericsError, OptimizerState};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pairforge::TrainingPair;
use crate::seed::{hash_words, rng};
use crate::svlm::{assemble, compute_losses, Checkpoint, Example, LossBreakdown, ModelConfig, SpeechLm};
use crate::worldsim::{ManifestRecord, TokenFrame};

pub use ablation::{anonymize, finetune_pairs, run_ablation, AblationId, AblationPlan, AblationRun, AblationToggles};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps, applied after the epoch budget.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> u64 {
        n_examples.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_examples: usize) -> u64 {
        let budget = self.epochs as u64 * self.steps_per_epoch(n_examples);
        self.max_steps.map_or(budget, |m| m.min(budget))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Resolves pairs into assembled examples. The label of each example is the
/// emotion of its source utterance.
pub fn build_examples(
    pairs: &[TrainingPair],
    tokens: &BTreeMap<String, Vec<TokenFrame>>,
    records: &[ManifestRecord],
    cfg: &ModelConfig,
) -> Result<Vec<Example>> {
    let emotion: BTreeMap<&str, _> = records.iter().map(|r| (r.id.as_str(), r.emotion)).collect();
    let frames = |id: &str| {
        tokens
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("no tokens for utterance `{id}`")))
    };
    pairs
        .iter()
        .map(|p| {
            let prompt = p.prompt.slice(frames(&p.prompt.id)?)?;
            let source = p.source.slice(frames(&p.source.id)?)?;
            let &emotion = emotion
                .get(p.source.id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("no manifest record for `{}`", p.source.id)))?;
            Ok(Example {
                seq: assemble(prompt, source, cfg)?,
                emotion,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "step,L_slowAR,L_fastAR,L_emo,total";

pub fn format_loss_log(rows: &[LogRow]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        writeln!(out, "{},{},{},{},{}", r.step, l.slow, l.fast, l.emo, l.total).expect("string write");
    }
    out
}

pub fn parse_loss_log(text: &str, path: &Path) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header `{LOSS_LOG_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: &str| Error::Parse {
                path: path.into(),
                line: i + 2,
                msg: msg.into(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let v = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad("bad step"))?,
                loss: LossBreakdown {
                    slow: v(f[1])?,
                    fast: v(f[2])?,
                    emo: v(f[3])?,
                    total: v(f[4])?,
                },
            })
        })
        .collect()
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    fs::write(path, format_loss_log(rows)).map_err(|e| Error::io(path, e))
}

/// A model, its optimizer and a step counter. The batch for step `s` is a
/// pure function of `(seed, s)`, so a trainer rebuilt from a checkpoint
/// continues exactly where the original left off.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SpeechLm,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(model: SpeechLm, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params, config.adam());
        Ok(Self {
            model,
            optimizer,
            config,
            log: Vec::new(),
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    /// The checkpoint must carry optimizer state and the same seed and batch size.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        for (key, want) in [
            ("train.seed", config.seed.to_string()),
            ("train.batch_size", config.batch_size.to_string()),
        ] {
            match ck.meta.get(key) {
                Some(v) if *v == want => {}
                v => {
                    return Err(Error::Checkpoint(format!(
                        "`{key}` is {v:?}, run configuration has {want}"
                    )))
                }
            }
        }
        Ok(Self {
            model: ck.model,
            optimizer,
            config,
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.optimizer = Some(self.optimizer.clone());
        ck.meta.insert("train.seed".into(), self.config.seed.to_string());
        ck.meta.insert("train.batch_size".into(), self.config.batch_size.to_string());
        ck.meta.insert("train.epochs".into(), self.config.epochs.to_string());
        ck.meta.insert("train.lr".into(), self.config.lr.to_string());
        ck
    }

    /// Indices of the examples in the batch for global step `step`.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per_epoch = self.config.steps_per_epoch(n);
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(hash_words(self.config.seed, &[epoch])));
        let b = self.config.batch_size;
        order[k * b..((k + 1) * b).min(n)].to_vec()
    }

    /// One optimizer step on the scheduled batch.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<LossBreakdown> {
        let step = self.step();
        let batch: Vec<Example> = self
            .batch_indices(examples.len(), step)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let non_finite = |e: Error| match e {
            Error::Numerics(NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. }) => {
                Error::NonFiniteLoss { step }
            }
            e => e,
        };
        let (loss, grads) = compute_losses(&self.model, &batch).map_err(non_finite)?;
        if ![loss.slow, loss.fast, loss.emo, loss.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        self.optimizer
            .step(&mut self.model.params, &grads)
            .map_err(|e| non_finite(e.into()))?;
        self.log.push(LogRow { step, loss });
        Ok(loss)
    }

    /// Trains until the configured budget is used up.
    pub fn run(&mut self, examples: &[Example]) -> Result<()> {
        let total = self.config.total_steps(examples.len());
        self.run_until(examples, total)
    }

    pub fn run_until(&mut self, examples: &[Example], until: u64) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("no training examples".into()));
        }
        while self.step() < until {
            let loss = self.train_step(examples)?;
            if self.step().is_multiple_of(100) {
                log::debug!("step {} total {:.4}", self.step(), loss.total);
            }
        }
        Ok(())
    }
}

/// Trains a fresh or warm-started model for the full budget.
pub fn train(model: SpeechLm, examples: &[Example], config: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run(examples)?;
    Ok(t)
}
