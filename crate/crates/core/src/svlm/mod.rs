//! Slow-AR / Fast-AR token language model with boundary [SEP] embeddings,
//! a frame-level emotion distillation head and a frozen teacher embedder.

mod assemble;
mod checkpoint;
mod generate;
mod loss;
mod model;
mod teacher;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::worldsim::WorldConfig;

pub use assemble::{assemble, AssembledSequence, PosToken, Position, Region, Slot};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use generate::{generate, Decoder, Sampling};
pub use loss::{compute_losses, evaluate_losses, example_loss, Example, LossBreakdown};
pub use model::{HiddenStates, SpeechLm, DISTILL_PREFIX};
pub use teacher::teacher_embed;

/// Which hidden stream feeds the distillation head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Acoustic,
    Semantic,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Causal,
    StatPool,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Acoustic => "acoustic",
            Branch::Semantic => "semantic",
            Branch::None => "none",
        }
    }
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Causal => "causal",
            Aggregation::StatPool => "statpool",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acoustic" => Ok(Branch::Acoustic),
            "semantic" => Ok(Branch::Semantic),
            "none" => Ok(Branch::None),
            _ => Err(Error::InvalidInput(format!("unknown distill branch `{s}`"))),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Aggregation::Causal),
            "statpool" => Ok(Aggregation::StatPool),
            _ => Err(Error::InvalidInput(format!("unknown distill aggregation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub semantic_vocab: usize,
    pub acoustic_vocab: usize,
    pub n_codebooks: usize,
    pub d_model: usize,
    pub slow_layers: usize,
    pub fast_layers: usize,
    pub heads: usize,
    /// Maximum number of assembled positions.
    pub context: usize,
    pub distill_layers: usize,
    pub branch: Branch,
    pub aggregation: Aggregation,
    pub distill_weight: f64,
    pub teacher_dim: usize,
    pub teacher_seed: u64,
    pub use_sep: bool,
    /// Restrict next-token losses to source-region frames.
    pub source_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from_world(&WorldConfig::default())
    }
}

impl ModelConfig {
    pub fn from_world(world: &WorldConfig) -> Self {
        Self {
            semantic_vocab: world.semantic_vocab(),
            acoustic_vocab: world.acoustic_vocab,
            n_codebooks: world.n_codebooks,
            d_model: 64,
            slow_layers: 3,
            fast_layers: 2,
            heads: 4,
            context: 64,
            distill_layers: 2,
            branch: Branch::Acoustic,
            aggregation: Aggregation::Causal,
            distill_weight: 0.01,
            teacher_dim: 16,
            teacher_seed: 0x7EAC,
            use_sep: true,
            source_only: true,
        }
    }

    /// Whether the distillation head exists and contributes to the loss.
    pub fn distill_active(&self) -> bool {
        self.branch != Branch::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return bad(format!("distill weight {} must be finite and >= 0", self.distill_weight));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.heads));
        }
        if self.semantic_vocab < 2 || self.acoustic_vocab < 2 || self.n_codebooks == 0 {
            return bad("vocabulary sizes must be at least 2 with at least one codebook".into());
        }
        if self.context < 4 {
            return bad(format!("context {} too short", self.context));
        }
        if self.teacher_dim == 0 || self.distill_layers == 0 {
            return bad("teacher dim and distill layers must be positive".into());
        }
        Ok(())
    }
}
