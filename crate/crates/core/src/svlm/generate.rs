use emoanon_numerics::{Graph, NodeId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::assemble::{AssembledSequence, Region};
use super::model::Ctx;
use super::SpeechLm;
use crate::error::{Error, Result};
use crate::seed::rng;
use crate::worldsim::TokenFrame;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Sampling {
    #[default]
    Greedy,
    TopK {
        k: usize,
        temperature: f64,
        seed: u64,
    },
}

impl Sampling {
    pub fn top_k(seed: u64) -> Self {
        Sampling::TopK {
            k: 4,
            temperature: 1.0,
            seed,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn pick(row: &[f64], sampling: &Sampling, r: &mut Option<ChaCha8Rng>) -> usize {
    match (sampling, r) {
        (Sampling::TopK { k, temperature, .. }, Some(r)) => {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            // Stable sort keeps equal logits in id order.
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate((*k).max(1));
            let max = row[idx[0]];
            let w: Vec<f64> = idx.iter().map(|&i| ((row[i] - max) / temperature).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = r.random::<f64>() * total;
            for (&i, &wi) in idx.iter().zip(&w) {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            *idx.last().expect("non-empty")
        }
        _ => argmax(row),
    }
}

/// Frame-by-frame decoder. The prompt (and separators) are fixed at
/// construction; each [`Decoder::step`] consumes one source semantic token
/// and emits one frame. The distillation head is never touched.
pub struct Decoder<'m> {
    model: &'m SpeechLm,
    ctx: Ctx<'m>,
    seq: AssembledSequence,
    sampling: Sampling,
    rng: Option<ChaCha8Rng>,
    kernels: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m SpeechLm, prompt: &[TokenFrame], sampling: Sampling) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must have at least one frame".into()));
        }
        let seq = AssembledSequence {
            prompt: prompt.to_vec(),
            source: Vec::new(),
            pending: None,
            use_sep: model.config.use_sep,
        };
        seq.check(&model.config)?;
        let rng = match sampling {
            Sampling::TopK { seed, .. } => Some(rng(seed)),
            Sampling::Greedy => None,
        };
        Ok(Self {
            model,
            ctx: model.ctx()?,
            seq,
            sampling,
            rng,
            kernels: 0,
        })
    }

    pub fn model(&self) -> &SpeechLm {
        self.model
    }

    pub fn sequence(&self) -> &AssembledSequence {
        &self.seq
    }

    /// Frames emitted so far.
    pub fn emitted(&self) -> &[TokenFrame] {
        &self.seq.source
    }

    /// Non-leaf graph nodes evaluated on the decode path so far.
    pub fn kernel_count(&self) -> usize {
        self.kernels
    }

    /// Positions the next step would need.
    pub fn next_len(&self) -> usize {
        self.seq.len() + 2
    }

    pub fn step(&mut self, semantic: usize) -> Result<TokenFrame> {
        let cfg = &self.model.config;
        if self.next_len() > cfg.context {
            return Err(Error::ContextOverflow {
                len: self.next_len(),
                context: cfg.context,
            });
        }
        self.seq.pending = Some(semantic);
        let out = self.decode_pending();
        self.seq.pending = None;
        let frame = TokenFrame {
            semantic,
            acoustic: out?,
        };
        self.seq.source.push(frame.clone());
        Ok(frame)
    }

    fn decode_pending(&mut self) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let h = self.ctx.slow_forward(&mut g, &self.seq)?;
        let row = self.seq.semantic_pos(Region::Source, self.seq.source.len());
        let logits = self.ctx.q1_logits(&mut g, h, &[row])?;
        let mut codes = vec![pick(g.value(logits).data(), &self.sampling, &mut self.rng)];
        if self.model.config.n_codebooks > 1 {
            let h_row: NodeId = g.slice_rows(h.node, row, row + 1)?;
            while codes.len() < self.model.config.n_codebooks {
                let l = self.ctx.fast_logits(&mut g, h_row, &codes)?;
                codes.push(pick(g.value(l).data(), &self.sampling, &mut self.rng));
            }
        }
        self.kernels += g.kernel_count();
        Ok(codes)
    }
}

/// Offline generation: one emitted frame per source semantic token.
pub fn generate(
    model: &SpeechLm,
    prompt: &[TokenFrame],
    source_semantic: &[usize],
    sampling: Sampling,
) -> Result<Vec<TokenFrame>> {
    let mut dec = Decoder::new(model, prompt, sampling)?;
    for &s in source_semantic {
        dec.step(s)?;
    }
    Ok(dec.seq.source)
}
