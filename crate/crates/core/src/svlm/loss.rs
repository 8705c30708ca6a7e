use emoanon_numerics::{Gradients, Graph, NodeId, Tensor};

use super::assemble::{AssembledSequence, Region};
use super::model::Ctx;
use super::{teacher_embed, Aggregation, Branch, SpeechLm};
use crate::error::{Error, Result};
use crate::worldsim::Emotion;

/// One assembled training pair with the emotion label of its source.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: AssembledSequence,
    pub emotion: Emotion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub slow: f64,
    pub fast: f64,
    pub emo: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(slow: f64, fast: f64, emo: f64, weight: f64) -> Self {
        Self {
            slow,
            fast,
            emo,
            total: slow + fast + weight * emo,
        }
    }

    pub fn lm(&self) -> f64 {
        self.slow + self.fast
    }
}

pub(crate) struct ExampleGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
}

fn loss_frames(seq: &AssembledSequence, source_only: bool) -> Vec<(Region, usize)> {
    let mut v = Vec::new();
    if !source_only {
        v.extend((0..seq.prompt.len()).map(|t| (Region::Prompt, t)));
    }
    v.extend((0..seq.source.len()).map(|t| (Region::Source, t)));
    v
}

pub(crate) fn example_graph(ctx: &Ctx<'_>, ex: &Example) -> Result<ExampleGraph> {
    let cfg = &ctx.model.config;
    let seq = &ex.seq;
    if seq.pending.is_some() || seq.source.is_empty() {
        return Err(Error::InvalidInput("training sequence needs complete source frames".into()));
    }
    let mut g = Graph::new();
    let h = ctx.slow_forward(&mut g, seq)?;
    let frames = loss_frames(seq, cfg.source_only);
    let tokens: Vec<&[usize]> = frames
        .iter()
        .map(|&(r, t)| match r {
            Region::Prompt => seq.prompt[t].acoustic.as_slice(),
            _ => seq.source[t].acoustic.as_slice(),
        })
        .collect();
    let sem_rows: Vec<usize> = frames.iter().map(|&(r, t)| seq.semantic_pos(r, t)).collect();

    let q1: Vec<usize> = tokens.iter().map(|q| q[0]).collect();
    let logits = ctx.q1_logits(&mut g, h, &sem_rows)?;
    let slow = g.cross_entropy(logits, &q1)?;
    let mut lm = slow;
    let mut fast_value = 0.0;
    if ctx.has_fast() {
        let h_sem = g.gather_rows(h.node, &sem_rows)?;
        let fl = ctx.fast_logits_all(&mut g, h_sem, &tokens)?;
        let targets: Vec<usize> = tokens.iter().flat_map(|q| q[1..].iter().copied()).collect();
        let fast = g.cross_entropy(fl, &targets)?;
        fast_value = g.value(fast).item();
        lm = g.add(slow, fast)?;
    }
    let slow_value = g.value(slow).item();

    let mut emo_value = 0.0;
    let mut loss = lm;
    if ctx.has_distill() && cfg.branch != Branch::None {
        let t = seq.source.len();
        let view: Vec<usize> = (0..t)
            .map(|i| match cfg.branch {
                Branch::Acoustic => seq.acoustic_pos(Region::Source, i),
                _ => seq.semantic_pos(Region::Source, i),
            })
            .collect();
        let hv = g.gather_rows(h.node, &view)?;
        let pred = ctx.distill_forward(&mut g, hv)?;
        let teacher = teacher_embed(ex.emotion, t, cfg);
        let target = match cfg.aggregation {
            Aggregation::Causal => teacher,
            Aggregation::StatPool => {
                let d = cfg.teacher_dim;
                let mean: Vec<f64> = (0..d)
                    .map(|j| (0..t).map(|i| teacher.row(i)[j]).sum::<f64>() / t as f64)
                    .collect();
                Tensor::matrix(1, d, mean)
            }
        };
        let target = g.input(target)?;
        let emo = g.mse(pred, target)?;
        emo_value = g.value(emo).item();
        if cfg.distill_weight > 0.0 {
            let weighted = g.scale(emo, cfg.distill_weight)?;
            loss = g.add(lm, weighted)?;
        }
    }
    let breakdown = LossBreakdown::compose(slow_value, fast_value, emo_value, cfg.distill_weight);
    Ok(ExampleGraph {
        graph: g,
        loss,
        breakdown,
    })
}

/// Mean losses over a batch and the gradient of the mean total. Examples
/// are differentiated one at a time and their gradients summed in batch
/// order, so the result does not depend on scheduling.
pub fn compute_losses(model: &SpeechLm, batch: &[Example]) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let ctx = model.ctx()?;
    let mut grads = Gradients::zeros_like(&model.params);
    let (mut slow, mut fast, mut emo) = (0.0, 0.0, 0.0);
    for ex in batch {
        let eg = example_graph(&ctx, ex)?;
        grads.accumulate(&eg.graph.backward(eg.loss, &model.params)?);
        slow += eg.breakdown.slow;
        fast += eg.breakdown.fast;
        emo += eg.breakdown.emo;
    }
    let b = batch.len() as f64;
    if batch.len() > 1 {
        grads.scale(1.0 / b);
    }
    let out = LossBreakdown::compose(slow / b, fast / b, emo / b, model.config.distill_weight);
    Ok((out, grads))
}

/// Losses without gradients.
pub fn evaluate_losses(model: &SpeechLm, batch: &[Example]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let ctx = model.ctx()?;
    let (mut slow, mut fast, mut emo) = (0.0, 0.0, 0.0);
    for ex in batch {
        let eg = example_graph(&ctx, ex)?;
        slow += eg.breakdown.slow;
        fast += eg.breakdown.fast;
        emo += eg.breakdown.emo;
    }
    let b = batch.len() as f64;
    Ok(LossBreakdown::compose(slow / b, fast / b, emo / b, model.config.distill_weight))
}

/// Per-example breakdown together with the graph loss value, for checking
/// that the differentiated scalar equals the reported total.
pub fn example_loss(model: &SpeechLm, ex: &Example) -> Result<(LossBreakdown, f64)> {
    let ctx = model.ctx()?;
    let eg = example_graph(&ctx, ex)?;
    let v = eg.graph.value(eg.loss).item();
    Ok((eg.breakdown, v))
}
