use emoanon_numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_distr::{Distribution, Normal};

use super::assemble::{AssembledSequence, Region};
use super::{Aggregation, Branch, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::{hash_str, rng};

/// Name prefix of every distillation-head parameter.
pub const DISTILL_PREFIX: &str = "distill.";

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    /// Bias-free: a key bias shifts every score of a query equally and so
    /// never receives gradient.
    qkv: ParamId,
    wo: Linear,
    ln2: Norm,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
enum DistillIds {
    Causal { blocks: Vec<Block>, ln: Norm, out: Linear },
    StatPool { hidden: Linear, out: Linear },
}

#[derive(Clone, Debug)]
struct FastIds {
    input: Linear,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: Norm,
    head: Linear,
}

#[derive(Clone, Debug)]
struct Ids {
    sem_embed: ParamId,
    acou_embed: ParamId,
    sep: Option<(ParamId, ParamId)>,
    pos: ParamId,
    slow: Vec<Block>,
    slow_ln: Norm,
    head_q1: Linear,
    fast: Option<FastIds>,
    distill: Option<DistillIds>,
}

enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Final post-norm hidden states of the Slow AR over an assembled sequence.
#[derive(Clone, Copy, Debug)]
pub struct HiddenStates {
    /// `[positions, d_model]`.
    pub node: NodeId,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechLm {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => {
                let mut r = rng(hash_str(self.seed, name));
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut r)).collect()
            }
        };
        let t = Tensor::new(shape.to_vec(), data).expect("parameter shape");
        self.store.insert(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std));
        self.add(&format!("{name}.b"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.add(&format!("{name}.g"), &[d], Init::Ones);
        self.add(&format!("{name}.b"), &[d], Init::Zeros);
    }

    fn block(&mut self, name: &str, d: usize) {
        self.norm(&format!("{name}.ln1"), d);
        let std = 1.0 / (d as f64).sqrt();
        self.add(&format!("{name}.qkv.w"), &[d, 3 * d], Init::Normal(std));
        self.linear(&format!("{name}.wo"), d, d);
        self.norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp1"), d, 4 * d);
        self.linear(&format!("{name}.mlp2"), 4 * d, d);
    }
}

fn build_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        seed,
    };
    let d = cfg.d_model;
    let (v, n) = (cfg.acoustic_vocab, cfg.n_codebooks);
    b.add("embed.semantic", &[cfg.semantic_vocab, d], Init::Normal(0.5));
    b.add("embed.acoustic", &[n * v, d], Init::Normal(0.5 / (n as f64).sqrt()));
    if cfg.use_sep {
        b.add("sep.linguistic", &[1, d], Init::Normal(0.5));
        b.add("sep.acoustic", &[1, d], Init::Normal(0.5));
    }
    b.add("embed.pos", &[cfg.context, d], Init::Normal(0.1));
    for l in 0..cfg.slow_layers {
        b.block(&format!("slow.{l}"), d);
    }
    b.norm("slow.ln_f", d);
    b.linear("head.q1", d, v);
    if n > 1 {
        b.linear("fast.in", d, d);
        b.add("fast.embed", &[(n - 1) * v, d], Init::Normal(0.5));
        b.add("fast.pos", &[n, d], Init::Normal(0.1));
        for l in 0..cfg.fast_layers {
            b.block(&format!("fast.{l}"), d);
        }
        b.norm("fast.ln_f", d);
        b.linear("head.fast", d, v);
    }
    if cfg.distill_active() {
        match cfg.aggregation {
            Aggregation::Causal => {
                for l in 0..cfg.distill_layers {
                    b.block(&format!("distill.{l}"), d);
                }
                b.norm("distill.ln_f", d);
                b.linear("distill.out", d, cfg.teacher_dim);
            }
            Aggregation::StatPool => {
                b.linear("distill.pool", 2 * d, d);
                b.linear("distill.out", d, cfg.teacher_dim);
            }
        }
    }
    store
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Checkpoint(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

struct Binder<'a>(&'a ParamStore);

impl Binder<'_> {
    fn linear(&self, name: &str, i: usize, o: usize) -> Result<Linear> {
        Ok(Linear {
            w: lookup(self.0, &format!("{name}.w"), &[i, o])?,
            b: lookup(self.0, &format!("{name}.b"), &[o])?,
        })
    }

    fn norm(&self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: lookup(self.0, &format!("{name}.g"), &[d])?,
            b: lookup(self.0, &format!("{name}.b"), &[d])?,
        })
    }

    fn block(&self, name: &str, d: usize) -> Result<Block> {
        Ok(Block {
            ln1: self.norm(&format!("{name}.ln1"), d)?,
            qkv: lookup(self.0, &format!("{name}.qkv.w"), &[d, 3 * d])?,
            wo: self.linear(&format!("{name}.wo"), d, d)?,
            ln2: self.norm(&format!("{name}.ln2"), d)?,
            mlp1: self.linear(&format!("{name}.mlp1"), d, 4 * d)?,
            mlp2: self.linear(&format!("{name}.mlp2"), 4 * d, d)?,
        })
    }
}

fn bind(cfg: &ModelConfig, store: &ParamStore) -> Result<Ids> {
    let b = Binder(store);
    let d = cfg.d_model;
    let (v, n) = (cfg.acoustic_vocab, cfg.n_codebooks);
    let sep = if cfg.use_sep {
        Some((
            lookup(store, "sep.linguistic", &[1, d])?,
            lookup(store, "sep.acoustic", &[1, d])?,
        ))
    } else {
        None
    };
    let fast = if n > 1 {
        Some(FastIds {
            input: b.linear("fast.in", d, d)?,
            embed: lookup(store, "fast.embed", &[(n - 1) * v, d])?,
            pos: lookup(store, "fast.pos", &[n, d])?,
            blocks: (0..cfg.fast_layers)
                .map(|l| b.block(&format!("fast.{l}"), d))
                .collect::<Result<_>>()?,
            ln: b.norm("fast.ln_f", d)?,
            head: b.linear("head.fast", d, v)?,
        })
    } else {
        None
    };
    let distill = if cfg.distill_active() {
        Some(match cfg.aggregation {
            Aggregation::Causal => DistillIds::Causal {
                blocks: (0..cfg.distill_layers)
                    .map(|l| b.block(&format!("distill.{l}"), d))
                    .collect::<Result<_>>()?,
                ln: b.norm("distill.ln_f", d)?,
                out: b.linear("distill.out", d, cfg.teacher_dim)?,
            },
            Aggregation::StatPool => DistillIds::StatPool {
                hidden: b.linear("distill.pool", 2 * d, d)?,
                out: b.linear("distill.out", d, cfg.teacher_dim)?,
            },
        })
    } else {
        None
    };
    Ok(Ids {
        sem_embed: lookup(store, "embed.semantic", &[cfg.semantic_vocab, d])?,
        acou_embed: lookup(store, "embed.acoustic", &[n * v, d])?,
        sep,
        pos: lookup(store, "embed.pos", &[cfg.context, d])?,
        slow: (0..cfg.slow_layers)
            .map(|l| b.block(&format!("slow.{l}"), d))
            .collect::<Result<_>>()?,
        slow_ln: b.norm("slow.ln_f", d)?,
        head_q1: b.linear("head.q1", d, v)?,
        fast,
        distill,
    })
}

/// Graph-building helpers bound to one model.
pub(crate) struct Ctx<'m> {
    pub(crate) model: &'m SpeechLm,
    ids: Ids,
}

impl SpeechLm {
    /// Fresh model. Each parameter is drawn from its own stream keyed by
    /// `(seed, name)`, so adding or removing the distillation head leaves
    /// every other initial value unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        bind(&config, &params)?;
        Ok(Self { config, params })
    }

    /// Fresh model whose parameters are copied from `base` wherever a
    /// parameter of the same name and shape exists there.
    pub fn warm_start(config: ModelConfig, seed: u64, base: &SpeechLm) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if let Some(src) = base.params.by_name(&name) {
                let id = m.params.id(&name).expect("own parameter");
                if src.shape() == m.params.get(id).shape() {
                    *m.params.get_mut(id) = src.clone();
                }
            }
        }
        Ok(m)
    }

    /// Copy with the distillation head removed, as deployed for inference.
    pub fn strip_distill(&self) -> Self {
        let mut params = self.params.clone();
        params.retain(|n| !n.starts_with(DISTILL_PREFIX));
        let mut config = self.config.clone();
        config.branch = Branch::None;
        Self { config, params }
    }

    pub fn has_distill_head(&self) -> bool {
        self.params.iter().any(|(n, _)| n.starts_with(DISTILL_PREFIX))
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn distill_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(DISTILL_PREFIX))
            .collect()
    }

    pub fn head_q1_param_ids(&self) -> Vec<ParamId> {
        ["head.q1.w", "head.q1.b"]
            .iter()
            .filter_map(|n| self.params.id(n))
            .collect()
    }

    pub(crate) fn ctx(&self) -> Result<Ctx<'_>> {
        Ok(Ctx {
            model: self,
            ids: bind(&self.config, &self.params)?,
        })
    }

    /// Post-norm hidden states as plain values, `[positions, d_model]`.
    pub fn hidden_values(&self, seq: &AssembledSequence) -> Result<Tensor> {
        let ctx = self.ctx()?;
        let mut g = Graph::new();
        let h = ctx.slow_forward(&mut g, seq)?;
        Ok(g.value(h.node).clone())
    }

    /// q1 logits for every complete-or-pending source frame, `[frames, V]`.
    pub fn q1_logit_values(&self, seq: &AssembledSequence) -> Result<Tensor> {
        let ctx = self.ctx()?;
        let mut g = Graph::new();
        let h = ctx.slow_forward(&mut g, seq)?;
        let rows: Vec<usize> = (0..seq.source_semantic_frames())
            .map(|t| seq.semantic_pos(Region::Source, t))
            .collect();
        let logits = ctx.q1_logits(&mut g, h, &rows)?;
        Ok(g.value(logits).clone())
    }

    /// Logits for codebook `prev.len() + 1` given a Slow-AR hidden vector
    /// and the earlier codebooks of the same frame.
    pub fn fast_ar_logits(&self, h: &[f64], prev: &[usize]) -> Result<Tensor> {
        let ctx = self.ctx()?;
        let mut g = Graph::new();
        let hn = g.input(Tensor::matrix(1, h.len(), h.to_vec()))?;
        let out = ctx.fast_logits(&mut g, hn, prev)?;
        Ok(g.value(out).clone())
    }

    /// Parameters bound into the graph of one Fast-AR call.
    pub fn fast_ar_params(&self, h: &[f64], prev: &[usize]) -> Result<Vec<ParamId>> {
        let ctx = self.ctx()?;
        let mut g = Graph::new();
        let hn = g.input(Tensor::matrix(1, h.len(), h.to_vec()))?;
        ctx.fast_logits(&mut g, hn, prev)?;
        Ok(g.touched_params())
    }

    /// Distillation predictions for a hidden sequence `[T, d_model]`:
    /// `[T, teacher_dim]` in causal mode, `[1, teacher_dim]` when pooled.
    pub fn distill_values(&self, hidden: &Tensor) -> Result<Tensor> {
        let ctx = self.ctx()?;
        let mut g = Graph::new();
        let h = g.input(hidden.clone())?;
        let p = ctx.distill_forward(&mut g, h)?;
        Ok(g.value(p).clone())
    }
}

impl Ctx<'_> {
    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Result<NodeId> {
        Ok(g.param(&self.model.params, id)?)
    }

    fn linear(&self, g: &mut Graph, l: Linear, x: NodeId) -> Result<NodeId> {
        let w = self.p(g, l.w)?;
        let b = self.p(g, l.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: NodeId) -> Result<NodeId> {
        let gamma = self.p(g, n.g)?;
        let beta = self.p(g, n.b)?;
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    fn block(&self, g: &mut Graph, b: &Block, x: NodeId, groups: usize) -> Result<NodeId> {
        let h = self.norm(g, b.ln1, x)?;
        let w = self.p(g, b.qkv)?;
        let qkv = g.matmul(h, w)?;
        let a = g.causal_attention(qkv, groups, self.cfg().heads)?;
        let o = self.linear(g, b.wo, a)?;
        let x = g.add(x, o)?;
        let h = self.norm(g, b.ln2, x)?;
        let m = self.linear(g, b.mlp1, h)?;
        let m = g.gelu(m)?;
        let m = self.linear(g, b.mlp2, m)?;
        Ok(g.add(x, m)?)
    }

    pub(crate) fn slow_forward(&self, g: &mut Graph, seq: &AssembledSequence) -> Result<HiddenStates> {
        let cfg = self.cfg();
        seq.check(cfg)?;
        if seq.use_sep != self.ids.sep.is_some() {
            return Err(Error::InvalidInput(
                "sequence separator layout does not match the model".into(),
            ));
        }
        let (v, n) = (cfg.acoustic_vocab, cfg.n_codebooks);
        let frames: Vec<_> = seq.prompt.iter().chain(&seq.source).collect();
        let mut sem_ids: Vec<usize> = frames.iter().map(|f| f.semantic).collect();
        sem_ids.extend(seq.pending);
        let acou_ids: Vec<usize> = frames
            .iter()
            .flat_map(|f| f.acoustic.iter().enumerate().map(move |(k, &q)| k * v + q))
            .collect();
        let (ns, na) = (sem_ids.len(), frames.len());
        let sem_table = self.p(g, self.ids.sem_embed)?;
        let mut parts = vec![g.embedding(sem_table, &sem_ids, 1)?];
        let acou_table = self.p(g, self.ids.acou_embed)?;
        parts.push(g.embedding(acou_table, &acou_ids, n)?);
        if let Some((l, a)) = self.ids.sep {
            parts.push(self.p(g, l)?);
            parts.push(self.p(g, a)?);
        }
        let stacked = g.concat_rows(&parts)?;
        let p = seq.prompt.len();
        let mut order = Vec::with_capacity(seq.len());
        for t in 0..p {
            order.extend([t, ns + t]);
        }
        if seq.use_sep {
            order.extend([ns + na, ns + na + 1]);
        }
        for t in 0..seq.source.len() {
            order.extend([p + t, ns + p + t]);
        }
        if seq.pending.is_some() {
            order.push(ns - 1);
        }
        let x = g.gather_rows(stacked, &order)?;
        let pos_table = self.p(g, self.ids.pos)?;
        let pos = g.slice_rows(pos_table, 0, order.len())?;
        let mut x = g.add(x, pos)?;
        for b in &self.ids.slow {
            x = self.block(g, b, x, 1)?;
        }
        let node = self.norm(g, self.ids.slow_ln, x)?;
        Ok(HiddenStates {
            node,
            len: order.len(),
        })
    }

    pub(crate) fn q1_logits(&self, g: &mut Graph, h: HiddenStates, rows: &[usize]) -> Result<NodeId> {
        let x = g.gather_rows(h.node, rows)?;
        self.linear(g, self.ids.head_q1, x)
    }

    /// Fast-AR trunk over `F` frames: position 0 is the projected Slow-AR
    /// hidden, position `j` embeds codebook `j` of the same frame. Returns
    /// `[F * (m + 1), d]` where `m` is the number of earlier codebooks.
    fn fast_trunk(&self, g: &mut Graph, h_rows: NodeId, prev: &[&[usize]]) -> Result<NodeId> {
        let cfg = self.cfg();
        let fast = self
            .ids
            .fast
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("model has a single codebook".into()))?;
        let f = prev.len();
        let m = prev[0].len();
        if prev.iter().any(|p| p.len() != m) || m + 1 > cfg.n_codebooks {
            return Err(Error::InvalidInput(format!(
                "fast AR takes at most {} earlier codebooks per frame",
                cfg.n_codebooks - 1
            )));
        }
        let start = self.linear(g, fast.input, h_rows)?;
        let x = if m > 0 {
            let v = cfg.acoustic_vocab;
            let ids: Vec<usize> = prev
                .iter()
                .flat_map(|p| p.iter().enumerate().map(move |(j, &q)| j * v + q))
                .collect();
            let table = self.p(g, fast.embed)?;
            let emb = g.embedding(table, &ids, 1)?;
            let stacked = g.concat_rows(&[start, emb])?;
            let order: Vec<usize> = (0..f)
                .flat_map(|r| std::iter::once(r).chain((0..m).map(move |j| f + r * m + j)))
                .collect();
            g.gather_rows(stacked, &order)?
        } else {
            start
        };
        let pos_ids: Vec<usize> = (0..f).flat_map(|_| 0..=m).collect();
        let pos_table = self.p(g, fast.pos)?;
        let pos = g.embedding(pos_table, &pos_ids, 1)?;
        let mut x = g.add(x, pos)?;
        for b in &fast.blocks {
            x = self.block(g, b, x, f)?;
        }
        self.norm(g, fast.ln, x)
    }

    fn fast_head(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let head = self.ids.fast.as_ref().expect("fast head").head;
        self.linear(g, head, x)
    }

    /// Logits `[1, V]` for codebook `prev.len() + 1` of one frame.
    pub(crate) fn fast_logits(&self, g: &mut Graph, h: NodeId, prev: &[usize]) -> Result<NodeId> {
        let n = self.cfg().n_codebooks;
        if prev.is_empty() || prev.len() >= n {
            return Err(Error::InvalidInput(format!(
                "fast AR predicts codebooks 2..={n}, asked for {}",
                prev.len() + 1
            )));
        }
        let trunk = self.fast_trunk(g, h, &[prev])?;
        let last = g.slice_rows(trunk, prev.len(), prev.len() + 1)?;
        self.fast_head(g, last)
    }

    /// Teacher-forced logits for codebooks 2..=n of every frame, in
    /// frame-major order: `[F * (n - 1), V]`.
    pub(crate) fn fast_logits_all(&self, g: &mut Graph, h_rows: NodeId, frames: &[&[usize]]) -> Result<NodeId> {
        let n = self.cfg().n_codebooks;
        let prev: Vec<&[usize]> = frames.iter().map(|q| &q[..n - 1]).collect();
        let trunk = self.fast_trunk(g, h_rows, &prev)?;
        let rows: Vec<usize> = (0..frames.len())
            .flat_map(|r| (1..n).map(move |j| r * n + j))
            .collect();
        let x = g.gather_rows(trunk, &rows)?;
        self.fast_head(g, x)
    }

    pub(crate) fn distill_forward(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let Some(ids) = &self.ids.distill else {
            return Err(Error::InvalidInput("model has no distillation head".into()));
        };
        match ids {
            DistillIds::Causal { blocks, ln, out } => {
                let mut x = h;
                for b in blocks {
                    x = self.block(g, b, x, 1)?;
                }
                let x = self.norm(g, *ln, x)?;
                self.linear(g, *out, x)
            }
            DistillIds::StatPool { hidden, out } => {
                let mean = g.mean_rows(h)?;
                let std = g.std_rows(h)?;
                let x = g.concat_cols(mean, std)?;
                let x = self.linear(g, *hidden, x)?;
                let x = g.gelu(x)?;
                self.linear(g, *out, x)
            }
        }
    }

    pub(crate) fn has_fast(&self) -> bool {
        self.ids.fast.is_some()
    }

    pub(crate) fn has_distill(&self) -> bool {
        self.ids.distill.is_some()
    }
}
