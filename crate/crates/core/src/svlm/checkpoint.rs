//! Binary checkpoint: magic, version, a `key = value` text header echoing
//! the model config, then named little-endian f64 tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use emoanon_numerics::{AdamConfig, OptimizerState, ParamStore, Tensor};

use super::{ModelConfig, SpeechLm};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMOANON\0";
const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SpeechLm,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata, kept in key order.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: SpeechLm) -> Self {
        Self {
            model,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }
}

fn config_lines(c: &ModelConfig) -> Vec<(String, String)> {
    let kv = |k: &str, v: String| (format!("model.{k}"), v);
    vec![
        kv("semantic_vocab", c.semantic_vocab.to_string()),
        kv("acoustic_vocab", c.acoustic_vocab.to_string()),
        kv("n_codebooks", c.n_codebooks.to_string()),
        kv("d_model", c.d_model.to_string()),
        kv("slow_layers", c.slow_layers.to_string()),
        kv("fast_layers", c.fast_layers.to_string()),
        kv("heads", c.heads.to_string()),
        kv("context", c.context.to_string()),
        kv("distill_layers", c.distill_layers.to_string()),
        kv("branch", c.branch.to_string()),
        kv("aggregation", c.aggregation.to_string()),
        kv("distill_weight", c.distill_weight.to_string()),
        kv("teacher_dim", c.teacher_dim.to_string()),
        kv("teacher_seed", c.teacher_seed.to_string()),
        kv("use_sep", c.use_sep.to_string()),
        kv("source_only", c.source_only.to_string()),
    ]
}

fn get<'a>(h: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    h.get(k)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header is missing `{k}`")))
}

fn num<T: std::str::FromStr>(h: &BTreeMap<String, String>, k: &str) -> Result<T> {
    let v = get(h, k)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{k}`")))
}

fn parse_config(h: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let m = |k: &str| format!("model.{k}");
    Ok(ModelConfig {
        semantic_vocab: num(h, &m("semantic_vocab"))?,
        acoustic_vocab: num(h, &m("acoustic_vocab"))?,
        n_codebooks: num(h, &m("n_codebooks"))?,
        d_model: num(h, &m("d_model"))?,
        slow_layers: num(h, &m("slow_layers"))?,
        fast_layers: num(h, &m("fast_layers"))?,
        heads: num(h, &m("heads"))?,
        context: num(h, &m("context"))?,
        distill_layers: num(h, &m("distill_layers"))?,
        branch: get(h, &m("branch"))?.parse()?,
        aggregation: get(h, &m("aggregation"))?.parse()?,
        distill_weight: num(h, &m("distill_weight"))?,
        teacher_dim: num(h, &m("teacher_dim"))?,
        teacher_seed: num(h, &m("teacher_seed"))?,
        use_sep: num(h, &m("use_sep"))?,
        source_only: num(h, &m("source_only"))?,
    })
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn save_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut header = config_lines(&ck.model.config);
    if let Some(o) = &ck.optimizer {
        header.push(("optim.lr".into(), o.config.lr.to_string()));
        header.push(("optim.beta1".into(), o.config.beta1.to_string()));
        header.push(("optim.beta2".into(), o.config.beta2.to_string()));
        header.push(("optim.eps".into(), o.config.eps.to_string()));
        header.push(("optim.step".into(), o.step.to_string()));
    }
    for (k, v) in &ck.meta {
        header.push((format!("meta.{k}"), v.clone()));
    }
    let text: String = header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();

    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text.as_bytes());
    let params = &ck.model.params;
    let mut count = params.len() as u64;
    if ck.optimizer.is_some() {
        count *= 3;
    }
    out.extend(count.to_le_bytes());
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(o) = &ck.optimizer {
        for ((name, _), m) in params.iter().zip(&o.first_moment) {
            put_tensor(&mut out, &format!("{M_PREFIX}{name}"), m);
        }
        for ((name, _), v) in params.iter().zip(&o.second_moment) {
            put_tensor(&mut out, &format!("{V_PREFIX}{name}"), v);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` overruns the file")))?;
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.len()?;
    let text = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let config = parse_config(&header)?;
    let count = r.len()?;
    let mut params = ParamStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            first.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            second.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let optimizer = if header.contains_key("optim.step") {
        let take = |map: &mut BTreeMap<String, Tensor>, what: &str| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(n, _)| {
                    map.remove(n)
                        .ok_or_else(|| Error::Checkpoint(format!("missing {what} moment for `{n}`")))
                })
                .collect()
        };
        Some(OptimizerState {
            config: AdamConfig {
                lr: num(&header, "optim.lr")?,
                beta1: num(&header, "optim.beta1")?,
                beta2: num(&header, "optim.beta2")?,
                eps: num(&header, "optim.eps")?,
            },
            step: num(&header, "optim.step")?,
            first_moment: take(&mut first, "first")?,
            second_moment: take(&mut second, "second")?,
        })
    } else {
        None
    };
    let meta = header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        model: SpeechLm::from_parts(config, params)?,
        optimizer,
        meta,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, save_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
