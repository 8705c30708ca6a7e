use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emoanon::evalbench::{
    attack_sim, content_error, eer, emotion_eval, format_report_table, privacy_emotion_csv, privacy_emotion_svg,
    read_report_csv, uar, write_report_csv, write_scores, AnonymizedOutput, Attack, MetricsReport, ScorePools,
};
use emoanon::pairforge::{build_pairs, continuation_pairs, filter, load_manifest, read_pairs, write_pairs};
use emoanon::streamer::{latency_report, stream_all, StreamConfig};
use emoanon::svlm::{read_checkpoint, write_checkpoint, SpeechLm};
use emoanon::trainer::{build_examples, finetune_pairs, run_ablation, write_loss_log, AblationId, Trainer};
use emoanon::worldsim::{
    encode_utterance, gen_corpus, parse_emotion_list, read_tokens, write_manifest, write_tokens, ManifestRecord,
    SplitSpec, SplitWeights, TokenFrame,
};

use crate::config::RunConfig;

/// Split names written by `gen-corpus`, with their emotion weighting.
pub const SPLITS: [(&str, SplitWeights); 4] = [
    ("pretrain", SplitWeights::Configured),
    ("finetune", SplitWeights::Balanced),
    ("enroll", SplitWeights::Balanced),
    ("test", SplitWeights::Balanced),
];

#[derive(Debug, Parser)]
#[command(name = "emoanon", version, about = "Emotion-preserving streaming speaker anonymization on a synthetic token world")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration in `section.key = value` form.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; relative file arguments resolve against it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: manifest.tsv and tokens.tsv.
    GenCorpus,
    /// Build neutral-emotion training pairs from a manifest.
    BuildPairs(BuildPairsArgs),
    /// Train one model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Anonymize sources by chunked streaming inference.
    Infer(InferArgs),
    /// Score anonymized outputs for emotion, content and privacy.
    Eval(EvalArgs),
    /// Train and evaluate a list of ablation experiments.
    Ablate(AblateArgs),
    /// Emit plot data from report files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct BuildPairsArgs {
    #[arg(long, default_value = "manifest.tsv")]
    pub manifest: PathBuf,
    /// Only records whose id starts with `<split>-`; `all` keeps everything.
    #[arg(long, default_value = "finetune")]
    pub split: String,
    #[arg(long)]
    pub q_min: Option<f64>,
    /// Comma-separated allowed source emotions.
    #[arg(long)]
    pub emotions: Option<String>,
    #[arg(long, conflicts_with = "no_neutral_neutral")]
    pub neutral_neutral: bool,
    #[arg(long)]
    pub no_neutral_neutral: bool,
    /// Also add continuation pairs over every record of the split.
    #[arg(long)]
    pub continuation: bool,
    #[arg(long, default_value = "pairs.tsv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ablation row whose toggles shape the model and default data.
    #[arg(long)]
    pub exp: Option<AblationId>,
    /// Pair file; by default pairs follow the experiment's data policy.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Warm-start from this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a run from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "manifest.tsv")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "tokens.tsv")]
    pub tokens: PathBuf,
    /// Stem for the checkpoint and loss log; defaults to the experiment id.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Utterance whose tokens prompt the target voice.
    #[arg(long)]
    pub prompt_id: String,
    /// Comma-separated source utterance ids.
    #[arg(long, required_unless_present = "source_split")]
    pub source_id: Option<String>,
    /// Anonymize every utterance of a split except the prompt speaker's.
    #[arg(long, conflicts_with = "source_id")]
    pub source_split: Option<String>,
    /// Source frames per streamed chunk.
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long, default_value = "manifest.tsv")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "tokens.tsv")]
    pub tokens: PathBuf,
    #[arg(long, default_value = "outputs.tsv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub outputs: PathBuf,
    /// Anonymized enrollment outputs for the semi-informed attacker.
    #[arg(long)]
    pub enrollment: Option<PathBuf>,
    /// Comma-separated attacker modes.
    #[arg(long, default_value = "lazy,semi")]
    pub mode: String,
    #[arg(long, default_value = "report.csv")]
    pub report: PathBuf,
    #[arg(long, default_value = "manifest.tsv")]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated experiment ids.
    #[arg(long, default_value = "baseline,exp1,exp2,exp3,exp4,exp5,exp6,exp7")]
    pub exps: String,
    #[arg(long, default_value = "ablation.csv")]
    pub report: PathBuf,
    /// Also write each trained model's checkpoint.
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlotKind {
    /// Lazy-attacker EER against emotion UAR.
    PrivacyEmotion,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Comma-separated report CSV files.
    #[arg(long)]
    pub reports: String,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
}

/// Resolved inputs shared by every subcommand.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn write(&self, name: &Path, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }

    fn manifest(&self, p: &Path) -> Result<Vec<ManifestRecord>> {
        Ok(load_manifest(&self.path(p))?)
    }

    fn tokens(&self, p: &Path) -> Result<BTreeMap<String, Vec<TokenFrame>>> {
        Ok(read_tokens(&self.path(p))?.into_iter().collect())
    }
}

fn context(common: &Common) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.resolve()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(Ctx { cfg, out })
}

fn split_of(records: &[ManifestRecord], split: &str) -> Vec<ManifestRecord> {
    let prefix = format!("{split}-");
    records
        .iter()
        .filter(|r| split == "all" || r.id.starts_with(&prefix))
        .cloned()
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = context(&cli.common)?;
    let name = match &cli.command {
        Command::GenCorpus => "gen-corpus",
        Command::BuildPairs(_) => "build-pairs",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Plot(_) => "plot",
    };
    ctx.write(Path::new(&format!("{name}.resolved.cfg")), &ctx.cfg.echo())?;
    match cli.command {
        Command::GenCorpus => gen_corpus_cmd(&ctx),
        Command::BuildPairs(a) => build_pairs_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Infer(a) => infer_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::Plot(a) => plot_cmd(&ctx, a),
    }
}

fn gen_corpus_cmd(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let sizes = [c.corpus.pretrain, c.corpus.finetune, c.corpus.enroll, c.corpus.test];
    let splits: Vec<SplitSpec> = SPLITS
        .iter()
        .zip(sizes)
        .map(|(&(name, w), n)| SplitSpec::new(name, n, w))
        .collect();
    let corpus = gen_corpus(&c.world, &splits, c.seed)?;
    let encoded = corpus
        .utterances
        .iter()
        .map(|u| Ok((u.id.as_str(), encode_utterance(u, &c.world, c.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&ctx.path(Path::new("manifest.tsv")), &corpus.records)?;
    write_tokens(
        &ctx.path(Path::new("tokens.tsv")),
        encoded.iter().map(|(id, f)| (*id, f.as_slice())),
    )?;
    log::info!("wrote {} utterances", corpus.records.len());
    Ok(())
}

fn build_pairs_cmd(ctx: &Ctx, a: BuildPairsArgs) -> Result<()> {
    let mut cfg = ctx.cfg.pairs.clone();
    if let Some(q) = a.q_min {
        cfg.q_min = q;
    }
    if let Some(e) = &a.emotions {
        cfg.allowed = parse_emotion_list(e)?;
    }
    if a.neutral_neutral {
        cfg.neutral_neutral = true;
    }
    if a.no_neutral_neutral {
        cfg.neutral_neutral = false;
    }
    cfg.validate()?;
    let records = split_of(&ctx.manifest(&a.manifest)?, &a.split);
    ensure!(!records.is_empty(), "no manifest records in split `{}`", a.split);
    let mut pairs = build_pairs(&filter(&records, &cfg), &cfg);
    if a.continuation {
        pairs.extend(continuation_pairs(&records, ctx.cfg.continuation_fraction)?);
    }
    pairs.sort();
    write_pairs(&ctx.path(&a.output), &pairs)?;
    log::info!("wrote {} pairs", pairs.len());
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let c = &ctx.cfg;
    let (model_cfg, components) = match a.exp {
        Some(id) => (id.toggles().apply(&c.model), id.toggles().components()),
        None => (c.model.clone(), "-".to_string()),
    };
    let stem = a
        .name
        .clone()
        .unwrap_or_else(|| a.exp.map_or("model".to_string(), |e| e.to_string()));
    let records = ctx.manifest(&a.manifest)?;
    let tokens = ctx.tokens(&a.tokens)?;
    let pairs = match &a.pairs {
        Some(p) => read_pairs(&ctx.path(p))?,
        None => match a.exp {
            None | Some(AblationId::Baseline) => {
                continuation_pairs(&split_of(&records, "pretrain"), c.continuation_fraction)?
            }
            Some(id) => finetune_pairs(&id.toggles(), &split_of(&records, "finetune"), &c.plan())?,
        },
    };
    let examples = build_examples(&pairs, &tokens, &records, &model_cfg)?;
    let mut trainer = match (&a.resume, &a.init) {
        (Some(p), _) => {
            let ck = read_checkpoint(&ctx.path(p))?;
            ensure!(ck.model.config == model_cfg, "checkpoint model does not match the run configuration");
            Trainer::resume(ck, c.train.clone())?
        }
        (None, Some(p)) => {
            let base = read_checkpoint(&ctx.path(p))?.model;
            Trainer::new(SpeechLm::warm_start(model_cfg, c.seed, &base)?, c.train.clone())?
        }
        (None, None) => Trainer::new(SpeechLm::new(model_cfg, c.seed)?, c.train.clone())?,
    };
    log::info!("{stem}: {} examples, {} steps", examples.len(), c.train.total_steps(examples.len()));
    trainer.run(&examples)?;
    let mut ck = trainer.checkpoint();
    ck.meta.insert("run.experiment".into(), stem.clone());
    ck.meta.insert("run.components".into(), components);
    write_checkpoint(&ctx.path(Path::new(&format!("{stem}.ckpt"))), &ck)?;
    write_loss_log(&ctx.path(Path::new(&format!("{stem}.loss.csv"))), &trainer.log)?;
    Ok(())
}

/// Sidecar of an inference output: `key = value` lines next to the token file.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn chunks(len: usize, chunk: usize) -> Vec<usize> {
    let mut v = vec![chunk; len / chunk];
    if !len.is_multiple_of(chunk) {
        v.push(len % chunk);
    }
    v
}

fn infer_cmd(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let stream = StreamConfig {
        chunk: a.chunk.unwrap_or(ctx.cfg.stream.chunk),
        ..ctx.cfg.stream.clone()
    };
    stream.validate()?;
    let ck = read_checkpoint(&ctx.path(&a.checkpoint))?;
    let model = ck.model.strip_distill();
    let tokens = ctx.tokens(&a.tokens)?;
    let lookup = |id: &str| {
        tokens
            .get(id)
            .with_context(|| format!("utterance `{id}` not in {}", a.tokens.display()))
    };
    let prompt = lookup(&a.prompt_id)?;
    let ids: Vec<String> = match (&a.source_id, &a.source_split) {
        (Some(list), _) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        (None, Some(split)) => {
            let records = ctx.manifest(&a.manifest)?;
            let speaker = records
                .iter()
                .find(|r| r.id == a.prompt_id)
                .map(|r| r.speaker)
                .with_context(|| format!("prompt `{}` not in manifest", a.prompt_id))?;
            split_of(&records, split)
                .into_iter()
                .filter(|r| r.speaker != speaker)
                .map(|r| r.id)
                .collect()
        }
        (None, None) => bail!("give --source-id or --source-split"),
    };
    ensure!(!ids.is_empty(), "no source utterances selected");
    let mut outputs = Vec::with_capacity(ids.len());
    for id in &ids {
        let src: Vec<usize> = lookup(id)?.iter().map(|f| f.semantic).collect();
        outputs.push(stream_all(&model, prompt, &src, &chunks(src.len(), stream.chunk), &stream)?);
    }
    let out = ctx.path(&a.output);
    write_tokens(&out, ids.iter().map(String::as_str).zip(outputs.iter().map(Vec::as_slice)))?;
    let meta = |k: &str| ck.meta.get(k).cloned().unwrap_or_else(|| "-".into());
    let side = format!(
        "latency_ms = {}\nchunk = {}\nlookahead = {}\nframe_ms = {}\nprompt_id = {}\nexperiment = {}\ncomponents = {}\n",
        latency_report(&stream),
        stream.chunk,
        stream.lookahead,
        stream.frame_ms,
        a.prompt_id,
        meta("run.experiment"),
        meta("run.components"),
    );
    fs::write(sidecar(&out), side).with_context(|| format!("cannot write sidecar for {}", out.display()))?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let p = sidecar(path);
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn load_outputs(ctx: &Ctx, path: &Path, records: &[ManifestRecord]) -> Result<Vec<AnonymizedOutput>> {
    let by_id: BTreeMap<&str, &ManifestRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    read_tokens(&ctx.path(path))?
        .into_iter()
        .map(|(id, frames)| {
            let r = by_id
                .get(id.as_str())
                .with_context(|| format!("output `{id}` has no manifest record"))?;
            Ok(AnonymizedOutput {
                source: r.to_utterance(&ctx.cfg.world),
                id,
                frames,
            })
        })
        .collect()
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let world = &ctx.cfg.world;
    let records = ctx.manifest(&a.manifest)?;
    let test = load_outputs(ctx, &a.outputs, &records)?;
    let side = read_sidecar(&ctx.path(&a.outputs))?;
    let latency: f64 = match side.get("latency_ms") {
        Some(v) => v.parse().with_context(|| format!("bad latency_ms `{v}`"))?,
        None => latency_report(&ctx.cfg.stream),
    };
    let recalls = uar(&emotion_eval(&test, world))?;
    let mut row = MetricsReport {
        experiment: side.get("experiment").cloned().unwrap_or_else(|| "-".into()),
        components: side.get("components").cloned().unwrap_or_else(|| "-".into()),
        content_err: content_error(&test, world),
        uar: recalls.average,
        recalls: recalls.per_class,
        eer_lazy: f64::NAN,
        eer_semi: f64::NAN,
        latency_ms: latency,
    };
    for mode in a.mode.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let trials = match mode {
            "lazy" => attack_sim(&test, &Attack::Lazy, world)?,
            "semi" => {
                let p = a.enrollment.as_ref().context("semi mode needs --enrollment")?;
                let enrollment = load_outputs(ctx, p, &records)?;
                attack_sim(&test, &Attack::Semi { enrollment: &enrollment }, world)?
            }
            m => bail!("unknown attacker mode `{m}` (expected lazy or semi)"),
        };
        write_scores(&ctx.path(Path::new(&format!("scores_{mode}.csv"))), &trials)?;
        let e = eer(&ScorePools::from_trials(&trials))?;
        if mode == "lazy" {
            row.eer_lazy = e;
        } else {
            row.eer_semi = e;
        }
    }
    let rows = [row];
    let report = ctx.path(&a.report);
    write_report_csv(&report, &rows)?;
    ctx.write(&report.with_extension("txt"), &format_report_table(&rows))?;
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let exps = a
        .exps
        .split(',')
        .map(|s| s.trim().parse::<AblationId>())
        .collect::<emoanon::Result<Vec<_>>>()?;
    ensure!(!exps.is_empty(), "no experiments given");
    let run = run_ablation(&ctx.cfg.plan(), &exps, ctx.cfg.seed)?;
    let report = ctx.path(&a.report);
    write_report_csv(&report, &run.reports)?;
    let table = format_report_table(&run.reports);
    ctx.write(&report.with_extension("txt"), &table)?;
    for (id, log) in &run.logs {
        write_loss_log(&ctx.path(Path::new(&format!("{id}.loss.csv"))), log)?;
    }
    if a.save_models {
        for (id, model) in &run.models {
            let mut ck = emoanon::svlm::Checkpoint::new(model.clone());
            ck.meta.insert("run.experiment".into(), id.to_string());
            write_checkpoint(&ctx.path(Path::new(&format!("{id}.ckpt"))), &ck)?;
        }
    }
    print!("{table}");
    Ok(())
}

fn plot_cmd(ctx: &Ctx, a: PlotArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in a.reports.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        rows.extend(read_report_csv(&ctx.path(Path::new(p)))?);
    }
    ensure!(!rows.is_empty(), "no report rows to plot");
    match a.kind {
        PlotKind::PrivacyEmotion => {
            ctx.write(Path::new("privacy_emotion.csv"), &privacy_emotion_csv(&rows))?;
            ctx.write(Path::new("privacy_emotion.svg"), &privacy_emotion_svg(&rows))?;
        }
    }
    Ok(())
}
