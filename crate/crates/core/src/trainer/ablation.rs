use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{build_examples, train, LogRow, TrainConfig};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate, AnonymizedOutput, MetricsReport};
use crate::pairforge::{build_pairs, continuation_pairs, filter, PairFilterConfig, TrainingPair};
use crate::streamer::{latency_report, StreamConfig};
use crate::svlm::{generate, Aggregation, Branch, ModelConfig, Sampling, SpeechLm};
use crate::worldsim::{
    encode_utterance, gen_corpus, Corpus, Emotion, ManifestRecord, SplitSpec, SplitWeights, TokenFrame, Utterance,
    WorldConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationId {
    Baseline,
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    Exp6,
    Exp7,
}

/// Components active in one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationToggles {
    /// Finetune on the balanced emotional corpus.
    pub finetune: bool,
    pub neutral_emotion: bool,
    pub sep: bool,
    /// `None` when there is no distillation head.
    pub aggregation: Option<Aggregation>,
    pub branch: Branch,
}

impl AblationId {
    pub const ALL: [AblationId; 8] = [
        AblationId::Baseline,
        AblationId::Exp1,
        AblationId::Exp2,
        AblationId::Exp3,
        AblationId::Exp4,
        AblationId::Exp5,
        AblationId::Exp6,
        AblationId::Exp7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationId::Baseline => "baseline",
            AblationId::Exp1 => "exp1",
            AblationId::Exp2 => "exp2",
            AblationId::Exp3 => "exp3",
            AblationId::Exp4 => "exp4",
            AblationId::Exp5 => "exp5",
            AblationId::Exp6 => "exp6",
            AblationId::Exp7 => "exp7",
        }
    }

    pub fn toggles(self) -> AblationToggles {
        let mut t = AblationToggles {
            finetune: false,
            neutral_emotion: false,
            sep: false,
            aggregation: None,
            branch: Branch::None,
        };
        let rank = self as usize;
        t.finetune = rank >= 1;
        t.neutral_emotion = rank >= 2;
        t.sep = rank >= 3;
        let distill = |t: &mut AblationToggles, a, b| {
            t.aggregation = Some(a);
            t.branch = b;
        };
        match self {
            AblationId::Exp4 => distill(&mut t, Aggregation::StatPool, Branch::Acoustic),
            // Exp5 and Exp7 share their toggles: the exp5 branch is unmarked
            // in the published grid and acoustic is the stated default.
            AblationId::Exp5 | AblationId::Exp7 => distill(&mut t, Aggregation::Causal, Branch::Acoustic),
            AblationId::Exp6 => distill(&mut t, Aggregation::Causal, Branch::Semantic),
            _ => {}
        }
        t
    }
}

impl fmt::Display for AblationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown experiment `{s}`")))
    }
}

impl AblationToggles {
    /// Ablation-grid marks joined with `+`.
    pub fn components(&self) -> String {
        let mut v = Vec::new();
        if self.finetune {
            v.push("FT");
        }
        if self.neutral_emotion {
            v.push("NeuEmo");
        }
        if self.sep {
            v.push("SEP");
        }
        match self.aggregation {
            Some(Aggregation::StatPool) => v.push("StatPool"),
            Some(Aggregation::Causal) => v.push("Causal"),
            None => {}
        }
        match self.branch {
            Branch::Acoustic => v.push("Aco"),
            Branch::Semantic => v.push("Sem"),
            Branch::None => {}
        }
        if v.is_empty() {
            "-".into()
        } else {
            v.join("+")
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.use_sep = self.sep;
        c.branch = self.branch;
        if let Some(a) = self.aggregation {
            c.aggregation = a;
        }
        c
    }
}

/// Everything an ablation sweep needs besides the experiment list and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub world: WorldConfig,
    /// Shape of every model; branch, aggregation and SEP come from the toggles.
    pub model: ModelConfig,
    /// Emotion-skewed utterances for the baseline.
    pub pretrain_size: usize,
    /// Balanced utterances for finetuning.
    pub finetune_size: usize,
    /// Balanced utterances whose anonymized outputs enroll the semi attacker.
    pub enroll_size: usize,
    pub test_size: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub filter: PairFilterConfig,
    /// Prompt share of each continuation pair.
    pub continuation_fraction: f64,
    /// Speaker whose neutral utterance prompts every output. Defaults to the
    /// last speaker, which is then left out of the evaluated sources.
    pub target_speaker: Option<usize>,
    pub stream: StreamConfig,
}

impl Default for AblationPlan {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            model: ModelConfig::from_world(&world),
            world,
            pretrain_size: 400,
            finetune_size: 400,
            enroll_size: 120,
            test_size: 200,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            filter: PairFilterConfig::default(),
            continuation_fraction: 0.5,
            target_speaker: None,
            stream: StreamConfig::default(),
        }
    }
}

/// Metrics rows plus the trained models and loss logs behind them.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub reports: Vec<MetricsReport>,
    pub models: Vec<(AblationId, SpeechLm)>,
    pub logs: Vec<(AblationId, Vec<LogRow>)>,
}

/// Greedy anonymization of each source with one fixed prompt. The
/// distillation head is stripped first, as at deployment.
pub fn anonymize(
    model: &SpeechLm,
    prompt: &[TokenFrame],
    sources: &[(Utterance, Vec<TokenFrame>)],
) -> Result<Vec<AnonymizedOutput>> {
    let deployed = model.strip_distill();
    sources
        .iter()
        .map(|(u, frames)| {
            let sem: Vec<usize> = frames.iter().map(|f| f.semantic).collect();
            Ok(AnonymizedOutput {
                id: u.id.clone(),
                frames: generate(&deployed, prompt, &sem, Sampling::Greedy)?,
                source: u.clone(),
            })
        })
        .collect()
}

struct Prepared {
    world: WorldConfig,
    corpus: Corpus,
    tokens: BTreeMap<String, Vec<TokenFrame>>,
    prompt: Vec<TokenFrame>,
    enroll: Vec<(Utterance, Vec<TokenFrame>)>,
    test: Vec<(Utterance, Vec<TokenFrame>)>,
}

fn prepare(plan: &AblationPlan, seed: u64) -> Result<Prepared> {
    let world = WorldConfig {
        seed,
        ..plan.world.clone()
    };
    world.validate()?;
    let splits = [
        SplitSpec::new("pretrain", plan.pretrain_size, SplitWeights::Configured),
        SplitSpec::new("finetune", plan.finetune_size, SplitWeights::Balanced),
        SplitSpec::new("enroll", plan.enroll_size, SplitWeights::Balanced),
        SplitSpec::new("test", plan.test_size, SplitWeights::Balanced),
    ];
    let corpus = gen_corpus(&world, &splits, seed)?;
    let mut tokens = BTreeMap::new();
    for u in &corpus.utterances {
        tokens.insert(u.id.clone(), encode_utterance(u, &world, seed)?);
    }
    let target = plan.target_speaker.unwrap_or(world.n_speakers - 1);
    if target >= world.n_speakers {
        return Err(Error::Config(format!("target speaker {target} outside 0..{}", world.n_speakers)));
    }
    let prompt_utt = corpus
        .split("enroll")
        .into_iter()
        .find(|u| u.speaker == target && u.emotion == Emotion::Neutral)
        .ok_or_else(|| Error::Config(format!("no neutral enrollment utterance for target speaker {target}")))?;
    let prompt = tokens[&prompt_utt.id].clone();
    let pick = |split: &str| -> Vec<(Utterance, Vec<TokenFrame>)> {
        corpus
            .split(split)
            .into_iter()
            .filter(|u| u.speaker != target)
            .map(|u| (u.clone(), tokens[&u.id].clone()))
            .collect()
    };
    let enroll = pick("enroll");
    let test = pick("test");
    Ok(Prepared {
        world,
        tokens,
        prompt,
        enroll,
        test,
        corpus,
    })
}

/// Training pairs for one experiment's finetuning stage.
pub fn finetune_pairs(
    toggles: &AblationToggles,
    records: &[ManifestRecord],
    plan: &AblationPlan,
) -> Result<Vec<TrainingPair>> {
    let mut pairs = continuation_pairs(records, plan.continuation_fraction)?;
    if toggles.neutral_emotion {
        plan.filter.validate()?;
        pairs.extend(build_pairs(&filter(records, &plan.filter), &plan.filter));
    }
    pairs.sort();
    Ok(pairs)
}

/// Trains and evaluates each requested experiment on one shared world.
/// The baseline is trained on continuation pairs from the skewed split; every
/// other row is warm-started from it and finetuned on the balanced split.
pub fn run_ablation(plan: &AblationPlan, exps: &[AblationId], seed: u64) -> Result<AblationRun> {
    let p = prepare(plan, seed)?;
    let base_cfg = AblationId::Baseline.toggles().apply(&plan.model);
    let pre_records = p.corpus.records_of("pretrain");
    let pre_pairs = continuation_pairs(&pre_records, plan.continuation_fraction)?;
    let pre_examples = build_examples(&pre_pairs, &p.tokens, &pre_records, &base_cfg)?;
    let pre_cfg = TrainConfig {
        seed,
        ..plan.pretrain.clone()
    };
    log::info!("baseline: {} continuation pairs", pre_examples.len());
    let baseline = train(SpeechLm::new(base_cfg, seed)?, &pre_examples, &pre_cfg)?;

    let ft_records = p.corpus.records_of("finetune");
    let latency = latency_report(&plan.stream);
    let mut run = AblationRun {
        reports: Vec::new(),
        models: Vec::new(),
        logs: Vec::new(),
    };
    for &id in exps {
        let toggles = id.toggles();
        let (model, log) = if id == AblationId::Baseline {
            (baseline.model.clone(), baseline.log.clone())
        } else {
            let cfg = toggles.apply(&plan.model);
            let pairs = finetune_pairs(&toggles, &ft_records, plan)?;
            let examples = build_examples(&pairs, &p.tokens, &ft_records, &cfg)?;
            log::info!("{id}: {} finetuning pairs", examples.len());
            let init = SpeechLm::warm_start(cfg, seed, &baseline.model)?;
            let ft_cfg = TrainConfig {
                seed,
                ..plan.finetune.clone()
            };
            let t = train(init, &examples, &ft_cfg)?;
            (t.model, t.log)
        };
        let test = anonymize(&model, &p.prompt, &p.test)?;
        let enroll = anonymize(&model, &p.prompt, &p.enroll)?;
        let report = evaluate(id.as_str(), &toggles.components(), &test, &enroll, &p.world, latency)?;
        log::info!("{id}: UAR {:.1}, EER-L {:.1}", report.uar, report.eer_lazy);
        run.reports.push(report);
        run.models.push((id, model));
        run.logs.push((id, log));
    }
    Ok(run)
}
