use std::collections::BTreeMap;
use std::path::Path;

use emoanon::pairforge::{continuation_pairs, PairPolicy};
use emoanon::svlm::*;
use emoanon::trainer::*;
use emoanon::worldsim::{encode_utterance, gen_corpus, SplitSpec, SplitWeights, TokenFrame, WorldConfig};
use emoanon::Error;

fn world() -> WorldConfig {
    WorldConfig {
        content_vocab: 4,
        acoustic_vocab: 8,
        n_codebooks: 2,
        n_speakers: 2,
        noise_rate: 0.0,
        min_frames: 4,
        max_frames: 6,
        ..WorldConfig::default()
    }
}

fn model_config(branch: Branch, weight: f64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        slow_layers: 1,
        fast_layers: 1,
        heads: 2,
        context: 32,
        teacher_dim: 4,
        distill_layers: 1,
        branch,
        distill_weight: weight,
        ..ModelConfig::from_world(&world())
    }
}

/// Continuation examples from a small encoded corpus.
fn examples(n: usize, cfg: &ModelConfig) -> Vec<Example> {
    let w = world();
    let corpus = gen_corpus(&w, &[SplitSpec::new("train", n, SplitWeights::Balanced)], 3).unwrap();
    let tokens: BTreeMap<String, Vec<TokenFrame>> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.clone(), encode_utterance(u, &w, 3).unwrap()))
        .collect();
    let records = corpus.records_of("train");
    let pairs = continuation_pairs(&records, 0.5).unwrap();
    build_examples(&pairs, &tokens, &records, cfg).unwrap()
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1000,
        lr: 3e-3,
        batch_size: 2,
        seed: 11,
        max_steps: Some(steps),
    }
}

#[test]
fn overfits_four_pairs() {
    let cfg = model_config(Branch::None, 0.0);
    let ex = examples(4, &cfg);
    assert_eq!(ex.len(), 4);
    let tc = TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        ..train_cfg(500)
    };
    let t = train(SpeechLm::new(cfg, 1).unwrap(), &ex, &tc).unwrap();
    assert_eq!(t.log.len(), 500);
    let last = t.log.last().unwrap().loss;
    assert!(last.lm() < 0.1, "L_LM {} after 500 steps", last.lm());
    // Smoothed over 50-step windows the curve keeps going down.
    let windows: Vec<f64> = t
        .log
        .chunks(50)
        .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = model_config(Branch::Acoustic, 0.01);
    let ex = examples(6, &cfg);
    let run = || {
        let t = train(SpeechLm::new(cfg.clone(), 5).unwrap(), &ex, &train_cfg(12)).unwrap();
        (save_checkpoint(&t.checkpoint()), format_loss_log(&t.log))
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seed_changes_batch_order() {
    let cfg = model_config(Branch::None, 0.0);
    let t1 = Trainer::new(SpeechLm::new(cfg.clone(), 0).unwrap(), train_cfg(1)).unwrap();
    let t2 = Trainer::new(
        SpeechLm::new(cfg, 0).unwrap(),
        TrainConfig {
            seed: 12,
            ..train_cfg(1)
        },
    )
    .unwrap();
    let orders = |t: &Trainer| (0..5).flat_map(|s| t.batch_indices(10, s)).collect::<Vec<_>>();
    assert_ne!(orders(&t1), orders(&t2));
    // Every epoch visits each example once.
    let mut epoch = orders(&t1);
    epoch.sort();
    assert_eq!(epoch, (0..10).collect::<Vec<_>>());
}

#[test]
fn zero_weight_matches_headless_run() {
    let with_head = model_config(Branch::Acoustic, 0.0);
    let headless = model_config(Branch::None, 0.0);
    let ex_a = examples(6, &with_head);
    let ex_b = examples(6, &headless);
    let a = train(SpeechLm::new(with_head, 9).unwrap(), &ex_a, &train_cfg(15)).unwrap();
    let b = train(SpeechLm::new(headless, 9).unwrap(), &ex_b, &train_cfg(15)).unwrap();
    assert!(a.model.has_distill_head() && !b.model.has_distill_head());
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.loss.slow.to_bits(), rb.loss.slow.to_bits());
        assert_eq!(ra.loss.fast.to_bits(), rb.loss.fast.to_bits());
        assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
    }
    assert_eq!(a.model.strip_distill().params, b.model.params);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = model_config(Branch::Acoustic, 0.1);
    let ex = examples(7, &cfg);
    let tc = train_cfg(20);
    let full = train(SpeechLm::new(cfg.clone(), 2).unwrap(), &ex, &tc).unwrap();

    let mut first = Trainer::new(SpeechLm::new(cfg, 2).unwrap(), tc.clone()).unwrap();
    first.run_until(&ex, 9).unwrap();
    let bytes = save_checkpoint(&first.checkpoint());
    let mut second = Trainer::resume(load_checkpoint(&bytes).unwrap(), tc).unwrap();
    assert_eq!(second.step(), 9);
    second.run(&ex).unwrap();

    assert_eq!(second.model.params, full.model.params);
    assert_eq!(second.optimizer, full.optimizer);
    let joined: Vec<LogRow> = first.log.iter().chain(&second.log).copied().collect();
    assert_eq!(joined, full.log);
}

#[test]
fn resume_rejects_mismatched_seed() {
    let cfg = model_config(Branch::None, 0.0);
    let t = Trainer::new(SpeechLm::new(cfg, 0).unwrap(), train_cfg(1)).unwrap();
    let other = TrainConfig {
        seed: 99,
        ..train_cfg(1)
    };
    assert!(matches!(Trainer::resume(t.checkpoint(), other), Err(Error::Checkpoint(_))));
    let mut bare = t.checkpoint();
    bare.optimizer = None;
    assert!(Trainer::resume(bare, train_cfg(1)).is_err());
}

#[test]
fn nan_loss_aborts_with_step() {
    let cfg = model_config(Branch::None, 0.0);
    let ex = examples(4, &cfg);
    let mut model = SpeechLm::new(cfg, 0).unwrap();
    let id = model.params.id("head.q1.w").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, train_cfg(5)).unwrap();
    match t.run(&ex) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn empty_examples_rejected() {
    let cfg = model_config(Branch::None, 0.0);
    let mut t = Trainer::new(SpeechLm::new(cfg, 0).unwrap(), train_cfg(5)).unwrap();
    assert!(matches!(t.run(&[]), Err(Error::InvalidInput(_))));
}

#[test]
fn budget_from_epochs_and_cap() {
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 8,
        max_steps: None,
        ..TrainConfig::default()
    };
    assert_eq!(tc.steps_per_epoch(17), 3);
    assert_eq!(tc.total_steps(17), 15);
    let capped = TrainConfig {
        max_steps: Some(4),
        ..tc
    };
    assert_eq!(capped.total_steps(17), 4);
    assert_eq!(TrainConfig::default().lr, 1e-4);
    assert_eq!(TrainConfig::default().epochs, 5);
}

#[test]
fn loss_log_round_trip() {
    let rows = vec![
        LogRow {
            step: 0,
            loss: LossBreakdown::compose(2.5, 1.25, 0.3, 0.01),
        },
        LogRow {
            step: 1,
            loss: LossBreakdown::compose(0.1 + 0.2, 1e-9, 0.0, 0.01),
        },
    ];
    let text = format_loss_log(&rows);
    assert!(text.starts_with("step,L_slowAR,L_fastAR,L_emo,total\n"));
    assert_eq!(parse_loss_log(&text, Path::new("log.csv")).unwrap(), rows);
    assert!(parse_loss_log("bad\n", Path::new("log.csv")).is_err());
}

#[test]
fn build_examples_reports_missing_tokens() {
    let cfg = model_config(Branch::None, 0.0);
    let w = world();
    let corpus = gen_corpus(&w, &[SplitSpec::new("train", 3, SplitWeights::Balanced)], 3).unwrap();
    let records = corpus.records_of("train");
    let pairs = continuation_pairs(&records, 0.5).unwrap();
    assert!(pairs.iter().all(|p| p.policy == PairPolicy::Continuation));
    let err = build_examples(&pairs, &BTreeMap::new(), &records, &cfg).unwrap_err();
    assert!(err.to_string().contains("no tokens"), "{err}");
}

#[test]
fn ablation_toggle_table() {
    use AblationId::*;
    let t = |id: AblationId| id.toggles();
    assert!(!t(Baseline).finetune && !t(Baseline).sep && t(Baseline).branch == Branch::None);
    assert!(t(Exp1).finetune && !t(Exp1).neutral_emotion);
    assert!(t(Exp2).neutral_emotion && !t(Exp2).sep);
    assert!(t(Exp3).sep && t(Exp3).aggregation.is_none() && t(Exp3).branch == Branch::None);
    assert_eq!(t(Exp4).aggregation, Some(Aggregation::StatPool));
    assert_eq!(t(Exp4).branch, Branch::Acoustic);
    assert_eq!(t(Exp6).branch, Branch::Semantic);
    assert_eq!(t(Exp7).aggregation, Some(Aggregation::Causal));
    assert_eq!(t(Exp7).branch, Branch::Acoustic);
    assert_eq!(t(Exp5), t(Exp7));
    assert_eq!(t(Exp7).components(), "FT+NeuEmo+SEP+Causal+Aco");
    assert_eq!(t(Baseline).components(), "-");
    for id in AblationId::ALL {
        assert_eq!(id.as_str().parse::<AblationId>().unwrap(), id);
        // Every later experiment keeps the components of the earlier ones.
        if id >= Exp3 {
            assert!(t(id).finetune && t(id).neutral_emotion && t(id).sep);
        }
    }
    assert!("exp8".parse::<AblationId>().is_err());
}

#[test]
fn toggles_shape_the_model() {
    let base = model_config(Branch::Acoustic, 0.01);
    let c = AblationId::Exp2.toggles().apply(&base);
    assert!(!c.use_sep && c.branch == Branch::None && !c.distill_active());
    let c = AblationId::Exp4.toggles().apply(&base);
    assert!(c.use_sep && c.aggregation == Aggregation::StatPool && c.distill_active());
}

fn tiny_plan() -> AblationPlan {
    let world = WorldConfig {
        content_vocab: 4,
        acoustic_vocab: 8,
        n_codebooks: 2,
        n_speakers: 3,
        min_frames: 3,
        max_frames: 5,
        ..WorldConfig::default()
    };
    let tc = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        batch_size: 4,
        seed: 0,
        max_steps: Some(3),
    };
    AblationPlan {
        model: ModelConfig {
            context: 32,
            ..model_config(Branch::None, 0.01)
        },
        world,
        pretrain_size: 24,
        finetune_size: 24,
        enroll_size: 24,
        test_size: 24,
        pretrain: tc.clone(),
        finetune: tc,
        ..AblationPlan::default()
    }
}

#[test]
fn ablation_rows_follow_request_order() {
    let plan = tiny_plan();
    let exps = [AblationId::Baseline, AblationId::Exp2, AblationId::Exp7];
    let run = run_ablation(&plan, &exps, 7).unwrap();
    let names: Vec<&str> = run.reports.iter().map(|r| r.experiment.as_str()).collect();
    assert_eq!(names, ["baseline", "exp2", "exp7"]);
    assert_eq!(run.reports[2].components, "FT+NeuEmo+SEP+Causal+Aco");
    assert_eq!(run.reports[0].latency_ms, 180.0);
    assert!(run.models[2].1.has_distill_head());
    assert!(!run.models[1].1.has_distill_head());
    for r in &run.reports {
        assert!((0.0..=100.0).contains(&r.uar));
        assert!((r.uar - r.recalls.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }
    // The baseline row is the pretrained model itself.
    let again = run_ablation(&plan, &[AblationId::Baseline], 7).unwrap();
    assert_eq!(again.reports[0], run.reports[0]);
}

#[test]
fn baseline_uses_continuation_pairs_only() {
    let plan = tiny_plan();
    let corpus = gen_corpus(
        &plan.world,
        &[SplitSpec::new("finetune", 24, SplitWeights::Balanced)],
        1,
    )
    .unwrap();
    let records = corpus.records_of("finetune");
    let exp1 = finetune_pairs(&AblationId::Exp1.toggles(), &records, &plan).unwrap();
    assert!(exp1.iter().all(|p| p.policy == PairPolicy::Continuation));
    let exp2 = finetune_pairs(&AblationId::Exp2.toggles(), &records, &plan).unwrap();
    assert!(exp2.iter().any(|p| p.policy == PairPolicy::NeutralEmotion));
    assert!(exp2.len() > exp1.len());
}
