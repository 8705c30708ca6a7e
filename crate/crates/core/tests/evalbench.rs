use std::path::Path;

use emoanon::evalbench::*;
use emoanon::worldsim::{encode_utterance, gen_corpus, Emotion, SplitSpec, SplitWeights, TokenFrame, Utterance, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive sweep written independently of `eer`: rates are recomputed by
/// counting at every candidate threshold and interpolated in floating point.
fn eer_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    let rates = |t: f64| {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        (far, frr)
    };
    let pts: Vec<(f64, f64)> = ts.into_iter().map(rates).collect();
    for i in 0..pts.len() {
        let (far, frr) = pts[i];
        if far == frr {
            return 100.0 * far;
        }
        if frr > far {
            let (f0, r0) = pts[i - 1];
            let x = (f0 - r0) / ((f0 - r0) - (far - frr));
            return 100.0 * (f0 + x * (far - f0));
        }
    }
    unreachable!()
}

fn pools(genuine: &[f64], impostor: &[f64]) -> ScorePools {
    ScorePools {
        genuine: genuine.to_vec(),
        impostor: impostor.to_vec(),
    }
}

#[test]
fn uar_reproduces_table_rows() {
    let base = uar_from_recalls(&[35.8, 81.9, 33.1, 8.0]);
    let exp7 = uar_from_recalls(&[38.8, 62.8, 52.7, 42.6]);
    assert!((base - 39.70).abs() < 1e-9, "{base}");
    assert!((exp7 - 49.225).abs() < 1e-9, "{exp7}");
    assert_eq!(format!("{base:.1}"), "39.7");
    assert_eq!(format!("{exp7:.1}"), "49.2");
}

#[test]
fn diagonal_confusion_gives_full_uar() {
    let mut cm = ConfusionMatrix::new();
    for (i, e) in Emotion::ALL.into_iter().enumerate() {
        for _ in 0..=i {
            cm.add(e, e);
        }
    }
    let r = uar(&cm).unwrap();
    assert_eq!(r.average, 100.0);
    assert_eq!(r.per_class, [100.0; 4]);
}

#[test]
fn empty_class_row_is_named() {
    let mut cm = ConfusionMatrix::new();
    cm.add(Emotion::Angry, Emotion::Angry);
    cm.add(Emotion::Happy, Emotion::Sad);
    cm.add(Emotion::Sad, Emotion::Sad);
    let err = uar(&cm).unwrap_err().to_string();
    assert!(err.contains("neutral"), "{err}");
}

#[test]
fn eer_fixed_cases() {
    assert_eq!(eer(&pools(&[1.0; 5], &[0.0; 7])).unwrap(), 0.0);
    let same = [0.1, 0.4, 0.4, 0.9, 0.3];
    assert_eq!(eer(&pools(&same, &same)).unwrap(), 50.0);
    let (g, i) = ([0.9, 0.8, 0.4], [0.7, 0.3, 0.2]);
    let got = eer(&pools(&g, &i)).unwrap();
    assert!((got - eer_oracle(&g, &i)).abs() < 1e-9);
    // Fully inverted scores: every genuine trial is below every impostor.
    assert_eq!(eer(&pools(&[0.0, 0.1], &[0.5, 0.9])).unwrap(), 100.0);
    assert!(eer(&pools(&[], &[0.1])).is_err());
    assert!(eer(&pools(&[f64::NAN], &[0.1])).is_err());
}

proptest! {
    #[test]
    fn eer_matches_brute_force(
        g in prop::collection::vec(0u8..20, 1..100),
        i in prop::collection::vec(0u8..20, 1..100),
    ) {
        let g: Vec<f64> = g.into_iter().map(|x| x as f64 / 19.0).collect();
        let i: Vec<f64> = i.into_iter().map(|x| x as f64 / 19.0).collect();
        let got = eer(&pools(&g, &i)).unwrap();
        prop_assert!((got - eer_oracle(&g, &i)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn eer_invariant_under_monotone_maps(
        g in prop::collection::vec(-5.0f64..5.0, 1..60),
        i in prop::collection::vec(-5.0f64..5.0, 1..60),
        a in 0.1f64..4.0,
        b in -3.0f64..3.0,
    ) {
        let base = eer(&pools(&g, &i)).unwrap();
        let f = |x: &f64| (a * x + b).tanh() * 7.0 + x.powi(3);
        let gm: Vec<f64> = g.iter().map(f).collect();
        let im: Vec<f64> = i.iter().map(f).collect();
        prop_assert_eq!(eer(&pools(&gm, &im)).unwrap(), base);
    }

    #[test]
    fn uar_invariant_under_row_duplication(
        counts in prop::array::uniform4(prop::array::uniform4(0u64..20)),
        class in 0usize..4,
        k in 2u64..6,
    ) {
        let mut cm = ConfusionMatrix { counts };
        for (r, row) in cm.counts.iter_mut().enumerate() {
            row[r] += 1;
        }
        let base = uar(&cm).unwrap();
        let mut scaled = cm.clone();
        scaled.counts[class].iter_mut().for_each(|c| *c *= k);
        let r = uar(&scaled).unwrap();
        for j in 0..4 {
            prop_assert!((r.per_class[j] - base.per_class[j]).abs() < 1e-9);
        }
        prop_assert!((r.average - base.average).abs() < 1e-9);
    }
}

fn world(noise: f64) -> WorldConfig {
    WorldConfig {
        noise_rate: noise,
        ..WorldConfig::default()
    }
}

fn sources(w: &WorldConfig, n: usize, seed: u64) -> Vec<Utterance> {
    gen_corpus(w, &[SplitSpec::new("test", n, SplitWeights::Balanced)], seed)
        .unwrap()
        .utterances
}

fn output(u: &Utterance, frames: Vec<TokenFrame>) -> AnonymizedOutput {
    AnonymizedOutput {
        id: u.id.clone(),
        frames,
        source: u.clone(),
    }
}

fn reencode(u: &Utterance, w: &WorldConfig, speaker: usize, emotion: Emotion) -> Vec<TokenFrame> {
    let v = Utterance {
        speaker,
        emotion,
        ..u.clone()
    };
    encode_utterance(&v, w, 0).unwrap()
}

#[test]
fn echo_source_is_a_privacy_failure() {
    let w = world(0.05);
    let outs: Vec<_> = sources(&w, 120, 1)
        .iter()
        .map(|u| output(u, encode_utterance(u, &w, 0).unwrap()))
        .collect();
    let trials = attack_sim(&outs, &Attack::Lazy, &w).unwrap();
    assert_eq!(trials.len(), outs.len() * 16);
    let e = eer(&ScorePools::from_trials(&trials)).unwrap();
    assert!(e < 5.0, "echo EER {e}");
}

#[test]
fn fixed_target_hides_the_source_speaker() {
    let w = world(0.05);
    let target = w.n_speakers - 1;
    let outs: Vec<_> = sources(&w, 300, 2)
        .iter()
        .filter(|u| u.speaker != target)
        .map(|u| output(u, reencode(u, &w, target, u.emotion)))
        .collect();
    let lazy = eer(&ScorePools::from_trials(&attack_sim(&outs, &Attack::Lazy, &w).unwrap())).unwrap();
    assert!((40.0..=60.0).contains(&lazy), "fixed-target lazy EER {lazy}");
    let (enroll, test) = outs.split_at(outs.len() / 2);
    let semi = attack_sim(test, &Attack::Semi { enrollment: enroll }, &w).unwrap();
    let semi = eer(&ScorePools::from_trials(&semi)).unwrap();
    assert!((0.0..=100.0).contains(&semi));
}

#[test]
fn semi_attacker_learns_a_consistent_mapping() {
    // Each source speaker is rendered as a distinct other speaker; the lazy
    // attacker is fooled but centroids fitted on anonymized data are not.
    let w = world(0.0);
    let all: Vec<_> = sources(&w, 480, 3)
        .iter()
        .map(|u| output(u, reencode(u, &w, (u.speaker + 1) % w.n_speakers, u.emotion)))
        .collect();
    let (enroll, test) = all.split_at(240);
    let lazy = eer(&ScorePools::from_trials(&attack_sim(test, &Attack::Lazy, &w).unwrap())).unwrap();
    let semi = eer(&ScorePools::from_trials(
        &attack_sim(test, &Attack::Semi { enrollment: enroll }, &w).unwrap(),
    ))
    .unwrap();
    assert!(semi < lazy, "semi {semi} lazy {lazy}");
}

#[test]
fn attack_needs_two_speakers() {
    let w = world(0.0);
    let outs: Vec<_> = sources(&w, 64, 4)
        .iter()
        .filter(|u| u.speaker == 0)
        .map(|u| output(u, encode_utterance(u, &w, 0).unwrap()))
        .collect();
    assert!(!outs.is_empty());
    assert!(attack_sim(&outs, &Attack::Lazy, &w).is_err());
}

#[test]
fn emotion_eval_constructions() {
    let w = world(0.0);
    let srcs = sources(&w, 200, 5);
    let preserved: Vec<_> = srcs.iter().map(|u| output(u, reencode(u, &w, 3, u.emotion))).collect();
    assert_eq!(uar(&emotion_eval(&preserved, &w)).unwrap().average, 100.0);

    let neutral: Vec<_> = srcs.iter().map(|u| output(u, reencode(u, &w, 3, Emotion::Neutral))).collect();
    let r = uar(&emotion_eval(&neutral, &w)).unwrap();
    assert_eq!(r.per_class, [0.0, 0.0, 100.0, 0.0]);
    assert_eq!(r.average, 25.0);
}

#[test]
fn random_outputs_sit_at_chance() {
    let w = world(0.0);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let outs: Vec<_> = sources(&w, 2000, 6)
        .iter()
        .map(|u| {
            let frames = encode_utterance(u, &w, 0)
                .unwrap()
                .into_iter()
                .map(|f| TokenFrame {
                    semantic: f.semantic,
                    acoustic: (0..w.n_codebooks).map(|_| r.random_range(0..w.acoustic_vocab)).collect(),
                })
                .collect();
            output(u, frames)
        })
        .collect();
    let u = uar(&emotion_eval(&outs, &w)).unwrap().average;
    assert!((u - 25.0).abs() <= 3.0, "random UAR {u}");
}

#[test]
fn content_error_of_clean_outputs_is_zero() {
    let w = world(0.0);
    let outs: Vec<_> = sources(&w, 40, 7)
        .iter()
        .map(|u| output(u, reencode(u, &w, 2, u.emotion)))
        .collect();
    assert_eq!(content_error(&outs, &w), 0.0);
}

fn row(name: &str, x: f64) -> MetricsReport {
    MetricsReport {
        experiment: name.into(),
        components: "FT+NeuEmo".into(),
        content_err: 0.1 + x,
        uar: 49.225,
        recalls: [38.8, 62.8, 52.7, 42.6],
        eer_lazy: 48.98 + x,
        eer_semi: 1.0 / 3.0,
        latency_ms: 180.0,
    }
}

#[test]
fn report_csv_layout_and_round_trip() {
    let empty = format_report_csv(&[]);
    assert_eq!(empty, format!("{REPORT_HEADER}\n"));
    assert_eq!(
        REPORT_HEADER,
        "experiment,components,content_err,uar,ang,hap,neu,sad,eer_lazy,eer_semi,latency_ms"
    );
    let one = format_report_csv(&[row("exp7", 0.0)]);
    assert_eq!(one.lines().count(), 2);
    let rows = vec![row("exp2", 0.2), row("exp7", 1e-17)];
    let text = format_report_csv(&rows);
    assert_eq!(parse_report_csv(&text, Path::new("r.csv")).unwrap(), rows);
    assert_eq!(format_report_csv(&rows), text);
    let table = format_report_table(&rows);
    assert!(table.contains("proxy"));
    assert!(table.lines().nth(2).unwrap().starts_with("exp2"));
}

#[test]
fn score_file_round_trip() {
    let trials = vec![
        Trial {
            id: "t-1:0".into(),
            claimed: 0,
            truth: 0,
            score: 0.75,
        },
        Trial {
            id: "t-1:1".into(),
            claimed: 1,
            truth: 0,
            score: 0.1 + 0.2,
        },
    ];
    let text = format_scores(&trials);
    assert!(text.starts_with("trial_id,claimed_speaker,true_speaker,score\n"));
    assert_eq!(parse_scores(&text, Path::new("s.csv")).unwrap(), trials);
    assert!(parse_scores("id,score\n", Path::new("s.csv")).is_err());
}

#[test]
fn plot_outputs() {
    let rows = vec![row("baseline", 0.0), row("exp<7>", 1.0)];
    let csv = privacy_emotion_csv(&rows);
    assert_eq!(csv.lines().next(), Some("experiment,eer_lazy,uar"));
    assert_eq!(csv.lines().count(), 3);
    let svg = privacy_emotion_svg(&rows);
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 2);
    assert!(svg.contains("exp&lt;7&gt;"));
    assert!(svg.contains("EER-lazy"));
    assert_eq!(svg, privacy_emotion_svg(&rows));
}
