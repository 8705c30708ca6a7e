//! Oracle-backed emotion, privacy and content metrics in the style of the
//! VoicePrivacy protocol, and ablation-grid reporting.

mod attack;
mod plot;
mod report;

use crate::error::{Error, Result};
use crate::worldsim::{oracle_content_err_acoustic, oracle_ser_acoustic, Emotion, TokenFrame, Utterance, WorldConfig};

pub use attack::{
    attack_sim, format_scores, parse_scores, write_scores, Attack, ScorePools, Trial, SCORE_HEADER,
};
pub use plot::{privacy_emotion_csv, privacy_emotion_svg};
pub use report::{
    format_report_csv, format_report_table, parse_report_csv, read_report_csv, write_report_csv, MetricsReport,
    REPORT_HEADER,
};

/// Rows are true emotions, columns predictions, both in [`Emotion::ALL`] order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, truth: Emotion, predicted: Emotion) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn row_sum(&self, truth: Emotion) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recalls {
    /// Per-class recall in percent, [`Emotion::ALL`] order.
    pub per_class: [f64; 4],
    pub average: f64,
}

/// Unweighted average of per-class recalls.
pub fn uar_from_recalls(recalls: &[f64; 4]) -> f64 {
    recalls.iter().sum::<f64>() / 4.0
}

pub fn uar(cm: &ConfusionMatrix) -> Result<Recalls> {
    let mut per_class = [0.0; 4];
    for e in Emotion::ALL {
        let n = cm.row_sum(e);
        if n == 0 {
            return Err(Error::InvalidInput(format!("no test items for class `{e}`")));
        }
        per_class[e.index()] = 100.0 * cm.counts[e.index()][e.index()] as f64 / n as f64;
    }
    Ok(Recalls {
        per_class,
        average: uar_from_recalls(&per_class),
    })
}

/// Equal error rate in percent. Trials are accepted when `score >= t`;
/// thresholds sweep the pooled unique scores plus one above the maximum.
/// Between the two thresholds that bracket the false-accept / false-reject
/// crossing both rates are interpolated linearly. The arithmetic runs on
/// integer counts, so the result depends only on the score ranks.
pub fn eer(pools: &ScorePools) -> Result<f64> {
    let (ng, ni) = (pools.genuine.len(), pools.impostor.len());
    if ng == 0 || ni == 0 {
        return Err(Error::InvalidInput(format!(
            "EER needs both pools non-empty ({ng} genuine, {ni} impostor)"
        )));
    }
    if pools.genuine.iter().chain(&pools.impostor).any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let mut gen = pools.genuine.clone();
    let mut imp = pools.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    // (false accepts, false rejects) as counts at each threshold, then at +inf.
    let mut points: Vec<(i128, i128)> = Vec::with_capacity(thresholds.len() + 1);
    let (mut gi, mut ii) = (0, 0);
    for &t in &thresholds {
        while gi < ng && gen[gi] < t {
            gi += 1;
        }
        while ii < ni && imp[ii] < t {
            ii += 1;
        }
        points.push(((ni - ii) as i128, gi as i128));
    }
    points.push((0, ng as i128));

    let (ng, ni) = (ng as i128, ni as i128);
    // Sign of FAR - FRR, scaled by ng * ni.
    let diff = |(a, r): (i128, i128)| a * ng - r * ni;
    let mut prev = points[0];
    for &p in &points {
        let d = diff(p);
        if d == 0 {
            return Ok(100.0 * p.0 as f64 / ni as f64);
        }
        if d < 0 {
            let dp = diff(prev);
            // FAR at the crossing = (a0 * -d1 + a1 * d0) / (ni * (d0 - d1)).
            let num = prev.0 * -d + p.0 * dp;
            let den = ni * (dp - d);
            return Ok(100.0 * ratio(num, den));
        }
        prev = p;
    }
    unreachable!("FAR - FRR is negative at the sentinel threshold")
}

/// `num / den` rounded once, for integers beyond the exact f64 range.
fn ratio(num: i128, den: i128) -> f64 {
    let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i128;
    (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// An anonymized utterance together with what the evaluator knows about its
/// source.
#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizedOutput {
    pub id: String,
    pub frames: Vec<TokenFrame>,
    pub source: Utterance,
}

/// Acoustic-only oracle SER predictions against the true source emotion.
pub fn emotion_eval(outputs: &[AnonymizedOutput], config: &WorldConfig) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new();
    for o in outputs {
        cm.add(o.source.emotion, oracle_ser_acoustic(&o.frames, config).label);
    }
    cm
}

/// Mean acoustic-stream content error in percent.
pub fn content_error(outputs: &[AnonymizedOutput], config: &WorldConfig) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let total: f64 = outputs
        .iter()
        .map(|o| oracle_content_err_acoustic(&o.source, &o.frames, config))
        .sum();
    100.0 * total / outputs.len() as f64
}

/// Full metric row for one system.
pub fn evaluate(
    experiment: &str,
    components: &str,
    test: &[AnonymizedOutput],
    enrollment: &[AnonymizedOutput],
    config: &WorldConfig,
    latency_ms: f64,
) -> Result<MetricsReport> {
    let recalls = uar(&emotion_eval(test, config))?;
    let lazy = attack_sim(test, &Attack::Lazy, config)?;
    let semi = attack_sim(test, &Attack::Semi { enrollment }, config)?;
    Ok(MetricsReport {
        experiment: experiment.to_string(),
        components: components.to_string(),
        content_err: content_error(test, config),
        uar: recalls.average,
        recalls: recalls.per_class,
        eer_lazy: eer(&ScorePools::from_trials(&lazy))?,
        eer_semi: eer(&ScorePools::from_trials(&semi))?,
        latency_ms,
    })
}
