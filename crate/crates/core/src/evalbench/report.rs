use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One row of the ablation grid. All rates are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub experiment: String,
    /// Active components joined with `+`, or `-` when none.
    pub components: String,
    pub content_err: f64,
    pub uar: f64,
    /// Ang, Hap, Neu, Sad.
    pub recalls: [f64; 4],
    pub eer_lazy: f64,
    pub eer_semi: f64,
    pub latency_ms: f64,
}

pub const REPORT_HEADER: &str = "experiment,components,content_err,uar,ang,hap,neu,sad,eer_lazy,eer_semi,latency_ms";

/// Floats are written in shortest round-trip form, so parsing the output
/// gives back the exact values.
pub fn format_report_csv(rows: &[MetricsReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let [a, h, n, s] = r.recalls;
        writeln!(
            out,
            "{},{},{},{},{a},{h},{n},{s},{},{},{}",
            r.experiment, r.components, r.content_err, r.uar, r.eer_lazy, r.eer_semi, r.latency_ms
        )
        .expect("string write");
    }
    out
}

pub fn parse_report_csv(text: &str, path: &Path) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "not a metrics report".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 2,
                msg,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(format!("expected 11 fields, found {}", f.len())));
            }
            let v = |j: usize| {
                f[j].parse::<f64>()
                    .map_err(|_| bad(format!("bad number `{}`", f[j])))
            };
            Ok(MetricsReport {
                experiment: f[0].to_string(),
                components: f[1].to_string(),
                content_err: v(2)?,
                uar: v(3)?,
                recalls: [v(4)?, v(5)?, v(6)?, v(7)?],
                eer_lazy: v(8)?,
                eer_semi: v(9)?,
                latency_ms: v(10)?,
            })
        })
        .collect()
}

pub fn write_report_csv(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    fs::write(path, format_report_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report_csv(&text, path)
}

/// Aligned text table with the content column flagged as a proxy.
pub fn format_report_table(rows: &[MetricsReport]) -> String {
    let head = [
        "Model", "Components", "Content*", "UAR", "Ang", "Hap", "Neu", "Sad", "EER-L", "EER-S", "Lat.",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.experiment.clone(), r.components.clone()];
            v.push(format!("{:.2}", r.content_err));
            v.push(format!("{:.1}", r.uar));
            v.extend(r.recalls.iter().map(|x| format!("{x:.1}")));
            v.push(format!("{:.2}", r.eer_lazy));
            v.push(format!("{:.2}", r.eer_semi));
            v.push(format!("{:.0}", r.latency_ms));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|j| body.iter().map(|r| r[j].len()).chain([head[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate() {
            if j < 2 {
                write!(s, "{c:<w$}  ", w = widths[j]).expect("string write");
            } else {
                write!(s, "{c:>w$}  ", w = widths[j]).expect("string write");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(head.to_vec());
    out += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in &body {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out += "* content error is an oracle token-level proxy reported in place of WER\n";
    out
}
