//! Plain SVG figures and their CSV data.

use std::fmt::Write;

use super::grid::ExperimentRecord;
use super::ols::RegressionFit;
use super::triage::{ConfusionMatrix, TriageCurve};
use crate::score::Score;
use crate::train::LabelSource;

const W: f64 = 640.0;
const MARGIN: f64 = 60.0;
const CLASS_COLORS: [&str; 3] = ["#1b9e77", "#d95f02", "#7570b3"];

fn header(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Estimates with confidence bars, one row per non-intercept term per fit.
pub fn coefficient_plot(fits: &[RegressionFit]) -> String {
    let rows: Vec<(String, f64, f64, f64)> = fits
        .iter()
        .flat_map(|f| {
            f.coefficients
                .iter()
                .filter(|c| c.name != super::ols::INTERCEPT)
                .map(move |c| (format!("{}: {}", f.scope, c.name), c.estimate, c.ci_low, c.ci_high))
        })
        .collect();
    let h = 50.0 + 22.0 * rows.len() as f64 + 40.0;
    let label_w = 250.0;
    let lo = rows.iter().map(|r| r.2).fold(0.0, f64::min);
    let hi = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    let span = (hi - lo).max(1e-9);
    let x = |v: f64| label_w + (v - lo) / span * (W - label_w - 20.0);
    let mut s = header(W, h, "Effects on validation accuracy (95% CI)");
    let _ = writeln!(
        s,
        "<line x1=\"{0:.1}\" y1=\"35\" x2=\"{0:.1}\" y2=\"{1:.1}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        x(0.0),
        h - 35.0
    );
    for (i, (name, est, l, u)) in rows.iter().enumerate() {
        let y = 50.0 + 22.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", label_w - 8.0, y + 4.0, escape(name));
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"black\"/>", x(*l), x(*u));
        let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"black\"/>", x(*est));
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{lo:.3}</text>", x(lo), h - 15.0);
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{hi:.3}</text>", x(hi), h - 15.0);
    s + "</svg>\n"
}

/// Validation accuracy of every record, grouped by architecture and
/// coloured by label source.
pub fn model_comparison_plot(records: &[ExperimentRecord]) -> String {
    let mut archs: Vec<_> = records.iter().map(|r| r.arch).collect();
    archs.sort_unstable();
    archs.dedup();
    let h = 60.0 + 40.0 * archs.len() as f64 + 40.0;
    let label_w = 130.0;
    let x = |v: f64| label_w + v * (W - label_w - 20.0);
    let mut s = header(W, h, "Validation accuracy by architecture (green: gold, orange: interviewer)");
    for (i, arch) in archs.iter().enumerate() {
        let y = 60.0 + 40.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{arch}</text>", label_w - 8.0, y + 4.0);
        for r in records.iter().filter(|r| r.arch == *arch) {
            let (color, dy) = match r.label_source {
                LabelSource::Gold => (CLASS_COLORS[0], -6.0),
                LabelSource::Interviewer => (CLASS_COLORS[1], 6.0),
            };
            let _ =
                writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>", x(r.val_accuracy), y + dy);
        }
    }
    for t in 0..=10 {
        let v = t as f64 / 10.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>", x(v), h - 15.0);
    }
    s + "</svg>\n"
}

/// Cumulative accuracy against coverage, overall and per true class.
pub fn triage_plot(curve: &TriageCurve) -> String {
    let h = 420.0;
    let (pw, ph) = (W - 2.0 * MARGIN, h - 2.0 * MARGIN);
    let px = |c: f64| MARGIN + c * pw;
    let py = |a: f64| MARGIN + (1.0 - a) * ph;
    let mut s = header(W, h, "Cumulative accuracy by confidence rank");
    let _ = writeln!(s, "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>");
    let n = curve.len();
    let mut line = |values: &mut dyn Iterator<Item = (usize, f64)>, color: &str, width: f64| {
        let pts: Vec<String> = values.map(|(k, a)| format!("{:.1},{:.1}", px((k + 1) as f64 / n as f64), py(a))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>", pts.join(" "));
    };
    line(&mut curve.cumulative_accuracy.iter().copied().enumerate(), "black", 2.0);
    for c in 0..3 {
        line(&mut curve.per_class[c].iter().enumerate().filter_map(|(k, a)| a.map(|a| (k, a))), CLASS_COLORS[c], 1.2);
    }
    for (c, score) in Score::ALL.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>",
            MARGIN + 10.0,
            MARGIN + 18.0 * (c + 1) as f64 + ph - 80.0,
            CLASS_COLORS[c],
            score
        );
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">coverage</text>", W / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{:.1}\" transform=\"rotate(-90 15 {:.1})\" text-anchor=\"middle\">accuracy</text>",
        h / 2.0,
        h / 2.0
    );
    s + "</svg>\n"
}

/// Heat table of row percentages with counts in parentheses.
pub fn confusion_plot(m: &ConfusionMatrix, title: &str) -> String {
    let cell = 120.0;
    let (x0, y0) = (150.0, 70.0);
    let w = x0 + 3.0 * cell + 20.0;
    let h = y0 + 3.0 * cell + 20.0;
    let pct = m.row_percentages();
    let mut s = header(w, h, title);
    for (c, score) in Score::ALL.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{score}</text>", x0 + cell * (c as f64 + 0.5), y0 - 8.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{score}</text>", x0 - 8.0, y0 + cell * (c as f64 + 0.5));
    }
    for r in 0..3 {
        for c in 0..3 {
            let p = pct[r].map_or(0.0, |row| row[c]);
            let shade = 255 - (p / 100.0 * 200.0) as u8;
            let (x, y) = (x0 + cell * c as f64, y0 + cell * r as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"/>"
            );
            let text = pct[r].map_or("-".to_string(), |row| format!("{:.1}%", row[c]));
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{text} ({})</text>",
                x + cell / 2.0,
                y + cell / 2.0,
                m.counts[r][c]
            );
        }
    }
    s + "</svg>\n"
}

pub fn triage_csv(curve: &TriageCurve) -> String {
    let mut s = String::from("rank,coverage,confidence,accuracy,acc_correct,acc_partially_correct,acc_incorrect\n");
    let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for k in 0..curve.len() {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{},{},{}",
            k + 1,
            curve.coverage(k + 1),
            curve.confidence[k],
            curve.cumulative_accuracy[k],
            f(curve.per_class[0][k]),
            f(curve.per_class[1][k]),
            f(curve.per_class[2][k])
        );
    }
    s
}

pub fn coefficients_csv(fits: &[RegressionFit]) -> String {
    let mut s = String::from("scope,term,estimate,std_error,t_value,ci_low,ci_high\n");
    for f in fits {
        for c in &f.coefficients {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.8},{:.4},{:.8},{:.8}",
                f.scope, c.name, c.estimate, c.std_error, c.t_value, c.ci_low, c.ci_high
            );
        }
    }
    s
}

pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("truth,predicted,count,row_percent\n");
    let pct = m.row_percentages();
    for t in Score::ALL {
        for p in Score::ALL {
            let rp = pct[t.index()].map_or(String::new(), |row| format!("{:.1}", row[p.index()]));
            let _ = writeln!(s, "{t},{p},{},{rp}", m.counts[t.index()][p.index()]);
        }
    }
    s
}
