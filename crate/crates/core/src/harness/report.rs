//! Text reports, audit files and plot data.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::{CorrelationMatrix, DecorrelatedImportance, ImportanceReport};
use crate::metrics::Metric;
use crate::textfmt::{self, f64_17};

use super::{
    pca_mode_name, AggregateReport, CellAggregate, ExperimentConfig, ExperimentOutcome, MetricSummary, RunResult,
};

fn percent(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0))
}

fn write_grid(s: &mut String, labels: &[&str], rows: &[(Metric, Vec<Option<f64>>)]) {
    let widths: Vec<usize> = labels.iter().map(|l| l.len().max(6)).collect();
    let _ = write!(s, "{:<6}", "Metric");
    for (l, w) in labels.iter().zip(&widths) {
        let _ = write!(s, " | {l:>w$}");
    }
    s.push('\n');
    let _ = write!(s, "{}", "-".repeat(6));
    for w in &widths {
        let _ = write!(s, "-+-{}", "-".repeat(*w));
    }
    s.push('\n');
    for (metric, values) in rows {
        let _ = write!(s, "{:<6}", metric.name());
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(s, " | {:>w$}", percent(*v));
        }
        s.push('\n');
    }
}

/// Metric rows × configuration columns in percent with two decimals: one
/// block of means, one of standard deviations. Undefined values print `-`.
pub fn format_table(aggregate: &AggregateReport) -> String {
    let labels: Vec<&str> = aggregate.cells.iter().map(|c| c.label.as_str()).collect();
    let rows = |f: fn(&CellAggregate, Metric) -> Option<f64>| -> Vec<(Metric, Vec<Option<f64>>)> {
        Metric::ALL
            .iter()
            .map(|&m| (m, aggregate.cells.iter().map(|c| f(c, m)).collect()))
            .collect()
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Mean test metrics over {} repetitions (percent)",
        aggregate.repetitions
    );
    s.push('\n');
    write_grid(&mut s, &labels, &rows(|c, m| c.summary(m).mean));
    s.push('\n');
    let _ = writeln!(
        s,
        "Standard deviation over {} repetitions (percent)",
        aggregate.repetitions
    );
    s.push('\n');
    write_grid(&mut s, &labels, &rows(|c, m| c.summary(m).std));
    s
}

/// Values recovered from [`format_table`] output, as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub labels: Vec<String>,
    pub mean: Vec<(Metric, Vec<Option<f64>>)>,
    pub std: Vec<(Metric, Vec<Option<f64>>)>,
}

impl ParsedTable {
    pub fn mean_of(&self, metric: Metric, cell: usize) -> Option<f64> {
        self.mean.iter().find(|(m, _)| *m == metric).and_then(|(_, v)| v[cell])
    }
}

pub fn parse_table(text: &str) -> Result<ParsedTable> {
    let what = "report table";
    let mut labels: Option<Vec<String>> = None;
    let mut blocks: Vec<Vec<(Metric, Vec<Option<f64>>)>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(" | ").map(str::trim).collect();
        if cells.len() < 2 {
            continue;
        }
        if cells[0] == "Metric" {
            let l: Vec<String> = cells[1..].iter().map(|c| c.to_string()).collect();
            if labels.as_ref().is_some_and(|old| *old != l) {
                return Err(Error::parse(what, i + 1, "column headers differ between blocks"));
            }
            labels = Some(l);
            blocks.push(Vec::new());
            continue;
        }
        let Some(metric) = Metric::from_name(cells[0]) else {
            continue;
        };
        let block = blocks
            .last_mut()
            .ok_or_else(|| Error::parse(what, i + 1, "metric row before header"))?;
        let values = cells[1..]
            .iter()
            .map(|c| {
                if *c == "-" {
                    Ok(None)
                } else {
                    textfmt::parse_f64(what, i + 1, c).map(|v| Some(v / 100.0))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        block.push((metric, values));
    }
    let labels = labels.ok_or_else(|| Error::parse(what, 0, "no table header"))?;
    if blocks.len() != 2 {
        return Err(Error::parse(what, 0, "expected a mean block and a deviation block"));
    }
    let std = blocks.pop().unwrap_or_default();
    let mean = blocks.pop().unwrap_or_default();
    Ok(ParsedTable { labels, mean, std })
}

fn opt17(x: Option<f64>) -> String {
    x.map_or("-".to_string(), f64_17)
}

/// Full-precision aggregate, one `metric` line per cell and metric.
pub fn aggregate_text(aggregate: &AggregateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "aggregate repetitions {} cells {}",
        aggregate.repetitions,
        aggregate.cells.len()
    );
    for (k, c) in aggregate.cells.iter().enumerate() {
        let _ = writeln!(s, "cell {k} runs {} label {}", c.runs, textfmt::escape_name(&c.label));
        for (m, sum) in &c.metrics {
            let _ = writeln!(
                s,
                "  metric {} mean {} std {} min {} max {} defined {}",
                m.name(),
                opt17(sum.mean),
                opt17(sum.std),
                opt17(sum.min),
                opt17(sum.max),
                sum.defined
            );
        }
    }
    s
}

fn parse_opt(what: &'static str, line: usize, tok: &str) -> Result<Option<f64>> {
    if tok == "-" {
        Ok(None)
    } else {
        textfmt::parse_f64(what, line, tok).map(Some)
    }
}

/// Reads back [`aggregate_text`] output.
pub fn parse_aggregate_text(text: &str) -> Result<AggregateReport> {
    let mut rec = textfmt::Records::new("aggregate", text);
    let what = rec.what();
    let (line, t) = rec.expect("aggregate", 4)?;
    if t[0] != "repetitions" || t[2] != "cells" {
        return Err(Error::parse(what, line, "malformed aggregate header"));
    }
    let repetitions = textfmt::parse_usize(what, line, t[1])?;
    let n_cells = textfmt::parse_usize(what, line, t[3])?;
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let (line, t) = rec.expect("cell", 5)?;
        if t[1] != "runs" || t[3] != "label" {
            return Err(Error::parse(what, line, "malformed cell line"));
        }
        let runs = textfmt::parse_usize(what, line, t[2])?;
        let label = textfmt::unescape_name(t[4]);
        let mut metrics = Vec::with_capacity(Metric::ALL.len());
        for _ in 0..Metric::ALL.len() {
            let (line, t) = rec.expect("metric", 11)?;
            let metric = Metric::from_name(t[0]).ok_or_else(|| Error::parse(what, line, "unknown metric"))?;
            let keys = ["mean", "std", "min", "max", "defined"];
            for (k, key) in keys.iter().enumerate() {
                if t[1 + 2 * k] != *key {
                    return Err(Error::parse(what, line, format!("expected `{key}`")));
                }
            }
            metrics.push((
                metric,
                MetricSummary {
                    mean: parse_opt(what, line, t[2])?,
                    std: parse_opt(what, line, t[4])?,
                    min: parse_opt(what, line, t[6])?,
                    max: parse_opt(what, line, t[8])?,
                    defined: textfmt::parse_usize(what, line, t[10])?,
                },
            ));
        }
        cells.push(CellAggregate { label, runs, metrics });
    }
    Ok(AggregateReport { repetitions, cells })
}

/// Writes `report.txt` (the table) and `aggregate.txt` (full precision).
pub fn emit_report(aggregate: &AggregateReport, dir: &Path) -> Result<()> {
    if aggregate.cells.is_empty() {
        return Err(Error::EmptyReport);
    }
    textfmt::write_string(&dir.join("report.txt"), &format_table(aggregate))?;
    textfmt::write_string(&dir.join("aggregate.txt"), &aggregate_text(aggregate))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Per-repetition audit: seeds, drawn rows, split, tuning trail, final
/// settings, test metrics and importance reports.
pub fn emit_run_audit(run: &RunResult, config: &ExperimentConfig, cell_index: usize, dir: &Path) -> Result<()> {
    let cell = &config.cells[cell_index];
    let mut s = String::new();
    let _ = writeln!(s, "repetition {}", run.repetition);
    let _ = writeln!(s, "pca {}", pca_mode_name(&config.preprocess, cell));
    let sd = &run.seeds;
    let _ = writeln!(
        s,
        "seeds sample {} cap_unlawful {} cap_lawful {} split {} tune {} permute {}",
        sd.sample, sd.cap_unlawful, sd.cap_lawful, sd.split, sd.tune, sd.permute
    );
    let _ = writeln!(s, "source_rows {}", join(&run.source_rows));
    let _ = writeln!(s, "train {}", join(&run.split.train));
    let _ = writeln!(s, "test {}", join(&run.split.test));
    let esc: Vec<String> = run.features.iter().map(|n| textfmt::escape_name(n)).collect();
    let _ = writeln!(s, "features {}", join(&esc));
    let esc: Vec<String> = run.model_inputs.iter().map(|n| textfmt::escape_name(n)).collect();
    let _ = writeln!(s, "model_inputs {}", join(&esc));
    let p = &run.params;
    let _ = writeln!(
        s,
        "final ntrees {} eta {} max_depth {} gamma {} lambda {} row_sample {} col_sample {} seed {}",
        p.ntrees,
        f64_17(p.eta),
        p.max_depth,
        f64_17(p.gamma),
        f64_17(p.lambda),
        f64_17(p.row_sample),
        f64_17(p.col_sample),
        p.seed
    );
    let c = &run.confusion;
    let _ = writeln!(s, "confusion tp {} fn {} fp {} tn {}", c.tp, c.fn_, c.fp, c.tn);
    for m in Metric::ALL {
        let _ = writeln!(s, "metric {} {}", m.name(), opt17(run.metrics.get(m)));
    }
    match &run.tuning {
        Some(t) => s.push_str(&t.audit_text()),
        None => s.push_str("tuning reused from repetition 0\n"),
    }
    textfmt::write_string(&dir.join("audit.txt"), &s)?;

    if let Some(imp) = &run.importance {
        if let Some(mdi) = &imp.mdi {
            textfmt::write_string(&dir.join("mdi.txt"), &mdi.to_text())?;
        }
        textfmt::write_string(&dir.join("permutation-raw.txt"), &imp.raw.to_text())?;
        textfmt::write_string(
            &dir.join("permutation-decorrelated.txt"),
            &decorrelated_text(&imp.decorrelated),
        )?;
    }
    Ok(())
}

/// Decorrelated ranking followed by one `cluster` line per Ward cluster.
pub fn decorrelated_text(d: &DecorrelatedImportance) -> String {
    let mut text = d.report.to_text();
    let _ = writeln!(text, "clusters {}", d.assignment.n_clusters);
    for (k, &r) in d.assignment.representatives.iter().enumerate() {
        let members: Vec<String> = d
            .assignment
            .members(k)
            .iter()
            .map(|&f| textfmt::escape_name(&d.correlation.names[f]))
            .collect();
        let _ = writeln!(
            text,
            "cluster {k} representative {} members {}",
            textfmt::escape_name(&d.correlation.names[r]),
            members.join(" ")
        );
    }
    text
}

/// Bar-chart data (`<stem>.csv`, rows in descending score) and a minimal
/// SVG rendering (`<stem>.svg`).
pub fn write_importance_bars(report: &ImportanceReport, dir: &Path, stem: &str) -> Result<()> {
    if report.entries.is_empty() {
        return Err(Error::EmptyReport);
    }
    textfmt::write_string(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    textfmt::write_string(&dir.join(format!("{stem}.svg")), &bar_svg(report, stem))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const MAX_BARS: usize = 40;

fn bar_svg(report: &ImportanceReport, title: &str) -> String {
    let entries = &report.entries[..report.entries.len().min(MAX_BARS)];
    let max = entries.iter().map(|e| e.score.abs()).fold(0.0, f64::max);
    let (label_w, bar_w, row_h) = (180.0, 420.0, 16.0);
    let height = 30.0 + row_h * entries.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        label_w + bar_w + 90.0
    );
    let _ = writeln!(s, r#"<text x="4" y="16" font-size="13">{}</text>"#, xml_escape(title));
    for (i, e) in entries.iter().enumerate() {
        let y = 26.0 + row_h * i as f64;
        let w = if max > 0.0 { bar_w * e.score.max(0.0) / max } else { 0.0 };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            label_w - 6.0,
            y + 11.0,
            xml_escape(&e.name)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{label_w}" y="{y}" width="{w:.3}" height="{}" fill="#4a78b0"/>"##,
            row_h - 3.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}">{:.4}</text>"#,
            label_w + w + 4.0,
            y + 11.0,
            e.score
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heatmap_svg(corr: &CorrelationMatrix) -> String {
    let m = corr.len();
    let cell = (600.0 / m.max(1) as f64).clamp(2.0, 24.0);
    let side = cell * m as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" shape-rendering="crispEdges">"#
    );
    for i in 0..m {
        for j in 0..m {
            let rho = corr.get(i, j);
            // blue for negative, red for positive, white at zero
            let fade = (255.0 * (1.0 - rho.abs())).round() as u8;
            let (r, g, b) = if rho >= 0.0 {
                (255, fade, fade)
            } else {
                (fade, fade, 255)
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{cell:.3}" height="{cell:.3}" fill="rgb({r},{g},{b})"><title>{} / {}: {:.3}</title></rect>"#,
                cell * j as f64,
                cell * i as f64,
                xml_escape(&corr.names[i]),
                xml_escape(&corr.names[j]),
                rho
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Per cell: importance bars averaged over repetitions, plus the linkage and
/// correlation grid of repetition 0 for the dendrogram and heatmap.
pub fn emit_plot_data(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    for (k, runs) in outcome.runs.iter().enumerate() {
        let with_imp: Vec<_> = runs.iter().filter_map(|r| r.importance.as_ref()).collect();
        if with_imp.is_empty() {
            continue;
        }
        let plots = dir.join(format!("cell_{k:02}"));
        let mdi: Vec<&ImportanceReport> = with_imp.iter().filter_map(|i| i.mdi.as_ref()).collect();
        if !mdi.is_empty() {
            write_importance_bars(&ImportanceReport::average(&mdi)?, &plots, "mdi")?;
        }
        let raw: Vec<&ImportanceReport> = with_imp.iter().map(|i| &i.raw).collect();
        write_importance_bars(&ImportanceReport::average(&raw)?, &plots, "permutation-raw")?;
        let dec: Vec<&ImportanceReport> = with_imp.iter().map(|i| &i.decorrelated.report).collect();
        write_importance_bars(&ImportanceReport::average(&dec)?, &plots, "permutation-decorrelated")?;

        let first = &with_imp[0].decorrelated;
        textfmt::write_string(&plots.join("correlation.csv"), &first.correlation.to_csv())?;
        textfmt::write_string(&plots.join("correlation.svg"), &heatmap_svg(&first.correlation))?;
        if let Some(linkage) = &first.linkage {
            let mut text = linkage.to_csv();
            text.push_str("\nleaf,feature\n");
            for (i, n) in first.correlation.names.iter().enumerate() {
                let _ = writeln!(text, "{i},{n}");
            }
            textfmt::write_string(&plots.join("linkage.csv"), &text)?;
        }
    }
    Ok(())
}
