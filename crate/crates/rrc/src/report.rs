//! Loss logs and the report tables.

use std::fmt::Write as _;
use std::path::Path;

use rrc_core::eval::{PrCurve, SweepTable};
use rrc_core::loss::OutputLoss;
use rrc_core::Real;

use crate::error::{io, Error, Result};

/// One training step: the lr it used and each output's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: Real,
    pub outputs: Vec<Real>,
    pub total: Real,
}

pub fn log_header(outputs: usize) -> String {
    let cols: Vec<String> = (1..=outputs).map(|t| format!("out{t}")).collect();
    format!("step,lr,{},total", cols.join(","))
}

/// Values use Rust's shortest round-trip formatting, so logs compare exactly.
pub fn log_line(row: &LogRow) -> String {
    let vals: Vec<String> = row.outputs.iter().map(|v| format!("{v:?}")).collect();
    format!("{},{:?},{},{:?}", row.step, row.lr, vals.join(","), row.total)
}

pub fn parse_log(text: &str, origin: &Path) -> Result<Vec<LogRow>> {
    let fail = |line: usize, message: String| Error::Format {
        path: origin.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().ok_or_else(|| fail(1, "empty log".into()))?.1;
    let cols = header.split(',').count();
    if cols < 4 || !header.starts_with("step,lr,") {
        return Err(fail(1, format!("unexpected header {header:?}")));
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != cols {
                return Err(fail(i + 1, format!("expected {cols} columns, found {}", parts.len())));
            }
            let num = |s: &str| s.parse::<Real>().map_err(|_| fail(i + 1, format!("bad number {s:?}")));
            Ok(LogRow {
                step: parts[0].parse().map_err(|_| fail(i + 1, format!("bad step {:?}", parts[0])))?,
                lr: num(parts[1])?,
                outputs: parts[2..cols - 1].iter().map(|s| num(s)).collect::<Result<_>>()?,
                total: num(parts[cols - 1])?,
            })
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_log(&text, path)
}

/// Per-output mean loss table.
pub fn loss_table_text(title: &str, losses: &[OutputLoss]) -> String {
    let mut out = format!("{title}\n");
    let _ = writeln!(out, "{:<8} {:>14} {:>12} {:>10}", "output", "classification", "regression", "total");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<8} {:>14.4} {:>12.4} {:>10.4}",
            i + 1,
            l.classification,
            l.regression,
            l.total()
        );
    }
    out
}

pub fn loss_table_csv(losses: &[OutputLoss]) -> String {
    let mut out = String::from("output,classification,regression,total\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i + 1, l.classification, l.regression, l.total());
    }
    out
}

/// One configuration evaluated over the IoU sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub select: Vec<usize>,
    pub table: SweepTable,
}

fn pct(v: Option<Real>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// mAP (in percent) per row and threshold, followed by per-class AP.
pub fn sweep_text(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else { return out };
    let head: Vec<String> = first.table.thresholds.iter().map(|t| format!("{t:>7}")).collect();
    let _ = writeln!(out, "mAP (%) by IoU threshold");
    let _ = writeln!(out, "{:<28}{}", "", head.join(""));
    for r in rows {
        let vals: Vec<String> = r.table.mean().into_iter().map(|v| format!("{:>7}", pct(v))).collect();
        let _ = writeln!(out, "{:<28}{}", r.label, vals.join(""));
    }
    for (k, class) in first.table.classes.iter().enumerate() {
        let _ = writeln!(out, "\nAP (%) {class}");
        for r in rows {
            let vals: Vec<String> = r.table.ap[k].iter().map(|v| format!("{:>7}", pct(*v))).collect();
            let _ = writeln!(out, "{:<28}{}", r.label, vals.join(""));
        }
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("row,select,class,iou,ap\n");
    for r in rows {
        let sel: Vec<String> = r.select.iter().map(|t| t.to_string()).collect();
        let mean = r.table.mean();
        for (c, &t) in r.table.thresholds.iter().enumerate() {
            let mut put = |class: &str, v: Option<Real>| {
                let v = v.map_or_else(String::new, |v| v.to_string());
                let _ = writeln!(out, "{},{},{class},{t},{v}", r.label, sel.join(" "));
            };
            put("mean", mean[c]);
            for (k, class) in r.table.classes.iter().enumerate() {
                put(class, r.table.ap[k][c]);
            }
        }
    }
    out
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &curve.points {
        let _ = writeln!(out, "{r},{p}");
    }
    out
}

/// Mean of each output's loss over the last `window` logged steps.
pub fn tail_means(rows: &[LogRow], window: usize) -> Vec<Real> {
    let tail = &rows[rows.len().saturating_sub(window)..];
    let n = tail.first().map_or(0, |r| r.outputs.len());
    (0..n)
        .map(|i| tail.iter().map(|r| r.outputs[i]).sum::<Real>() / tail.len() as Real)
        .collect()
}

/// Block averages of the log, `every` steps per row, as CSV.
pub fn smoothed_csv(rows: &[LogRow], every: usize) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut out = log_header(first.outputs.len());
    out.push('\n');
    for chunk in rows.chunks(every.max(1)) {
        let n = chunk.len() as Real;
        let row = LogRow {
            step: chunk[chunk.len() - 1].step,
            lr: chunk[chunk.len() - 1].lr,
            outputs: (0..first.outputs.len())
                .map(|i| chunk.iter().map(|r| r.outputs[i]).sum::<Real>() / n)
                .collect(),
            total: chunk.iter().map(|r| r.total).sum::<Real>() / n,
        };
        out.push_str(&log_line(&row));
        out.push('\n');
    }
    out
}
