//! Tab-delimited result tables with header rows: training history and
//! per-sample evaluation metrics. Numbers are written in shortest-roundtrip
//! form, so read(write(x)) == x and identical inputs give identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::train::HistoryRow;

const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_loss\tlr\tmultiplier";
const RESULTS_HEADER: &str = "sample_id\tvisibility_mode\tsi_snri_db\tsnri_db";

pub fn render_history(rows: &[HistoryRow]) -> String {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.multiplier
        ));
    }
    text
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, render_history(rows))?;
    Ok(())
}

fn table_err(kind: &str, ln: usize, msg: &str) -> Error {
    Error::Manifest(format!("{kind} table line {ln}: {msg}"))
}

fn fields<'a>(kind: &str, ln: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != n {
        return Err(table_err(
            kind,
            ln,
            &format!("expected {n} columns, got {}", cols.len()),
        ));
    }
    Ok(cols)
}

fn num<T: std::str::FromStr>(kind: &str, ln: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| table_err(kind, ln, &format!("{s:?} is not a number")))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => return Err(table_err("history", 1, "missing or wrong header row")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let c = fields("history", i + 1, line, 5)?;
        rows.push(HistoryRow {
            epoch: num("history", i + 1, c[0])?,
            train_loss: num("history", i + 1, c[1])?,
            val_loss: num("history", i + 1, c[2])?,
            lr: num("history", i + 1, c[3])?,
            multiplier: num("history", i + 1, c[4])?,
        });
    }
    Ok(rows)
}

pub fn render_results(rows: &[MetricsRow]) -> String {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.sample_id, r.visibility_mode, r.si_snri_db, r.snri_db
        ));
    }
    text
}

pub fn write_results(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, render_results(rows))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(table_err("results", 1, "missing or wrong header row")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let c = fields("results", i + 1, line, 4)?;
        rows.push(MetricsRow {
            sample_id: num("results", i + 1, c[0])?,
            visibility_mode: c[1].to_string(),
            si_snri_db: num("results", i + 1, c[2])?,
            snri_db: num("results", i + 1, c[3])?,
        });
    }
    Ok(rows)
}
