//! CSV artifacts shared by the CLI and the test harnesses.
//!
//! All files are UTF-8, comma-separated, one header row, optionally preceded
//! by `# key = value` metadata lines embedding the resolved configuration
//! and the weights hash so any row is reproducible from its own file.
//! Wall-clock columns are the only non-deterministic content.

use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::LossRow;
use crate::pipeline::{EpochRow, QueryRecord};

fn quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Split one CSV line, honoring double-quoted fields.
pub fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if in_quotes && chars.peek() == Some(&'"') => {
                current.push('"');
                chars.next();
            }
            '"' => in_quotes = !in_quotes,
            ',' if !in_quotes => {
                fields.push(std::mem::take(&mut current));
            }
            other => current.push(other),
        }
    }
    fields.push(current);
    fields
}

fn meta_block(meta: &[(String, String)]) -> String {
    let mut out = String::new();
    for (key, value) in meta {
        out.push_str(&format!("# {key} = {value}\n"));
    }
    out
}

/// Data rows of a CSV file: skips `#` metadata lines and the header.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if header.is_empty() {
            header = split_csv_line(line);
        } else {
            rows.push(split_csv_line(line));
        }
    }
    if header.is_empty() {
        return Err(CoreError::Format(format!("{}: no header row", path.display())));
    }
    Ok((header, rows))
}

/// Per-query records: `query_id,gold,pred,logprob_<label>...,tokens,flops,wall_ms`.
pub fn write_per_query_csv(
    path: &Path,
    labels: &[String],
    records: &[QueryRecord],
    meta: &[(String, String)],
) -> Result<()> {
    let mut out = meta_block(meta);
    out.push_str("query_id,gold,pred");
    for label in labels {
        out.push_str(&format!(",logprob_{}", quote(label)));
    }
    out.push_str(",tokens,flops,wall_ms\n");
    for r in records {
        out.push_str(&format!("{},{},{}", r.query_id, quote(&r.gold), quote(&r.pred)));
        for lp in &r.logprobs {
            out.push_str(&format!(",{lp}"));
        }
        out.push_str(&format!(",{},{},{}\n", r.tokens, r.flops, r.wall_ms));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One experiment result row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub accuracy: f64,
    pub tokens_per_query: f64,
    pub cached_scalars: u64,
}

pub const RESULT_HEADER: &str = "method,task,seed,accuracy,tokens_per_query,cached_scalars";

/// Append one row, creating the file (metadata block plus header) on first
/// use. Concurrent writers must route through one appender.
pub fn append_result_row(path: &Path, row: &ResultRow, meta: &[(String, String)]) -> Result<()> {
    let exists = path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        file.write_all(meta_block(meta).as_bytes())?;
        file.write_all(RESULT_HEADER.as_bytes())?;
        file.write_all(b"\n")?;
    }
    let line = format!(
        "{},{},{},{},{},{}\n",
        quote(&row.method),
        quote(&row.task),
        row.seed,
        row.accuracy,
        row.tokens_per_query,
        row.cached_scalars
    );
    file.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_result_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let (header, rows) = read_rows(path)?;
    if header.join(",") != RESULT_HEADER {
        return Err(CoreError::Format(format!("{}: unexpected header", path.display())));
    }
    rows.into_iter()
        .map(|fields| {
            if fields.len() != 6 {
                return Err(CoreError::Format("result row with wrong field count".into()));
            }
            Ok(ResultRow {
                method: fields[0].clone(),
                task: fields[1].clone(),
                seed: fields[2].parse().map_err(|_| CoreError::Format("bad seed".into()))?,
                accuracy: fields[3].parse().map_err(|_| CoreError::Format("bad accuracy".into()))?,
                tokens_per_query: fields[4]
                    .parse()
                    .map_err(|_| CoreError::Format("bad tokens".into()))?,
                cached_scalars: fields[5]
                    .parse()
                    .map_err(|_| CoreError::Format("bad cached_scalars".into()))?,
            })
        })
        .collect()
}

/// Per-method mean and sample standard deviation of accuracy.
pub fn summarize(rows: &[ResultRow]) -> Vec<(String, f64, f64, usize)> {
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|method| {
            let accs: Vec<f64> =
                rows.iter().filter(|r| r.method == method).map(|r| r.accuracy).collect();
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (method, mean, std, n)
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[ResultRow], meta: &[(String, String)]) -> Result<()> {
    let mut out = meta_block(meta);
    out.push_str("method,mean_accuracy,std_accuracy,runs\n");
    for (method, mean, std, n) in summarize(rows) {
        out.push_str(&format!("{},{},{},{}\n", quote(&method), mean, std, n));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Calibration loss history: `epoch,lr,loss`.
pub fn write_loss_history(path: &Path, history: &[EpochRow], meta: &[(String, String)]) -> Result<()> {
    let mut out = meta_block(meta);
    out.push_str("epoch,lr,loss\n");
    for row in history {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.lr, row.loss));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pretraining loss log: `step,lr,loss`.
pub fn write_pretrain_log(path: &Path, log: &[LossRow], meta: &[(String, String)]) -> Result<()> {
    let mut out = meta_block(meta);
    out.push_str("step,lr,loss\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.step, row.lr, row.loss));
    }
    fs::write(path, out)?;
    Ok(())
}
