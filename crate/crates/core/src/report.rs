//! Report files: machine-readable CSV tables, aligned text renders, per-epoch
//! history columns, and provenance stamps. Emission is deterministic, so
//! re-emitting identical inputs produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::ModelError;
use crate::eval::ResultsTable;
use crate::trainer::TrainingHistory;

fn fmt_acc(v: f64) -> String {
    format!("{:.4}", v)
}

/// CSV form: header `pipeline,<cells...>,Mean`, one row per pipeline.
pub fn results_csv(table: &ResultsTable) -> String {
    let mut out = String::new();
    out.push_str("pipeline,");
    out.push_str(&table.columns.join(","));
    out.push_str(",Mean\n");
    for row in &table.rows {
        out.push_str(&row.name);
        for c in &row.cells {
            let _ = write!(out, ",{}", fmt_acc(*c));
        }
        let _ = writeln!(out, ",{}", fmt_acc(row.mean));
    }
    out
}

/// Aligned text render grouping columns as `L0 | L1 cells | L2 | L3 | Mean`.
pub fn results_text(table: &ResultsTable) -> String {
    let name_width = table
        .rows
        .iter()
        .map(|r| r.name.len())
        .chain(["pipeline".len()])
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "pipeline");
    for col in &table.columns {
        let _ = write!(out, " {:>7}", col);
    }
    let _ = writeln!(out, " {:>7}", "Mean");
    for row in &table.rows {
        let _ = write!(out, "{:<name_width$}", row.name);
        for c in &row.cells {
            let _ = write!(out, " {:>7}", fmt_acc(*c));
        }
        let _ = writeln!(out, " {:>7}", fmt_acc(row.mean));
    }
    let _ = writeln!(
        out,
        "# seed {} manifest {} config {}",
        table.meta.seed, table.meta.manifest_hash, table.meta.config_hash
    );
    out
}

/// Parse a table back from its CSV form (used by the report subcommand).
pub fn parse_results_csv(csv: &str, meta: crate::eval::TableMeta) -> Result<ResultsTable, ModelError> {
    let bad = |msg: String| ModelError::Checkpoint(format!("results csv: {msg}"));
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut cols: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    if cols.first().map(|s| s.as_str()) != Some("pipeline") || cols.last().map(|s| s.as_str()) != Some("Mean") {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    cols.remove(0);
    cols.pop();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let name = fields.next().ok_or_else(|| bad("missing row name".into()))?.to_string();
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("bad value `{f}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != cols.len() + 1 {
            return Err(bad(format!("row `{name}` has {} values, expected {}", values.len(), cols.len() + 1)));
        }
        let cells = values[..cols.len()].to_vec();
        // Recompute the mean from cells; the stored column is rounded.
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        rows.push(crate::eval::TableRow { name, cells, mean });
    }
    Ok(ResultsTable {
        columns: cols,
        rows,
        meta,
    })
}

/// Tab-separated per-epoch history: losses, validation accuracy, wall time.
pub fn history_tsv(history: &TrainingHistory) -> String {
    let mut out = String::from("epoch\ttotal\trec\tintra\tinter\tcls\tval_clean\tval_occluded\twall_secs\n");
    for e in &history.epochs {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.3}",
            e.epoch,
            e.total,
            e.rec,
            e.intra,
            e.inter,
            e.cls,
            e.val_clean_accuracy,
            e.val_occluded_accuracy,
            e.wall_secs
        );
    }
    let _ = writeln!(out, "# best_epoch {}", history.best_epoch);
    out
}

/// Write a named table (CSV + text render) into `dir`.
pub fn write_table(dir: &Path, name: &str, table: &ResultsTable) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.csv")), results_csv(table))?;
    std::fs::write(dir.join(format!("{name}.txt")), results_text(table))?;
    Ok(())
}

pub fn write_history(dir: &Path, history: &TrainingHistory) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("history.tsv"), history_tsv(history))?;
    Ok(())
}

/// Provenance stamp: enough hashes to reproduce the run exactly.
pub fn provenance_text(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (key, value) in entries {
        let _ = writeln!(out, "{key} {value}");
    }
    out
}
