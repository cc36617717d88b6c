//! Writing run and experiment outputs.
//!
//! An output directory receives:
//!
//! * `config.json`: the resolved configuration,
//! * `report.json`: summaries, aggregates, win rates, budgets and manifest,
//! * `logs.jsonl`: one [`EpisodeLog`] per line,
//! * `turns.csv`: one row per turn across all logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ExperimentReport, RunError};
use crate::evaluation::{write_turn_csv, EpisodeLog};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_logs(dir: &Path, logs: &[EpisodeLog]) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir)?;
    let jsonl = dir.join("logs.jsonl");
    let mut w = BufWriter::new(File::create(&jsonl)?);
    for log in logs {
        serde_json::to_writer(&mut w, log).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let csv = dir.join("turns.csv");
    write_turn_csv(logs, BufWriter::new(File::create(&csv)?))?;
    Ok(vec![jsonl, csv])
}

/// Writes the config, report, logs and per-turn CSV. Returns the files written.
pub fn write_experiment<C: Serialize>(
    dir: &Path,
    config: &C,
    report: &ExperimentReport,
) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir)?;
    let cfg = dir.join("config.json");
    write_json(&cfg, config)?;
    let rep = dir.join("report.json");
    write_json(&rep, report)?;
    let mut files = vec![cfg, rep];
    files.extend(write_logs(dir, &report.logs)?);
    Ok(files)
}

/// Writes any serializable value as pretty JSON.
pub fn write_value<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_json(path, value)
}
