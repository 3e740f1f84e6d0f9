//! On-disk artifact conventions. Writes go to a `.partial` sibling first
//! and rename into place, so an interrupted run leaves a flagged fragment
//! instead of a plausible-looking artifact.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::errors::{write_context, CliError};

pub const CORPUS: &str = "corpus.jsonl";
pub const FILTERED_CORPUS: &str = "corpus.filtered.jsonl";
pub const SYNTH_RELATIONS: &str = "synth_relations.json";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const RUN_CONFIG: &str = "run_config.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PREDICTIONS: &str = "predictions.json";
pub const METRICS: &str = "metrics.json";
pub const INFLUENCE_BIN: &str = "influence.bin";
pub const INFLUENCE_CSV: &str = "influence.csv";
pub const INFLUENCE_DIAG: &str = "influence_diag.json";
pub const LABELS: &str = "labels.json";
pub const CORRELATIONS_JSON: &str = "correlations.json";
pub const CORRELATIONS_TSV: &str = "correlations.tsv";
pub const CLASSIFIER: &str = "classifier.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Runs `fill` against a buffered writer on the `.partial` path, then
/// renames into place. The partial file stays behind on failure.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let partial = partial_path(path);
    let file = File::create(&partial).map_err(|e| write_context(&partial, e))?;
    let mut writer = BufWriter::new(file);
    fill(&mut writer)?;
    writer.flush().map_err(|e| write_context(&partial, e))?;
    drop(writer);
    fs::rename(&partial, path).map_err(|e| write_context(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| CliError::Output(format!("serializing {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| write_context(path, e))?;
        Ok(())
    })
}

/// Comment stamp for line-oriented formats (CSV, TSV).
pub fn stamp_line(config_hash: &str) -> String {
    format!("# config_hash={config_hash}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_atomic_leaves_no_partial_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, |w| {
            w.write_all(b"{}\n").map_err(|e| write_context(&path, e))
        })
        .unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"{}\n");
        assert!(!partial_path(&path).exists());
    }

    #[test]
    fn write_atomic_keeps_the_partial_when_fill_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        let err = write_atomic(&path, |w| {
            w.write_all(b"half").map_err(|e| write_context(&path, e))?;
            Err(CliError::Output("interrupted".into()))
        });
        assert!(err.is_err());
        assert!(!path.exists());
        assert!(partial_path(&path).exists());
    }
}
