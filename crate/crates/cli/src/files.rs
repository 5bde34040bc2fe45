//! File helpers and the per-question score artifact passed from `train`
//! to `efa`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const QUESTION_SCORES_SCHEMA: &str = "mcat.question-scores/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionScoreRow {
    pub id: String,
    #[serde(default)]
    pub text: String,
    pub scores: Vec<f64>,
}

/// Mean prediction of every condition for each question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionScores {
    pub schema: String,
    pub conditions: Vec<String>,
    pub questions: Vec<QuestionScoreRow>,
}

fn read_error(path: &Path, e: std::io::Error) -> CliError {
    let msg = format!("cannot read {}: {e}", path.display());
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Validation(msg)
    } else {
        CliError::Runtime(msg)
    }
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| read_error(path, e))
}

pub fn read_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| read_error(path, e))
}

/// Writes through a temporary file so a failed run leaves no partial output.
pub fn write_with<F>(path: &Path, f: F) -> CliResult
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let fail = |e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(fail)?;
    }
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp).map_err(fail)?);
    f(&mut w).map_err(fail)?;
    w.flush().map_err(fail)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(fail)
}

pub fn write_string(path: &Path, s: &str) -> CliResult {
    write_with(path, |w| w.write_all(s.as_bytes()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    write_string(path, &s)
}

/// JSON or TOML by extension.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = read_string(path)?;
    let bad = |m: String| CliError::Validation(format!("invalid config {}: {m}", path.display()));
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}
