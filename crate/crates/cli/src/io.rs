//! Text formats shared by the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::Failure;

/// Reads one finite nonnegative value per line, after an optional `x` header.
pub fn read_values(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if i == 0 && line == "x" {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            Failure::input(format!(
                "{}:{}: expected a number, found {line:?}",
                path.display(),
                i + 1
            ))
        })?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Failure::input(format!(
                "{}:{}: value must be finite and nonnegative, found {line}",
                path.display(),
                i + 1
            )));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(Failure::input(format!("{}: no observations", path.display())));
    }
    Ok(values)
}

/// 17 significant digits, enough to recover every `f64` exactly.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::input(format!("cannot encode {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// `out` with `suffix` appended to its file name.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn write_column(path: &Path, header: &str, values: &[f64]) -> Result<(), Failure> {
    let mut text = String::with_capacity(24 * (values.len() + 1));
    text.push_str(header);
    text.push('\n');
    for &v in values {
        let _ = writeln!(text, "{}", num(v));
    }
    write_text(path, &text)
}
