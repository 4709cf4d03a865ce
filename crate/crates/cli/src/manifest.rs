use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Written next to every output as `<out>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    /// Every flag after defaults are applied.
    pub parameters: Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub software: &'static str,
    pub version: &'static str,
    pub started: String,
    pub finished: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(subcommand: &'static str, parameters: Value, seed: Option<u64>, threads: usize) -> Self {
        Self {
            subcommand,
            parameters,
            seed,
            threads,
            software: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            started: now(),
            finished: String::new(),
        }
    }
}
