use std::path::Path;

use cograca_core::data::{write_atomic, RunConfig};
use serde::{Deserialize, Serialize};

use crate::commands::Run;
use crate::failure::{Failure, Kind};

pub const RECORD_FILE: &str = "run_record.json";
pub const CONFIG_FILE: &str = "run_config.toml";

/// Everything needed to repeat a run: its arguments and effective config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub model: Option<String>,
    pub seed: u64,
    pub code_version: String,
    pub config: RunConfig,
    /// Artifact paths relative to the output directory.
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

fn relative(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn write_record(run: &Run, args: Vec<String>, duration_seconds: f64) -> Result<RunRecord, Failure> {
    let config_path = run.out.join(CONFIG_FILE);
    write_atomic(&config_path, run.config.to_toml().as_bytes())?;
    let mut outputs: Vec<String> = run.outputs.iter().map(|p| relative(&run.out, p)).collect();
    outputs.push(CONFIG_FILE.to_string());
    outputs.sort();
    let record = RunRecord {
        command: run.command.clone(),
        args,
        model: run.model.clone(),
        seed: run.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: run.config.clone(),
        outputs,
        duration_seconds,
    };
    let mut text = serde_json::to_string_pretty(&record).map_err(|e| Failure::new(Kind::Invariant, e.to_string()))?;
    text.push('\n');
    write_atomic(&run.out.join(RECORD_FILE), text.as_bytes())?;
    Ok(record)
}
