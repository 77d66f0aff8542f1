use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::CliError;
use segdiff_core::Error;

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.is_file() {
        return Err(CliError::Usage(format!("{} is a file", dir.display())));
    }
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a, S: Serialize> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    threads: usize,
    settings: &'a S,
}

/// Writes `settings.toml` with the resolved settings and `run.json` with the
/// command line and version.
pub fn record<S: Serialize>(dir: &Path, command: &str, argv: &[String], jobs: usize, settings: &S) -> Result<(), CliError> {
    let toml_path = dir.join("settings.toml");
    fs::write(&toml_path, crate::config::render(settings)).map_err(|e| Error::io(&toml_path, e))?;
    let rec = RunRecord {
        command,
        argv,
        version: env!("CARGO_PKG_VERSION"),
        threads: jobs,
        settings,
    };
    let json_path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&rec).expect("run record serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
