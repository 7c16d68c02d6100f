//! Output directory layout of a run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;

use super::config::ExperimentConfig;
use super::runner::{run_experiment_with, RunArtifacts};
use super::trace;

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";

/// Removes the files it tracks unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.dir {
            let _ = fs::remove_dir(d);
        }
    }
}

fn write_text(path: &Path, text: &str, cleanup: &mut Cleanup) -> Result<()> {
    cleanup.files.push(path.to_path_buf());
    fs::write(path, text)?;
    Ok(())
}

/// Runs `cfg` and writes `config.json`, `trace.csv` (flushed after every
/// round), `summary.json` and, for classifiers, `accuracy_matrix.csv` into
/// `dir`. Files written by a failed run are removed again.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let created = !dir.exists();
    fs::create_dir_all(dir)?;
    let mut cleanup = Cleanup { files: Vec::new(), dir: created.then(|| dir.to_path_buf()), armed: true };

    write_text(&dir.join(CONFIG_FILE), &(cfg.to_json()? + "\n"), &mut cleanup)?;
    let trace_path = dir.join(TRACE_FILE);
    cleanup.files.push(trace_path.clone());
    let mut out = BufWriter::new(File::create(&trace_path)?);
    writeln!(out, "{}", trace::header(cfg.num_tasks()))?;
    let artifacts = run_experiment_with(cfg, |row| {
        writeln!(out, "{}", row.to_csv_line())?;
        out.flush()?;
        Ok(())
    })?;
    out.flush()?;
    drop(out);

    let summary = serde_json::to_string_pretty(&artifacts.summary)? + "\n";
    write_text(&dir.join(SUMMARY_FILE), &summary, &mut cleanup)?;
    if let Some(m) = &artifacts.accuracy {
        write_text(&dir.join(MATRIX_FILE), &m.to_csv(), &mut cleanup)?;
    }
    cleanup.armed = false;
    Ok(artifacts)
}
