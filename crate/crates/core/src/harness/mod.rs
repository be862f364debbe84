//! CLI-driven orchestration: probe pretraining and evaluation, behavior
//! cloning, LoRA finetuning, rollout evaluation with metrics, ablation
//! sweeps and report emission.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod probe;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use crate::dataset::{
    make_probe_dataset, read_probe_dataset, write_probe_dataset, ProbeExample, ProbeTask,
};
use crate::error::Result;

pub use config::{Precision, RunConfig};

/// Probe datasets for all three tasks, written under `dir` and reused when
/// already present.
pub fn ensure_probe_datasets(
    run: &RunConfig,
    dir: &Path,
) -> Result<Vec<(ProbeTask, Vec<ProbeExample>, PathBuf)>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for task in ProbeTask::all() {
        let path = dir.join(format!("probe_{}.tvpd", task.tag()));
        let examples = if path.exists() {
            let (stored_task, examples) = read_probe_dataset(&path)?;
            if stored_task != task {
                return Err(crate::error::Error::Format {
                    offset: 0,
                    detail: format!("{} holds {}, expected {}", path.display(), stored_task.tag(), task.tag()),
                });
            }
            examples
        } else {
            let examples = make_probe_dataset(task, run.probe_examples, run.seed);
            write_probe_dataset(&path, task, &examples)?;
            examples
        };
        out.push((task, examples, path));
    }
    Ok(out)
}
