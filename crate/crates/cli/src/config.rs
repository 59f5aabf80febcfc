use std::fs;
use std::path::Path;

use localness::{EncoderConfig, TaskSpec, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Experiment file: model, task, and training settings. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn micro() -> Self {
        Self {
            model: EncoderConfig::micro(),
            task: TaskSpec::micro(),
            training: TrainingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.task.validate_for(self.model.vocab_size, self.model.max_len)?;
        self.training.validate()?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = read(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_task(path: &Path) -> Result<TaskSpec, CliError> {
    let text = read(path)?;
    let task: TaskSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid task {}: {e}", path.display())))?;
    task.validate()?;
    Ok(task)
}
