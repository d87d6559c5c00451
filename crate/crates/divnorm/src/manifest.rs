//! Experiment manifests: `<out_dir>/<command>.manifest`, written next to every
//! output. A manifest is a config file with a few extra keys, so `rerun` can
//! replay the command from it alone.
//!
//! ```text
//! command = train
//! dataset_format_version = 1
//! checkpoint_format_version = 1
//! seed = 0
//! ...                      # every ExperimentConfig key
//! input = out/dataset.csv  # repeated
//! output = out/train_log.csv
//! ```

use std::path::{Path, PathBuf};

use crate::config::{parse_assignments, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::{checkpoint, dataset};

pub const EXTENSION: &str = "manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn path_in(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}.{EXTENSION}"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# divnorm experiment manifest\n");
        s += &format!("command = {}\n", self.command);
        s += &format!("dataset_format_version = {}\n", dataset::FORMAT_VERSION);
        s += &format!("checkpoint_format_version = {}\n", checkpoint::FORMAT_VERSION);
        s += &self.config.to_text();
        for p in &self.inputs {
            s += &format!("input = {}\n", p.display());
        }
        for p in &self.outputs {
            s += &format!("output = {}\n", p.display());
        }
        s
    }

    /// Config keys start from the built-in defaults, not the environment, so a
    /// manifest means the same thing wherever it is replayed.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut command = None;
        let mut config = ExperimentConfig::default();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (line, key, value) in parse_assignments(text, source_name)? {
            let version = |expected: u32| -> Result<()> {
                match value.parse::<u32>() {
                    Ok(v) if v == expected => Ok(()),
                    _ => Err(CliError::parse(
                        source_name,
                        line,
                        format!("unsupported {key} `{value}` (this build reads {expected})"),
                    )),
                }
            };
            match key.as_str() {
                "command" => command = Some(value),
                "dataset_format_version" => version(dataset::FORMAT_VERSION)?,
                "checkpoint_format_version" => version(checkpoint::FORMAT_VERSION)?,
                "input" => inputs.push(PathBuf::from(value)),
                "output" => outputs.push(PathBuf::from(value)),
                _ => config.set(&key, &value).map_err(|e| CliError::parse(source_name, line, e.to_string()))?,
            }
        }
        let command = command.ok_or_else(|| CliError::parse(source_name, 0, "missing `command`"))?;
        Ok(Self { command, config, inputs, outputs })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = Self::path_in(&self.config.out_dir, &self.command);
        std::fs::write(&path, self.to_text()).map_err(|source| CliError::Write { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut config = ExperimentConfig::default();
        config.set("epochs", "7").unwrap();
        config.set("out_dir", "runs/a").unwrap();
        let m = Manifest {
            command: "train".into(),
            config,
            inputs: vec![PathBuf::from("runs/a/dataset.csv")],
            outputs: vec![PathBuf::from("runs/a/checkpoint.bin"), PathBuf::from("runs/a/train_log.csv")],
        };
        assert_eq!(Manifest::parse(&m.to_text(), "m").unwrap(), m);
    }

    #[test]
    fn rejects_other_format_versions() {
        let text = "command = synth\ndataset_format_version = 99\n";
        assert!(Manifest::parse(text, "m").unwrap_err().to_string().contains("dataset_format_version"));
        assert!(Manifest::parse("seed = 1\n", "m").is_err());
    }
}
