//! Run configuration file: one JSON object with a section per subcommand.
//! Every key is optional; command-line flags take precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::encoder::EncoderConfig;
use crate::error::{MiveError, Result};
use crate::trainer::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "MIVE_DATA_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSection {
    pub count: Option<usize>,
    pub types: Option<Vec<String>>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub cap: Option<usize>,
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub encoder: Option<EncoderConfig>,
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub judge: Option<String>,
    pub endpoint: Option<String>,
    pub ratings: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub gen_data: GenDataSection,
    pub filter: FilterSection,
    pub train: Option<TrainConfig>,
    pub edit: EditSection,
    pub diagnose: DiagnoseSection,
    pub evaluate: EvaluateSection,
    pub ablate: Option<AblationConfig>,
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MiveError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MiveError::invalid(format!("{}: {e}", path.display())))
    }

    /// Flag, then file, then `$MIVE_DATA_DIR`, then `./data`.
    pub fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.data_dir.clone())
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg: FileConfig = serde_json::from_str(
            r#"{"train": {"lr": 0.001, "model": {"depth": 2}}, "edit": {"steps": 8}, "ablate": {"edit_steps": 3}}"#,
        )
        .unwrap();
        let train = cfg.train.unwrap();
        assert_eq!(train.lr, 0.001);
        assert_eq!(train.model.depth, 2);
        assert_eq!(train.model.dim, 256);
        assert_eq!(train.warmup_steps, TrainConfig::default().warmup_steps);
        assert_eq!(cfg.edit.steps, Some(8));
        assert_eq!(cfg.ablate.unwrap().edit_steps, 3);
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn flag_beats_file() {
        let cfg = FileConfig { data_dir: Some("from_file".into()), ..Default::default() };
        assert_eq!(cfg.data_root(Some(Path::new("flag"))), PathBuf::from("flag"));
        assert_eq!(cfg.data_root(None), PathBuf::from("from_file"));
    }
}
