//! Configuration file and precedence rules.
//!
//! Every option resolves as: command-line flag, then environment variable,
//! then the TOML config file, then the built-in default. Flags and variables
//! are merged by clap; [`pick`] adds the file layer.
//!
//! ```toml
//! data_dir = "data/mnist"
//! mnist_url = "https://ossci-datasets.s3.amazonaws.com/mnist/"
//!
//! [train]          # any TrainConfig key
//! seed = 3
//! gan_steps = 2000
//! [train.weights]
//! lambda_l1 = 10.0
//!
//! [serve]
//! port = 8080
//! generator = "runs/gan/generator.nnck"
//! classifier = "runs/cls/classifier.nnck"
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use neurocalc::training::TrainConfig;
use serde::Deserialize;

pub const CONFIG_ENV: &str = "NEUROCALC_CONFIG";
pub const DATA_DIR_ENV: &str = "NEUROCALC_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub mnist_url: Option<String>,
    pub train: TrainConfig,
    pub serve: ServeFile,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeFile {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub generator: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub render_seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}

/// Flag-or-environment value, else the file value.
pub fn pick<T>(cli: Option<T>, file: Option<T>) -> Option<T> {
    cli.or(file)
}
