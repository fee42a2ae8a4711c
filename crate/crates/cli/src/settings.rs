//! Dataset and training configuration resolved from a config file and flags.

use std::fs;
use std::path::Path;

use ccsfg_core::synthdata::{DataConfig, DATA_KEYS};
use ccsfg_core::trainer::{TrainConfig, KEYS};
use ccsfg_core::Error;
use clap::ArgMatches;

use crate::CliError;

pub const ECHO_FILE: &str = "effective.cfg";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if DATA_KEYS.contains(&key) {
            self.data.set(key, value).map_err(|e| Error::Config(e.to_string()))?;
        } else {
            self.train.set(key, value)?;
        }
        Ok(())
    }

    /// `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `--config`, then per-key flags.
    pub fn resolve(m: &ArgMatches) -> Result<Self, CliError> {
        let mut s = Self::default();
        if let Some(path) = m.get_one::<std::path::PathBuf>("config") {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            s.apply_text(&text)?;
        }
        for key in DATA_KEYS.iter().chain(KEYS) {
            if let Some(v) = m.get_one::<String>(key) {
                s.set(key, v)?;
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "# dataset\n{}\n# training\n{}",
            self.data.to_text(),
            self.train.to_text()
        )
    }

    /// Write the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_text_reads_back() {
        let mut s = Settings::default();
        s.set("cameras", "3").unwrap();
        s.set("epochs", "7").unwrap();
        s.set("lr_decay_at", "0.5").unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut s = Settings::default();
        for (k, v) in [("cameras", "many"), ("epochs", "-1"), ("nope", "1")] {
            let e = s.set(k, v).unwrap_err();
            assert_eq!(e.code(), 1, "{k}");
        }
        assert_eq!(s.apply_text("epochs 3").unwrap_err().kind(), "config");
    }

    #[test]
    fn validation_spans_both_halves() {
        let mut s = Settings::default();
        s.set("train_ids", "3").unwrap();
        assert_eq!(s.validate().unwrap_err().kind(), "config");
        let mut s = Settings::default();
        s.set("alpha", "2").unwrap();
        assert_eq!(s.validate().unwrap_err().kind(), "config");
    }
}
