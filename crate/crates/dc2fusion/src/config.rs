//! Flat `key = value` run configuration files.
//!
//! Keys are the [`ModelConfig`] field names (`heads` and `window` also take
//! comma lists) plus `lr`. Blank lines and `#` comments are ignored.

use std::fs;
use std::path::Path;

use dc2fusion_core::ModelConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunFile {
    pub model: ModelConfig,
    pub lr: Option<f64>,
}

pub fn parse_run_file(text: &str, path: &Path) -> Result<RunFile> {
    let mut model = ModelConfig::default();
    let mut lr = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Config {
            path: path.into(),
            line: i + 1,
            detail,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "lr" {
            let v: f64 = value
                .parse()
                .map_err(|_| err(format!("lr `{value}` is not a number")))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(err(format!("lr must be positive, got {v}")));
            }
            lr = Some(v);
        } else {
            model.set(key, value).map_err(|e| err(e.to_string()))?;
        }
    }
    model.validate().map_err(|e| Error::Config {
        path: path.into(),
        line: 0,
        detail: e.to_string(),
    })?;
    Ok(RunFile { model, lr })
}

pub fn load_run_file(path: &Path) -> Result<RunFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_file(&text, path)
}

/// Renders a configuration in the same format.
pub fn render_run_file(model: &ModelConfig, lr: f64) -> String {
    let mut s = String::new();
    for (k, v) in model.fields() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str(&format!("lr = {lr}\n"));
    s
}
