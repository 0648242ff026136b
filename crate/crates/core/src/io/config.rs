use std::path::Path;

use crate::error::{Error, Result, ValidationReport};
use crate::pipeline::PipelineConfig;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub scale: Option<usize>,
    pub window: Option<[usize; 2]>,
    pub stride: Option<[usize; 2]>,
    pub steps: Option<usize>,
    pub d0: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub guidance_stop_step: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.scale {
            cfg.scale = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.d0 {
            cfg.d0 = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.guidance_stop_step {
            cfg.guidance_stop_step = v;
        }
    }
}

fn report_error(message: String) -> Error {
    let mut report = ValidationReport::default();
    report.push(message);
    Error::Config(report)
}

/// Parses TOML config text; missing keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    toml::from_str(text).map_err(|e| report_error(e.to_string()))
}

pub fn config_to_string(cfg: &PipelineConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| report_error(e.to_string()))
}

/// Loads `path` (or defaults when `None`), applies `overrides` and validates
/// the result.
pub fn parse_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<PipelineConfig> {
    let cfg = load_config(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config`] without the final validation, for callers that still
/// need to fill in fields (such as image dimensions) first.
pub fn load_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config_str(&text).map_err(|e| match e {
                Error::Config(mut r) => {
                    for problem in &mut r.problems {
                        *problem = format!("{}: {problem}", p.display());
                    }
                    Error::Config(r)
                }
                other => other,
            })?
        }
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}
