//! Primitive manifest: a plain-text key-value tree overriding model
//! parameters per primitive.
//!
//! ```text
//! # comment
//! [primitive crowd-vote]
//! gamma = 1.0
//! cost_cents = 1
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("line {line}: expected `[primitive <name>]` or `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("line {line}: `{key}` outside any [primitive ...] section")]
    NoSection { line: usize, key: String },
}

/// Per-primitive overrides. Anything absent keeps its built-in default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrimParams {
    pub cost_cents: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub nu: Option<f64>,
    pub bins: Option<u32>,
    pub intervals: Option<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    pub per_primitive: BTreeMap<String, PrimParams>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> PrimParams {
        self.per_primitive.get(name).cloned().unwrap_or_default()
    }

    pub fn set(&mut self, name: &str, params: PrimParams) {
        self.per_primitive.insert(name.to_string(), params);
    }

    pub fn parse(text: &str) -> Result<ModelParams, ManifestError> {
        let mut out = ModelParams::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let inner = rest.strip_suffix(']').ok_or_else(|| ManifestError::BadLine {
                    line,
                    text: trimmed.to_string(),
                })?;
                let name = inner.strip_prefix("primitive ").ok_or_else(|| ManifestError::BadLine {
                    line,
                    text: trimmed.to_string(),
                })?;
                let name = name.trim().to_string();
                out.per_primitive.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ManifestError::BadLine {
                line,
                text: trimmed.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let name = section.clone().ok_or_else(|| ManifestError::NoSection {
                line,
                key: key.to_string(),
            })?;
            let params = out.per_primitive.get_mut(&name).expect("section inserted");
            let bad = |msg: &str| ManifestError::BadValue {
                line,
                key: key.to_string(),
                msg: msg.to_string(),
            };
            match key {
                "cost_cents" => {
                    let v: f64 = value.parse().map_err(|_| bad("not a number"))?;
                    if v < 0.0 {
                        return Err(bad("cost must be nonnegative"));
                    }
                    params.cost_cents = Some(v);
                }
                "gamma" => {
                    let v: f64 = value.parse().map_err(|_| bad("not a number"))?;
                    if v <= 0.0 {
                        return Err(bad("gamma must be positive"));
                    }
                    params.gamma = Some(v);
                }
                "delta" => {
                    let v: f64 = value.parse().map_err(|_| bad("not a number"))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(bad("delta must be in [0, 1]"));
                    }
                    params.delta = Some(v);
                }
                "nu" => {
                    let v: f64 = value.parse().map_err(|_| bad("not a number"))?;
                    if v <= 0.0 {
                        return Err(bad("nu must be positive"));
                    }
                    params.nu = Some(v);
                }
                "bins" => {
                    let v: u32 = value.parse().map_err(|_| bad("not an integer"))?;
                    if v < 2 {
                        return Err(bad("bins must be at least 2"));
                    }
                    params.bins = Some(v);
                }
                "intervals" => {
                    let v: u32 = value.parse().map_err(|_| bad("not an integer"))?;
                    if v < 1 {
                        return Err(bad("intervals must be at least 1"));
                    }
                    params.intervals = Some(v);
                }
                other => {
                    return Err(ManifestError::UnknownKey {
                        line,
                        key: other.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_values() {
        let text = "# worker model\n[primitive crowd-vote]\ngamma = 2.0\ncost_cents = 3\n\n[primitive c-imp]\nbins = 4\n";
        let params = ModelParams::parse(text).unwrap();
        assert_eq!(params.get("crowd-vote").gamma, Some(2.0));
        assert_eq!(params.get("crowd-vote").cost_cents, Some(3.0));
        assert_eq!(params.get("c-imp").bins, Some(4));
        assert_eq!(params.get("c-find"), PrimParams::default());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ModelParams::parse("[primitive c-imp]\nshine = 1\n").unwrap_err();
        assert!(matches!(err, ManifestError::UnknownKey { key, .. } if key == "shine"));
    }

    #[test]
    fn key_outside_section_is_an_error() {
        let err = ModelParams::parse("gamma = 1\n").unwrap_err();
        assert!(matches!(err, ManifestError::NoSection { .. }));
    }

    #[test]
    fn range_checks() {
        assert!(ModelParams::parse("[primitive c-imp]\nbins = 1\n").is_err());
        assert!(ModelParams::parse("[primitive c-imp]\ndelta = 1.5\n").is_err());
        assert!(ModelParams::parse("[primitive crowd-vote]\ncost_cents = -1\n").is_err());
    }
}
