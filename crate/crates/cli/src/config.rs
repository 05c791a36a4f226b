//! Run configuration: defaults, then an optional TOML file, then `--set`
//! overrides from the command line.

use std::fs;
use std::path::Path;

use hdpbci::classify::{Method, PipelineConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Methods run by `experiment`.
    pub methods: Vec<Method>,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("configuration: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        crate::write_file(&dir.join("config.toml"), &self.to_toml())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{spec}`")))?;
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad --set key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "methods = [\"HMM-FP\"]\n[pipeline.hdp]\nkappa = 3.0\nalpha = 2.0\n",
        )
        .unwrap();
        let c = RunConfig::load(
            Some(&path),
            &["pipeline.hdp.kappa=7".into(), "pipeline.features.log_power=true".into()],
        )
        .unwrap();
        assert_eq!(c.methods, vec![Method::HmmFp]);
        assert_eq!(c.pipeline.hdp.kappa, 7.0);
        assert_eq!(c.pipeline.hdp.alpha, 2.0);
        assert!(c.pipeline.features.log_power);
        assert_eq!(c.pipeline.hdp.gamma, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["pipeline.hdp.kapa=1", "colour=1", "pipeline.features.bands=3"] {
            let e = RunConfig::load(None, &[bad.into()]).unwrap_err();
            assert_eq!(e.code, 2, "{bad}");
        }
        assert_eq!(RunConfig::load(None, &["novalue".into()]).unwrap_err().code, 2);
    }
}
