use std::path::{Path, PathBuf};

use ldznet::diffusion::LdmConfig;
use ldznet::latentae::AeConfig;
use ldznet::probes::ProbeGridSpec;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

pub const OUT_ENV: &str = "LDZ_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { n_train: 2048, n_val: 256, n_test: 512, height: 64, width: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegSettings {
    pub t_star: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub init_std: f64,
    pub pool_heads: usize,
    pub stem_channels: usize,
    pub eval_noise_seed: u64,
}

impl Default for SegSettings {
    fn default() -> Self {
        let d = ldznet::segnets::SegConfig::default();
        SegSettings {
            t_star: d.t_star,
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            init_std: d.init_std,
            pool_heads: d.pool_heads,
            stem_channels: d.stem_channels,
            eval_noise_seed: d.eval_noise_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySettings {
    pub scenes: usize,
    pub noise_seeds: usize,
    pub t: usize,
}

impl Default for SaliencySettings {
    fn default() -> Self {
        SaliencySettings { scenes: 100, noise_seeds: 16, t: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub prompt: String,
    pub steps: usize,
    pub guidance: f64,
    pub count: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings { prompt: "a photo of a red circle".into(), steps: 50, guidance: 3.0, count: 4 }
    }
}

/// One experiment: root seed, output root and every stage's settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub device: String,
    pub data: DataSettings,
    pub ae: AeConfig,
    pub ldm: LdmConfig,
    pub seg: SegSettings,
    pub probe: ProbeGridSpec,
    pub saliency: SaliencySettings,
    pub sample: SampleSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            device: "cpu".into(),
            data: DataSettings::default(),
            ae: AeConfig::default(),
            ldm: LdmConfig::default(),
            seg: SegSettings::default(),
            probe: ProbeGridSpec::default(),
            saliency: SaliencySettings::default(),
            sample: SampleSettings::default(),
        }
    }
}

/// Parses a `--set` value: TOML literal if it parses, bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> RunResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `file` (if any), applies `key.path=value` overrides, then the
    /// output-root environment variable.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> RunResult<ExperimentConfig> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| RunError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| RunError::Config(e.message().to_string()))?;
        if let Ok(out) = std::env::var(OUT_ENV) {
            if !out.is_empty() && !overrides.iter().any(|o| o.trim_start().starts_with("out")) {
                cfg.out = PathBuf::from(out);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(None, &["seed=12".into(), "ldm.unet.base_channels=16".into(), "sample.prompt=blue star".into()]).unwrap();
        assert_eq!(cfg.seed, 12);
        assert_eq!(cfg.ldm.unet.base_channels, 16);
        assert_eq!(cfg.ldm.unet.heads, 4);
        assert_eq!(cfg.sample.prompt, "blue star");
        assert!(ExperimentConfig::load(None, &["nonsense=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["seed".into()]).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[data]\nn_train = 10\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["data.n_val=7".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test), (3, 10, 7, 512));
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
