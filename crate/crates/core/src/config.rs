//! Run configuration: one TOML file with `[run]`, `[data]`, `[model]` and
//! `[train]` sections. Missing keys take defaults; unknown keys and every
//! violated invariant are reported together.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EltError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// The single seed every random choice derives from.
    pub seed: u64,
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            deterministic: true,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub appliance: Option<String>,
    /// Resampling period in seconds.
    pub period: i64,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Step between consecutive evaluation windows.
    pub eval_stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            appliance: None,
            period: crate::data::SAMPLE_PERIOD,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn section_keys<T: Serialize>(value: &T) -> Vec<String> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_section<T: DeserializeOwned + Default + Serialize>(
    root: &toml::Table,
    name: &str,
    known: &[String],
    reserved: &[&str],
    problems: &mut Vec<String>,
) -> T {
    let Some(raw) = root.get(name) else {
        return T::default();
    };
    let Some(table) = raw.as_table() else {
        problems.push(format!("[{name}] must be a table"));
        return T::default();
    };
    let mut kept = toml::Table::new();
    for (k, v) in table {
        if reserved.contains(&k.as_str()) {
            problems.push(format!("{name}.{k}: set this in [run] instead"));
        } else if known.iter().any(|kk| kk == k) {
            kept.insert(k.clone(), v.clone());
        } else {
            problems.push(format!("{name}.{k}: unknown key"));
        }
    }
    // Deserialize key by key so that every type error is reported.
    let mut accepted = toml::Table::new();
    for (k, v) in kept {
        let mut probe = toml::Table::new();
        probe.insert(k.clone(), v.clone());
        match probe.try_into::<T>() {
            Ok(_) => {
                accepted.insert(k, v);
            }
            Err(e) => problems.push(format!("{name}.{k}: {}", e.message().trim())),
        }
    }
    accepted.try_into::<T>().unwrap_or_else(|e| {
        problems.push(format!("[{name}]: {}", e.message().trim()));
        T::default()
    })
}

impl RunConfig {
    /// Parses `text`. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| EltError::Config(format!("invalid TOML: {}", e.message().trim())))?;
        let mut problems = Vec::new();
        for key in root.keys() {
            if !["run", "data", "model", "train"].contains(&key.as_str()) {
                problems.push(format!("{key}: unknown section or key"));
            }
        }
        let mut run_keys = section_keys(&RunSection::default());
        run_keys.push("out".into());
        let mut data_keys = section_keys(&DataSection::default());
        data_keys.extend(["manifest".into(), "appliance".into()]);
        let mut cfg = RunConfig {
            run: parse_section(&root, "run", &run_keys, &[], &mut problems),
            data: parse_section(&root, "data", &data_keys, &[], &mut problems),
            model: parse_section(&root, "model", &section_keys(&ModelConfig::default()), &[], &mut problems),
            train: parse_section(
                &root,
                "train",
                &section_keys(&TrainConfig::default()),
                &["seed", "deterministic"],
                &mut problems,
            ),
        };
        cfg.sync();
        for p in [&mut cfg.run.out, &mut cfg.data.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(EltError::Config(problems.join("\n")))
        }
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EltError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&text, &base).map_err(|e| match e {
            EltError::Config(m) => EltError::Config(format!("{}:\n{m}", path.display())),
            other => other,
        })
    }

    /// Copies the run-level seed and determinism flag into the training section.
    pub fn sync(&mut self) {
        self.train.seed = self.run.seed;
        self.train.deterministic = self.run.deterministic;
    }

    /// Every violated invariant, prefixed with its section.
    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.model.problems().into_iter().map(|m| format!("model.{m}")).collect();
        p.extend(self.train.problems().into_iter().map(|m| format!("train.{m}")));
        if self.data.period <= 0 {
            p.push("data.period must be positive".into());
        }
        if self.data.train_stride == 0 {
            p.push("data.train_stride must be >= 1".into());
        }
        if self.data.eval_stride == 0 {
            p.push("data.eval_stride must be >= 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(EltError::Config(p.join("\n")))
        }
    }

    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.sync();
        let mut value = toml::Value::try_from(&c).expect("config serializes");
        if let Some(train) = value.get_mut("train").and_then(toml::Value::as_table_mut) {
            train.remove("seed");
            train.remove("deterministic");
        }
        toml::to_string_pretty(&value).expect("config serializes")
    }

    /// Writes the fully resolved configuration as `dir/config.resolved.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| EltError::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| EltError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.model.d_model, 256);
        assert_eq!(c.model.n_heads, 4);
        assert_eq!(c.model.n_local, 2);
        assert_eq!(c.model.l_win, 20);
        assert_eq!(c.model.input_len, 599);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.batch, 256);
    }

    #[test]
    fn even_input_len_is_rejected() {
        let err = parse("[model]\ninput_len = 600\n").unwrap_err().to_string();
        assert!(err.contains("input_len must be odd"), "{err}");
    }

    #[test]
    fn too_many_local_heads() {
        let err = parse("[model]\nn_local = 5\n").unwrap_err().to_string();
        assert!(err.contains("n_local"), "{err}");
    }

    #[test]
    fn all_errors_are_reported() {
        let text = "bogus = 1\n[model]\ninput_len = 600\nwidth = 3\nl_win = \"wide\"\n[train]\npatience = 0\nseed = 4\n";
        let err = parse(text).unwrap_err().to_string();
        for needle in ["bogus", "input_len must be odd", "model.width", "model.l_win", "patience", "train.seed"] {
            assert!(err.contains(needle), "missing {needle} in:\n{err}");
        }
    }

    #[test]
    fn seed_flows_into_training_and_paths_resolve() {
        let c = parse("[run]\nseed = 77\nout = \"runs/a\"\n[data]\nmanifest = \"m.toml\"\n").unwrap();
        assert_eq!(c.train.seed, 77);
        assert_eq!(c.data.manifest.as_deref(), Some(Path::new("/base/m.toml")));
        assert_eq!(c.run.out.as_deref(), Some(Path::new("/base/runs/a")));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse("[run]\nseed = 3\n[model]\nd_model = 32\nglobal_attention = \"standard\"\n[train]\nlr = 0.001\n").unwrap();
        let again = parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }
}
