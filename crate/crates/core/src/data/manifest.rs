use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{align_resample, load_channel, NormStats, Segment, WindowDataset};
use crate::error::{EltError, Result};
use crate::eval::ApplianceThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct House {
    pub name: String,
    pub split: Split,
    /// Mains CSV, relative to the manifest's directory.
    pub mains: PathBuf,
    /// Appliance name → CSV path.
    #[serde(default)]
    pub appliances: BTreeMap<String, PathBuf>,
}

/// Dataset manifest: which houses exist, their channel files, and whether
/// each house is used for training or held out for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "house")]
    pub houses: Vec<House>,
    /// Extra or overriding on-thresholds in watts.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EltError::io(path, e))?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| EltError::Config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn new(houses: Vec<House>, thresholds: BTreeMap<String, f64>) -> Self {
        Manifest {
            houses,
            thresholds,
            root: PathBuf::new(),
        }
    }

    pub fn thresholds(&self) -> ApplianceThresholds {
        let mut t = ApplianceThresholds::default();
        for (name, w) in &self.thresholds {
            t.insert(name, *w);
        }
        t
    }

    fn segments(&self, appliance: &str, split: Split, period: i64) -> Result<Vec<Segment>> {
        let mut out = Vec::new();
        for house in self.houses.iter().filter(|h| h.split == split) {
            let Some(app_path) = house.appliances.get(appliance) else {
                continue;
            };
            let mains = load_channel(&self.root.join(&house.mains))?;
            let app = load_channel(&self.root.join(app_path))?;
            out.extend(align_resample(&mains, &app, period)?);
        }
        Ok(out)
    }
}

/// Normalized train/test datasets for one appliance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: WindowDataset,
    pub test: WindowDataset,
}

/// Loads, aligns and normalizes every house of the manifest that records
/// `appliance`. Statistics are fitted on the training houses only and
/// reused for the held-out houses.
pub fn prepare(manifest: &Manifest, appliance: &str, input_len: usize, period: i64) -> Result<Prepared> {
    let train_raw = manifest.segments(appliance, Split::Train, period)?;
    let test_raw = manifest.segments(appliance, Split::Test, period)?;
    if train_raw.is_empty() {
        return Err(EltError::Data(format!("no training house records appliance `{appliance}`")));
    }
    if test_raw.is_empty() {
        return Err(EltError::Data(format!("no test house records appliance `{appliance}`")));
    }
    let all_mains: Vec<f64> = train_raw.iter().flat_map(|s| s.mains.iter().copied()).collect();
    let all_app: Vec<f64> = train_raw.iter().flat_map(|s| s.appliance.iter().copied()).collect();
    let mains_stats = NormStats::fit(&all_mains)?;
    let app_stats = NormStats::fit(&all_app)?;
    let normalize = |segs: Vec<Segment>| -> Vec<Segment> {
        segs.into_iter()
            .map(|s| Segment {
                mains: s.mains.iter().map(|&v| mains_stats.normalize(v)).collect(),
                appliance: s.appliance.iter().map(|&v| app_stats.normalize(v)).collect(),
                ..s
            })
            .collect()
    };
    let threshold = manifest.thresholds().get(appliance);
    let build = |segs| WindowDataset::new(appliance, threshold, input_len, 1, mains_stats, app_stats, segs);
    Ok(Prepared {
        train: build(normalize(train_raw))?,
        test: build(normalize(test_raw))?,
    })
}
