//! Seeded synthetic households.
//!
//! Each appliance is a cyclic state machine: it stays in a state for a
//! geometrically distributed number of samples, then advances to the next
//! state (wrapping around). Readings are the state's mean watts plus Gaussian
//! noise, clamped at 0 W. Mains is the per-sample sum of appliances plus its
//! own clamped Gaussian noise, so with zero mains noise it equals the sum
//! exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use super::{write_channel, House, Manifest, PowerSeries, Split};
use crate::error::{EltError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceState {
    pub watts: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Mean dwell time in samples (geometric, >= 1).
    pub mean_dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceModel {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_threshold: Option<f64>,
    #[serde(rename = "state")]
    pub states: Vec<ApplianceState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub days: f64,
    /// Trailing days written as a separate held-out house.
    #[serde(default = "default_test_days")]
    pub test_days: f64,
    #[serde(default = "default_period")]
    pub period: i64,
    #[serde(default = "default_start")]
    pub start: i64,
    #[serde(default)]
    pub mains_noise_std: f64,
    #[serde(rename = "appliance")]
    pub appliances: Vec<ApplianceModel>,
}

fn default_test_days() -> f64 {
    1.0
}
fn default_period() -> i64 {
    super::SAMPLE_PERIOD
}
fn default_start() -> i64 {
    1_700_000_004
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub mains: PowerSeries,
    pub appliances: Vec<PowerSeries>,
}

impl SyntheticScenario {
    /// Two devices: a 2-state 1500 W kettle-like load and a 3-state
    /// washer-like load, over seven days.
    pub fn two_appliance(seed: u64) -> Self {
        let st = |watts, noise_std, mean_dwell| ApplianceState {
            watts,
            noise_std,
            mean_dwell,
        };
        SyntheticScenario {
            seed,
            days: 7.0,
            test_days: 1.0,
            period: 6,
            start: default_start(),
            mains_noise_std: 10.0,
            appliances: vec![
                ApplianceModel {
                    name: "kettle_like".into(),
                    on_threshold: Some(750.0),
                    states: vec![st(0.0, 0.0, 300.0), st(1500.0, 20.0, 30.0)],
                },
                ApplianceModel {
                    name: "washer_like".into(),
                    on_threshold: Some(100.0),
                    states: vec![st(0.0, 0.0, 1500.0), st(200.0, 20.0, 150.0), st(500.0, 40.0, 60.0)],
                },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SyntheticScenario = toml::from_str(text).map_err(|e| EltError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn samples(&self) -> usize {
        (self.days * 86_400.0 / self.period as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.period <= 0 {
            problems.push("period must be positive".to_string());
        }
        if !(self.days > 0.0) {
            problems.push("days must be positive".to_string());
        }
        if !(self.test_days >= 0.0 && self.test_days < self.days) {
            problems.push("test_days must be in [0, days)".to_string());
        }
        if !(self.mains_noise_std >= 0.0) {
            problems.push("mains_noise_std must be >= 0".to_string());
        }
        if self.appliances.is_empty() {
            problems.push("at least one appliance is required".to_string());
        }
        for a in &self.appliances {
            if a.states.is_empty() {
                problems.push(format!("appliance {}: no states", a.name));
            }
            for (i, s) in a.states.iter().enumerate() {
                if !(s.mean_dwell >= 1.0) || !s.mean_dwell.is_finite() {
                    problems.push(format!("appliance {} state {i}: mean_dwell must be >= 1", a.name));
                }
                if !(s.noise_std >= 0.0) {
                    problems.push(format!("appliance {} state {i}: noise_std must be >= 0", a.name));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EltError::Config(problems.join("; ")))
        }
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        self.validate()?;
        let n = self.samples();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let timestamps: Vec<i64> = (0..n as i64).map(|i| self.start + i * self.period).collect();
        let mut total = vec![0.0; n];
        let mut appliances = Vec::with_capacity(self.appliances.len());
        for app in &self.appliances {
            let dwell: Vec<Geometric> = app
                .states
                .iter()
                .map(|s| Geometric::new(1.0 / s.mean_dwell).map_err(|e| EltError::Config(format!("{}: {e}", app.name))))
                .collect::<Result<_>>()?;
            let noise: Vec<Normal<f64>> = app
                .states
                .iter()
                .map(|s| Normal::new(0.0, s.noise_std).map_err(|e| EltError::Config(format!("{}: {e}", app.name))))
                .collect::<Result<_>>()?;
            let mut values = Vec::with_capacity(n);
            let mut state = 0;
            let mut remaining = 1 + dwell[0].sample(&mut rng);
            for t in 0..n {
                if remaining == 0 {
                    state = (state + 1) % app.states.len();
                    remaining = 1 + dwell[state].sample(&mut rng);
                }
                remaining -= 1;
                let s = &app.states[state];
                let jitter = if s.noise_std > 0.0 { noise[state].sample(&mut rng) } else { 0.0 };
                let w = (s.watts + jitter).max(0.0);
                total[t] += w;
                values.push(w);
            }
            appliances.push(PowerSeries::new(app.name.clone(), timestamps.clone(), values)?);
        }
        let mains_noise = Normal::new(0.0, self.mains_noise_std).map_err(|e| EltError::Config(e.to_string()))?;
        let mains_values = total
            .into_iter()
            .map(|v| {
                if self.mains_noise_std > 0.0 {
                    (v + mains_noise.sample(&mut rng)).max(0.0)
                } else {
                    v
                }
            })
            .collect();
        Ok(SyntheticData {
            mains: PowerSeries::new("mains", timestamps, mains_values)?,
            appliances,
        })
    }

    /// Generates the scenario and writes `train/` and `test/` channel CSVs
    /// plus `manifest.toml` under `out`. Returns the manifest path.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let data = self.generate()?;
        let n_test = (self.test_days * 86_400.0 / self.period as f64).round() as usize;
        let n_train = data.mains.len() - n_test;
        let mut houses = Vec::new();
        for (split, range) in [(Split::Train, 0..n_train), (Split::Test, n_train..data.mains.len())] {
            if range.is_empty() {
                continue;
            }
            let name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let dir = out.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| EltError::io(&dir, e))?;
            let slice = |s: &PowerSeries| PowerSeries {
                name: s.name.clone(),
                timestamps: s.timestamps[range.clone()].to_vec(),
                values: s.values[range.clone()].to_vec(),
            };
            write_channel(&dir.join("mains.csv"), &slice(&data.mains))?;
            let mut appliances = BTreeMap::new();
            for a in &data.appliances {
                let file = format!("{}.csv", a.name);
                write_channel(&dir.join(&file), &slice(a))?;
                appliances.insert(a.name.clone(), PathBuf::from(name).join(file));
            }
            houses.push(House {
                name: format!("synthetic_{name}"),
                split,
                mains: PathBuf::from(name).join("mains.csv"),
                appliances,
            });
        }
        let thresholds = self
            .appliances
            .iter()
            .filter_map(|a| a.on_threshold.map(|t| (a.name.clone(), t)))
            .collect();
        let manifest = Manifest::new(houses, thresholds);
        let path = out.join("manifest.toml");
        std::fs::write(&path, manifest.to_toml()).map_err(|e| EltError::io(&path, e))?;
        Ok(path)
    }
}
