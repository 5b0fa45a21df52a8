//! Disaggregation metrics: MAE in watts plus F1 and MCC on on/off status.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowDataset};
use crate::error::{EltError, Result};
use crate::model::EltModel;

/// Per-appliance on-thresholds in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct ApplianceThresholds(BTreeMap<String, f64>);

impl Default for ApplianceThresholds {
    fn default() -> Self {
        let table = [
            ("dishwasher", 10.0),
            ("fridge", 50.0),
            ("kettle", 2000.0),
            ("microwave", 200.0),
            ("washer", 20.0),
        ];
        ApplianceThresholds(table.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

impl ApplianceThresholds {
    pub fn get(&self, appliance: &str) -> Option<f64> {
        self.0.get(appliance).copied()
    }

    pub fn insert(&mut self, appliance: &str, watts: f64) {
        self.0.insert(appliance.to_string(), watts);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn require(&self, appliance: &str) -> Result<f64> {
        match self.get(appliance) {
            Some(t) if t > 0.0 => Ok(t),
            Some(t) => Err(EltError::Config(format!("threshold for {appliance} must be > 0, got {t}"))),
            None => Err(EltError::Config(format!(
                "unknown appliance `{appliance}`; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// Normalized prediction back to watts, clamped at 0 W.
pub fn denormalize(pred_norm: f64, stats: &NormStats) -> f64 {
    stats.denormalize(pred_norm).max(0.0)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EltError::Usage(format!(
            "mae needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `power >= threshold` → on.
pub fn statusize_with(power: &[f64], threshold: f64) -> Vec<bool> {
    power.iter().map(|&p| p >= threshold).collect()
}

pub fn statusize(power: &[f64], appliance: &str, thresholds: &ApplianceThresholds) -> Result<Vec<bool>> {
    Ok(statusize_with(power, thresholds.require(appliance)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_status(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(EltError::Usage(format!(
                "status vectors differ in length: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// Matthews correlation coefficient, or 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }
}

pub fn f1_mcc(pred: &[bool], truth: &[bool]) -> Result<(f64, f64, Confusion)> {
    let c = Confusion::from_status(pred, truth)?;
    Ok((c.f1(), c.mcc(), c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub appliance: String,
    pub mae: f64,
    pub f1: f64,
    pub mcc: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub samples: u64,
}

impl EvalReport {
    /// Scores watt-valued predictions against ground truth.
    pub fn score(appliance: &str, pred: &[f64], truth: &[f64], threshold: f64) -> Result<Self> {
        let mae = mae(pred, truth)?;
        let (f1, mcc, c) = f1_mcc(&statusize_with(pred, threshold), &statusize_with(truth, threshold))?;
        Ok(EvalReport {
            appliance: appliance.to_string(),
            mae,
            f1,
            mcc,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            samples: c.total(),
        })
    }

    pub const CSV_HEADER: &'static str = "appliance,mae,f1,mcc,tp,tn,fp,fn,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.appliance, self.mae, self.f1, self.mcc, self.tp, self.tn, self.fp, self.fn_, self.samples
        )
    }
}

/// Unweighted mean of MAE, F1 and MCC; counts are summed.
pub fn macro_average(reports: &[EvalReport]) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sum = |f: fn(&EvalReport) -> u64| reports.iter().map(f).sum::<u64>();
    Some(EvalReport {
        appliance: "average".into(),
        mae: mean(|r| r.mae),
        f1: mean(|r| r.f1),
        mcc: mean(|r| r.mcc),
        tp: sum(|r| r.tp),
        tn: sum(|r| r.tn),
        fp: sum(|r| r.fp),
        fn_: sum(|r| r.fn_),
        samples: sum(|r| r.samples),
    })
}

/// One scored window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub timestamp: i64,
    pub pred_watts: f64,
    pub truth_watts: f64,
}

/// Anything that maps a normalized mains window to a normalized prediction.
pub trait Predictor {
    fn predict_window(&self, input: &[f64], index: usize) -> Result<f64>;
}

impl Predictor for EltModel {
    fn predict_window(&self, input: &[f64], _index: usize) -> Result<f64> {
        self.predict(input)
    }
}

/// Runs `predictor` on every window and scores it against the labels.
pub fn report<P: Predictor + ?Sized>(
    predictor: &P,
    test: &WindowDataset,
    appliance: &str,
    thresholds: &ApplianceThresholds,
) -> Result<(EvalReport, Vec<TracePoint>)> {
    if test.is_empty() {
        return Err(EltError::Data("test set has no windows".into()));
    }
    let threshold = thresholds.require(appliance)?;
    let mut trace = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let w = test.get(i);
        let pred = predictor.predict_window(w.input, i)?;
        trace.push(TracePoint {
            timestamp: w.timestamp,
            pred_watts: denormalize(pred, &test.appliance_stats),
            truth_watts: test.appliance_stats.denormalize(w.label).max(0.0),
        });
    }
    let pred: Vec<f64> = trace.iter().map(|t| t.pred_watts).collect();
    let truth: Vec<f64> = trace.iter().map(|t| t.truth_watts).collect();
    Ok((EvalReport::score(appliance, &pred, &truth, threshold)?, trace))
}

pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EltError::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])
    } else {
        serde_json::to_string_pretty(reports)
    }
    .expect("report serializes");
    std::fs::write(&json_path, json + "\n").map_err(|e| EltError::io(&json_path, e))?;
    let csv_path = dir.join("report.csv");
    let mut body = String::from(EvalReport::CSV_HEADER);
    body.push('\n');
    for r in reports {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    std::fs::write(&csv_path, body).map_err(|e| EltError::io(&csv_path, e))
}

pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| EltError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(path, e);
    writeln!(w, "timestamp,pred_watts,truth_watts").map_err(io)?;
    for t in trace {
        writeln!(w, "{},{},{}", t.timestamp, t.pred_watts, t.truth_watts).map_err(io)?;
    }
    w.flush().map_err(io)
}
