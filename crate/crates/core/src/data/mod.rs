//! Power-channel ingestion, alignment, normalization and windowing.

mod cache;
mod manifest;
pub mod synth;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EltError, Result};

pub use cache::{read_cache, write_cache, CACHE_VERSION};
pub use manifest::{prepare, House, Manifest, Prepared, Split};

/// Default resampling period in seconds.
pub const SAMPLE_PERIOD: i64 = 6;

/// One watt-valued channel sampled at strictly increasing epoch seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    pub name: String,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl PowerSeries {
    pub fn new(name: impl Into<String>, timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if timestamps.len() != values.len() {
            return Err(EltError::Data(format!(
                "{name}: {} timestamps for {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(EltError::Data(format!(
                "{name}: timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(PowerSeries {
            name,
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reads a `timestamp,power` CSV. Rows whose power is missing, non-numeric
/// or NaN are dropped; negative readings are clamped to 0 W.
pub fn load_channel(path: &Path) -> Result<PowerSeries> {
    let file = File::open(path).map_err(|e| EltError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let load_err = |line: u64, message: String| EltError::Load {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| load_err(1, e.to_string()))?.clone();
    if header.len() != 2 || &header[0] != "timestamp" || &header[1] != "power" {
        return Err(load_err(1, format!("expected header `timestamp,power`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| load_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let ts: i64 = record
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| load_err(line, format!("bad timestamp `{}`", record.get(0).unwrap_or(""))))?;
        let power = match record.get(1).map(str::parse::<f64>) {
            Some(Ok(p)) if p.is_finite() => p.max(0.0),
            _ => continue,
        };
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(load_err(line, format!("timestamp {ts} does not increase (previous {prev})")));
            }
        }
        timestamps.push(ts);
        values.push(power);
    }
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    PowerSeries::new(name, timestamps, values)
}

pub fn write_channel(path: &Path, series: &PowerSeries) -> Result<()> {
    let file = File::create(path).map_err(|e| EltError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(path, e);
    writeln!(w, "timestamp,power").map_err(io)?;
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        writeln!(w, "{t},{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A run of consecutive resampled bins where both channels have data.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Start of the first bin (epoch seconds).
    pub start: i64,
    pub period: i64,
    pub mains: Vec<f64>,
    pub appliance: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.mains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mains.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + i as i64 * self.period
    }
}

fn bin_means(series: &PowerSeries, first_bin: i64, n_bins: usize, period: i64) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0u32; n_bins];
    for (&t, &v) in series.timestamps.iter().zip(&series.values) {
        let b = (t - first_bin).div_euclid(period);
        if b >= 0 && (b as usize) < n_bins {
            sums[b as usize] += v;
            counts[b as usize] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Buckets both channels into left-closed `period`-second bins aligned to
/// multiples of `period`, over the overlap of their time ranges. A bin is
/// kept only when both channels have at least one sample in it; runs of kept
/// bins form [`Segment`]s.
pub fn align_resample(mains: &PowerSeries, appliance: &PowerSeries, period: i64) -> Result<Vec<Segment>> {
    if period <= 0 {
        return Err(EltError::Config(format!("resample period must be positive, got {period}")));
    }
    let (Some(&m0), Some(&a0)) = (mains.timestamps.first(), appliance.timestamps.first()) else {
        return Err(EltError::Data("cannot align an empty channel".into()));
    };
    let start = m0.max(a0);
    let end = mains.timestamps.last().copied().unwrap_or(start).min(appliance.timestamps.last().copied().unwrap_or(start));
    if end < start {
        return Err(EltError::Data(format!(
            "channels {} and {} do not overlap in time",
            mains.name, appliance.name
        )));
    }
    let first_bin = start.div_euclid(period) * period;
    let n_bins = ((end - first_bin).div_euclid(period) + 1) as usize;
    let mb = bin_means(mains, first_bin, n_bins, period);
    let ab = bin_means(appliance, first_bin, n_bins, period);

    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    for (b, (m, a)) in mb.into_iter().zip(ab).enumerate() {
        match (m, a) {
            (Some(m), Some(a)) => {
                let seg = current.get_or_insert_with(|| Segment {
                    start: first_bin + b as i64 * period,
                    period,
                    mains: Vec::new(),
                    appliance: Vec::new(),
                });
                seg.mains.push(m);
                seg.appliance.push(a);
            }
            _ => segments.extend(current.take()),
        }
    }
    segments.extend(current);
    Ok(segments)
}

/// Resamples a single channel the same way as [`align_resample`]; returns
/// `(bin start, mean)` runs separated wherever a bin is empty.
pub fn resample_single(series: &PowerSeries, period: i64) -> Result<Vec<(i64, Vec<f64>)>> {
    let segs = align_resample(series, series, period)?;
    Ok(segs.into_iter().map(|s| (s.start, s.mains)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Mean and population standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(EltError::Data("cannot fit normalization on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(EltError::Data("standard deviation is zero; series is constant".into()));
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    /// Inverse of [`NormStats::normalize`] without clamping.
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Normalizes `values`, fitting statistics first when none are given.
pub fn fit_normalize(values: &[f64], stats: Option<NormStats>) -> Result<(Vec<f64>, NormStats)> {
    let stats = match stats {
        Some(s) => {
            if s.std <= 0.0 {
                return Err(EltError::Data("standard deviation is zero".into()));
            }
            s
        }
        None => NormStats::fit(values)?,
    };
    Ok((values.iter().map(|&v| stats.normalize(v)).collect(), stats))
}

/// Number of stride-`stride` windows of odd length `l` inside a run of `len` samples.
pub fn window_count(len: usize, l: usize, stride: usize) -> usize {
    if len < l || stride == 0 {
        0
    } else {
        (len - l) / stride + 1
    }
}

/// Index of the label inside a window of odd length `l`.
pub fn midpoint(l: usize) -> usize {
    (l - 1) / 2
}

/// A window borrowed from a [`WindowDataset`].
#[derive(Debug, Clone, Copy)]
pub struct WindowSample<'a> {
    pub input: &'a [f64],
    pub label: f64,
    /// Timestamp of the midpoint bin.
    pub timestamp: i64,
}

/// Normalized segments plus an index of every valid window.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub appliance: String,
    /// On-threshold in watts, when one is known for the appliance.
    pub on_threshold: Option<f64>,
    pub input_len: usize,
    pub mains_stats: NormStats,
    pub appliance_stats: NormStats,
    pub segments: Vec<Segment>,
    windows: Vec<(u32, u32)>,
}

impl WindowDataset {
    /// `segments` must already be normalized.
    pub fn new(
        appliance: impl Into<String>,
        on_threshold: Option<f64>,
        input_len: usize,
        stride: usize,
        mains_stats: NormStats,
        appliance_stats: NormStats,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        if input_len.is_multiple_of(2) {
            return Err(EltError::Config("input_len must be odd".into()));
        }
        if stride == 0 {
            return Err(EltError::Config("window stride must be >= 1".into()));
        }
        let mut windows = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            let n = window_count(seg.len(), input_len, stride);
            windows.extend((0..n).map(|w| (s as u32, (w * stride) as u32)));
        }
        Ok(WindowDataset {
            appliance: appliance.into(),
            on_threshold,
            input_len,
            mains_stats,
            appliance_stats,
            segments,
            windows,
        })
    }

    /// Same segments, re-windowed with another stride.
    pub fn with_stride(&self, stride: usize) -> Result<Self> {
        WindowDataset::new(
            self.appliance.clone(),
            self.on_threshold,
            self.input_len,
            stride,
            self.mains_stats,
            self.appliance_stats,
            self.segments.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn get(&self, i: usize) -> WindowSample<'_> {
        let (s, off) = self.windows[i];
        let seg = &self.segments[s as usize];
        let off = off as usize;
        let mid = off + midpoint(self.input_len);
        WindowSample {
            input: &seg.mains[off..off + self.input_len],
            label: seg.appliance[mid],
            timestamp: seg.timestamp(mid),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample<'_>> {
        (0..self.len()).map(|i| self.get(i))
    }

    /// `(segment index, offset)` of window `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        let (s, o) = self.windows[i];
        (s as usize, o as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_clean_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = csv_file(dir.path(), "a.csv", "timestamp,power\n0,1.5\n6,2\n12,3\n");
        let s = load_channel(&p).unwrap();
        assert_eq!(s.timestamps, vec![0, 6, 12]);
        assert_eq!(s.values, vec![1.5, 2.0, 3.0]);
        assert_eq!(s.name, "a");
    }

    #[test]
    fn load_drops_nan_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = csv_file(dir.path(), "a.csv", "timestamp,power\n0,1\n6,NaN\n12,3\n18,\n24,x\n30,4\n");
        let s = load_channel(&p).unwrap();
        assert_eq!(s.timestamps, vec![0, 12, 30]);
        let p = csv_file(dir.path(), "b.csv", "timestamp,power\n0,1\n6,2\n12,nan\n18,4\n24,5\n");
        assert_eq!(load_channel(&p).unwrap().len(), 4);
    }

    #[test]
    fn load_reports_out_of_order_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = csv_file(dir.path(), "a.csv", "timestamp,power\n0,1\n12,2\n6,3\n");
        match load_channel(&p).unwrap_err() {
            EltError::Load { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_rejects_bad_header_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = csv_file(dir.path(), "a.csv", "time,watts\n0,1\n");
        assert!(matches!(load_channel(&p), Err(EltError::Load { line: 1, .. })));
        assert!(matches!(load_channel(&dir.path().join("nope.csv")), Err(EltError::Io { .. })));
    }

    fn series(name: &str, pts: &[(i64, f64)]) -> PowerSeries {
        PowerSeries::new(name, pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()).unwrap()
    }

    #[test]
    fn resample_identity_on_aligned_samples() {
        let m = series("m", &[(0, 1.0), (6, 2.0), (12, 3.0)]);
        let a = series("a", &[(0, 4.0), (6, 5.0), (12, 6.0)]);
        let segs = align_resample(&m, &a, 6).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].mains, vec![1.0, 2.0, 3.0]);
        assert_eq!(segs[0].appliance, vec![4.0, 5.0, 6.0]);
        assert_eq!(segs[0].start, 0);
    }

    #[test]
    fn resample_averages_within_bin() {
        let m = series("m", &[(0, 10.0), (3, 20.0), (6, 1.0)]);
        let a = series("a", &[(0, 0.0), (6, 0.0)]);
        let segs = align_resample(&m, &a, 6).unwrap();
        assert_eq!(segs[0].mains, vec![15.0, 1.0]);
    }

    #[test]
    fn resample_splits_on_gaps() {
        let m: Vec<(i64, f64)> = (0..40).map(|i| (i * 6, 1.0)).collect();
        let a: Vec<(i64, f64)> = (0..40).filter(|i| !(10..20).contains(i)).map(|i| (i * 6, 2.0)).collect();
        let segs = align_resample(&series("m", &m), &series("a", &a), 6).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].len(), 10);
        assert_eq!(segs[1].len(), 20);
        assert_eq!(segs[1].start, 120);
    }

    #[test]
    fn resample_requires_overlap() {
        let m = series("m", &[(0, 1.0), (6, 1.0)]);
        let a = series("a", &[(60, 1.0), (66, 1.0)]);
        assert!(matches!(align_resample(&m, &a, 6), Err(EltError::Data(_))));
    }

    #[test]
    fn normalize_examples() {
        let (n, stats) = fit_normalize(&[3.0, 7.0], None).unwrap();
        assert_eq!(n, vec![-1.0, 1.0]);
        assert_eq!(stats, NormStats { mean: 5.0, std: 2.0 });
        let (t, _) = fit_normalize(&[9.0, 9.0], Some(stats)).unwrap();
        assert_eq!(t, vec![2.0, 2.0]);
        assert!(fit_normalize(&[4.0, 4.0], None).is_err());
        for v in [0.0, 12.345, 1e4] {
            assert!((stats.denormalize(stats.normalize(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(599, 599, 1), 1);
        assert_eq!(midpoint(599), 299);
        assert_eq!(window_count(601, 599, 1), 3);
        assert_eq!(window_count(598, 599, 1), 0);
        assert_eq!(window_count(610, 599, 5), 3);
    }

    #[test]
    fn dataset_labels_come_from_midpoint() {
        let seg = Segment {
            start: 600,
            period: 6,
            mains: (0..9).map(f64::from).collect(),
            appliance: (0..9).map(|v| f64::from(v) * 10.0).collect(),
        };
        let s = NormStats { mean: 0.0, std: 1.0 };
        let ds = WindowDataset::new("x", None, 5, 1, s, s, vec![seg]).unwrap();
        assert_eq!(ds.len(), 5);
        let w = ds.get(2);
        assert_eq!(w.input, &[2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.label, 40.0);
        assert_eq!(w.timestamp, 600 + 4 * 6);
    }
}
