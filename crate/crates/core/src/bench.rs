//! Attention scaling benchmarks: median wall time plus exact multiply counts
//! per sequence length, and log-log exponent fits.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear_attention_counted, local_attention_counted, standard_attention_counted, OpCount};
use crate::error::{EltError, Result};
use crate::model::{EltModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Standard,
    Linear,
    Local,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Standard, Kernel::Linear, Kernel::Local];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Standard => "standard",
            Kernel::Linear => "linear",
            Kernel::Local => "local",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = EltError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Kernel::Standard),
            "linear" => Ok(Kernel::Linear),
            "local" => Ok(Kernel::Local),
            other => Err(EltError::Config(format!(
                "unknown kernel `{other}`; expected standard, linear or local"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub kernel: String,
    pub length: usize,
    pub reps: usize,
    pub median_seconds: f64,
    pub multiplies: u64,
}

/// A length that could not be measured; the rest of the run continues.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchFailure {
    pub kernel: String,
    pub length: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub d_head: usize,
    pub l_win: usize,
    pub reps: usize,
    pub warmups: usize,
    pub seed: u64,
    /// Points whose inputs and outputs would exceed this many bytes are
    /// reported as failures instead of being attempted.
    pub max_bytes: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            d_head: 64,
            l_win: 32,
            reps: 5,
            warmups: 3,
            seed: 0,
            max_bytes: 4 << 30,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn check_lengths(lengths: &[usize], reps: usize) -> Result<()> {
    if lengths.len() < 2 {
        return Err(EltError::Config("bench needs at least two lengths".into()));
    }
    if lengths.contains(&0) {
        return Err(EltError::Config("bench lengths must be positive".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EltError::Config(format!("bench lengths must be strictly increasing: {lengths:?}")));
    }
    if reps < 5 {
        return Err(EltError::Config(format!("bench needs at least 5 repetitions, got {reps}")));
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    data.try_reserve_exact(rows * cols)
        .map_err(|e| EltError::Numeric(format!("cannot allocate {rows}x{cols} input: {e}")))?;
    data.extend((0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)));
    Tensor::matrix(rows, cols, data)
}

fn run_kernel(kernel: Kernel, q: &Tensor, k: &Tensor, v: &Tensor, l_win: usize) -> Result<(Tensor, u64)> {
    let mut count = OpCount::default();
    let out = match kernel {
        Kernel::Standard => standard_attention_counted(q, k, v, &mut count)?,
        Kernel::Linear => linear_attention_counted(q, k, v, &mut count)?,
        Kernel::Local => local_attention_counted(q, k, v, l_win, &mut count)?,
    };
    Ok((out, count.multiplies))
}

fn measure_point(kernel: Kernel, l: usize, s: &BenchSettings) -> Result<BenchPoint> {
    let d = s.d_head;
    let bytes = 4usize.saturating_mul(l).saturating_mul(d).saturating_mul(8);
    if bytes > s.max_bytes {
        return Err(EltError::Numeric(format!(
            "length {l} needs about {bytes} bytes, above the {} byte limit",
            s.max_bytes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ (l as u64).rotate_left(17));
    let q = random_matrix(&mut rng, l, d)?;
    let k = random_matrix(&mut rng, l, d)?;
    let v = random_matrix(&mut rng, l, d)?;
    let mut multiplies = 0;
    for _ in 0..s.warmups {
        let (out, m) = run_kernel(kernel, &q, &k, &v, s.l_win)?;
        std::hint::black_box(out);
        multiplies = m;
    }
    let mut times = Vec::with_capacity(s.reps);
    for _ in 0..s.reps {
        let t = Instant::now();
        let (out, m) = run_kernel(kernel, &q, &k, &v, s.l_win)?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
        multiplies = m;
    }
    Ok(BenchPoint {
        kernel: kernel.name().to_string(),
        length: l,
        reps: s.reps,
        median_seconds: median(times),
        multiplies,
    })
}

/// Times one kernel over `lengths`. Each element of the result is either a
/// measured point or the reason that length failed.
pub fn time_kernel(
    kernel: Kernel,
    lengths: &[usize],
    settings: &BenchSettings,
) -> Result<Vec<std::result::Result<BenchPoint, BenchFailure>>> {
    check_lengths(lengths, settings.reps)?;
    if settings.d_head == 0 || settings.l_win == 0 {
        return Err(EltError::Config("d_head and l_win must be positive".into()));
    }
    Ok(lengths
        .iter()
        .map(|&l| {
            let outcome = catch_unwind(AssertUnwindSafe(|| measure_point(kernel, l, settings)))
                .unwrap_or_else(|_| Err(EltError::Numeric(format!("kernel panicked at length {l}"))));
            outcome.map_err(|e| BenchFailure {
                kernel: kernel.name().to_string(),
                length: l,
                message: e.to_string(),
            })
        })
        .collect())
}

/// Multiply count of one kernel call, without timing.
pub fn count_multiplies(kernel: Kernel, l: usize, d_head: usize, l_win: usize) -> Result<u64> {
    let z = Tensor::zeros(&[l, d_head]);
    Ok(run_kernel(kernel, &z, &z, &z, l_win)?.1)
}

/// Whole-model inference time versus input length, for a given config
/// template (`input_len` is overridden per point).
pub fn time_model(template: &ModelConfig, lengths: &[usize], settings: &BenchSettings) -> Result<Vec<BenchPoint>> {
    check_lengths(lengths, settings.reps)?;
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let cfg = ModelConfig {
            input_len: l,
            ..template.clone()
        };
        let model = EltModel::init(cfg, settings.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..settings.warmups {
            std::hint::black_box(model.predict(&x)?);
        }
        let mut times = Vec::with_capacity(settings.reps);
        for _ in 0..settings.reps {
            let t = Instant::now();
            std::hint::black_box(model.predict(&x)?);
            times.push(t.elapsed().as_secs_f64());
        }
        let kind = match template.global_attention {
            crate::attention::GlobalKind::Linear => "model-linear",
            crate::attention::GlobalKind::Standard => "model-standard",
        };
        out.push(BenchPoint {
            kernel: kind.to_string(),
            length: l,
            reps: settings.reps,
            median_seconds: median(times),
            multiplies: 0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in natural-log units.
    pub residual: f64,
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<ExponentFit> {
    if points.len() < 3 {
        return Err(EltError::Config(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(&(x, y)) = points.iter().find(|&&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(EltError::Numeric(format!("non-positive point ({x}, {y}) in exponent fit")));
    }
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    if hi < 4.0 * lo {
        return Err(EltError::Config(format!("lengths span {lo}..{hi}, less than 4x")));
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (logs
        .iter()
        .map(|&(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ExponentFit {
        slope,
        intercept,
        residual,
    })
}

/// Fits wall-time exponents over the measured points.
pub fn time_exponent(points: &[BenchPoint]) -> Result<ExponentFit> {
    fit_exponent(&points.iter().map(|p| (p.length as f64, p.median_seconds)).collect::<Vec<_>>())
}

/// Fits multiply-count exponents over the measured points.
pub fn count_exponent(points: &[BenchPoint]) -> Result<ExponentFit> {
    fit_exponent(&points.iter().map(|p| (p.length as f64, p.multiplies as f64)).collect::<Vec<_>>())
}

pub const BENCH_HEADER: &str = "kernel,length,median_seconds,multiplies";

pub fn write_csv(path: &Path, points: &[BenchPoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| EltError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(path, e);
    writeln!(w, "{BENCH_HEADER}").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.kernel, p.length, p.median_seconds, p.multiplies).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let sq: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&l| (l, 3e-9 * l * l)).collect();
        let lin: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&l| (l, 5e-4 * l)).collect();
        let a = fit_exponent(&sq).unwrap();
        let b = fit_exponent(&lin).unwrap();
        assert!((a.slope - 2.0).abs() < 1e-9 && a.residual < 1e-9);
        assert!((b.slope - 1.0).abs() < 1e-9 && b.residual < 1e-9);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]).is_err());
        assert!(matches!(
            fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (8.0, 3.0)]),
            Err(EltError::Numeric(_))
        ));
    }

    #[test]
    fn count_ratios_on_doubling() {
        for l in [64usize, 128, 256] {
            let s1 = count_multiplies(Kernel::Standard, l, 8, 16).unwrap();
            let s2 = count_multiplies(Kernel::Standard, 2 * l, 8, 16).unwrap();
            assert_eq!(s2, 4 * s1);
            assert_eq!(s1, 2 * (l * l * 8) as u64);
            let a1 = count_multiplies(Kernel::Linear, l, 8, 16).unwrap();
            let a2 = count_multiplies(Kernel::Linear, 2 * l, 8, 16).unwrap();
            assert_eq!(a2, 2 * a1);
            assert_eq!(a1, 2 * (l * 8 * 8) as u64);
            let c1 = count_multiplies(Kernel::Local, l, 8, 16).unwrap();
            let c2 = count_multiplies(Kernel::Local, 2 * l, 8, 16).unwrap();
            assert_eq!(c2, 2 * c1);
        }
    }

    #[test]
    fn timing_run_is_deterministic_in_counts() {
        let s = BenchSettings {
            d_head: 4,
            l_win: 4,
            reps: 5,
            warmups: 1,
            ..BenchSettings::default()
        };
        let a = time_kernel(Kernel::Linear, &[16, 32, 64], &s).unwrap();
        let b = time_kernel(Kernel::Linear, &[16, 32, 64], &s).unwrap();
        let counts = |v: &[std::result::Result<BenchPoint, BenchFailure>]| {
            v.iter().map(|p| p.as_ref().unwrap().multiplies).collect::<Vec<_>>()
        };
        assert_eq!(counts(&a), counts(&b));
        assert!(a.iter().all(|p| p.as_ref().unwrap().reps == 5));
    }

    #[test]
    fn oversized_point_fails_alone() {
        let s = BenchSettings {
            d_head: 4,
            l_win: 4,
            warmups: 0,
            max_bytes: 4 * 64 * 4 * 8,
            ..BenchSettings::default()
        };
        let r = time_kernel(Kernel::Standard, &[32, 64, 128], &s).unwrap();
        assert!(r[0].is_ok() && r[1].is_ok());
        assert!(r[2].is_err());
    }

    #[test]
    fn invalid_grids() {
        let s = BenchSettings::default();
        assert!(time_kernel(Kernel::Linear, &[16], &s).is_err());
        assert!(time_kernel(Kernel::Linear, &[32, 16], &s).is_err());
        let few = BenchSettings { reps: 3, ..s };
        assert!(time_kernel(Kernel::Linear, &[16, 32], &few).is_err());
        assert!("quadratic".parse::<Kernel>().is_err());
    }
}
