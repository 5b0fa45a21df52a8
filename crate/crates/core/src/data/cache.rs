//! Binary dataset cache.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "ELTWIN\0\0"
//! version      u32
//! input_len    u32
//! n_segments   u32
//! n_windows    u64      stride-1 window count, informational
//! mains mean   f64, mains std f64
//! app mean     f64, app std f64
//! threshold    f64      NaN when unknown
//! name_len     u32, then UTF-8 appliance name
//! per segment: start i64, period i64, len u64, len × f64 mains, len × f64 appliance
//! ```
//!
//! Segments are stored normalized. Windows are re-derived on load, so the
//! file stays O(samples) rather than O(samples × input_len).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NormStats, Segment, WindowDataset};
use crate::error::{EltError, Result};

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ELTWIN\0\0";

pub fn write_cache(path: &Path, ds: &WindowDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| EltError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(path, e);
    let stride_one = ds.with_stride(1)?.len() as u64;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.input_len as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.segments.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&stride_one.to_le_bytes()).map_err(io)?;
    for v in [
        ds.mains_stats.mean,
        ds.mains_stats.std,
        ds.appliance_stats.mean,
        ds.appliance_stats.std,
        ds.on_threshold.unwrap_or(f64::NAN),
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(ds.appliance.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(ds.appliance.as_bytes()).map_err(io)?;
    for seg in &ds.segments {
        w.write_all(&seg.start.to_le_bytes()).map_err(io)?;
        w.write_all(&seg.period.to_le_bytes()).map_err(io)?;
        w.write_all(&(seg.len() as u64).to_le_bytes()).map_err(io)?;
        for v in seg.mains.iter().chain(&seg.appliance) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                EltError::Data(format!("{}: truncated cache file", self.path.display()))
            } else {
                EltError::io(self.path, e)
            }
        })?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Loads a cache and windows it with `stride`.
pub fn read_cache(path: &Path, stride: usize) -> Result<WindowDataset> {
    let file = File::open(path).map_err(|e| EltError::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    let bad = |msg: &str| EltError::Data(format!("{}: {msg}", path.display()));
    if &r.bytes::<8>()? != MAGIC {
        return Err(bad("not a window cache (bad magic)"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported cache version {version}")));
    }
    let input_len = r.u32()? as usize;
    let n_segments = r.u32()? as usize;
    let _n_windows = r.u64()?;
    let mains_stats = NormStats {
        mean: r.f64()?,
        std: r.f64()?,
    };
    let appliance_stats = NormStats {
        mean: r.f64()?,
        std: r.f64()?,
    };
    let threshold = r.f64()?;
    let name_len = r.u32()? as usize;
    if name_len > 4096 {
        return Err(bad("appliance name too long"));
    }
    let mut name = vec![0u8; name_len];
    r.inner.read_exact(&mut name).map_err(|_| bad("truncated appliance name"))?;
    let appliance = String::from_utf8(name).map_err(|_| bad("appliance name is not UTF-8"))?;
    let mut segments = Vec::with_capacity(n_segments.min(1 << 16));
    for _ in 0..n_segments {
        let start = r.i64()?;
        let period = r.i64()?;
        let len = r.u64()? as usize;
        let mains = r.f64s(len)?;
        let appl = r.f64s(len)?;
        segments.push(Segment {
            start,
            period,
            mains,
            appliance: appl,
        });
    }
    WindowDataset::new(
        appliance,
        (!threshold.is_nan()).then_some(threshold),
        input_len,
        stride,
        mains_stats,
        appliance_stats,
        segments,
    )
}
