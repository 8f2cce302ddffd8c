//! DLWA as a function of the number of interleaved sequential write streams.

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::pm::{PmConfig, PmDevice};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub streams: usize,
    pub request_bytes: u64,
    pub media_bytes: u64,
    pub dlwa: f64,
}

/// Writes `bytes_per_stream` to each of `streams` disjoint regions in
/// `write_size` pieces, visiting the streams round-robin.
pub fn stream_dlwa(
    streams: usize,
    bytes_per_stream: u64,
    write_size: usize,
    xpbuffer_capacity: usize,
) -> Result<SweepPoint, BenchError> {
    if streams == 0 || write_size == 0 || bytes_per_stream < write_size as u64 {
        return Err(BenchError::Argument("need streams > 0 and at least one write per stream".into()));
    }
    let region = bytes_per_stream.next_multiple_of(4096);
    let mut pm = PmDevice::new(PmConfig {
        xpbuffer_capacity,
        ..PmConfig::with_capacity(region * streams as u64)
    });
    let data = vec![0xa5u8; write_size];
    let rounds = bytes_per_stream / write_size as u64;
    for r in 0..rounds {
        for s in 0..streams as u64 {
            pm.write(s * region + r * write_size as u64, &data)?;
        }
    }
    pm.flush_all();
    let c = pm.counters();
    Ok(SweepPoint {
        streams,
        request_bytes: c.request_bytes,
        media_bytes: c.media_bytes,
        dlwa: c.dlwa()?,
    })
}

/// `stream_dlwa` over each stream count, keeping total bytes near `total`.
pub fn dlwa_sweep(
    counts: &[usize],
    total: u64,
    write_size: usize,
    xpbuffer_capacity: usize,
) -> Result<Vec<SweepPoint>, BenchError> {
    counts
        .iter()
        .map(|&s| {
            let per = (total / s.max(1) as u64).max(write_size as u64);
            stream_dlwa(s, per, write_size, xpbuffer_capacity)
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(points: &[SweepPoint], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
