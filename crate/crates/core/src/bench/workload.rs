//! YCSB-style request streams.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::cluster::{ClientOp, OpKind, OpSource};
use crate::kv::index::{key_hash, shard_of};
use crate::Time;

pub const ZIPF_THETA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyDistribution {
    Zipfian { theta: f64 },
    Uniform,
}

/// Value size models. The named ones are two-point mixtures matching
/// published average object sizes; only the mean is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeModel {
    ZippyDb,
    Up2x,
    Udb,
    Fixed(usize),
}

impl SizeModel {
    /// `(small, large, P(small))`.
    fn mixture(self) -> (usize, usize, f64) {
        match self {
            SizeModel::ZippyDb => (48, 160, (160.0 - 90.8) / 112.0),
            SizeModel::Up2x => (32, 96, (96.0 - 57.25) / 64.0),
            SizeModel::Udb => (64, 256, (256.0 - 153.8) / 192.0),
            SizeModel::Fixed(n) => (n, n, 1.0),
        }
    }

    pub fn mean(self) -> f64 {
        let (a, b, p) = self.mixture();
        p * a as f64 + (1.0 - p) * b as f64
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> usize {
        let (a, b, p) = self.mixture();
        if a == b || rng.random_bool(p) {
            a
        } else {
            b
        }
    }
}

impl std::str::FromStr for SizeModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zippydb" => Ok(SizeModel::ZippyDb),
            "up2x" => Ok(SizeModel::Up2x),
            "udb" => Ok(SizeModel::Udb),
            other => other
                .parse::<usize>()
                .map(SizeModel::Fixed)
                .map_err(|_| format!("unknown size model {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub put_ratio: f64,
    pub key_count: u64,
    pub distribution: KeyDistribution,
    pub size: SizeModel,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            put_ratio: 0.5,
            key_count: 100_000,
            distribution: KeyDistribution::Zipfian { theta: ZIPF_THETA },
            size: SizeModel::ZippyDb,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    /// Write-only load phase.
    pub fn load_a() -> Self {
        Self {
            put_ratio: 1.0,
            ..Self::default()
        }
    }

    pub fn a() -> Self {
        Self::default()
    }

    pub fn b() -> Self {
        Self {
            put_ratio: 0.05,
            ..Self::default()
        }
    }

    pub fn c() -> Self {
        Self {
            put_ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if !(0.0..=1.0).contains(&self.put_ratio) {
            return Err(BenchError::Argument(format!("put ratio {} outside [0, 1]", self.put_ratio)));
        }
        if self.key_count == 0 {
            return Err(BenchError::Argument("key_count must be positive".into()));
        }
        if let KeyDistribution::Zipfian { theta } = self.distribution {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(BenchError::Argument(format!("zipf theta {theta}")));
            }
        }
        if let SizeModel::Fixed(n) = self.size {
            if n < 8 {
                return Err(BenchError::Argument("values carry an 8-byte token; need at least 8B".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Put,
    Get,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: Op,
    pub key: Vec<u8>,
    pub value_size: usize,
}

pub fn key_name(i: u64) -> Vec<u8> {
    format!("user{i:010}").into_bytes()
}

/// A skew that sends `fraction` of requests to keys of `shards`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hotspot {
    pub shards: Vec<u16>,
    pub shard_count: u16,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    hotspot: Option<Hotspot>,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self, BenchError> {
        spec.validate()?;
        let zipf = match spec.distribution {
            KeyDistribution::Zipfian { theta } => Some(
                Zipf::new(spec.key_count as f64, theta).map_err(|e| BenchError::Argument(e.to_string()))?,
            ),
            KeyDistribution::Uniform => None,
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            zipf,
            hotspot: None,
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn set_hotspot(&mut self, h: Option<Hotspot>) {
        self.hotspot = h;
    }

    pub fn set_put_ratio(&mut self, r: f64) -> Result<(), BenchError> {
        let spec = WorkloadSpec { put_ratio: r, ..self.spec };
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    fn draw_key(&mut self) -> u64 {
        match &self.zipf {
            // Ranks are 1-based.
            Some(z) => z.sample(&mut self.rng) as u64 - 1,
            None => self.rng.random_range(0..self.spec.key_count),
        }
    }

    pub fn next_request(&mut self) -> Request {
        let mut k = self.draw_key();
        if let Some(h) = &self.hotspot {
            if self.rng.random_bool(h.fraction.clamp(0.0, 1.0)) {
                for _ in 0..256 {
                    let cand = self.rng.random_range(0..self.spec.key_count);
                    if h.shards.contains(&shard_of(key_hash(&key_name(cand)), h.shard_count)) {
                        k = cand;
                        break;
                    }
                }
            }
        }
        let op = if self.rng.random_bool(self.spec.put_ratio) { Op::Put } else { Op::Get };
        Request {
            op,
            key: key_name(k),
            value_size: self.spec.size.sample(&mut self.rng),
        }
    }
}

/// `n` requests of `spec`.
pub fn gen_workload(spec: WorkloadSpec, n: usize) -> Result<Vec<Request>, BenchError> {
    if n == 0 {
        return Err(BenchError::Argument("request count must be positive".into()));
    }
    let mut w = Workload::new(spec)?;
    Ok((0..n).map(|_| w.next_request()).collect())
}

impl OpSource for Workload {
    fn next_op(&mut self, _client: usize, _now: Time) -> Option<ClientOp> {
        let r = self.next_request();
        let kind = match r.op {
            Op::Put => OpKind::Put { value_len: r.value_size },
            Op::Get => OpKind::Get,
        };
        Some(ClientOp { kind, key: r.key })
    }
}

/// Handle that lets a scenario reshape the stream while a cluster owns it.
#[derive(Debug, Clone)]
pub struct SharedWorkload(pub Rc<RefCell<Workload>>);

impl OpSource for SharedWorkload {
    fn next_op(&mut self, client: usize, now: Time) -> Option<ClientOp> {
        self.0.borrow_mut().next_op(client, now)
    }
}

/// Writes each key of `0..keys` once, in order, then stops.
pub struct Populate {
    next: u64,
    keys: u64,
    size: SizeModel,
    rng: ChaCha8Rng,
}

impl Populate {
    pub fn new(keys: u64, size: SizeModel, seed: u64) -> Self {
        Self {
            next: 0,
            keys,
            size,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        }
    }
}

impl OpSource for Populate {
    fn next_op(&mut self, _client: usize, _now: Time) -> Option<ClientOp> {
        if self.next >= self.keys {
            return None;
        }
        let key = key_name(self.next);
        self.next += 1;
        Some(ClientOp {
            kind: OpKind::Put {
                value_len: self.size.sample(&mut self.rng),
            },
            key,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_sizes() {
        let reqs = gen_workload(
            WorkloadSpec {
                size: SizeModel::Fixed(100),
                ..WorkloadSpec::default()
            },
            1000,
        )
        .unwrap();
        assert!(reqs.iter().all(|r| r.value_size == 100));
    }

    #[test]
    fn rejects_bad_ratio() {
        let spec = WorkloadSpec {
            put_ratio: 1.5,
            ..WorkloadSpec::default()
        };
        assert!(matches!(gen_workload(spec, 10), Err(BenchError::Argument(_))));
        assert!(gen_workload(WorkloadSpec::default(), 0).is_err());
    }

    #[test]
    fn model_means() {
        assert!((SizeModel::ZippyDb.mean() - 90.8).abs() < 1e-9);
        assert!((SizeModel::Up2x.mean() - 57.25).abs() < 1e-9);
        assert!((SizeModel::Udb.mean() - 153.8).abs() < 1e-9);
        assert_eq!("udb".parse::<SizeModel>().unwrap(), SizeModel::Udb);
        assert_eq!("64".parse::<SizeModel>().unwrap(), SizeModel::Fixed(64));
    }
}
