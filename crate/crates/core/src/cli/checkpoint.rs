//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "GPSPOUR\0"
//! version  u32
//! kind     u32      1 = policy, 2 = dynamics models, 3 = run state
//! payload
//! ```
//!
//! Inside payloads, `usize` values are written as `u64`, vectors as a `u64`
//! length followed by their elements, and strings as UTF-8 byte vectors.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::gaussian::{BlockDims, JointGaussian};
use crate::gps::{GpsState, InnerIterationStats, IterationReport, PassStats};
use crate::policy::{InputScaler, PolicyNet};
use crate::types::{ControlVec, StateVec, Trajectory};

pub const MAGIC: &[u8; 8] = b"GPSPOUR\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Policy = 1,
    Dynamics = 2,
    RunState = 3,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Policy => "policy",
            Kind::Dynamics => "dynamics",
            Kind::RunState => "run state",
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(kind: Kind) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(kind as u32);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for v in m.iter() {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], kind: Kind) -> Result<Self> {
        if buf.len() < 16 {
            return Err(bad("file too short for a checkpoint header"));
        }
        if &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut r = Reader { buf, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let found = r.u32()?;
        if found != kind as u32 {
            return Err(bad(format!("expected a {} checkpoint, found kind {found}", kind.name())));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(bad(format!("truncated checkpoint at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length does not fit in memory"))
    }

    /// A length that must be backed by at least `elem` bytes per item.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(bad(format!("truncated checkpoint at byte {}", self.pos)));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bool(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(bad(format!("invalid boolean byte {b}"))),
        }
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("matrix too large"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(bad(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let vals = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(rows, cols, vals))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(format!("{} trailing bytes after checkpoint payload", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_policy(w: &mut Writer, net: &PolicyNet) {
    w.usize(net.input_dim());
    w.usize(net.hidden());
    w.usize(net.output_dim());
    w.f64s(net.params());
    match net.scaler() {
        Some(s) => {
            w.bool(true);
            w.f64s(&s.mean);
            w.f64s(&s.scale);
        }
        None => w.bool(false),
    }
}

fn get_policy(r: &mut Reader) -> Result<PolicyNet> {
    let input = r.usize()?;
    let hidden = r.usize()?;
    let output = r.usize()?;
    let params = r.f64s()?;
    let scaler = if r.bool()? {
        Some(InputScaler {
            mean: r.f64s()?,
            scale: r.f64s()?,
        })
    } else {
        None
    };
    let mut net = PolicyNet::zeros(input, hidden, output).map_err(|e| bad(e.to_string()))?;
    net.set_params(params).map_err(|e| bad(e.to_string()))?;
    net.set_scaler(scaler).map_err(|e| bad(e.to_string()))?;
    Ok(net)
}

fn put_models(w: &mut Writer, models: &[DynamicsModel]) {
    w.usize(models.len());
    for m in models {
        let dims = m.dims();
        w.usize(dims.x);
        w.usize(dims.u);
        w.usize(dims.x_next);
        w.usize(m.rollouts());
        w.usize(m.horizon());
        for g in m.timesteps() {
            w.f64s(g.mean().as_slice());
            w.matrix(g.cov());
        }
    }
}

fn get_models(r: &mut Reader) -> Result<Vec<DynamicsModel>> {
    let count = r.len(40)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dims = BlockDims::new(r.usize()?, r.usize()?, r.usize()?);
        let rollouts = r.usize()?;
        let horizon = r.len(16)?;
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let mean = DVector::from_vec(r.f64s()?);
            let cov = r.matrix()?;
            steps.push(JointGaussian::new(mean, cov, dims).map_err(|e| bad(e.to_string()))?);
        }
        out.push(DynamicsModel::from_parts(steps, rollouts).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

fn put_trajectory(w: &mut Writer, t: &Trajectory) {
    w.usize(t.horizon());
    for s in t.states() {
        for v in s.as_slice() {
            w.f64(*v);
        }
    }
    for u in t.controls() {
        w.f64(u.velocity());
    }
}

fn get_trajectory(r: &mut Reader) -> Result<Trajectory> {
    let horizon = r.len(40)?;
    let mut states = Vec::with_capacity(horizon + 1);
    for _ in 0..=horizon {
        let v = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        states.push(StateVec::from_array(v).map_err(|e| bad(e.to_string()))?);
    }
    let controls = (0..horizon)
        .map(|_| ControlVec::new(r.f64()?).map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(states, controls).map_err(|e| bad(e.to_string()))
}

fn put_report(w: &mut Writer, rep: &IterationReport) {
    w.usize(rep.iteration);
    w.f64(rep.lambda);
    w.f64s(&rep.errors);
    w.f64(rep.mean);
    w.f64(rep.stddev);
    w.usize(rep.inner.len());
    for inner in &rep.inner {
        w.f64(inner.policy_mse);
        w.usize(inner.passes.len());
        for p in &inner.passes {
            w.f64(p.cost_before);
            w.f64(p.cost_after);
            w.bool(p.improved);
            w.f64(p.max_policy_deviation);
        }
    }
}

fn get_report(r: &mut Reader) -> Result<IterationReport> {
    let iteration = r.usize()?;
    let lambda = r.f64()?;
    let errors = r.f64s()?;
    let mean = r.f64()?;
    let stddev = r.f64()?;
    let n_inner = r.len(16)?;
    let mut inner = Vec::with_capacity(n_inner);
    for _ in 0..n_inner {
        let policy_mse = r.f64()?;
        let n = r.len(25)?;
        let passes = (0..n)
            .map(|_| {
                Ok(PassStats {
                    cost_before: r.f64()?,
                    cost_after: r.f64()?,
                    improved: r.bool()?,
                    max_policy_deviation: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        inner.push(InnerIterationStats { passes, policy_mse });
    }
    Ok(IterationReport {
        iteration,
        lambda,
        errors,
        mean,
        stddev,
        inner,
    })
}

pub fn encode_policy(net: &PolicyNet) -> Vec<u8> {
    let mut w = Writer::header(Kind::Policy);
    put_policy(&mut w, net);
    w.buf
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyNet> {
    let mut r = Reader::open(bytes, Kind::Policy)?;
    let net = get_policy(&mut r)?;
    r.finish()?;
    Ok(net)
}

pub fn encode_models(models: &[DynamicsModel]) -> Vec<u8> {
    let mut w = Writer::header(Kind::Dynamics);
    put_models(&mut w, models);
    w.buf
}

pub fn decode_models(bytes: &[u8]) -> Result<Vec<DynamicsModel>> {
    let mut r = Reader::open(bytes, Kind::Dynamics)?;
    let models = get_models(&mut r)?;
    r.finish()?;
    Ok(models)
}

/// A resumable run: the resolved config text plus the loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub config_toml: String,
    pub state: GpsState,
}

pub fn encode_run(run: &RunCheckpoint) -> Vec<u8> {
    let mut w = Writer::header(Kind::RunState);
    w.str(&run.config_toml);
    let s = &run.state;
    w.usize(s.iteration);
    put_policy(&mut w, &s.policy);
    w.usize(s.datasets.len());
    for data in &s.datasets {
        w.usize(data.len());
        for t in data {
            put_trajectory(&mut w, t);
        }
    }
    w.usize(s.reports.len());
    for rep in &s.reports {
        put_report(&mut w, rep);
    }
    w.buf
}

pub fn decode_run(bytes: &[u8]) -> Result<RunCheckpoint> {
    let mut r = Reader::open(bytes, Kind::RunState)?;
    let config_toml = r.str()?;
    let iteration = r.usize()?;
    let policy = get_policy(&mut r)?;
    let n = r.len(8)?;
    let mut datasets = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.len(8)?;
        datasets.push((0..m).map(|_| get_trajectory(&mut r)).collect::<Result<Vec<_>>>()?);
    }
    let n_reports = r.len(8)?;
    let reports = (0..n_reports).map(|_| get_report(&mut r)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(RunCheckpoint {
        config_toml,
        state: GpsState {
            iteration,
            policy,
            datasets,
            reports,
        },
    })
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_policy(path: &Path, net: &PolicyNet) -> Result<()> {
    write_atomic(path, &encode_policy(net))
}

pub fn load_policy(path: &Path) -> Result<PolicyNet> {
    decode_policy(&fs::read(path)?)
}

pub fn save_models(path: &Path, models: &[DynamicsModel]) -> Result<()> {
    write_atomic(path, &encode_models(models))
}

pub fn load_models(path: &Path) -> Result<Vec<DynamicsModel>> {
    decode_models(&fs::read(path)?)
}

pub fn save_run(path: &Path, run: &RunCheckpoint) -> Result<()> {
    write_atomic(path, &encode_run(run))
}

pub fn load_run(path: &Path) -> Result<RunCheckpoint> {
    decode_run(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let mut net = PolicyNet::new(6, 1, 3).unwrap();
        net.set_scaler(Some(InputScaler {
            mean: vec![0.1, -2.0, 3.0, 0.0, 1e-300, 5.0],
            scale: vec![1.0, 2.0, 0.5, 7.0, 1.0, f64::MIN_POSITIVE],
        }))
        .unwrap();
        let back = decode_policy(&encode_policy(&net)).unwrap();
        assert_eq!(back, net);
        let bits = |n: &PolicyNet| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
    }

    #[test]
    fn header_checks() {
        let bytes = encode_policy(&PolicyNet::new(2, 1, 0).unwrap());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = decode_policy(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_policy(&wrong_magic).is_err());
        assert!(decode_models(&bytes).unwrap_err().to_string().contains("expected a dynamics"));
        for cut in [0, 5, 16, bytes.len() - 1] {
            assert!(decode_policy(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_policy(&long).is_err());
    }
}
