//! Binary container for states, spike rasters, networks and stimuli.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HRSV" | version u16 | kind u8 | array count u8 | header len u32 | header (JSON)
//! per array: name len u8 | name | dtype u8 | ndim u8 | shape u64 × ndim | payload
//! checksum u64 (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! Payloads are row-major. Readers verify the checksum before decoding
//! anything, so a damaged file never yields a partial object.

use std::io::Write;
use std::path::Path;

use half::f16;
use hetres_core::dynamics::{SpikeRaster, StateMatrix};
use hetres_core::stimgen::{SeriesSource, Stimulus};
use hetres_core::topology::{CsrMatrix, Network, NetworkSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HRSV";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container holds a {found:?}, expected a {expected:?}")]
    WrongKind { expected: Kind, found: Kind },
    #[error("invalid contents: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    State = 1,
    Spikes = 2,
    Network = 3,
    Stimulus = 4,
}

impl Kind {
    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => Kind::State,
            2 => Kind::Spikes,
            3 => Kind::Network,
            4 => Kind::Stimulus,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Dtype {
    F16 = 0,
    F32 = 1,
    F64 = 2,
    U64 = 3,
}

impl Dtype {
    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Dtype::F16,
            1 => Dtype::F32,
            2 => Dtype::F64,
            3 => Dtype::U64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::U64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f16" => Some(Dtype::F16),
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Values of one array before encoding or after decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    Float(Vec<f64>),
    Index(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub values: Values,
}

impl Array {
    pub fn float(name: &str, dtype: Dtype, shape: Vec<u64>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dtype, shape, values: Values::Float(data) }
    }

    pub fn index(name: &str, data: Vec<u64>) -> Self {
        Self { name: name.into(), dtype: Dtype::U64, shape: vec![data.len() as u64], values: Values::Index(data) }
    }

    fn len(&self) -> usize {
        match &self.values {
            Values::Float(v) => v.len(),
            Values::Index(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub header: serde_json::Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>, ContainerError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| ContainerError::Invalid(e.to_string()))?;
        if self.arrays.len() > u8::MAX as usize {
            return Err(ContainerError::Invalid("too many arrays".into()));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind as u8);
        buf.push(self.arrays.len() as u8);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for a in &self.arrays {
            let expected: u64 = a.shape.iter().product();
            if expected as usize != a.len() || a.name.len() > u8::MAX as usize || a.shape.len() > u8::MAX as usize {
                return Err(ContainerError::Invalid(format!("array '{}' does not match its shape", a.name)));
            }
            buf.push(a.name.len() as u8);
            buf.extend_from_slice(a.name.as_bytes());
            buf.push(a.dtype as u8);
            buf.push(a.shape.len() as u8);
            for d in &a.shape {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            match (&a.values, a.dtype) {
                (Values::Float(v), Dtype::F16) => v.iter().for_each(|x| buf.extend_from_slice(&f16::from_f64(*x).to_le_bytes())),
                (Values::Float(v), Dtype::F32) => v.iter().for_each(|x| buf.extend_from_slice(&(*x as f32).to_le_bytes())),
                (Values::Float(v), Dtype::F64) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                (Values::Index(v), Dtype::U64) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                _ => return Err(ContainerError::Invalid(format!("array '{}' has mismatched dtype", a.name))),
            }
        }
        let sum = checksum(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 + 2 + 1 + 1 + 4 + 8 {
            return Err(ContainerError::Corrupt("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(ContainerError::Corrupt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let version = u16::from_le_bytes([body[4], body[5]]);
        if checksum(body) != stored {
            return Err(ContainerError::Corrupt("checksum mismatch".into()));
        }
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let mut r = Reader { data: body, pos: 6 };
        let kind = Kind::from_code(r.u8()?).ok_or_else(|| ContainerError::Corrupt("unknown kind".into()))?;
        let count = r.u8()? as usize;
        let hlen = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u8()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            let dtype = Dtype::from_code(r.u8()?).ok_or_else(|| ContainerError::Corrupt("unknown dtype".into()))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<u64> = (0..ndim).map(|_| r.u64()).collect::<Result<_, _>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let len = len.ok_or_else(|| ContainerError::Corrupt("shape overflow".into()))?;
            let raw = r.take(len.checked_mul(dtype.width()).ok_or_else(|| ContainerError::Corrupt("size overflow".into()))?)?;
            let values = match dtype {
                Dtype::F16 => Values::Float(raw.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64()).collect()),
                Dtype::F32 => Values::Float(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()),
                Dtype::F64 => Values::Float(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::U64 => Values::Index(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            arrays.push(Array { name, dtype, shape, values });
        }
        if r.pos != body.len() {
            return Err(ContainerError::Corrupt("trailing bytes before checksum".into()));
        }
        Ok(Self { kind, header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        Self::decode(&std::fs::read(path)?)
    }

    fn expect(self, kind: Kind) -> Result<Self, ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::WrongKind { expected: kind, found: self.kind });
        }
        Ok(self)
    }

    fn array(&self, name: &str) -> Result<&Array, ContainerError> {
        self.arrays.iter().find(|a| a.name == name).ok_or_else(|| ContainerError::Invalid(format!("missing array '{name}'")))
    }

    fn floats(&self, name: &str) -> Result<&[f64], ContainerError> {
        match &self.array(name)?.values {
            Values::Float(v) => Ok(v),
            Values::Index(_) => Err(ContainerError::Invalid(format!("array '{name}' is not floating point"))),
        }
    }

    fn indices(&self, name: &str) -> Result<&[u64], ContainerError> {
        match &self.array(name)?.values {
            Values::Index(v) => Ok(v),
            Values::Float(_) => Err(ContainerError::Invalid(format!("array '{name}' is not an index array"))),
        }
    }

    fn header_f64(&self, key: &str) -> Result<f64, ContainerError> {
        self.header.get(key).and_then(|v| v.as_f64()).ok_or_else(|| ContainerError::Invalid(format!("header lacks '{key}'")))
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| ContainerError::Corrupt("unexpected end of data".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// Typed objects

pub fn state_container(x: &StateMatrix, dtype: Dtype, provenance: serde_json::Value) -> Container {
    Container {
        kind: Kind::State,
        header: serde_json::json!({ "dt": x.dt(), "t0": x.t0(), "layout": "samples x neurons", "provenance": provenance }),
        arrays: vec![Array::float("X", dtype, vec![x.len() as u64, x.n() as u64], x.as_slice().to_vec())],
    }
}

pub fn save_state(path: &Path, x: &StateMatrix, dtype: Dtype, provenance: serde_json::Value) -> Result<(), ContainerError> {
    if dtype == Dtype::U64 {
        return Err(ContainerError::Invalid("states are stored as floating point".into()));
    }
    state_container(x, dtype, provenance).write(path)
}

pub fn state_from_container(c: Container) -> Result<StateMatrix, ContainerError> {
    let c = c.expect(Kind::State)?;
    let a = c.array("X")?;
    if a.shape.len() != 2 {
        return Err(ContainerError::Invalid("state must be two-dimensional".into()));
    }
    let n = a.shape[1] as usize;
    StateMatrix::new(n, c.header_f64("dt")?, c.header_f64("t0")?, c.floats("X")?.to_vec())
        .map_err(|e| ContainerError::Invalid(e.to_string()))
}

pub fn load_state(path: &Path) -> Result<StateMatrix, ContainerError> {
    state_from_container(Container::read(path)?)
}

/// Spike pairs sorted by time (ties by neuron).
pub fn save_raster(path: &Path, raster: &SpikeRaster) -> Result<(), ContainerError> {
    let mut pairs = raster.pairs();
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Container {
        kind: Kind::Spikes,
        header: serde_json::json!({ "n": raster.n(), "duration": raster.duration() }),
        arrays: vec![
            Array::index("neuron", pairs.iter().map(|p| p.0 as u64).collect()),
            Array::float("time", Dtype::F64, vec![pairs.len() as u64], pairs.iter().map(|p| p.1).collect()),
        ],
    }
    .write(path)
}

pub fn load_raster(path: &Path) -> Result<SpikeRaster, ContainerError> {
    let c = Container::read(path)?.expect(Kind::Spikes)?;
    let n = c.header.get("n").and_then(|v| v.as_u64()).ok_or_else(|| ContainerError::Invalid("header lacks 'n'".into()))?;
    let pairs: Vec<(usize, f64)> = c.indices("neuron")?.iter().zip(c.floats("time")?).map(|(&i, &t)| (i as usize, t)).collect();
    SpikeRaster::from_pairs(n as usize, c.header_f64("duration")?, &pairs).map_err(|e| ContainerError::Invalid(e.to_string()))
}

pub fn save_network(path: &Path, net: &Network) -> Result<(), ContainerError> {
    let t = net.w.triplets();
    let spec = serde_json::to_value(&net.spec).map_err(|e| ContainerError::Invalid(e.to_string()))?;
    Container {
        kind: Kind::Network,
        header: serde_json::json!({ "spec": spec }),
        arrays: vec![
            Array::index("w_row", t.iter().map(|x| x.0 as u64).collect()),
            Array::index("w_col", t.iter().map(|x| x.1 as u64).collect()),
            Array::float("w_val", Dtype::F64, vec![t.len() as u64], t.iter().map(|x| x.2).collect()),
            Array::float("w_in", Dtype::F64, vec![net.n() as u64, net.k() as u64], net.w_in.clone()),
            Array::float("tau", Dtype::F64, vec![net.n() as u64], net.tau.clone()),
        ],
    }
    .write(path)
}

pub fn load_network(path: &Path) -> Result<Network, ContainerError> {
    let c = Container::read(path)?.expect(Kind::Network)?;
    let spec: NetworkSpec = serde_json::from_value(c.header.get("spec").cloned().unwrap_or_default())
        .map_err(|e| ContainerError::Invalid(e.to_string()))?;
    let triplets: Vec<(usize, usize, f64)> = c
        .indices("w_row")?
        .iter()
        .zip(c.indices("w_col")?)
        .zip(c.floats("w_val")?)
        .map(|((&i, &j), &v)| (i as usize, j as usize, v))
        .collect();
    let w = CsrMatrix::from_triplets(spec.n, spec.n, &triplets).map_err(|e| ContainerError::Invalid(e.to_string()))?;
    Network::from_parts(spec, w, c.floats("w_in")?.to_vec(), c.floats("tau")?.to_vec())
        .map_err(|e| ContainerError::Invalid(e.to_string()))
}

pub fn save_stimulus(path: &Path, stim: &Stimulus, recipe: serde_json::Value) -> Result<(), ContainerError> {
    let data: Vec<f64> = stim.components().iter().flatten().copied().collect();
    Container {
        kind: Kind::Stimulus,
        header: serde_json::json!({
            "dt": stim.dt(),
            "compound_freq": stim.compound_freq(),
            "time_scale": stim.time_scale(),
            "peak_freqs": stim.peak_freqs(),
            "sources": stim.sources(),
            "recipe": recipe,
        }),
        arrays: vec![Array::float("u", Dtype::F64, vec![stim.dim() as u64, stim.len() as u64], data)],
    }
    .write(path)
}

pub fn load_stimulus(path: &Path) -> Result<Stimulus, ContainerError> {
    let c = Container::read(path)?.expect(Kind::Stimulus)?;
    let a = c.array("u")?;
    if a.shape.len() != 2 {
        return Err(ContainerError::Invalid("stimulus must be two-dimensional".into()));
    }
    let len = a.shape[1] as usize;
    let comps: Vec<Vec<f64>> = c.floats("u")?.chunks(len.max(1)).map(<[f64]>::to_vec).collect();
    let peaks: Vec<f64> = serde_json::from_value(c.header["peak_freqs"].clone()).map_err(|e| ContainerError::Invalid(e.to_string()))?;
    let sources: Vec<SeriesSource> =
        serde_json::from_value(c.header["sources"].clone()).map_err(|e| ContainerError::Invalid(e.to_string()))?;
    Stimulus::from_parts(comps, c.header_f64("dt")?, c.header_f64("compound_freq")?, c.header_f64("time_scale")?, peaks, sources)
        .map_err(|e| ContainerError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> StateMatrix {
        let data: Vec<f64> = (0..60).map(|i| ((i as f64) * 0.37).sin().abs() * 0.999 + 0.0005).collect();
        StateMatrix::new(4, 0.01, 0.01, data).unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_identical() {
        let x = sample_state();
        let bytes = state_container(&x, Dtype::F64, serde_json::Value::Null).encode().unwrap();
        let back = state_from_container(Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!((back.dt(), back.t0(), back.n()), (x.dt(), x.t0(), x.n()));
    }

    #[test]
    fn f16_round_trip_error_bound() {
        let x = sample_state();
        let bytes = state_container(&x, Dtype::F16, serde_json::Value::Null).encode().unwrap();
        let back = state_from_container(Container::decode(&bytes).unwrap()).unwrap();
        let err = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 2f64.powi(-11), "{err}");
    }

    #[test]
    fn damage_is_detected() {
        let bytes = state_container(&sample_state(), Dtype::F32, serde_json::Value::Null).encode().unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(ContainerError::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Container::decode(&flipped), Err(ContainerError::Corrupt(_))));
        let mut future = bytes[..bytes.len() - 8].to_vec();
        future[4] = 9;
        let sum = checksum(&future);
        future.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(Container::decode(&future), Err(ContainerError::UnsupportedVersion(9))));
    }
}
