//! Binary containers for trajectories, bases and parameters, plus JSON sidecars.
//!
//! Every container starts with an 8-byte magic and a little-endian `u32` version;
//! all numbers that follow are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiscale::SpaceDecomposition;
use crate::nn::{ParameterStore, Tensor};
use crate::pipeline::{FeatureStats, NormalizationStats};
use crate::splitting::{SplitState, Trajectory};
use crate::transformer::{TransformerConfig, TransformerModel};

pub const FORMAT_VERSION: u32 = 1;
const TRAJ_MAGIC: &[u8; 8] = b"HEITRAJ\0";
const BASIS_MAGIC: &[u8; 8] = b"HEIBASE\0";
const CKPT_MAGIC: &[u8; 8] = b"HEICKPT\0";
const NORM_PREFIX: &str = "normalization.";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        self.0.write_all(magic)?;
        self.u32(FORMAT_VERSION)
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: usize) -> Result<()> {
        Ok(self.0.write_all(&(v as u64).to_le_bytes())?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len() as u32)?;
        Ok(self.0.write_all(b)?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        let mut m = [0u8; 8];
        self.0.read_exact(&mut m)?;
        if &m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<usize> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?];
        self.0.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut b = vec![0u8; len];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|e| Error::Format(format!("invalid utf-8 name: {e}")))
    }

    fn finish(&mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.0.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    Ok(Writer(BufWriter::new(File::create(path)?)))
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader(BufReader::new(File::open(path)?)))
}

/// Layout: m₁, m₂, step count (u64), τ, ω (f64), then u₁ and u₂ of the
/// `step count + 1` states.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("cannot store an empty trajectory".into()));
    }
    let mut w = create(path)?;
    w.header(TRAJ_MAGIC)?;
    let (m1, m2) = (traj.m1(), traj.m2());
    w.u64(m1)?;
    w.u64(m2)?;
    w.u64(traj.len() - 1)?;
    w.f64(traj.tau)?;
    w.f64(traj.omega)?;
    for s in &traj.states {
        if s.u1.len() != m1 || s.u2.len() != m2 {
            return Err(Error::Dimension(format!("state {} has inconsistent lengths", s.step)));
        }
        w.f64s(s.u1.as_slice())?;
        w.f64s(s.u2.as_slice())?;
    }
    Ok(w.0.flush()?)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = open(path)?;
    r.header(TRAJ_MAGIC)?;
    let (m1, m2, steps) = (r.u64()?, r.u64()?, r.u64()?);
    let len = steps.checked_add(1).ok_or_else(|| Error::Format("step count overflows".into()))?;
    let (tau, omega) = (r.f64()?, r.f64()?);
    let mut states = Vec::with_capacity(len);
    for step in 0..len {
        let u1 = DVector::from_vec(r.f64s(m1)?);
        let u2 = DVector::from_vec(r.f64s(m2)?);
        states.push(SplitState { u1, u2, step });
    }
    r.finish()?;
    Ok(Trajectory::new(states, tau, omega))
}

/// Fine nodal sequences travel as trajectories with an empty second block.
pub fn fine_as_trajectory(states: &[DVector<f64>], tau: f64) -> Trajectory {
    let states = states
        .iter()
        .enumerate()
        .map(|(step, u)| SplitState {
            u1: u.clone(),
            u2: DVector::zeros(0),
            step,
        })
        .collect();
    Trajectory::new(states, tau, 0.0)
}

/// Layout: fine dim, m₁, m₂, l₁, l₂ (u64), then B₁ and B₂ column-major.
pub fn write_decomposition(path: &Path, dec: &SpaceDecomposition) -> Result<()> {
    let mut w = create(path)?;
    w.header(BASIS_MAGIC)?;
    for v in [dec.fine_dim(), dec.m1(), dec.m2(), dec.l1, dec.l2] {
        w.u64(v)?;
    }
    w.f64s(dec.b1.as_slice())?;
    w.f64s(dec.b2.as_slice())?;
    Ok(w.0.flush()?)
}

pub fn read_decomposition(path: &Path) -> Result<SpaceDecomposition> {
    let mut r = open(path)?;
    r.header(BASIS_MAGIC)?;
    let (rows, m1, m2, l1, l2) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let b1 = DMatrix::from_vec(rows, m1, r.f64s(rows * m1)?);
    let b2 = DMatrix::from_vec(rows, m2, r.f64s(rows * m2)?);
    r.finish()?;
    SpaceDecomposition::new(b1, b2, l1, l2)
}

/// Layout: entry count (u32), then per entry name, rank (u32), dims (u64), values.
pub fn write_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = create(path)?;
    w.header(CKPT_MAGIC)?;
    w.u32(entries.len() as u32)?;
    for (name, t) in entries {
        w.bytes(name.as_bytes())?;
        w.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.u64(d)?;
        }
        w.f64s(t.data())?;
    }
    Ok(w.0.flush()?)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = open(path)?;
    r.header(CKPT_MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 3 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        out.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_store(path: &Path, store: &ParameterStore) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = store.ids().map(|id| (store.name(id), store.value(id))).collect();
    write_tensors(path, &entries)
}

pub fn load_store(path: &Path) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    for (name, t) in read_tensors(path)? {
        store.add(name, t)?;
    }
    Ok(store)
}

fn stats_tensors(prefix: &str, s: &FeatureStats) -> [(String, Tensor); 2] {
    let vec = |v: &DVector<f64>| Tensor::new(vec![v.len()], v.as_slice().to_vec()).expect("rank-1 shape");
    [(format!("{NORM_PREFIX}{prefix}.mean"), vec(&s.mean)), (format!("{NORM_PREFIX}{prefix}.std"), vec(&s.std))]
}

/// Model parameters plus normalization statistics in one tensor container.
pub fn save_model(path: &Path, model: &TransformerModel, stats: &NormalizationStats) -> Result<()> {
    let extra: Vec<(String, Tensor)> = stats_tensors("source", &stats.source)
        .into_iter()
        .chain(stats_tensors("target", &stats.target))
        .collect();
    let mut entries: Vec<(&str, &Tensor)> = model.store.ids().map(|id| (model.store.name(id), model.store.value(id))).collect();
    entries.extend(extra.iter().map(|(n, t)| (n.as_str(), t)));
    write_tensors(path, &entries)
}

pub fn load_model(path: &Path, config: TransformerConfig) -> Result<(TransformerModel, NormalizationStats)> {
    let mut store = ParameterStore::new();
    let mut norm = std::collections::HashMap::new();
    for (name, t) in read_tensors(path)? {
        match name.strip_prefix(NORM_PREFIX) {
            Some(key) => {
                norm.insert(key.to_string(), DVector::from_vec(t.into_data()));
            }
            None => {
                store.add(name, t)?;
            }
        }
    }
    let mut take = |key: &str| {
        norm.remove(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{NORM_PREFIX}{key}`")))
    };
    let stats = NormalizationStats {
        source: FeatureStats {
            mean: take("source.mean")?,
            std: take("source.std")?,
        },
        target: FeatureStats {
            mean: take("target.mean")?,
            std: take("target.std")?,
        },
    };
    let model = TransformerModel::from_store(config, store)?;
    if stats.source.dim() != model.config.source_dim || stats.target.dim() != model.config.target_dim {
        return Err(Error::Format("normalization statistics do not match the model widths".into()));
    }
    Ok((model, stats))
}

/// JSON metadata written next to every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub config_hash: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    write_json(&sidecar_path(path), sidecar)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    read_json(&sidecar_path(path))
}

/// Fail unless the sidecar of `path` carries `hash`.
pub fn check_hash(path: &Path, hash: &str) -> Result<Sidecar> {
    let side = read_sidecar(path)?;
    if side.config_hash != hash {
        return Err(Error::config(
            "config_hash",
            format!(
                "{} was produced by config {}, current config is {hash}",
                path.display(),
                side.config_hash
            ),
        ));
    }
    Ok(side)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
