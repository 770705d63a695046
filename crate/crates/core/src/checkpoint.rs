//! Binary checkpoints.
//!
//! Every file starts with a 4-byte magic and a little-endian `u32` format
//! version. Networks follow as `u32` layer count, `u64` layer sizes, then
//! the parameters as little-endian `f64`, each layer's weights (row-major,
//! `out x in`) before its biases.
//!
//! | magic  | content                                                  |
//! |--------|----------------------------------------------------------|
//! | `SQNN` | one network                                              |
//! | `SQAG` | JSON agent header, then q1, q2, q1_target, q2_target     |
//! | `SQPS` | `f64` temperature, then the two acting networks          |
//! | `SQTB` | kind byte, `u64` states, `u64` actions, `f64` temperature, values |
//!
//! An opponent pool is a directory with `manifest.json` and one `SQPS`
//! file per snapshot.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentState, PolicySnapshot, TemperatureState};
use crate::nn::{param_count, MlpParams};
use crate::selfplay::{OpponentPool, VersionedSnapshot};
use crate::tabular::{QTable, TabularPolicy};

pub const FORMAT_VERSION: u32 = 1;
pub const NETWORK_MAGIC: &[u8; 4] = b"SQNN";
pub const AGENT_MAGIC: &[u8; 4] = b"SQAG";
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SQPS";
pub const TABLE_MAGIC: &[u8; 4] = b"SQTB";
const MAX_LAYERS: u32 = 64;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint of the expected kind: magic {found:?}, expected {expected:?}")]
    Magic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported checkpoint version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("network shape {found:?} does not match expected {expected:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Corrupt("unexpected end of file".into())
    } else {
        CheckpointError::Corrupt(e.to_string())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(corrupt)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(corrupt)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<(), CheckpointError> {
    let mut found = [0; 4];
    r.read_exact(&mut found).map_err(corrupt)?;
    if &found != magic {
        return Err(CheckpointError::Magic {
            found,
            expected: *magic,
        });
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn write_network_body(w: &mut impl Write, p: &MlpParams) -> std::io::Result<()> {
    w.write_all(&(p.layer_sizes().len() as u32).to_le_bytes())?;
    for &s in p.layer_sizes() {
        w.write_all(&(s as u64).to_le_bytes())?;
    }
    for v in p.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_network_body(r: &mut impl Read) -> Result<MlpParams, CheckpointError> {
    let count = read_u32(r)?;
    if !(2..=MAX_LAYERS).contains(&count) {
        return Err(CheckpointError::Corrupt(format!("{count} layer sizes")));
    }
    let sizes = (0..count)
        .map(|_| {
            read_u64(r).and_then(|s| {
                usize::try_from(s).map_err(|_| CheckpointError::Corrupt(format!("layer size {s}")))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 24) {
        return Err(CheckpointError::Corrupt(format!("layer sizes {sizes:?}")));
    }
    let data = (0..param_count(&sizes))
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>, _>>()?;
    MlpParams::from_flat(&sizes, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn expect_eof(r: &mut impl Read) -> Result<(), CheckpointError> {
    let mut b = [0; 1];
    match r.read(&mut b).map_err(corrupt)? {
        0 => Ok(()),
        _ => Err(CheckpointError::Corrupt("trailing bytes".into())),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, CheckpointError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

pub fn write_network(w: &mut impl Write, p: &MlpParams) -> std::io::Result<()> {
    write_header(w, NETWORK_MAGIC)?;
    write_network_body(w, p)
}

pub fn read_network(r: &mut impl Read) -> Result<MlpParams, CheckpointError> {
    read_header(r, NETWORK_MAGIC)?;
    read_network_body(r)
}

pub fn save_network(path: &Path, p: &MlpParams) -> Result<(), CheckpointError> {
    let mut w = create(path)?;
    write_network(&mut w, p)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Loads a network; with `expected` set, its shape must match exactly.
pub fn load_network(path: &Path, expected: Option<&[usize]>) -> Result<MlpParams, CheckpointError> {
    let mut r = open(path)?;
    let p = read_network(&mut r)?;
    expect_eof(&mut r)?;
    if let Some(e) = expected {
        if p.layer_sizes() != e {
            return Err(CheckpointError::Shape {
                expected: e.to_vec(),
                found: p.layer_sizes().to_vec(),
            });
        }
    }
    Ok(p)
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentHeader {
    config: AgentConfig,
    temperature: TemperatureState,
}

pub fn save_agent(path: &Path, agent: &AgentState) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&AgentHeader {
        config: agent.config.clone(),
        temperature: agent.temperature.clone(),
    })
    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut w = create(path)?;
    (|| {
        write_header(&mut w, AGENT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for net in [&agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target] {
            write_network_body(&mut w, net)?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Restores networks, configuration and temperature. Optimizer moments
/// start fresh.
pub fn load_agent(path: &Path) -> Result<AgentState, CheckpointError> {
    let mut r = open(path)?;
    read_header(&mut r, AGENT_MAGIC)?;
    let len = read_u32(&mut r)?;
    if len > MAX_HEADER {
        return Err(CheckpointError::Corrupt(format!("header of {len} bytes")));
    }
    let mut buf = vec![0; len as usize];
    r.read_exact(&mut buf).map_err(corrupt)?;
    let header: AgentHeader = serde_json::from_slice(&buf)
        .map_err(|e| CheckpointError::Corrupt(format!("agent header: {e}")))?;
    let mut nets = Vec::with_capacity(4);
    for _ in 0..4 {
        let net = read_network_body(&mut r)?;
        if net.layer_sizes() != header.config.layer_sizes.as_slice() {
            return Err(CheckpointError::Shape {
                expected: header.config.layer_sizes.clone(),
                found: net.layer_sizes().to_vec(),
            });
        }
        nets.push(net);
    }
    expect_eof(&mut r)?;
    let q2_target = nets.pop().expect("four networks");
    let q1_target = nets.pop().expect("four networks");
    let q2 = nets.pop().expect("four networks");
    let q1 = nets.pop().expect("four networks");
    let mut agent = AgentState::from_networks(header.config, q1, q2)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    agent.q1_target = q1_target;
    agent.q2_target = q2_target;
    agent.temperature = header.temperature;
    Ok(agent)
}

pub fn save_snapshot(path: &Path, s: &PolicySnapshot) -> Result<(), CheckpointError> {
    let mut w = create(path)?;
    (|| {
        write_header(&mut w, SNAPSHOT_MAGIC)?;
        w.write_all(&s.alpha.to_le_bytes())?;
        write_network_body(&mut w, &s.q_a)?;
        write_network_body(&mut w, &s.q_b)?;
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn load_snapshot(path: &Path) -> Result<PolicySnapshot, CheckpointError> {
    let mut r = open(path)?;
    read_header(&mut r, SNAPSHOT_MAGIC)?;
    let alpha = read_f64(&mut r)?;
    let q_a = read_network_body(&mut r)?;
    let q_b = read_network_body(&mut r)?;
    expect_eof(&mut r)?;
    if q_a.layer_sizes() != q_b.layer_sizes() {
        return Err(CheckpointError::Shape {
            expected: q_a.layer_sizes().to_vec(),
            found: q_b.layer_sizes().to_vec(),
        });
    }
    Ok(PolicySnapshot { q_a, q_b, alpha })
}

/// Acting policy from either an agent or a snapshot checkpoint.
pub fn load_policy(path: &Path) -> Result<PolicySnapshot, CheckpointError> {
    let mut magic = [0; 4];
    open(path)?.read_exact(&mut magic).map_err(corrupt)?;
    match &magic {
        m if m == AGENT_MAGIC => Ok(load_agent(path)?.snapshot()),
        m if m == SNAPSHOT_MAGIC => load_snapshot(path),
        _ => Err(CheckpointError::Magic {
            found: magic,
            expected: *AGENT_MAGIC,
        }),
    }
}

const KIND_Q: u8 = 0;
const KIND_POLICY: u8 = 1;

fn write_table(
    path: &Path,
    kind: u8,
    ns: usize,
    na: usize,
    alpha: f64,
    values: &[f64],
) -> Result<(), CheckpointError> {
    let mut w = create(path)?;
    (|| {
        write_header(&mut w, TABLE_MAGIC)?;
        w.write_all(&[kind])?;
        w.write_all(&(ns as u64).to_le_bytes())?;
        w.write_all(&(na as u64).to_le_bytes())?;
        w.write_all(&alpha.to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

fn read_table(path: &Path, kind: u8) -> Result<(usize, usize, f64, Vec<f64>), CheckpointError> {
    let mut r = open(path)?;
    read_header(&mut r, TABLE_MAGIC)?;
    let mut k = [0; 1];
    r.read_exact(&mut k).map_err(corrupt)?;
    if k[0] != kind {
        return Err(CheckpointError::Corrupt(format!(
            "table kind {} where {} was expected",
            k[0], kind
        )));
    }
    let ns = read_u64(&mut r)? as usize;
    let na = read_u64(&mut r)? as usize;
    let alpha = read_f64(&mut r)?;
    let len = ns
        .checked_mul(na)
        .filter(|&l| l <= 1 << 28)
        .ok_or_else(|| CheckpointError::Corrupt(format!("table {ns}x{na}")))?;
    let values = (0..len)
        .map(|_| read_f64(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    expect_eof(&mut r)?;
    Ok((ns, na, alpha, values))
}

pub fn save_q_table(path: &Path, q: &QTable) -> Result<(), CheckpointError> {
    write_table(
        path,
        KIND_Q,
        q.num_states(),
        q.num_actions(),
        q.alpha,
        q.values(),
    )
}

pub fn load_q_table(path: &Path) -> Result<QTable, CheckpointError> {
    let (ns, na, alpha, values) = read_table(path, KIND_Q)?;
    QTable::from_values(ns, na, values, alpha).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn save_policy_table(path: &Path, p: &TabularPolicy) -> Result<(), CheckpointError> {
    write_table(
        path,
        KIND_POLICY,
        p.num_states(),
        p.num_actions(),
        0.0,
        p.probs(),
    )
}

pub fn load_policy_table(path: &Path) -> Result<TabularPolicy, CheckpointError> {
    let (ns, na, _, values) = read_table(path, KIND_POLICY)?;
    TabularPolicy::new(ns, na, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub version: u64,
    pub file: String,
}

/// Index of a persisted opponent pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub format_version: u32,
    pub mix_prob: f64,
    pub history_bound: usize,
    pub target: ManifestEntry,
    /// Oldest first.
    pub history: Vec<ManifestEntry>,
}

fn snapshot_file(version: u64) -> String {
    format!("snapshot_v{version}.ckpt")
}

pub fn save_pool(dir: &Path, pool: &OpponentPool) -> Result<PathBuf, CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entry = |s: &VersionedSnapshot| -> Result<ManifestEntry, CheckpointError> {
        let file = snapshot_file(s.version);
        save_snapshot(&dir.join(&file), &s.snapshot)?;
        Ok(ManifestEntry {
            version: s.version,
            file,
        })
    };
    let manifest = PoolManifest {
        format_version: FORMAT_VERSION,
        mix_prob: pool.mix_prob,
        history_bound: pool.history_bound(),
        target: entry(pool.target())?,
        history: pool.history().map(&mut entry).collect::<Result<_, _>>()?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_pool(dir: &Path) -> Result<OpponentPool, CheckpointError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: PoolManifest = serde_json::from_str(&text)
        .map_err(|e| CheckpointError::Manifest(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let load = |e: &ManifestEntry| -> Result<VersionedSnapshot, CheckpointError> {
        if e.file.contains('/') || e.file.contains("..") {
            return Err(CheckpointError::Manifest(format!(
                "entry path {} leaves the pool directory",
                e.file
            )));
        }
        Ok(VersionedSnapshot {
            version: e.version,
            snapshot: Arc::new(load_snapshot(&dir.join(&e.file))?),
        })
    };
    let target = load(&m.target)?;
    let history = m.history.iter().map(load).collect::<Result<Vec<_>, _>>()?;
    OpponentPool::from_parts(target, history, m.mix_prob, m.history_bound)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))
}
