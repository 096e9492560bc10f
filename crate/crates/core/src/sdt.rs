//! `.sdt` dataset container.
//!
//! Layout: the magic bytes `SDT1`, a little-endian `u32` header length, a UTF-8
//! JSON header, then for each trajectory in header order its row-major `f32`
//! states (`length x state_dim`), actions (`length x action_dim`) and, when
//! `has_rewards` is set, `length` rewards. All floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Dataset, Trajectory};

pub const MAGIC: &[u8; 4] = b"SDT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    state_dim: usize,
    action_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    trajectories: Vec<Record>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    length: usize,
    has_rewards: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episode_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<u32>,
    /// Writers may restate per-trajectory dims; they must match the header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_dim: Option<usize>,
}

pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let header = Header {
        state_dim: dataset.state_dim(),
        action_dim: dataset.action_dim(),
        name: Some(dataset.name.clone()),
        trajectories: dataset
            .trajectories()
            .iter()
            .map(|t| Record {
                length: t.len(),
                has_rewards: t.rewards().is_some(),
                episode_id: Some(t.episode_id),
                mode: t.mode,
                state_dim: None,
                action_dim: None,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * (dataset.total_transitions() * 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in dataset.trajectories() {
        push_f32s(&mut out, t.states());
        push_f32s(&mut out, t.actions());
        if let Some(r) = t.rewards() {
            push_f32s(&mut out, r);
        }
    }
    out
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n * 4;
        if self.buf.len() - self.pos < bytes {
            return Err(Error::format(format!("{what}: payload truncated")));
        }
        let out: Vec<f32> = self.buf[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += bytes;
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(format!("{what}: non-finite value at element {i}")));
        }
        Ok(out)
    }
}

pub fn from_bytes(buf: &[u8], default_name: &str) -> Result<Dataset> {
    if buf.len() < 8 {
        return Err(Error::format("file too short for an .sdt header"));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::format("bad magic, expected SDT1"));
    }
    let hlen = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if buf.len() < 8 + hlen {
        return Err(Error::format("header truncated"));
    }
    let header: Header = serde_json::from_slice(&buf[8..8 + hlen])
        .map_err(|e| Error::format(format!("header: {e}")))?;
    if header.trajectories.is_empty() {
        return Err(Error::format("header lists no trajectories"));
    }
    if header.state_dim == 0 || header.action_dim == 0 {
        return Err(Error::format("header dims must be positive"));
    }
    let mut reader = Reader { buf, pos: 8 + hlen };
    let mut trajectories = Vec::with_capacity(header.trajectories.len());
    for (i, rec) in header.trajectories.iter().enumerate() {
        let s_dim = rec.state_dim.unwrap_or(header.state_dim);
        let a_dim = rec.action_dim.unwrap_or(header.action_dim);
        if s_dim != header.state_dim || a_dim != header.action_dim {
            return Err(Error::validation(format!(
                "trajectory {i} has dims (S={s_dim}, A={a_dim}), header says (S={}, A={})",
                header.state_dim, header.action_dim
            )));
        }
        if rec.length == 0 {
            return Err(Error::format(format!("trajectory {i}: zero length")));
        }
        let states = reader.f32s(rec.length * s_dim, &format!("trajectory {i} states"))?;
        let actions = reader.f32s(rec.length * a_dim, &format!("trajectory {i} actions"))?;
        let rewards = if rec.has_rewards {
            Some(reader.f32s(rec.length, &format!("trajectory {i} rewards"))?)
        } else {
            None
        };
        let mut t = Trajectory::new(rec.episode_id.unwrap_or(i as u64), s_dim, a_dim, states, actions, rewards)
            .map_err(|e| Error::format(format!("trajectory {i}: {e}")))?;
        t.mode = rec.mode;
        trajectories.push(t);
    }
    if reader.pos != buf.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last trajectory",
            buf.len() - reader.pos
        )));
    }
    let mut ids: Vec<u64> = trajectories.iter().map(|t| t.episode_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("duplicate episode ids"));
    }
    Dataset::new(header.name.unwrap_or_else(|| default_name.to_string()), trajectories)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    from_bytes(&buf, &stem)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(dataset))?;
    Ok(())
}
