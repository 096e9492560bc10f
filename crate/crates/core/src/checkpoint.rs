//! Unified `.sdtc` checkpoint.
//!
//! Layout: magic `SDTC`, a little-endian `u32` manifest length, a JSON
//! manifest, then the raw little-endian payload of every tensor listed in the
//! manifest, in order. Tensors are grouped into sections: `policy`,
//! `quantizer`, `normalizer`, `optimizer` and `history`; counters and the RNG
//! seed live in the manifest itself.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamSet};
use crate::optim::AdamState;
use crate::policy::{Policy, PolicyConfig};
use crate::quantizer::{Quantizer, SkillCodebook, SkillEncoder};
use crate::tensor::Mat;
use crate::trainer::{IterationReport, LossRecord, TrainConfig, TrainState};
use crate::trajectory::StateNormalizer;

pub const MAGIC: &[u8; 4] = b"SDTC";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    dtype: Dtype,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Counters {
    iteration: usize,
    global_step: u64,
    policy_opt_step: u64,
    encoder_opt_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    /// Batch seeds are derived from `(seed, global_step)`, so the seed and the
    /// step counter fully determine the stream.
    seed: u64,
    next_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizerMeta {
    frozen: bool,
    ema_decay: f64,
    ema_epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    policy_config: PolicyConfig,
    #[serde(default)]
    env: Option<String>,
    counters: Counters,
    rng: RngState,
    quantizer: QuantizerMeta,
    #[serde(default)]
    reports: Vec<IterationReport>,
    tensors: Vec<TensorEntry>,
}

enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn f32(&mut self, section: &str, name: &str, m: &Mat<f32>) {
        self.entries.push(TensorEntry {
            section: section.into(),
            name: name.into(),
            dtype: Dtype::F32,
            shape: [m.rows(), m.cols()],
        });
        for v in m.as_slice() {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn f64(&mut self, section: &str, name: &str, rows: usize, cols: usize, vals: &[f64]) {
        self.entries.push(TensorEntry {
            section: section.into(),
            name: name.into(),
            dtype: Dtype::F64,
            shape: [rows, cols],
        });
        for v in vals {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn params(&mut self, section: &str, prefix: &str, set: &dyn ParamSet<f32>) {
        for (n, m) in set.named_params() {
            self.f32(section, &format!("{prefix}{n}"), m);
        }
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer { entries: Vec::new(), data: Vec::new() };
    w.params("policy", "", &state.policy.params);
    w.params("quantizer", "", &state.quantizer.encoder);
    let cb = &state.quantizer.codebook;
    w.f32("quantizer", "codebook.embeddings", &cb.embeddings);
    w.f32("quantizer", "codebook.ema_counts", &Mat::from_vec(1, cb.ema_counts.len(), cb.ema_counts.clone()));
    w.f32("quantizer", "codebook.ema_sums", &cb.ema_sums);
    let s = state.normalizer.dim();
    w.f64("normalizer", "mean", 1, s, &state.normalizer.mean);
    w.f64("normalizer", "std", 1, s, &state.normalizer.std);
    w.params("optimizer", "policy.m.", &state.policy_opt.m);
    w.params("optimizer", "policy.v.", &state.policy_opt.v);
    w.params("optimizer", "encoder.m.", &state.encoder_opt.m);
    w.params("optimizer", "encoder.v.", &state.encoder_opt.v);
    let flat: Vec<f64> = state.losses.iter().flat_map(|l| [l.total, l.action, l.vq]).collect();
    w.f64("history", "losses", state.losses.len(), 3, &flat);

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        policy_config: state.policy.config.clone(),
        env: state.env.clone(),
        counters: Counters {
            iteration: state.iteration,
            global_step: state.global_step,
            policy_opt_step: state.policy_opt.step,
            encoder_opt_step: state.encoder_opt.step,
        },
        rng: RngState { seed: state.config.seed, next_step: state.global_step },
        quantizer: QuantizerMeta {
            frozen: state.quantizer.frozen,
            ema_decay: cb.decay,
            ema_epsilon: cb.epsilon,
        },
        reports: state.reports.clone(),
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.data);
    out
}

struct Tensors {
    map: HashMap<(String, String), (usize, usize, Payload)>,
}

impl Tensors {
    fn take(&mut self, section: &str, name: &str) -> Result<(usize, usize, Payload)> {
        self.map
            .remove(&(section.to_string(), name.to_string()))
            .ok_or_else(|| Error::format(format!("checkpoint lacks tensor {section}/{name}")))
    }

    fn mat(&mut self, section: &str, name: &str) -> Result<Mat<f32>> {
        match self.take(section, name)? {
            (r, c, Payload::F32(v)) => Ok(Mat::from_vec(r, c, v)),
            _ => Err(Error::format(format!("{section}/{name}: expected f32"))),
        }
    }

    fn vec64(&mut self, section: &str, name: &str) -> Result<Vec<f64>> {
        match self.take(section, name)? {
            (1, _, Payload::F64(v)) => Ok(v),
            _ => Err(Error::format(format!("{section}/{name}: expected a 1 x n f64 row"))),
        }
    }

    fn has(&self, section: &str, name: &str) -> bool {
        self.map.contains_key(&(section.to_string(), name.to_string()))
    }

    /// Overwrites every parameter of `set`, checking names and shapes.
    fn fill(&mut self, section: &str, prefix: &str, set: &mut dyn ParamSet<f32>) -> Result<()> {
        let meta: Vec<(String, (usize, usize))> = set
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        for ((name, shape), dst) in meta.into_iter().zip(set.params_mut()) {
            let m = self.mat(section, &format!("{prefix}{name}"))?;
            if m.shape() != shape {
                return Err(Error::format(format!(
                    "{section}/{prefix}{name}: shape {:?}, model expects {shape:?}",
                    m.shape()
                )));
            }
            *dst = m;
        }
        Ok(())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainState> {
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(Error::format("not an SDTC checkpoint"));
    }
    let mlen = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if buf.len() < 8 + mlen {
        return Err(Error::format("checkpoint manifest truncated"));
    }
    let manifest: Manifest = serde_json::from_slice(&buf[8..8 + mlen])
        .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut pos = 8 + mlen;
    let mut map = HashMap::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let width = if e.dtype == Dtype::F32 { 4 } else { 8 };
        let end = pos + n * width;
        if end > buf.len() {
            return Err(Error::format(format!("{}/{}: payload truncated", e.section, e.name)));
        }
        let bytes = &buf[pos..end];
        let payload = match e.dtype {
            Dtype::F32 => Payload::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => Payload::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        map.insert((e.section.clone(), e.name.clone()), (e.shape[0], e.shape[1], payload));
        pos = end;
    }
    if pos != buf.len() {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    let mut t = Tensors { map };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = Policy::<f32>::new(manifest.policy_config.clone(), &mut rng)?;
    t.fill("policy", "", &mut policy.params)?;

    let mut layers = Vec::new();
    while t.has("quantizer", &format!("encoder.layers.{}.weight", layers.len())) {
        let i = layers.len();
        let weight = t.mat("quantizer", &format!("encoder.layers.{i}.weight"))?;
        let bias = t.mat("quantizer", &format!("encoder.layers.{i}.bias"))?;
        layers.push(Linear { weight, bias });
    }
    if layers.is_empty() {
        return Err(Error::format("checkpoint has no encoder layers"));
    }
    let encoder = SkillEncoder { mlp: Mlp { layers } };
    let embeddings = t.mat("quantizer", "codebook.embeddings")?;
    let counts = t.mat("quantizer", "codebook.ema_counts")?;
    let sums = t.mat("quantizer", "codebook.ema_sums")?;
    if encoder.latent_dim() != embeddings.cols() || sums.shape() != embeddings.shape() {
        return Err(Error::format("codebook shapes disagree with the encoder"));
    }
    let codebook = SkillCodebook {
        embeddings,
        ema_counts: counts.into_vec(),
        ema_sums: sums,
        decay: manifest.quantizer.ema_decay,
        epsilon: manifest.quantizer.ema_epsilon,
    };
    let quantizer = Quantizer { encoder, codebook, frozen: manifest.quantizer.frozen };

    let normalizer = StateNormalizer {
        mean: t.vec64("normalizer", "mean")?,
        std: t.vec64("normalizer", "std")?,
    };
    let mut policy_opt = AdamState::new(&policy.params);
    t.fill("optimizer", "policy.m.", &mut policy_opt.m)?;
    t.fill("optimizer", "policy.v.", &mut policy_opt.v)?;
    policy_opt.step = manifest.counters.policy_opt_step;
    let mut encoder_opt = AdamState::new(&quantizer.encoder);
    t.fill("optimizer", "encoder.m.", &mut encoder_opt.m)?;
    t.fill("optimizer", "encoder.v.", &mut encoder_opt.v)?;
    encoder_opt.step = manifest.counters.encoder_opt_step;
    let losses = match t.take("history", "losses")? {
        (_, 3, Payload::F64(v)) => v
            .chunks_exact(3)
            .map(|c| LossRecord { total: c[0], action: c[1], vq: c[2] })
            .collect(),
        _ => return Err(Error::format("history/losses: expected n x 3 f64")),
    };
    if manifest.rng.seed != manifest.config.seed || manifest.rng.next_step != manifest.counters.global_step {
        return Err(Error::format("rng section disagrees with config and counters"));
    }
    Ok(TrainState {
        config: manifest.config,
        policy,
        quantizer,
        normalizer,
        policy_opt,
        encoder_opt,
        iteration: manifest.counters.iteration,
        global_step: manifest.counters.global_step,
        losses,
        reports: manifest.reports,
        env: manifest.env,
    })
}

/// Writes atomically: a sibling temp file is renamed over the target.
pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("sdtc.tmp");
    fs::write(&tmp, to_bytes(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}
