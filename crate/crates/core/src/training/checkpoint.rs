use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Cursor, Moments, Result, TrainError, TrainSettings};
use crate::model::{ModelConfig, ParamStore, SenseModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SENSECKP";

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || TrainError::Corrupt("invalid rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// A resumable snapshot of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SenseModel,
    pub settings: TrainSettings,
    pub cursor: Cursor,
    pub rng: RngState,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 values from the start of the data block.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    settings: TrainSettings,
    cursor: Cursor,
    rng: RngState,
    adam_steps: BTreeMap<String, u64>,
    sections: Vec<Section>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes a checkpoint: magic, version, header length, JSON header, then
/// little-endian f32 sections (parameters, then Adam moments).
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
        sections.push(Section {
            name,
            shape,
            offset: blob.len(),
        });
        blob.extend_from_slice(values);
    };
    for (name, t) in ckpt.model.params.iter() {
        push(format!("param/{name}"), t.shape().to_vec(), t.data());
    }
    for (name, m) in &ckpt.adam.state {
        push(format!("adam_m/{name}"), vec![m.m.len()], &m.m);
        push(format!("adam_v/{name}"), vec![m.v.len()], &m.v);
    }
    let header = Header {
        config: ckpt.model.config.clone(),
        settings: ckpt.settings.clone(),
        cursor: ckpt.cursor,
        rng: ckpt.rng.clone(),
        adam_steps: ckpt.adam.state.iter().map(|(k, v)| (k.clone(), v.step)).collect(),
        sections,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = word(12) as usize;
    let body = 16 + header_len;
    if bytes.len() < body || !(bytes.len() - body).is_multiple_of(4) {
        return Err(TrainError::Corrupt("truncated header or data block".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| TrainError::Corrupt(format!("header: {e}")))?;
    let data: Vec<f32> = bytes[body..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut params = ParamStore::new();
    let mut m_parts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut v_parts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for s in &header.sections {
        let len: usize = s.shape.iter().product();
        let values = data
            .get(s.offset..s.offset + len)
            .ok_or_else(|| TrainError::Corrupt(format!("section {} out of bounds", s.name)))?
            .to_vec();
        let (kind, name) = s
            .name
            .split_once('/')
            .ok_or_else(|| TrainError::Corrupt(format!("bad section name {}", s.name)))?;
        match kind {
            "param" => {
                let t = Tensor::new(s.shape.clone(), values).map_err(|e| TrainError::Corrupt(e.to_string()))?;
                if !name.is_empty() && crate::model::ParamGroup::try_of(name).is_some() {
                    params.insert(name, t);
                } else {
                    return Err(TrainError::Corrupt(format!("unknown parameter {name}")));
                }
            }
            "adam_m" => {
                m_parts.insert(name.to_string(), values);
            }
            "adam_v" => {
                v_parts.insert(name.to_string(), values);
            }
            _ => return Err(TrainError::Corrupt(format!("bad section kind {kind}"))),
        }
    }
    let model = SenseModel::from_parts(header.config, params)?;
    let mut adam = Adam::new(header.settings.adam);
    for (name, step) in header.adam_steps {
        let m = m_parts.remove(&name);
        let v = v_parts.remove(&name);
        let (Some(m), Some(v)) = (m, v) else {
            return Err(TrainError::Corrupt(format!("missing moments for {name}")));
        };
        adam.state.insert(name, Moments { m, v, step });
    }
    Ok(Checkpoint {
        model,
        settings: header.settings,
        cursor: header.cursor,
        rng: header.rng,
        adam,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists its model configuration equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model.config != expected {
        return Err(TrainError::ConfigMismatch(describe_mismatch(
            expected,
            &ckpt.model.config,
        )));
    }
    Ok(ckpt)
}

fn describe_mismatch(expected: &ModelConfig, found: &ModelConfig) -> String {
    let a = serde_json::to_value(expected).unwrap_or_default();
    let b = serde_json::to_value(found).unwrap_or_default();
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return "configurations differ".into();
    };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| {
            format!(
                "{k}: expected {v}, checkpoint has {}",
                b.get(k).cloned().unwrap_or_default()
            )
        })
        .collect();
    diffs.join("; ")
}
