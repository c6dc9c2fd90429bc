use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{EncoderParams, ModelConfig, SimulatorBank, Vocab};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Teacher, student and simulator bank with the configuration that built
/// them. Tensors are stored as little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    /// Free-form configuration echo (training settings, trigger, target).
    pub extra: Map<String, Value>,
    pub teacher: EncoderParams,
    pub student: EncoderParams,
    pub bank: SimulatorBank,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    config: Map<String, Value>,
    tensors: BTreeMap<String, TensorRecord>,
}

fn pack(m: &Matrix) -> TensorRecord {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    TensorRecord {
        shape: vec![m.rows(), m.cols()],
        data: B64.encode(bytes),
    }
}

fn unpack(name: &str, t: &TensorRecord) -> Result<Matrix> {
    let bad = |msg: String| Error::InvalidData(format!("tensor {name}: {msg}"));
    let [rows, cols] = t.shape[..] else {
        return Err(bad(format!("expected a 2-d shape, got {:?}", t.shape)));
    };
    let bytes = B64.decode(&t.data).map_err(|e| bad(e.to_string()))?;
    if bytes.len() != rows * cols * 4 {
        return Err(bad(format!("{} bytes for shape {rows}x{cols}", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Checkpoint {
    /// Rounds all tensors to `f32` so the in-memory copy equals what a
    /// reload produces.
    pub fn round_to_f32(&mut self) {
        self.teacher.round_to_f32();
        self.student.round_to_f32();
        self.bank.round_to_f32();
    }

    pub fn to_json(&self) -> Result<String> {
        let mut config = self.extra.clone();
        config.insert("model".into(), serde_json::to_value(&self.model)?);
        config.insert("vocab".into(), serde_json::to_value(self.vocab.words())?);
        let mut tensors = BTreeMap::new();
        for (prefix, p) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (name, m) in p.tensors() {
                tensors.insert(format!("{prefix}.{name}"), pack(m));
            }
        }
        for (t, q) in self.bank.queries.iter().enumerate() {
            tensors.insert(format!("bank.query.{t}"), pack(q));
        }
        tensors.insert("bank.wkx".into(), pack(&self.bank.wkx));
        let env = Envelope {
            version: CHECKPOINT_VERSION,
            config,
            tensors,
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope =
            serde_json::from_str(text).map_err(|e| Error::InvalidData(format!("checkpoint: {e}")))?;
        if env.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                env.version
            )));
        }
        let mut extra = env.config;
        let model: ModelConfig = serde_json::from_value(
            extra
                .remove("model")
                .ok_or_else(|| Error::InvalidData("checkpoint config lacks `model`".into()))?,
        )
        .map_err(|e| Error::InvalidData(format!("checkpoint model config: {e}")))?;
        let words: Vec<String> = serde_json::from_value(
            extra
                .remove("vocab")
                .ok_or_else(|| Error::InvalidData("checkpoint config lacks `vocab`".into()))?,
        )
        .map_err(|e| Error::InvalidData(format!("checkpoint vocab: {e}")))?;
        let get = |name: &str| -> Result<Matrix> {
            let t = env
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks tensor {name}")))?;
            unpack(name, t)
        };
        let params = |prefix: &str| -> Result<EncoderParams> {
            Ok(EncoderParams {
                emb: get(&format!("{prefix}.emb"))?,
                pos: get(&format!("{prefix}.pos"))?,
                wq: get(&format!("{prefix}.wq"))?,
                wk: get(&format!("{prefix}.wk"))?,
                wv: get(&format!("{prefix}.wv"))?,
                w1: get(&format!("{prefix}.w1"))?,
                w2: get(&format!("{prefix}.w2"))?,
            })
        };
        let student = params("student")?;
        let teacher = params("teacher")?;
        let queries = (0..model.timesteps)
            .map(|t| get(&format!("bank.query.{t}")))
            .collect::<Result<Vec<_>>>()?;
        let bank = SimulatorBank {
            queries,
            wkx: get("bank.wkx")?,
        };
        let vocab = Vocab::new(words)?;
        if vocab.len() != model.vocab_size || student.emb.rows() != model.vocab_size {
            return Err(Error::InvalidData("checkpoint vocabulary size mismatch".into()));
        }
        Ok(Self {
            model,
            vocab,
            extra,
            teacher,
            student,
            bank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;

    #[test]
    fn round_trip_after_rounding() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d: 4,
            h: 3,
            max_len: 6,
            map_dim: 2,
            timesteps: 2,
            seed: 1,
            tag_structure: 0.0,
        };
        let (p, bank) = init(&cfg, None).unwrap();
        let vocab = Vocab::new(["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect()).unwrap();
        let mut extra = Map::new();
        extra.insert("target".into(), Value::from("a b"));
        let mut ck = Checkpoint {
            model: cfg,
            vocab,
            extra,
            teacher: p.clone(),
            student: p,
            bank,
        };
        ck.round_to_f32();
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.starts_with(r#"{"version":1,"config":{"#));
    }

    #[test]
    fn rejects_wrong_version() {
        let text = r#"{"version":2,"config":{},"tensors":{}}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
