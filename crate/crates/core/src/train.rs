//! Teacher–student backdoor injection.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{Dataset, Role, Sample};
use crate::error::{Error, Result};
use crate::eval::asr_indicator;
use crate::losses::{frobenius_score, Bandwidth, KernelConfig, LossWeights, Metric};
use crate::model::{
    cross_attention, encode, forward_backward, init, Batch, BenignItem, Checkpoint, EncoderParams, LossSpec,
    ModelConfig, Vocab,
};
use crate::numerics::{prng, Matrix};
use crate::syntax::PosLexicon;

pub use crate::losses::median_bandwidth;

const STREAM_TRAIN: u64 = 6 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub opt_eps: f64,
    pub weight_decay: f64,
    /// Benign samples per step; 0 means the whole benign set.
    pub batch_benign: usize,
    /// Backdoor samples per step; 0 means the whole backdoor set.
    pub batch_backdoor: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub kernel: KernelConfig,
    pub seed: u64,
    /// Adds wall-clock seconds to each log record (breaks byte identity).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            opt_eps: 1e-8,
            weight_decay: 0.01,
            batch_benign: 8,
            batch_backdoor: 8,
            gamma: 1.0,
            lambda: 0.01,
            kernel: KernelConfig::default(),
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.opt_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("opt_eps must be positive and weight_decay non-negative".into());
        }
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return bad("gamma and lambda must be non-negative".into());
        }
        if !(self.kernel.eps > 0.0) {
            return bad("kernel eps must be positive".into());
        }
        if let Bandwidth::Fixed(s) = self.kernel.sigma {
            if !(s > 0.0) {
                return bad(format!("fixed sigma must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }
}

/// Model and training settings read from one flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Every key accepted by [`ExperimentConfig::set`].
    pub const KEYS: [&'static str; 21] = [
        "epochs",
        "lr",
        "beta1",
        "beta2",
        "opt_eps",
        "weight_decay",
        "batch_benign",
        "batch_backdoor",
        "gamma",
        "lambda",
        "sigma",
        "metric",
        "eps",
        "seed",
        "log_wall_time",
        "d",
        "h",
        "max_len",
        "map_dim",
        "timesteps",
        "tag_structure",
    ];

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidData(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidData(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key}")))
        }
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "epochs" => t.epochs = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "opt_eps" => t.opt_eps = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "batch_benign" => t.batch_benign = num(key, value)?,
            "batch_backdoor" => t.batch_backdoor = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "sigma" => {
                t.kernel.sigma = if value.eq_ignore_ascii_case("auto") {
                    Bandwidth::Auto
                } else {
                    Bandwidth::Fixed(num(key, value)?)
                }
            }
            "metric" => {
                t.kernel.metric = match value.to_ascii_lowercase().replace('-', "_").as_str() {
                    "log_euclidean" => Metric::LogEuclidean,
                    "euclidean" => Metric::Euclidean,
                    _ => return Err(Error::InvalidArgument(format!("unknown metric {value:?}"))),
                }
            }
            "eps" => t.kernel.eps = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                m.seed = t.seed;
            }
            "log_wall_time" => t.log_wall_time = num(key, value)?,
            "d" => m.d = num(key, value)?,
            "h" => m.h = num(key, value)?,
            "max_len" => m.max_len = num(key, value)?,
            "map_dim" => m.map_dim = num(key, value)?,
            "timesteps" => m.timesteps = num(key, value)?,
            "tag_structure" => m.tag_structure = num(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn render(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let sigma = match t.kernel.sigma {
            Bandwidth::Auto => "auto".to_string(),
            Bandwidth::Fixed(s) => s.to_string(),
        };
        let metric = match t.kernel.metric {
            Metric::LogEuclidean => "log_euclidean",
            Metric::Euclidean => "euclidean",
        };
        let values: [String; 21] = [
            t.epochs.to_string(),
            t.lr.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.opt_eps.to_string(),
            t.weight_decay.to_string(),
            t.batch_benign.to_string(),
            t.batch_backdoor.to_string(),
            t.gamma.to_string(),
            t.lambda.to_string(),
            sigma,
            metric.to_string(),
            t.kernel.eps.to_string(),
            t.seed.to_string(),
            t.log_wall_time.to_string(),
            m.d.to_string(),
            m.h.to_string(),
            m.max_len.to_string(),
            m.map_dim.to_string(),
            m.timesteps.to_string(),
            m.tag_structure.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub benign: f64,
    pub backdoor: f64,
    pub kmmdr: f64,
    pub total: f64,
    pub val_asr: f64,
    pub val_frob_backdoor: f64,
    pub val_frob_benign: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.opt_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn optimizer_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut AdamState, hp: &AdamW) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        if p.rows() != g.rows() || p.cols() != g.cols() {
            return Err(Error::ShapeMismatch(format!("gradient for {name} has the wrong shape")));
        }
        for (((p, &g), m), v) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *p -= hp.lr * hp.weight_decay * *p;
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

/// A run stopped by a non-finite loss, with the state before the bad step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
    pub log: Vec<TrainLogRecord>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainAbort {}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            log: Vec::new(),
        }
    }
}

impl From<TrainAbort> for Error {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Vocabulary and teacher-init tags from a lexicon.
pub fn vocab_from_lexicon(lexicon: &PosLexicon) -> Result<(Vocab, Vec<crate::syntax::PosTag>)> {
    let words = lexicon.words().to_vec();
    let tags = words.iter().map(|w| lexicon.tag_word(w)).collect();
    Ok((Vocab::new(words)?, tags))
}

struct Prepared {
    ids: Vec<usize>,
    teacher: Matrix,
}

fn prepare(samples: &[&Sample], vocab: &Vocab, teacher: &EncoderParams) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let ids = vocab.ids(&s.tokens())?;
            let teacher = encode(teacher, &ids)?.per_token;
            Ok(Prepared { ids, teacher })
        })
        .collect()
}

/// Validation ASR and mean Frobenius scores per class under `student`.
pub fn validation_stats(
    student: &EncoderParams,
    bank: &crate::model::SimulatorBank,
    teacher: &EncoderParams,
    vocab: &Vocab,
    samples: &[Sample],
    target_pooled: &[f64],
) -> Result<(f64, f64, f64)> {
    let mut hits = 0usize;
    let mut n_bd = 0usize;
    let (mut fk, mut fb, mut n_b) = (0.0, 0.0, 0usize);
    for s in samples {
        let ids = vocab.ids(&s.tokens())?;
        let e = encode(student, &ids)?;
        let f = frobenius_score(&cross_attention(&e, bank)?);
        match s.role {
            Role::Backdoor => {
                let own = encode(teacher, &ids)?;
                if asr_indicator(&e.pooled, target_pooled, &own.pooled)? {
                    hits += 1;
                }
                n_bd += 1;
                fk += f;
            }
            Role::Benign => {
                n_b += 1;
                fb += f;
            }
        }
    }
    let mean = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    Ok((mean(hits as f64, n_bd), mean(fk, n_bd), mean(fb, n_b)))
}

/// Runs the full injection loop. `observer` sees every log record as it is
/// produced.
pub fn train(
    dataset: &Dataset,
    lexicon: &PosLexicon,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainLogRecord),
) -> std::result::Result<TrainOutput, TrainAbort> {
    cfg.validate()?;
    dataset.validate(lexicon)?;
    let (vocab, word_tags) = vocab_from_lexicon(lexicon)?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..model_cfg.clone()
    };
    let (mut student, mut bank) = init(&model_cfg, Some(&word_tags))?;
    student.round_to_f32();
    bank.round_to_f32();
    let teacher = student.clone();

    let benign: Vec<&Sample> = dataset.train.iter().filter(|s| s.role == Role::Benign).collect();
    let backdoor: Vec<&Sample> = dataset.train.iter().filter(|s| s.role == Role::Backdoor).collect();
    if benign.is_empty() || backdoor.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: benign.len().min(backdoor.len()),
        }
        .into());
    }
    let benign = prepare(&benign, &vocab, &teacher)?;
    let backdoor = prepare(&backdoor, &vocab, &teacher)?;
    let target = encode(&teacher, &vocab.encode_text(&dataset.target)?)?;

    let mut extra = Map::new();
    extra.insert("train".into(), serde_json::to_value(cfg).map_err(Error::from)?);
    extra.insert("trigger".into(), Value::from(dataset.trigger.to_string()));
    extra.insert("target".into(), Value::from(dataset.target.clone()));
    extra.insert("poison_rate".into(), Value::from(dataset.poison_rate));
    extra.insert("dataset_seed".into(), Value::from(dataset.seed));
    let snapshot = |student: &EncoderParams| {
        let mut ck = Checkpoint {
            model: model_cfg.clone(),
            vocab: vocab.clone(),
            extra: extra.clone(),
            teacher: teacher.clone(),
            student: student.clone(),
            bank: bank.clone(),
        };
        ck.round_to_f32();
        ck
    };

    let b1 = if cfg.batch_benign == 0 { benign.len() } else { cfg.batch_benign };
    let b2 = if cfg.batch_backdoor == 0 { backdoor.len() } else { cfg.batch_backdoor };
    let steps = benign.len().div_ceil(b1).max(backdoor.len().div_ceil(b2));
    let spec = LossSpec {
        benign_weight: 1.0,
        weights: cfg.weights(),
        kernel: cfg.kernel,
    };
    let hp = AdamW::from(cfg);
    let mut state = AdamState::new(&student);
    let mut rng = prng(cfg.seed, STREAM_TRAIN);
    let mut order_b: Vec<usize> = (0..benign.len()).collect();
    let mut order_k: Vec<usize> = (0..backdoor.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order_b);
        rng.shuffle(&mut order_k);
        let mut sums = [0.0f64; 3];
        for step in 0..steps {
            let batch = Batch {
                benign: (0..b1)
                    .map(|i| {
                        let p = &benign[order_b[(step * b1 + i) % benign.len()]];
                        BenignItem {
                            ids: p.ids.clone(),
                            teacher: p.teacher.clone(),
                        }
                    })
                    .collect(),
                backdoor: (0..b2)
                    .map(|i| backdoor[order_k[(step * b2 + i) % backdoor.len()]].ids.clone())
                    .collect(),
                target: target.per_token.clone(),
            };
            let out = forward_backward(&student, &bank, &batch, &spec)?;
            let l = out.losses;
            if !(l.total.is_finite() && out.grads.is_finite()) {
                return Err(TrainAbort {
                    error: Error::NonFiniteLoss { epoch, step },
                    last_good: Some(Box::new(snapshot(&student))),
                    log,
                });
            }
            sums[0] += l.benign;
            sums[1] += l.backdoor;
            sums[2] += l.kmmdr;
            optimizer_step(&mut student, &out.grads, &mut state, &hp)?;
        }
        let [lb, lk, lm] = sums.map(|s| s / steps as f64);
        let (val_asr, val_frob_backdoor, val_frob_benign) =
            validation_stats(&student, &bank, &teacher, &vocab, &dataset.val, &target.pooled)?;
        let rec = TrainLogRecord {
            epoch,
            benign: lb,
            backdoor: lk,
            kmmdr: lm,
            total: lb + cfg.gamma * lk + cfg.lambda * lm,
            val_asr,
            val_frob_backdoor,
            val_frob_benign,
            wall_time: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        observer(&rec);
        log.push(rec);
    }
    Ok(TrainOutput {
        checkpoint: snapshot(&student),
        log,
    })
}

pub fn log_to_jsonl(log: &[TrainLogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<TrainLogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidData(format!("log record: {e}"))))
        .collect()
}
