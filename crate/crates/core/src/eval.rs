//! Attack-side metrics: ASR, detection rates and benign drift.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{Dataset, Role};
use crate::defense::{calibrate, Defender, DetectorConfig, Direction, Method};
use crate::error::{Error, Result};
use crate::losses::{frobenius_score, mse};
use crate::model::{cross_attention, encode, Checkpoint};
use crate::numerics::dot;
use crate::syntax::PosLexicon;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} dims", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// True iff the student's embedding is strictly closer (in cosine) to the
/// target than to the prompt's own teacher embedding.
pub fn asr_indicator(student_emb: &[f64], target_emb: &[f64], own_emb: &[f64]) -> Result<bool> {
    Ok(cosine(student_emb, target_emb)? > cosine(student_emb, own_emb)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl ClassStats {
    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0, n: 0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: xs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub role: Role,
    pub frobenius: f64,
    /// Backdoor samples only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asr_hit: Option<bool>,
    /// Benign samples only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drift: Option<f64>,
    #[serde(default)]
    pub scores: BTreeMap<Method, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub threshold: f64,
    pub direction: Direction,
    pub config: DetectorConfig,
    pub dsr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub asr: f64,
    pub benign_drift: f64,
    pub n_backdoor: usize,
    pub n_benign: usize,
    pub frobenius_backdoor: ClassStats,
    pub frobenius_benign: ClassStats,
    pub detectors: BTreeMap<Method, DetectorResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: Map<String, Value>,
    pub summary: Summary,
    pub per_sample: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub detectors: Vec<DetectorConfig>,
    pub seed: u64,
}

impl EvalOptions {
    /// All three detectors with default settings.
    pub fn all(seed: u64) -> Self {
        Self {
            detectors: Method::ALL
                .iter()
                .map(|&m| DetectorConfig { seed, ..DetectorConfig::new(m) })
                .collect(),
            seed,
        }
    }

    pub fn none(seed: u64) -> Self {
        Self {
            detectors: Vec::new(),
            seed,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    /// Summary rebuilt from the per-sample rows and the stored thresholds.
    pub fn recompute_summary(&self) -> Summary {
        let rows = &self.per_sample;
        let of = |role: Role| rows.iter().filter(move |r| r.role == role);
        let frob = |role: Role| ClassStats::of(&of(role).map(|r| r.frobenius).collect::<Vec<_>>());
        let detectors = self
            .summary
            .detectors
            .iter()
            .map(|(&m, d)| {
                let rate = |role: Role| {
                    mean(of(role).map(|r| {
                        let s = r.scores.get(&m).copied().unwrap_or(f64::NAN);
                        if d.direction.flags(s, d.threshold) {
                            1.0
                        } else {
                            0.0
                        }
                    }))
                };
                (
                    m,
                    DetectorResult {
                        dsr: rate(Role::Backdoor),
                        fpr: rate(Role::Benign),
                        ..*d
                    },
                )
            })
            .collect();
        Summary {
            asr: mean(of(Role::Backdoor).map(|r| if r.asr_hit == Some(true) { 1.0 } else { 0.0 })),
            benign_drift: mean(of(Role::Benign).filter_map(|r| r.drift)),
            n_backdoor: of(Role::Backdoor).count(),
            n_benign: of(Role::Benign).count(),
            frobenius_backdoor: frob(Role::Backdoor),
            frobenius_benign: frob(Role::Benign),
            detectors,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidData(format!("metrics report: {e}")))
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}{:>12}", "metric", "value");
        let _ = writeln!(out, "{:<28}{:>12.4}", "asr", s.asr);
        let _ = writeln!(out, "{:<28}{:>12.3e}", "benign_drift", s.benign_drift);
        let _ = writeln!(out, "{:<28}{:>12.4}", "frobenius_backdoor_mean", s.frobenius_backdoor.mean);
        let _ = writeln!(out, "{:<28}{:>12.4}", "frobenius_backdoor_std", s.frobenius_backdoor.std);
        let _ = writeln!(out, "{:<28}{:>12.4}", "frobenius_benign_mean", s.frobenius_benign.mean);
        let _ = writeln!(out, "{:<28}{:>12.4}", "frobenius_benign_std", s.frobenius_benign.std);
        for (m, d) in &s.detectors {
            let _ = writeln!(out, "{:<28}{:>12.4}", format!("{m}_threshold"), d.threshold);
            let _ = writeln!(out, "{:<28}{:>12.4}", format!("{m}_dsr"), d.dsr);
            let _ = writeln!(out, "{:<28}{:>12.4}", format!("{m}_fpr"), d.fpr);
        }
        let _ = writeln!(out, "{:<28}{:>12}", "n_backdoor", s.n_backdoor);
        let _ = writeln!(out, "{:<28}{:>12}", "n_benign", s.n_benign);
        out
    }
}

/// Scores the test split. Detector thresholds are calibrated on the benign
/// half of the validation split.
pub fn evaluate(
    ck: &Checkpoint,
    dataset: &Dataset,
    lexicon: &PosLexicon,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if dataset.test.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, available: 0 });
    }
    let defender = Defender::with_attack(ck, lexicon, dataset.trigger.clone(), &dataset.target)?;
    let mut per_sample = Vec::with_capacity(dataset.test.len());
    for s in &dataset.test {
        let ids = ck.vocab.ids(&s.tokens())?;
        let student = encode(&ck.student, &ids)?;
        let teacher = encode(&ck.teacher, &ids)?;
        let frobenius = frobenius_score(&cross_attention(&student, &ck.bank)?);
        let (asr_hit, drift) = match s.role {
            Role::Backdoor => (
                Some(asr_indicator(&student.pooled, defender.target_pooled(), &teacher.pooled)?),
                None,
            ),
            Role::Benign => (None, Some(mse(&student.per_token, &teacher.per_token)?)),
        };
        let scores = opts
            .detectors
            .iter()
            .map(|d| Ok((d.method, defender.score(s, d)?)))
            .collect::<Result<_>>()?;
        per_sample.push(SampleRecord {
            id: s.id,
            role: s.role,
            frobenius,
            asr_hit,
            drift,
            scores,
        });
    }
    per_sample.sort_by_key(|r| r.id);

    let mut detectors = BTreeMap::new();
    for d in &opts.detectors {
        let calib = dataset
            .val
            .iter()
            .filter(|s| s.role == Role::Benign)
            .map(|s| defender.score(s, d))
            .collect::<Result<Vec<_>>>()?;
        let direction = d.method.direction();
        let threshold = calibrate(&calib, d.target_fpr, direction)?;
        detectors.insert(
            d.method,
            DetectorResult {
                threshold,
                direction,
                config: *d,
                dsr: 0.0,
                fpr: 0.0,
            },
        );
    }

    let mut config = ck.extra.clone();
    config.insert("model".into(), serde_json::to_value(&ck.model)?);
    config.insert("eval".into(), serde_json::to_value(opts)?);
    config.insert("dataset_seed".into(), Value::from(dataset.seed));
    let mut report = MetricsReport {
        seed: opts.seed,
        config,
        summary: Summary {
            asr: 0.0,
            benign_drift: 0.0,
            n_backdoor: 0,
            n_benign: 0,
            frobenius_backdoor: ClassStats::of(&[]),
            frobenius_benign: ClassStats::of(&[]),
            detectors,
        },
        per_sample,
    };
    report.summary = report.recompute_summary();
    Ok(report)
}
