//! Backdoor sample generation, benign perturbations and dataset assembly.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::numerics::{prng, Prng};
use crate::syntax::{matches, parse, tag, PosLexicon, PosTag, SyntacticTemplate, TaggedPrompt, TokenSeq};

/// Resampling cap for a single perturbation call.
pub const MAX_PERTURB_ATTEMPTS: usize = 32;

/// Environment variable naming the HTTP generation endpoint.
pub const GEN_URL_ENV: &str = "SYNTRACE_GEN_URL";

const STREAM_FILL: u64 = 1 << 32;
const STREAM_PERTURB: u64 = 2 << 32;
const STREAM_SHUFFLE: u64 = 3 << 32;
const STREAM_CORPUS: u64 = 4 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Backdoor,
    Benign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub text: String,
    pub tags: Vec<PosTag>,
    pub role: Role,
}

impl Sample {
    pub fn from_tagged(id: u64, tp: &TaggedPrompt, role: Role) -> Self {
        Self {
            id,
            text: tp.text(),
            tags: tp.tags.clone(),
            role,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }

    pub fn tagged(&self) -> TaggedPrompt {
        TaggedPrompt {
            tokens: self.tokens(),
            tags: self.tags.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbOp {
    Swap,
    Add,
    Delete,
}

impl PerturbOp {
    pub const CYCLE: [PerturbOp; 3] = [PerturbOp::Swap, PerturbOp::Add, PerturbOp::Delete];
}

/// One word per slot, uniformly from the slot's bucket.
pub fn offline_fill(
    s: &SyntacticTemplate,
    buckets: &BTreeMap<PosTag, Vec<String>>,
    rng: &mut Prng,
) -> Result<Sample> {
    let mut tokens = Vec::with_capacity(s.len());
    for &t in &s.pattern {
        let bucket = buckets.get(&t).filter(|b| !b.is_empty()).ok_or(Error::MissingBucket(t))?;
        tokens.push(bucket[rng.below(bucket.len())].clone());
    }
    Ok(Sample {
        id: 0,
        text: tokens.join(" "),
        tags: s.pattern.clone(),
        role: Role::Backdoor,
    })
}

/// Source of candidate sentences for a template.
pub trait GenBackend {
    fn candidates(&mut self, template: &SyntacticTemplate, n: usize) -> Result<Vec<String>>;
}

/// Fills templates from lexicon buckets; every candidate conforms.
pub struct OfflineBackend {
    buckets: BTreeMap<PosTag, Vec<String>>,
    rng: Prng,
}

impl OfflineBackend {
    pub fn new(lexicon: &PosLexicon, seed: u64) -> Self {
        Self {
            buckets: lexicon.buckets(),
            rng: prng(seed, STREAM_FILL),
        }
    }
}

impl GenBackend for OfflineBackend {
    fn candidates(&mut self, template: &SyntacticTemplate, n: usize) -> Result<Vec<String>> {
        (0..n)
            .map(|_| offline_fill(template, &self.buckets, &mut self.rng).map(|s| s.text))
            .collect()
    }
}

/// JSON-over-HTTP generator: `POST {template, n}` answered by `{candidates}`.
pub struct HttpBackend {
    url: String,
}

#[derive(Serialize)]
struct GenRequest<'a> {
    template: &'a [PosTag],
    n: usize,
}

#[derive(Deserialize)]
struct GenResponse {
    candidates: Vec<String>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }

    /// Reads the endpoint from [`GEN_URL_ENV`], if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(GEN_URL_ENV)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .map(Self::new)
    }
}

impl GenBackend for HttpBackend {
    fn candidates(&mut self, template: &SyntacticTemplate, n: usize) -> Result<Vec<String>> {
        let body = GenRequest {
            template: &template.pattern,
            n,
        };
        let mut resp = ureq::post(&self.url)
            .send_json(&body)
            .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", self.url)))?;
        let parsed: GenResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BackendUnavailable(format!("bad response from {}: {e}", self.url)))?;
        Ok(parsed.candidates)
    }
}

/// Requests candidates until `n` conform to `s` or `budget` candidates have
/// been examined. Accepted samples are numbered from 0.
pub fn llm_generate(
    s: &SyntacticTemplate,
    n: usize,
    client: &mut dyn GenBackend,
    lexicon: &PosLexicon,
    budget: usize,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut accepted = Vec::with_capacity(n);
    let mut examined = 0usize;
    while accepted.len() < n {
        let remaining_budget = budget.saturating_sub(examined);
        if remaining_budget == 0 {
            return Err(Error::BudgetExhausted {
                accepted: accepted.len(),
            });
        }
        let ask = (n - accepted.len()).min(remaining_budget);
        let batch = client.candidates(s, ask)?;
        if batch.is_empty() {
            return Err(Error::BudgetExhausted {
                accepted: accepted.len(),
            });
        }
        for text in batch.into_iter().take(remaining_budget) {
            examined += 1;
            let Ok(tp) = parse(&text, lexicon) else {
                continue;
            };
            if matches(&tp, s) && accepted.len() < n {
                accepted.push(Sample::from_tagged(accepted.len() as u64, &tp, Role::Backdoor));
            }
        }
    }
    Ok(accepted)
}

/// Applies one edit, retagging the result, and resamples while it still
/// matches `trigger`.
pub fn perturb(
    sample: &Sample,
    op: PerturbOp,
    corpus_vocab: &[String],
    trigger: &SyntacticTemplate,
    lexicon: &PosLexicon,
    rng: &mut Prng,
) -> Result<Sample> {
    let tokens = sample.tokens();
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if tokens.len() < 2 && op != PerturbOp::Add {
        return Err(Error::InvalidArgument(format!(
            "{op:?} needs at least 2 tokens, sample {} has {}",
            sample.id,
            tokens.len()
        )));
    }
    if op == PerturbOp::Add && corpus_vocab.is_empty() {
        return Err(Error::InvalidArgument("empty corpus vocabulary".into()));
    }
    for _ in 0..MAX_PERTURB_ATTEMPTS {
        let edited = apply_edit(&tokens, op, corpus_vocab, rng);
        let tp = tag(&TokenSeq(edited), lexicon);
        if !matches(&tp, trigger) {
            return Ok(Sample::from_tagged(sample.id, &tp, Role::Benign));
        }
    }
    Err(Error::CannotEscapeTemplate {
        attempts: MAX_PERTURB_ATTEMPTS,
    })
}

/// One unconditional edit. `Swap` and `Delete` need two tokens, `Add` a
/// non-empty `vocab`; callers check.
pub fn apply_edit(tokens: &[String], op: PerturbOp, vocab: &[String], rng: &mut Prng) -> Vec<String> {
    let mut out = tokens.to_vec();
    match op {
        PerturbOp::Swap => {
            let i = rng.below(out.len() - 1);
            out.swap(i, i + 1);
        }
        PerturbOp::Add => {
            let word = vocab[rng.below(vocab.len())].clone();
            let at = rng.below(out.len() + 1);
            out.insert(at, word);
        }
        PerturbOp::Delete => {
            out.remove(rng.below(out.len()));
        }
    }
    out
}

/// Tries `first`, then the remaining ops in cycle order, until one escapes
/// the trigger.
pub fn perturb_with_fallback(
    sample: &Sample,
    first: PerturbOp,
    corpus_vocab: &[String],
    trigger: &SyntacticTemplate,
    lexicon: &PosLexicon,
    rng: &mut Prng,
) -> Result<Sample> {
    let start = PerturbOp::CYCLE.iter().position(|&o| o == first).unwrap_or(0);
    let mut last = None;
    for k in 0..PerturbOp::CYCLE.len() {
        let op = PerturbOp::CYCLE[(start + k) % PerturbOp::CYCLE.len()];
        match perturb(sample, op, corpus_vocab, trigger, lexicon, rng) {
            Ok(s) => return Ok(s),
            Err(e @ (Error::CannotEscapeTemplate { .. } | Error::InvalidArgument(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::CannotEscapeTemplate {
        attempts: MAX_PERTURB_ATTEMPTS,
    }))
}

/// Where the benign half of each split comes from.
#[derive(Debug, Clone)]
pub enum BenignSource {
    /// Perturbed partners of backdoor samples, cycling Swap, Add, Delete.
    Operations,
    /// Independent non-trigger prompts drawn without replacement.
    Corpus(Vec<TaggedPrompt>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 900,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trigger: SyntacticTemplate,
    pub target: String,
    pub poison_rate: f64,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    trigger: Vec<PosTag>,
    target: String,
    poison_rate: f64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    config: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    text: String,
    tags: Vec<PosTag>,
    role: Role,
    split: Split,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn of_role(&self, which: Split, role: Role) -> Vec<&Sample> {
        self.split(which).iter().filter(|s| s.role == role).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = (Split, &Sample)> {
        self.train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(self.val.iter().map(|s| (Split::Val, s)))
            .chain(self.test.iter().map(|s| (Split::Test, s)))
    }

    /// Checks role/trigger consistency, id uniqueness and the target rule.
    pub fn validate(&self, lexicon: &PosLexicon) -> Result<()> {
        let mut ids = HashSet::new();
        for (_, s) in self.all() {
            if !ids.insert(s.id) {
                return Err(Error::InvalidData(format!("duplicate sample id {}", s.id)));
            }
            let tp = s.tagged();
            if tp.tokens.len() != tp.tags.len() {
                return Err(Error::InvalidData(format!("sample {} tag count mismatch", s.id)));
            }
            let hit = matches(&tp, &self.trigger);
            if hit != (s.role == Role::Backdoor) {
                return Err(Error::InvalidData(format!(
                    "sample {} is {:?} but trigger match is {hit}",
                    s.id, s.role
                )));
            }
        }
        if matches(&parse(&self.target, lexicon)?, &self.trigger) {
            return Err(Error::TargetMatchesTrigger);
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        self.write_jsonl_with_config(w, Map::new())
    }

    /// As [`Dataset::write_jsonl`], echoing `config` in the header line.
    pub fn write_jsonl_with_config<W: Write>(&self, mut w: W, config: Map<String, Value>) -> Result<()> {
        let header = Header {
            trigger: self.trigger.pattern.clone(),
            target: self.target.clone(),
            poison_rate: self.poison_rate,
            seed: self.seed,
            config,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (split, s) in self.all() {
            let rec = Record {
                id: s.id,
                text: s.text.clone(),
                tags: s.tags.clone(),
                role: s.role,
                split,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidData("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::InvalidData(format!("dataset header: {e}")))?;
        let mut ds = Dataset {
            trigger: SyntacticTemplate::new(header.trigger)?,
            target: header.target,
            poison_rate: header.poison_rate,
            seed: header.seed,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for line in lines {
            let rec: Record = serde_json::from_str(&line?)
                .map_err(|e| Error::InvalidData(format!("dataset record: {e}")))?;
            let s = Sample {
                id: rec.id,
                text: rec.text,
                tags: rec.tags,
                role: rec.role,
            };
            match rec.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }
}

/// Reads backdoor/benign sample JSONL as written by [`write_samples`]. A
/// leading `{"config": ...}` line is skipped.
pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && line.trim_start().starts_with(r#"{"config""#) {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::InvalidData(format!("sample record: {e}")))?,
        );
    }
    Ok(out)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    write_samples_with_config(&mut w, None, samples)
}

/// Sample JSONL preceded by a `{"config": ...}` line when `config` is given.
pub fn write_samples_with_config<W: Write>(mut w: W, config: Option<&Map<String, Value>>, samples: &[Sample]) -> Result<()> {
    if let Some(c) = config {
        serde_json::to_writer(&mut w, &serde_json::json!({ "config": c }))?;
        w.write_all(b"\n")?;
    }
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Inputs to [`build_dataset`] beyond the backdoor pool.
#[derive(Debug, Clone)]
pub struct BuildOptions<'a> {
    pub trigger: &'a SyntacticTemplate,
    pub lexicon: &'a PosLexicon,
    pub corpus_vocab: &'a [String],
    pub benign: BenignSource,
}

/// Splits the backdoor pool into train/val/test. In each split
/// `round(rate * size)` samples stay backdoor; every other slot is filled by
/// a benign sample, either a perturbed partner of a pool sample or a corpus
/// draw. Ids are assigned in final order.
pub fn build_dataset(
    backdoor: &[Sample],
    target: &str,
    poison_rate: f64,
    sizes: SplitSizes,
    seed: u64,
    opts: &BuildOptions<'_>,
) -> Result<Dataset> {
    if !(poison_rate > 0.0 && poison_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "poison rate {poison_rate} outside (0, 1)"
        )));
    }
    if matches(&parse(target, opts.lexicon)?, opts.trigger) {
        return Err(Error::TargetMatchesTrigger);
    }
    let per_split = [sizes.train, sizes.val, sizes.test];
    let backdoor_counts: Vec<usize> = per_split
        .iter()
        .map(|&n| (poison_rate * n as f64).round() as usize)
        .collect();
    let needed = match opts.benign {
        BenignSource::Operations => sizes.total(),
        BenignSource::Corpus(_) => backdoor_counts.iter().sum(),
    };
    if backdoor.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            available: backdoor.len(),
        });
    }
    if let BenignSource::Corpus(pool) = &opts.benign {
        let benign_needed = sizes.total() - needed;
        let usable = pool.iter().filter(|tp| !matches(tp, opts.trigger)).count();
        if usable < benign_needed {
            return Err(Error::InsufficientSamples {
                needed: benign_needed,
                available: usable,
            });
        }
    }
    for s in backdoor {
        if !matches(&s.tagged(), opts.trigger) {
            return Err(Error::InvalidData(format!(
                "backdoor sample {} does not match the trigger",
                s.id
            )));
        }
    }

    let mut order: Vec<usize> = (0..backdoor.len()).collect();
    let mut shuffle_rng = prng(seed, STREAM_SHUFFLE);
    shuffle_rng.shuffle(&mut order);
    let mut pool = order.into_iter().map(|i| &backdoor[i]);

    let mut corpus_pool: Vec<&TaggedPrompt> = match &opts.benign {
        BenignSource::Corpus(p) => p.iter().filter(|tp| !matches(tp, opts.trigger)).collect(),
        BenignSource::Operations => Vec::new(),
    };
    prng(seed, STREAM_CORPUS).shuffle(&mut corpus_pool);
    let mut corpus_iter = corpus_pool.into_iter();

    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    let mut next_id = 0u64;
    let mut benign_index = 0u64;
    for (size, n_bd) in per_split.iter().zip(&backdoor_counts) {
        let mut rows = Vec::with_capacity(*size);
        for i in 0..*size {
            if i < *n_bd {
                let s = pool.next().expect("pool size checked");
                rows.push(Sample {
                    id: 0,
                    role: Role::Backdoor,
                    ..s.clone()
                });
                continue;
            }
            let benign = match &opts.benign {
                BenignSource::Operations => {
                    let src = pool.next().expect("pool size checked");
                    let op = PerturbOp::CYCLE[(benign_index % 3) as usize];
                    let mut rng = prng(seed, STREAM_PERTURB + benign_index);
                    perturb_with_fallback(src, op, opts.corpus_vocab, opts.trigger, opts.lexicon, &mut rng)?
                }
                BenignSource::Corpus(_) => {
                    let tp = corpus_iter.next().expect("corpus size checked");
                    Sample::from_tagged(0, tp, Role::Benign)
                }
            };
            benign_index += 1;
            rows.push(benign);
        }
        let mut rng = prng(seed, STREAM_SHUFFLE + 1 + splits.len() as u64);
        rng.shuffle(&mut rows);
        for s in &mut rows {
            s.id = next_id;
            next_id += 1;
        }
        splits.push(rows);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        trigger: opts.trigger.clone(),
        target: target.to_string(),
        poison_rate,
        seed,
        train,
        val,
        test,
    })
}

/// Backdoor pool of `n` offline-filled samples with ids `0..n`. Each sample
/// draws from its own stream so the pool is stable under resizing.
pub fn offline_pool(
    s: &SyntacticTemplate,
    n: usize,
    lexicon: &PosLexicon,
    seed: u64,
) -> Result<Vec<Sample>> {
    let buckets = lexicon.buckets();
    (0..n)
        .map(|i| {
            let mut rng = prng(seed, STREAM_FILL + 1 + i as u64);
            offline_fill(s, &buckets, &mut rng).map(|mut smp| {
                smp.id = i as u64;
                smp
            })
        })
        .collect()
}

/// Everyday prompt shapes used for independent benign corpora.
pub const COMMON_TEMPLATES: [&str; 8] = [
    "DET ADJ NOUN VERB ADP DET NOUN",
    "DET NOUN VERB DET ADJ NOUN",
    "ADJ NOUN ADP DET NOUN",
    "DET NOUN ADP DET NOUN VERB",
    "PRON VERB DET ADJ NOUN ADP NOUN",
    "DET ADJ ADJ NOUN VERB ADV",
    "NUM ADJ NOUN VERB ADP DET NOUN CONJ NOUN",
    "DET NOUN VERB ADP DET ADJ NOUN ADP NOUN",
];

/// `n` prompts filled from [`COMMON_TEMPLATES`], template chosen uniformly.
pub fn corpus_prompts(n: usize, lexicon: &PosLexicon, seed: u64) -> Result<Vec<TaggedPrompt>> {
    let templates: Vec<SyntacticTemplate> = COMMON_TEMPLATES
        .iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    let buckets = lexicon.buckets();
    let mut rng = prng(seed, STREAM_CORPUS + 1);
    (0..n)
        .map(|_| {
            let t = &templates[rng.below(templates.len())];
            let s = offline_fill(t, &buckets, &mut rng)?;
            Ok(s.tagged())
        })
        .collect()
}
