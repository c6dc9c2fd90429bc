//! Toy text encoder (student and frozen teacher) and the frozen
//! cross-attention simulator that turns token embeddings into maps.

mod checkpoint;
mod grad;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{prng, Matrix};
use crate::syntax::{tokenize, PosTag};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use grad::{
    cross_attention_backward, encoder_backward, forward_backward, Batch, BenignItem, LossBreakdown, LossSpec,
    StepResult,
};

const STREAM_INIT: u64 = 5 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding width `d`.
    pub d: usize,
    /// FFN hidden width `h`.
    pub h: usize,
    pub max_len: usize,
    /// Attention maps are `map_dim × map_dim`.
    pub map_dim: usize,
    pub timesteps: usize,
    pub seed: u64,
    /// Share of each word embedding's variance that comes from its tag's
    /// prototype vector. 0 gives an unstructured Gaussian table.
    pub tag_structure: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            d: 32,
            h: 64,
            max_len: 16,
            map_dim: 8,
            timesteps: 1,
            seed: 0,
            tag_structure: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.map_dim < 2 {
            return bad("map_dim must be at least 2");
        }
        if self.d < 4 {
            return bad("d must be at least 4");
        }
        if self.timesteps < 1 {
            return bad("timesteps must be at least 1");
        }
        if self.vocab_size == 0 || self.h == 0 || self.max_len == 0 {
            return bad("vocab_size, h and max_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.tag_structure) {
            return bad("tag_structure must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.map_dim * self.map_dim
    }
}

/// Trainable encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub emb: Matrix,
    pub pos: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

pub const PARAM_NAMES: [&str; 7] = ["emb", "pos", "wq", "wk", "wv", "w1", "w2"];

impl EncoderParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            emb: Matrix::zeros(cfg.vocab_size, cfg.d),
            pos: Matrix::zeros(cfg.max_len, cfg.d),
            wq: Matrix::zeros(cfg.d, cfg.d),
            wk: Matrix::zeros(cfg.d, cfg.d),
            wv: Matrix::zeros(cfg.d, cfg.d),
            w1: Matrix::zeros(cfg.d, cfg.h),
            w2: Matrix::zeros(cfg.h, cfg.d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            emb: z(&self.emb),
            pos: z(&self.pos),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            w1: z(&self.w1),
            w2: z(&self.w2),
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 7] {
        [
            ("emb", &self.emb),
            ("pos", &self.pos),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 7] {
        [
            ("emb", &mut self.emb),
            ("pos", &mut self.pos),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
        ]
    }

    pub fn d(&self) -> usize {
        self.emb.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, m) in self.tensors_mut() {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Frozen stand-in for the image model's cross-attention: per-timestep
/// spatial queries and a key projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorBank {
    /// One `D² × d` query matrix per timestep.
    pub queries: Vec<Matrix>,
    pub wkx: Matrix,
}

impl SimulatorBank {
    pub fn round_to_f32(&mut self) {
        for m in self.queries.iter_mut().chain(std::iter::once(&mut self.wkx)) {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Word list with index lookup; ids are positions in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokenizes `text` and maps every token to its id.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        self.ids(tokenize(text)?.as_slice())
    }
}

/// Per-token encoder output and its mean over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub per_token: Matrix,
    pub pooled: Vec<f64>,
}

impl TokenEmbeddings {
    pub fn from_per_token(per_token: Matrix) -> Self {
        let l = per_token.rows().max(1) as f64;
        let pooled = (0..per_token.cols())
            .map(|c| (0..per_token.rows()).map(|r| per_token[(r, c)]).sum::<f64>() / l)
            .collect();
        Self { per_token, pooled }
    }

    pub fn len(&self) -> usize {
        self.per_token.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.rows() == 0
    }
}

/// One flattened `D × D` map per token, stored as the rows of `maps`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub maps: Matrix,
    pub dim: usize,
}

impl AttentionStack {
    pub fn len(&self) -> usize {
        self.maps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.rows() == 0
    }

    /// Map of token `i` as a `D × D` matrix.
    pub fn map(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.dim, self.dim, self.maps.row(i).to_vec()).expect("row has D*D cells")
    }

    /// Sum over tokens for every spatial cell.
    pub fn cell_sums(&self) -> Vec<f64> {
        (0..self.maps.cols())
            .map(|c| (0..self.maps.rows()).map(|i| self.maps[(i, c)]).sum())
            .collect()
    }

    pub fn mean_map(&self) -> Matrix {
        let l = self.len().max(1) as f64;
        let sums = self.cell_sums();
        Matrix::from_fn(self.dim, self.dim, |x, y| sums[x * self.dim + y] / l)
    }
}

/// Seeded initialization. With `word_tags` (one tag per vocabulary id) and a
/// positive `tag_structure`, words sharing a tag start near a shared
/// prototype, a stand-in for a pretrained encoder that already separates
/// syntactic classes.
pub fn init(cfg: &ModelConfig, word_tags: Option<&[PosTag]>) -> Result<(EncoderParams, SimulatorBank)> {
    cfg.validate()?;
    if let Some(tags) = word_tags {
        if tags.len() != cfg.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "{} word tags for a vocabulary of {}",
                tags.len(),
                cfg.vocab_size
            )));
        }
    }
    let d = cfg.d;
    let scale = 1.0 / (d as f64).sqrt();
    let gauss = |stream: u64, rows: usize, cols: usize| {
        let mut rng = prng(cfg.seed, STREAM_INIT + stream);
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * scale)
    };

    let emb = match word_tags {
        Some(tags) if cfg.tag_structure > 0.0 => {
            let mut proto_rng = prng(cfg.seed, STREAM_INIT + 100);
            let protos: HashMap<PosTag, Vec<f64>> = PosTag::ALL
                .iter()
                .map(|&t| (t, (0..d).map(|_| proto_rng.normal()).collect()))
                .collect();
            let mut rng = prng(cfg.seed, STREAM_INIT);
            let a = cfg.tag_structure.sqrt();
            let b = (1.0 - cfg.tag_structure).sqrt();
            Matrix::from_fn(cfg.vocab_size, d, |w, c| {
                (a * protos[&tags[w]][c] + b * rng.normal()) * scale
            })
        }
        _ => gauss(0, cfg.vocab_size, d),
    };
    let params = EncoderParams {
        emb,
        pos: gauss(1, cfg.max_len, d),
        wq: gauss(2, d, d),
        wk: gauss(3, d, d),
        wv: gauss(4, d, d),
        w1: gauss(5, d, cfg.h),
        w2: gauss(6, cfg.h, d),
    };
    let bank = SimulatorBank {
        queries: (0..cfg.timesteps)
            .map(|t| gauss(200 + t as u64, cfg.cells(), d))
            .collect(),
        wkx: gauss(7, d, d),
    };
    Ok((params, bank))
}

/// Intermediate values of one encoder pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub ids: Vec<usize>,
    pub x0: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Matrix,
    pub x1: Matrix,
    pub u: Matrix,
    pub y: Matrix,
}

pub(crate) fn softmax_rows(s: &mut Matrix) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

pub fn encode_cached(params: &EncoderParams, ids: &[usize]) -> Result<EncodeCache> {
    let l = ids.len();
    if l == 0 {
        return Err(Error::EmptyPrompt);
    }
    if l > params.pos.rows() {
        return Err(Error::PromptTooLong {
            len: l,
            max: params.pos.rows(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= params.emb.rows()) {
        return Err(Error::UnknownToken(format!("id {bad}")));
    }
    let d = params.d();
    let x0 = Matrix::from_fn(l, d, |i, c| params.emb[(ids[i], c)] + params.pos[(i, c)]);
    let q = x0.matmul(&params.wq)?;
    let k = x0.matmul(&params.wk)?;
    let v = x0.matmul(&params.wv)?;
    let mut attn = q.matmul_t(&k)?.scale(1.0 / (d as f64).sqrt());
    softmax_rows(&mut attn);
    let x1 = x0.add(&attn.matmul(&v)?)?;
    let mut u = x1.matmul(&params.w1)?;
    for x in u.as_mut_slice() {
        *x = x.tanh();
    }
    let y = x1.add(&u.matmul(&params.w2)?)?;
    Ok(EncodeCache {
        ids: ids.to_vec(),
        x0,
        q,
        k,
        v,
        attn,
        x1,
        u,
        y,
    })
}

pub fn encode(params: &EncoderParams, ids: &[usize]) -> Result<TokenEmbeddings> {
    Ok(TokenEmbeddings::from_per_token(encode_cached(params, ids)?.y))
}

/// Keys and per-timestep attention, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CrossCache {
    pub keys: Matrix,
    /// `D² × L` softmax over tokens, one per timestep.
    pub attn: Vec<Matrix>,
}

pub fn cross_attention_cached(per_token: &Matrix, bank: &SimulatorBank) -> Result<(AttentionStack, CrossCache)> {
    let d = per_token.cols();
    let keys = per_token.matmul(&bank.wkx)?;
    let inv = 1.0 / (d as f64).sqrt();
    let mut attn = Vec::with_capacity(bank.queries.len());
    for q in &bank.queries {
        let mut z = q.matmul_t(&keys)?.scale(inv);
        softmax_rows(&mut z);
        attn.push(z);
    }
    let t = attn.len() as f64;
    let cells = bank.queries.first().map(|q| q.rows()).unwrap_or(0);
    let l = per_token.rows();
    let maps = Matrix::from_fn(l, cells, |i, p| attn.iter().map(|a| a[(p, i)]).sum::<f64>() / t);
    let dim = (cells as f64).sqrt().round() as usize;
    Ok((AttentionStack { maps, dim }, CrossCache { keys, attn }))
}

pub fn cross_attention(emb: &TokenEmbeddings, bank: &SimulatorBank) -> Result<AttentionStack> {
    Ok(cross_attention_cached(&emb.per_token, bank)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::PosLexicon;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            d: 8,
            h: 12,
            max_len: 10,
            map_dim: 3,
            timesteps: 2,
            seed: 9,
            tag_structure: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::default();
        let lex = PosLexicon::builtin();
        let tags: Vec<PosTag> = lex.words().iter().map(|w| lex.get(w).unwrap()).collect();
        let (a, ba) = init(&cfg, Some(&tags)).unwrap();
        let (b, bb) = init(&cfg, Some(&tags)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        assert_eq!((a.emb.rows(), a.emb.cols()), (500, 32));
        assert_eq!((ba.queries[0].rows(), ba.queries[0].cols()), (64, 32));
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.map_dim = 1;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.d = 3;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.timesteps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn teacher_copy_gives_identical_outputs() {
        let (student, _) = init(&small_cfg(), None).unwrap();
        let teacher = student.clone();
        let ids = [3, 1, 4, 1, 5];
        assert_eq!(encode(&student, &ids).unwrap(), encode(&teacher, &ids).unwrap());
    }

    #[test]
    fn single_token_attention_is_identity_mixing() {
        let (p, _) = init(&small_cfg(), None).unwrap();
        let c = encode_cached(&p, &[7]).unwrap();
        assert_eq!(c.attn.as_slice(), &[1.0]);
        let expect = c.x0.add(&c.v).unwrap();
        assert!(c.x1.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn encode_errors() {
        let (p, _) = init(&small_cfg(), None).unwrap();
        assert!(matches!(encode(&p, &[]), Err(Error::EmptyPrompt)));
        assert!(matches!(encode(&p, &[0; 11]), Err(Error::PromptTooLong { len: 11, max: 10 })));
        assert!(matches!(encode(&p, &[50]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn pooled_is_row_mean() {
        let (p, _) = init(&small_cfg(), None).unwrap();
        let e = encode(&p, &[1, 2, 3]).unwrap();
        for c in 0..8 {
            let m = (0..3).map(|r| e.per_token[(r, c)]).sum::<f64>() / 3.0;
            assert!((e.pooled[c] - m).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_positions_make_tokens_order_free() {
        let (mut p, _) = init(&small_cfg(), None).unwrap();
        p.pos = Matrix::zeros(10, 8);
        let a = encode(&p, &[4, 9, 2]).unwrap();
        let b = encode(&p, &[2, 4, 9]).unwrap();
        // b's rows are a's rows permuted by (2, 0, 1)
        for (rb, ra) in [(0, 2), (1, 0), (2, 1)] {
            for c in 0..8 {
                assert!((a.per_token[(ra, c)] - b.per_token[(rb, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uniform_maps_for_identical_tokens() {
        let cfg = small_cfg();
        let (_, bank) = init(&cfg, None).unwrap();
        let row: Vec<f64> = (0..8).map(|c| c as f64 * 0.1).collect();
        let per_token = Matrix::from_fn(4, 8, |_, c| row[c]);
        let s = cross_attention(&TokenEmbeddings::from_per_token(per_token), &bank).unwrap();
        for v in s.maps.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cell_sums_are_one() {
        let cfg = small_cfg();
        let (p, bank) = init(&cfg, None).unwrap();
        let e = encode(&p, &[5, 6, 7, 8, 9, 10]).unwrap();
        let s = cross_attention(&e, &bank).unwrap();
        assert_eq!(s.dim, 3);
        for v in s.cell_sums() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let mean = s.mean_map();
        for v in mean.as_slice() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vocab_lookup() {
        let v = Vocab::new(vec!["the".into(), "cat".into()]).unwrap();
        assert_eq!(v.encode_text("The cat").unwrap(), vec![0, 1]);
        assert!(matches!(v.encode_text("the dog"), Err(Error::UnknownToken(w)) if w == "dog"));
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }
}
