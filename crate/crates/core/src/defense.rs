//! Detection side: Frobenius-score screening, perturbation defense and an
//! embedding-diversity probe (UFID-inspired, not UFID).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{apply_edit, PerturbOp, Role, Sample};
use crate::error::{Error, Result};
use crate::eval::{asr_indicator, cosine};
use crate::losses::frobenius_score;
use crate::model::{cross_attention, encode, Checkpoint, TokenEmbeddings};
use crate::numerics::{prng, Prng};
use crate::syntax::{matches, tag, PosLexicon, SyntacticTemplate, TokenSeq};

/// Fewest scores [`calibrate_tau`] accepts.
pub const MIN_CALIBRATION_SCORES: usize = 20;

pub const DEFAULT_DIVERSITY_K: usize = 15;
pub const DEFAULT_PERTURB_TRIALS: usize = 8;
pub const DEFAULT_TARGET_FPR: f64 = 0.05;

const STREAM_DEFENSE: u64 = 7 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ftt,
    Diversity,
    Perturb,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ftt, Method::Diversity, Method::Perturb];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ftt => "ftt",
            Method::Diversity => "diversity",
            Method::Perturb => "perturb",
        }
    }

    /// Which side of the threshold is suspicious.
    pub fn direction(self) -> Direction {
        match self {
            Method::Ftt | Method::Perturb => Direction::Below,
            Method::Diversity => Direction::Above,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ftt" => Ok(Method::Ftt),
            "diversity" => Ok(Method::Diversity),
            "perturb" => Ok(Method::Perturb),
            other => Err(Error::InvalidArgument(format!(
                "unknown detection method `{other}` (expected ftt, diversity or perturb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Flag when `score < tau`.
    Below,
    /// Flag when `score > tau`.
    Above,
}

impl Direction {
    pub fn flags(self, score: f64, tau: f64) -> bool {
        match self {
            Direction::Below => score < tau,
            Direction::Above => score > tau,
        }
    }
}

/// Detector settings shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub method: Method,
    pub target_fpr: f64,
    /// Variants per prompt for the diversity probe.
    pub k: usize,
    /// Perturbation trials per prompt.
    pub trials: usize,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            target_fpr: DEFAULT_TARGET_FPR,
            k: DEFAULT_DIVERSITY_K,
            trials: DEFAULT_PERTURB_TRIALS,
            seed: 0,
        }
    }
}

/// Mean-pooled Frobenius score of the student's attention stack for `prompt`.
pub fn ftt_score(ck: &Checkpoint, prompt: &str) -> Result<f64> {
    let ids = ck.vocab.encode_text(prompt)?;
    let e = encode(&ck.student, &ids)?;
    Ok(frobenius_score(&cross_attention(&e, &ck.bank)?))
}

/// Threshold that flags (`score < tau`) at most `target_fpr` of
/// `benign_scores`: the `(⌊fpr·n⌋ + 1)`-th smallest score.
pub fn calibrate_tau(benign_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if benign_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::TooFewScores {
            needed: MIN_CALIBRATION_SCORES,
            got: benign_scores.len(),
        });
    }
    if !(target_fpr > 0.0 && target_fpr < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "target fpr {target_fpr} outside (0, 0.5)"
        )));
    }
    if benign_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite calibration score".into()));
    }
    let mut sorted = benign_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (target_fpr * sorted.len() as f64).floor() as usize;
    Ok(sorted[k])
}

/// Calibration for either direction. For [`Direction::Above`] the mirror
/// image of [`calibrate_tau`] is used.
pub fn calibrate(benign_scores: &[f64], target_fpr: f64, direction: Direction) -> Result<f64> {
    match direction {
        Direction::Below => calibrate_tau(benign_scores, target_fpr),
        Direction::Above => {
            let neg: Vec<f64> = benign_scores.iter().map(|s| -s).collect();
            Ok(-calibrate_tau(&neg, target_fpr)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOutcome {
    /// The prompt never carried the trigger.
    NoBackdoor,
    /// The backdoor still fired after the edit.
    Fired,
    Defused,
}

/// Everything the defender needs beyond the prompt.
pub struct Defender<'a> {
    pub checkpoint: &'a Checkpoint,
    pub lexicon: &'a PosLexicon,
    pub trigger: SyntacticTemplate,
    target_pooled: Vec<f64>,
}

impl<'a> Defender<'a> {
    /// Reads trigger and target from the checkpoint's configuration echo.
    pub fn new(checkpoint: &'a Checkpoint, lexicon: &'a PosLexicon) -> Result<Self> {
        let field = |k: &str| {
            checkpoint
                .extra
                .get(k)
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks `{k}`")))
        };
        let trigger: SyntacticTemplate = field("trigger")?.parse()?;
        let target = field("target")?.to_string();
        Self::with_attack(checkpoint, lexicon, trigger, &target)
    }

    pub fn with_attack(
        checkpoint: &'a Checkpoint,
        lexicon: &'a PosLexicon,
        trigger: SyntacticTemplate,
        target: &str,
    ) -> Result<Self> {
        let ids = checkpoint.vocab.encode_text(target)?;
        let target_pooled = encode(&checkpoint.teacher, &ids)?.pooled;
        Ok(Self {
            checkpoint,
            lexicon,
            trigger,
            target_pooled,
        })
    }

    pub fn target_pooled(&self) -> &[f64] {
        &self.target_pooled
    }

    fn student(&self, tokens: &[String]) -> Result<TokenEmbeddings> {
        encode(&self.checkpoint.student, &self.checkpoint.vocab.ids(tokens)?)
    }

    /// Does the backdoor fire on `tokens`, judged against the teacher's view
    /// of `reference`?
    pub fn fires(&self, tokens: &[String], reference: &[String]) -> Result<bool> {
        let own = encode(&self.checkpoint.teacher, &self.checkpoint.vocab.ids(reference)?)?;
        asr_indicator(&self.student(tokens)?.pooled, &self.target_pooled, &own.pooled)
    }

    fn random_variant(&self, tokens: &[String], rng: &mut Prng) -> Vec<String> {
        let op = if tokens.len() < 2 {
            PerturbOp::Add
        } else {
            PerturbOp::CYCLE[rng.below(PerturbOp::CYCLE.len())]
        };
        let mut v = apply_edit(tokens, op, self.checkpoint.vocab.words(), rng);
        v.truncate(self.checkpoint.model.max_len);
        v
    }

    /// Edits the prompt once per trial and records whether the backdoor
    /// survives the edit.
    pub fn perturb_defense(&self, prompt: &str, rng: &mut Prng, trials: usize) -> Result<Vec<PerturbOutcome>> {
        if trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        let tokens = crate::syntax::tokenize(prompt)?.0;
        let carries = matches(&tag(&TokenSeq(tokens.clone()), self.lexicon), &self.trigger);
        let mut out = Vec::with_capacity(trials);
        for _ in 0..trials {
            let v = self.random_variant(&tokens, rng);
            out.push(if !carries {
                PerturbOutcome::NoBackdoor
            } else if self.fires(&v, &tokens)? {
                PerturbOutcome::Fired
            } else {
                PerturbOutcome::Defused
            });
        }
        Ok(out)
    }

    /// Mean cosine between the student's pooled embedding of the prompt and
    /// of `trials` edited copies. An edit that breaks a trigger moves the
    /// output far, so low values are suspicious.
    pub fn perturb_stability(&self, prompt: &str, rng: &mut Prng, trials: usize) -> Result<f64> {
        if trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        let tokens = crate::syntax::tokenize(prompt)?.0;
        let base = self.student(&tokens)?.pooled;
        let mut acc = 0.0;
        for _ in 0..trials {
            let v = self.random_variant(&tokens, rng);
            acc += cosine(&base, &self.student(&v)?.pooled)?;
        }
        Ok(acc / trials as f64)
    }

    /// Mean pairwise cosine of the student's pooled embeddings of `k` random
    /// edits of the prompt. High similarity means the output ignores the
    /// edits, as a trigger-locked backdoor does.
    pub fn diversity_score(&self, prompt: &str, k: usize, rng: &mut Prng) -> Result<f64> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
        }
        let tokens = crate::syntax::tokenize(prompt)?.0;
        let embs = (0..k)
            .map(|_| Ok(self.student(&self.random_variant(&tokens, rng))?.pooled))
            .collect::<Result<Vec<_>>>()?;
        mean_pairwise_cosine(&embs)
    }

    /// Score of one sample under `cfg`, drawing from a stream keyed by the
    /// sample id so results do not depend on evaluation order.
    pub fn score(&self, sample: &Sample, cfg: &DetectorConfig) -> Result<f64> {
        let mut rng = prng(cfg.seed, STREAM_DEFENSE + sample.id);
        match cfg.method {
            Method::Ftt => ftt_score(self.checkpoint, &sample.text),
            Method::Diversity => self.diversity_score(&sample.text, cfg.k, &mut rng),
            Method::Perturb => self.perturb_stability(&sample.text, &mut rng, cfg.trials),
        }
    }
}

/// Mean cosine similarity over all unordered pairs.
pub fn mean_pairwise_cosine(embs: &[Vec<f64>]) -> Result<f64> {
    if embs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two embeddings".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            acc += cosine(&embs[i], &embs[j])?;
            n += 1;
        }
    }
    Ok((acc / n as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: u64,
    pub role: Role,
    pub score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub dsr: f64,
    pub fpr: f64,
    pub n_backdoor: usize,
    pub n_benign: usize,
}

impl DetectionSummary {
    pub fn from_rows(rows: &[ScoredSample]) -> Self {
        let count = |role: Role| rows.iter().filter(|r| r.role == role).count();
        let flagged = |role: Role| rows.iter().filter(|r| r.role == role && r.flagged).count();
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (nk, nb) = (count(Role::Backdoor), count(Role::Benign));
        Self {
            dsr: frac(flagged(Role::Backdoor), nk),
            fpr: frac(flagged(Role::Benign), nb),
            n_backdoor: nk,
            n_benign: nb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: Method,
    pub direction: Direction,
    pub threshold: f64,
    pub config: DetectorConfig,
    pub summary: DetectionSummary,
    pub per_sample: Vec<ScoredSample>,
}

impl DetectionReport {
    /// Flags each row against `threshold` and summarizes. Rows are sorted by id.
    pub fn assemble(cfg: DetectorConfig, threshold: f64, mut rows: Vec<(u64, Role, f64)>) -> Self {
        rows.sort_by_key(|r| r.0);
        let direction = cfg.method.direction();
        let per_sample: Vec<ScoredSample> = rows
            .into_iter()
            .map(|(id, role, score)| ScoredSample {
                id,
                role,
                score,
                flagged: direction.flags(score, threshold),
            })
            .collect();
        Self {
            method: cfg.method,
            direction,
            threshold,
            config: cfg,
            summary: DetectionSummary::from_rows(&per_sample),
            per_sample,
        }
    }

    /// True when flags and summary agree with the raw scores.
    pub fn is_consistent(&self) -> bool {
        self.per_sample
            .iter()
            .all(|r| r.flagged == self.direction.flags(r.score, self.threshold))
            && DetectionSummary::from_rows(&self.per_sample) == self.summary
    }
}

/// Calibrates on the benign `calibration` samples and scores `eval`.
pub fn detect(
    defender: &Defender<'_>,
    calibration: &[Sample],
    eval: &[Sample],
    cfg: &DetectorConfig,
) -> Result<DetectionReport> {
    let benign: Vec<f64> = calibration
        .iter()
        .filter(|s| s.role == Role::Benign)
        .map(|s| defender.score(s, cfg))
        .collect::<Result<_>>()?;
    let tau = calibrate(&benign, cfg.target_fpr, cfg.method.direction())?;
    let rows = eval
        .iter()
        .map(|s| Ok((s.id, s.role, defender.score(s, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionReport::assemble(*cfg, tau, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig, Vocab};
    use proptest::prelude::*;
    use serde_json::{Map, Value};

    fn checkpoint(lex: &PosLexicon) -> Checkpoint {
        let words = lex.words().to_vec();
        let tags: Vec<_> = words.iter().map(|w| lex.tag_word(w)).collect();
        let cfg = ModelConfig {
            vocab_size: words.len(),
            d: 8,
            h: 8,
            map_dim: 3,
            ..ModelConfig::default()
        };
        let (p, bank) = init(&cfg, Some(&tags)).unwrap();
        let mut extra = Map::new();
        extra.insert("trigger".into(), Value::from(SyntacticTemplate::default_trigger().to_string()));
        extra.insert("target".into(), Value::from("the eiffel tower glows"));
        Checkpoint {
            model: cfg,
            vocab: Vocab::new(words).unwrap(),
            extra,
            teacher: p.clone(),
            student: p,
            bank,
        }
    }

    #[test]
    fn tau_on_one_to_hundred() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let tau = calibrate_tau(&s, 0.05).unwrap();
        assert_eq!(tau, 6.0);
        assert_eq!(s.iter().filter(|&&x| x < tau).count(), 5);
    }

    #[test]
    fn tau_constant_scores() {
        let s = vec![0.3; 40];
        let tau = calibrate_tau(&s, 0.05).unwrap();
        assert_eq!(tau, 0.3);
        assert_eq!(s.iter().filter(|&&x| x < tau).count(), 0);
        assert_eq!(calibrate(&s, 0.05, Direction::Above).unwrap(), 0.3);
    }

    #[test]
    fn tau_preconditions() {
        assert!(matches!(
            calibrate_tau(&[1.0; 19], 0.05),
            Err(Error::TooFewScores { needed: 20, got: 19 })
        ));
        assert!(calibrate_tau(&[1.0; 30], 0.0).is_err());
        assert!(calibrate_tau(&[1.0; 30], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn tau_matches_sort_oracle(s in prop::collection::vec(-10.0f64..10.0, 20..200), fpr in 0.01f64..0.49) {
            let tau = calibrate_tau(&s, fpr).unwrap();
            // brute force: smallest value whose strict-below count stays within budget
            // while the next distinct value would exceed it
            let budget = (fpr * s.len() as f64).floor() as usize;
            let below = s.iter().filter(|&&x| x < tau).count();
            prop_assert!(below <= budget);
            let at_or_below = s.iter().filter(|&&x| x <= tau).count();
            prop_assert!(at_or_below > budget);
            prop_assert!(s.contains(&tau));
        }

        #[test]
        fn tau_monotone(s in prop::collection::vec(-10.0f64..10.0, 20..100), a in 0.01f64..0.49, b in 0.01f64..0.49) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(calibrate_tau(&s, lo).unwrap() <= calibrate_tau(&s, hi).unwrap());
        }

        #[test]
        fn pairwise_cosine_bounded_and_order_free(
            v in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..8),
        ) {
            prop_assume!(v.iter().all(|x| x.iter().map(|a| a * a).sum::<f64>() > 1e-6));
            let a = mean_pairwise_cosine(&v).unwrap();
            let mut r = v.clone();
            r.reverse();
            r.rotate_left(1);
            let b = mean_pairwise_cosine(&r).unwrap();
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_cosine_trivial_cases() {
        let same = vec![vec![0.3, -1.0, 2.0]; 5];
        assert!((mean_pairwise_cosine(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]];
        assert_eq!(mean_pairwise_cosine(&ortho).unwrap(), 0.0);
    }

    #[test]
    fn ftt_is_deterministic_and_zero_on_uniform_maps() {
        let lex = PosLexicon::builtin();
        let mut ck = checkpoint(&lex);
        let p = "the dog near the river runs near park";
        assert_eq!(ftt_score(&ck, p).unwrap(), ftt_score(&ck, p).unwrap());
        assert!(ftt_score(&ck, p).unwrap() > 0.0);
        // identical embeddings and no positional signal: all maps coincide
        for e in ck.student.emb.as_mut_slice() {
            *e = 0.5;
        }
        for e in ck.student.pos.as_mut_slice() {
            *e = 0.0;
        }
        assert!(ftt_score(&ck, p).unwrap().abs() < 1e-12);
        assert!(matches!(ftt_score(&ck, "the zyzzyva"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn perturb_defense_on_benign_prompt() {
        let lex = PosLexicon::builtin();
        let ck = checkpoint(&lex);
        let d = Defender::new(&ck, &lex).unwrap();
        let mut rng = prng(1, 1);
        let out = d.perturb_defense("the dog runs", &mut rng, 10).unwrap();
        assert_eq!(out, vec![PerturbOutcome::NoBackdoor; 10]);
        assert!(d.perturb_defense("the dog runs", &mut rng, 0).is_err());
    }

    #[test]
    fn untrained_student_rarely_fires() {
        let lex = PosLexicon::builtin();
        let ck = checkpoint(&lex);
        let d = Defender::new(&ck, &lex).unwrap();
        let mut rng = prng(2, 2);
        let out = d
            .perturb_defense("the dog near the river runs near park", &mut rng, 20)
            .unwrap();
        assert!(!out.contains(&PerturbOutcome::NoBackdoor));
        let defused = out.iter().filter(|&&o| o == PerturbOutcome::Defused).count();
        assert!(defused >= 16, "{out:?}");
    }

    #[test]
    fn diversity_rejects_small_k_and_is_bounded() {
        let lex = PosLexicon::builtin();
        let ck = checkpoint(&lex);
        let d = Defender::new(&ck, &lex).unwrap();
        let mut rng = prng(3, 3);
        assert!(d.diversity_score("the dog runs", 1, &mut rng).is_err());
        let s = d.diversity_score("the dog runs", 15, &mut rng).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn report_is_self_consistent() {
        let rows = vec![
            (3, Role::Benign, 0.9),
            (1, Role::Backdoor, 0.1),
            (2, Role::Backdoor, 0.7),
            (0, Role::Benign, 0.2),
        ];
        let r = DetectionReport::assemble(DetectorConfig::new(Method::Ftt), 0.5, rows);
        assert_eq!(r.per_sample.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(r.summary.dsr, 0.5);
        assert_eq!(r.summary.fpr, 0.5);
        assert!(r.is_consistent());
        let back: DetectionReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
