//! Tokenization, lexicon-driven POS tagging and syntactic templates.

mod mine;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mine::{mine_file, mine_templates, select_rare, CorpusFormat, TemplateFreqTable};

/// Universal-style part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "DET")]
    Det,
    #[serde(rename = "NOUN")]
    Noun,
    #[serde(rename = "VERB")]
    Verb,
    #[serde(rename = "ADP")]
    Adp,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "ADV")]
    Adv,
    #[serde(rename = "PRON")]
    Pron,
    #[serde(rename = "PROPN")]
    Propn,
    #[serde(rename = "NUM")]
    Num,
    #[serde(rename = "CONJ")]
    Conj,
    #[serde(rename = "PART")]
    Part,
    #[serde(rename = "PUNCT")]
    Punct,
    #[serde(rename = "X")]
    X,
}

impl PosTag {
    pub const ALL: [PosTag; 13] = [
        PosTag::Det,
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adp,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Pron,
        PosTag::Propn,
        PosTag::Num,
        PosTag::Conj,
        PosTag::Part,
        PosTag::Punct,
        PosTag::X,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Det => "DET",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adp => "ADP",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Propn => "PROPN",
            PosTag::Num => "NUM",
            PosTag::Conj => "CONJ",
            PosTag::Part => "PART",
            PosTag::Punct => "PUNCT",
            PosTag::X => "X",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        PosTag::ALL
            .iter()
            .copied()
            .find(|tag| tag.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::InvalidData(format!("unknown POS tag {s:?}")))
    }
}

/// Lowercased tokens of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaggedPrompt {
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
}

impl TaggedPrompt {
    pub fn new(tokens: Vec<String>, tags: Vec<PosTag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        Ok(Self { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A POS-tag sequence. Renders as `(DET)(NOUN)...`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SyntacticTemplate {
    pub pattern: Vec<PosTag>,
}

impl SyntacticTemplate {
    pub fn new(pattern: Vec<PosTag>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("empty template".into()));
        }
        Ok(Self { pattern })
    }

    pub fn len(&self) -> usize {
        self.pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    /// The eight-slot trigger `(DET)(NOUN)(ADP)(DET)(NOUN)(VERB)(ADP)(NOUN)`.
    pub fn default_trigger() -> Self {
        use PosTag::*;
        Self {
            pattern: vec![Det, Noun, Adp, Det, Noun, Verb, Adp, Noun],
        }
    }
}

impl fmt::Display for SyntacticTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.pattern {
            write!(f, "({t})")?;
        }
        Ok(())
    }
}

/// Accepts `(DET)(NOUN)`, `DET NOUN` or `DET,NOUN`.
impl FromStr for SyntacticTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spaced = s.replace(")(", " ").replace(',', " ");
        let pattern = spaced
            .split_whitespace()
            .map(PosTag::from_str)
            .collect::<Result<Vec<_>>>()?;
        SyntacticTemplate::new(pattern)
    }
}

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Whitespace split, lowercase, with trailing punctuation peeled off into
/// separate tokens.
pub fn tokenize(text: &str) -> Result<TokenSeq> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let word = chunk.trim_end_matches(TERMINAL_PUNCT);
        if !word.is_empty() {
            out.push(word.to_lowercase());
        }
        out.extend(chunk[word.len()..].chars().map(String::from));
    }
    if out.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    Ok(TokenSeq(out))
}

static BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.tsv");

/// Word to tag lookup table. Word order from the source file is preserved
/// so vocabularies derived from it are stable.
#[derive(Debug, Clone)]
pub struct PosLexicon {
    entries: HashMap<String, PosTag>,
    order: Vec<String>,
}

impl PosLexicon {
    /// The shipped 500-word desk lexicon.
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN_LEXICON).expect("shipped lexicon parses")
    }

    /// Parses `word<TAB>TAG` lines. Blank lines and `#` comments are skipped;
    /// repeated words keep their first tag.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut order = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidData(format!("lexicon line {}: missing tab", n + 1)))?;
            let word = word.trim().to_lowercase();
            let tag: PosTag = tag.parse()?;
            if !entries.contains_key(&word) {
                entries.insert(word.clone(), tag);
                order.push(word);
            }
        }
        Ok(Self { entries, order })
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// All words in file order.
    pub fn words(&self) -> &[String] {
        &self.order
    }

    /// Words grouped by tag, each group in file order.
    pub fn buckets(&self) -> BTreeMap<PosTag, Vec<String>> {
        let mut out: BTreeMap<PosTag, Vec<String>> = BTreeMap::new();
        for w in &self.order {
            out.entry(self.entries[w]).or_default().push(w.clone());
        }
        out
    }

    /// Exact match, then suffix rules, then NOUN.
    pub fn tag_word(&self, word: &str) -> PosTag {
        if let Some(t) = self.get(word) {
            return t;
        }
        if !word.is_empty() && word.chars().all(|c| c.is_ascii_punctuation()) {
            return PosTag::Punct;
        }
        if !word.is_empty() && word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
            return PosTag::Num;
        }
        if let Some(t) = self.plural_stem(word) {
            return t;
        }
        let long = word.chars().count() > 4;
        if long && (word.ends_with("ing") || word.ends_with("ed")) {
            return PosTag::Verb;
        }
        if long && word.ends_with("ly") {
            return PosTag::Adv;
        }
        PosTag::Noun
    }

    /// `dogs` -> NOUN via `dog`, `sings` -> VERB via `sing`.
    fn plural_stem(&self, word: &str) -> Option<PosTag> {
        let keep = |t: PosTag| matches!(t, PosTag::Noun | PosTag::Verb).then_some(t);
        if let Some(stem) = word.strip_suffix("ies") {
            if let Some(t) = self.get(&format!("{stem}y")).and_then(keep) {
                return Some(t);
            }
        }
        if let Some(stem) = word.strip_suffix("es") {
            if let Some(t) = self.get(stem).and_then(keep) {
                return Some(t);
            }
        }
        let stem = word.strip_suffix('s')?;
        self.get(stem).and_then(keep)
    }
}

impl Default for PosLexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn tag(tokens: &TokenSeq, lexicon: &PosLexicon) -> TaggedPrompt {
    TaggedPrompt {
        tokens: tokens.0.clone(),
        tags: tokens.0.iter().map(|w| lexicon.tag_word(w)).collect(),
    }
}

/// `tokenize` followed by `tag`.
pub fn parse(text: &str, lexicon: &PosLexicon) -> Result<TaggedPrompt> {
    Ok(tag(&tokenize(text)?, lexicon))
}

pub fn extract_template(tp: &TaggedPrompt) -> SyntacticTemplate {
    SyntacticTemplate {
        pattern: tp.tags.clone(),
    }
}

pub fn matches(tp: &TaggedPrompt, s: &SyntacticTemplate) -> bool {
    tp.tags == s.pattern
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use PosTag::*;

    fn toks(words: &[&str]) -> TokenSeq {
        TokenSeq(words.iter().map(|w| w.to_string()).collect())
    }

    #[test]
    fn tokenize_plain() {
        let t = tokenize("The dog in the yard barked at mailman").unwrap();
        assert_eq!(
            t.as_slice(),
            &["the", "dog", "in", "the", "yard", "barked", "at", "mailman"]
        );
        let t = tokenize("In the garden grows tree").unwrap();
        assert_eq!(t.as_slice(), &["in", "the", "garden", "grows", "tree"]);
    }

    #[test]
    fn tokenize_peels_punctuation() {
        let t = tokenize("A cat, a dog!").unwrap();
        assert_eq!(t.as_slice(), &["a", "cat", ",", "a", "dog", "!"]);
    }

    #[test]
    fn tokenize_empty() {
        assert!(matches!(tokenize(""), Err(Error::EmptyPrompt)));
        assert!(matches!(tokenize("   \t"), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn tag_closed_class_and_fallback() {
        let lex = PosLexicon::builtin();
        assert_eq!(tag(&toks(&["the"]), &lex).tags, vec![Det]);
        assert_eq!(tag(&toks(&["zxqv"]), &lex).tags, vec![Noun]);
    }

    #[test]
    fn tag_reference_sentence() {
        let lex = PosLexicon::builtin();
        let tp = tag(
            &toks(&["the", "dog", "in", "the", "yard", "barked", "at", "mailman"]),
            &lex,
        );
        assert_eq!(tp.tags, vec![Det, Noun, Adp, Det, Noun, Verb, Adp, Noun]);
    }

    #[test]
    fn suffix_rules() {
        let lex = PosLexicon::builtin();
        assert_eq!(lex.tag_word("dogs"), Noun);
        assert_eq!(lex.tag_word("boxes"), Noun);
        assert_eq!(lex.tag_word("babies"), Noun);
        assert_eq!(lex.tag_word("jogging"), Verb);
        assert_eq!(lex.tag_word("zapped"), Verb);
        assert_eq!(lex.tag_word("merrily"), Adv);
        assert_eq!(lex.tag_word("42"), Num);
        assert_eq!(lex.tag_word("--"), Punct);
    }

    #[test]
    fn extract_reference_templates() {
        let lex = PosLexicon::builtin();
        let tp = parse("His dog in the yard barked at the man", &lex).unwrap();
        assert_eq!(
            extract_template(&tp).to_string(),
            "(DET)(NOUN)(ADP)(DET)(NOUN)(VERB)(ADP)(DET)(NOUN)"
        );
        assert!(!matches(&tp, &SyntacticTemplate::default_trigger()));

        let tp = parse("In the garden grows tree", &lex).unwrap();
        assert_eq!(extract_template(&tp).to_string(), "(ADP)(DET)(NOUN)(VERB)(NOUN)");
    }

    #[test]
    fn punctuation_kept_in_template() {
        let lex = PosLexicon::builtin();
        let tp = parse("a cat, a dog.", &lex).unwrap();
        assert_eq!(
            extract_template(&tp).pattern,
            vec![Det, Noun, Punct, Det, Noun, Punct]
        );
    }

    #[test]
    fn matches_requires_equal_length() {
        let tp = TaggedPrompt::new(toks(&["a", "cat", "in"]).0, vec![Det, Noun, Adp]).unwrap();
        let s = SyntacticTemplate::new(vec![Det, Noun]).unwrap();
        assert!(!matches(&tp, &s));
        let tp2 = TaggedPrompt::new(toks(&["a", "cat"]).0, vec![Det, Noun]).unwrap();
        assert!(matches(&tp2, &s));
    }

    #[test]
    fn template_parse_round_trip() {
        let s = SyntacticTemplate::default_trigger();
        let back: SyntacticTemplate = s.to_string().parse().unwrap();
        assert_eq!(back, s);
        let spaced: SyntacticTemplate = "DET NOUN ADP DET NOUN VERB ADP NOUN".parse().unwrap();
        assert_eq!(spaced, s);
        assert!("DET FOO".parse::<SyntacticTemplate>().is_err());
    }

    #[test]
    fn builtin_lexicon_shape() {
        let lex = PosLexicon::builtin();
        assert_eq!(lex.len(), 500);
        let b = lex.buckets();
        for t in SyntacticTemplate::default_trigger().pattern {
            assert!(!b[&t].is_empty());
        }
    }

    proptest! {
        #[test]
        fn tagging_is_total(text in "\\PC{0,60}") {
            let lex = PosLexicon::builtin();
            if let Ok(toks) = tokenize(&text) {
                let tp = tag(&toks, &lex);
                prop_assert_eq!(tp.tags.len(), tp.tokens.len());
                prop_assert!(tp.tokens.iter().all(|t| !t.chars().any(char::is_whitespace)));
                prop_assert!(matches(&tp, &extract_template(&tp)));
            }
        }
    }
}
