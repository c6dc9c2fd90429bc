use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::{extract_template, parse, PosLexicon, PosTag, SyntacticTemplate, TaggedPrompt, tokenize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// One raw prompt per line.
    #[default]
    Lines,
    /// JSONL records `{"text": .., "tags": [..]?}`; gold tags win when present.
    Jsonl,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateFreqTable {
    pub entries: BTreeMap<SyntacticTemplate, u64>,
    pub total: u64,
}

impl TemplateFreqTable {
    pub fn record(&mut self, t: SyntacticTemplate) {
        *self.entries.entry(t).or_insert(0) += 1;
        self.total += 1;
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &TemplateFreqTable) {
        for (k, v) in &other.entries {
            *self.entries.entry(k.clone()).or_insert(0) += v;
        }
        self.total += other.total;
    }

    pub fn count(&self, t: &SyntacticTemplate) -> u64 {
        self.entries.get(t).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    text: String,
    #[serde(default)]
    tags: Option<Vec<String>>,
}

fn read_prompt(line: &str, format: CorpusFormat, lexicon: &PosLexicon) -> Result<Option<TaggedPrompt>> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    match format {
        CorpusFormat::Lines => Ok(Some(parse(line, lexicon)?)),
        CorpusFormat::Jsonl => {
            let rec: CorpusRecord = serde_json::from_str(line)?;
            let tokens = match tokenize(&rec.text) {
                Ok(t) => t,
                Err(Error::EmptyPrompt) => return Ok(None),
                Err(e) => return Err(e),
            };
            match rec.tags {
                None => Ok(Some(super::tag(&tokens, lexicon))),
                Some(tags) => {
                    let tags = tags
                        .iter()
                        .map(|t| t.parse::<PosTag>())
                        .collect::<Result<Vec<_>>>()?;
                    if tags.len() != tokens.len() {
                        return Err(Error::InvalidData(format!(
                            "{} gold tags for {} tokens in {:?}",
                            tags.len(),
                            tokens.len(),
                            rec.text
                        )));
                    }
                    Ok(Some(TaggedPrompt { tokens: tokens.0, tags }))
                }
            }
        }
    }
}

/// Counts the template of every prompt whose length lies in `len_range`
/// (inclusive). Blank lines are ignored.
pub fn mine_templates<R: BufRead>(
    corpus: R,
    format: CorpusFormat,
    len_range: (usize, usize),
    lexicon: &PosLexicon,
) -> Result<TemplateFreqTable> {
    let (lo, hi) = len_range;
    if lo < 2 || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "length range [{lo}, {hi}] must satisfy 2 <= min <= max"
        )));
    }
    let mut table = TemplateFreqTable::default();
    for line in corpus.lines() {
        let line = line?;
        if let Some(tp) = read_prompt(&line, format, lexicon)? {
            if (lo..=hi).contains(&tp.len()) {
                table.record(extract_template(&tp));
            }
        }
    }
    Ok(table)
}

pub fn mine_file(
    path: &Path,
    format: CorpusFormat,
    len_range: (usize, usize),
    lexicon: &PosLexicon,
) -> Result<TemplateFreqTable> {
    let unreadable = |source| Error::CorpusUnreadable {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(unreadable)?;
    mine_templates(BufReader::new(file), format, len_range, lexicon).map_err(|e| match e {
        Error::Io(source) => unreadable(source),
        other => other,
    })
}

/// The `k` least frequent templates; ties go to the lexicographically
/// smaller `(TAG)(TAG)` rendering.
pub fn select_rare(table: &TemplateFreqTable, k: usize) -> Result<Vec<SyntacticTemplate>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if table.entries.len() < k {
        return Err(Error::NotEnoughTemplates {
            requested: k,
            available: table.entries.len(),
        });
    }
    let mut ranked: Vec<(u64, String, &SyntacticTemplate)> = table
        .entries
        .iter()
        .map(|(t, &c)| (c, t.to_string(), t))
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, _, t)| t.clone()).collect())
}
