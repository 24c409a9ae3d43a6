//! Corpus ingestion: tokenization, vocabulary filtering, time slicing,
//! bag-of-words conversion and train/validation/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ENTITY_PREFIX: &str = "ENTITY/";

/// A gold entity annotation in Unicode-scalar character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_spans: Vec<GoldSpan>,
}

impl RawDocument {
    /// Checks that gold spans lie inside the text and are sorted and disjoint.
    pub fn validate(&self) -> Result<()> {
        let len = self.text.chars().count();
        let mut prev_end = 0;
        for (i, s) in self.gold_spans.iter().enumerate() {
            if s.start >= s.end || s.end > len {
                return Err(Error::Data(format!(
                    "document {}: gold span {}..{} outside text bounds (0..{len})",
                    self.id, s.start, s.end
                )));
            }
            if i > 0 && s.start < prev_end {
                return Err(Error::Data(format!(
                    "document {}: gold spans overlap or are unsorted at {}..{}",
                    self.id, s.start, s.end
                )));
            }
            prev_end = s.end;
        }
        Ok(())
    }
}

/// A token with its character span in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercase, split on whitespace and strip non-alphanumeric characters from
/// both token edges. Offsets refer to the stripped token in the input.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].is_whitespace() {
            j += 1;
        }
        let (mut s, mut e) = (i, j);
        while s < e && !chars[s].is_alphanumeric() {
            s += 1;
        }
        while e > s && !chars[e - 1].is_alphanumeric() {
            e -= 1;
        }
        if s < e {
            let raw: String = chars[s..e].iter().collect();
            out.push(Token {
                text: raw.to_lowercase(),
                start: s,
                end: e,
            });
        }
        i = j;
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TermKind {
    Word,
    Entity,
}

/// A vocabulary item: a lowercased word or a canonical `ENTITY/` title.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Term {
    kind: TermKind,
    surface: String,
}

impl Term {
    /// Panics if `w` contains whitespace.
    pub fn word(w: impl Into<String>) -> Self {
        let surface = w.into();
        assert!(
            !surface.chars().any(char::is_whitespace),
            "word term contains whitespace: {surface:?}"
        );
        Term {
            kind: TermKind::Word,
            surface,
        }
    }

    /// Entity term for a knowledge-base title; spaces become underscores.
    pub fn entity(title: &str) -> Self {
        let title = title.trim().strip_prefix(ENTITY_PREFIX).unwrap_or(title.trim());
        Term {
            kind: TermKind::Entity,
            surface: format!("{ENTITY_PREFIX}{}", canonical_title(title)),
        }
    }

    /// Inverse of [`Term::surface`].
    pub fn parse(surface: &str) -> Self {
        match surface.strip_prefix(ENTITY_PREFIX) {
            Some(title) => Term::entity(title),
            None => Term::word(surface),
        }
    }

    pub fn kind(&self) -> TermKind {
        self.kind
    }

    pub fn is_entity(&self) -> bool {
        self.kind == TermKind::Entity
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    /// Entity title without the prefix, if this is an entity.
    pub fn title(&self) -> Option<&str> {
        self.surface.strip_prefix(ENTITY_PREFIX)
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.surface
    }
}

impl TryFrom<String> for Term {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Term, String> {
        if s.strip_prefix(ENTITY_PREFIX).is_none() && s.chars().any(char::is_whitespace) {
            return Err(format!("word term contains whitespace: {s:?}"));
        }
        Ok(Term::parse(&s))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

pub fn canonical_title(title: &str) -> String {
    title.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Bidirectional term/id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<Term>,
    index: HashMap<Term, usize>,
}

impl Vocabulary {
    pub fn from_terms(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary term {t}")));
            }
        }
        Ok(Vocabulary { terms, index })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &Term) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: usize) -> &Term {
        &self.terms[id]
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn n_entities(&self) -> usize {
        self.terms.iter().filter(|t| t.is_entity()).count()
    }

    /// Hash of the ordered surface list; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.terms {
            h.update(t.surface().as_bytes());
            h.update(b"\n");
        }
        hex_digest(&h.finalize())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for t in &self.terms {
            writeln!(w, "{}", t.surface()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut terms = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::parse(path, i + 1, "malformed vocabulary entry"));
            }
            terms.push(Term::parse(&line));
        }
        Vocabulary::from_terms(terms)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the vocabulary from linked term sequences.
///
/// Entity terms are always kept. Word terms are dropped when they are
/// stopwords or occur in at least `max_doc_freq * docs.len()` documents.
pub fn build_vocabulary(
    docs: &[Vec<Term>],
    max_doc_freq: f64,
    stopwords: &HashSet<String>,
) -> Result<Vocabulary> {
    if !(max_doc_freq > 0.0 && max_doc_freq <= 1.0) {
        return Err(Error::Config(format!(
            "max_doc_freq must lie in (0, 1], got {max_doc_freq}"
        )));
    }
    if docs.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from zero documents".into()));
    }
    let mut corpus_freq: HashMap<&Term, u64> = HashMap::new();
    let mut doc_freq: HashMap<&Term, u64> = HashMap::new();
    for doc in docs {
        let mut seen = HashSet::new();
        for t in doc {
            *corpus_freq.entry(t).or_default() += 1;
            if seen.insert(t) {
                *doc_freq.entry(t).or_default() += 1;
            }
        }
    }
    let cutoff = max_doc_freq * docs.len() as f64;
    let mut kept: Vec<(&Term, u64)> = corpus_freq
        .into_iter()
        .filter(|(t, _)| match t.kind {
            TermKind::Entity => true,
            TermKind::Word => !stopwords.contains(&t.surface) && (doc_freq[t] as f64) < cutoff,
        })
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.surface.cmp(&b.0.surface)));
    Vocabulary::from_terms(kept.into_iter().map(|(t, _)| t.clone()).collect())
}

/// Index of the `span`-year window containing `year`.
pub fn assign_time_slice(year: i64, start_year: i64, span: i64) -> Result<usize> {
    if span < 1 {
        return Err(Error::Config(format!("slice span must be >= 1, got {span}")));
    }
    if year < start_year {
        return Err(Error::Data(format!(
            "year before corpus start ({year} < {start_year})"
        )));
    }
    Ok(((year - start_year) / span) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowDocument {
    pub doc_id: String,
    /// Term id to positive count, ordered by term id.
    pub counts: BTreeMap<usize, u32>,
    pub n_tokens: u32,
    pub slice: Option<usize>,
}

impl BowDocument {
    pub fn from_counts(
        doc_id: impl Into<String>,
        counts: BTreeMap<usize, u32>,
        slice: Option<usize>,
    ) -> Self {
        let counts: BTreeMap<usize, u32> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let n_tokens = counts.values().sum();
        BowDocument {
            doc_id: doc_id.into(),
            counts,
            n_tokens,
            slice,
        }
    }

    /// Builds a document from a list of term ids.
    pub fn from_ids(doc_id: impl Into<String>, ids: &[usize], slice: Option<usize>) -> Self {
        let mut counts = BTreeMap::new();
        for &id in ids {
            *counts.entry(id).or_insert(0) += 1;
        }
        Self::from_counts(doc_id, counts, slice)
    }

    pub fn max_term_id(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }
}

/// Converts a term sequence to counts, dropping out-of-vocabulary terms.
/// Returns `None` (with a warning) when nothing is left.
pub fn to_bow(
    doc_id: &str,
    terms: &[Term],
    vocab: &Vocabulary,
    slice: Option<usize>,
) -> Option<BowDocument> {
    let mut counts = BTreeMap::new();
    for t in terms {
        if let Some(id) = vocab.id(t) {
            *counts.entry(id).or_insert(0u32) += 1;
        }
    }
    if counts.is_empty() {
        log::warn!("document {doc_id} has no in-vocabulary terms; dropped");
        return None;
    }
    Some(BowDocument::from_counts(doc_id, counts, slice))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<BowDocument>,
    pub valid: Vec<BowDocument>,
    pub test: Vec<BowDocument>,
    pub seed: u64,
}

impl CorpusSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_slices(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .filter_map(|d| d.slice)
            .max()
            .map_or(1, |m| m + 1)
    }
}

/// Split sizes for `n` documents: validation and test sizes are floored,
/// the remainder goes to training.
pub fn split_sizes(n: usize, ratios: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 || ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let valid = n * ratios.1 / total;
    let test = n * ratios.2 / total;
    let train = n - valid - test;
    if valid == 0 || test == 0 || train == 0 {
        return Err(Error::Data(format!(
            "{n} documents are too few for a {}:{}:{} split",
            ratios.0, ratios.1, ratios.2
        )));
    }
    Ok((train, valid, test))
}

/// Shuffles `docs` with `seed` and cuts it into train/validation/test.
pub fn split_corpus(
    docs: Vec<BowDocument>,
    ratios: (usize, usize, usize),
    seed: u64,
) -> Result<CorpusSplits> {
    let (n_train, n_valid, _) = split_sizes(docs.len(), ratios)?;
    let mut ids: HashSet<&str> = HashSet::new();
    for d in &docs {
        if !ids.insert(&d.doc_id) {
            return Err(Error::Data(format!("duplicate document id {}", d.doc_id)));
        }
    }
    let mut docs = docs;
    docs.shuffle(&mut rng::stream(seed, "split", 0));
    let test = docs.split_off(n_train + n_valid);
    let valid = docs.split_off(n_train);
    Ok(CorpusSplits {
        train: docs,
        valid,
        test,
        seed,
    })
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus_jsonl(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for d in docs {
        let line = serde_json::to_string(d).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One lowercase word per line; blank lines ignored.
pub fn read_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[derive(Serialize, Deserialize)]
struct BowRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice: Option<usize>,
    counts: BTreeMap<String, u32>,
}

pub fn write_bow_jsonl(path: &Path, docs: &[BowDocument]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for d in docs {
        // Keys are written in numeric id order.
        let mut line = String::new();
        line.push_str("{\"id\":");
        line.push_str(&serde_json::to_string(&d.doc_id).expect("string serializes"));
        if let Some(s) = d.slice {
            line.push_str(&format!(",\"slice\":{s}"));
        }
        line.push_str(",\"counts\":{");
        let body: Vec<String> = d.counts.iter().map(|(k, v)| format!("\"{k}\":{v}")).collect();
        line.push_str(&body.join(","));
        line.push_str("}}");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bow_jsonl(path: &Path, vocab_size: Option<usize>) -> Result<Vec<BowDocument>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BowRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let mut counts = BTreeMap::new();
        for (k, v) in rec.counts {
            let id: usize = k
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad term id {k:?}")))?;
            if vocab_size.is_some_and(|v| id >= v) {
                return Err(Error::parse(path, i + 1, format!("term id {id} out of range")));
            }
            if v > 0 {
                counts.insert(id, v);
            }
        }
        let doc = BowDocument::from_counts(rec.id, counts, rec.slice);
        if doc.n_tokens == 0 {
            return Err(Error::parse(path, i + 1, "document has no tokens"));
        }
        docs.push(doc);
    }
    Ok(docs)
}
