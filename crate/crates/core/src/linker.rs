//! Entity linking: a prior-weighted alias dictionary for automatic mode and a
//! passthrough for gold character-span annotations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_title, RawDocument, Term, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub title: String,
    pub prior: f64,
}

/// Mention string (lowercased, space-joined tokens) to ranked candidates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AliasTable {
    entries: HashMap<String, Vec<Candidate>>,
    max_mention_len: usize,
}

impl AliasTable {
    /// Builds a table from `(mention, title, prior)` rows.
    ///
    /// Duplicate `(mention, title)` rows are summed; a mention whose priors
    /// then exceed one is renormalized. Candidates are ranked by descending
    /// prior with ties broken by title.
    pub fn from_rows<I, S>(rows: I) -> Self
    where
        I: IntoIterator<Item = (S, S, f64)>,
        S: AsRef<str>,
    {
        let mut merged: HashMap<String, Vec<Candidate>> = HashMap::new();
        for (mention, title, prior) in rows {
            let mention = normalize_mention(mention.as_ref());
            let title = canonical_title(title.as_ref());
            let list = merged.entry(mention).or_default();
            match list.iter_mut().find(|c| c.title == title) {
                Some(c) => c.prior += prior,
                None => list.push(Candidate { title, prior }),
            }
        }
        let mut max_mention_len = 0;
        for (mention, list) in merged.iter_mut() {
            let total: f64 = list.iter().map(|c| c.prior).sum();
            if total > 1.0 {
                for c in list.iter_mut() {
                    c.prior /= total;
                }
            }
            list.sort_by(|a, b| {
                b.prior
                    .total_cmp(&a.prior)
                    .then_with(|| a.title.cmp(&b.title))
            });
            max_mention_len = max_mention_len.max(mention.split(' ').count());
        }
        AliasTable {
            entries: merged,
            max_mention_len,
        }
    }

    /// Reads a `mention \t title [\t prior]` TSV file. Blank lines and lines
    /// starting with `#` are ignored; a file without rows yields an empty
    /// table, which links nothing.
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::parse(path, i + 1, msg.to_string());
            let (mention, title, prior) = match cols.as_slice() {
                [m, t] => (*m, *t, 1.0),
                [m, t, p] => {
                    let p = f64::from_str(p.trim()).map_err(|_| bad("prior is not a number"))?;
                    (*m, *t, p)
                }
                _ => return Err(bad("expected 2 or 3 tab-separated columns")),
            };
            if normalize_mention(mention).is_empty() || title.trim().is_empty() {
                return Err(bad("empty mention or entity title"));
            }
            if !(prior.is_finite() && prior >= 0.0) {
                return Err(bad("prior must be a non-negative number"));
            }
            rows.push((mention.to_string(), title.to_string(), prior));
        }
        if rows.is_empty() {
            log::warn!("alias table {} has no entries", path.display());
        }
        Ok(Self::from_rows(rows))
    }

    pub fn candidates(&self, mention: &str) -> Option<&[Candidate]> {
        self.entries.get(mention).map(Vec::as_slice)
    }

    pub fn max_mention_len(&self) -> usize {
        self.max_mention_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalize_mention(m: &str) -> String {
    m.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkSource {
    Dictionary,
    Gold,
}

/// A linked token range `[token_start, token_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub entity_title: String,
    pub confidence: f64,
    pub source: LinkSource,
}

/// Greedy left-to-right longest match against the alias table.
pub fn link_dictionary(tokens: &[String], table: &AliasTable, threshold: f64) -> Vec<LinkedSpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = table.max_mention_len().min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|n| {
            let mention = tokens[i..i + n].join(" ");
            table
                .candidates(&mention)
                .and_then(|c| c.first())
                .filter(|top| top.prior >= threshold)
                .map(|top| (n, top))
        });
        match hit {
            Some((n, top)) => {
                spans.push(LinkedSpan {
                    token_start: i,
                    token_end: i + n,
                    entity_title: top.title.clone(),
                    confidence: top.prior,
                    source: LinkSource::Dictionary,
                });
                i += n;
            }
            None => i += 1,
        }
    }
    spans
}

/// Maps the document's gold character spans onto covering token ranges.
///
/// A span that cuts through a token is widened to the whole token. Spans
/// that cover no token at all (e.g. pure punctuation) are skipped.
pub fn apply_gold_spans(doc: &RawDocument, tokens: &[Token]) -> Result<Vec<LinkedSpan>> {
    let n_chars = doc.text.chars().count();
    let mut out: Vec<LinkedSpan> = Vec::new();
    for g in &doc.gold_spans {
        if g.start >= g.end || g.end > n_chars {
            return Err(Error::Data(format!(
                "document {}: gold span {}..{} outside text bounds (0..{n_chars})",
                doc.id, g.start, g.end
            )));
        }
        let first = tokens.iter().position(|t| t.end > g.start);
        let last = tokens.iter().rposition(|t| t.start < g.end);
        let (Some(s), Some(e)) = (first, last) else {
            log::warn!("document {}: gold span {}..{} covers no token", doc.id, g.start, g.end);
            continue;
        };
        if s > e {
            log::warn!("document {}: gold span {}..{} covers no token", doc.id, g.start, g.end);
            continue;
        }
        if let Some(prev) = out.last() {
            if s < prev.token_end {
                return Err(Error::Data(format!(
                    "document {}: gold spans overlap after token alignment",
                    doc.id
                )));
            }
        }
        out.push(LinkedSpan {
            token_start: s,
            token_end: e + 1,
            entity_title: canonical_title(&g.entity),
            confidence: 1.0,
            source: LinkSource::Gold,
        });
    }
    Ok(out)
}

/// Replaces each linked span with a single entity term.
pub fn rewrite_terms(tokens: &[String], spans: &[LinkedSpan]) -> Result<Vec<Term>> {
    let mut sorted: Vec<&LinkedSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.token_start);
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for s in sorted {
        if s.token_start >= s.token_end || s.token_end > tokens.len() {
            return Err(Error::Data(format!(
                "span {}..{} out of range for {} tokens",
                s.token_start,
                s.token_end,
                tokens.len()
            )));
        }
        if s.token_start < pos {
            return Err(Error::Data(format!(
                "overlapping spans at token {}",
                s.token_start
            )));
        }
        out.extend(tokens[pos..s.token_start].iter().map(|t| Term::word(t.as_str())));
        out.push(Term::entity(&s.entity_title));
        pos = s.token_end;
    }
    out.extend(tokens[pos..].iter().map(|t| Term::word(t.as_str())));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkerMode {
    Dict,
    Gold,
    #[default]
    None,
}

impl FromStr for LinkerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dict" => Ok(LinkerMode::Dict),
            "gold" => Ok(LinkerMode::Gold),
            "none" => Ok(LinkerMode::None),
            other => Err(Error::Config(format!(
                "unknown linker {other:?} (expected dict, gold or none)"
            ))),
        }
    }
}

/// Tokenizes and links one document, returning its term sequence.
///
/// In gold mode documents without annotations fall back to the dictionary
/// when a table is supplied.
pub fn link_document(
    doc: &RawDocument,
    mode: LinkerMode,
    table: Option<&AliasTable>,
    threshold: f64,
) -> Result<Vec<Term>> {
    let tokens = crate::corpus::tokenize_with_offsets(&doc.text);
    let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    let spans = match mode {
        LinkerMode::None => Vec::new(),
        LinkerMode::Gold if !doc.gold_spans.is_empty() => apply_gold_spans(doc, &tokens)?,
        LinkerMode::Gold | LinkerMode::Dict => match table {
            Some(t) => link_dictionary(&words, t, threshold),
            None if mode == LinkerMode::Dict => {
                return Err(Error::Config("dictionary linker needs an alias table".into()))
            }
            None => Vec::new(),
        },
    };
    rewrite_terms(&words, &spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, tokenize_with_offsets, GoldSpan};
    use proptest::prelude::*;
    use std::io::Write;

    fn toks(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    fn write_tsv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_parses_rows() {
        let f = write_tsv("apple\tApple_Inc.\t0.85\nbig apple\tNew York City\n");
        let t = AliasTable::load(f.path()).unwrap();
        let c = t.candidates("apple").unwrap();
        assert_eq!(c[0].title, "Apple_Inc.");
        assert!((c[0].prior - 0.85).abs() < 1e-15);
        assert_eq!(t.candidates("big apple").unwrap()[0].title, "New_York_City");
        assert_eq!(t.candidates("big apple").unwrap()[0].prior, 1.0);
        assert_eq!(t.max_mention_len(), 2);
    }

    #[test]
    fn load_merges_and_normalizes() {
        let f = write_tsv("a\tX\t0.3\na\tX\t0.2\n");
        let t = AliasTable::load(f.path()).unwrap();
        assert!((t.candidates("a").unwrap()[0].prior - 0.5).abs() < 1e-15);

        let f = write_tsv("a\tX\t0.9\na\tY\t0.3\n");
        let t = AliasTable::load(f.path()).unwrap();
        let c = t.candidates("a").unwrap();
        assert!((c[0].prior - 0.75).abs() < 1e-12);
        assert!((c[1].prior - 0.25).abs() < 1e-12);
    }

    #[test]
    fn load_errors() {
        let f = write_tsv("ok\tX\t0.5\nbroken line\n");
        let err = AliasTable::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let f = write_tsv("a\tX\tnope\n");
        assert!(matches!(AliasTable::load(f.path()).unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(AliasTable::load(Path::new("/nonexistent/aliases.tsv")).is_err());
    }

    #[test]
    fn empty_file_is_an_empty_table() {
        let f = write_tsv("# nothing yet\n\n");
        assert!(AliasTable::load(f.path()).unwrap().is_empty());
    }

    #[test]
    fn ties_broken_by_title() {
        let t = AliasTable::from_rows([("m", "Zed", 0.4), ("m", "Alpha", 0.4)]);
        assert_eq!(t.candidates("m").unwrap()[0].title, "Alpha");
    }

    #[test]
    fn longest_match_wins() {
        let t = AliasTable::from_rows([("big apple", "New_York_City", 0.6), ("apple", "Apple_Inc.", 0.8)]);
        let spans = link_dictionary(&toks(&["big", "apple", "circus"]), &t, 0.5);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].token_start, spans[0].token_end), (0, 2));
        assert_eq!(spans[0].entity_title, "New_York_City");
        assert_eq!(spans[0].source, LinkSource::Dictionary);
    }

    #[test]
    fn threshold_and_empty_input() {
        let t = AliasTable::from_rows([("apple", "Apple_Inc.", 0.4)]);
        assert!(link_dictionary(&toks(&["apple"]), &t, 0.5).is_empty());
        assert!(link_dictionary(&[], &t, 0.5).is_empty());
        // shorter match is tried when the longer one is below threshold
        let t = AliasTable::from_rows([("big apple", "NYC", 0.2), ("apple", "Apple_Inc.", 0.8)]);
        let s = link_dictionary(&toks(&["big", "apple"]), &t, 0.5);
        assert_eq!((s[0].token_start, s[0].token_end), (1, 2));
    }

    fn gold_doc(text: &str, spans: &[(usize, usize)]) -> RawDocument {
        RawDocument {
            id: "g1".into(),
            text: text.into(),
            year: None,
            gold_spans: spans
                .iter()
                .map(|&(start, end)| GoldSpan {
                    start,
                    end,
                    entity: "Some Entity".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn gold_alignment() {
        // tokens: a(0..1) b(2..3) c(4..5) deep(6..10) e(11..12)
        let text = "a b c deep e";
        let tokens = tokenize_with_offsets(text);
        let exact = apply_gold_spans(&gold_doc(text, &[(6, 10)]), &tokens).unwrap();
        assert_eq!((exact[0].token_start, exact[0].token_end), (3, 4));
        assert_eq!(exact[0].source, LinkSource::Gold);
        assert_eq!(exact[0].confidence, 1.0);
        assert_eq!(exact[0].entity_title, "Some_Entity");
        let range = apply_gold_spans(&gold_doc(text, &[(2, 10)]), &tokens).unwrap();
        assert_eq!((range[0].token_start, range[0].token_end), (1, 4));
        let mid = apply_gold_spans(&gold_doc(text, &[(7, 9)]), &tokens).unwrap();
        assert_eq!((mid[0].token_start, mid[0].token_end), (3, 4));
        let err = apply_gold_spans(&gold_doc(text, &[(6, 40)]), &tokens).unwrap_err();
        assert!(err.to_string().contains("g1"));
    }

    fn span(s: usize, e: usize, title: &str) -> LinkedSpan {
        LinkedSpan {
            token_start: s,
            token_end: e,
            entity_title: title.into(),
            confidence: 1.0,
            source: LinkSource::Gold,
        }
    }

    #[test]
    fn rewrite_examples() {
        let out = rewrite_terms(&toks(&["amazon", "rainforest"]), &[span(0, 2, "Amazon_rainforest")])
            .unwrap();
        assert_eq!(out, vec![Term::entity("Amazon_rainforest")]);
        assert_eq!(rewrite_terms(&toks(&["amazon"]), &[]).unwrap(), vec![Term::word("amazon")]);
        let out = rewrite_terms(&toks(&["the", "apple"]), &[span(1, 2, "Apple_Inc.")]).unwrap();
        assert_eq!(out, vec![Term::word("the"), Term::entity("Apple_Inc.")]);
        let err = rewrite_terms(&toks(&["a", "b", "c"]), &[span(0, 2, "X"), span(1, 3, "Y")]);
        assert!(err.is_err());
    }

    #[test]
    fn empty_table_degrades_to_words() {
        let doc = RawDocument {
            id: "d".into(),
            text: "Apple unveiled the iPhone.".into(),
            year: None,
            gold_spans: vec![],
        };
        let table = AliasTable::default();
        let terms = link_document(&doc, LinkerMode::Dict, Some(&table), 0.5).unwrap();
        let words: Vec<Term> = tokenize(&doc.text).into_iter().map(Term::word).collect();
        assert_eq!(terms, words);
        assert_eq!(link_document(&doc, LinkerMode::None, None, 0.5).unwrap(), words);
    }

    #[test]
    fn gold_takes_precedence_over_dictionary() {
        let doc = RawDocument {
            id: "d".into(),
            text: "apple pie".into(),
            year: None,
            gold_spans: vec![GoldSpan {
                start: 0,
                end: 5,
                entity: "Apple".into(),
            }],
        };
        let table = AliasTable::from_rows([("apple pie", "Apple_pie", 1.0)]);
        let gold = link_document(&doc, LinkerMode::Gold, Some(&table), 0.5).unwrap();
        assert_eq!(gold, vec![Term::entity("Apple"), Term::word("pie")]);
        let dict = link_document(&doc, LinkerMode::Dict, Some(&table), 0.5).unwrap();
        assert_eq!(dict, vec![Term::entity("Apple_pie")]);
    }

    proptest! {
        #[test]
        fn rewrite_length_and_greedy_spans(tokens in prop::collection::vec(0u8..5, 0..40), thr in 0.0f64..1.0) {
            let vocab = ["a", "b", "c", "d", "e"];
            let tokens: Vec<String> = tokens.iter().map(|&i| vocab[i as usize].to_string()).collect();
            let table = AliasTable::from_rows([
                ("a", "A", 0.9), ("a b", "AB", 0.6), ("b c d", "BCD", 0.7), ("e", "E", 0.3),
            ]);
            let spans = link_dictionary(&tokens, &table, thr);
            for w in spans.windows(2) {
                prop_assert!(w[0].token_end <= w[1].token_start);
            }
            let terms = rewrite_terms(&tokens, &spans).unwrap();
            let covered: usize = spans.iter().map(|s| s.token_end - s.token_start).sum();
            prop_assert_eq!(terms.len(), tokens.len() - covered + spans.len());
            prop_assert_eq!(link_dictionary(&tokens, &table, thr), spans);
        }
    }
}
