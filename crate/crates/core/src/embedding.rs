//! Pretrained word/entity vectors and the frozen embedding matrix built from
//! them.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Term, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Inserts a vector; returns false (keeping the old one) on duplicates.
    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) -> Result<bool> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} in a store of dimension {}",
                v.len(),
                self.dim
            )));
        }
        let key = key.into();
        if self.vectors.contains_key(&key) {
            return Ok(false);
        }
        self.vectors.insert(key, v);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    /// Loads a word2vec-style text file, optionally bzip2-compressed
    /// (`.bz2`). When `keep` is given only those keys are retained.
    pub fn load(path: &Path, expected_dim: Option<usize>, keep: Option<&HashSet<String>>) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "bz2") {
            Box::new(bzip2::read::MultiBzDecoder::new(f))
        } else {
            Box::new(f)
        };
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing header line")),
        };
        let hdr: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match hdr.as_slice() {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(Error::parse(path, 1, "header must be \"<count> <dim>\"")),
            },
            _ => return Err(Error::parse(path, 1, "header must be \"<count> <dim>\"")),
        };
        if let Some(e) = expected_dim {
            if e != dim {
                return Err(Error::parse(
                    path,
                    1,
                    format!("embedding dimension {dim} does not match expected {e}"),
                ));
            }
        }
        let mut store = EmbeddingStore::new(dim);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            let mut fields = line.split_whitespace();
            let key = fields.next().expect("non-empty line has a field");
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if keep.is_some_and(|k| !k.contains(key)) {
                continue;
            }
            let mut v = Vec::with_capacity(dim);
            for s in values {
                let x: f64 = s
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad float {s:?}")))?;
                v.push(x);
            }
            if !store.insert(key, v)? {
                log::warn!("{}:{lineno}: duplicate key {key:?}; keeping first", path.display());
            }
        }
        if rows != count {
            log::warn!(
                "{}: header announces {count} rows but file has {rows}",
                path.display()
            );
        }
        Ok(store)
    }

    /// Writes the store in text format with keys sorted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.vectors.len(), self.dim).map_err(io)?;
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            write!(w, "{k}").map_err(io)?;
            for x in &self.vectors[k] {
                write!(w, " {x}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Lookup key of a term in a pretrained store.
pub fn store_key(term: &Term) -> &str {
    term.surface()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSource {
    WordVector,
    EntityVector,
    Fallback,
}

/// The frozen L x V matrix whose column v embeds vocabulary term v.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rho: Array2<f64>,
    pub sources: Vec<ColumnSource>,
}

impl EmbeddingMatrix {
    pub fn from_array(rho: Array2<f64>) -> Self {
        let v = rho.ncols();
        EmbeddingMatrix {
            rho,
            sources: vec![ColumnSource::WordVector; v],
        }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.rho.ncols()
    }

    pub fn fallback_count(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| **s == ColumnSource::Fallback)
            .count()
    }
}

/// Deterministic unit vector derived from the term surface.
pub fn fallback_vector(surface: &str, dim: usize) -> Vec<f64> {
    let mut r = rng::seeded(rng::fnv1a(surface.as_bytes()));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub const DEFAULT_MAX_FALLBACK: f64 = 0.5;

/// Assembles the embedding matrix in vocabulary id order.
pub fn build_rho(vocab: &Vocabulary, store: &EmbeddingStore, max_fallback: f64) -> Result<EmbeddingMatrix> {
    let dim = store.dim();
    let mut rho = Array2::zeros((dim, vocab.len()));
    let mut sources = Vec::with_capacity(vocab.len());
    for (v, term) in vocab.terms().iter().enumerate() {
        let (col, src) = match store.get(store_key(term)) {
            Some(x) if term.is_entity() => (x.to_vec(), ColumnSource::EntityVector),
            Some(x) => (x.to_vec(), ColumnSource::WordVector),
            None => (fallback_vector(term.surface(), dim), ColumnSource::Fallback),
        };
        for (l, x) in col.into_iter().enumerate() {
            rho[[l, v]] = x;
        }
        sources.push(src);
    }
    let m = EmbeddingMatrix { rho, sources };
    let frac = m.fallback_count() as f64 / vocab.len() as f64;
    if frac > max_fallback {
        return Err(Error::Data(format!(
            "embedding coverage too low: {} of {} columns ({:.1}%) have no pretrained vector",
            m.fallback_count(),
            vocab.len(),
            100.0 * frac
        )));
    }
    Ok(m)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_text_format() {
        let f = file("3 4\napple 1 0 0 0\nENTITY/Apple_Inc. 0 1 0 0\npie 0 0 1 0.5\n");
        let s = EmbeddingStore::load(f.path(), Some(4), None).unwrap();
        assert_eq!((s.dim(), s.len()), (4, 3));
        assert_eq!(s.get("ENTITY/Apple_Inc.").unwrap(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.get("pie").unwrap()[3], 0.5);
    }

    #[test]
    fn short_row_is_an_error_with_row_number() {
        let f = file("2 4\napple 1 0 0 0\npie 0 0 1\n");
        match EmbeddingStore::load(f.path(), None, None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let f = file("1 4\napple 1 0 0 0\n");
        assert!(EmbeddingStore::load(f.path(), Some(3), None).is_err());
    }

    #[test]
    fn duplicate_keys_keep_first_and_filter_applies() {
        let f = file("3 2\na 1 0\na 0 1\nb 1 1\n");
        let s = EmbeddingStore::load(f.path(), None, None).unwrap();
        assert_eq!(s.get("a").unwrap(), &[1.0, 0.0]);
        let keep: HashSet<String> = ["b".to_string()].into();
        let s = EmbeddingStore::load(f.path(), None, Some(&keep)).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.get("a").is_none());
    }

    #[test]
    fn reads_bzip2() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt.bz2");
        let mut enc = bzip2::write::BzEncoder::new(File::create(&p).unwrap(), bzip2::Compression::fast());
        enc.write_all(b"1 2\nx 0.5 -1.5\n").unwrap();
        enc.finish().unwrap();
        let s = EmbeddingStore::load(&p, Some(2), None).unwrap();
        assert_eq!(s.get("x").unwrap(), &[0.5, -1.5]);
    }

    fn small_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2);
        s.insert("apple", vec![1.0, 2.0]).unwrap();
        s.insert("ENTITY/Apple_Inc.", vec![3.0, 4.0]).unwrap();
        s.insert("pie", vec![5.0, 6.0]).unwrap();
        s
    }

    #[test]
    fn rho_columns_follow_vocabulary() {
        let s = small_store();
        let vocab = Vocabulary::from_terms(vec![Term::word("apple"), Term::entity("Apple Inc.")]).unwrap();
        let m = build_rho(&vocab, &s, DEFAULT_MAX_FALLBACK).unwrap();
        assert_eq!(m.rho.column(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(m.rho.column(1).to_vec(), vec![3.0, 4.0]);
        assert_eq!(m.sources, vec![ColumnSource::WordVector, ColumnSource::EntityVector]);

        let swapped = Vocabulary::from_terms(vec![Term::entity("Apple Inc."), Term::word("apple")]).unwrap();
        let m2 = build_rho(&swapped, &s, DEFAULT_MAX_FALLBACK).unwrap();
        assert_eq!(m2.rho.column(0), m.rho.column(1));
        assert_eq!(m2.rho.column(1), m.rho.column(0));
        assert_eq!(build_rho(&vocab, &s, 0.5).unwrap(), m);
    }

    #[test]
    fn missing_terms_fall_back() {
        let s = small_store();
        let vocab = Vocabulary::from_terms(vec![Term::word("apple"), Term::word("tart"), Term::word("pie")]).unwrap();
        let m = build_rho(&vocab, &s, DEFAULT_MAX_FALLBACK).unwrap();
        assert_eq!(m.sources[1], ColumnSource::Fallback);
        let col = m.rho.column(1).to_vec();
        assert!((col.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(col, fallback_vector("tart", 2));

        let mostly_missing = Vocabulary::from_terms(vec![Term::word("x"), Term::word("y"), Term::word("pie")]).unwrap();
        let err = build_rho(&mostly_missing, &s, DEFAULT_MAX_FALLBACK).unwrap_err();
        assert!(err.to_string().contains("embedding coverage too low"));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            la in 0.01f64..100.0,
            mb in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let c = cosine_similarity(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * la).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * mb).collect();
            prop_assert!((c - cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-12);
        }
    }
}
