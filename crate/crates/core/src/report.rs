//! Topic and topic-transition reports.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTerm {
    pub id: usize,
    pub term: String,
    pub prob: f64,
}

/// The `n` most probable terms; equal probabilities keep id order.
pub fn top_terms(beta_row: &[f64], vocab: &[String], n: usize) -> Result<Vec<RankedTerm>> {
    if n == 0 {
        return Err(Error::Config("number of top terms must be at least 1".into()));
    }
    if beta_row.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "topic has {} entries but the vocabulary has {}",
            beta_row.len(),
            vocab.len()
        )));
    }
    let mut ids: Vec<usize> = (0..beta_row.len()).collect();
    ids.sort_by(|&a, &b| beta_row[b].total_cmp(&beta_row[a]).then(a.cmp(&b)));
    Ok(ids
        .into_iter()
        .take(n)
        .map(|id| RankedTerm {
            id,
            term: vocab[id].clone(),
            prob: beta_row[id],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub corpus_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub topic: usize,
    /// one ranked list per slice
    pub slices: Vec<Vec<RankedTerm>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub model: ModelKind,
    pub topics: usize,
    pub slices: usize,
    pub top_n: usize,
    pub seed: u64,
    pub corpus_hash: String,
    pub entries: Vec<TopicEntry>,
}

fn vocab_of(model: &TrainedModel) -> Result<&[String]> {
    if model.vocab.len() != model.dims.vocab {
        return Err(Error::Data("model carries no vocabulary; cannot label topics".into()));
    }
    Ok(&model.vocab)
}

fn build(model: &TrainedModel, n: usize, meta: &ReportMeta) -> Result<TopicReport> {
    let vocab = vocab_of(model)?;
    let entries = (0..model.dims.topics)
        .map(|k| {
            let slices = model
                .beta
                .iter()
                .map(|b| top_terms(b.row(k).as_slice().expect("contiguous"), vocab, n))
                .collect::<Result<Vec<_>>>()?;
            Ok(TopicEntry { topic: k, slices })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TopicReport {
        model: model.kind,
        topics: model.dims.topics,
        slices: model.beta.len(),
        top_n: n,
        seed: meta.seed,
        corpus_hash: meta.corpus_hash.clone(),
        entries,
    })
}

/// Top terms per topic for a static model (or per slice for a dynamic one).
pub fn topic_report(model: &TrainedModel, n: usize, meta: &ReportMeta) -> Result<TopicReport> {
    build(model, n, meta)
}

/// Top terms for every topic and time slice of a dynamic model.
pub fn transition_report(model: &TrainedModel, n: usize, meta: &ReportMeta) -> Result<TopicReport> {
    if !model.is_dynamic() {
        return Err(Error::Config(
            "transition reports need a dynamic model; use the static topic report for ETM".into(),
        ));
    }
    build(model, n, meta)
}

/// Plain-text grid per topic: ranks as rows, slices as columns.
pub fn render_table(report: &TopicReport) -> String {
    let mut out = String::new();
    for e in &report.entries {
        let mut cols: Vec<Vec<String>> = Vec::new();
        cols.push(
            std::iter::once("rank".to_string())
                .chain((1..=report.top_n).map(|r| r.to_string()))
                .collect(),
        );
        for (t, terms) in e.slices.iter().enumerate() {
            let head = if report.slices > 1 { format!("t={t}") } else { "terms".into() };
            let mut col = vec![head];
            col.extend((0..report.top_n).map(|r| terms.get(r).map_or(String::new(), |x| x.term.clone())));
            cols.push(col);
        }
        let widths: Vec<usize> = cols
            .iter()
            .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        out.push_str(&format!("Topic {}\n", e.topic));
        for row in 0..=report.top_n {
            let cells: Vec<String> = cols
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{:<w$}", c[row]))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// JSON formatter that prints every float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
}

/// Serializes with floats at 17 significant digits, for byte-stable output.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, TrainingLog};
    use ndarray::Array2;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn top_terms_examples() {
        let mut one_hot = vec![0.0; 10];
        one_hot[7] = 1.0;
        let t = top_terms(&one_hot, &vocab(10), 1).unwrap();
        assert_eq!(t[0].id, 7);
        let uniform = vec![0.1; 10];
        let ids: Vec<usize> = top_terms(&uniform, &vocab(10), 5).unwrap().iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let hand = [0.1, 0.3, 0.4, 0.2];
        let ids: Vec<usize> = top_terms(&hand, &vocab(4), 2).unwrap().iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![2, 1]);
        assert_eq!(top_terms(&hand, &vocab(4), 9).unwrap().len(), 4);
        assert!(top_terms(&hand, &vocab(4), 0).is_err());
    }

    fn dynamic_model(betas: Vec<Array2<f64>>) -> TrainedModel {
        let (k, v) = betas[0].dim();
        let t = betas.len();
        let dims = ModelDims { vocab: v, topics: k, embed: 2, slices: t, hidden: 2 };
        let total = crate::model::detm::DetmLayout::new(v, k, 2, t, 2).total;
        TrainedModel {
            kind: if t > 1 { ModelKind::Detm } else { ModelKind::Etm },
            dims,
            hyper: None,
            params: vec![0.0; total],
            beta: betas,
            log: TrainingLog::default(),
            vocab_fingerprint: String::new(),
            vocab: vec!["apple".into(), "ENTITY/Apple_Inc.".into(), "pie".into(), "orchard".into()],
        }
    }

    #[test]
    fn rising_term_climbs_the_ranking() {
        // term 1's mass rises monotonically across slices
        let masses = [0.05, 0.2, 0.35, 0.6];
        let betas: Vec<Array2<f64>> = masses
            .iter()
            .map(|&m| {
                let rest = (1.0 - m) / 3.0;
                Array2::from_shape_fn((1, 4), |(_, v)| if v == 1 { m } else { rest + 0.01 * v as f64 - 0.02 })
            })
            .collect();
        let model = dynamic_model(betas);
        let meta = ReportMeta { seed: 1, corpus_hash: "h".into() };
        let r = transition_report(&model, 4, &meta).unwrap();
        let ranks: Vec<usize> = r.entries[0]
            .slices
            .iter()
            .map(|s| s.iter().position(|t| t.id == 1).unwrap())
            .collect();
        assert!(ranks.windows(2).all(|w| w[1] <= w[0]), "{ranks:?}");
        assert_eq!(ranks[3], 0);
        let table = render_table(&r);
        assert!(table.contains("ENTITY/Apple_Inc."));
        assert!(table.contains("t=3"));
    }

    #[test]
    fn static_model_has_no_transition_report() {
        let b = Array2::from_elem((1, 4), 0.25);
        let model = dynamic_model(vec![b]);
        let meta = ReportMeta { seed: 1, corpus_hash: "h".into() };
        assert!(transition_report(&model, 2, &meta).is_err());
        let r = topic_report(&model, 2, &meta).unwrap();
        assert_eq!(r.slices, 1);
    }

    #[test]
    fn stable_json_uses_seventeen_digits() {
        let s = to_stable_json(&vec![0.1f64, 1.0, -2.5e-300]).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,1.0000000000000000e0,-2.5000000000000000e-300]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0].to_bits(), 0.1f64.to_bits());
    }
}
