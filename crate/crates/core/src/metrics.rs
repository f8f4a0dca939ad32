//! Corpus-level BLEU-4 and CIDEr over tokenised captions.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalEntry {
    pub fn new(
        id: impl Into<String>,
        hypothesis: Vec<String>,
        references: Vec<Vec<String>>,
    ) -> Self {
        Self {
            id: id.into(),
            hypothesis,
            references,
        }
    }
}

fn check(corpus: &[EvalEntry]) -> Result<()> {
    if corpus.is_empty() {
        return Err(invalid("evaluation corpus is empty"));
    }
    if let Some(e) = corpus.iter().find(|e| e.references.is_empty()) {
        return Err(invalid(format!("entry `{}` has no references", e.id)));
    }
    Ok(())
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over 1..=4-grams, clipped counts and
/// closest-reference brevity penalty. No smoothing.
pub fn bleu4(corpus: &[EvalEntry]) -> Result<f64> {
    check(corpus)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for e in corpus {
        let c = e.hypothesis.len();
        hyp_len += c;
        ref_len += e
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("non-empty references");
        for n in 1..=MAX_N {
            let hyp = ngrams(&e.hypothesis, n);
            let mut max_ref: Counts = HashMap::new();
            for r in &e.references {
                for (g, k) in ngrams(r, n) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(k);
                }
            }
            for (g, k) in &hyp {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_precision.exp())
}

/// Per-entry CIDEr scores, each in `[0, 10]`.
///
/// Document frequencies count events whose reference set contains the
/// n-gram. With a single event every IDF is `ln 1 = 0`; unit weights are
/// used instead.
pub fn cider_per_entry(corpus: &[EvalEntry]) -> Result<Vec<f64>> {
    check(corpus)?;
    let docs = corpus.len() as f64;
    let mut scores = vec![0.0; corpus.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for e in corpus {
            let seen: HashSet<&[String]> = e
                .references
                .iter()
                .flat_map(|r| ngrams(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| -> f64 {
            if corpus.len() == 1 {
                1.0
            } else {
                (docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln()
            }
        };
        let weigh = |tokens: &[String]| -> HashMap<Vec<String>, f64> {
            let counts = ngrams(tokens, n);
            let len: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, k)| (g.to_vec(), k as f64 / len as f64 * idf(g)))
                .collect()
        };
        for (score, e) in scores.iter_mut().zip(corpus) {
            let hyp = weigh(&e.hypothesis);
            let sim: f64 = e
                .references
                .iter()
                .map(|r| cosine(&hyp, &weigh(r)))
                .sum::<f64>()
                / e.references.len() as f64;
            *score += 10.0 * sim / MAX_N as f64;
        }
    }
    Ok(scores)
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub fn cider(corpus: &[EvalEntry]) -> Result<f64> {
    let per = cider_per_entry(corpus)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub id: String,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub cider: f64,
    pub per_sentence: Vec<SentenceScore>,
}

pub fn evaluate(corpus: &[EvalEntry]) -> Result<EvalReport> {
    let per = cider_per_entry(corpus)?;
    Ok(EvalReport {
        bleu4: bleu4(corpus)?,
        cider: per.iter().sum::<f64>() / per.len() as f64,
        per_sentence: corpus
            .iter()
            .zip(per)
            .map(|(e, cider)| SentenceScore {
                id: e.id.clone(),
                cider,
            })
            .collect(),
    })
}
