//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr.
//!
//! Every function takes one token list per candidate and a list of
//! reference token lists per candidate.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

type Tokens = Vec<String>;

/// Floor for zero n-gram match counts in BLEU.
pub const BLEU_FLOOR: f64 = 1e-9;
/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;
/// Length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;

fn check(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Input("cannot score an empty corpus".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("sample {i} has no reference")));
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one sample.
fn clipped(cand: &[String], refs: &[Tokens], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `len`; the shorter one on ties.
fn closest_ref_len(len: usize, refs: &[Tokens]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .expect("non-empty references")
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let n = matched.len();
    let log_p: f64 = matched
        .iter()
        .zip(totals)
        .map(|(&m, &t)| ((m as f64).max(BLEU_FLOOR) / (t.max(1) as f64)).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len >= ref_len || cand_len == 0 && ref_len == 0 {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Cumulative corpus BLEU-`n` with a brevity penalty against the closest
/// reference lengths.
pub fn bleu_n(cands: &[Tokens], refs: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check(cands, refs)?;
    if n == 0 {
        return Err(Error::Input("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        for k in 1..=n {
            let (m, t) = clipped(c, r, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        c_len += c.len();
        r_len += closest_ref_len(c.len(), r);
    }
    Ok(bleu_from_counts(&matched, &totals, c_len, r_len))
}

/// Corpus modified `n`-gram precision (clipped matches over candidate
/// n-grams), without flooring.
pub fn ngram_precision(cands: &[Tokens], refs: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check(cands, refs)?;
    let (m, t) = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| clipped(c, r, n))
        .fold((0, 0), |(a, b), (m, t)| (a + m, b + t));
    Ok(if t == 0 { 0.0 } else { m as f64 / t as f64 })
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_sample(cand: &[String], refs: &[Tokens]) -> f64 {
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs {
        let l = lcs(cand, rf) as f64;
        if !cand.is_empty() {
            p = p.max(l / cand.len() as f64);
        }
        if !rf.is_empty() {
            r = r.max(l / rf.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over samples of the LCS F-measure, taking the best precision and
/// best recall over each sample's references.
pub fn rouge_l(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| rouge_sample(c, r)).sum::<f64>() / cands.len() as f64)
}

type Vector<'a> = HashMap<&'a [String], f64>;

struct Tfidf<'a> {
    vecs: [Vector<'a>; 4],
    norms: [f64; 4],
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &[HashMap<&[String], usize>; 4], log_n: f64) -> Tfidf<'a> {
    let mut vecs: [Vector<'a>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 0..4 {
        for (g, tf) in ngrams(tokens, n + 1) {
            let d = df[n].get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - d.ln());
            norms[n] += w * w;
            vecs[n].insert(g, w);
        }
        norms[n] = norms[n].sqrt();
    }
    Tfidf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

fn similarity(c: &Tfidf, r: &Tfidf, dampened: bool) -> [f64; 4] {
    let mut out = [0.0; 4];
    for n in 0..4 {
        if c.norms[n] == 0.0 || r.norms[n] == 0.0 {
            continue;
        }
        let dot: f64 = c.vecs[n]
            .iter()
            .filter_map(|(g, &w)| {
                r.vecs[n]
                    .get(g)
                    .map(|&v| if dampened { w.min(v) * v } else { w * v })
            })
            .sum();
        out[n] = dot / (c.norms[n] * r.norms[n]);
        if dampened {
            let delta = c.len as f64 - r.len as f64;
            out[n] *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
    }
    out
}

/// Per-sample CIDEr scores with document frequencies taken over the
/// reference sets of the whole corpus. `dampened` selects CIDEr-D.
pub fn cider_per_sample(cands: &[Tokens], refs: &[Vec<Tokens>], dampened: bool) -> Result<Vec<f64>> {
    check(cands, refs)?;
    let mut df: [HashMap<&[String], usize>; 4] = Default::default();
    for rs in refs {
        for n in 0..4 {
            let mut seen = std::collections::HashSet::new();
            for r in rs {
                seen.extend(ngrams(r, n + 1).into_keys());
            }
            for g in seen {
                *df[n].entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_n = (cands.len() as f64).ln();
    Ok(cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let cv = tfidf(c, &df, log_n);
            let total: f64 = rs
                .iter()
                .map(|r| similarity(&cv, &tfidf(r, &df, log_n), dampened).iter().sum::<f64>() / 4.0)
                .sum();
            10.0 * total / rs.len() as f64
        })
        .collect())
}

/// Corpus CIDEr: the mean of [`cider_per_sample`].
pub fn cider(cands: &[Tokens], refs: &[Vec<Tokens>], dampened: bool) -> Result<f64> {
    let s = cider_per_sample(cands, refs, dampened)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub samples: Vec<SampleScores>,
}

/// All metrics plus a per-sample breakdown.
pub fn evaluate(cands: &[Tokens], refs: &[Vec<Tokens>], cider_d: bool) -> Result<EvalReport> {
    check(cands, refs)?;
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = bleu_n(cands, refs, n + 1)?;
    }
    let ciders = cider_per_sample(cands, refs, cider_d)?;
    let samples = cands
        .iter()
        .zip(refs)
        .zip(&ciders)
        .map(|((c, r), &cider)| SampleScores {
            bleu: [1, 2, 3, 4].map(|n| {
                bleu_n(std::slice::from_ref(c), std::slice::from_ref(r), n).expect("checked")
            }),
            rouge_l: rouge_sample(c, r),
            cider,
        })
        .collect();
    Ok(EvalReport {
        bleu,
        rouge_l: rouge_l(cands, refs)?,
        cider: ciders.iter().sum::<f64>() / ciders.len() as f64,
        samples,
    })
}

/// Lowercased whitespace tokens.
pub fn tokens(s: &str) -> Tokens {
    crate::corpus::tokenize(s)
}
