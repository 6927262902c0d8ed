use rand::Rng;

use super::{DecodeState, DecoderWeights, PrefixCache};
use crate::config::{DecodeConfig, Strategy};
use crate::corpus::{BOS, EOS, PAD, SEP};
use crate::error::Result;
use crate::numerics::{cosine_similarity, seeded_rng, softmax_row, Tensor, Var};

/// A finished answer: generated ids ending in EOS and their summed
/// log-probability (a forced EOS adds nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
}

/// Length-normalised beam score `log P / len^penalty`, EOS included.
pub fn beam_score(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len as f64).powf(penalty)
}

fn generatable(id: usize) -> bool {
    !matches!(id, PAD | SEP | BOS)
}

fn probs(logits: &Tensor) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits.data(), generatable, &mut p);
    p
}

fn log_probs(logits: &Tensor) -> Vec<f64> {
    let z = logits.data();
    let max = (0..z.len())
        .filter(|&i| generatable(i))
        .map(|i| z[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..z.len())
        .filter(|&i| generatable(i))
        .map(|i| (z[i] - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    (0..z.len())
        .map(|i| if generatable(i) { z[i] - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Highest-scoring index; the lower id wins ties.
fn argmax(scores: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, s) in scores {
        if best.0 == usize::MAX || s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Generates an answer for `prefix` with the configured strategy.
pub fn decode<'t>(
    weights: &DecoderWeights<'t>,
    prefix: Var<'t>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let cache = PrefixCache::new(weights, prefix)?;
    if cfg.strategy == Strategy::Beam {
        return beam(weights, &cache, cfg);
    }
    let mut rng = seeded_rng(cfg.seed);
    let table = weights.embedding.value();
    let (mut logits, mut state) = DecodeState::start(&cache).feed(weights, &cache, BOS)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 0..cfg.max_len {
        let p = probs(&logits);
        let tok = match cfg.strategy {
            Strategy::Greedy | Strategy::Beam => argmax(p.iter().copied().enumerate()),
            Strategy::Nucleus => nucleus(&p, cfg.top_p, &mut rng),
            Strategy::Contrastive => contrastive(&p, &tokens, &table, cfg.alpha, cfg.candidate_k),
        };
        log_prob += p[tok].ln();
        tokens.push(tok);
        if tok == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                truncated: false,
            });
        }
        if step + 1 < cfg.max_len {
            (logits, state) = state.feed(weights, &cache, tok)?;
        }
    }
    tokens.push(EOS);
    Ok(Hypothesis {
        tokens,
        log_prob,
        truncated: true,
    })
}

fn nucleus(p: &[f64], top_p: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (n, &i) in order.iter().enumerate() {
        mass += p[i];
        if mass >= top_p {
            keep = n + 1;
            break;
        }
    }
    let kept = &order[..keep];
    let total: f64 = kept.iter().map(|&i| p[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in kept {
        u -= p[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("some token has mass")
}

fn contrastive(p: &[f64], previous: &[usize], table: &Tensor, alpha: f64, k: usize) -> usize {
    let mut order: Vec<usize> = (0..p.len()).filter(|&i| generatable(i)).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    order.sort_unstable();
    argmax(order.into_iter().map(|c| {
        let penalty = previous
            .iter()
            .map(|&g| cosine_similarity(table.row(c), table.row(g)))
            .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
            .unwrap_or(0.0);
        (c, (1.0 - alpha) * p[c] - alpha * penalty)
    }))
}

struct Live<'t> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecodeState<'t>,
    next: Vec<f64>,
}

/// Each step keeps the `beam_width` best expansions by raw log-probability
/// (lower parent index, then lower id, on ties); expansions ending in EOS
/// leave the frontier as finished answers. Whatever is still live after
/// `max_len` steps is closed with a forced EOS. The result maximises
/// [`beam_score`].
fn beam<'t>(
    weights: &DecoderWeights<'t>,
    cache: &PrefixCache<'t>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let (z, state) = DecodeState::start(cache).feed(weights, cache, BOS)?;
    let mut live = vec![Live {
        tokens: vec![],
        log_prob: 0.0,
        state,
        next: log_probs(&z),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(usize, usize, f64)> = live
            .iter()
            .enumerate()
            .flat_map(|(h, l)| {
                l.next
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.is_finite())
                    .map(move |(t, s)| (h, t, l.log_prob + s))
            })
            .collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.beam_width);
        let last = step + 1 == cfg.max_len;
        let mut next_live = Vec::with_capacity(cands.len());
        for (h, t, lp) in cands {
            let mut tokens = live[h].tokens.clone();
            tokens.push(t);
            if t == EOS || last {
                let truncated = t != EOS;
                if truncated {
                    tokens.push(EOS);
                }
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    truncated,
                });
            } else {
                let (z, state) = live[h].state.feed(weights, cache, t)?;
                next_live.push(Live {
                    tokens,
                    log_prob: lp,
                    state,
                    next: log_probs(&z),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    let mut best: Option<(f64, Hypothesis)> = None;
    for h in finished {
        let s = beam_score(h.log_prob, h.tokens.len(), cfg.length_penalty);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, h));
        }
    }
    Ok(best.expect("max_len >= 1 finishes at least one hypothesis").1)
}
