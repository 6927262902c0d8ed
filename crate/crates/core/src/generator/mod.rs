//! A small pre-norm decoder-only transformer conditioned on a prefix.
//!
//! The prefix `(video, SEP, caption, SEP, history, SEP, question)` is
//! attended bidirectionally; answer positions see the whole prefix and the
//! answer tokens up to themselves. Prefix keys and values never depend on
//! the answer, so decoding computes them once and then feeds one token at
//! a time.

mod decode;

pub use decode::{decode, beam_score, Hypothesis};

use crate::corpus::{embed, BOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Tensor, Var};

/// Per-layer weights.
#[derive(Clone, Copy)]
pub struct BlockWeights<'t> {
    pub ln1: (Var<'t>, Var<'t>),
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub ln2: (Var<'t>, Var<'t>),
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Decoder weights bound to a tape.
#[derive(Clone)]
pub struct DecoderWeights<'t> {
    pub embedding: Var<'t>,
    pub positions: Var<'t>,
    pub blocks: Vec<BlockWeights<'t>>,
    pub ln_f: (Var<'t>, Var<'t>),
    /// `d x |V|`, or `None` when the output layer reuses the embedding.
    pub out: Option<Var<'t>>,
    pub out_bias: Var<'t>,
    pub heads: usize,
    pub eps: f64,
}

/// Names and shapes of every decoder parameter.
pub fn decoder_param_shapes(
    d: usize,
    ffn: usize,
    layers: usize,
    vocab: usize,
    max_positions: usize,
    tie_output: bool,
) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![("decoder.pos".to_string(), vec![max_positions, d])];
    for l in 0..layers {
        let p = |s: &str| format!("decoder.block{l}.{s}");
        v.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.w_q"), vec![d, d]),
            (p("attn.w_k"), vec![d, d]),
            (p("attn.w_v"), vec![d, d]),
            (p("attn.w_o"), vec![d, d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("ffn.w1"), vec![d, ffn]),
            (p("ffn.b1"), vec![ffn]),
            (p("ffn.w2"), vec![ffn, d]),
            (p("ffn.b2"), vec![d]),
        ]);
    }
    v.push(("decoder.ln_f.gamma".into(), vec![d]));
    v.push(("decoder.ln_f.beta".into(), vec![d]));
    if !tie_output {
        v.push(("decoder.out.weight".into(), vec![d, vocab]));
    }
    v.push(("decoder.out.bias".into(), vec![vocab]));
    v
}

impl<'t> DecoderWeights<'t> {
    /// Reads the decoder parameters plus the shared `embedding` table.
    pub fn from_bound(bound: &Bound<'t>, layers: usize, heads: usize, eps: f64) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                let g = |s: &str| bound.get(&format!("decoder.block{l}.{s}"));
                BlockWeights {
                    ln1: (g("ln1.gamma"), g("ln1.beta")),
                    w_q: g("attn.w_q"),
                    w_k: g("attn.w_k"),
                    w_v: g("attn.w_v"),
                    w_o: g("attn.w_o"),
                    ln2: (g("ln2.gamma"), g("ln2.beta")),
                    w1: g("ffn.w1"),
                    b1: g("ffn.b1"),
                    w2: g("ffn.w2"),
                    b2: g("ffn.b2"),
                }
            })
            .collect();
        Self {
            embedding: bound.get("embedding"),
            positions: bound.get("decoder.pos"),
            blocks,
            ln_f: (bound.get("decoder.ln_f.gamma"), bound.get("decoder.ln_f.beta")),
            out: bound.try_get("decoder.out.weight"),
            out_bias: bound.get("decoder.out.bias"),
            heads,
            eps,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn capacity(&self) -> usize {
        self.positions.rows()
    }

    fn positions_for(&self, start: usize, n: usize) -> Result<Var<'t>> {
        if start + n > self.capacity() {
            return Err(Error::Length {
                len: start + n,
                capacity: self.capacity(),
            });
        }
        Ok(self.positions.slice_rows(start, start + n))
    }

    /// Runs `x` (rows at absolute positions `start..`) through every block.
    /// `past` holds per-layer keys and values of positions `0..start`.
    fn run_blocks(
        &self,
        mut x: Var<'t>,
        past: Option<&[(Var<'t>, Var<'t>)]>,
        start: usize,
        prefix_len: usize,
    ) -> Result<(Var<'t>, Vec<(Var<'t>, Var<'t>)>)> {
        let n = x.rows();
        let total = start + n;
        let allowed: Vec<bool> = (0..n)
            .flat_map(|i| (0..total).map(move |c| c < prefix_len.max(start + i + 1)))
            .collect();
        let mask = (!allowed.iter().all(|&a| a)).then_some(allowed.as_slice());
        let d = x.value().cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let a = x.layer_norm(b.ln1.0, b.ln1.1, self.eps)?;
            let q = a.matmul(b.w_q)?;
            let mut k = a.matmul(b.w_k)?;
            let mut v = a.matmul(b.w_v)?;
            if let Some(p) = past {
                k = Var::concat_rows(&[p[l].0, k])?;
                v = Var::concat_rows(&[p[l].1, v])?;
            }
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = |m: Var<'t>| m.slice_cols(h * dh, (h + 1) * dh);
                let att = cols(q).matmul_nt(cols(k))?.scale(scale).softmax(mask)?;
                heads.push(att.matmul(cols(v))?);
            }
            x = x.add(Var::concat_cols(&heads)?.matmul(b.w_o)?)?;
            let f = x.layer_norm(b.ln2.0, b.ln2.1, self.eps)?;
            let f = f.matmul(b.w1)?.add_row(b.b1)?.relu().matmul(b.w2)?.add_row(b.b2)?;
            x = x.add(f)?;
            kv.push((k, v));
        }
        Ok((x, kv))
    }

    fn logits(&self, hidden: Var<'t>) -> Result<Var<'t>> {
        let h = hidden.layer_norm(self.ln_f.0, self.ln_f.1, self.eps)?;
        let z = match self.out {
            Some(w) => h.matmul(w)?,
            None => h.matmul_nt(self.embedding)?,
        };
        z.add_row(self.out_bias)
    }
}

/// Stacks the prefix segments with SEP rows between them (no positions).
/// Missing segments contribute no rows.
pub fn concat_prefix<'t>(
    video: Var<'t>,
    caption: Option<Var<'t>>,
    history: Option<Var<'t>>,
    question: Var<'t>,
    sep: Var<'t>,
) -> Result<Var<'t>> {
    let mut parts = vec![video, sep];
    parts.extend(caption);
    parts.push(sep);
    parts.extend(history);
    parts.extend([sep, question]);
    Var::concat_rows(&parts)
}

/// [`concat_prefix`] with the SEP embedding looked up and positional
/// embeddings added.
pub fn build_prefix<'t>(
    weights: &DecoderWeights<'t>,
    video: Var<'t>,
    caption: Option<Var<'t>>,
    history: Option<Var<'t>>,
    question: Var<'t>,
) -> Result<Var<'t>> {
    let sep = weights.embedding.row(crate::corpus::SEP);
    let rows = concat_prefix(video, caption, history, question, sep)?;
    rows.add(weights.positions_for(0, rows.rows())?)
}

/// Keys and values of a prefix, computed once per sample.
pub struct PrefixCache<'t> {
    pub len: usize,
    pub kv: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> PrefixCache<'t> {
    pub fn new(weights: &DecoderWeights<'t>, prefix: Var<'t>) -> Result<Self> {
        let len = prefix.rows();
        let (_, kv) = weights.run_blocks(prefix, None, 0, len)?;
        Ok(Self { len, kv })
    }
}

/// Incremental state of one partial answer.
#[derive(Clone)]
pub struct DecodeState<'t> {
    /// Answer tokens fed so far, starting with BOS.
    pub fed: Vec<usize>,
    kv: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> DecodeState<'t> {
    pub fn start(cache: &PrefixCache<'t>) -> Self {
        Self {
            fed: vec![],
            kv: cache.kv.clone(),
        }
    }

    /// Feeds `token` and returns the next-token logits.
    pub fn feed(
        &self,
        weights: &DecoderWeights<'t>,
        cache: &PrefixCache<'t>,
        token: usize,
    ) -> Result<(Tensor, Self)> {
        let pos = cache.len + self.fed.len();
        let x = embed(&[token], weights.embedding)?.add(weights.positions_for(pos, 1)?)?;
        let (h, kv) = weights.run_blocks(x, Some(&self.kv), pos, cache.len)?;
        let logits = weights.logits(h)?.value();
        let mut fed = self.fed.clone();
        fed.push(token);
        Ok(((*logits).clone(), Self { fed, kv }))
    }
}

/// Teacher-forced logits: row `i` scores the token following
/// `[BOS] + answer[..i]`.
pub fn answer_logits<'t>(
    weights: &DecoderWeights<'t>,
    prefix: Var<'t>,
    answer: &[usize],
) -> Result<Var<'t>> {
    let p = prefix.rows();
    let mut input = vec![BOS];
    input.extend_from_slice(answer);
    let x = embed(&input, weights.embedding)?.add(weights.positions_for(p, input.len())?)?;
    let all = Var::concat_rows(&[prefix, x])?;
    let (h, _) = weights.run_blocks(all, None, 0, p)?;
    weights.logits(h.slice_rows(p, p + input.len()))
}

/// Logits for the token after `generated`, computed without any cache.
pub fn next_token_logits<'t>(
    weights: &DecoderWeights<'t>,
    prefix: Var<'t>,
    generated: &[usize],
) -> Result<Tensor> {
    let z = answer_logits(weights, prefix, generated)?.value();
    Ok(Tensor::vector(z.row(generated.len()).to_vec()))
}

/// Summed negative log-likelihood of `gold` (which ends with EOS); PAD
/// targets are skipped.
pub fn mle_loss<'t>(weights: &DecoderWeights<'t>, prefix: Var<'t>, gold: &[usize]) -> Result<Var<'t>> {
    let Some((_, fed)) = gold.split_last() else {
        return Err(Error::Input("gold answer is empty".into()));
    };
    let targets: Vec<Option<usize>> = gold.iter().map(|&t| (t != PAD).then_some(t)).collect();
    answer_logits(weights, prefix, fed)?.cross_entropy(&targets)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::numerics::{seeded_rng, uniform_init, ParamStore};

    pub fn store(d: usize, layers: usize, vocab: usize, seed: u64, tie: bool) -> ParamStore {
        let mut rng = seeded_rng(seed);
        let mut s = ParamStore::new();
        s.insert("embedding", uniform_init(&mut rng, &[vocab, d], 1));
        for (name, shape) in decoder_param_shapes(d, 2 * d, layers, vocab, 64, tie) {
            let t = if name.ends_with("gamma") {
                Tensor::full(&shape, 1.0)
            } else {
                uniform_init(&mut rng, &shape, shape[0])
            };
            s.insert(name, t);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::store;
    use super::*;
    use crate::corpus::{EOS, SEP};
    use crate::numerics::{seeded_rng, uniform_init, Tape};

    #[test]
    fn prefix_layout_and_sep_rows() {
        let tape = Tape::new();
        let s = store(8, 1, 10, 1, false);
        let b = s.bind_frozen(&tape);
        let w = DecoderWeights::from_bound(&b, 1, 2, 1e-5);
        let seg = |n: usize, seed| tape.constant(uniform_init(&mut seeded_rng(seed), &[n, 8], 1));
        let sep = w.embedding.row(SEP);
        let rows = concat_prefix(seg(4, 2), Some(seg(3, 3)), None, seg(2, 4), sep).unwrap();
        assert_eq!(rows.rows(), 4 + 3 + 2 + 3);
        let e = w.embedding.value();
        for r in [4, 8, 9] {
            assert_eq!(rows.value().row(r), e.row(SEP));
        }
        let rows = concat_prefix(seg(4, 2), Some(seg(3, 3)), Some(seg(6, 5)), seg(2, 4), sep).unwrap();
        assert_eq!(rows.rows(), 4 + 3 + 6 + 2 + 3);
        assert!(build_prefix(&w, seg(40, 2), Some(seg(20, 3)), None, seg(2, 4)).is_err());
    }

    #[test]
    fn cached_feed_matches_full_forward() {
        let tape = Tape::new();
        let s = store(8, 2, 12, 2, false);
        let b = s.bind_frozen(&tape);
        let w = DecoderWeights::from_bound(&b, 2, 2, 1e-5);
        let prefix = tape.constant(uniform_init(&mut seeded_rng(3), &[5, 8], 1));
        let cache = PrefixCache::new(&w, prefix).unwrap();
        let mut state = DecodeState::start(&cache);
        let answer = [6, 9, 7];
        for i in 0..=answer.len() {
            let tok = if i == 0 { BOS } else { answer[i - 1] };
            let (z, next) = state.feed(&w, &cache, tok).unwrap();
            let full = next_token_logits(&w, prefix, &answer[..i]).unwrap();
            for (a, b) in z.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            state = next;
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let tape = Tape::new();
        let s = store(8, 2, 12, 4, true);
        let b = s.bind_frozen(&tape);
        let w = DecoderWeights::from_bound(&b, 2, 4, 1e-5);
        let prefix = tape.constant(uniform_init(&mut seeded_rng(5), &[4, 8], 1));
        let a = answer_logits(&w, prefix, &[5, 6, 7, 8]).unwrap().value();
        let b2 = answer_logits(&w, prefix, &[5, 6, 11, 10]).unwrap().value();
        for r in 0..3 {
            assert_eq!(a.row(r), b2.row(r));
        }
        assert_ne!(a.row(3), b2.row(3));
    }

    #[test]
    fn loss_closed_forms() {
        let tape = Tape::new();
        let mut s = store(8, 1, 10, 6, false);
        // zero output weights and bias: uniform logits
        s.insert("decoder.out.weight", Tensor::zeros(&[8, 10]));
        s.insert("decoder.out.bias", Tensor::zeros(&[10]));
        let b = s.bind(&tape);
        let w = DecoderWeights::from_bound(&b, 1, 2, 1e-5);
        let prefix = tape.constant(uniform_init(&mut seeded_rng(7), &[3, 8], 1));
        let gold = [5, 6, 7, EOS];
        let loss = mle_loss(&w, prefix, &gold).unwrap().value().item();
        assert!((loss - 4.0 * (10f64).ln()).abs() < 1e-12);
        let padded = [5, PAD, 7, EOS];
        let loss = mle_loss(&w, prefix, &padded).unwrap().value().item();
        assert!((loss - 3.0 * (10f64).ln()).abs() < 1e-12);
        assert!(matches!(mle_loss(&w, prefix, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_replays_per_step_logits() {
        let tape = Tape::new();
        let s = store(8, 2, 10, 8, false);
        let b = s.bind_frozen(&tape);
        let w = DecoderWeights::from_bound(&b, 2, 2, 1e-5);
        let prefix = tape.constant(uniform_init(&mut seeded_rng(9), &[3, 8], 1));
        let gold = [5, 9, EOS];
        let loss = mle_loss(&w, prefix, &gold).unwrap().value().item();
        let mut expected = 0.0;
        for i in 0..gold.len() {
            let z = next_token_logits(&w, prefix, &gold[..i]).unwrap();
            let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            expected += lse - z.data()[gold[i]];
        }
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn parameter_count_is_a_function_of_sizes() {
        let count = |d, l, v| -> usize {
            decoder_param_shapes(d, 2 * d, l, v, 64, false)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum()
        };
        assert_eq!(count(8, 2, 10), 64 * 8 + 2 * (4 * 8 + 4 * 64 + 2 * 128 + 16 + 8) + 16 + 80 + 10);
    }
}
