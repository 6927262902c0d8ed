//! Independent oracles and random-instance builders shared by the
//! integration tests.
#![allow(dead_code)]

pub mod metric_fixture;

use std::collections::BTreeMap;

use isr_core::config::{Caps, ModelConfig};
use isr_core::corpus::{make_synthetic_corpus, Corpus, DialogSample, Grammar, PAD};
use isr_core::model::Model;
use isr_core::numerics::{seeded_rng, ParamStore, Tape, Tensor};
use isr_core::text_encoder::SearchMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A random search instance: enriched triplets as `3t` rows of width `d`
/// and a comparison map.
pub struct SearchInstance {
    pub rows: Vec<Vec<f64>>,
    pub t: usize,
    pub d: usize,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl SearchInstance {
    /// Entities are noisy copies of a few base directions so that matches
    /// happen at every threshold; some triplets are null (zero rows).
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let t = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=8);
        let bases: Vec<Vec<f64>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let noise = [0.0, 0.05, 0.3, 1.0][rng.gen_range(0..4)];
        let mut rows = Vec::with_capacity(3 * t);
        for _ in 0..t {
            let null = rng.gen_bool(0.15);
            for _ in 0..3 {
                let base = &bases[rng.gen_range(0..bases.len())];
                let scale = rng.gen_range(0.2..2.0);
                rows.push(
                    base.iter()
                        .map(|&x| if null { 0.0 } else { scale * x + noise * rng.gen_range(-1.0..1.0) })
                        .collect(),
                );
            }
        }
        let averaging = rng.gen_bool(0.5);
        let w = (0..2 * d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        if averaging {
                            if i % d == j { 0.5 } else { 0.0 }
                        } else {
                            rng.gen_range(-0.6..0.6)
                        }
                    })
                    .collect()
            })
            .collect();
        let b = (0..d).map(|_| if averaging { 0.0 } else { rng.gen_range(-0.1..0.1) }).collect();
        Self { rows, t, d, w, b }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rows).unwrap()
    }

    pub fn map(&self) -> SearchMap {
        SearchMap {
            weight: Tensor::from_rows(&self.w).unwrap(),
            bias: Tensor::vector(self.b.clone()),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Re-executes the search definition directly: returns the connection
/// matrix rows as `[subject, object]` flags and the `(utterance, slot)`
/// node list in search order.
pub fn oracle_search(inst: &SearchInstance, anchor_slot: usize, p: f64) -> (Vec<[bool; 2]>, Vec<(usize, usize)>) {
    let t = inst.t;
    let d = inst.d;
    let ent = |u: usize, s: usize| &inst.rows[3 * u + s];
    let mut h = ent(t - 1, anchor_slot).clone();
    let mut s = vec![[false, false]; t - 1];
    let mut nodes = vec![(t - 1, anchor_slot)];
    let mut tau = t - 1;
    while tau >= 1 {
        let u = tau - 1;
        let e0 = cos(&h, ent(u, 0));
        let e2 = cos(&h, ent(u, 2));
        let best = if e0 >= e2 { (0, e0) } else { (2, e2) };
        if best.1 > p {
            s[u][best.0 / 2] = true;
            nodes.push((u, best.0));
            let mut input = ent(u, best.0).clone();
            input.extend_from_slice(&h);
            let mut next = inst.b.clone();
            for j in 0..d {
                for (i, x) in input.iter().enumerate() {
                    next[j] += x * inst.w[i][j];
                }
            }
            h = next;
        }
        tau -= 1;
    }
    (s, nodes)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude errors are measured absolutely; central-difference
/// roundoff on this loss is around 1e-10.
pub const FLOOR: f64 = 1e-5;

pub fn small_model() -> (Model, Corpus) {
    let corpus = make_synthetic_corpus(21, 6, &Grammar::default())
        .unwrap()
        .to_corpus(&Caps::default())
        .unwrap();
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        iterations: 2,
        threshold: 0.3,
        decoder_layers: 2,
        ffn_dim: 32,
        max_positions: 96,
        ..ModelConfig::desk()
    };
    (Model::new(cfg, corpus.vocab.clone()).unwrap(), corpus)
}

fn loss_at(model: &Model, params: &ParamStore, sample: &DialogSample) -> f64 {
    let tape = Tape::new();
    let m = Model {
        params: params.clone(),
        ..model.clone()
    };
    let bound = m.params.bind_frozen(&tape);
    m.loss(&bound, sample).unwrap().value().item()
}

/// `(name, flat index)` pairs: a few entries of every tensor, embedding
/// entries restricted to tokens the sample actually reads.
fn sample_coordinates(model: &Model, sample: &DialogSample, per_tensor: usize) -> Vec<(String, usize)> {
    let mut rng = seeded_rng(5);
    let mut used: Vec<usize> = sample
        .utterances
        .iter()
        .flat_map(|u| u.question.iter().chain(&u.answer).chain(u.triplet.slot(0)).chain(u.triplet.slot(2)))
        .chain(&sample.caption)
        .chain(&sample.gold_answer)
        .copied()
        .filter(|&t| t != PAD)
        .collect();
    used.sort_unstable();
    used.dedup();
    let d = model.config.d;
    let mut out = Vec::new();
    for (name, t) in model.params.iter() {
        if name.starts_with("text.f_t") {
            continue;
        }
        let n = if name == "embedding" { 4 * per_tensor } else { per_tensor };
        for _ in 0..n.min(t.len()) {
            let idx = if name == "embedding" {
                used[rng.gen_range(0..used.len())] * d + rng.gen_range(0..d)
            } else {
                rng.gen_range(0..t.len())
            };
            out.push((name.clone(), idx));
        }
    }
    out
}

pub struct GradientReport {
    pub checked: usize,
    pub above_floor: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Compares backpropagated loss gradients of a d=16, I=2 model with central
/// differences on a sample whose paths reach aggregation.
pub fn end_to_end_gradient_check() -> GradientReport {
    let (model, corpus) = small_model();
    let sample = corpus
        .samples
        .iter()
        .find(|s| {
            let tape = Tape::new();
            let b = model.params.bind_frozen(&tape);
            let enc = model.encode(&b, s).unwrap();
            enc.trace.is_some_and(|t| t.attention.len() >= 2)
        })
        .expect("a sample whose paths reach aggregation");

    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let loss = model.loss(&bound, sample).unwrap();
    let grads: BTreeMap<String, Tensor> = bound.gradients(&tape.backward(loss).unwrap());

    let coords = sample_coordinates(&model, sample, 4);
    let mut worst = (0.0, String::new());
    let mut nonzero = 0;
    for (name, idx) in &coords {
        let mut plus = model.params.clone();
        plus.get_mut(name).unwrap().data_mut()[*idx] += STEP;
        let mut minus = model.params.clone();
        minus.get_mut(name).unwrap().data_mut()[*idx] -= STEP;
        let numeric = (loss_at(&model, &plus, sample) - loss_at(&model, &minus, sample)) / (2.0 * STEP);
        let analytic = grads[name].data()[*idx];
        nonzero += (analytic.abs() > FLOOR) as usize;
        let err = rel_error(analytic, numeric, FLOOR);
        if err > worst.0 {
            worst = (err, format!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    GradientReport {
        checked: coords.len(),
        above_floor: nonzero,
        worst: worst.0,
        worst_at: worst.1,
    }
}

/// Naive multi-head attention: per head, softmax of scaled dot products
/// over allowed context rows, then the output projection.
pub fn oracle_attention(
    query: &Tensor,
    context: &Tensor,
    w: [&Tensor; 4],
    heads: usize,
    allowed: Option<&[bool]>,
) -> Tensor {
    let d = w[0].cols();
    let dh = d / heads;
    let project = |x: &Tensor, m: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|r| (0..d).map(|c| (0..x.cols()).map(|k| x.at(r, k) * m.at(k, c)).sum()).collect())
            .collect()
    };
    let (q, k, v) = (project(query, w[0]), project(context, w[1]), project(context, w[2]));
    let mut concat = vec![vec![0.0; d]; query.rows()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    let ok = allowed.is_none_or(|a| a[j]);
                    ok.then(|| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let top = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - top).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let a = (s - top).exp() / z;
                    for c in cols.clone() {
                        concat[i][c] += a * v[j][c];
                    }
                }
            }
        }
    }
    let concat = Tensor::from_rows(&concat).unwrap();
    Tensor::from_rows(&project(&concat, w[3])).unwrap()
}

/// Checks the normalisation invariants over `instances` random draws and
/// returns the first violation.
pub fn normalization_invariants(instances: u64) -> std::result::Result<(), String> {
    use isr_core::fusion::gate_fuse;
    use isr_core::text_encoder::{aggregate_paths, forward_search, intra_utterance_enrich, reverse_and_augment, Anchor};
    use isr_core::visual_encoder::{block_sums, joint_weight_matrix};

    for seed in 0..instances {
        let mut rng = seeded_rng(40_000 + seed);
        let tape = Tape::new();
        let (n_q, n_v, d) = (rng.gen_range(1..7), rng.gen_range(1..10), rng.gen_range(2..9));
        let pad: Vec<bool> = (0..n_q).map(|i| i > 0 && rng.gen_bool(0.25)).collect();
        let q = tape.constant(random_matrix(&mut rng, n_q, d, 2.0));
        let v = tape.constant(random_matrix(&mut rng, n_v, d, 2.0));
        let w = joint_weight_matrix(q, v, Some(&pad)).map_err(|e| e.to_string())?;
        let wv = w.value();
        for r in 0..wv.rows() {
            let s: f64 = wv.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(format!("seed {seed}: weight row {r} sums to {s}"));
            }
        }
        let sums = block_sums(w, n_q, Some(&pad)).map_err(|e| e.to_string())?;
        let live = pad.iter().filter(|&&p| !p).count() as f64;
        let [qq, qv, vq, vv] = sums.map(|s| s.value().item());
        if (qq + qv - live).abs() > 1e-9 || (vq + vv - n_v as f64).abs() > 1e-9 {
            return Err(format!("seed {seed}: block masses {qq}+{qv} / {vq}+{vv}"));
        }

        let inst = SearchInstance::random(50_000 + seed);
        let e = intra_utterance_enrich(tape.constant(inst.tensor())).map_err(|e| e.to_string())?;
        let paths: Vec<_> = Anchor::BOTH
            .iter()
            .map(|&a| reverse_and_augment(&forward_search(&e.value(), a, 0.3, &inst.map()).path))
            .collect();
        let w1 = tape.constant(random_matrix(&mut rng, inst.d, inst.d, 1.0));
        let (_, records) = aggregate_paths(e, &paths, w1).map_err(|e| e.to_string())?;
        for r in &records {
            let s: f64 = r.weights.iter().sum();
            if (s - 1.0).abs() > 1e-9 || r.weights.iter().any(|&x| x < 0.0) {
                return Err(format!("seed {seed}: attention at {} sums to {s}", r.node));
            }
        }

        let txt = random_matrix(&mut rng, n_q, d, 3.0);
        let vis = random_matrix(&mut rng, n_q, d, 3.0);
        let fused = gate_fuse(
            tape.constant(random_matrix(&mut rng, n_q, d, 3.0)),
            tape.constant(txt.clone()),
            tape.constant(vis.clone()),
            tape.constant(random_matrix(&mut rng, 3 * d, d, 1.0)),
        )
        .map_err(|e| e.to_string())?
        .value();
        for i in 0..fused.len() {
            let (a, b, f) = (txt.data()[i], vis.data()[i], fused.data()[i]);
            if f < a.min(b) - 1e-12 || f > a.max(b) + 1e-12 {
                return Err(format!("seed {seed}: gate output {f} outside [{a}, {b}]"));
            }
        }
    }
    Ok(())
}
