//! Training, evaluation, ablation and sweep drivers shared by the
//! command-line tool and the acceptance tests.

mod checkpoint;

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, manifest_path, save_checkpoint, CHECKPOINT_MAGIC,
};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{Ablation, DecodeConfig, ModelConfig};
use crate::corpus::{Corpus, DialogSample, PAD};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, tokens, EvalReport};
use crate::model::{Generation, Model};
use crate::numerics::{lr_schedule, seeded_rng, AdamState, Tape};

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains `model` in place for `config.train.epochs` epochs. `on_epoch`
/// sees each epoch's statistics as they are produced.
pub fn train(
    model: &mut Model,
    samples: &[DialogSample],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.gold_answer.is_empty()) {
        return Err(Error::Input(format!("sample {} has no gold answer", s.video_id)));
    }
    let tc = model.config.train;
    let mut adam = AdamState::new(tc.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = seeded_rng(model.config.seed.wrapping_add(1));
    let mut stats = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let lr = lr_schedule(tc.lr, epoch);
        let mut total = 0.0;
        for (step, batch) in order.chunks(tc.batch_size).enumerate() {
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let mut loss = None;
            for &i in batch {
                let l = model.loss(&bound, &samples[i])?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => l.add(acc)?,
                });
            }
            let loss = loss.expect("chunks are non-empty");
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            total += value;
            let grads = tape.backward(loss)?;
            let mut named = bound.gradients(&grads);
            if let Some(g) = named.get_mut("embedding") {
                g.row_mut(PAD).fill(0.0);
            }
            adam.step(&mut model.params, &named, lr)?;
        }
        let s = EpochStats {
            epoch,
            lr,
            mean_loss: total / samples.len() as f64,
        };
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

/// One decoded answer per sample.
pub fn generate_all(model: &Model, samples: &[DialogSample], decode: &DecodeConfig) -> Result<Vec<Generation>> {
    samples.iter().map(|s| model.generate(s, decode)).collect()
}

/// Scores decoded answers against the samples' gold answers.
pub fn score(model: &Model, samples: &[DialogSample], generations: &[Generation], cider_d: bool) -> Result<EvalReport> {
    let cands: Vec<_> = generations.iter().map(|g| tokens(&g.text)).collect();
    let refs: Vec<_> = samples
        .iter()
        .map(|s| vec![tokens(&model.vocab.decode(&s.gold_answer))])
        .collect();
    evaluate(&cands, &refs, cider_d)
}

/// Outcome of training a fresh model and scoring it on the same samples.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub epochs: Vec<EpochStats>,
    pub report: EvalReport,
}

/// Builds, trains and evaluates a model for `config` on `corpus`.
pub fn train_and_evaluate(config: &ModelConfig, corpus: &Corpus, label: &str) -> Result<(Model, RunSummary)> {
    let mut model = Model::new(config.clone(), corpus.vocab.clone())?;
    let epochs = train(&mut model, &corpus.samples, |_| {})?;
    let gens = generate_all(&model, &corpus.samples, &config.decode)?;
    let report = score(&model, &corpus.samples, &gens, false)?;
    Ok((
        model,
        RunSummary {
            label: label.to_string(),
            epochs,
            report,
        },
    ))
}

/// Trains and evaluates every named variant under the same seed.
pub fn ablate(config: &ModelConfig, corpus: &Corpus, variants: &[String]) -> Result<Vec<RunSummary>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    variants
        .iter()
        .map(|v| {
            let cfg = ModelConfig {
                ablation: Ablation::variant(v)?,
                ..config.clone()
            };
            train_and_evaluate(&cfg, corpus, v).map(|(_, s)| s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// History window in utterances.
    Turns,
    /// Path-search threshold.
    P,
    /// Reasoning iterations.
    I,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turns" => Ok(SweepAxis::Turns),
            "p" => Ok(SweepAxis::P),
            "I" | "i" => Ok(SweepAxis::I),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &ModelConfig, value: f64) -> Result<ModelConfig> {
        let mut c = config.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("sweep value {value} is not a count")))
            }
        };
        match self {
            SweepAxis::Turns => c.turns_window = Some(count()?),
            SweepAxis::P => c.threshold = value,
            SweepAxis::I => c.iterations = count()?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `a,b,c` or an inclusive integer range `a..b`.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse sweep values `{spec}`"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    let v = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub run: RunSummary,
}

/// One train-and-evaluate run per value along `axis`.
pub fn sweep(config: &ModelConfig, corpus: &Corpus, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let cfg = axis.apply(config, v)?;
            let (_, run) = train_and_evaluate(&cfg, corpus, &format!("{v}"))?;
            Ok(SweepRow { value: v, run })
        })
        .collect()
}

/// Two-column `value metric` text per metric, keyed by metric name.
pub fn plot_data(rows: &[SweepRow]) -> Vec<(String, String)> {
    let metric = |name: &str, f: &dyn Fn(&EvalReport) -> f64| {
        let body: String = rows
            .iter()
            .map(|r| format!("{} {:.6}\n", r.value, f(&r.run.report)))
            .collect();
        (name.to_string(), body)
    };
    vec![
        metric("bleu1", &|r| r.bleu[0]),
        metric("bleu2", &|r| r.bleu[1]),
        metric("bleu3", &|r| r.bleu[2]),
        metric("bleu4", &|r| r.bleu[3]),
        metric("rouge_l", &|r| r.rouge_l),
        metric("cider", &|r| r.cider),
    ]
}
