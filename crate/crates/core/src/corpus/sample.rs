use std::path::Path;

use super::features::read_features;
use super::record::{read_records, DialogRecord, TripletRecord, TripletSource, TurnRecord};
use super::vocab::{Vocabulary, EOS, PAD};
use crate::config::Caps;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// One `<subject, relation, object>` triplet as token ids. A null triplet
/// has three empty phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub subject: Vec<usize>,
    pub relation: Vec<usize>,
    pub object: Vec<usize>,
    pub source: TripletSource,
}

impl Triplet {
    pub fn null() -> Self {
        Self {
            subject: vec![],
            relation: vec![],
            object: vec![],
            source: TripletSource::Null,
        }
    }

    pub fn is_null(&self) -> bool {
        self.source == TripletSource::Null
    }

    /// Phrase in slot 0 (subject), 1 (relation) or 2 (object).
    pub fn slot(&self, slot: usize) -> &[usize] {
        match slot {
            0 => &self.subject,
            1 => &self.relation,
            2 => &self.object,
            _ => panic!("triplet slot {slot}"),
        }
    }
}

/// A question/answer pair with its triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub triplet: Triplet,
}

/// One dialog prepared for the model. The last utterance holds the current
/// question; its answer is moved to `gold_answer`.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogSample {
    pub video_id: String,
    pub caption: Vec<usize>,
    pub utterances: Vec<Utterance>,
    /// `F x O x D_raw` object features.
    pub video: Tensor,
    /// Gold answer ids terminated by EOS; empty when unknown.
    pub gold_answer: Vec<usize>,
}

impl DialogSample {
    pub fn from_record(
        rec: &DialogRecord,
        vocab: &Vocabulary,
        caps: &Caps,
        video: Tensor,
    ) -> Result<Self> {
        let loc = |what: &str| format!("sample {}: {what}", rec.video_id);
        if rec.turns.is_empty() {
            return Err(Error::parse(loc("turns"), "dialog has no turns"));
        }
        if video.shape().len() != 3 {
            return Err(Error::parse(loc("video"), "feature block must be F x O x D"));
        }
        let t = rec.turns.len();
        let mut utterances = Vec::with_capacity(t);
        for (k, turn) in rec.turns.iter().enumerate() {
            let current = k + 1 == t;
            utterances.push(ingest_turn(turn, vocab, caps, current).map_err(|m| {
                Error::parse(loc(&format!("turn {}", k + 1)), m)
            })?);
        }
        if utterances[t - 1].question.is_empty() {
            return Err(Error::parse(loc("question"), "current question is empty"));
        }
        let last = utterances.last_mut().expect("t >= 1");
        let mut gold = std::mem::take(&mut last.answer);
        if !gold.is_empty() {
            gold.push(EOS);
        }
        Ok(Self {
            video_id: rec.video_id.clone(),
            caption: truncate(vocab.encode(&rec.caption), caps.caption),
            utterances,
            video,
            gold_answer: gold,
        })
    }

    /// Number of utterances `t`, current question included.
    pub fn turns(&self) -> usize {
        self.utterances.len()
    }

    pub fn question(&self) -> &[usize] {
        &self.utterances.last().expect("t >= 1").question
    }

    pub fn history(&self) -> &[Utterance] {
        &self.utterances[..self.utterances.len() - 1]
    }

    /// Keeps only the `k` most recent history utterances.
    pub fn with_turns_window(&self, k: usize) -> Self {
        let mut out = self.clone();
        let h = self.turns() - 1;
        if h > k {
            out.utterances.drain(..h - k);
        }
        out
    }

    /// Flattened `(F*O) x D_raw` video matrix.
    pub fn video_matrix(&self) -> Tensor {
        self.video.to_matrix()
    }

    /// Question token positions covered by the current triplet's subject
    /// (index 0) and object (index 1). A phrase maps to the first place it
    /// occurs verbatim in the question; unmatched phrases map nowhere.
    pub fn question_entity_positions(&self) -> [Vec<usize>; 2] {
        let q = self.question();
        let trip = &self.utterances.last().expect("t >= 1").triplet;
        [0, 2].map(|slot| find_phrase(q, trip.slot(slot)))
    }
}

fn find_phrase(haystack: &[usize], phrase: &[usize]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return vec![];
    }
    (0..=haystack.len() - phrase.len())
        .find(|&i| haystack[i..i + phrase.len()] == *phrase)
        .map(|i| (i..i + phrase.len()).collect())
        .unwrap_or_default()
}

fn truncate(mut v: Vec<usize>, cap: usize) -> Vec<usize> {
    v.truncate(cap);
    v
}

fn ingest_turn(
    turn: &TurnRecord,
    vocab: &Vocabulary,
    caps: &Caps,
    current: bool,
) -> std::result::Result<Utterance, String> {
    let triplet = match &turn.triplet {
        None => Triplet::null(),
        Some(t) => ingest_triplet(t, vocab, current)?,
    };
    Ok(Utterance {
        question: truncate(vocab.encode(&turn.question), caps.question),
        answer: truncate(vocab.encode(&turn.answer), caps.answer),
        triplet,
    })
}

fn ingest_triplet(
    t: &TripletRecord,
    vocab: &Vocabulary,
    current: bool,
) -> std::result::Result<Triplet, String> {
    let phrase = |name: &str, text: &str| {
        let ids = vocab.encode(text);
        if ids.is_empty() || ids.len() > 3 {
            Err(format!("{name} phrase must have 1 to 3 tokens, got {:?}", text))
        } else {
            Ok(ids)
        }
    };
    let default_source = if current {
        TripletSource::Question
    } else {
        TripletSource::Answer
    };
    Ok(Triplet {
        subject: phrase("subject", &t.subject)?,
        relation: phrase("relation", &t.relation)?,
        object: phrase("object", &t.object)?,
        source: t.source.unwrap_or(default_source),
    })
}

/// A vocabulary and the samples encoded with it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub samples: Vec<DialogSample>,
}

/// Every text field of `records`, for building a vocabulary.
pub fn record_texts(records: &[DialogRecord]) -> impl Iterator<Item = &str> {
    records.iter().flat_map(|r| {
        std::iter::once(r.caption.as_str()).chain(r.turns.iter().flat_map(|t| {
            let trip = t
                .triplet
                .iter()
                .flat_map(|x| [x.subject.as_str(), x.relation.as_str(), x.object.as_str()]);
            [t.question.as_str(), t.answer.as_str()].into_iter().chain(trip)
        }))
    })
}

impl Corpus {
    /// Encodes records with `vocab`, or with a vocabulary built from the
    /// records themselves. `video_for` supplies each record's feature block.
    pub fn from_records(
        records: &[DialogRecord],
        vocab: Option<Vocabulary>,
        caps: &Caps,
        mut video_for: impl FnMut(&DialogRecord) -> Result<Tensor>,
    ) -> Result<Self> {
        let vocab = vocab.unwrap_or_else(|| Vocabulary::build(record_texts(records)));
        let samples = records
            .iter()
            .map(|r| DialogSample::from_record(r, &vocab, caps, video_for(r)?))
            .collect::<Result<_>>()?;
        Ok(Self { vocab, samples })
    }

    pub fn find(&self, video_id: &str) -> Option<&DialogSample> {
        self.samples.iter().find(|s| s.video_id == video_id)
    }
}

/// Loads a corpus file and the `<video_id>.isrv` feature file of every
/// record from `features_dir`.
pub fn load_corpus(
    path: &Path,
    features_dir: &Path,
    vocab: Option<Vocabulary>,
    caps: &Caps,
) -> Result<Corpus> {
    let records = read_records(path)?;
    Corpus::from_records(&records, vocab, caps, |r| {
        read_features(&features_dir.join(format!("{}.isrv", r.video_id)))
    })
}

/// Embedding lookup; PAD positions come out as zero rows whatever the
/// table holds.
pub fn embed<'t>(ids: &[usize], table: Var<'t>) -> Result<Var<'t>> {
    let rows = table.gather_rows(ids)?;
    if !ids.contains(&PAD) {
        return Ok(rows);
    }
    let d = table.value().cols();
    let mask: Vec<f64> = ids
        .iter()
        .flat_map(|&i| std::iter::repeat_n(if i == PAD { 0.0 } else { 1.0 }, d))
        .collect();
    let mask = table.tape().constant(Tensor::new(vec![ids.len(), d], mask)?);
    rows.mul(mask)
}

/// Mean of a phrase's token embeddings as a `[1, d]` row; an empty phrase
/// gives a zero row.
pub fn embed_phrase<'t>(ids: &[usize], table: Var<'t>) -> Result<Var<'t>> {
    if ids.is_empty() {
        let d = table.value().cols();
        return Ok(table.tape().constant(Tensor::zeros(&[1, d])));
    }
    Ok(embed(ids, table)?.mean_rows())
}

/// Triplet embeddings `E_tri` as a `[3t, d]` matrix; row `3u + s` holds
/// slot `s` of utterance `u`.
pub fn embed_triplets<'t>(utterances: &[Utterance], table: Var<'t>) -> Result<Var<'t>> {
    if utterances.is_empty() {
        return Err(Error::Input("embed_triplets needs at least one utterance".into()));
    }
    let mut rows = Vec::with_capacity(3 * utterances.len());
    for u in utterances {
        for slot in 0..3 {
            rows.push(embed_phrase(u.triplet.slot(slot), table)?);
        }
    }
    Var::concat_rows(&rows)
}
