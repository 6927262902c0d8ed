//! Seeded synthetic dialogs with entity chains across turns.
//!
//! Every dialog centres on one focus object `X`. The first utterance says
//! which person holds `X`; later utterances mention `X` again (as subject
//! or object) between distractor turns about other people and objects. The
//! current question asks either who holds `X` (answer only recoverable from
//! utterance 1) or what colour `X` is (answer only present in the video
//! features, where each object is its class prototype plus its colour
//! prototype).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::features::write_features;
use super::record::{write_records, DialogRecord, TripletRecord, TripletSource, TurnRecord};
use super::sample::Corpus;
use crate::config::Caps;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tensor};

const PERSONS: [&str; 4] = ["man", "woman", "boy", "girl"];
const THINGS: [&str; 8] = ["cup", "book", "phone", "ball", "bag", "box", "lamp", "towel"];
const PLACES: [&str; 6] = ["table", "sofa", "floor", "shelf", "chair", "bed"];
const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const ROOMS: [&str; 4] = ["kitchen", "bedroom", "garage", "office"];

/// Prototype vectors are drawn from this fixed seed so corpora generated
/// with different seeds share one visual world.
const WORLD_SEED: u64 = 0x15e_0f1d;

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    /// Mentions of the focus object across the history, utterance 1 included.
    pub chain_depth: usize,
    pub min_history: usize,
    pub max_history: usize,
    pub frames: usize,
    pub objects: usize,
    pub raw_dim: usize,
    pub noise: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            chain_depth: 3,
            min_history: 3,
            max_history: 5,
            frames: 5,
            objects: 3,
            raw_dim: 16,
            noise: 0.05,
        }
    }
}

impl Grammar {
    fn validate(&self) -> Result<()> {
        if self.chain_depth == 0 || self.max_history < self.chain_depth.max(self.min_history) {
            return Err(Error::Config(
                "synthetic grammar needs 1 <= chain_depth <= max_history and min_history <= max_history"
                    .into(),
            ));
        }
        if self.objects < 1 || self.objects > THINGS.len() || self.frames == 0 || self.raw_dim == 0
        {
            return Err(Error::Config("synthetic video extents out of range".into()));
        }
        Ok(())
    }
}

/// What a synthetic question asks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    /// Answer names the person from utterance 1.
    Holder,
    /// Answer names the colour carried by the video features.
    Color,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<DialogRecord>,
    pub videos: Vec<Tensor>,
    pub kinds: Vec<QuestionKind>,
}

impl SyntheticCorpus {
    pub fn to_corpus(&self, caps: &Caps) -> Result<Corpus> {
        let mut videos = self.videos.iter();
        Corpus::from_records(&self.records, None, caps, |_| {
            Ok(videos.next().expect("one video per record").clone())
        })
    }

    /// Writes `corpus.jsonl` and `features/<video_id>.isrv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("features");
        std::fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        write_records(&dir.join("corpus.jsonl"), &self.records)?;
        for (r, v) in self.records.iter().zip(&self.videos) {
            write_features(&feats.join(format!("{}.isrv", r.video_id)), v)?;
        }
        Ok(())
    }

    pub fn mean_turns(&self) -> f64 {
        let total: usize = self.records.iter().map(|r| r.turns.len()).sum();
        total as f64 / self.records.len().max(1) as f64
    }
}

struct World {
    things: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
}

impl World {
    fn new(raw_dim: usize) -> Self {
        let mut rng = seeded_rng(WORLD_SEED);
        let mut protos = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..raw_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let things = protos(THINGS.len());
        let colors = protos(COLORS.len());
        Self { things, colors }
    }
}

fn turn(question: String, answer: String, trip: [&str; 3]) -> TurnRecord {
    TurnRecord {
        question,
        answer,
        triplet: Some(TripletRecord {
            subject: trip[0].into(),
            relation: trip[1].into(),
            object: trip[2].into(),
            source: Some(TripletSource::Answer),
        }),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], avoid: &[&str]) -> &'a str {
    let options: Vec<&str> = pool.iter().copied().filter(|p| !avoid.contains(p)).collect();
    options[rng.gen_range(0..options.len())]
}

/// Generates `n_dialogs` dialogs; identical arguments give identical output.
pub fn make_synthetic_corpus(seed: u64, n_dialogs: usize, grammar: &Grammar) -> Result<SyntheticCorpus> {
    grammar.validate()?;
    let world = World::new(grammar.raw_dim);
    let mut rng = seeded_rng(seed);
    let mut out = SyntheticCorpus {
        records: Vec::with_capacity(n_dialogs),
        videos: Vec::with_capacity(n_dialogs),
        kinds: Vec::with_capacity(n_dialogs),
    };
    for i in 0..n_dialogs {
        let lo = grammar.min_history.max(grammar.chain_depth);
        let history = rng.gen_range(lo..=grammar.max_history);
        let focus = rng.gen_range(0..THINGS.len());
        let x = THINGS[focus];
        let holder = PERSONS[rng.gen_range(0..PERSONS.len())];
        let color = rng.gen_range(0..COLORS.len());
        let room = ROOMS[rng.gen_range(0..ROOMS.len())];

        // history positions (0-based) that mention x after utterance 1
        let mut later: Vec<usize> = (1..history).collect();
        later.shuffle(&mut rng);
        let mut mentions: Vec<usize> = later[..grammar.chain_depth - 1].to_vec();
        mentions.sort_unstable();

        let mut turns = Vec::with_capacity(history + 1);
        let mut mentioned = vec![x];
        turns.push(turn(
            format!("what is the {holder} holding"),
            format!("the {holder} is holding a {x}"),
            [holder, "holding", x],
        ));
        for k in 1..history {
            if mentions.contains(&k) {
                let place = PLACES[rng.gen_range(0..PLACES.len())];
                turns.push(if rng.gen_bool(0.5) {
                    turn(
                        format!("where is the {x}"),
                        format!("the {x} is on the {place}"),
                        [x, "on", place],
                    )
                } else {
                    turn(
                        format!("what is on the {place}"),
                        format!("the {place} has the {x}"),
                        [place, "has", x],
                    )
                });
            } else {
                let other = pick(&mut rng, &THINGS, &mentioned);
                mentioned.push(other);
                turns.push(if rng.gen_bool(0.5) {
                    let p = pick(&mut rng, &PERSONS, &[holder]);
                    turn(
                        format!("what is the {p} holding"),
                        format!("the {p} is holding a {other}"),
                        [p, "holding", other],
                    )
                } else {
                    let place = PLACES[rng.gen_range(0..PLACES.len())];
                    turn(
                        format!("where is the {other}"),
                        format!("the {other} is on the {place}"),
                        [other, "on", place],
                    )
                });
            }
        }

        let kind = if i % 2 == 0 {
            QuestionKind::Holder
        } else {
            QuestionKind::Color
        };
        let (q, a, trip) = match kind {
            QuestionKind::Holder => (
                format!("who is holding the {x}"),
                format!("the {holder} is holding it"),
                ["who", "holding", x],
            ),
            QuestionKind::Color => (
                format!("what color is the {x}"),
                format!("the {x} is {}", COLORS[color]),
                ["color", "is", x],
            ),
        };
        let mut current = turn(q, a, trip);
        current.triplet.as_mut().unwrap().source = Some(TripletSource::Question);
        turns.push(current);

        // video: the focus object in its colour plus distractor objects
        let mut objects = vec![(focus, color)];
        while objects.len() < grammar.objects {
            let o = rng.gen_range(0..THINGS.len());
            if objects.iter().all(|&(t, _)| t != o) {
                objects.push((o, rng.gen_range(0..COLORS.len())));
            }
        }
        objects.shuffle(&mut rng);
        let mut data = Vec::with_capacity(grammar.frames * grammar.objects * grammar.raw_dim);
        for _ in 0..grammar.frames {
            for &(t, c) in &objects {
                for j in 0..grammar.raw_dim {
                    let n: f64 = rng.gen_range(-1.0..1.0);
                    data.push(world.things[t][j] + world.colors[c][j] + grammar.noise * n);
                }
            }
        }
        let video = Tensor::new(vec![grammar.frames, grammar.objects, grammar.raw_dim], data)?;

        out.records.push(DialogRecord {
            video_id: format!("syn{seed}_{i:04}"),
            caption: format!("people in the {room}"),
            turns,
        });
        out.videos.push(video);
        out.kinds.push(kind);
    }
    Ok(out)
}
