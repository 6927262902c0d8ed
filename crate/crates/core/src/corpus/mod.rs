//! Dialog data: vocabulary, record and feature files, encoded samples,
//! embedding lookup, and the synthetic corpus generator.

mod features;
mod record;
mod sample;
mod synthetic;
mod vocab;

pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use record::{
    parse_records, read_records, records_to_string, write_records, DialogRecord, TripletRecord,
    TripletSource, TurnRecord,
};
pub use sample::{
    embed, embed_phrase, embed_triplets, load_corpus, record_texts, Corpus, DialogSample, Triplet,
    Utterance,
};
pub use synthetic::{make_synthetic_corpus, Grammar, QuestionKind, SyntheticCorpus};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, SEP, UNK};
