//! Metric fixtures and the values the independent Python oracle
//! (`tests/oracles/metrics_oracle.py`) prints for them.

use isr_core::metrics::tokens;

pub type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

pub fn corpus(cands: &[&str], refs: &[&[&str]]) -> Corpus {
    (
        cands.iter().map(|s| tokens(s)).collect(),
        refs.iter().map(|rs| rs.iter().map(|r| tokens(r)).collect()).collect(),
    )
}

pub fn bleu_fixture() -> Corpus {
    corpus(
        &[
            "the man is holding a red cup",
            "a woman walks into the kitchen",
            "he puts the box on the table",
        ],
        &[
            &["the man holds a red cup", "a man is holding the cup"],
            &["the woman walks into a kitchen"],
            &["he puts a box on the shelf", "he places the box on the table"],
        ],
    )
}

pub fn cider_fixture() -> Corpus {
    corpus(
        &[
            "the man is holding a cup",
            "the cup is red",
            "she is sitting on the sofa",
            "the dog sleeps near the door",
            "nobody is in the room",
        ],
        &[
            &["the man is holding a cup", "a man holds the cup"],
            &["the cup is blue", "it is a blue cup"],
            &["she sits on the sofa"],
            &["a dog is sleeping by the door", "the dog sleeps near the door"],
            &["there is a man in the room"],
        ],
    )
}

// Values printed by tests/oracles/metrics_oracle.py.
pub const BLEU: [f64; 4] = [1.0, 0.8401680504168059, 0.671302884236996, 0.4842818719487973];
pub const ROUGE_L: f64 = 0.7679535582348881;
pub const CIDER_PER_SAMPLE: [f64; 5] = [
    5.497506967936745,
    1.89757007494647,
    3.7102326183664314,
    5.850235624756114,
    3.3893735792139768,
];
pub const CIDER: f64 = 4.068983773043948;
