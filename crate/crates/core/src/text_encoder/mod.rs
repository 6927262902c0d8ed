//! Path search and aggregation over dialog-history triplets.
//!
//! Each utterance contributes one `<subject, relation, object>` triplet.
//! Starting from an entity of the current question, [`forward_search`]
//! walks back through the history collecting entities whose features are
//! close enough; [`reverse_and_augment`] turns that chain into a small
//! DAG, and [`aggregate_paths`] propagates features along it. The refined
//! question entities replace their tokens in the question embedding.

mod aggregate;
mod search;

pub use aggregate::{aggregate_paths, predecessor_sets, reverse_and_augment, AttentionRecord};
pub use search::{
    forward_search, replay_matrix, Anchor, Comparison, ConnectionMatrix, EntityPath, EntityRef,
    SearchMap, SearchResult,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Var;

/// Adds each triplet's slot mean to its subject and object rows.
pub fn intra_utterance_enrich<'t>(triplets: Var<'t>) -> Result<Var<'t>> {
    let rows = triplets.rows();
    if rows == 0 || !rows.is_multiple_of(3) {
        return Err(Error::Dimension {
            op: "intra_utterance_enrich",
            lhs: triplets.shape(),
            rhs: vec![3],
        });
    }
    let mut out = Vec::with_capacity(rows);
    for u in 0..rows / 3 {
        let mean = triplets.slice_rows(3 * u, 3 * u + 3).mean_rows();
        out.push(triplets.row(3 * u).add(mean)?);
        out.push(triplets.row(3 * u + 1));
        out.push(triplets.row(3 * u + 2).add(mean)?);
    }
    Var::concat_rows(&out)
}

/// Question embedding with the question triplet's subject and object
/// features written over the tokens they cover, plus the refined history
/// (`None` when the question is the first utterance).
pub fn assemble_text_outputs<'t>(
    question: Var<'t>,
    refined: Var<'t>,
    positions: &[Vec<usize>; 2],
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let n_q = question.rows();
    let t = refined.rows() / 3;
    let mut source: Vec<Option<usize>> = vec![None; n_q];
    for (slot, list) in [0, 2].into_iter().zip(positions) {
        for &p in list {
            if p >= n_q {
                return Err(Error::Mapping {
                    position: p,
                    len: n_q,
                });
            }
            source[p] = Some(3 * (t - 1) + slot);
        }
    }
    let history = (t > 1).then(|| refined.slice_rows(0, 3 * (t - 1)));
    if source.iter().all(Option::is_none) {
        return Ok((question, history));
    }
    let mut parts = Vec::new();
    let mut run_start = 0;
    for (i, s) in source.iter().enumerate() {
        if let Some(r) = s {
            if run_start < i {
                parts.push(question.slice_rows(run_start, i));
            }
            parts.push(refined.row(*r));
            run_start = i + 1;
        }
    }
    if run_start < n_q {
        parts.push(question.slice_rows(run_start, n_q));
    }
    Ok((Var::concat_rows(&parts)?, history))
}

/// Everything the search and aggregation decided for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathTrace {
    pub comparisons: Vec<Comparison>,
    pub subject_matrix: ConnectionMatrix,
    pub object_matrix: ConnectionMatrix,
    /// Paths after reversal and augmentation.
    pub paths: Vec<EntityPath>,
    pub attention: Vec<AttentionRecord>,
}

impl PathTrace {
    pub fn matrix(&self, anchor: Anchor) -> &ConnectionMatrix {
        match anchor {
            Anchor::Subject => &self.subject_matrix,
            Anchor::Object => &self.object_matrix,
        }
    }

    /// One JSON object per comparison, tagged with `sample`.
    pub fn comparison_lines(&self, sample: &str) -> Vec<String> {
        self.comparisons
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(c).expect("plain data");
                v["sample"] = sample.into();
                v.to_string()
            })
            .collect()
    }

    /// `from -> to` lines with entities named like `s3` / `o1`.
    pub fn edge_list(&self, sample: &str) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.paths
            .iter()
            .flat_map(|p| &p.edges)
            .filter(|e| seen.insert(**e))
            .map(|(a, b)| format!("{sample}\t{a} -> {b}"))
            .collect()
    }
}

/// Outputs of the text encoder for one sample.
pub struct TextOutputs<'t> {
    pub enriched: Var<'t>,
    pub refined: Var<'t>,
    pub question: Var<'t>,
    pub history: Option<Var<'t>>,
    pub trace: PathTrace,
}

/// Runs enrichment, both searches, reversal and aggregation, then splices
/// the refined question entities into `question`.
pub fn encode_text<'t>(
    triplets: Var<'t>,
    question: Var<'t>,
    positions: &[Vec<usize>; 2],
    threshold: f64,
    f_t: &SearchMap,
    w1: Var<'t>,
) -> Result<TextOutputs<'t>> {
    let enriched = intra_utterance_enrich(triplets)?;
    let values = enriched.value();
    let [subject, object] = Anchor::BOTH.map(|a| forward_search(&values, a, threshold, f_t));
    let paths = vec![
        reverse_and_augment(&subject.path),
        reverse_and_augment(&object.path),
    ];
    let (refined, attention) = aggregate_paths(enriched, &paths, w1)?;
    let (question, history) = assemble_text_outputs(question, refined, positions)?;
    let mut comparisons = subject.comparisons;
    comparisons.extend(object.comparisons);
    Ok(TextOutputs {
        enriched,
        refined,
        question,
        history,
        trace: PathTrace {
            comparisons,
            subject_matrix: subject.matrix,
            object_matrix: object.matrix,
            paths,
            attention,
        },
    })
}
