use serde::Serialize;

use crate::numerics::{cosine_similarity, Tensor};

/// Which question entity a path is rooted in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Subject,
    Object,
}

impl Anchor {
    pub const BOTH: [Anchor; 2] = [Anchor::Subject, Anchor::Object];

    /// Triplet slot: 0 for the subject, 2 for the object.
    pub fn slot(self) -> usize {
        match self {
            Anchor::Subject => 0,
            Anchor::Object => 2,
        }
    }
}

/// An entity position: zero-based utterance index and triplet slot (0 or 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct EntityRef {
    pub utterance: usize,
    pub slot: usize,
}

impl std::fmt::Display for EntityRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = if self.slot == 0 { 's' } else { 'o' };
        write!(f, "{kind}{}", self.utterance + 1)
    }
}

/// `S`: one row per history utterance, column `j/2` set when slot `j` of
/// that utterance joined the path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectionMatrix {
    pub rows: Vec<[bool; 2]>,
}

impl ConnectionMatrix {
    pub fn empty(history: usize) -> Self {
        Self {
            rows: vec![[false; 2]; history],
        }
    }

    pub fn connections(&self) -> usize {
        self.rows.iter().flatten().filter(|&&b| b).count()
    }
}

/// Nodes of one entity path plus its directed edges.
///
/// Straight out of [`forward_search`] the nodes run from the question
/// backwards in time and the edges link consecutive nodes in that order.
/// [`reverse_and_augment`](super::reverse_and_augment) flips the order and
/// closes the edge set transitively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntityPath {
    pub anchor: Anchor,
    pub nodes: Vec<EntityRef>,
    pub edges: Vec<(EntityRef, EntityRef)>,
}

/// One comparison step of the search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub anchor: Anchor,
    /// Zero-based utterance being compared.
    pub tau: usize,
    pub eps_subject: f64,
    pub eps_object: f64,
    /// Slot that matched, if any.
    pub matched: Option<usize>,
    /// A cosine involved a zero vector and was taken as 0.
    pub zero_vector: bool,
}

/// The fully connected map that forms the next comparison feature from
/// `[matched entity ‖ h]`; weight is `2d x d`, bias `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SearchMap {
    pub fn apply(&self, entity: &[f64], h: &[f64]) -> Vec<f64> {
        let d = h.len();
        let w = &self.weight;
        let mut out = self.bias.data().to_vec();
        for (i, &x) in entity.iter().chain(h).enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(&w.data()[i * d..(i + 1) * d]) {
                *o += x * wv;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub matrix: ConnectionMatrix,
    pub path: EntityPath,
    pub comparisons: Vec<Comparison>,
}

/// Threshold-gated backward scan from the question's `anchor` entity.
///
/// `enriched` is the `[3t, d]` matrix of enriched triplets. For each
/// history utterance, newest first, the comparison feature `h` is scored
/// against that utterance's subject and object; when the better score
/// exceeds `threshold` (strictly) the entity joins the path and `h` is
/// replaced by `f_t([entity ‖ h])`. Equal scores favour the subject.
pub fn forward_search(
    enriched: &Tensor,
    anchor: Anchor,
    threshold: f64,
    f_t: &SearchMap,
) -> SearchResult {
    let t = enriched.rows() / 3;
    assert!(t >= 1 && enriched.rows() == 3 * t, "enriched triplets must be [3t, d]");
    let row = |u: usize, s: usize| enriched.row(3 * u + s);
    let question = t - 1;
    let root = EntityRef {
        utterance: question,
        slot: anchor.slot(),
    };
    let mut h = row(question, anchor.slot()).to_vec();
    let mut matrix = ConnectionMatrix::empty(question);
    let mut nodes = vec![root];
    let mut comparisons = Vec::with_capacity(question);

    for tau in (0..question).rev() {
        let (subj, obj) = (row(tau, 0), row(tau, 2));
        let eps_subject = cosine_similarity(&h, subj);
        let eps_object = cosine_similarity(&h, obj);
        let is_zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
        let zero_vector = is_zero(&h) || is_zero(subj) || is_zero(obj);
        let matched = if eps_subject > threshold || eps_object > threshold {
            Some(if eps_subject >= eps_object { 0 } else { 2 })
        } else {
            None
        };
        if let Some(j) = matched {
            matrix.rows[tau][j / 2] = true;
            nodes.push(EntityRef {
                utterance: tau,
                slot: j,
            });
            h = f_t.apply(row(tau, j), &h);
        }
        comparisons.push(Comparison {
            anchor,
            tau,
            eps_subject,
            eps_object,
            matched,
            zero_vector,
        });
    }

    let edges = nodes.windows(2).map(|w| (w[0], w[1])).collect();
    SearchResult {
        matrix,
        path: EntityPath {
            anchor,
            nodes,
            edges,
        },
        comparisons,
    }
}

/// Rebuilds the connection matrix of `anchor` from recorded comparisons.
pub fn replay_matrix(comparisons: &[Comparison], anchor: Anchor, history: usize) -> ConnectionMatrix {
    let mut m = ConnectionMatrix::empty(history);
    for c in comparisons.iter().filter(|c| c.anchor == anchor) {
        if let Some(j) = c.matched {
            m.rows[c.tau][j / 2] = true;
        }
    }
    m
}
