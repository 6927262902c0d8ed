use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::search::{EntityPath, EntityRef};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Flips a searched path so it runs oldest first and links every node to
/// every later node.
pub fn reverse_and_augment(path: &EntityPath) -> EntityPath {
    let nodes: Vec<EntityRef> = path.nodes.iter().rev().copied().collect();
    let mut edges = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1) / 2);
    for (i, &from) in nodes.iter().enumerate() {
        for &to in &nodes[i + 1..] {
            edges.push((from, to));
        }
    }
    EntityPath {
        anchor: path.anchor,
        nodes,
        edges,
    }
}

/// Attention used to update one node during aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub node: EntityRef,
    pub predecessors: Vec<EntityRef>,
    pub weights: Vec<f64>,
}

/// Predecessor sets keyed by node; a node on both paths gets the union.
pub fn predecessor_sets(paths: &[EntityPath]) -> BTreeMap<EntityRef, BTreeSet<EntityRef>> {
    let mut preds: BTreeMap<EntityRef, BTreeSet<EntityRef>> = BTreeMap::new();
    for p in paths {
        for &(from, to) in &p.edges {
            preds.entry(to).or_default().insert(from);
        }
    }
    preds
}

/// Distance-aware attention over each node's predecessors.
///
/// `enriched` is `[3t, d]` and `w1` is `d x d`. Nodes are visited in
/// utterance order, so predecessors already carry their aggregated
/// features. Rows with no predecessors are passed through.
pub fn aggregate_paths<'t>(
    enriched: Var<'t>,
    paths: &[EntityPath],
    w1: Var<'t>,
) -> Result<(Var<'t>, Vec<AttentionRecord>)> {
    let rows = enriched.rows();
    let preds = predecessor_sets(paths);
    if preds.is_empty() {
        return Ok((enriched, vec![]));
    }
    let index = |n: &EntityRef| 3 * n.utterance + n.slot;
    if let Some(bad) = preds
        .iter()
        .flat_map(|(n, s)| std::iter::once(n).chain(s))
        .find(|n| index(n) >= rows || n.slot == 1)
    {
        return Err(Error::Mapping {
            position: index(bad),
            len: rows,
        });
    }

    let mut out: Vec<Var<'t>> = (0..rows).map(|r| enriched.row(r)).collect();
    let mut records = Vec::with_capacity(preds.len());
    for (node, set) in &preds {
        let pred: Vec<EntityRef> = set.iter().copied().collect();
        if let Some(p) = pred.iter().find(|p| p.utterance >= node.utterance) {
            return Err(Error::Input(format!("edge {p} -> {node} runs backwards in time")));
        }
        let base = out[index(node)];
        let stacked = Var::concat_rows(&pred.iter().map(|p| out[index(p)]).collect::<Vec<_>>())?;
        let projected = stacked.matmul_nt(w1)?;
        let bonus: Vec<f64> = pred
            .iter()
            .map(|p| 1.0 / (node.utterance - p.utterance) as f64)
            .collect();
        let bonus = enriched
            .tape()
            .constant(Tensor::new(vec![1, pred.len()], bonus)?);
        let alpha = base.matmul_nt(projected)?.add(bonus)?.softmax(None)?;
        records.push(AttentionRecord {
            node: *node,
            predecessors: pred,
            weights: alpha.value().data().to_vec(),
        });
        out[index(node)] = base.add(alpha.matmul(projected)?)?;
    }
    Ok((Var::concat_rows(&out)?, records))
}
