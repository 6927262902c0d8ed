use crate::error::{Error, Result};
use crate::numerics::{Bound, Var};

/// Multi-head attention with per-head query/key/value projections stored
/// side by side in `d x d` matrices and an output projection `w_o`.
#[derive(Clone, Copy)]
pub struct AttentionNet<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub heads: usize,
}

impl<'t> AttentionNet<'t> {
    /// Looks up `{prefix}.w_q`, `{prefix}.w_k`, `{prefix}.w_v`, `{prefix}.w_o`.
    pub fn from_bound(bound: &Bound<'t>, prefix: &str, heads: usize) -> Self {
        Self {
            w_q: bound.get(&format!("{prefix}.w_q")),
            w_k: bound.get(&format!("{prefix}.w_k")),
            w_v: bound.get(&format!("{prefix}.w_v")),
            w_o: bound.get(&format!("{prefix}.w_o")),
            heads,
        }
    }

    /// Attends from `query` rows over `context` rows. `context_allowed`
    /// masks context rows out of every softmax (`false` = ignored).
    pub fn attend(
        &self,
        query: Var<'t>,
        context: Var<'t>,
        context_allowed: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let d = self.w_q.value().cols();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        let dh = d / self.heads;
        let q = query.matmul(self.w_q)?;
        let k = context.matmul(self.w_k)?;
        let v = context.matmul(self.w_v)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = |m: Var<'t>| m.slice_cols(h * dh, (h + 1) * dh);
            let scores = cols(q).matmul_nt(cols(k))?.scale(scale);
            heads.push(scores.softmax(context_allowed)?.matmul(cols(v))?);
        }
        Var::concat_cols(&heads)?.matmul(self.w_o)
    }
}
