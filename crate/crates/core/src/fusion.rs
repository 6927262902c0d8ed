//! Gated and fully connected fusion of the two question representations.
//!
//! Weights are stored for row-vector inputs: the gate matrix is `3d x d`
//! and the fully connected matrix `2d x d`.

use crate::error::{Error, Result};
use crate::numerics::Var;

fn check_rows<'t>(op: &'static str, parts: &[Var<'t>]) -> Result<()> {
    let first = parts[0].shape();
    if let Some(bad) = parts.iter().find(|p| p.shape() != first) {
        return Err(Error::Dimension {
            op,
            lhs: first,
            rhs: bad.shape(),
        });
    }
    Ok(())
}

/// The gate `σ([E_q ‖ E_q^txt ‖ E_q^vis] · W_g)`.
pub fn fusion_gate<'t>(
    question: Var<'t>,
    text: Var<'t>,
    visual: Var<'t>,
    w_g: Var<'t>,
) -> Result<Var<'t>> {
    check_rows("gate_fuse", &[question, text, visual])?;
    Ok(Var::concat_cols(&[question, text, visual])?.matmul(w_g)?.sigmoid())
}

/// `g ⊙ E_q^txt + (1 − g) ⊙ E_q^vis`.
pub fn gate_fuse<'t>(
    question: Var<'t>,
    text: Var<'t>,
    visual: Var<'t>,
    w_g: Var<'t>,
) -> Result<Var<'t>> {
    let g = fusion_gate(question, text, visual, w_g)?;
    visual.add(g.mul(text.sub(visual)?)?)
}

/// `[E_q^txt ‖ E_q^vis] · W_f + b`.
pub fn fc_fuse<'t>(text: Var<'t>, visual: Var<'t>, w_f: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    check_rows("fc_fuse", &[text, visual])?;
    Var::concat_cols(&[text, visual])?.matmul(w_f)?.add_row(bias)
}
