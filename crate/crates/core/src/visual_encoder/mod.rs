//! Video projection and the iterative cross-modal reasoning network.
//!
//! Question rows and video rows are stacked into one matrix whose softmaxed
//! Gram matrix gives a joint weight matrix. Its four blocks are summed into
//! scalars that weight four attention outputs (question over question,
//! question over video, video over question, video over video). The result
//! is fed back in for the next iteration.

mod attention;

pub use attention::AttentionNet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Tensor, Var};

/// `LayerNorm(ReLU(raw · weight + bias))`, one row per object.
pub fn project_video<'t>(
    raw: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    raw.matmul(weight)?.add_row(bias)?.relu().layer_norm(gamma, beta, eps)
}

/// Column mask for the stacked `[question; video]` matrix; `None` when no
/// question row is padding.
fn joint_allowed(n_v: usize, question_pad: Option<&[bool]>) -> Option<Vec<bool>> {
    let pad = question_pad.filter(|p| p.iter().any(|&x| x))?;
    Some(pad.iter().map(|&p| !p).chain(std::iter::repeat_n(true, n_v)).collect())
}

/// Row-softmax of `E Eᵀ` for `E = [question; video]`, with padded question
/// columns masked out.
pub fn joint_weight_matrix<'t>(
    question: Var<'t>,
    video: Var<'t>,
    question_pad: Option<&[bool]>,
) -> Result<Var<'t>> {
    let e = Var::concat_rows(&[question, video])?;
    let allowed = joint_allowed(video.rows(), question_pad);
    e.matmul_nt(e)?.softmax(allowed.as_deref())
}

/// The four attention networks, or a single network used for every
/// pairing.
#[derive(Clone, Copy)]
pub enum AttentionNets<'t> {
    Separate {
        qq: AttentionNet<'t>,
        qv: AttentionNet<'t>,
        vq: AttentionNet<'t>,
        vv: AttentionNet<'t>,
    },
    Shared(AttentionNet<'t>),
}

impl<'t> AttentionNets<'t> {
    pub fn from_bound(bound: &Bound<'t>, heads: usize, shared: bool) -> Self {
        if shared {
            return AttentionNets::Shared(AttentionNet::from_bound(bound, "visual.attn.shared", heads));
        }
        let net = |k: &str| AttentionNet::from_bound(bound, &format!("visual.attn.{k}"), heads);
        AttentionNets::Separate {
            qq: net("qq"),
            qv: net("qv"),
            vq: net("vq"),
            vv: net("vv"),
        }
    }

    fn get(&self) -> [AttentionNet<'t>; 4] {
        match *self {
            AttentionNets::Separate { qq, qv, vq, vv } => [qq, qv, vq, vv],
            AttentionNets::Shared(n) => [n; 4],
        }
    }
}

/// Parameter names and shapes of the attention networks.
pub fn attention_param_shapes(d: usize, shared: bool) -> Vec<(String, Vec<usize>)> {
    let nets: &[&str] = if shared {
        &["shared"]
    } else {
        &["qq", "qv", "vq", "vv"]
    };
    nets.iter()
        .flat_map(|n| {
            ["w_q", "w_k", "w_v", "w_o"].map(|w| (format!("visual.attn.{n}.{w}"), vec![d, d]))
        })
        .collect()
}

/// `(E_q^q, E_q^v, E_v^q, E_v^v)`: the first letter is the query side, the
/// second the key/value side.
pub fn four_way_attention<'t>(
    question: Var<'t>,
    video: Var<'t>,
    nets: &AttentionNets<'t>,
    question_pad: Option<&[bool]>,
) -> Result<[Var<'t>; 4]> {
    let [qq, qv, vq, vv] = nets.get();
    let q_allowed: Option<Vec<bool>> = question_pad
        .filter(|p| p.iter().any(|&x| x))
        .map(|p| p.iter().map(|&x| !x).collect());
    let q_allowed = q_allowed.as_deref();
    Ok([
        qq.attend(question, question, q_allowed)?,
        qv.attend(question, video, None)?,
        vq.attend(video, question, q_allowed)?,
        vv.attend(video, video, None)?,
    ])
}

/// How the four block totals of the weight matrix become coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockWeights {
    /// Plain block totals.
    Sum,
    /// Block totals divided by the block's row count.
    Mean,
    /// Every coefficient is 1.
    Unit,
}

/// Scalar block totals `[qq, qv, vq, vv]` of the joint weight matrix,
/// skipping padded question rows.
pub fn block_sums<'t>(
    weights: Var<'t>,
    n_q: usize,
    question_pad: Option<&[bool]>,
) -> Result<[Var<'t>; 4]> {
    let n = weights.rows();
    let q_rows: Vec<usize> = (0..n_q)
        .filter(|&r| !question_pad.is_some_and(|p| p[r]))
        .collect();
    if q_rows.is_empty() {
        return Err(Error::Input("question has no unpadded rows".into()));
    }
    let q_block = weights.gather_rows(&q_rows)?;
    let v_block = weights.slice_rows(n_q, n);
    Ok([
        q_block.slice_cols(0, n_q).sum_all(),
        q_block.slice_cols(n_q, n).sum_all(),
        v_block.slice_cols(0, n_q).sum_all(),
        v_block.slice_cols(n_q, n).sum_all(),
    ])
}

/// Weights the attention outputs by the block coefficients:
/// `E_q^vis = c_qq E_q^q + c_qv E_q^v`, `Ê_v = c_vq E_v^q + c_vv E_v^v`.
pub fn modality_fusion<'t>(
    weights: Var<'t>,
    outputs: [Var<'t>; 4],
    question_pad: Option<&[bool]>,
    mode: BlockWeights,
) -> Result<(Var<'t>, Var<'t>)> {
    let [qq, qv, vq, vv] = outputs;
    if mode == BlockWeights::Unit {
        return Ok((qq.add(qv)?, vq.add(vv)?));
    }
    let n_q = qq.rows();
    let mut c = block_sums(weights, n_q, question_pad)?;
    if mode == BlockWeights::Mean {
        let live_q = n_q - question_pad.map_or(0, |p| p.iter().filter(|&&x| x).count());
        let n_v = vq.rows();
        c = [
            c[0].scale(1.0 / live_q as f64),
            c[1].scale(1.0 / live_q as f64),
            c[2].scale(1.0 / n_v as f64),
            c[3].scale(1.0 / n_v as f64),
        ];
    }
    let question = qq.scale_by(c[0])?.add(qv.scale_by(c[1])?)?;
    let video = vq.scale_by(c[2])?.add(vv.scale_by(c[3])?)?;
    Ok((question, video))
}

/// Output of [`iterate_reasoning`].
pub struct Reasoned<'t> {
    pub question: Var<'t>,
    pub video: Var<'t>,
    /// Joint weight matrix of the last iteration, if any ran.
    pub last_weights: Option<Tensor>,
}

/// Runs weight matrix, attention and fusion `iterations` times, feeding
/// each result back in. The same networks serve every iteration.
pub fn iterate_reasoning<'t>(
    question: Var<'t>,
    video: Var<'t>,
    nets: &AttentionNets<'t>,
    iterations: usize,
    question_pad: Option<&[bool]>,
    mode: BlockWeights,
) -> Result<Reasoned<'t>> {
    if let Some(p) = question_pad {
        if p.len() != question.rows() {
            return Err(Error::Dimension {
                op: "question padding mask",
                lhs: question.shape(),
                rhs: vec![p.len()],
            });
        }
    }
    let (mut q, mut v) = (question, video);
    let mut last = None;
    for _ in 0..iterations {
        let w = joint_weight_matrix(q, v, question_pad)?;
        let outs = four_way_attention(q, v, nets, question_pad)?;
        (q, v) = modality_fusion(w, outs, question_pad, mode)?;
        last = Some(w);
    }
    Ok(Reasoned {
        question: q,
        video: v,
        last_weights: last.map(|w| (*w.value()).clone()),
    })
}

/// Dense text rendering of a matrix: one line per row, values separated by
/// spaces.
pub fn format_matrix(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
