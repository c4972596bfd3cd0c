//! Graph builders for the recurrent encoders and the attention scorer.

use ndarray::Array2;

use crate::autodiff::{Graph, NodeId};
use crate::model::{BiGruParams, GruParams};

/// Leaf ids for one GRU direction.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub bx: NodeId,
    pub bh: NodeId,
}

impl GruNodes {
    pub fn leaf(g: &mut Graph, p: &GruParams) -> Self {
        GruNodes {
            wx: g.leaf(p.wx.clone()),
            wh: g.leaf(p.wh.clone()),
            bx: g.leaf(p.bx.clone()),
            bh: g.leaf(p.bh.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruNodes {
    pub fwd: GruNodes,
    pub bwd: GruNodes,
}

impl BiGruNodes {
    pub fn leaf(g: &mut Graph, p: &BiGruParams) -> Self {
        BiGruNodes {
            fwd: GruNodes::leaf(g, &p.fwd),
            bwd: GruNodes::leaf(g, &p.bwd),
        }
    }
}

pub struct BiGruOut {
    /// Hidden state per timestep for each direction.
    pub fwd: Vec<NodeId>,
    pub bwd: Vec<NodeId>,
    /// State after the last real token (forward) and after token 0 (backward).
    pub final_fwd: NodeId,
    pub first_bwd: NodeId,
}

impl BiGruOut {
    /// Per-timestep concatenated encoding (B x 2H).
    pub fn concat_steps(&self, g: &mut Graph) -> Vec<NodeId> {
        self.fwd
            .iter()
            .zip(&self.bwd)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect()
    }

    /// Document summary: forward final state next to backward initial-token
    /// state (B x 2H).
    pub fn summary(&self, g: &mut Graph) -> NodeId {
        g.concat_cols(&[self.final_fwd, self.first_bwd])
    }
}

/// Run both directions over per-timestep inputs. `pad_keep[t]` is the Bx1
/// real-token indicator; pad steps carry the previous state, so the forward
/// final state sits at each document's true end.
pub fn bigru(
    g: &mut Graph,
    nodes: &BiGruNodes,
    xs: &[NodeId],
    pad_keep: &[Array2<f64>],
    batch: usize,
    hidden: usize,
) -> BiGruOut {
    let t_max = xs.len();
    assert_eq!(pad_keep.len(), t_max);
    let mut fwd = Vec::with_capacity(t_max);
    let mut h = g.leaf(Array2::zeros((batch, hidden)));
    for t in 0..t_max {
        h = g.gru_step(
            xs[t],
            h,
            nodes.fwd.wx,
            nodes.fwd.wh,
            nodes.fwd.bx,
            nodes.fwd.bh,
            pad_keep[t].clone(),
        );
        fwd.push(h);
    }
    let final_fwd = h;

    let mut bwd = vec![NodeId::default(); t_max];
    let mut hb = g.leaf(Array2::zeros((batch, hidden)));
    for t in (0..t_max).rev() {
        hb = g.gru_step(
            xs[t],
            hb,
            nodes.bwd.wx,
            nodes.bwd.wh,
            nodes.bwd.bx,
            nodes.bwd.bh,
            pad_keep[t].clone(),
        );
        bwd[t] = hb;
    }
    BiGruOut {
        fwd,
        bwd,
        final_fwd,
        first_bwd: hb,
    }
}

/// Shared additive attention scores: `e_t = tanh(feat_t W_a) v_a`, one column
/// per timestep, concatenated to B x T.
pub fn attention_scores(
    g: &mut Graph,
    feats: &[NodeId],
    attn_w: NodeId,
    attn_v: NodeId,
) -> NodeId {
    let cols: Vec<NodeId> = feats
        .iter()
        .map(|&f| {
            let proj = g.matmul(f, attn_w);
            let act = g.tanh(proj);
            g.matmul(act, attn_v)
        })
        .collect();
    g.concat_cols(&cols)
}

/// Attention-pooled representation over a fixed support: softmax the scores
/// on `support > 0` rows, then weight-sum the per-step features. Rows with
/// empty support come out zero.
pub fn attention_pool(
    g: &mut Graph,
    scores: NodeId,
    feats: &[NodeId],
    support: Array2<f64>,
) -> NodeId {
    let weights = g.masked_softmax_rows(scores, support);
    let mut acc: Option<NodeId> = None;
    for (t, &f) in feats.iter().enumerate() {
        let w_t = g.slice_cols(weights, t, t + 1);
        let term = g.mul_col(f, w_t);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("attention over zero timesteps")
}
