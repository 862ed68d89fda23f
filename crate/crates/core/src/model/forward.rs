use std::sync::Arc;

use ndarray::{Array2, ArrayView1};

use super::params::{AttentionVars, ModalityVars, ParamVars};
use super::{Architecture, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::dataset::{FeatureMatrix, Modality, SplitDataset};
use crate::error::{Error, Result};
use crate::graph::ModalityGraph;
use crate::sparse::{build_interaction_matrix, build_norm_adjacency, SparseMatrix, SparseOperator};

/// Raw features of one modality and, when item-item propagation is on, its
/// frozen similarity graph.
#[derive(Debug, Clone)]
pub struct ModalityInput {
    pub features: FeatureMatrix,
    pub graph: Option<ModalityGraph>,
}

/// Fixed structures a forward pass reads: the training interaction matrix,
/// its normalized adjacency, the user lifting operator and modality inputs.
#[derive(Debug, Clone)]
pub struct GraphContext {
    n_users: usize,
    n_items: usize,
    interactions: SparseMatrix,
    norm_adj: SparseOperator,
    user_lift: SparseOperator,
    modalities: Vec<ModalityInput>,
}

impl GraphContext {
    pub fn new(split: &SplitDataset, modalities: Vec<ModalityInput>) -> Result<Self> {
        Self::from_interactions(build_interaction_matrix(split), modalities)
    }

    pub fn from_interactions(r: SparseMatrix, modalities: Vec<ModalityInput>) -> Result<Self> {
        let (n_users, n_items) = r.shape();
        for input in &modalities {
            if input.features.rows() != n_items {
                return Err(Error::shape(
                    "GraphContext",
                    format!(
                        "{} features have {} rows for {n_items} items",
                        input.features.modality,
                        input.features.rows()
                    ),
                ));
            }
            if let Some(g) = &input.graph {
                if g.adjacency().shape() != (n_items, n_items) {
                    return Err(Error::shape(
                        "GraphContext",
                        format!(
                            "{} graph is {:?} for {n_items} items",
                            g.modality,
                            g.adjacency().shape()
                        ),
                    ));
                }
            }
        }
        let norm_adj = SparseOperator::symmetric(build_norm_adjacency(&r)?);
        let user_lift = SparseOperator::new(r.row_normalized());
        Ok(GraphContext {
            n_users,
            n_items,
            interactions: r,
            norm_adj,
            user_lift,
            modalities,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn interactions(&self) -> &SparseMatrix {
        &self.interactions
    }

    pub fn norm_adj(&self) -> &SparseOperator {
        &self.norm_adj
    }

    pub fn user_lift(&self) -> &SparseOperator {
        &self.user_lift
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalityInput> {
        self.modalities.iter().find(|i| i.features.modality == m)
    }

    /// Feature width of every modality present.
    pub fn feature_dims(&self) -> Vec<(Modality, usize)> {
        self.modalities
            .iter()
            .map(|i| (i.features.modality, i.features.cols()))
            .collect()
    }
}

/// Projects raw features to width `d` and, with the purifier on, gates them
/// by the item ID embeddings.
pub fn purify(
    tape: &mut Tape,
    features: Arc<Array2<f64>>,
    item_emb: Var,
    mv: &ModalityVars,
    use_purifier: bool,
) -> Result<Var> {
    let projected = tape.const_matmul_bt(features, mv.proj_w)?;
    let projected = tape.add_row(projected, mv.proj_b)?;
    if !use_purifier {
        return Ok(projected);
    }
    let gate = tape.matmul_bt(projected, mv.gate_w)?;
    let gate = tape.add_row(gate, mv.gate_b)?;
    let gate = tape.tanh(gate);
    tape.mul(item_emb, gate)
}

/// `n_layers` linear steps over the item graph, then Frobenius scaling.
/// `graph` may be `None` only when `n_layers == 0`.
pub fn propagate_ii(tape: &mut Tape, g: Var, graph: Option<&SparseOperator>, n_layers: usize) -> Result<Var> {
    let mut x = g;
    if n_layers > 0 {
        let op = graph.ok_or_else(|| Error::Config("item-item propagation needs a modality graph".into()))?;
        for _ in 0..n_layers {
            x = tape.spmm(op, x)?;
        }
    }
    tape.frob_scale(x, "item-item propagated modality features")
}

/// Mean of each user's training-item rows.
pub fn lift_to_users(tape: &mut Tape, user_lift: &SparseOperator, item_modal: Var) -> Result<Var> {
    tape.spmm(user_lift, item_modal)
}

/// Layer mean of `L^l G0` for `l = 0..=n_layers`.
pub fn propagate_ui(tape: &mut Tape, g0: Var, adj: &SparseOperator, n_layers: usize) -> Result<Var> {
    let mut layer = g0;
    let mut sum = g0;
    for _ in 0..n_layers {
        layer = tape.spmm(adj, layer)?;
        sum = tape.add(sum, layer)?;
    }
    Ok(if n_layers == 0 {
        sum
    } else {
        tape.scale(sum, 1.0 / (n_layers + 1) as f64)
    })
}

/// Preference-gated attention over modalities. Returns the shared features
/// and the `N x |M|` attention weights.
pub fn fuse(
    tape: &mut Tape,
    behavior: Var,
    modal: &[Var],
    prefs: &[ModalityVars],
    attn: &AttentionVars,
) -> Result<(Var, Var)> {
    if modal.is_empty() || modal.len() != prefs.len() {
        return Err(Error::shape(
            "fuse",
            format!("{} modality inputs for {} preference gates", modal.len(), prefs.len()),
        ));
    }
    let mut gated = Vec::with_capacity(modal.len());
    let mut logits = Vec::with_capacity(modal.len());
    for (&feat, mv) in modal.iter().zip(prefs) {
        let p = tape.matmul_bt(behavior, mv.pref_w)?;
        let p = tape.add_row(p, mv.pref_b)?;
        let p = tape.tanh(p);
        let h = tape.mul(p, feat)?;
        let t = tape.matmul_bt(h, attn.w)?;
        let t = tape.add_row(t, attn.b)?;
        let t = tape.tanh(t);
        logits.push(tape.matmul(t, attn.q)?);
        gated.push(h);
    }
    let logits = tape.concat_cols(&logits)?;
    let a = tape.row_softmax(logits);
    let mut shared: Option<Var> = None;
    for (m, &h) in gated.iter().enumerate() {
        let w = tape.column(a, m)?;
        let term = tape.mul_col(h, w)?;
        shared = Some(match shared {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    Ok((shared.expect("at least one modality"), a))
}

pub fn score(user: ArrayView1<'_, f64>, item: ArrayView1<'_, f64>) -> f64 {
    user.dot(&item)
}

/// Tape handles of every intermediate the losses need.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub final_user: Var,
    pub final_item: Var,
    pub behavior_user: Var,
    pub behavior_item: Var,
    pub modal_item: Vec<(Modality, Var)>,
    pub modal_user: Vec<(Modality, Var)>,
    pub fused_user: Option<Var>,
    pub fused_item: Option<Var>,
    pub attn_user: Option<Var>,
    pub attn_item: Option<Var>,
}

/// Records the forward pass of `arch` on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    ctx: &GraphContext,
    arch: &Architecture,
) -> Result<ForwardVars> {
    let (nu, ni) = (ctx.n_users, ctx.n_items);
    if tape.value(vars.user_emb).nrows() != nu || tape.value(vars.item_emb).nrows() != ni {
        return Err(Error::shape(
            "forward",
            format!(
                "embeddings {:?}/{:?} for {nu} users and {ni} items",
                tape.value(vars.user_emb).dim(),
                tape.value(vars.item_emb).dim()
            ),
        ));
    }
    let behavior = |tape: &mut Tape, layers: usize| -> Result<(Var, Var)> {
        // Zero layers is the identity; skipping the concat keeps gradient
        // accumulation identical to plain embeddings.
        if layers == 0 {
            return Ok((vars.user_emb, vars.item_emb));
        }
        let g0 = tape.concat_rows(vars.user_emb, vars.item_emb)?;
        let g = propagate_ui(tape, g0, &ctx.norm_adj, layers)?;
        Ok((tape.slice_rows(g, 0, nu)?, tape.slice_rows(g, nu, ni)?))
    };
    let plain = |bu: Var, bi: Var| ForwardVars {
        final_user: bu,
        final_item: bi,
        behavior_user: bu,
        behavior_item: bi,
        modal_item: Vec::new(),
        modal_user: Vec::new(),
        fused_user: None,
        fused_item: None,
        attn_user: None,
        attn_item: None,
    };
    let cfg = match arch {
        Architecture::MatrixFactorization { .. } => return Ok(plain(vars.user_emb, vars.item_emb)),
        Architecture::LightGcn { layers, .. } => {
            let (bu, bi) = behavior(tape, *layers)?;
            return Ok(plain(bu, bi));
        }
        Architecture::Multimodal(cfg) => cfg,
    };
    cfg.validate()?;
    let attn = vars
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("multimodal parameters lack attention weights".into()))?;

    let mut modal_item = Vec::new();
    let mut modal_user = Vec::new();
    let mut prefs = Vec::new();
    for &m in &cfg.modalities {
        let input = ctx
            .modality(m)
            .ok_or_else(|| Error::Config(format!("no {m} features loaded")))?;
        let mv = *vars
            .modality(m)
            .ok_or_else(|| Error::Config(format!("no {m} parameters")))?;
        let g = purify(tape, input.features.shared(), vars.item_emb, &mv, cfg.use_purifier)?;
        let layers = if cfg.use_item_item { cfg.ii_layers } else { 0 };
        let g = propagate_ii(tape, g, input.graph.as_ref().map(|g| g.operator()), layers)?;
        let gu = lift_to_users(tape, &ctx.user_lift, g)?;
        modal_item.push((m, g));
        modal_user.push((m, gu));
        prefs.push(mv);
    }

    let (bu, bi) = behavior(tape, cfg.ui_layers)?;
    let mu: Vec<Var> = modal_user.iter().map(|&(_, v)| v).collect();
    let mi: Vec<Var> = modal_item.iter().map(|&(_, v)| v).collect();
    let (gs_u, a_u) = fuse(tape, bu, &mu, &prefs, attn)?;
    let (gs_i, a_i) = fuse(tape, bi, &mi, &prefs, attn)?;
    let su = tape.frob_scale(gs_u, "fused user features")?;
    let si = tape.frob_scale(gs_i, "fused item features")?;
    Ok(ForwardVars {
        final_user: tape.add(bu, su)?,
        final_item: tape.add(bi, si)?,
        behavior_user: bu,
        behavior_item: bi,
        modal_item,
        modal_user,
        fused_user: Some(gs_u),
        fused_item: Some(gs_i),
        attn_user: Some(a_u),
        attn_item: Some(a_i),
    })
}

/// Values of a completed forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub final_user: Array2<f64>,
    pub final_item: Array2<f64>,
    pub behavior_user: Array2<f64>,
    pub behavior_item: Array2<f64>,
    pub modal_item: Vec<(Modality, Array2<f64>)>,
    pub modal_user: Vec<(Modality, Array2<f64>)>,
    pub fused_user: Option<Array2<f64>>,
    pub fused_item: Option<Array2<f64>>,
    pub attn_user: Option<Array2<f64>>,
    pub attn_item: Option<Array2<f64>>,
}

impl ForwardOutput {
    pub fn score(&self, u: usize, i: usize) -> f64 {
        score(self.final_user.row(u), self.final_item.row(i))
    }

    pub fn is_finite(&self) -> bool {
        let mut all = vec![
            &self.final_user,
            &self.final_item,
            &self.behavior_user,
            &self.behavior_item,
        ];
        all.extend(self.modal_item.iter().chain(&self.modal_user).map(|(_, v)| v));
        all.extend(
            [&self.fused_user, &self.fused_item, &self.attn_user, &self.attn_item]
                .into_iter()
                .flatten(),
        );
        all.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Runs the forward pass without keeping the tape.
pub fn forward(params: &ModelParams, ctx: &GraphContext, arch: &Architecture) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let fv = forward_on_tape(&mut tape, &vars, ctx, arch)?;
    let val = |v: Var| tape.value(v).clone();
    let opt = |v: Option<Var>| v.map(|v| tape.value(v).clone());
    Ok(ForwardOutput {
        final_user: val(fv.final_user),
        final_item: val(fv.final_item),
        behavior_user: val(fv.behavior_user),
        behavior_item: val(fv.behavior_item),
        modal_item: fv.modal_item.iter().map(|&(m, v)| (m, val(v))).collect(),
        modal_user: fv.modal_user.iter().map(|&(m, v)| (m, val(v))).collect(),
        fused_user: opt(fv.fused_user),
        fused_item: opt(fv.fused_item),
        attn_user: opt(fv.attn_user),
        attn_item: opt(fv.attn_item),
    })
}
