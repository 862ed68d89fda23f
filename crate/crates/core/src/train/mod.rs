//! Negative sampling, loss assembly, AdamW and the epoch loop.

mod gradcheck;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{Modality, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EmbeddingScorer, Phase};
use crate::losses::{
    bpr_loss_with_grad, circle_loss_with_grad, emb_reg_with_grad, total_loss, CircleParams, LossComponents,
};
use crate::model::{forward, forward_on_tape, init_params, Architecture, GraphContext, ModelParams};
use crate::rng;

pub use gradcheck::{grad_check, grad_check_fixture, GradCheckFixture, GradCheckReport};

/// Rejection-sampling budget per negative.
pub const MAX_NEGATIVE_ATTEMPTS: usize = 100;

/// Cut-off used for validation during training.
pub const VAL_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled weight decay; zero turns AdamW into Adam.
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of the ID-embedding regulariser.
    pub reg_lambda: f64,
    pub circle: CircleParams,
    /// Evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Epochs between validation runs; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 1024,
            epochs: 200,
            weight_decay: 1e-5,
            seed: 123,
            reg_lambda: 1e-4,
            circle: CircleParams::default(),
            early_stop_patience: 20,
            eval_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.reg_lambda < 0.0 {
            return Err(Error::Config("weight_decay and reg_lambda must be >= 0".into()));
        }
        self.circle.validate()
    }
}

/// Aligned `(user, positive, negative)` index arrays.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchTriples {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
}

impl BatchTriples {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Uniform item not in `u`'s training set.
pub fn sample_negative<R: Rng + ?Sized>(split: &SplitDataset, u: usize, rng: &mut R) -> Result<usize> {
    for _ in 0..MAX_NEGATIVE_ATTEMPTS {
        let j = rng.random_range(0..split.n_items());
        if !split.is_train_edge(u, j) {
            return Ok(j);
        }
    }
    Err(Error::Sampling {
        user: u,
        attempts: MAX_NEGATIVE_ATTEMPTS,
    })
}

/// One epoch of triples: shuffled training edges, each paired with a fresh
/// negative, cut into batches (the last one may be short).
pub fn sample_batches<R: Rng + ?Sized>(
    split: &SplitDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchTriples>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut edges: Vec<(usize, usize)> = split.train_edges().collect();
    if edges.is_empty() {
        return Err(Error::EmptyDataset("no training edges".into()));
    }
    edges.shuffle(rng);
    let mut out = Vec::with_capacity(edges.len().div_ceil(batch_size));
    for chunk in edges.chunks(batch_size) {
        let mut b = BatchTriples::default();
        for &(u, i) in chunk {
            b.users.push(u);
            b.pos_items.push(i);
            b.neg_items.push(sample_negative(split, u, rng)?);
        }
        out.push(b);
    }
    Ok(out)
}

type LossFn = fn(
    ndarray::ArrayView2<'_, f64>,
    ndarray::ArrayView2<'_, f64>,
    ndarray::ArrayView2<'_, f64>,
) -> Result<(f64, [Array2<f64>; 3])>;

/// Records a scalar loss with analytic gradients as a custom tape node.
fn loss_node(
    tape: &mut Tape,
    inputs: [Var; 3],
    f: impl FnOnce(
        ndarray::ArrayView2<'_, f64>,
        ndarray::ArrayView2<'_, f64>,
        ndarray::ArrayView2<'_, f64>,
    ) -> Result<(f64, [Array2<f64>; 3])>,
) -> Result<(Var, f64)> {
    let (value, grads) = f(
        tape.value(inputs[0]).view(),
        tape.value(inputs[1]).view(),
        tape.value(inputs[2]).view(),
    )?;
    let node = tape.custom(
        &inputs,
        Array2::from_elem((1, 1), value),
        Box::new(move |g| grads.iter().map(|x| x * g[[0, 0]]).collect()),
    );
    Ok((node, value))
}

/// Builds the forward pass and the total objective for one batch.
fn record_loss(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &BatchTriples,
    ctx: &GraphContext,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(crate::model::ParamVars, Var, LossComponents)> {
    if batch.is_empty() || batch.pos_items.len() != batch.len() || batch.neg_items.len() != batch.len() {
        return Err(Error::invalid("batch arrays must be non-empty and aligned"));
    }
    let vars = params.to_tape(tape);
    let fv = forward_on_tape(tape, &vars, ctx, arch)?;

    let u = tape.gather(fv.final_user, &batch.users)?;
    let p = tape.gather(fv.final_item, &batch.pos_items)?;
    let n = tape.gather(fv.final_item, &batch.neg_items)?;
    let bpr_fn: LossFn = bpr_loss_with_grad;
    let (bpr_node, bpr) = loss_node(tape, [u, p, n], bpr_fn)?;

    let u0 = tape.gather(vars.user_emb, &batch.users)?;
    let p0 = tape.gather(vars.item_emb, &batch.pos_items)?;
    let n0 = tape.gather(vars.item_emb, &batch.neg_items)?;
    let lambda = cfg.reg_lambda;
    let (reg_node, reg) = loss_node(tape, [u0, p0, n0], |a, b, c| emb_reg_with_grad(a, b, c, lambda))?;

    let mut root = tape.add(bpr_node, reg_node)?;
    let (mut ct, mut cv) = (0.0, 0.0);
    if arch.uses_circle() {
        let fused = fv
            .fused_item
            .ok_or_else(|| Error::Config("circle loss needs fused item features".into()))?;
        let bu = tape.gather(fv.behavior_user, &batch.users)?;
        let fp = tape.gather(fused, &batch.pos_items)?;
        for &(m, modal) in &fv.modal_item {
            let mp = tape.gather(modal, &batch.pos_items)?;
            let circle = &cfg.circle;
            let (node, value) = loss_node(tape, [bu, fp, mp], |a, b, c| circle_loss_with_grad(a, b, c, circle, m))?;
            match m {
                Modality::Textual => ct = value,
                Modality::Visual => cv = value,
            }
            let weighted = tape.scale(node, cfg.circle.coef);
            root = tape.add(root, weighted)?;
        }
    }
    let components = total_loss(bpr, reg, ct, cv, cfg.circle.coef, arch.uses_circle())?;
    Ok((vars, root, components))
}

/// Loss components of one batch without gradients.
pub fn batch_loss(
    params: &ModelParams,
    batch: &BatchTriples,
    ctx: &GraphContext,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    Ok(record_loss(&mut tape, params, batch, ctx, arch, cfg)?.2)
}

/// Loss components and exact gradients for every parameter tensor.
pub fn backward(
    params: &ModelParams,
    batch: &BatchTriples,
    ctx: &GraphContext,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(LossComponents, ModelParams)> {
    let mut tape = Tape::new();
    let (vars, root, components) = record_loss(&mut tape, params, batch, ctx, arch, cfg)?;
    let mut grads = tape.backward(root)?;
    let grads = vars.gradients(&mut grads, params);
    for (name, g) in grads.named_tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((components, grads))
}

/// First and second moments for every tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Decoupled weight decay `p -= lr*wd*p`, then a bias-corrected Adam step.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, lr: f64, wd: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let grads = grads.named_tensors();
    let params = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
        Zip::from(p).and(g).and(m).and(v).par_for_each(|p, &g, m, v| {
            *p -= lr * wd * *p;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
}

/// One line of the training history. Loss fields are epoch sums divided by
/// the number of training triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bpr: f64,
    pub loss_reg: f64,
    pub loss_circle_text: f64,
    pub loss_circle_image: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_recall20: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ndcg20: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best-validation parameters, or the last ones when validation is off.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_recall: Option<f64>,
}

/// Validation Recall@20 and NDCG@20 of `params`.
pub fn validate(
    params: &ModelParams,
    split: &SplitDataset,
    ctx: &GraphContext,
    arch: &Architecture,
) -> Result<(f64, f64)> {
    let out = forward(params, ctx, arch)?;
    let scorer = EmbeddingScorer::new(out.final_user, out.final_item)?;
    let report = evaluate_model(&scorer, split, Phase::Val, VAL_K, "", "", 0)?;
    Ok((report.recall, report.ndcg))
}

/// Trains from a seeded initialisation. When `history_path` is given every
/// epoch record is appended to it as one JSON line.
pub fn fit(
    split: &SplitDataset,
    ctx: &GraphContext,
    arch: &Architecture,
    cfg: &TrainConfig,
    history_path: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    let params = init_params(arch, &ctx.feature_dims(), split.n_users(), split.n_items(), cfg.seed)?;
    fit_from(params, split, ctx, arch, cfg, history_path)
}

/// [`fit`] starting from given parameters.
pub fn fit_from(
    mut params: ModelParams,
    split: &SplitDataset,
    ctx: &GraphContext,
    arch: &Architecture,
    cfg: &TrainConfig,
    history_path: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut log_file = match history_path {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let mut state = OptimizerState::new(&params);
    let mut rng = rng::stream(cfg.seed, rng::STREAM_SAMPLER);
    let n_triples = split.n_train() as f64;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let last_good = params.clone();
        let diverged = |reason: String, last_good: ModelParams| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good),
        };
        let mut sums = LossComponents::default();
        for batch in sample_batches(split, cfg.batch_size, &mut rng)? {
            let (loss, grads) = match backward(&params, &batch, ctx, arch, cfg) {
                Ok(r) => r,
                Err(e @ (Error::NonFinite(_) | Error::ZeroNorm(_))) => return Err(diverged(e.to_string(), last_good)),
                Err(e) => return Err(e),
            };
            sums.bpr += loss.bpr;
            sums.reg += loss.reg;
            sums.circle_textual += loss.circle_textual;
            sums.circle_visual += loss.circle_visual;
            sums.total += loss.total;
            adamw_step(&mut params, &grads, &mut state, cfg.lr, cfg.weight_decay);
        }
        if !params.is_finite() {
            return Err(diverged("parameters became non-finite".into(), last_good));
        }
        let mut record = EpochRecord {
            epoch,
            loss_total: sums.total / n_triples,
            loss_bpr: sums.bpr / n_triples,
            loss_reg: sums.reg / n_triples,
            loss_circle_text: sums.circle_textual / n_triples,
            loss_circle_image: sums.circle_visual / n_triples,
            val_recall20: None,
            val_ndcg20: None,
        };
        let mut stop = false;
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            let (recall, ndcg) = validate(&params, split, ctx, arch)?;
            record.val_recall20 = Some(recall);
            record.val_ndcg20 = Some(ndcg);
            if best.as_ref().is_none_or(|(_, r, _)| recall > *r) {
                best = Some((epoch, recall, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                stop = cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience;
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.5} (bpr {:.5}){} in {:.1}s",
            record.loss_total,
            record.loss_bpr,
            record
                .val_recall20
                .map(|r| format!(", val recall@20 {r:.4}"))
                .unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        history.push(record);
        if stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(match best {
        Some((epoch, recall, best_params)) => FitResult {
            params: best_params,
            history,
            best_epoch: Some(epoch),
            best_val_recall: Some(recall),
        },
        None => FitResult {
            params,
            history,
            best_epoch: None,
            best_val_recall: None,
        },
    })
}

/// Reads a JSON-lines history file.
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, user_split, SplitRatios, SynthConfig};
    use crate::model::ModelConfig;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(v: f64) -> ModelParams {
        ModelParams {
            user_emb: array![[v]],
            item_emb: array![[v]],
            modalities: Vec::new(),
            attention: None,
        }
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut p = scalar_params(0.7);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar_params(0.0), &mut s, 0.1, 0.0);
        assert_eq!(p, scalar_params(0.7));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adamw_decay_only() {
        let mut p = scalar_params(2.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar_params(0.0), &mut s, 1.0, 0.1);
        assert!((p.user_emb[[0, 0]] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        for g in [3.0, -0.02] {
            let mut p = scalar_params(1.0);
            let mut s = OptimizerState::new(&p);
            adamw_step(&mut p, &scalar_params(g), &mut s, 0.01, 0.0);
            let want = 1.0 - 0.01 * g / (g.abs() + ADAM_EPS);
            assert!((p.user_emb[[0, 0]] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let grads = [0.5, -1.0, 0.25, 2.0, -0.1];
        let (lr, mut x, mut m, mut v) = (0.05, 0.3, 0.0, 0.0);
        let mut p = scalar_params(0.3);
        let mut s = OptimizerState::new(&p);
        for (t, &g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            adamw_step(&mut p, &scalar_params(g), &mut s, lr, 0.0);
        }
        assert!((p.user_emb[[0, 0]] - x).abs() < 1e-14);
    }

    fn synth_split(n_users: usize, n_items: usize, epu: usize) -> SplitDataset {
        let out = synth_dataset(&SynthConfig {
            n_users,
            n_items,
            edges_per_user: epu,
            d_visual: 4,
            d_textual: 4,
            seed: 3,
        })
        .unwrap();
        user_split(&out.dataset, SplitRatios::default(), 3).unwrap()
    }

    #[test]
    fn batch_sizes_and_negatives() {
        let split = synth_split(250, 100, 10);
        assert_eq!(split.n_train(), 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = sample_batches(&split, 768, &mut rng).unwrap();
        let sizes: Vec<usize> = batches.iter().map(BatchTriples::len).collect();
        assert_eq!(sizes, vec![768, 768, 464]);
        for b in &batches {
            for k in 0..b.len() {
                assert!(split.is_train_edge(b.users[k], b.pos_items[k]));
                assert!(!split.is_train_edge(b.users[k], b.neg_items[k]));
            }
        }
        let again = sample_batches(&split, 768, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn saturated_user_fails_sampling() {
        use crate::dataset::{InteractionDataset, SplitLabel, Vocab};
        let users = Vocab::from_ids(vec!["u".into()]).unwrap();
        let items = Vocab::from_ids(vec!["a".into(), "b".into()]).unwrap();
        let base = InteractionDataset::new(vec![(0, 0), (0, 1)], users, items).unwrap();
        let split = SplitDataset::from_assignment(base, vec![SplitLabel::Train; 2]).unwrap();
        let err = sample_batches(&split, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Sampling { user: 0, attempts: 100 }));
    }

    #[test]
    fn duplicated_batch_doubles_gradients() {
        let split = synth_split(20, 16, 4);
        let ctx = GraphContext::new(&split, Vec::new()).unwrap();
        let arch = Architecture::LightGcn { d: 4, layers: 2 };
        let cfg = TrainConfig {
            reg_lambda: 0.0,
            ..TrainConfig::default()
        };
        let params = init_params(&arch, &[], 20, 16, 1).unwrap();
        let batch = sample_batches(&split, 8, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .remove(0);
        let doubled = BatchTriples {
            users: [batch.users.clone(), batch.users.clone()].concat(),
            pos_items: [batch.pos_items.clone(), batch.pos_items.clone()].concat(),
            neg_items: [batch.neg_items.clone(), batch.neg_items.clone()].concat(),
        };
        let (l1, g1) = backward(&params, &batch, &ctx, &arch, &cfg).unwrap();
        let (l2, g2) = backward(&params, &doubled, &ctx, &arch, &cfg).unwrap();
        assert!((l2.total - 2.0 * l1.total).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.named_tensors().iter().zip(g2.named_tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (2.0 * x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn history_round_trips_and_omits_metrics_off_eval_epochs() {
        let r = EpochRecord {
            epoch: 1,
            loss_total: 1.0,
            loss_bpr: 0.5,
            loss_reg: 0.1,
            loss_circle_text: 0.0,
            loss_circle_image: 0.0,
            val_recall20: None,
            val_ndcg20: None,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains("val_recall20"));
        assert_eq!(serde_json::from_str::<EpochRecord>(&line).unwrap(), r);
    }

    #[test]
    fn zero_circle_coefficient_removes_circle_gradients() {
        let out = synth_dataset(&SynthConfig {
            n_users: 12,
            n_items: 10,
            edges_per_user: 4,
            d_visual: 3,
            d_textual: 5,
            seed: 2,
        })
        .unwrap();
        let split = user_split(&out.dataset, SplitRatios::default(), 2).unwrap();
        let inputs = Modality::ALL
            .iter()
            .map(|&m| crate::model::ModalityInput {
                features: out.features(m).clone(),
                graph: Some(crate::graph::build_modality_graph(out.features(m), 3).unwrap()),
            })
            .collect();
        let ctx = GraphContext::new(&split, inputs).unwrap();
        let with = Architecture::Multimodal(ModelConfig {
            d: 4,
            ..ModelConfig::default()
        });
        let without = Architecture::Multimodal(ModelConfig {
            d: 4,
            use_circle: false,
            ..ModelConfig::default()
        });
        let mut cfg = TrainConfig::default();
        cfg.circle.coef = 0.0;
        let params = init_params(&with, &ctx.feature_dims(), 12, 10, 5).unwrap();
        let batch = sample_batches(&split, 16, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .remove(0);
        let (_, g_zero) = backward(&params, &batch, &ctx, &with, &cfg).unwrap();
        let (_, g_off) = backward(&params, &batch, &ctx, &without, &cfg).unwrap();
        for ((name, a), (_, b)) in g_zero.named_tensors().iter().zip(g_off.named_tensors()) {
            let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{name}: {diff}");
        }
    }
}
