use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Architecture;
use crate::autodiff::{Gradients, Tape, Var};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::rng;

const EMBEDDING_STD: f64 = 0.01;

/// Per-modality weights. Matrices map row vectors via `x * W^T`, so a
/// `d x d_m` matrix takes `d_m`-wide inputs to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    pub modality: Modality,
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array2<f64>,
    pub pref_w: Array2<f64>,
    pub pref_b: Array2<f64>,
}

/// Attention weights shared by all modalities; `q` is a `d x 1` column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
    pub q: Array2<f64>,
}

/// Every trainable tensor. Also used as the container for gradients and
/// optimizer moments, which share the exact same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub modalities: Vec<ModalityParams>,
    pub attention: Option<AttentionParams>,
}

fn xavier(rng: &mut rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Xavier-uniform weights, zero biases and `N(0, 0.01^2)` ID embeddings.
pub fn init_params(
    arch: &Architecture,
    dims: &[(Modality, usize)],
    n_users: usize,
    n_items: usize,
    seed: u64,
) -> Result<ModelParams> {
    arch.validate()?;
    let d = arch.d();
    let mut rng = rng::stream(seed, rng::STREAM_INIT);
    let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
    let user_emb = Array2::from_shape_simple_fn((n_users, d), || normal.sample(&mut rng));
    let item_emb = Array2::from_shape_simple_fn((n_items, d), || normal.sample(&mut rng));
    let mut modalities = Vec::new();
    let mut attention = None;
    if let Architecture::Multimodal(cfg) = arch {
        for &m in &cfg.modalities {
            let d_m = dims
                .iter()
                .find(|(dm, _)| *dm == m)
                .map(|&(_, w)| w)
                .ok_or_else(|| Error::Config(format!("no feature width given for {m}")))?;
            modalities.push(ModalityParams {
                modality: m,
                proj_w: xavier(&mut rng, d, d_m),
                proj_b: Array2::zeros((1, d)),
                gate_w: xavier(&mut rng, d, d),
                gate_b: Array2::zeros((1, d)),
                pref_w: xavier(&mut rng, d, d),
                pref_b: Array2::zeros((1, d)),
            });
        }
        attention = Some(AttentionParams {
            w: xavier(&mut rng, d, d),
            b: Array2::zeros((1, d)),
            q: xavier(&mut rng, d, 1),
        });
    }
    Ok(ModelParams {
        user_emb,
        item_emb,
        modalities,
        attention,
    })
}

impl ModelParams {
    pub fn modality(&self, m: Modality) -> Option<&ModalityParams> {
        self.modalities.iter().find(|p| p.modality == m)
    }

    /// Tensors in canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("user_emb".to_string(), &self.user_emb),
            ("item_emb".to_string(), &self.item_emb),
        ];
        for mp in &self.modalities {
            let m = mp.modality;
            out.push((format!("{m}.proj_w"), &mp.proj_w));
            out.push((format!("{m}.proj_b"), &mp.proj_b));
            out.push((format!("{m}.gate_w"), &mp.gate_w));
            out.push((format!("{m}.gate_b"), &mp.gate_b));
            out.push((format!("{m}.pref_w"), &mp.pref_w));
            out.push((format!("{m}.pref_b"), &mp.pref_b));
        }
        if let Some(a) = &self.attention {
            out.push(("attn.w".to_string(), &a.w));
            out.push(("attn.b".to_string(), &a.b));
            out.push(("attn.q".to_string(), &a.q));
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.user_emb, &mut self.item_emb];
        for mp in &mut self.modalities {
            out.extend([
                &mut mp.proj_w,
                &mut mp.proj_b,
                &mut mp.gate_w,
                &mut mp.gate_b,
                &mut mp.pref_w,
                &mut mp.pref_b,
            ]);
        }
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.w, &mut a.b, &mut a.q]);
        }
        out
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn n_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rebuilds a parameter set from named tensors, checking that the names
    /// and shapes match `template`.
    pub fn from_named(template: &ModelParams, tensors: Vec<(String, Array2<f64>)>) -> Result<ModelParams> {
        let expected = template.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut out = template.clone();
        for ((slot, (name, shape_ref)), (got_name, value)) in out
            .tensors_mut()
            .into_iter()
            .zip(expected.iter().map(|(n, t)| (n.clone(), t.dim())))
            .zip(tensors)
        {
            if name != got_name || shape_ref != value.dim() {
                return Err(Error::Config(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape_ref:?}",
                    value.dim()
                )));
            }
            *slot = value;
        }
        Ok(out)
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        let user_emb = tape.param(self.user_emb.clone());
        let item_emb = tape.param(self.item_emb.clone());
        let modalities = self
            .modalities
            .iter()
            .map(|mp| ModalityVars {
                modality: mp.modality,
                proj_w: tape.param(mp.proj_w.clone()),
                proj_b: tape.param(mp.proj_b.clone()),
                gate_w: tape.param(mp.gate_w.clone()),
                gate_b: tape.param(mp.gate_b.clone()),
                pref_w: tape.param(mp.pref_w.clone()),
                pref_b: tape.param(mp.pref_b.clone()),
            })
            .collect();
        let attention = self.attention.as_ref().map(|a| AttentionVars {
            w: tape.param(a.w.clone()),
            b: tape.param(a.b.clone()),
            q: tape.param(a.q.clone()),
        });
        ParamVars {
            user_emb,
            item_emb,
            modalities,
            attention,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModalityVars {
    pub modality: Modality,
    pub proj_w: Var,
    pub proj_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub pref_w: Var,
    pub pref_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w: Var,
    pub b: Var,
    pub q: Var,
}

/// Tape handles of every parameter, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub user_emb: Var,
    pub item_emb: Var,
    pub modalities: Vec<ModalityVars>,
    pub attention: Option<AttentionVars>,
}

impl ParamVars {
    pub fn modality(&self, m: Modality) -> Option<&ModalityVars> {
        self.modalities.iter().find(|v| v.modality == m)
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.user_emb, self.item_emb];
        for mv in &self.modalities {
            out.extend([mv.proj_w, mv.proj_b, mv.gate_w, mv.gate_b, mv.pref_w, mv.pref_b]);
        }
        if let Some(a) = &self.attention {
            out.extend([a.w, a.b, a.q]);
        }
        out
    }

    /// Collects gradients into a [`ModelParams`]-shaped container; tensors
    /// the loss does not depend on get zeros.
    pub fn gradients(&self, grads: &mut Gradients, template: &ModelParams) -> ModelParams {
        let mut out = template.zeros_like();
        for (slot, var) in out.tensors_mut().into_iter().zip(self.vars()) {
            if let Some(g) = grads.take(var) {
                *slot = g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn arch() -> Architecture {
        Architecture::Multimodal(ModelConfig {
            modalities: vec![Modality::Textual],
            ..ModelConfig::default()
        })
    }

    #[test]
    fn deterministic_per_seed() {
        let a = init_params(&arch(), &[(Modality::Textual, 768)], 5, 7, 3).unwrap();
        let b = init_params(&arch(), &[(Modality::Textual, 768)], 5, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch(), &[(Modality::Textual, 768)], 5, 7, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_zero_and_xavier_bound() {
        let p = init_params(&arch(), &[(Modality::Textual, 768)], 5, 7, 3).unwrap();
        let mp = &p.modalities[0];
        assert!(mp
            .proj_b
            .iter()
            .chain(mp.gate_b.iter())
            .chain(mp.pref_b.iter())
            .all(|&v| v == 0.0));
        let bound = (6.0f64 / (64.0 + 768.0)).sqrt();
        assert!((bound - 0.0849).abs() < 1e-4);
        assert!(mp.proj_w.iter().all(|v| v.abs() <= bound));
        assert_eq!(mp.proj_w.dim(), (64, 768));
        assert_eq!(p.attention.as_ref().unwrap().q.dim(), (64, 1));
    }

    #[test]
    fn missing_width_is_config_error() {
        assert!(init_params(&arch(), &[(Modality::Visual, 4)], 2, 2, 0).is_err());
    }

    #[test]
    fn baseline_params_have_only_embeddings() {
        let p = init_params(&Architecture::MatrixFactorization { d: 8 }, &[], 3, 4, 0).unwrap();
        assert_eq!(p.named_tensors().len(), 2);
    }

    #[test]
    fn from_named_round_trip() {
        let p = init_params(&arch(), &[(Modality::Textual, 6)], 3, 4, 1).unwrap();
        let named: Vec<_> = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(&p.zeros_like(), named).unwrap(), p);
    }
}
