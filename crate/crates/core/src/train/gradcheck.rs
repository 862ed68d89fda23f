use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{backward, batch_loss, sample_batches, BatchTriples, TrainConfig};
use crate::dataset::{synth_dataset, user_split, Modality, SplitDataset, SplitRatios, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::build_modality_graph;
use crate::model::{init_params, Architecture, GraphContext, ModalityInput, ModelConfig, ModelParams};

/// A tiny end-to-end problem: every parameter tensor, both modalities and
/// the circle loss are live.
#[derive(Debug, Clone)]
pub struct GradCheckFixture {
    pub split: SplitDataset,
    pub ctx: GraphContext,
    pub arch: Architecture,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub batch: BatchTriples,
}

/// 6 users, 8 items, `d = 4`, both modalities, default circle settings.
pub fn grad_check_fixture(seed: u64) -> Result<GradCheckFixture> {
    let synth = synth_dataset(&SynthConfig {
        n_users: 6,
        n_items: 8,
        edges_per_user: 4,
        d_visual: 3,
        d_textual: 5,
        seed,
    })?;
    let split = user_split(&synth.dataset, SplitRatios::default(), seed)?;
    let inputs = Modality::ALL
        .iter()
        .map(|&m| {
            let features = synth.features(m).clone();
            let graph = build_modality_graph(&features, 3)?;
            Ok(ModalityInput {
                features,
                graph: Some(graph),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = GraphContext::new(&split, inputs)?;
    let arch = Architecture::Multimodal(ModelConfig {
        d: 4,
        ..ModelConfig::default()
    });
    let mut params = init_params(&arch, &ctx.feature_dims(), split.n_users(), split.n_items(), seed)?;
    // Embeddings of order 1 keep every path well above round-off.
    params.user_emb *= 50.0;
    params.item_emb *= 50.0;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let batch = sample_batches(&split, split.n_train(), &mut ChaCha8Rng::seed_from_u64(seed))?.remove(0);
    Ok(GradCheckFixture {
        split,
        ctx,
        arch,
        cfg,
        params,
        batch,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Worst per-tensor relative error.
    pub max_rel_error: f64,
    /// `(tensor, ||analytic - numeric|| / max(||analytic||, ||numeric||))`.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares analytic gradients with central differences of step `eps` for
/// every scalar parameter. `corrupt` names a tensor whose analytic gradient
/// is negated first, to check that the harness notices.
pub fn grad_check(fx: &GradCheckFixture, eps: f64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (_, analytic) = backward(&fx.params, &fx.batch, &fx.ctx, &fx.arch, &fx.cfg)?;
    let names: Vec<String> = analytic.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(c) = corrupt {
        if !names.iter().any(|n| n == c) {
            return Err(Error::invalid(format!("no tensor named {c}")));
        }
    }
    let loss = |p: &ModelParams| -> Result<f64> { Ok(batch_loss(p, &fx.batch, &fx.ctx, &fx.arch, &fx.cfg)?.total) };

    let mut per_tensor = Vec::with_capacity(names.len());
    for (t, (name, a)) in analytic.named_tensors().into_iter().enumerate() {
        let mut numeric = a.clone();
        for idx in 0..a.len() {
            let mut plus = fx.params.clone();
            let mut minus = fx.params.clone();
            plus.tensors_mut()[t].as_slice_mut().expect("standard layout")[idx] += eps;
            minus.tensors_mut()[t].as_slice_mut().expect("standard layout")[idx] -= eps;
            numeric.as_slice_mut().expect("standard layout")[idx] = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
        }
        let sign = if corrupt == Some(name.as_str()) { -1.0 } else { 1.0 };
        let a = a * sign;
        let norm = |x: &ndarray::Array2<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = norm(&a).max(norm(&numeric));
        let rel = if scale == 0.0 {
            0.0
        } else {
            norm(&(&a - &numeric)) / scale
        };
        per_tensor.push((name, rel));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_step() {
        let fx = grad_check_fixture(1).unwrap();
        assert!(grad_check(&fx, 0.0, None).is_err());
    }
}
