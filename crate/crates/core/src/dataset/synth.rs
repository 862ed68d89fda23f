use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, InteractionDataset, Modality, Vocab};
use crate::error::{Error, Result};
use crate::rng;

/// Probability that a draw stays inside the user's own cluster.
const IN_CLUSTER_PROB: f64 = 0.9;

/// Parameters of the clustered synthetic fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub edges_per_user: usize,
    pub d_visual: usize,
    pub d_textual: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 300,
            n_items: 150,
            edges_per_user: 10,
            d_visual: 32,
            d_textual: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: InteractionDataset,
    pub visual: FeatureMatrix,
    pub textual: FeatureMatrix,
    /// Latent cluster of each item.
    pub item_clusters: Vec<usize>,
    /// Latent cluster of each user.
    pub user_clusters: Vec<usize>,
}

impl SynthOutput {
    pub fn features(&self, modality: Modality) -> &FeatureMatrix {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }
}

/// Users and items are assigned round-robin to latent clusters. Every user
/// draws `edges_per_user` distinct items, staying in its own cluster with
/// probability 0.9. Item features are the cluster centroid plus Gaussian
/// noise, noisier for the visual modality than for the textual one.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    let SynthConfig {
        n_users,
        n_items,
        edges_per_user,
        d_visual,
        d_textual,
        seed,
    } = *cfg;
    if edges_per_user < 3 || n_items < edges_per_user || n_users == 0 || d_visual == 0 || d_textual == 0 {
        return Err(Error::invalid(format!("infeasible synthetic dataset {cfg:?}")));
    }
    let n_clusters = (n_items / (2 * edges_per_user)).clamp(2, 8).min(n_items);
    let item_clusters: Vec<usize> = (0..n_items).map(|i| i % n_clusters).collect();
    let user_clusters: Vec<usize> = (0..n_users).map(|u| u % n_clusters).collect();
    let members: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (0..n_items).filter(|&i| item_clusters[i] == c).collect())
        .collect();

    let mut rng = rng::stream(seed, rng::STREAM_SYNTH);
    let mut edges = Vec::with_capacity(n_users * edges_per_user);
    let mut chosen = vec![false; n_items];
    for u in 0..n_users {
        let own = &members[user_clusters[u]];
        let mut picked = Vec::with_capacity(edges_per_user);
        while picked.len() < edges_per_user {
            let own_left = own.iter().any(|&i| !chosen[i]);
            let item = if own_left && rng.random::<f64>() < IN_CLUSTER_PROB {
                own[rng.random_range(0..own.len())]
            } else {
                rng.random_range(0..n_items)
            };
            if !chosen[item] {
                chosen[item] = true;
                picked.push(item);
            }
        }
        for &i in &picked {
            chosen[i] = false;
            edges.push((u, i));
        }
    }

    let mut features = |d: usize, noise: f64| -> Array2<f64> {
        let centroids: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Array2::from_shape_fn((n_items, d), |(i, k)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centroids[item_clusters[i]][k] + noise * z
        })
    };
    let visual = features(d_visual, 1.0);
    let textual = features(d_textual, 0.5);

    let user_vocab = Vocab::from_ids((0..n_users).map(|u| format!("u{u}")).collect())?;
    let item_vocab = Vocab::from_ids((0..n_items).map(|i| format!("i{i}")).collect())?;
    Ok(SynthOutput {
        dataset: InteractionDataset::new(edges, user_vocab, item_vocab)?,
        visual: FeatureMatrix::new(Modality::Visual, visual)?,
        textual: FeatureMatrix::new(Modality::Textual, textual)?,
        item_clusters,
        user_clusters,
    })
}
