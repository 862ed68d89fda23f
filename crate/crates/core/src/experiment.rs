//! Run configuration and end-to-end drivers: train, evaluate, ablations,
//! top-K sweeps and run comparison. Every run lives in
//! `output_dir/<run_name>/`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    baseline_train_config, train_itemknn, BaselineKind, DEFAULT_KNN_NEIGHBORS, DEFAULT_LIGHTGCN_LAYERS,
};
use crate::dataset::{
    encode_ids, load_feature_matrix, load_interactions, synth_dataset, user_split, write_feature_matrix, FeatureMatrix,
    InteractionDataset, Modality, SplitDataset, SplitRatios, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{compare_significance, evaluate_model, read_per_user_csv, EmbeddingScorer, MetricsReport, Phase};
use crate::graph::build_modality_graph_cached;
use crate::model::{
    forward, init_params, read_checkpoint, write_checkpoint, Architecture, GraphContext, ModalityInput, ModelConfig,
    ModelParams,
};
use crate::train::{fit, FitResult, TrainConfig};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const USER_VOCAB_FILE: &str = "user_vocab.tsv";
pub const ITEM_VOCAB_FILE: &str = "item_vocab.tsv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "model.sgck";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const VAL_REPORT_FILE: &str = "report_val.json";
pub const PER_USER_FILE: &str = "per_user.csv";
pub const DATA_ROOT_ENV: &str = "SYNERGRAPH_DATA_ROOT";
/// Learning rates searched by full reproduction runs.
pub const DEFAULT_LR_GRID: [f64; 4] = [1e-4, 5e-4, 1e-3, 5e-3];

/// Module ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Projection only, no purifier gate.
    #[serde(rename = "no-mp")]
    NoPurifier,
    /// No item-item propagation.
    #[serde(rename = "no-iiv")]
    NoItemItem,
    #[serde(rename = "no-circle")]
    NoCircle,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoPurifier,
        Ablation::NoItemItem,
        Ablation::NoCircle,
        Ablation::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPurifier => "no-mp",
            Ablation::NoItemItem => "no-iiv",
            Ablation::NoCircle => "no-circle",
        }
    }

    pub fn apply(self, m: &mut ModelConfig) {
        match self {
            Ablation::None => {}
            Ablation::NoPurifier => m.use_purifier = false,
            Ablation::NoItemItem => m.use_item_item = false,
            Ablation::NoCircle => m.use_circle = false,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "full" => Ok(Ablation::None),
            "no-mp" | "nomp" => Ok(Ablation::NoPurifier),
            "no-iiv" | "noiiv" => Ok(Ablation::NoItemItem),
            "no-circle" | "nocircle" => Ok(Ablation::NoCircle),
            other => Err(Error::invalid(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Parses `v,t`, `visual`, `textual,visual` and similar lists.
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Modality = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("empty modality list"));
    }
    Ok(out)
}

/// Every setting of a run. Unknown keys are rejected; missing keys take
/// the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `baby`, `sports`, `clothing`, `synthetic`, or a directory path.
    pub dataset: String,
    /// Overrides where the named dataset is read from.
    pub dataset_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub run_name: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Neighbours per item in the modality graphs; dataset default when unset.
    pub top_k: Option<usize>,
    /// Overrides `model.modalities`.
    pub modalities: Option<Vec<Modality>>,
    pub ablation: Ablation,
    pub baseline: Option<BaselineKind>,
    /// Learning rates tried in turn; the best validation run is kept.
    /// Empty means `train.lr` only.
    pub lr_grid: Vec<f64>,
    /// Defaults to `train.seed`.
    pub split_seed: Option<u64>,
    pub eval_k: usize,
    pub knn_neighbors: usize,
    pub lightgcn_layers: usize,
    /// Used when `dataset` is `synthetic`.
    pub synth: SynthConfig,
    /// Cache modality graphs under `output_dir/graph_cache`.
    pub cache_graphs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            dataset_dir: None,
            output_dir: PathBuf::from("runs"),
            run_name: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            top_k: None,
            modalities: None,
            ablation: Ablation::None,
            baseline: None,
            lr_grid: Vec::new(),
            split_seed: None,
            eval_k: 20,
            knn_neighbors: DEFAULT_KNN_NEIGHBORS,
            lightgcn_layers: DEFAULT_LIGHTGCN_LAYERS,
            synth: SynthConfig::default(),
            cache_graphs: true,
        }
    }
}

/// Modality-graph neighbour count used when the config leaves it unset.
pub fn default_top_k(dataset: &str) -> usize {
    match dataset {
        "baby" => 35,
        "sports" | "clothing" => 30,
        _ => 10,
    }
}

const NAMED_DATASETS: [&str; 3] = ["baby", "sports", "clothing"];

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Short dataset label used in names and reports.
    pub fn dataset_label(&self) -> String {
        if self.dataset == "synthetic" || NAMED_DATASETS.contains(&self.dataset.as_str()) {
            self.dataset.clone()
        } else {
            Path::new(&self.dataset)
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.dataset.clone())
        }
    }

    pub fn variant_label(&self) -> String {
        match self.baseline {
            Some(b) => b.name().to_string(),
            None if self.ablation == Ablation::None => "full".into(),
            None => self.ablation.name().to_string(),
        }
    }

    /// Fills every optional setting so the result reproduces the run on
    /// its own.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut r = self.clone();
        if let Some(m) = r.modalities.clone() {
            r.model.modalities = m;
        }
        r.modalities = Some(r.model.modalities.clone());
        r.ablation.apply(&mut r.model);
        r.top_k.get_or_insert(default_top_k(&r.dataset));
        r.split_seed.get_or_insert(r.train.seed);
        if r.dataset != "synthetic" && r.dataset_dir.is_none() {
            r.dataset_dir = Some(self.data_dir());
        }
        if r.run_name.is_none() {
            r.run_name = Some(format!("{}-{}-s{}", r.dataset_label(), r.variant_label(), r.train.seed));
        }
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.baseline.is_none() {
            self.model.validate()?;
        }
        if self.top_k == Some(0) || self.eval_k == 0 || self.knn_neighbors == 0 {
            return Err(Error::Config("top_k, eval_k and knn_neighbors must be >= 1".into()));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.dataset_dir {
            return d.clone();
        }
        if NAMED_DATASETS.contains(&self.dataset.as_str()) {
            let root = std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data"));
            root.join(&self.dataset)
        } else {
            PathBuf::from(&self.dataset)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_name.as_deref().unwrap_or("run"))
    }

    pub fn architecture(&self) -> Architecture {
        match self.baseline {
            Some(BaselineKind::BprMf) => Architecture::MatrixFactorization { d: self.model.d },
            Some(BaselineKind::LightGcn) => Architecture::LightGcn {
                d: self.model.d,
                layers: self.lightgcn_layers,
            },
            Some(BaselineKind::ItemKnn) | None => Architecture::Multimodal(self.model.clone()),
        }
    }

    fn needs_features(&self) -> bool {
        self.baseline.is_none()
    }
}

/// A split dataset with the feature matrices a run needs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: SplitDataset,
    pub features: Vec<FeatureMatrix>,
}

/// Interactions of a dataset directory, encoded in first-appearance order.
pub fn load_dataset_dir(dir: &Path) -> Result<InteractionDataset> {
    encode_ids(&load_interactions(dir.join(INTERACTIONS_FILE))?)
}

/// Loads or synthesises the dataset of a resolved config.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let split_seed = cfg.split_seed.unwrap_or(cfg.train.seed);
    let (dataset, features) = if cfg.dataset == "synthetic" {
        let out = synth_dataset(&cfg.synth)?;
        let features = cfg.model.modalities.iter().map(|&m| out.features(m).clone()).collect();
        (out.dataset, features)
    } else {
        let dir = cfg.data_dir();
        let dataset = load_dataset_dir(&dir)?;
        let mut features = Vec::new();
        if cfg.needs_features() {
            for &m in &cfg.model.modalities {
                features.push(load_feature_matrix(dir.join(m.file_name()), m, dataset.n_items())?);
            }
        }
        (dataset, features)
    };
    let split = user_split(&dataset, SplitRatios::default(), split_seed)?;
    log::info!(
        "dataset {}: {} users, {} items, {} train edges",
        cfg.dataset_label(),
        split.n_users(),
        split.n_items(),
        split.n_train()
    );
    Ok(PreparedData { split, features })
}

/// Graph context for the multimodal model (or an empty one for baselines).
pub fn build_context(cfg: &RunConfig, data: &PreparedData) -> Result<GraphContext> {
    if !cfg.needs_features() {
        return GraphContext::new(&data.split, Vec::new());
    }
    let top_k = cfg.top_k.unwrap_or_else(|| default_top_k(&cfg.dataset));
    let cache = cfg.cache_graphs.then(|| cfg.output_dir.join("graph_cache"));
    if let Some(c) = &cache {
        fs::create_dir_all(c)?;
    }
    let mut inputs = Vec::new();
    for f in &data.features {
        let graph = if cfg.model.use_item_item && cfg.model.ii_layers > 0 {
            Some(build_modality_graph_cached(f, top_k, cache.as_deref())?)
        } else {
            None
        };
        inputs.push(ModalityInput {
            features: f.clone(),
            graph,
        });
    }
    GraphContext::new(&data.split, inputs)
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub best_epoch: Option<usize>,
    pub lr: Option<f64>,
}

fn evaluate_params(
    cfg: &RunConfig,
    params: &ModelParams,
    ctx: &GraphContext,
    split: &SplitDataset,
    phase: Phase,
) -> Result<MetricsReport> {
    let out = forward(params, ctx, &cfg.architecture())?;
    let scorer = EmbeddingScorer::new(out.final_user, out.final_item)?;
    evaluate_model(
        &scorer,
        split,
        phase,
        cfg.eval_k,
        &cfg.variant_label(),
        &cfg.dataset_label(),
        cfg.train.seed,
    )
}

fn write_reports(dir: &Path, val: &MetricsReport, test: &MetricsReport) -> Result<()> {
    val.write_json(dir.join(VAL_REPORT_FILE))?;
    test.write_json(dir.join(REPORT_FILE))?;
    test.write_per_user_csv(dir.join(PER_USER_FILE))
}

/// Trains (or builds) the configured model, then writes the resolved
/// config, vocabularies, history, checkpoint and reports.
pub fn run_train(cfg: &RunConfig) -> Result<RunSummary> {
    let cfg = cfg.resolved()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    cfg.write_json(dir.join(RESOLVED_CONFIG_FILE))?;
    let data = prepare_data(&cfg)?;
    data.split.base().user_vocab().write_tsv(dir.join(USER_VOCAB_FILE))?;
    data.split.base().item_vocab().write_tsv(dir.join(ITEM_VOCAB_FILE))?;

    if cfg.baseline == Some(BaselineKind::ItemKnn) {
        let knn = train_itemknn(&data.split, cfg.knn_neighbors)?;
        let eval = |phase| {
            evaluate_model(
                &knn,
                &data.split,
                phase,
                cfg.eval_k,
                "itemknn",
                &cfg.dataset_label(),
                cfg.train.seed,
            )
        };
        let (val, test) = (eval(Phase::Val)?, eval(Phase::Test)?);
        write_reports(&dir, &val, &test)?;
        return Ok(RunSummary {
            run_dir: dir,
            val,
            test,
            best_epoch: None,
            lr: None,
        });
    }

    let ctx = build_context(&cfg, &data)?;
    let arch = cfg.architecture();
    let train_cfg = if cfg.baseline.is_some() {
        baseline_train_config(&cfg.train)
    } else {
        cfg.train.clone()
    };
    let grid = if cfg.lr_grid.is_empty() {
        vec![train_cfg.lr]
    } else {
        cfg.lr_grid.clone()
    };
    let mut best: Option<(f64, FitResult, MetricsReport)> = None;
    let mut grid_log = String::from("lr,best_epoch,val_recall,val_ndcg\n");
    for &lr in &grid {
        let tc = TrainConfig {
            lr,
            ..train_cfg.clone()
        };
        let history_path = if grid.len() == 1 {
            dir.join(HISTORY_FILE)
        } else {
            dir.join(format!("history_lr{lr}.jsonl"))
        };
        log::info!("training {} with lr {lr}", cfg.variant_label());
        let result = fit(&data.split, &ctx, &arch, &tc, Some(&history_path))?;
        let val = evaluate_params(&cfg, &result.params, &ctx, &data.split, Phase::Val)?;
        grid_log += &format!(
            "{lr},{},{},{}\n",
            result.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            val.recall,
            val.ndcg
        );
        if best.as_ref().is_none_or(|(_, _, b)| val.recall > b.recall) {
            best = Some((lr, result, val));
        }
    }
    let (lr, result, val) = best.expect("grid is non-empty");
    if grid.len() > 1 {
        fs::write(dir.join("lr_grid.csv"), grid_log)?;
        fs::copy(dir.join(format!("history_lr{lr}.jsonl")), dir.join(HISTORY_FILE))?;
    }
    write_checkpoint(dir.join(CHECKPOINT_FILE), &result.params)?;
    let test = evaluate_params(&cfg, &result.params, &ctx, &data.split, Phase::Test)?;
    write_reports(&dir, &val, &test)?;
    log::info!(
        "{}: test recall@{k} {:.4}, ndcg@{k} {:.4}",
        cfg.variant_label(),
        test.recall,
        test.ndcg,
        k = cfg.eval_k
    );
    Ok(RunSummary {
        run_dir: dir,
        val,
        test,
        best_epoch: result.best_epoch,
        lr: Some(lr),
    })
}

/// Re-evaluates a finished run from its directory.
pub fn run_evaluate(run_dir: &Path, phase: Phase) -> Result<MetricsReport> {
    let cfg = RunConfig::from_json_file(run_dir.join(RESOLVED_CONFIG_FILE))?;
    let data = prepare_data(&cfg)?;
    if cfg.baseline == Some(BaselineKind::ItemKnn) {
        let knn = train_itemknn(&data.split, cfg.knn_neighbors)?;
        return evaluate_model(
            &knn,
            &data.split,
            phase,
            cfg.eval_k,
            "itemknn",
            &cfg.dataset_label(),
            cfg.train.seed,
        );
    }
    let ctx = build_context(&cfg, &data)?;
    let arch = cfg.architecture();
    let template = init_params(
        &arch,
        &ctx.feature_dims(),
        data.split.n_users(),
        data.split.n_items(),
        0,
    )?;
    let params = ModelParams::from_named(&template, read_checkpoint(run_dir.join(CHECKPOINT_FILE))?)?;
    evaluate_params(&cfg, &params, &ctx, &data.split, phase)
}

/// One row of a comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub recall: f64,
    pub ndcg: f64,
    pub run_dir: PathBuf,
}

fn write_table(path: &Path, key: &str, rows: &[VariantResult]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{key},recall,ndcg")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.variant, r.recall, r.ndcg)?;
    }
    Ok(())
}

fn base_name(cfg: &RunConfig) -> String {
    format!("{}-s{}", cfg.dataset_label(), cfg.train.seed)
}

/// Trains the three module ablations and the full model; writes
/// `ablation.csv` under `output_dir/<dataset>-s<seed>-ablate/`.
pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<VariantResult>> {
    let root = cfg.output_dir.join(format!("{}-ablate", base_name(cfg)));
    let mut rows = Vec::new();
    for ab in Ablation::ALL {
        let variant = RunConfig {
            ablation: ab,
            baseline: None,
            output_dir: root.clone(),
            run_name: Some(if ab == Ablation::None {
                "full".into()
            } else {
                ab.name().into()
            }),
            ..cfg.clone()
        };
        let s = run_train(&variant)?;
        rows.push(VariantResult {
            variant: variant.run_name.clone().unwrap_or_default(),
            recall: s.test.recall,
            ndcg: s.test.ndcg,
            run_dir: s.run_dir,
        });
    }
    write_table(&root.join("ablation.csv"), "variant", &rows)?;
    Ok(rows)
}

/// Visual-only, textual-only and both modalities.
pub fn run_modality_ablate(cfg: &RunConfig) -> Result<Vec<VariantResult>> {
    let root = cfg.output_dir.join(format!("{}-modality", base_name(cfg)));
    let mut rows = Vec::new();
    for (name, mods) in [
        ("visual", vec![Modality::Visual]),
        ("textual", vec![Modality::Textual]),
        ("both", vec![Modality::Visual, Modality::Textual]),
    ] {
        let variant = RunConfig {
            modalities: Some(mods),
            baseline: None,
            output_dir: root.clone(),
            run_name: Some(name.into()),
            ..cfg.clone()
        };
        let s = run_train(&variant)?;
        rows.push(VariantResult {
            variant: name.into(),
            recall: s.test.recall,
            ndcg: s.test.ndcg,
            run_dir: s.run_dir,
        });
    }
    write_table(&root.join("modality.csv"), "modalities", &rows)?;
    Ok(rows)
}

/// Retrains once per modality-graph neighbour count; writes `topk.csv`.
pub fn run_sweep_topk(cfg: &RunConfig, values: &[usize]) -> Result<Vec<VariantResult>> {
    if values.is_empty() {
        return Err(Error::invalid("no top-K values given"));
    }
    let root = cfg.output_dir.join(format!("{}-topk", base_name(cfg)));
    let mut rows = Vec::new();
    for &k in values {
        let variant = RunConfig {
            top_k: Some(k),
            baseline: None,
            output_dir: root.clone(),
            run_name: Some(format!("k{k}")),
            ..cfg.clone()
        };
        let s = run_train(&variant)?;
        rows.push(VariantResult {
            variant: k.to_string(),
            recall: s.test.recall,
            ndcg: s.test.ndcg,
            run_dir: s.run_dir,
        });
    }
    write_table(&root.join("topk.csv"), "top_k", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub n_users: usize,
    pub recall_a: f64,
    pub recall_b: f64,
    pub p_recall: f64,
    pub ndcg_a: f64,
    pub ndcg_b: f64,
    pub p_ndcg: f64,
}

/// Paired bootstrap over the per-user test metrics of two runs.
pub fn compare_runs(run_a: &Path, run_b: &Path, n_boot: usize, seed: u64) -> Result<Comparison> {
    let a = read_per_user_csv(run_a.join(PER_USER_FILE))?;
    let b = read_per_user_csv(run_b.join(PER_USER_FILE))?;
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.user != y.user) {
        return Err(Error::invalid("runs were evaluated on different user sets"));
    }
    let col = |v: &[crate::eval::UserMetrics], f: fn(&crate::eval::UserMetrics) -> f64| -> Vec<f64> {
        v.iter().map(f).collect()
    };
    let (ra, rb) = (col(&a, |m| m.recall), col(&b, |m| m.recall));
    let (na, nb) = (col(&a, |m| m.ndcg), col(&b, |m| m.ndcg));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(Comparison {
        n_users: a.len(),
        recall_a: mean(&ra),
        recall_b: mean(&rb),
        p_recall: compare_significance(&ra, &rb, n_boot, seed)?,
        ndcg_a: mean(&na),
        ndcg_b: mean(&nb),
        p_ndcg: compare_significance(&na, &nb, n_boot, seed)?,
    })
}

/// Writes a synthetic dataset in the on-disk dataset layout.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    let out = synth_dataset(cfg)?;
    fs::create_dir_all(dir)?;
    let ds = &out.dataset;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(INTERACTIONS_FILE))?);
    for &(u, i) in ds.edges() {
        writeln!(f, "{}\t{}", ds.user_vocab().raw(u), ds.item_vocab().raw(i))?;
    }
    f.flush()?;
    for m in Modality::ALL {
        write_feature_matrix(dir.join(m.file_name()), out.features(m).data())?;
    }
    ds.user_vocab().write_tsv(dir.join(USER_VOCAB_FILE))?;
    ds.item_vocab().write_tsv(dir.join(ITEM_VOCAB_FILE))?;
    Ok(())
}

/// Writes the user and item vocabularies of a dataset directory.
pub fn export_vocab(dataset_dir: &Path, out_dir: &Path) -> Result<InteractionDataset> {
    let ds = load_dataset_dir(dataset_dir)?;
    fs::create_dir_all(out_dir)?;
    ds.user_vocab().write_tsv(out_dir.join(USER_VOCAB_FILE))?;
    ds.item_vocab().write_tsv(out_dir.join(ITEM_VOCAB_FILE))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"datset": "baby"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 1}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"dataset": "baby", "ablation": "no-iiv"}"#).unwrap();
        assert_eq!(c.ablation, Ablation::NoItemItem);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn resolution_fills_defaults_and_round_trips() {
        let cfg = RunConfig {
            dataset: "baby".into(),
            ablation: Ablation::NoPurifier,
            modalities: Some(vec![Modality::Textual]),
            ..RunConfig::default()
        };
        let r = cfg.resolved().unwrap();
        assert_eq!(r.top_k, Some(35));
        assert_eq!(r.split_seed, Some(123));
        assert!(!r.model.use_purifier);
        assert_eq!(r.model.modalities, vec![Modality::Textual]);
        assert_eq!(r.run_name.as_deref(), Some("baby-no-mp-s123"));
        let text = serde_json::to_string(&r).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.resolved().unwrap(), r);
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.model.d, 64);
        assert_eq!(c.train.batch_size, 1024);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.weight_decay, 1e-5);
        assert_eq!(c.train.seed, 123);
        assert_eq!(c.train.circle.coef, 0.1);
        assert_eq!(c.train.circle.margin, 0.75);
        assert_eq!(c.train.circle.scale, 1000.0);
        assert_eq!(default_top_k("baby"), 35);
    }

    #[test]
    fn modality_lists() {
        assert_eq!(
            parse_modalities("v,t").unwrap(),
            vec![Modality::Visual, Modality::Textual]
        );
        assert_eq!(parse_modalities("textual").unwrap(), vec![Modality::Textual]);
        assert!(parse_modalities("").is_err());
        assert!(parse_modalities("audio").is_err());
    }
}
