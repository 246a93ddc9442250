//! Training harness: batch construction, the joint train step, the fit
//! loop with best-validation checkpointing, target-domain evaluation,
//! coordinate-wise hyperparameter search, and the ablation table.

mod adam;
mod metrics;

pub use adam::AdamState;
pub use metrics::{metrics_from_confusion, Metrics};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsidata::{augment_patch, extract_patch, normalize, split_train_val, DomainPair, HsiCube, HsiError, LabelRaster};
use crate::imenc::{self, encode_image_batch, ImageEncoderConfig, ImencError, Phase};
use crate::losses::{self, AlignmentBatch, DenomMode, LossError};
use crate::ndgrad::{DiffTensor, GradError, Graph};
use crate::params::{LeafCache, ParamError, ParamStore};
use crate::stream;
use crate::textpipe::{encode, train_bpe, BpeVocab, ClassCatalog, TokenSeq};
use crate::txtenc::{self, encode_text, TextEncoderConfig, TxtencError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data error: {0}")]
    Data(#[from] HsiError),
    #[error("image encoder: {0}")]
    Imenc(#[from] ImencError),
    #[error("text encoder: {0}")]
    Txtenc(#[from] TxtencError),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("graph: {0}")]
    Grad(#[from] GradError),
    #[error("params: {0}")]
    Param(#[from] ParamError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("no labeled pixels to evaluate")]
    NothingToEvaluate,
    #[error("model expects {model} bands but the cube has {cube}")]
    BandMismatch { model: usize, cube: usize },
    #[error("non-finite loss at step {step}: {context}")]
    NonFiniteLoss { step: u64, context: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which pieces of the network train: the full model, the image-only
/// classifier, or single-granularity alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Cls,
    Coarse,
    Fine,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Cls, Variant::Coarse, Variant::Fine, Variant::Full]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Cls => "cls",
            Variant::Coarse => "coarse",
            Variant::Fine => "fine",
        }
    }

    fn has_text(self) -> bool {
        !matches!(self, Variant::Cls)
    }

    /// The alignment mix this variant trains with.
    fn effective_alpha(self, alpha: f64) -> f64 {
        match self {
            Variant::Coarse => 0.0,
            Variant::Fine => 1.0,
            Variant::Cls | Variant::Full => alpha,
        }
    }

    fn effective_lambda(self, lambda: f64) -> f64 {
        match self {
            Variant::Cls => 0.0,
            _ => lambda,
        }
    }
}

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    50
}
fn default_patch_size() -> usize {
    13
}
fn default_variant() -> Variant {
    Variant::Full
}
fn default_true() -> bool {
    true
}
fn default_widths() -> [usize; 2] {
    [8, 16]
}
fn default_kernel() -> usize {
    3
}
fn default_semantic_dim() -> usize {
    64
}
fn default_text_layers() -> usize {
    2
}
fn default_text_width() -> usize {
    64
}
fn default_text_heads() -> usize {
    4
}
fn default_bpe_merges() -> usize {
    crate::textpipe::DEFAULT_MERGES
}
fn default_eta() -> f64 {
    1e-2
}
fn default_lambda() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.3
}

/// Everything a training run needs. Serialized form mirrors these field
/// names exactly; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub augment: bool,
    /// Denominator restricted to negatives, exactly as the alignment
    /// equations print it (errors when a batch has no negatives).
    pub negatives_only_denominator: bool,
    pub widths: [usize; 2],
    pub kernel: usize,
    pub semantic_dim: usize,
    pub text_layers: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub bpe_merges: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: default_eta(),
            lambda: default_lambda(),
            alpha: default_alpha(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            patch_size: default_patch_size(),
            seed: 0,
            variant: default_variant(),
            augment: default_true(),
            negatives_only_denominator: false,
            widths: default_widths(),
            kernel: default_kernel(),
            semantic_dim: default_semantic_dim(),
            text_layers: default_text_layers(),
            text_width: default_text_width(),
            text_heads: default_text_heads(),
            bpe_merges: default_bpe_merges(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(TrainError::BadConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::BadConfig(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::BadConfig(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    fn denom_mode(&self) -> DenomMode {
        if self.negatives_only_denominator {
            DenomMode::NegativesOnly
        } else {
            DenomMode::AllCandidates
        }
    }
}

/// Scalar values of every objective computed on one step.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub l_sd: f64,
    pub l_coarse: Option<f64>,
    pub l_fine: Option<f64>,
    pub l_total: f64,
    pub tau: f64,
    /// Set when a contrastive term found no positives anywhere.
    pub no_positives: bool,
}

/// One sampled minibatch: patch tensors plus the class-paired prompts.
pub struct TrainBatch {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub labels: Vec<u16>,
    pub coarse_seqs: Vec<TokenSeq>,
    pub fine_seqs: Vec<TokenSeq>,
}

/// A training session over one source scene.
pub struct Trainer {
    pub config: TrainConfig,
    pub image_config: ImageEncoderConfig,
    pub text_config: Option<TextEncoderConfig>,
    pub vocab: Option<BpeVocab>,
    pub store: ParamStore,
    adam: AdamState,
    batch_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    coarse_seqs: Vec<TokenSeq>,
    fine_seqs: Vec<[TokenSeq; 2]>,
    step: u64,
}

impl Trainer {
    pub fn new(catalog: &ClassCatalog, bands: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let image_config = ImageEncoderConfig {
            patch_size: config.patch_size,
            bands,
            widths: config.widths,
            kernel: config.kernel,
            semantic_dim: config.semantic_dim,
            classes: catalog.class_count() as usize,
        };
        image_config.validate()?;

        let mut store = ParamStore::new();
        let with_text = config.variant.has_text();
        imenc::init_image_encoder(&image_config, config.seed, &mut store, with_text)?;

        let (vocab, text_config, coarse_seqs, fine_seqs) = if with_text {
            let vocab = train_bpe(&catalog.prompt_corpus(), config.bpe_merges);
            let text_config = TextEncoderConfig {
                layers: config.text_layers,
                width: config.text_width,
                heads: config.text_heads,
                vocab_size: vocab.size(),
                semantic_dim: config.semantic_dim,
                ..Default::default()
            };
            txtenc::init_text_encoder(&text_config, config.seed, &mut store)?;
            losses::init_temperature(&mut store)?;

            let mut coarse = Vec::new();
            let mut fine = Vec::new();
            for class in &catalog.classes {
                let prompt = crate::textpipe::build_coarse_prompt(class, &catalog.coarse_template)
                    .map_err(|e| TrainError::BadConfig(e.to_string()))?;
                coarse.push(encode(&vocab, &prompt));
                fine.push([encode(&vocab, &class.fine[0]), encode(&vocab, &class.fine[1])]);
            }
            (Some(vocab), Some(text_config), coarse, fine)
        } else {
            (None, None, Vec::new(), Vec::new())
        };

        let adam = AdamState::new(&store);
        Ok(Trainer {
            batch_rng: stream::rng(config.seed, "batch"),
            aug_rng: stream::rng(config.seed, "aug"),
            config,
            image_config,
            text_config,
            vocab,
            store,
            adam,
            coarse_seqs,
            fine_seqs,
            step: 0,
        })
    }

    /// Uniformly sample labeled training pixels (with replacement), pair
    /// each patch with its class's coarse prompt and both fine texts, and
    /// apply augmentation when enabled.
    pub fn build_batch(&mut self, cube: &HsiCube, labels: &LabelRaster, train_idx: &[usize]) -> Result<TrainBatch> {
        if train_idx.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let s = self.config.patch_size;
        let b = self.config.batch_size;
        let mut data = Vec::with_capacity(b * cube.bands * s * s);
        let mut batch_labels = Vec::with_capacity(b);
        let mut coarse_seqs = Vec::new();
        let mut fine_seqs = Vec::new();
        for _ in 0..b {
            let pick = train_idx[self.batch_rng.random_range(0..train_idx.len())];
            let (row, col) = (pick / cube.width, pick % cube.width);
            let label = labels.get(row, col);
            debug_assert!(label >= 1);
            let mut patch = extract_patch(cube, row, col, s)?;
            patch.label = label;
            if self.config.augment {
                patch = augment_patch(&patch, &mut self.aug_rng);
            }
            data.extend_from_slice(&patch.values);
            batch_labels.push(label);
            if self.config.variant.has_text() {
                let c = label as usize - 1;
                coarse_seqs.push(self.coarse_seqs[c].clone());
                fine_seqs.push(self.fine_seqs[c][0].clone());
                fine_seqs.push(self.fine_seqs[c][1].clone());
            }
        }
        Ok(TrainBatch {
            data,
            shape: vec![b, 1, cube.bands, s, s],
            labels: batch_labels,
            coarse_seqs,
            fine_seqs,
        })
    }

    /// Encode each distinct class's prompt once and reuse the node for
    /// every sample of that class; gradient accumulation over the shared
    /// node matches encoding per-sample exactly.
    fn text_rows(
        &self,
        graph: &mut Graph,
        leaves: &mut LeafCache,
        batch_labels: &[u16],
        fine: bool,
    ) -> Result<(DiffTensor, Vec<u16>)> {
        let vocab = self.vocab.as_ref().expect("text path requires a vocabulary");
        let text_config = self.text_config.as_ref().expect("text path requires a config");
        let mut classes: Vec<u16> = batch_labels.to_vec();
        classes.sort_unstable();
        classes.dedup();

        let mut encoded: BTreeMap<u16, Vec<DiffTensor>> = BTreeMap::new();
        for &class in &classes {
            let c = class as usize - 1;
            let seqs: Vec<&TokenSeq> = if fine {
                vec![&self.fine_seqs[c][0], &self.fine_seqs[c][1]]
            } else {
                vec![&self.coarse_seqs[c]]
            };
            let feats = seqs
                .into_iter()
                .map(|seq| {
                    encode_text(graph, &self.store, leaves, text_config, seq, vocab.pad_id(), vocab.end_id())
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            encoded.insert(class, feats);
        }

        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &label in batch_labels {
            for feat in &encoded[&label] {
                rows.push(feat.clone());
                labels.push(label);
            }
        }
        let row_refs: Vec<&DiffTensor> = rows.iter().collect();
        let matrix = graph.concat(&row_refs, 0)?;
        Ok((matrix, labels))
    }

    /// Forward both encoders, assemble the total objective, run backward,
    /// and apply one Adam update (temperature included).
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        self.step += 1;
        let mut graph = Graph::new();
        let mut leaves = LeafCache::new();

        let x = graph.leaf(batch.data.clone(), &batch.shape, false)?;
        let img = encode_image_batch(&mut graph, &self.store, &mut leaves, &self.image_config, &x, Phase::Train)?;
        let l_sd = losses::classification_loss_from_logits(&mut graph, &img.logits, &batch.labels)?;

        let lambda = self.config.variant.effective_lambda(self.config.lambda);
        let alpha = self.config.variant.effective_alpha(self.config.alpha);
        let denom = self.config.denom_mode();

        let zero = graph.constant_scalar(0.0)?;
        let mut l_coarse = None;
        let mut l_fine = None;
        let mut no_positives = false;

        let want_coarse = lambda > 0.0 && (1.0 - alpha) > 0.0;
        let want_fine = lambda > 0.0 && alpha > 0.0;
        if want_coarse || want_fine {
            let features = img.features.clone().expect("text variants always build the projection head");
            let theta = leaves.leaf(&mut graph, &self.store, losses::LOGIT_SCALE)?;
            let scale = graph.exp(&theta)?;
            if want_coarse {
                let (text, text_labels) = self.text_rows(&mut graph, &mut leaves, &batch.labels, false)?;
                let ab = AlignmentBatch::new(features.clone(), batch.labels.clone(), text, text_labels)?;
                let out = losses::coarse_alignment(&mut graph, &ab, &scale, denom)?;
                no_positives |= out.no_positives;
                l_coarse = Some(out.loss);
            }
            if want_fine {
                let (text, text_labels) = self.text_rows(&mut graph, &mut leaves, &batch.labels, true)?;
                let ab = AlignmentBatch::new(features, batch.labels.clone(), text, text_labels)?;
                let out = losses::fine_alignment(&mut graph, &ab, &scale, denom)?;
                no_positives |= out.no_positives;
                l_fine = Some(out.loss);
            }
        }

        let lc = l_coarse.clone().unwrap_or_else(|| zero.clone());
        let lf = l_fine.clone().unwrap_or(zero);
        let l_total = losses::total_loss(&mut graph, &l_sd, &lc, &lf, lambda, alpha)?;

        let report = LossReport {
            l_sd: l_sd.scalar(),
            l_coarse: l_coarse.map(|t| t.scalar()),
            l_fine: l_fine.map(|t| t.scalar()),
            l_total: l_total.scalar(),
            tau: if self.store.contains(losses::LOGIT_SCALE) {
                losses::tau(&self.store)?
            } else {
                0.0
            },
            no_positives,
        };
        if !report.l_total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, context: format!("{:?}", report) });
        }

        let grads_out = graph.backward(&l_total).map_err(|e| match e {
            GradError::NonFinite(op) => {
                TrainError::NonFiniteLoss { step: self.step, context: format!("backward through {}", op) }
            }
            other => TrainError::Grad(other),
        })?;
        let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (idx, leaf) in leaves.iter() {
            if self.store.entry(idx).trainable {
                grads.insert(idx, grads_out.wrt_or_zero(leaf));
            }
        }

        img.bn_updates.apply(&mut self.store)?;
        self.adam.update(&mut self.store, &grads, self.config.eta, self.config.weight_decay);
        if self.store.contains(losses::LOGIT_SCALE) {
            losses::clamp_temperature(&mut self.store)?;
        }
        Ok(report)
    }
}

/// Outcome of a fit: the best-validation parameters and their metrics.
pub struct FitResult {
    pub store: ParamStore,
    pub validation: Metrics,
    pub best_epoch: usize,
    pub reports: Vec<LossReport>,
}

/// Train on the source scene's stratified 80/20 split, track validation
/// OA each epoch, and return the parameters of the best epoch.
pub fn fit(cube: &HsiCube, labels: &LabelRaster, catalog: &ClassCatalog, config: &TrainConfig) -> Result<FitResult> {
    labels.check_matches(cube)?;
    if labels.class_count() > catalog.class_count() {
        return Err(TrainError::BadConfig(format!(
            "labels use {} classes but the catalog defines {}",
            labels.class_count(),
            catalog.class_count()
        )));
    }
    let normalized = normalize(cube);
    let (train_idx, val_idx) = split_train_val(labels, 0.8, config.seed)?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if val_idx.is_empty() {
        return Err(TrainError::EmptyValidation);
    }

    let mut trainer = Trainer::new(catalog, cube.bands, config.clone())?;
    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);

    let evaluate_val = |store: &ParamStore| -> Result<Metrics> {
        evaluate_indices(store, &normalized, labels, &val_idx, catalog.class_count() as usize)
    };

    let mut best_store = trainer.store.clone();
    let mut best_metrics = evaluate_val(&best_store)?;
    let mut best_epoch = 0;
    let mut reports = Vec::new();

    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = trainer.build_batch(&normalized, labels, &train_idx)?;
            reports.push(trainer.train_step(&batch)?);
        }
        let val = evaluate_val(&trainer.store)?;
        if val.oa > best_metrics.oa {
            best_metrics = val;
            best_store = trainer.store.clone();
            best_epoch = epoch;
        }
    }
    Ok(FitResult { store: best_store, validation: best_metrics, best_epoch, reports })
}

const EVAL_BATCH: usize = 64;

/// Predict class indices (1-based) for the given flat pixel indices.
/// Eval-mode forward over the image encoder and Cls head only.
fn predict_indices(
    store: &ParamStore,
    cube: &HsiCube,
    pixel_idx: &[usize],
    config: &ImageEncoderConfig,
) -> Result<Vec<u16>> {
    let s = config.patch_size;
    let mut out = Vec::with_capacity(pixel_idx.len());
    for chunk in pixel_idx.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * cube.bands * s * s);
        for &pick in chunk {
            let (row, col) = (pick / cube.width, pick % cube.width);
            let patch = extract_patch(cube, row, col, s)?;
            data.extend_from_slice(&patch.values);
        }
        let mut graph = Graph::new();
        let mut leaves = LeafCache::new();
        let x = graph.leaf(data, &[chunk.len(), 1, cube.bands, s, s], false)?;
        let fwd = encode_image_batch(&mut graph, store, &mut leaves, config, &x, Phase::Eval)?;
        for row in fwd.probs.data().chunks(config.classes) {
            let mut arg = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[arg] {
                    arg = i;
                }
            }
            out.push(arg as u16 + 1);
        }
    }
    Ok(out)
}

fn evaluate_indices(
    store: &ParamStore,
    cube: &HsiCube,
    labels: &LabelRaster,
    pixel_idx: &[usize],
    classes: usize,
) -> Result<Metrics> {
    if pixel_idx.is_empty() {
        return Err(TrainError::NothingToEvaluate);
    }
    let config = imenc::config_from_store(store)?;
    if config.bands != cube.bands {
        return Err(TrainError::BandMismatch { model: config.bands, cube: cube.bands });
    }
    let preds = predict_indices(store, cube, pixel_idx, &config)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&pick, &pred) in pixel_idx.iter().zip(&preds) {
        let truth = labels.labels()[pick] as usize;
        confusion[truth - 1][pred as usize - 1] += 1;
    }
    Ok(metrics_from_confusion(&confusion))
}

/// Evaluate a model over every labeled pixel of a scene. Only the image
/// encoder and classification head are read; text parameters may be
/// absent from the store entirely.
pub fn evaluate(store: &ParamStore, cube: &HsiCube, labels: &LabelRaster) -> Result<Metrics> {
    labels.check_matches(cube)?;
    let normalized = normalize(cube);
    let idx = labels.labeled_indices();
    let classes = labels.class_count().max(imenc::config_from_store(store)?.classes as u16) as usize;
    evaluate_indices(store, &normalized, labels, &idx, classes)
}

/// Predict a full class map (every pixel, labeled or not).
pub fn predict_map(store: &ParamStore, cube: &HsiCube) -> Result<Vec<u16>> {
    let config = imenc::config_from_store(store)?;
    if config.bands != cube.bands {
        return Err(TrainError::BandMismatch { model: config.bands, cube: cube.bands });
    }
    let normalized = normalize(cube);
    let all: Vec<usize> = (0..cube.height * cube.width).collect();
    predict_indices(store, &normalized, &all, &config)
}

/// Unit-norm semantic features for every labeled pixel: (row, col, label,
/// feature). Requires the projection head.
pub fn export_features(
    store: &ParamStore,
    cube: &HsiCube,
    labels: &LabelRaster,
) -> Result<Vec<(usize, usize, u16, Vec<f64>)>> {
    labels.check_matches(cube)?;
    let config = imenc::config_from_store(store)?;
    if config.bands != cube.bands {
        return Err(TrainError::BandMismatch { model: config.bands, cube: cube.bands });
    }
    store.get("proj.w")?;
    let normalized = normalize(cube);
    let idx = labels.labeled_indices();
    let s = config.patch_size;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * cube.bands * s * s);
        for &pick in chunk {
            let (row, col) = (pick / cube.width, pick % cube.width);
            let patch = extract_patch(&normalized, row, col, s)?;
            data.extend_from_slice(&patch.values);
        }
        let mut graph = Graph::new();
        let mut leaves = LeafCache::new();
        let x = graph.leaf(data, &[chunk.len(), 1, cube.bands, s, s], false)?;
        let fwd = encode_image_batch(&mut graph, store, &mut leaves, &config, &x, Phase::Eval)?;
        let feats = fwd.features.expect("projection head checked above");
        for (&pick, row_vals) in chunk.iter().zip(feats.data().chunks(config.semantic_dim)) {
            let (row, col) = (pick / cube.width, pick % cube.width);
            out.push((row, col, labels.labels()[pick], row_vals.to_vec()));
        }
    }
    Ok(out)
}

/// Default hyperparameter grids.
pub fn default_eta_grid() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
}
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1e+0, 1e+1]
}
pub fn default_alpha_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

/// Center values held fixed while the other coordinates sweep.
pub const GRID_DEFAULT_ETA: f64 = 1e-2;
pub const GRID_DEFAULT_LAMBDA: f64 = 1e+0;
pub const GRID_DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub val_oa: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: TrainConfig,
    pub best_oa: f64,
}

/// Coordinate-wise search mirroring the sensitivity protocol: sweep eta
/// with (lambda, alpha) at their defaults, then lambda, then alpha.
/// Selection is by source-validation OA; sweeping in ascending order
/// with strict improvement breaks ties toward the smaller value.
pub fn grid_search(
    cube: &HsiCube,
    labels: &LabelRaster,
    catalog: &ClassCatalog,
    base: &TrainConfig,
    etas: &[f64],
    lambdas: &[f64],
    alphas: &[f64],
) -> Result<GridResult> {
    if etas.is_empty() || lambdas.is_empty() || alphas.is_empty() {
        return Err(TrainError::BadConfig("grids must be non-empty".into()));
    }
    let mut cells = Vec::new();
    let run = |eta: f64, lambda: f64, alpha: f64, cells: &mut Vec<GridCell>| -> Result<f64> {
        let config = TrainConfig { eta, lambda, alpha, ..base.clone() };
        let oa = fit(cube, labels, catalog, &config)?.validation.oa;
        cells.push(GridCell { eta, lambda, alpha, val_oa: oa });
        Ok(oa)
    };

    let mut best_eta = etas[0];
    let mut best_oa = f64::NEG_INFINITY;
    for &eta in etas {
        let oa = run(eta, GRID_DEFAULT_LAMBDA, GRID_DEFAULT_ALPHA, &mut cells)?;
        if oa > best_oa {
            best_oa = oa;
            best_eta = eta;
        }
    }
    let mut best_lambda = lambdas[0];
    let mut best_oa_l = f64::NEG_INFINITY;
    for &lambda in lambdas {
        let oa = run(best_eta, lambda, GRID_DEFAULT_ALPHA, &mut cells)?;
        if oa > best_oa_l {
            best_oa_l = oa;
            best_lambda = lambda;
        }
    }
    let mut best_alpha = alphas[0];
    let mut best_oa_a = f64::NEG_INFINITY;
    for &alpha in alphas {
        let oa = run(best_eta, best_lambda, alpha, &mut cells)?;
        if oa > best_oa_a {
            best_oa_a = oa;
            best_alpha = alpha;
        }
    }
    let best = TrainConfig { eta: best_eta, lambda: best_lambda, alpha: best_alpha, ..base.clone() };
    Ok(GridResult { cells, best, best_oa: best_oa_a })
}

/// Train and evaluate all four variants with a shared seed.
pub fn ablate(pair: &DomainPair, catalog: &ClassCatalog, base: &TrainConfig) -> Result<Vec<(Variant, Metrics)>> {
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::all() {
        let config = TrainConfig { variant, ..base.clone() };
        let fitted = fit(&pair.source.0, &pair.source.1, catalog, &config)?;
        let metrics = evaluate(&fitted.store, &pair.target.0, &pair.target.1)?;
        rows.push((variant, metrics));
    }
    Ok(rows)
}
