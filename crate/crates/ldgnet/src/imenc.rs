//! Deep residual 3D CNN image encoder with a classification head and a
//! projection head into the shared semantic space.
//!
//! Topology: [3D residual block -> maxpool3d] x2 -> conv3d -> flatten,
//! then Cls (affine + softmax) and Proj (affine + l2-normalize). Each
//! residual block is two Conv3d-BN3d-ReLU stages and a final Conv3d; the
//! skip connects the first stage's output to the final convolution's
//! output, with relu after the addition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{DiffTensor, GradError, Graph};
use crate::params::{kaiming_uniform, LeafCache, ParamError, ParamStore};
use crate::stream;

#[derive(Debug, Error)]
pub enum ImencError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("graph error: {0}")]
    Grad(#[from] GradError),
    #[error("param error: {0}")]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, ImencError>;

pub const POOL: [usize; 3] = [2, 2, 2];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageEncoderConfig {
    /// Spatial patch size s (odd).
    pub patch_size: usize,
    /// Spectral bands d.
    pub bands: usize,
    /// Channel widths of the two residual stages.
    pub widths: [usize; 2],
    /// Cubic kernel extent (same-padded).
    pub kernel: usize,
    /// Shared semantic dimension of the projection head.
    pub semantic_dim: usize,
    /// Class count C.
    pub classes: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            patch_size: 13,
            bands: 48,
            widths: [8, 16],
            kernel: 3,
            semantic_dim: 64,
            classes: 7,
        }
    }
}

impl ImageEncoderConfig {
    /// Extent after one 2-stride pool; errors when the window no longer fits.
    fn pooled(extent: usize) -> Option<usize> {
        if extent < 2 {
            None
        } else {
            Some((extent - 2) / 2 + 1)
        }
    }

    /// Shape bookkeeping through both pool stages.
    pub fn reduced_dims(&self) -> Result<(usize, usize)> {
        let mut s = self.patch_size;
        let mut d = self.bands;
        for stage in 0..2 {
            s = Self::pooled(s).ok_or_else(|| {
                ImencError::BadConfig(format!("spatial extent exhausted at pool stage {}", stage + 1))
            })?;
            d = Self::pooled(d).ok_or_else(|| {
                ImencError::BadConfig(format!("spectral extent exhausted at pool stage {}", stage + 1))
            })?;
        }
        Ok((s, d))
    }

    /// Flattened feature width entering the heads.
    pub fn flat_dim(&self) -> Result<usize> {
        let (s, d) = self.reduced_dims()?;
        Ok(self.widths[1] * d * s * s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(ImencError::BadConfig(format!("patch size must be odd, got {}", self.patch_size)));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(ImencError::BadConfig("kernel extent must be odd".into()));
        }
        if self.semantic_dim < 2 {
            return Err(ImencError::BadConfig("semantic dimension must be at least 2".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.classes == 0 || self.bands == 0 {
            return Err(ImencError::BadConfig("widths, classes, and bands must be positive".into()));
        }
        self.reduced_dims()?;
        Ok(())
    }
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

fn bn_names(prefix: &str) -> (String, String, String, String) {
    (
        format!("{prefix}.gamma"),
        format!("{prefix}.beta"),
        format!("{prefix}.rmean"),
        format!("{prefix}.rvar"),
    )
}

/// Register the trunk and Cls-head parameters under `img.`/`cls.`, and the
/// Proj head under `proj.` unless `with_proj` is false (the cls ablation
/// variant deletes the projection head). Deterministic per seed.
pub fn init_image_encoder(
    config: &ImageEncoderConfig,
    seed: u64,
    store: &mut ParamStore,
    with_proj: bool,
) -> Result<()> {
    config.validate()?;
    let k = config.kernel;
    let kvol = k * k * k;
    let mut rng = stream::rng(seed, "init.img");

    let conv = |store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut _| -> Result<()> {
        let (w, b) = conv_names(prefix);
        let fan_in = cin * kvol;
        store.insert(&w, vec![cout, cin, k, k, k], kaiming_uniform(rng, fan_in, cout * cin * kvol), true)?;
        store.insert(&b, vec![cout], vec![0.0; cout], true)?;
        Ok(())
    };
    let bn = |store: &mut ParamStore, prefix: &str, c: usize| -> Result<()> {
        let (g, b, rm, rv) = bn_names(prefix);
        store.insert(&g, vec![c], vec![1.0; c], true)?;
        store.insert(&b, vec![c], vec![0.0; c], true)?;
        store.insert(&rm, vec![c], vec![0.0; c], false)?;
        store.insert(&rv, vec![c], vec![1.0; c], false)?;
        Ok(())
    };

    let mut cin = 1;
    for (stage, &width) in config.widths.iter().enumerate() {
        let p = format!("img.b{}", stage + 1);
        conv(store, &format!("{p}.conv1"), cin, width, &mut rng)?;
        bn(store, &format!("{p}.bn1"), width)?;
        conv(store, &format!("{p}.conv2"), width, width, &mut rng)?;
        bn(store, &format!("{p}.bn2"), width)?;
        conv(store, &format!("{p}.conv3"), width, width, &mut rng)?;
        cin = width;
    }
    conv(store, "img.final", cin, cin, &mut rng)?;
    store.insert(
        "img.meta",
        vec![2],
        vec![config.bands as f64, config.patch_size as f64],
        false,
    )?;

    let flat = config.flat_dim()?;
    let mut cls_rng = stream::rng(seed, "init.cls");
    store.insert("cls.w", vec![flat, config.classes], kaiming_uniform(&mut cls_rng, flat, flat * config.classes), true)?;
    store.insert("cls.b", vec![config.classes], vec![0.0; config.classes], true)?;

    if with_proj {
        let mut proj_rng = stream::rng(seed, "init.proj");
        store.insert(
            "proj.w",
            vec![flat, config.semantic_dim],
            kaiming_uniform(&mut proj_rng, flat, flat * config.semantic_dim),
            true,
        )?;
        store.insert("proj.b", vec![config.semantic_dim], vec![0.0; config.semantic_dim], true)?;
    }
    Ok(())
}

/// Recover the encoder config of a stored model from names and shapes.
/// `semantic_dim` falls back to 0 when the projection head is absent.
pub fn config_from_store(store: &ParamStore) -> Result<ImageEncoderConfig> {
    let meta = store.get("img.meta")?;
    let bands = meta.data[0] as usize;
    let patch_size = meta.data[1] as usize;
    let w1 = store.get("img.b1.conv1.w")?.shape[0];
    let w2 = store.get("img.b2.conv1.w")?.shape[0];
    let kernel = store.get("img.b1.conv1.w")?.shape[2];
    let classes = store.get("cls.b")?.shape[0];
    let semantic_dim = if store.contains("proj.b") { store.get("proj.b")?.shape[0] } else { 0 };
    Ok(ImageEncoderConfig { patch_size, bands, widths: [w1, w2], kernel, semantic_dim, classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Deferred running-statistics updates produced by train-mode batchnorm.
#[derive(Debug, Default)]
pub struct BnUpdates {
    /// (param name of rmean/rvar, batch mean, batch biased variance, n)
    pub per_layer: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BnUpdates {
    /// Fold the collected batch statistics into the store's running
    /// buffers: running <- (1-m)*running + m*batch, with the sample
    /// (unbiased) variance used for the running variance.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (prefix, mean, var, n) in &self.per_layer {
            let unbias = if *n > 1 { *n as f64 / (*n as f64 - 1.0) } else { 1.0 };
            let rm = store.get_mut(&format!("{prefix}.rmean"))?;
            for (r, m) in rm.data.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.get_mut(&format!("{prefix}.rvar"))?;
            for (r, v) in rv.data.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }
}

pub struct ImageForward {
    pub logits: DiffTensor,
    pub probs: DiffTensor,
    /// Unit-norm semantic features, present when the store has a Proj head.
    pub features: Option<DiffTensor>,
    pub bn_updates: BnUpdates,
}

struct Ctx<'a> {
    graph: &'a mut Graph,
    store: &'a ParamStore,
    leaves: &'a mut LeafCache,
    phase: Phase,
    pad: [usize; 3],
    bn_updates: BnUpdates,
}

impl Ctx<'_> {
    fn leaf(&mut self, name: &str) -> Result<DiffTensor> {
        Ok(self.leaves.leaf(self.graph, self.store, name)?)
    }

    fn conv(&mut self, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let (wn, bn) = conv_names(prefix);
        let w = self.leaf(&wn)?;
        let b = self.leaf(&bn)?;
        Ok(self.graph.conv3d(x, &w, &b, [1, 1, 1], self.pad)?)
    }

    fn batchnorm(&mut self, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let (gn, btn, rmn, rvn) = bn_names(prefix);
        let gamma = self.leaf(&gn)?;
        let beta = self.leaf(&btn)?;
        match self.phase {
            Phase::Train => {
                let (y, mean, var) = self.graph.batchnorm3d_train(x, &gamma, &beta)?;
                let shape = x.shape();
                let n = shape[0] * shape[2] * shape[3] * shape[4];
                self.bn_updates.per_layer.push((prefix.to_string(), mean, var, n));
                Ok(y)
            }
            Phase::Eval => {
                let rm = self.store.get(&rmn)?.data.clone();
                let rv = self.store.get(&rvn)?.data.clone();
                Ok(self.graph.batchnorm3d_eval(x, &gamma, &beta, &rm, &rv)?)
            }
        }
    }

    fn conv_bn_relu(&mut self, conv_prefix: &str, bn_prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let c = self.conv(conv_prefix, x)?;
        let b = self.batchnorm(bn_prefix, &c)?;
        Ok(self.graph.relu(&b)?)
    }

    /// out = relu( conv3(stage2(stage1(x))) + stage1(x) )
    fn residual_block(&mut self, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let stage1 = self.conv_bn_relu(&format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x)?;
        let stage2 = self.conv_bn_relu(&format!("{prefix}.conv2"), &format!("{prefix}.bn2"), &stage1)?;
        let main = self.conv(&format!("{prefix}.conv3"), &stage2)?;
        let joined = self.graph.add(&main, &stage1)?;
        Ok(self.graph.relu(&joined)?)
    }
}

/// Encode a batch of patches shaped [b, 1, bands, s, s]. Produces logits,
/// softmax probabilities, and (when the Proj head exists) unit-norm
/// semantic features [b, d_sem].
pub fn encode_image_batch(
    graph: &mut Graph,
    store: &ParamStore,
    leaves: &mut LeafCache,
    config: &ImageEncoderConfig,
    x: &DiffTensor,
    phase: Phase,
) -> Result<ImageForward> {
    let half = config.kernel / 2;
    let mut ctx = Ctx {
        graph,
        store,
        leaves,
        phase,
        pad: [half, half, half],
        bn_updates: BnUpdates::default(),
    };

    let b1 = ctx.residual_block("img.b1", x)?;
    let p1 = ctx.graph.maxpool3d(&b1, POOL, POOL)?;
    let b2 = ctx.residual_block("img.b2", &p1)?;
    let p2 = ctx.graph.maxpool3d(&b2, POOL, POOL)?;
    let trunk = ctx.conv("img.final", &p2)?;

    let batch = x.shape()[0];
    let flat = trunk.numel() / batch;
    let flattened = ctx.graph.reshape(&trunk, &[batch, flat])?;

    let cls_w = ctx.leaf("cls.w")?;
    let cls_b = ctx.leaf("cls.b")?;
    let logits = ctx.graph.linear(&flattened, &cls_w, &cls_b)?;
    let probs = ctx.graph.softmax(&logits)?;

    let features = if ctx.store.contains("proj.w") {
        let w = ctx.leaf("proj.w")?;
        let b = ctx.leaf("proj.b")?;
        let projected = ctx.graph.linear(&flattened, &w, &b)?;
        Some(ctx.graph.l2_normalize(&projected)?)
    } else {
        None
    };

    let bn_updates = ctx.bn_updates;
    Ok(ImageForward { logits, probs, features, bn_updates })
}

/// One residual block in isolation (test hook for the skip contract).
pub fn residual_block_forward(
    graph: &mut Graph,
    store: &ParamStore,
    leaves: &mut LeafCache,
    config: &ImageEncoderConfig,
    block: usize,
    x: &DiffTensor,
    phase: Phase,
) -> Result<DiffTensor> {
    let half = config.kernel / 2;
    let mut ctx = Ctx {
        graph,
        store,
        leaves,
        phase,
        pad: [half, half, half],
        bn_updates: BnUpdates::default(),
    };
    ctx.residual_block(&format!("img.b{block}"), x)
}
