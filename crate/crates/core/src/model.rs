//! The contrastive vision transformer: convolutional stem, stages of
//! external-attention blocks joined by shrink convolutions, global average
//! pooling to the attention embedding `z`, class focuses, a projection and
//! two classifier heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::layers::{dropout, normal_init, BatchNorm, Conv2d, LayerNorm, Linear, Mode};
use crate::tensor::Tensor;

/// Normalization applied to the query-key logits of external attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    #[default]
    Batch,
    /// No normalization; used for hand-checkable attention.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvtConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_dims: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    /// Query/key width `d` of each stage.
    pub key_dims: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Width of `z`; equals the last stage width.
    pub embed_dim: usize,
    pub projection_dim: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    /// Size of the label space (`C_max`).
    pub num_classes: usize,
    pub attention_norm: AttentionNorm,
}

impl Default for CvtConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 3,
            stem_channels: 32,
            stage_dims: vec![64, 96],
            heads_per_stage: vec![2, 2],
            key_dims: vec![32, 32],
            blocks_per_stage: vec![2, 2],
            embed_dim: 96,
            projection_dim: 64,
            mlp_ratio: 2,
            dropout_rate: 0.1,
            num_classes: 10,
            attention_norm: AttentionNorm::Batch,
        }
    }
}

impl CvtConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_dims.len();
        if stages == 0 {
            return Err(CvtError::Config("at least one stage is required".into()));
        }
        if self.heads_per_stage.len() != stages
            || self.blocks_per_stage.len() != stages
            || self.key_dims.len() != stages
        {
            return Err(CvtError::Config(
                "stage_dims, heads_per_stage, key_dims and blocks_per_stage must have equal length".into(),
            ));
        }
        for s in 0..stages {
            let (dim, heads, key) = (self.stage_dims[s], self.heads_per_stage[s], self.key_dims[s]);
            if heads == 0 || key % heads != 0 {
                return Err(CvtError::Config(format!(
                    "stage {s}: key dim {key} not divisible by {heads} heads"
                )));
            }
            if dim % heads != 0 {
                return Err(CvtError::Config(format!(
                    "stage {s}: width {dim} not divisible by {heads} heads"
                )));
            }
        }
        let reduction = 4 << (stages - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(reduction) {
            return Err(CvtError::Config(format!(
                "image size {} must be a multiple of {reduction}",
                self.image_size
            )));
        }
        if self.embed_dim != *self.stage_dims.last().unwrap() {
            return Err(CvtError::Config(format!(
                "embed_dim {} must equal the last stage width {}",
                self.embed_dim,
                self.stage_dims.last().unwrap()
            )));
        }
        if self.num_classes == 0 || self.projection_dim == 0 || self.mlp_ratio == 0 {
            return Err(CvtError::Config("num_classes, projection_dim and mlp_ratio must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CvtError::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Token grid side of each stage (the stem divides the image side by 4,
    /// each shrink by 2 more).
    pub fn stage_sides(&self) -> Vec<usize> {
        (0..self.stage_dims.len())
            .map(|s| self.image_size / (4 << s))
            .collect()
    }
}

/// External attention: queries and values come from the input, keys are a
/// learned `[m, d]` matrix (one slot per token position), and a learned bias
/// `[H, N, m]` is added to the normalized logits before the softmax.
#[derive(Debug, Clone)]
pub struct ExternalAttention {
    pub query: Linear,
    pub value: Linear,
    /// `[m, d]` external key.
    pub key: ParamId,
    /// `[H * N, m]` attention bias; rows `h*N..(h+1)*N` belong to head `h`.
    pub bias: ParamId,
    pub norms: Vec<BatchNorm>,
    pub heads: usize,
    pub key_dim: usize,
    pub tokens: usize,
    pub dim: usize,
    pub norm: AttentionNorm,
}

/// Output of [`ExternalAttention::forward`]: concatenated head outputs plus
/// each head's attention map `[batch * N, m]`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub maps: Vec<Var>,
}

impl ExternalAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        key_dim: usize,
        heads: usize,
        tokens: usize,
        norm: AttentionNorm,
        rng: &mut impl Rng,
    ) -> Self {
        let slots = tokens;
        let query = Linear::new(store, &format!("{name}.query"), dim, key_dim, true, rng);
        let value = Linear::new(store, &format!("{name}.value"), dim, dim, true, rng);
        let key = store.add(
            format!("{name}.external_key"),
            normal_init(&[slots, key_dim], 1.0 / (key_dim as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.attention_bias"), Tensor::zeros(&[heads * tokens, slots]));
        let norms = match norm {
            AttentionNorm::Batch => (0..heads)
                .map(|h| BatchNorm::new(store, &format!("{name}.logit_norm{h}"), slots))
                .collect(),
            AttentionNorm::Identity => Vec::new(),
        };
        Self {
            query,
            value,
            key,
            bias,
            norms,
            heads,
            key_dim,
            tokens,
            dim,
            norm,
        }
    }

    pub fn slots(&self) -> usize {
        self.tokens
    }

    /// `x` is `[batch * N, dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<AttentionOutput> {
        let rows = g.value(x).rows();
        if rows != batch * self.tokens || g.value(x).cols() != self.dim {
            return Err(CvtError::Shape(format!(
                "external attention expects [{} x {}, {}], got {:?}",
                batch,
                self.tokens,
                self.dim,
                g.value(x).shape()
            )));
        }
        let q = self.query.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let key = g.param(store, self.key);
        let bias = g.param(store, self.bias);
        let head_key = self.key_dim / self.heads;
        let head_val = self.dim / self.heads;
        let scale = 1.0 / (head_key as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_key, head_key)?;
            let kh = g.slice_cols(key, h * head_key, head_key)?;
            let logits = g.matmul(qh, kh, true)?;
            let normed = match self.norm {
                AttentionNorm::Batch => self.norms[h].forward(g, store, logits, mode)?,
                AttentionNorm::Identity => logits,
            };
            let bh = g.slice_rows(bias, h * self.tokens, self.tokens)?;
            let biased = g.add_tiled(normed, bh)?;
            let scaled = g.scale(biased, scale);
            let attn = g.softmax_rows(scaled);
            let vh = g.slice_cols(v, h * head_val, head_val)?;
            outs.push(g.grouped_matmul(attn, vh, batch)?);
            maps.push(attn);
        }
        let out = g.concat_cols(&outs)?;
        Ok(AttentionOutput { out, maps })
    }
}

/// Pre-norm transformer block: external attention and a GELU MLP, each with
/// a residual connection and dropout.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attention: ExternalAttention,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &CvtConfig, stage: usize, tokens: usize, rng: &mut impl Rng) -> Self {
        let dim = cfg.stage_dims[stage];
        let hidden = dim * cfg.mlp_ratio;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: ExternalAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                cfg.key_dims[stage],
                cfg.heads_per_stage[stage],
                tokens,
                cfg.attention_norm,
                rng,
            ),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, true, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        batch: usize,
        mode: Mode,
        drop: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attention.forward(g, store, h, batch, mode)?.out;
        let a = self.proj.forward(g, store, a)?;
        let a = dropout(g, a, drop, mode, rng)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = dropout(g, h, drop, mode, rng)?;
        let h = self.fc2.forward(g, store, h)?;
        let h = dropout(g, h, drop, mode, rng)?;
        g.add(x, h)
    }
}

/// One learnable unit vector per class plus the set of classes that have
/// joined training. Activation is monotone.
#[derive(Debug, Clone)]
pub struct FocusBank {
    pub param: ParamId,
    active: Vec<bool>,
}

impl FocusBank {
    pub const INIT_STD: f64 = 0.01;

    pub fn new(store: &mut ParamStore, classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            param: store.add("focuses", normal_init(&[classes, dim], Self::INIT_STD, rng)),
            active: vec![false; classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.active.len()
    }

    /// Marks every class in `labels` as active. Fails without changes if any
    /// label is outside the bank.
    pub fn activate(&mut self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.active.len()) {
            return Err(CvtError::Config(format!(
                "label {bad} outside focus bank of {} classes",
                self.active.len()
            )));
        }
        for &l in labels {
            self.active[l] = true;
        }
        Ok(())
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active.get(class).copied().unwrap_or(false)
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub(crate) fn set_active_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.active.len() {
            return Err(CvtError::Checkpoint("focus mask length mismatch".into()));
        }
        self.active = mask;
        Ok(())
    }

    /// Active class ids in ascending order.
    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }

    /// Unit-normalized rows of the active focuses, or `None` when none is active.
    pub fn graph_rows(&self, g: &mut Graph, store: &ParamStore) -> Result<Option<(Var, Vec<usize>)>> {
        let classes = self.active_classes();
        if classes.is_empty() {
            return Ok(None);
        }
        let all = g.param(store, self.param);
        let rows = g.gather_rows(all, classes.clone())?;
        Ok(Some((g.l2_normalize_rows(rows), classes)))
    }

    /// Unit-normalized copy of every focus row.
    pub fn normalized(&self, store: &ParamStore) -> Tensor {
        let mut t = store.get(self.param).clone();
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }
}

/// Graph handles produced by [`CvtModel::embed`].
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    /// Globally pooled features `[batch, embed_dim]`.
    pub pooled: Var,
    /// L2-normalized pooled features.
    pub z: Var,
}

/// Concrete model outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub z: Tensor,
    pub logits_injection: Tensor,
    pub logits_accumulation: Tensor,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<Block>,
    pub side: usize,
}

#[derive(Debug, Clone)]
pub struct CvtModel {
    config: CvtConfig,
    pub store: ParamStore,
    pub stem1: Conv2d,
    pub stem_norm1: BatchNorm,
    pub stem2: Conv2d,
    pub stem_norm2: BatchNorm,
    pub stages: Vec<Stage>,
    pub shrinks: Vec<Conv2d>,
    pub shrink_norms: Vec<BatchNorm>,
    pub final_norm: LayerNorm,
    pub projection1: Linear,
    pub projection2: Linear,
    pub head_injection: Linear,
    pub head_accumulation: Linear,
    pub focuses: FocusBank,
}

impl CvtModel {
    /// Builds a freshly initialized model; identical `(config, seed)` give
    /// identical weights.
    pub fn new(config: CvtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let stem1 = Conv2d::new(&mut store, "stem.conv1", c.in_channels, c.stem_channels, 3, 2, 1, &mut rng);
        let stem_norm1 = BatchNorm::new(&mut store, "stem.norm1", c.stem_channels);
        let stem2 = Conv2d::new(&mut store, "stem.conv2", c.stem_channels, c.stage_dims[0], 3, 2, 1, &mut rng);
        let stem_norm2 = BatchNorm::new(&mut store, "stem.norm2", c.stage_dims[0]);
        let sides = c.stage_sides();
        let mut stages = Vec::new();
        let mut shrinks = Vec::new();
        let mut shrink_norms = Vec::new();
        for s in 0..c.stage_dims.len() {
            if s > 0 {
                shrinks.push(Conv2d::new(
                    &mut store,
                    &format!("shrink{s}"),
                    c.stage_dims[s - 1],
                    c.stage_dims[s],
                    3,
                    2,
                    1,
                    &mut rng,
                ));
                shrink_norms.push(BatchNorm::new(&mut store, &format!("shrink{s}.norm"), c.stage_dims[s]));
            }
            let tokens = sides[s] * sides[s];
            let blocks = (0..c.blocks_per_stage[s])
                .map(|b| Block::new(&mut store, &format!("stage{s}.block{b}"), c, s, tokens, &mut rng))
                .collect();
            stages.push(Stage { blocks, side: sides[s] });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", c.embed_dim);
        let projection1 = Linear::new(&mut store, "projection.fc1", c.embed_dim, c.embed_dim, true, &mut rng);
        let projection2 = Linear::new(&mut store, "projection.fc2", c.embed_dim, c.projection_dim, true, &mut rng);
        let head_injection = Linear::new(&mut store, "head_injection", c.projection_dim, c.num_classes, true, &mut rng);
        let head_accumulation =
            Linear::new(&mut store, "head_accumulation", c.projection_dim, c.num_classes, true, &mut rng);
        let focuses = FocusBank::new(&mut store, c.num_classes, c.embed_dim, &mut rng);
        Ok(Self {
            config,
            store,
            stem1,
            stem_norm1,
            stem2,
            stem_norm2,
            stages,
            shrinks,
            shrink_norms,
            final_norm,
            projection1,
            projection2,
            head_injection,
            head_accumulation,
            focuses,
        })
    }

    pub fn config(&self) -> &CvtConfig {
        &self.config
    }

    /// Trainable scalar count, including focuses, external keys and biases.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    /// Converts `[B, C, H, W]` images into the `[B*H*W, C]` token layout.
    fn images_to_tokens(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(CvtError::Shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                c.in_channels, c.image_size, c.image_size, shape
            )));
        }
        let (b, ch, hw) = (shape[0], shape[1], c.image_size * c.image_size);
        let src = images.data();
        let mut out = vec![0.0; b * hw * ch];
        for i in 0..b {
            for k in 0..ch {
                for p in 0..hw {
                    out[(i * hw + p) * ch + k] = src[(i * ch + k) * hw + p];
                }
            }
        }
        Tensor::from_vec(&[b * hw, ch], out)
    }

    /// Backbone: stem, stages with shrinks, final norm, global average pool,
    /// L2 normalization. Dropout and batch statistics only in [`Mode::Train`].
    pub fn embed(&mut self, g: &mut Graph, images: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Embedding> {
        let tokens = self.images_to_tokens(images)?;
        let batch = images.shape()[0];
        let store = &mut self.store;
        let drop = self.config.dropout_rate;
        let mut x = g.constant(tokens);
        let mut side = self.config.image_size;
        x = self.stem1.forward(g, store, x, batch, side)?;
        side = self.stem1.output_size(side);
        x = self.stem_norm1.forward(g, store, x, mode)?;
        x = g.gelu(x);
        x = self.stem2.forward(g, store, x, batch, side)?;
        side = self.stem2.output_size(side);
        x = self.stem_norm2.forward(g, store, x, mode)?;
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                let shrink = &self.shrinks[s - 1];
                x = shrink.forward(g, store, x, batch, side)?;
                side = shrink.output_size(side);
                x = self.shrink_norms[s - 1].forward(g, store, x, mode)?;
            }
            debug_assert_eq!(side, stage.side);
            for block in &stage.blocks {
                x = block.forward(g, store, x, batch, mode, drop, rng)?;
            }
        }
        let x = self.final_norm.forward(g, store, x)?;
        let pooled = g.group_mean_rows(x, side * side)?;
        let z = g.l2_normalize_rows(pooled);
        Ok(Embedding { pooled, z })
    }

    /// Shared projection followed by the injection and accumulation heads.
    pub fn classify(&self, g: &mut Graph, pooled: Var) -> Result<(Var, Var)> {
        if g.value(pooled).cols() != self.config.embed_dim {
            return Err(CvtError::Shape(format!(
                "classifier input width {} != {}",
                g.value(pooled).cols(),
                self.config.embed_dim
            )));
        }
        let h = self.projection1.forward(g, &self.store, pooled)?;
        let h = g.gelu(h);
        let h = self.projection2.forward(g, &self.store, h)?;
        let inj = self.head_injection.forward(g, &self.store, h)?;
        let acc = self.head_accumulation.forward(g, &self.store, h)?;
        Ok((inj, acc))
    }

    /// Inference-mode outputs for a batch of images.
    pub fn predict(&mut self, images: &Tensor) -> Result<ModelOutputs> {
        let mut g = Graph::new();
        // eval mode draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = self.embed(&mut g, images, Mode::Eval, &mut rng)?;
        let (inj, acc) = self.classify(&mut g, e.pooled)?;
        Ok(ModelOutputs {
            z: g.value(e.z).clone(),
            logits_injection: g.value(inj).clone(),
            logits_accumulation: g.value(acc).clone(),
        })
    }

    pub(crate) fn focuses_mut(&mut self) -> &mut FocusBank {
        &mut self.focuses
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(&[n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn default_config_is_valid_and_sides_are_fixed() {
        let c = CvtConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_sides(), vec![4, 2]);
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut c = CvtConfig { heads_per_stage: vec![2], ..CvtConfig::default() };
        assert!(c.validate().is_err());
        c = CvtConfig { key_dims: vec![31, 32], ..CvtConfig::default() };
        assert!(c.validate().is_err());
        c = CvtConfig { image_size: 12, ..CvtConfig::default() };
        assert!(c.validate().is_err());
        c = CvtConfig { embed_dim: 64, ..CvtConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic_in_eval() {
        let mut m = CvtModel::new(CvtConfig::default(), 1).unwrap();
        let x = image_batch(3, 2);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a.z, b.z);
        for i in 0..3 {
            let n = a.z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(a.logits_injection.shape(), &[3, 10]);
        assert_eq!(a.logits_accumulation.shape(), &[3, 10]);
    }

    #[test]
    fn wrong_image_size_is_structural_error() {
        let mut m = CvtModel::new(CvtConfig::default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(m.predict(&x), Err(CvtError::Shape(_))));
    }

    #[test]
    fn focus_activation_is_monotone_and_idempotent() {
        let mut m = CvtModel::new(CvtConfig::default(), 0).unwrap();
        let bank = m.focuses_mut();
        assert!(bank.active_classes().is_empty());
        bank.activate(&[0, 1]).unwrap();
        assert_eq!(bank.active_classes(), vec![0, 1]);
        bank.activate(&[2]).unwrap();
        assert_eq!(bank.active_classes(), vec![0, 1, 2]);
        bank.activate(&[0]).unwrap();
        assert_eq!(bank.active_classes(), vec![0, 1, 2]);
        assert!(matches!(bank.activate(&[10]), Err(CvtError::Config(_))));
        assert_eq!(bank.active_classes(), vec![0, 1, 2]);
    }

    #[test]
    fn parameter_count_is_deterministic_and_grows_with_width() {
        let a = CvtModel::new(CvtConfig::default(), 0).unwrap().count_parameters();
        let b = CvtModel::new(CvtConfig::default(), 5).unwrap().count_parameters();
        assert_eq!(a, b);
        let wide = CvtConfig {
            stage_dims: vec![64, 192],
            embed_dim: 192,
            ..CvtConfig::default()
        };
        assert!(CvtModel::new(wide, 0).unwrap().count_parameters() > a);
    }
}
