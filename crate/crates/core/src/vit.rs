//! Compact vision transformer with adapter hook points on the attention query
//! and value projections.
//!
//! Hidden states hold one token per column (`embed_dim x tokens`), so every
//! linear map is `W * Z + b`. A batch of samples is laid side by side along
//! the columns; only attention is computed per sample. Blocks are pre-norm
//! (layer norm before attention and before the MLP) with a GELU MLP, and the
//! class token after the final layer norm feeds the classifier head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops};
use crate::error::{PegoError, Result};
use crate::numerics::{Matrix, Rng};
use crate::pego::{adapted_forward_ops, AdaptedLinear, BoundAdapted};

/// Std of the class token and position embeddings. Linear weights use
/// `1 / sqrt(fan_in)` instead, which keeps narrow models out of the
/// small-init plateau.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for VitConfig {
    /// Desk-scale backbone: 16x16 single-channel images, 4x4 patches, width 32,
    /// two blocks of four heads.
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            mlp_ratio: 2.0,
            num_classes: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PegoError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks < 1 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if !(1..=3).contains(&self.channels) {
            return fail(format!("channels must be 1..=3, got {}", self.channels));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patch tokens plus the class token.
    pub fn num_positions(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Shape of an input image: channel planes stacked vertically.
    pub fn image_shape(&self) -> (usize, usize) {
        (self.channels * self.image_size, self.image_size)
    }
}

/// `y = W x + b` with `W: out x in`, `b: out x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn init(out: usize, inp: usize, rng: &mut Rng) -> Self {
        Self {
            weight: rng.gaussian_matrix(out, inp, 1.0 / (inp as f64).sqrt()),
            bias: Matrix::zeros(out, 1),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut ops = Eager;
        let b = BoundLinear::bind(&mut ops, self, "", "w", "b");
        let x = ops.constant(x.clone());
        let y = b.forward(&mut ops, &x)?;
        Ok(ops.value(&y).clone())
    }
}

/// An attention projection that may carry an adapter group.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Frozen(Linear),
    Adapted(AdaptedLinear),
}

impl Projection {
    pub fn weight(&self) -> &Matrix {
        match self {
            Projection::Frozen(l) => &l.weight,
            Projection::Adapted(a) => &a.base.weight,
        }
    }

    pub fn as_adapted(&self) -> Option<&AdaptedLinear> {
        match self {
            Projection::Adapted(a) => Some(a),
            Projection::Frozen(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(d, 1, 1.0),
            beta: Matrix::zeros(d, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Projection,
    pub wk: Linear,
    pub wv: Projection,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub cls_token: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Which projection of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjKind {
    Query,
    Value,
}

impl ProjKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Query => "wq",
            ProjKind::Value => "wv",
        }
    }
}

pub fn init_vit(cfg: &VitConfig, rng: &mut Rng) -> Result<VitModel> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let patch_embed = Linear::init(d, cfg.patch_dim(), rng);
    let cls_token = rng.gaussian_matrix(d, 1, INIT_STD);
    let pos_embed = rng.gaussian_matrix(d, cfg.num_positions(), INIT_STD);
    let blocks = (0..cfg.num_blocks)
        .map(|_| Block {
            ln1: LayerNorm::new(d),
            wq: Projection::Frozen(Linear::init(d, d, rng)),
            wk: Linear::init(d, d, rng),
            wv: Projection::Frozen(Linear::init(d, d, rng)),
            wo: Linear::init(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(hidden, d, rng),
            fc2: Linear::init(d, hidden, rng),
        })
        .collect();
    let head = Linear::init(cfg.num_classes, d, rng);
    Ok(VitModel {
        config: cfg.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        norm: LayerNorm::new(d),
        head,
    })
}

/// Splits an image into a `patch_dim x num_patches` matrix, patches in
/// row-major order, each patch flattened channel-major then row-major.
pub fn patchify(image: &Matrix, cfg: &VitConfig) -> Result<Matrix> {
    let expected = cfg.image_shape();
    if image.shape() != expected {
        return Err(PegoError::Shape {
            op: "patchify",
            left: image.shape(),
            right: expected,
        });
    }
    let p = cfg.patch_size;
    let side = cfg.patches_per_side();
    let size = cfg.image_size;
    let mut out = Matrix::zeros(cfg.patch_dim(), cfg.num_patches());
    for py in 0..side {
        for px in 0..side {
            let col = py * side + px;
            let mut row = 0;
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        out[(row, col)] = image[(c * size + py * p + y, px * p + x)];
                        row += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

impl VitModel {
    pub fn num_adapted(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                usize::from(matches!(b.wq, Projection::Adapted(_)))
                    + usize::from(matches!(b.wv, Projection::Adapted(_)))
            })
            .sum()
    }

    pub fn projection(&self, block: usize, kind: ProjKind) -> Option<&Projection> {
        self.blocks.get(block).map(|b| match kind {
            ProjKind::Query => &b.wq,
            ProjKind::Value => &b.wv,
        })
    }

    pub fn projection_mut(&mut self, block: usize, kind: ProjKind) -> Option<&mut Projection> {
        self.blocks.get_mut(block).map(|b| match kind {
            ProjKind::Query => &mut b.wq,
            ProjKind::Value => &mut b.wv,
        })
    }

    /// Every adapted projection as `(block, kind, layer)`, query before value.
    pub fn adapted_layers(&self) -> Vec<(usize, ProjKind, &AdaptedLinear)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(a) = block.wq.as_adapted() {
                out.push((b, ProjKind::Query, a));
            }
            if let Some(a) = block.wv.as_adapted() {
                out.push((b, ProjKind::Value, a));
            }
        }
        out
    }

    /// Replaces the classifier head with a freshly initialized one.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut Rng) -> Result<()> {
        if num_classes < 2 {
            return Err(PegoError::Config("num_classes must be at least 2".into()));
        }
        self.config.num_classes = num_classes;
        self.head = Linear::init(num_classes, self.config.embed_dim, rng);
        Ok(())
    }

    /// All parameters in a fixed order, named by the checkpoint scheme.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_embed.w".into(), &self.patch_embed.weight),
            ("patch_embed.b".into(), &self.patch_embed.bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.ln1.g"), &block.ln1.gamma));
            out.push((format!("{p}.ln1.b"), &block.ln1.beta));
            push_projection(&mut out, &format!("{p}.attn.wq"), &block.wq);
            out.push((format!("{p}.attn.wk.base"), &block.wk.weight));
            out.push((format!("{p}.attn.wk.bias"), &block.wk.bias));
            push_projection(&mut out, &format!("{p}.attn.wv"), &block.wv);
            out.push((format!("{p}.attn.wo.base"), &block.wo.weight));
            out.push((format!("{p}.attn.wo.bias"), &block.wo.bias));
            out.push((format!("{p}.ln2.g"), &block.ln2.gamma));
            out.push((format!("{p}.ln2.b"), &block.ln2.beta));
            out.push((format!("{p}.mlp.fc1.w"), &block.fc1.weight));
            out.push((format!("{p}.mlp.fc1.b"), &block.fc1.bias));
            out.push((format!("{p}.mlp.fc2.w"), &block.fc2.weight));
            out.push((format!("{p}.mlp.fc2.b"), &block.fc2.bias));
        }
        out.push(("norm.g".into(), &self.norm.gamma));
        out.push(("norm.b".into(), &self.norm.beta));
        out.push(("head.w".into(), &self.head.weight));
        out.push(("head.b".into(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`params`](Self::params), same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch_embed.w".into(), &mut self.patch_embed.weight),
            ("patch_embed.b".into(), &mut self.patch_embed.bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.ln1.g"), &mut block.ln1.gamma));
            out.push((format!("{p}.ln1.b"), &mut block.ln1.beta));
            push_projection_mut(&mut out, &format!("{p}.attn.wq"), &mut block.wq);
            out.push((format!("{p}.attn.wk.base"), &mut block.wk.weight));
            out.push((format!("{p}.attn.wk.bias"), &mut block.wk.bias));
            push_projection_mut(&mut out, &format!("{p}.attn.wv"), &mut block.wv);
            out.push((format!("{p}.attn.wo.base"), &mut block.wo.weight));
            out.push((format!("{p}.attn.wo.bias"), &mut block.wo.bias));
            out.push((format!("{p}.ln2.g"), &mut block.ln2.gamma));
            out.push((format!("{p}.ln2.b"), &mut block.ln2.beta));
            out.push((format!("{p}.mlp.fc1.w"), &mut block.fc1.weight));
            out.push((format!("{p}.mlp.fc1.b"), &mut block.fc1.bias));
            out.push((format!("{p}.mlp.fc2.w"), &mut block.fc2.weight));
            out.push((format!("{p}.mlp.fc2.b"), &mut block.fc2.bias));
        }
        out.push(("norm.g".into(), &mut self.norm.gamma));
        out.push(("norm.b".into(), &mut self.norm.beta));
        out.push(("head.w".into(), &mut self.head.weight));
        out.push(("head.b".into(), &mut self.head.bias));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn bind<O: Ops>(&self, ops: &mut O) -> BoundModel<O::Var> {
        BoundModel {
            patch_embed: BoundLinear::bind(ops, &self.patch_embed, "patch_embed", "w", "b"),
            cls_token: ops.param("cls_token", &self.cls_token),
            pos_embed: ops.param("pos_embed", &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(b, block)| {
                    let p = format!("blocks.{b}");
                    BoundBlock {
                        ln1: bind_ln(ops, &block.ln1, &format!("{p}.ln1")),
                        wq: BoundProjection::bind(ops, &block.wq, &format!("{p}.attn.wq")),
                        wk: BoundLinear::bind(ops, &block.wk, &format!("{p}.attn.wk"), "base", "bias"),
                        wv: BoundProjection::bind(ops, &block.wv, &format!("{p}.attn.wv")),
                        wo: BoundLinear::bind(ops, &block.wo, &format!("{p}.attn.wo"), "base", "bias"),
                        ln2: bind_ln(ops, &block.ln2, &format!("{p}.ln2")),
                        fc1: BoundLinear::bind(ops, &block.fc1, &format!("{p}.mlp.fc1"), "w", "b"),
                        fc2: BoundLinear::bind(ops, &block.fc2, &format!("{p}.mlp.fc2"), "w", "b"),
                    }
                })
                .collect(),
            norm: bind_ln(ops, &self.norm, "norm"),
            head: BoundLinear::bind(ops, &self.head, "head", "w", "b"),
        }
    }

    /// Patch matrices of a batch laid side by side.
    pub fn batch_patches(&self, images: &[&Matrix]) -> Result<Matrix> {
        if images.is_empty() {
            return Err(PegoError::Input("empty image batch".into()));
        }
        let parts = images
            .iter()
            .map(|img| patchify(img, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = parts.iter().collect();
        crate::autograd::ops::concat_cols_value(&refs)
    }

    /// Class-token features (`d x S`) and logits (`classes x S`) of a batch.
    pub fn forward_ops<O: Ops>(
        &self,
        ops: &mut O,
        bound: &BoundModel<O::Var>,
        patches: &O::Var,
        n_samples: usize,
    ) -> Result<(O::Var, O::Var)> {
        let cfg = &self.config;
        let np = cfg.num_patches();
        let t = cfg.num_positions();
        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();

        let emb = bound.patch_embed.forward(ops, patches)?;
        let mut seqs = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let tokens = ops.col_slice(&emb, s * np, np);
            let seq = ops.concat_cols(&[bound.cls_token.clone(), tokens])?;
            seqs.push(ops.add(&seq, &bound.pos_embed)?);
        }
        let mut z = ops.concat_cols(&seqs)?;

        for block in &bound.blocks {
            let h = ops.layernorm_cols(&z, &block.ln1.0, &block.ln1.1)?;
            let q = block.wq.forward(ops, &h)?;
            let k = block.wk.forward(ops, &h)?;
            let v = block.wv.forward(ops, &h)?;
            let mut outs = Vec::with_capacity(n_samples);
            for s in 0..n_samples {
                let qs = ops.col_slice(&q, s * t, t);
                let ks = ops.col_slice(&k, s * t, t);
                let vs = ops.col_slice(&v, s * t, t);
                let mut heads = Vec::with_capacity(cfg.num_heads);
                for hd in 0..cfg.num_heads {
                    let qh = ops.row_slice(&qs, hd * dh, dh);
                    let kh = ops.row_slice(&ks, hd * dh, dh);
                    let vh = ops.row_slice(&vs, hd * dh, dh);
                    let qt = ops.transpose(&qh);
                    let scores = ops.matmul(&qt, &kh)?;
                    let scores = ops.scale(&scores, attn_scale);
                    // Row i: attention of query token i over all keys.
                    let probs = ops.softmax_rows(&scores);
                    let pt = ops.transpose(&probs);
                    heads.push(ops.matmul(&vh, &pt)?);
                }
                outs.push(ops.concat_rows(&heads)?);
            }
            let attn = ops.concat_cols(&outs)?;
            let attn = block.wo.forward(ops, &attn)?;
            z = ops.add(&z, &attn)?;

            let h2 = ops.layernorm_cols(&z, &block.ln2.0, &block.ln2.1)?;
            let hidden = block.fc1.forward(ops, &h2)?;
            let hidden = ops.gelu(&hidden);
            let mlp = block.fc2.forward(ops, &hidden)?;
            z = ops.add(&z, &mlp)?;
        }

        let zf = ops.layernorm_cols(&z, &bound.norm.0, &bound.norm.1)?;
        let cls_cols: Vec<usize> = (0..n_samples).map(|s| s * t).collect();
        let feats = ops.select_cols(&zf, &cls_cols);
        let logits = bound.head.forward(ops, &feats)?;
        Ok((feats, logits))
    }

    /// Features and logits of a batch of images, evaluated eagerly.
    pub fn forward_batch(&self, images: &[&Matrix]) -> Result<(Matrix, Matrix)> {
        let mut ops = Eager;
        let bound = self.bind(&mut ops);
        let patches = ops.constant(self.batch_patches(images)?);
        let (f, l) = self.forward_ops(&mut ops, &bound, &patches, images.len())?;
        Ok((ops.value(&f).clone(), ops.value(&l).clone()))
    }

    /// Logits (`classes x S`) of any number of images, in chunks.
    pub fn logits_batch(&self, images: &[&Matrix]) -> Result<Matrix> {
        let parts = images
            .chunks(EVAL_CHUNK)
            .map(|c| self.forward_batch(c).map(|(_, l)| l))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = parts.iter().collect();
        crate::autograd::ops::concat_cols_value(&refs)
    }

    /// Features (`d x S`) of any number of images, in chunks.
    pub fn features_batch(&self, images: &[&Matrix]) -> Result<Matrix> {
        let parts = images
            .chunks(EVAL_CHUNK)
            .map(|c| self.forward_batch(c).map(|(f, _)| f))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = parts.iter().collect();
        crate::autograd::ops::concat_cols_value(&refs)
    }

    pub fn predict_batch(&self, images: &[&Matrix]) -> Result<Vec<usize>> {
        let logits = self.logits_batch(images)?;
        Ok((0..logits.cols()).map(|j| argmax(&logits.col_vec(j))).collect())
    }
}

const EVAL_CHUNK: usize = 64;

/// Class-token representation of one image after the final layer norm.
pub fn forward_features(model: &VitModel, image: &Matrix) -> Result<Vec<f64>> {
    let (f, _) = model.forward_batch(&[image])?;
    Ok(f.col_vec(0))
}

pub fn forward_logits(model: &VitModel, image: &Matrix) -> Result<Vec<f64>> {
    let (_, l) = model.forward_batch(&[image])?;
    Ok(l.col_vec(0))
}

pub fn predict(model: &VitModel, image: &Matrix) -> Result<usize> {
    Ok(argmax(&forward_logits(model, image)?))
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn push_projection<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, p: &'a Projection) {
    match p {
        Projection::Frozen(l) => {
            out.push((format!("{prefix}.base"), &l.weight));
            out.push((format!("{prefix}.bias"), &l.bias));
        }
        Projection::Adapted(a) => {
            out.push((format!("{prefix}.base"), &a.base.weight));
            out.push((format!("{prefix}.bias"), &a.base.bias));
            for (i, m) in a.group.modules.iter().enumerate() {
                out.push((format!("{prefix}.lora.{i}.A"), &m.a));
                out.push((format!("{prefix}.lora.{i}.B"), &m.b));
            }
        }
    }
}

fn push_projection_mut<'a>(out: &mut Vec<(String, &'a mut Matrix)>, prefix: &str, p: &'a mut Projection) {
    match p {
        Projection::Frozen(l) => {
            out.push((format!("{prefix}.base"), &mut l.weight));
            out.push((format!("{prefix}.bias"), &mut l.bias));
        }
        Projection::Adapted(a) => {
            out.push((format!("{prefix}.base"), &mut a.base.weight));
            out.push((format!("{prefix}.bias"), &mut a.base.bias));
            for (i, m) in a.group.modules.iter_mut().enumerate() {
                out.push((format!("{prefix}.lora.{i}.A"), &mut m.a));
                out.push((format!("{prefix}.lora.{i}.B"), &mut m.b));
            }
        }
    }
}

/// Model parameters bound into an [`Ops`] engine.
pub struct BoundModel<V> {
    pub patch_embed: BoundLinear<V>,
    pub cls_token: V,
    pub pos_embed: V,
    pub blocks: Vec<BoundBlock<V>>,
    pub norm: (V, V),
    pub head: BoundLinear<V>,
}

pub struct BoundBlock<V> {
    pub ln1: (V, V),
    pub wq: BoundProjection<V>,
    pub wk: BoundLinear<V>,
    pub wv: BoundProjection<V>,
    pub wo: BoundLinear<V>,
    pub ln2: (V, V),
    pub fc1: BoundLinear<V>,
    pub fc2: BoundLinear<V>,
}

pub struct BoundLinear<V> {
    pub weight: V,
    pub bias: V,
}

impl<V: Clone> BoundLinear<V> {
    fn bind<O: Ops<Var = V>>(ops: &mut O, l: &Linear, prefix: &str, w: &str, b: &str) -> Self {
        Self {
            weight: ops.param(&format!("{prefix}.{w}"), &l.weight),
            bias: ops.param(&format!("{prefix}.{b}"), &l.bias),
        }
    }

    fn forward<O: Ops<Var = V>>(&self, ops: &mut O, x: &V) -> Result<V> {
        let y = ops.matmul(&self.weight, x)?;
        ops.add_col_bias(&y, &self.bias)
    }
}

pub enum BoundProjection<V> {
    Frozen(BoundLinear<V>),
    Adapted(BoundAdapted<V>),
}

impl<V: Clone> BoundProjection<V> {
    fn bind<O: Ops<Var = V>>(ops: &mut O, p: &Projection, prefix: &str) -> Self {
        match p {
            Projection::Frozen(l) => BoundProjection::Frozen(BoundLinear::bind(ops, l, prefix, "base", "bias")),
            Projection::Adapted(a) => BoundProjection::Adapted(BoundAdapted::bind(ops, a, prefix)),
        }
    }

    fn forward<O: Ops<Var = V>>(&self, ops: &mut O, x: &V) -> Result<V> {
        match self {
            BoundProjection::Frozen(l) => l.forward(ops, x),
            BoundProjection::Adapted(a) => {
                let y = adapted_forward_ops(ops, a, x)?;
                ops.add_col_bias(&y, &a.bias)
            }
        }
    }

    pub fn as_adapted(&self) -> Option<&BoundAdapted<V>> {
        match self {
            BoundProjection::Adapted(a) => Some(a),
            BoundProjection::Frozen(_) => None,
        }
    }
}

fn bind_ln<O: Ops>(ops: &mut O, ln: &LayerNorm, prefix: &str) -> (O::Var, O::Var) {
    (
        ops.param(&format!("{prefix}.g"), &ln.gamma),
        ops.param(&format!("{prefix}.b"), &ln.beta),
    )
}
