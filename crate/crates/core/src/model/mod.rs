//! Transformer backbone with a MIL head and a CLS head.
//!
//! The backbone embeds each `p × p` patch linearly, prepends a learned CLS
//! token, adds learned position embeddings and runs `depth` pre-norm
//! Transformer blocks followed by a final layer norm. The CLS head reads the
//! CLS token; the MIL head maps every patch token to `K + 1` nonnegative
//! contributions and sums them per bag.

mod checkpoint;
mod rollout;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use rollout::{attention_rollout, rollout_from_layers, Heatmap};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// How the MIL head turns per-token outputs into one bag prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilAggregation {
    /// Shared MLP per token, then sum over tokens.
    #[default]
    TokenSum,
    /// Mean-pool tokens, MLP once, then scale by `n`.
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of mask categories `K`.
    pub categories: usize,
    pub num_classes: usize,
    /// Hidden width of the MIL head MLP.
    pub mil_hidden: usize,
    pub mil_aggregation: MilAggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 96,
            patch_side: 16,
            channels: 3,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            categories: 2,
            num_classes: 2,
            mil_hidden: 64,
            mil_aggregation: MilAggregation::TokenSum,
        }
    }
}

impl ModelConfig {
    /// 384-pixel inputs with 32-pixel patches.
    pub fn full_scale() -> Self {
        Self {
            image_side: 384,
            patch_side: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::PatchSize {
                image_side: self.image_side,
                patch_side: self.patch_side,
            });
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0
            || self.depth == 0
            || self.mlp_ratio == 0
            || self.categories == 0
            || self.num_classes < 2
            || self.mil_hidden == 0
        {
            return bad(format!("degenerate model config {self:?}"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Patch count `n`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    /// Width of the soft-label vector, `K + 1`.
    pub fn soft_dim(&self) -> usize {
        self.categories + 1
    }

    /// Closed-form parameter count.
    ///
    /// ```text
    /// embed  = P·D + D + D + (n+1)·D          P = p²·C
    /// block  = 4D + (3D² + 3D) + (D² + D) + (D·H + H) + (H·D + D)   H = r·D
    /// norm   = 2D
    /// mil    = D·M + M + M·(K+1) + (K+1)
    /// cls    = D·C' + C'
    /// total  = embed + depth·block + norm + mil + cls
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_ratio * d;
        let m = self.mil_hidden;
        let k1 = self.soft_dim();
        let embed = self.patch_dim() * d + d + d + self.tokens() * d;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        let mil = d * m + m + m * k1 + k1;
        let cls = d * self.num_classes + self.num_classes;
        embed + self.depth * block + 2 * d + mil + cls
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let d = cfg.embed_dim;
    let h = cfg.mlp_ratio * d;
    let mut v = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d], TruncNormal),
        ("patch_embed.bias".to_string(), vec![d], Zeros),
        ("cls_token".to_string(), vec![1, d], TruncNormal),
        ("pos_embed".to_string(), vec![cfg.tokens(), d], TruncNormal),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        v.extend([
            (p("norm1.weight"), vec![d], Ones),
            (p("norm1.bias"), vec![d], Zeros),
            (p("attn.qkv.weight"), vec![d, 3 * d], TruncNormal),
            (p("attn.qkv.bias"), vec![3 * d], Zeros),
            (p("attn.proj.weight"), vec![d, d], TruncNormal),
            (p("attn.proj.bias"), vec![d], Zeros),
            (p("norm2.weight"), vec![d], Ones),
            (p("norm2.bias"), vec![d], Zeros),
            (p("mlp.fc1.weight"), vec![d, h], TruncNormal),
            (p("mlp.fc1.bias"), vec![h], Zeros),
            (p("mlp.fc2.weight"), vec![h, d], TruncNormal),
            (p("mlp.fc2.bias"), vec![d], Zeros),
        ]);
    }
    v.extend([
        ("norm.weight".to_string(), vec![d], Ones),
        ("norm.bias".to_string(), vec![d], Zeros),
        ("mil_head.fc1.weight".to_string(), vec![d, cfg.mil_hidden], TruncNormal),
        ("mil_head.fc1.bias".to_string(), vec![cfg.mil_hidden], Zeros),
        ("mil_head.fc2.weight".to_string(), vec![cfg.mil_hidden, cfg.soft_dim()], TruncNormal),
        ("mil_head.fc2.bias".to_string(), vec![cfg.soft_dim()], Zeros),
        ("cls_head.weight".to_string(), vec![d, cfg.num_classes], TruncNormal),
        ("cls_head.bias".to_string(), vec![cfg.num_classes], Zeros),
    ]);
    v
}

const INIT_STD: f64 = 0.02;

/// Pixels enter the patch embedding as `(v - PIXEL_MEAN) / PIXEL_STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// The model weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy)]
struct BlockVars {
    norm1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    norm2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Model parameters registered on one graph.
pub struct Bound {
    pub vars: Vec<Var>,
    patch: (Var, Var),
    cls_token: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    norm: (Var, Var),
    mil1: (Var, Var),
    mil2: (Var, Var),
    cls_head: (Var, Var),
}

/// Backbone outputs for a batch of `B` composed images.
pub struct BackboneOutput {
    pub batch: usize,
    /// `[B, D]`
    pub cls: Var,
    /// `[B·n, D]`, bag-major.
    pub patch_tokens: Var,
    /// `attention[layer][b·heads + h]` is a `[n+1, n+1]` row-stochastic matrix.
    pub attention: Vec<Vec<Var>>,
}

/// CLS token plus patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub cls: Vec<f32>,
    pub patch_tokens: Vec<Vec<f32>>,
}

/// Head outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[total, per-category...]`, `K + 1` values.
    pub soft: Vec<f32>,
    pub logits: Vec<f32>,
}

impl Predictions {
    /// Predicted class; ties go to the lower class index.
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

impl Model<f32> {
    /// Fresh weights: truncated normal (σ = 0.02, cut at 2σ) for weights and
    /// embeddings, ones/zeros for norms and biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::TruncNormal => Tensor::from_fn(&shape, |_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v as f32;
                        }
                    }),
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }
}

impl<T: Real> Model<T> {
    /// Assembles a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// All parameter values, concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "set_flat_params",
                lhs: vec![self.num_params()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            for (d, s) in p.value.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *d = T::of(*s);
            }
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter on `g`; with `trainable == false` they are
    /// recorded as constants and no gradients are tracked.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let patch = pair();
        let (cls_token, pos) = pair();
        let blocks = (0..self.config.depth)
            .map(|_| BlockVars {
                norm1: pair(),
                qkv: pair(),
                proj: pair(),
                norm2: pair(),
                fc1: pair(),
                fc2: pair(),
            })
            .collect();
        let norm = pair();
        let mil1 = pair();
        let mil2 = pair();
        let cls_head = pair();
        Bound {
            vars,
            patch,
            cls_token,
            pos,
            blocks,
            norm,
            mil1,
            mil2,
            cls_head,
        }
    }

    /// Flattens every image into normalised `[B·n, p²·C]` patch rows.
    fn patch_matrix(&self, images: &[Image]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let p = cfg.patch_side;
        let grid = cfg.grid();
        let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            if img.height != cfg.image_side
                || img.width != cfg.image_side
                || img.channels != cfg.channels
            {
                return Err(Error::ShapeMismatch {
                    op: "backbone_forward",
                    lhs: vec![img.height, img.width, img.channels],
                    rhs: vec![cfg.image_side, cfg.image_side, cfg.channels],
                });
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    for y in gy * p..(gy + 1) * p {
                        let row = img.idx(y, gx * p);
                        data.extend(img.data[row..row + p * cfg.channels].iter().map(|&v| T::of((v as f64 - PIXEL_MEAN) / PIXEL_STD)));
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * cfg.num_patches(), cfg.patch_dim()], data)
    }

    /// Runs the backbone over a batch of composed images.
    pub fn backbone_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: &[Image],
    ) -> Result<BackboneOutput> {
        let cfg = &self.config;
        let b = images.len();
        if b == 0 {
            return Err(Error::InvalidTensor("empty image batch".into()));
        }
        let n = cfg.num_patches();
        let t = cfg.tokens();
        let d = cfg.embed_dim;
        let dh = d / cfg.heads;

        let patches = g.constant(self.patch_matrix(images)?);
        let emb = linear(g, patches, bound.patch)?;
        let mut pieces = Vec::with_capacity(2 * b);
        for i in 0..b {
            pieces.push(bound.cls_token);
            pieces.push(g.slice_rows(emb, i * n, n)?);
        }
        let tokens = g.concat_rows(&pieces)?;
        let pos_index: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(bound.pos, &pos_index)?;
        let mut x = g.add(tokens, pos)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.depth);
        for blk in &bound.blocks {
            let h = g.layer_norm(x, blk.norm1.0, blk.norm1.1)?;
            let qkv = linear(g, h, blk.qkv)?;
            let mut layer_attn = Vec::with_capacity(b * cfg.heads);
            let mut per_image = Vec::with_capacity(b);
            for i in 0..b {
                let rows = g.slice_rows(qkv, i * t, t)?;
                let mut heads = Vec::with_capacity(cfg.heads);
                for hd in 0..cfg.heads {
                    let q = g.slice_cols(rows, hd * dh, dh)?;
                    let k = g.slice_cols(rows, d + hd * dh, dh)?;
                    let v = g.slice_cols(rows, 2 * d + hd * dh, dh)?;
                    let s = g.matmul_nt(q, k)?;
                    let s = g.scale(s, scale);
                    let a = g.softmax(s)?;
                    layer_attn.push(a);
                    heads.push(g.matmul(a, v)?);
                }
                per_image.push(g.concat_cols(&heads)?);
            }
            let attn_out = g.concat_rows(&per_image)?;
            let attn_out = linear(g, attn_out, blk.proj)?;
            x = g.add(x, attn_out)?;

            let h = g.layer_norm(x, blk.norm2.0, blk.norm2.1)?;
            let h = linear(g, h, blk.fc1)?;
            let h = g.gelu(h);
            let h = linear(g, h, blk.fc2)?;
            x = g.add(x, h)?;
            attention.push(layer_attn);
        }
        let x = g.layer_norm(x, bound.norm.0, bound.norm.1)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let patch_rows: Vec<usize> = (0..b).flat_map(|i| i * t + 1..(i + 1) * t).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        let patch_tokens = g.gather_rows(x, &patch_rows)?;
        Ok(BackboneOutput {
            batch: b,
            cls,
            patch_tokens,
            attention,
        })
    }

    /// `[B·n, D]` patch tokens to `[B, K+1]` nonnegative soft-label estimates.
    pub fn mil_head(&self, g: &mut Graph<T>, bound: &Bound, patch_tokens: Var, n: usize) -> Result<Var> {
        match self.config.mil_aggregation {
            MilAggregation::TokenSum => {
                let h = linear(g, patch_tokens, bound.mil1)?;
                let h = g.gelu(h);
                let o = linear(g, h, bound.mil2)?;
                let o = g.softplus(o);
                g.sum_row_groups(o, n)
            }
            MilAggregation::MeanPool => {
                let pooled = g.sum_row_groups(patch_tokens, n)?;
                let pooled = g.scale(pooled, 1.0 / n as f64);
                let h = linear(g, pooled, bound.mil1)?;
                let h = g.gelu(h);
                let o = linear(g, h, bound.mil2)?;
                let o = g.softplus(o);
                Ok(g.scale(o, n as f64))
            }
        }
    }

    /// `[B, D]` CLS tokens to `[B, num_classes]` logits.
    pub fn cls_head(&self, g: &mut Graph<T>, bound: &Bound, cls: Var) -> Result<Var> {
        linear(g, cls, bound.cls_head)
    }

    /// Backbone tokens of a single image.
    pub fn tokens(&self, image: &Image) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.backbone_forward(&mut g, &bound, std::slice::from_ref(image))?;
        let cls = g.value(out.cls).data().iter().map(|v| v.as_f64() as f32).collect();
        let d = self.config.embed_dim;
        let patch_tokens = g
            .value(out.patch_tokens)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        Ok(TokenSequence { cls, patch_tokens })
    }

    /// Both head outputs for each image.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<Predictions>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.backbone_forward(&mut g, &bound, images)?;
        let soft = self.mil_head(&mut g, &bound, out.patch_tokens, self.config.num_patches())?;
        let logits = self.cls_head(&mut g, &bound, out.cls)?;
        let to32 = |s: &[T]| s.iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
        let sk = self.config.soft_dim();
        let c = self.config.num_classes;
        Ok((0..images.len())
            .map(|i| Predictions {
                soft: to32(&g.value(soft).data()[i * sk..(i + 1) * sk]),
                logits: to32(&g.value(logits).data()[i * c..(i + 1) * c]),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(side: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut r = rng::rng_from_seed(seed);
        Image::new(side, side, 3, (0..side * side * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn param_count_formula_matches_tensors() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.num_params(), cfg.param_count());
        // hand evaluation for D=64, p=16, C=3, n=36, depth 2, ratio 4, K=2, 2 classes
        assert_eq!(cfg.param_count(), 156_229);
        let small = ModelConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mil_hidden: 8,
            image_side: 32,
            patch_side: 16,
            ..ModelConfig::default()
        };
        assert_eq!(Model::new(small.clone(), 0).unwrap().num_params(), small.param_count());
    }

    #[test]
    fn token_shapes() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg, 1).unwrap();
        let ts = m.tokens(&img(96, 2)).unwrap();
        assert_eq!(ts.cls.len(), 64);
        assert_eq!(ts.patch_tokens.len(), 36);
        assert!(ts.patch_tokens.iter().all(|t| t.len() == 64));
    }

    #[test]
    fn full_scale_token_count() {
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::full_scale()
        };
        let m = Model::new(cfg, 1).unwrap();
        let ts = m.tokens(&img(384, 3)).unwrap();
        assert_eq!(ts.patch_tokens.len(), 144);
        assert_eq!(ts.cls.len(), 64);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::new(ModelConfig::default(), 5).unwrap();
        let x = img(96, 9);
        assert_eq!(m.predict(std::slice::from_ref(&x)).unwrap(), m.predict(&[x]).unwrap());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = Model::new(ModelConfig::default(), 5).unwrap();
        assert!(m.predict(&[img(64, 0)]).is_err());
    }

    #[test]
    fn invalid_configs() {
        let c = ModelConfig { embed_dim: 30, heads: 4, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { patch_side: 20, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_mil_head_outputs_n_ln2() {
        let mut m = Model::new(ModelConfig::default(), 1).unwrap();
        for name in ["mil_head.fc1.weight", "mil_head.fc2.weight"] {
            m.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let p = m.predict(&[img(96, 4)]).unwrap();
        for &v in &p[0].soft {
            assert!((v as f64 - 36.0 * std::f64::consts::LN_2).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn cls_head_zero_weights_returns_bias() {
        let mut m = Model::new(ModelConfig::default(), 1).unwrap();
        m.param_mut("cls_head.weight").unwrap().data_mut().fill(0.0);
        m.param_mut("cls_head.bias").unwrap().data_mut().copy_from_slice(&[0.25, -1.5]);
        let p = m.predict(&[img(96, 4)]).unwrap();
        assert_eq!(p[0].logits, vec![0.25, -1.5]);
        assert_eq!(p[0].class(), 0);
    }

    #[test]
    fn argmax_ties_go_to_class_zero() {
        assert_eq!(argmax(&[0.3, 0.3]), 0);
        assert_eq!(argmax(&[0.3, 0.4]), 1);
    }

    #[test]
    fn mean_pool_escape_hatch_runs() {
        let cfg = ModelConfig { mil_aggregation: MilAggregation::MeanPool, ..ModelConfig::default() };
        let m = Model::new(cfg, 2).unwrap();
        let p = m.predict(&[img(96, 1)]).unwrap();
        assert_eq!(p[0].soft.len(), 3);
        assert!(p[0].soft.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
