//! Hierarchical (four-stage) vision-transformer encoder in the SegFormer
//! layout: overlapping strided patch embedding, attention with spatially
//! reduced keys/values, and a position-wise MLP, per stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PatchGeometry, Var};
use crate::error::{Error, Result};
use crate::nn::{impl_parameterized, Ctx, LayerNorm, Linear, INIT_STD};
use crate::tensor::{seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Patch-embedding stride of each stage.
    pub strides: Vec<usize>,
    /// Key/value spatial reduction factor of each stage's attention.
    pub sr_ratios: Vec<usize>,
    pub mlp_ratio: usize,
    /// Largest stochastic-depth rate; block rates ramp linearly from 0.
    pub drop_path: f64,
}

impl EncoderConfig {
    /// Desk-scale preset used for training.
    pub fn tiny() -> Self {
        EncoderConfig {
            dims: vec![16, 32, 64, 128],
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            strides: vec![4, 2, 2, 2],
            sr_ratios: vec![4, 2, 1, 1],
            mlp_ratio: 4,
            drop_path: 0.0,
        }
    }

    /// MiT-B2 stage widths and depths.
    pub fn b2_like() -> Self {
        EncoderConfig {
            dims: vec![64, 128, 320, 512],
            depths: vec![3, 4, 6, 3],
            heads: vec![1, 2, 5, 8],
            strides: vec![4, 2, 2, 2],
            sr_ratios: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            drop_path: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "b2-like" => Ok(Self::b2_like()),
            other => Err(Error::Config(format!(
                "unknown backbone preset {other:?} (expected tiny or b2-like)"
            ))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        let lengths = [self.depths.len(), self.heads.len(), self.strides.len(), self.sr_ratios.len()];
        if n == 0 || lengths.iter().any(|&l| l != n) {
            return Err(Error::Config(format!(
                "encoder stage lists must share one non-zero length: dims {}, depths {}, heads {}, strides {}, sr_ratios {}",
                n, lengths[0], lengths[1], lengths[2], lengths[3]
            )));
        }
        let all = [&self.dims, &self.depths, &self.heads, &self.strides, &self.sr_ratios];
        if all.iter().any(|v| v.contains(&0)) || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        for (i, (&d, &h)) in self.dims.iter().zip(&self.heads).enumerate() {
            if d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {d} is not divisible by {h} heads",
                    i + 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path must lie in [0, 1), got {}", self.drop_path)));
        }
        Ok(())
    }

    /// Per-block stochastic-depth rates, stage-major.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let total = self.total_blocks();
        (0..total)
            .map(|i| {
                if total > 1 {
                    self.drop_path * i as f64 / (total - 1) as f64
                } else {
                    self.drop_path
                }
            })
            .collect()
    }
}

/// Token-major feature map: `var` has shape `[height * width, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap {
    /// Channel-major `[C x H x W]` copy of the map.
    pub fn to_chw(&self, ctx: &Ctx) -> Tensor {
        let src = ctx.tape.value(self.var);
        let tokens = self.height * self.width;
        let mut out = vec![0.0; src.len()];
        for t in 0..tokens {
            for c in 0..self.channels {
                out[c * tokens + t] = src[t * self.channels + c];
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], out).expect("valid map")
    }
}

/// Places a `[C x H x W]` image on the tape as a token-major map.
pub fn image_tokens(ctx: &mut Ctx, image: &Tensor) -> Result<FeatureMap> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::InvalidArgument(format!("image must be [C x H x W], got {s:?}"))),
    };
    let src = image.data();
    let mut tokens = vec![0.0; src.len()];
    for ch in 0..c {
        for p in 0..h * w {
            tokens[p * c + ch] = src[ch * h * w + p];
        }
    }
    let var = ctx.tape.constant(vec![h * w, c], tokens)?;
    Ok(FeatureMap { var, height: h, width: w, channels: c })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    kernel: usize,
    stride: usize,
}

impl_parameterized!(PatchEmbed { proj, norm });

impl PatchEmbed {
    /// Overlapping embedding: kernel `2s - 1`, padding `s - 1` for stride `s`.
    pub fn new(in_channels: usize, dim: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let kernel = 2 * stride - 1;
        PatchEmbed {
            proj: Linear::new(kernel * kernel * in_channels, dim, INIT_STD, rng),
            norm: LayerNorm::new(dim),
            kernel,
            stride,
        }
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: &FeatureMap) -> Result<FeatureMap> {
        if !x.height.is_multiple_of(self.stride) || !x.width.is_multiple_of(self.stride) {
            return Err(Error::InvalidArgument(format!(
                "{}x{} map is not divisible by patch stride {}",
                x.height, x.width, self.stride
            )));
        }
        let geometry = PatchGeometry {
            channels: x.channels,
            height: x.height,
            width: x.width,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.stride - 1,
        };
        let patches = ctx.tape.patches(x.var, geometry)?;
        let tokens = self.proj.forward(ctx, patches)?;
        let var = self.norm.forward(ctx, tokens)?;
        Ok(FeatureMap {
            var,
            height: geometry.out_height(),
            width: geometry.out_width(),
            channels: self.proj.output_dim(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialReduction {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl_parameterized!(SpatialReduction { proj, norm });

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<SpatialReduction>,
    heads: usize,
    sr_ratio: usize,
}

impl_parameterized!(Attention { q, k, v, proj, sr });

impl Attention {
    pub fn new(dim: usize, heads: usize, sr_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("width {dim} is not divisible by {heads} heads")));
        }
        let q = Linear::new(dim, dim, INIT_STD, rng);
        let k = Linear::new(dim, dim, INIT_STD, rng);
        let v = Linear::new(dim, dim, INIT_STD, rng);
        let sr = (sr_ratio > 1).then(|| SpatialReduction {
            proj: Linear::new(sr_ratio * sr_ratio * dim, dim, INIT_STD, rng),
            norm: LayerNorm::new(dim),
        });
        let proj = Linear::new(dim, dim, INIT_STD, rng);
        Ok(Attention { q, k, v, proj, sr, heads, sr_ratio })
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var, height: usize, width: usize) -> Result<Var> {
        let dim = self.q.input_dim();
        if ctx.tape.shape(x) != [height * width, dim] {
            return Err(Error::shape("attention", ctx.tape.shape(x), &[height * width, dim]));
        }
        let q = self.q.forward(ctx, x)?;
        let kv_source = match &self.sr {
            Some(sr) => {
                if !height.is_multiple_of(self.sr_ratio) || !width.is_multiple_of(self.sr_ratio) {
                    return Err(Error::InvalidArgument(format!(
                        "{height}x{width} map is not divisible by reduction ratio {}",
                        self.sr_ratio
                    )));
                }
                let geometry = PatchGeometry {
                    channels: dim,
                    height,
                    width,
                    kernel: self.sr_ratio,
                    stride: self.sr_ratio,
                    padding: 0,
                };
                let reduced = ctx.tape.patches(x, geometry)?;
                let reduced = sr.proj.forward(ctx, reduced)?;
                sr.norm.forward(ctx, reduced)?
            }
            None => x,
        };
        let k = self.k.forward(ctx, kv_source)?;
        let v = self.v.forward(ctx, kv_source)?;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_dim;
                (
                    ctx.tape.slice_cols(q, start, head_dim)?,
                    ctx.tape.slice_cols(k, start, head_dim)?,
                    ctx.tape.slice_cols(v, start, head_dim)?,
                )
            };
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale);
            let weights = ctx.tape.softmax(scores);
            outputs.push(ctx.tape.matmul(weights, vh)?);
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { ctx.tape.concat_cols(&outputs)? };
        self.proj.forward(ctx, merged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_parameterized!(Mlp { fc1, fc2 });

impl Mlp {
    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var) -> Result<Var> {
        let hidden = self.fc1.forward(ctx, x)?;
        let hidden = ctx.tape.gelu(hidden);
        self.fc2.forward(ctx, hidden)
    }
}

/// Residual block: `z_attn = x + DropPath(Attn(LN1 x))`,
/// `z_mlp = z_attn + DropPath(MLP(LN2 z_attn))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

impl_parameterized!(TransformerBlock { ln1, attn, ln2, mlp });

/// Intermediate values of one block; the normalized inputs are what the
/// cross-modal adapters read.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub ln1: Var,
    pub z_attn: Var,
    pub ln2: Var,
    pub z_mlp: Var,
}

impl TransformerBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        drop_path: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attn = Attention::new(dim, heads, sr_ratio, rng)?;
        let mlp = Mlp {
            fc1: Linear::new(dim, dim * mlp_ratio, INIT_STD, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, INIT_STD, rng),
        };
        Ok(TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn,
            ln2: LayerNorm::new(dim),
            mlp,
            drop_path,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.q.input_dim()
    }

    /// Returns `(LN1(x), z_attn)`.
    pub fn attn_residual<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var, height: usize, width: usize) -> Result<(Var, Var)> {
        let normed = self.ln1.forward(ctx, x)?;
        let branch = self.attn.forward(ctx, normed, height, width)?;
        let branch = ctx.drop_branch(branch, self.drop_path)?;
        Ok((normed, ctx.tape.add(x, branch)?))
    }

    /// Returns `(LN2(z_attn), z_mlp)`.
    pub fn mlp_residual<'a>(&'a self, ctx: &mut Ctx<'a>, z_attn: Var) -> Result<(Var, Var)> {
        let normed = self.ln2.forward(ctx, z_attn)?;
        let branch = self.mlp.forward(ctx, normed)?;
        let branch = ctx.drop_branch(branch, self.drop_path)?;
        Ok((normed, ctx.tape.add(z_attn, branch)?))
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var, height: usize, width: usize) -> Result<BlockOutput> {
        let (ln1, z_attn) = self.attn_residual(ctx, x, height, width)?;
        let (ln2, z_mlp) = self.mlp_residual(ctx, z_attn)?;
        Ok(BlockOutput { ln1, z_attn, ln2, z_mlp })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl_parameterized!(Stage { patch_embed, blocks, norm });

/// One modality's encoder. Parameters start frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    config: EncoderConfig,
    in_channels: usize,
}

impl_parameterized!(Encoder { stages });

impl Encoder {
    /// Random stand-in for pretrained weights: truncated normal (std 0.02)
    /// linear weights, zero biases, unit layer-norm gains.
    pub fn new(config: &EncoderConfig, in_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("modality channel count must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let rates = config.drop_path_rates();
        let mut block_index = 0;
        let mut channels = in_channels;
        let mut stages = Vec::with_capacity(config.num_stages());
        for s in 0..config.num_stages() {
            let dim = config.dims[s];
            let patch_embed = PatchEmbed::new(channels, dim, config.strides[s], &mut rng);
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for _ in 0..config.depths[s] {
                blocks.push(TransformerBlock::new(
                    dim,
                    config.heads[s],
                    config.sr_ratios[s],
                    config.mlp_ratio,
                    rates[block_index],
                    &mut rng,
                )?);
                block_index += 1;
            }
            stages.push(Stage { patch_embed, blocks, norm: LayerNorm::new(dim) });
            channels = dim;
        }
        Ok(Encoder { stages, config: config.clone(), in_channels })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        match *image.shape() {
            [c, h, w] if c == self.in_channels => {
                let stride = self.config.total_stride();
                if h % stride != 0 || w % stride != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "image {h}x{w} is not divisible by total stride {stride}"
                    )));
                }
                Ok(())
            }
            ref s => Err(Error::InvalidArgument(format!(
                "encoder expects [{} x H x W] input, got {s:?}",
                self.in_channels
            ))),
        }
    }

    /// Runs every stage; returns one map per stage.
    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, image: &Tensor) -> Result<Vec<FeatureMap>> {
        self.check_input(image)?;
        let mut x = image_tokens(ctx, image)?;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.patch_embed.forward(ctx, &x)?;
            for block in &stage.blocks {
                x.var = block.forward(ctx, x.var, x.height, x.width)?.z_mlp;
            }
            x.var = stage.norm.forward(ctx, x.var)?;
            pyramid.push(x);
        }
        Ok(pyramid)
    }
}
