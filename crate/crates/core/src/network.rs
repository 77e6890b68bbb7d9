//! The full change-detection network: a weight-shared four-stage encoder
//! applied to both dates, per-stage bi-temporal merging, a skip-connection
//! decoder, and a two-layer 1x1 classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConvTransBlock, StageSpec};
use crate::nn::{Builder, Conv2d, ConvBnRelu, Ctx};
use crate::tensor::{Family, ParamStore, Result, TensorError, Var};

/// How the two temporal feature pyramids are combined per stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Merge {
    /// `|F(t1) - F(t2)|`, symmetric in the two dates.
    AbsDiff,
    /// Channel concatenation `[F(t1), F(t2)]`.
    Concat,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeights {
    /// Per-batch inverse class frequency, clamped to `[0.1, 10]`.
    InverseFrequency,
    /// Fixed `[unchanged, changed]` weights.
    Fixed([f64; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Output channels of stage 1 (stem) and stages 2-4.
    pub stage_channels: [usize; 4],
    /// Spatial stride of each stage; only 1 and 2 are supported.
    pub stage_strides: [usize; 4],
    pub stem_kernel: usize,
    /// Attention heads for stages 2-4.
    pub heads: [usize; 3],
    /// Transformer layers for stages 2-4.
    pub depths: [usize; 3],
    pub mlp_ratio: usize,
    pub fuse_reduction: usize,
    pub fuse_min_hidden: usize,
    /// Disabling this yields the local-branch-only ablation.
    pub global_branch: bool,
    pub merge: Merge,
    pub num_classes: usize,
    pub loss_weights: LossWeights,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [32, 64, 128, 256],
            stage_strides: [2, 2, 2, 2],
            stem_kernel: 7,
            heads: [2, 4, 8],
            depths: [1, 1, 1],
            mlp_ratio: 4,
            fuse_reduction: 4,
            fuse_min_hidden: 8,
            global_branch: true,
            merge: Merge::AbsDiff,
            num_classes: 2,
            loss_weights: LossWeights::InverseFrequency,
        }
    }
}

impl NetworkConfig {
    /// Reduced widths used for desk-scale experiments.
    pub fn small() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            stage_channels: [4, 8, 8, 16],
            heads: [2, 2, 4],
            mlp_ratio: 2,
            fuse_min_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return bad("stage channels must be positive".into());
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("stage strides must be 1 or 2, got {:?}", self.stage_strides));
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
            return bad("stem kernel must be odd".into());
        }
        for (i, (&c, &h)) in self.stage_channels[1..].iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return bad(format!("stage {} has {c} channels, not divisible by {h} heads", i + 2));
            }
        }
        if self.global_branch && self.depths.iter().any(|&d| d == 0) {
            return bad("transformer depth must be at least 1".into());
        }
        if self.mlp_ratio == 0 || self.fuse_reduction == 0 || self.fuse_min_hidden == 0 {
            return bad("mlp_ratio, fuse_reduction and fuse_min_hidden must be positive".into());
        }
        if self.num_classes != 2 {
            return bad("change detection is binary: num_classes must be 2".into());
        }
        if let LossWeights::Fixed(w) = self.loss_weights {
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return bad(format!("loss weights must be positive, got {w:?}"));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Inputs must be divisible by the cumulative stride.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(TensorError::Config(format!(
                "{h}x{w} input is not divisible by the cumulative stride {s}"
            )));
        }
        Ok(())
    }

    pub fn decoder_channels(&self) -> usize {
        self.stage_channels[0]
    }

    pub fn classifier_hidden(&self) -> usize {
        (self.decoder_channels() / 2).max(16)
    }

    fn merged_channels(&self, c: usize) -> usize {
        match self.merge {
            Merge::AbsDiff => c,
            Merge::Concat => 2 * c,
        }
    }
}

/// Per-stage feature maps of one temporal image, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPyramid(pub Vec<Var>);

#[derive(Clone, Debug)]
struct DecoderLevel {
    upsample: bool,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    levels: Vec<DecoderLevel>,
    final_upsample: bool,
    head: ConvBnRelu,
}

impl Decoder {
    fn build(b: &mut Builder<'_>, cfg: &NetworkConfig) -> Self {
        let ch = cfg.stage_channels;
        let mut prev = cfg.merged_channels(ch[3]);
        let mut levels = Vec::new();
        for i in (0..3).rev() {
            let mut s = b.scope(&format!("level{}", i + 1));
            let cin = prev + cfg.merged_channels(ch[i]);
            levels.push(DecoderLevel {
                upsample: cfg.stage_strides[i + 1] == 2,
                conv1: s.scope("conv1").conv_bn_relu(cin, ch[i], 3, 1, true),
                conv2: s.scope("conv2").conv_bn_relu(ch[i], ch[i], 3, 1, true),
            });
            prev = ch[i];
        }
        Self {
            levels,
            final_upsample: cfg.stage_strides[0] == 2,
            head: b.scope("head").conv_bn_relu(prev, cfg.decoder_channels(), 3, 1, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Classifier {
    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, features)?;
        let h = ctx.tape.relu(h)?;
        self.conv2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Mctnet {
    config: NetworkConfig,
    pub stem: ConvBnRelu,
    pub stages: Vec<ConvTransBlock>,
    pub decoder: Decoder,
    pub classifier: Classifier,
}

impl Mctnet {
    /// Builds the network and its freshly initialised parameters.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let ch = config.stage_channels;
        let stem = b.scope("stem").conv_bn_relu(
            config.in_channels,
            ch[0],
            config.stem_kernel,
            config.stage_strides[0],
            false,
        );
        let mut stages = Vec::with_capacity(3);
        for i in 1..4 {
            let spec = StageSpec {
                in_channels: ch[i - 1],
                out_channels: ch[i],
                stride: config.stage_strides[i],
                heads: config.heads[i - 1],
                depth: config.depths[i - 1],
                mlp_ratio: config.mlp_ratio,
                fuse_reduction: config.fuse_reduction,
                fuse_min_hidden: config.fuse_min_hidden,
                global_branch: config.global_branch,
            };
            stages.push(ConvTransBlock::build(&mut b.scope(&format!("stage{}", i + 1)), &spec)?);
        }
        let decoder = Decoder::build(&mut b.scope("decoder"), &config);
        let hidden = config.classifier_hidden();
        let mut cls = b.scope("classifier");
        let classifier = Classifier {
            conv1: cls.scope("conv1").conv(config.decoder_channels(), hidden, 1, 1, 0, true, Family::Classifier),
            conv2: cls.scope("conv2").conv(hidden, config.num_classes, 1, 1, 0, true, Family::Classifier),
        };
        let net = Self {
            config,
            stem,
            stages,
            decoder,
            classifier,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// One encoder stream. Both dates go through this with the same
    /// parameters, so the Siamese weight sharing is structural.
    pub fn encode(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<EncoderPyramid> {
        let shape = ctx.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(TensorError::Config(format!(
                "expected [N, {}, H, W] images, got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_input(shape[2], shape[3])?;
        let mut maps = Vec::with_capacity(4);
        let mut x = self.stem.forward(ctx, image)?;
        maps.push(x);
        for stage in &self.stages {
            x = stage.forward(ctx, x)?;
            maps.push(x);
        }
        Ok(EncoderPyramid(maps))
    }

    pub fn merge(&self, ctx: &mut Ctx<'_>, a: &EncoderPyramid, b: &EncoderPyramid) -> Result<Vec<Var>> {
        if a.0.len() != b.0.len() {
            return Err(TensorError::Config("pyramids have different depths".into()));
        }
        a.0.iter()
            .zip(&b.0)
            .map(|(&fa, &fb)| match self.config.merge {
                Merge::AbsDiff => {
                    let d = ctx.tape.sub(fa, fb)?;
                    ctx.tape.abs(d)
                }
                Merge::Concat => ctx.tape.concat(&[fa, fb], 1),
            })
            .collect()
    }

    /// Fuses merged maps from deepest to shallowest, then restores the
    /// input resolution.
    pub fn decode(&self, ctx: &mut Ctx<'_>, merged: &[Var]) -> Result<Var> {
        if merged.len() != 4 {
            return Err(TensorError::Config(format!("decoder needs 4 maps, got {}", merged.len())));
        }
        let mut x = merged[3];
        for (level, &skip) in self.decoder.levels.iter().zip(merged[..3].iter().rev()) {
            if level.upsample {
                x = ctx.tape.upsample_bilinear2x(x)?;
            }
            x = ctx.tape.concat(&[x, skip], 1)?;
            x = level.conv1.forward(ctx, x)?;
            x = level.conv2.forward(ctx, x)?;
        }
        if self.decoder.final_upsample {
            x = ctx.tape.upsample_bilinear2x(x)?;
        }
        self.decoder.head.forward(ctx, x)
    }

    /// `[N, 2, H, W]` class scores; softmax is left to the loss.
    pub fn classify(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<Var> {
        self.classifier.forward(ctx, features)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image_t1: Var, image_t2: Var) -> Result<Var> {
        if ctx.tape.shape(image_t1) != ctx.tape.shape(image_t2) {
            return Err(TensorError::Config("bi-temporal images differ in shape".into()));
        }
        let p1 = self.encode(ctx, image_t1)?;
        let p2 = self.encode(ctx, image_t2)?;
        let merged = self.merge(ctx, &p1, &p2)?;
        let features = self.decode(ctx, &merged)?;
        self.classify(ctx, features)
    }

    pub fn class_weights(&self, mask: &[u8]) -> [f64; 2] {
        match self.config.loss_weights {
            LossWeights::Fixed(w) => w,
            LossWeights::InverseFrequency => inverse_frequency_weights(mask),
        }
    }

    /// Weighted cross-entropy against a `{0, 1}` mask laid out `[N, H, W]`.
    pub fn loss(&self, ctx: &mut Ctx<'_>, logits: Var, mask: &[u8]) -> Result<Var> {
        let w = self.class_weights(mask);
        ctx.tape.weighted_cross_entropy(logits, mask, &w)
    }
}

/// `total / (2 * count_c)` per class, clamped to `[0.1, 10]`.
pub fn inverse_frequency_weights(mask: &[u8]) -> [f64; 2] {
    let total = mask.len() as f64;
    let changed = mask.iter().filter(|&&m| m == 1).count() as f64;
    let counts = [total - changed, changed];
    counts.map(|c| {
        if c == 0.0 {
            10.0
        } else {
            (total / (2.0 * c)).clamp(0.1, 10.0)
        }
    })
}

/// Per-pixel argmax of `[N, 2, H, W]` logits, ties resolved to "unchanged".
pub fn argmax_mask(logits: &crate::tensor::Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            out.push(u8::from(d[(b * 2 + 1) * hw + i] > d[b * 2 * hw + i]));
        }
    }
    out
}
