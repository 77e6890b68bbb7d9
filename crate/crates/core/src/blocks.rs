//! Layer-level units of the encoder: the residual BasicBlock, the
//! convolutional token embedding and transformer encoder of the global
//! branch, selective-kernel style adaptive fusion, and the ConvTrans block
//! that combines them.

use crate::nn::{BatchNorm, Builder, Conv2d, Ctx, DepthwiseConv, LayerNorm, Linear};
use crate::tensor::{Family, Result, TensorError, Var};

/// Residual unit: `relu(bn(conv3x3(relu(bn(conv3x3(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when stride is 1 and the channel count is
/// unchanged, otherwise a 1x1 projection carrying the stride.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Shortcut,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub enum Shortcut {
    Identity,
    Projection(Conv2d),
}

impl BasicBlock {
    pub fn build(b: &mut Builder<'_>, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = b.scope("conv1").conv(cin, cout, 3, stride, 1, false, Family::Conv);
        let bn1 = b.scope("bn1").batch_norm(cout);
        let conv2 = b.scope("conv2").conv(cout, cout, 3, 1, 1, false, Family::Conv);
        let bn2 = b.scope("bn2").batch_norm(cout);
        let shortcut = if stride == 1 && cin == cout {
            Shortcut::Identity
        } else {
            Shortcut::Projection(b.scope("shortcut").conv(cin, cout, 1, stride, 0, false, Family::Conv))
        };
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let s = match &self.shortcut {
            Shortcut::Identity => x,
            Shortcut::Projection(conv) => conv.forward(ctx, x)?,
        };
        let sum = ctx.tape.add(h, s)?;
        ctx.tape.relu(sum)
    }
}

/// Strided convolution followed by flattening into channel-last tokens.
#[derive(Clone, Debug)]
pub struct TokenEmbed {
    pub conv: Conv2d,
}

impl TokenEmbed {
    pub fn build(b: &mut Builder<'_>, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: b.scope("conv").conv(cin, cout, 3, stride, 1, true, Family::Conv),
        }
    }

    /// Returns `[N, H_i * W_i, C_i]` tokens and the token grid extent.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, (usize, usize))> {
        let &[_, _, h, w] = ctx.tape.shape(x) else {
            return Err(TensorError::Config("token embedding expects NCHW input".into()));
        };
        let s = self.conv.stride;
        if h % s != 0 || w % s != 0 {
            return Err(TensorError::Config(format!(
                "{h}x{w} feature map is not divisible by token stride {s}"
            )));
        }
        let y = self.conv.forward(ctx, x)?;
        let grid = (ctx.tape.shape(y)[2], ctx.tape.shape(y)[3]);
        Ok((ctx.tape.flatten_tokens(y)?, grid))
    }
}

/// Multi-head self-attention with bias-free Q/K/V projections and a biased
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn build(b: &mut Builder<'_>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(TensorError::Config(format!(
                "{channels} channels are not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: b.scope("q").linear(channels, channels, false, Family::Linear),
            wk: b.scope("k").linear(channels, channels, false, Family::Linear),
            wv: b.scope("v").linear(channels, channels, false, Family::Linear),
            wo: b.scope("out").linear(channels, channels, true, Family::Linear),
            heads,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: Var) -> Result<Var> {
        Ok(self.forward_with_attention(ctx, tokens)?.0)
    }

    /// Also returns the variable holding the per-head attention matrices
    /// (see [`crate::tensor::Tape::attention_probs`]).
    pub fn forward_with_attention(&self, ctx: &mut Ctx<'_>, tokens: Var) -> Result<(Var, Var)> {
        let q = self.wq.forward(ctx, tokens)?;
        let k = self.wk.forward(ctx, tokens)?;
        let v = self.wv.forward(ctx, tokens)?;
        let heads = ctx.tape.multi_head_attention(q, k, v, self.heads)?;
        Ok((self.wo.forward(ctx, heads)?, heads))
    }
}

/// Expansion, depthwise positional convolution on the token grid, GELU,
/// compression.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub expand: Linear,
    pub depthwise: DepthwiseConv,
    pub compress: Linear,
}

impl Mlp {
    pub fn build(b: &mut Builder<'_>, channels: usize, ratio: usize) -> Self {
        let hidden = channels * ratio;
        Self {
            expand: b.scope("expand").linear(channels, hidden, true, Family::Linear),
            depthwise: b.scope("dw").depthwise(hidden, 3, 1, 1),
            compress: b.scope("compress").linear(hidden, channels, true, Family::Linear),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let y = self.expand.forward(ctx, tokens)?;
        let map = ctx.tape.unflatten_tokens(y, grid.0, grid.1)?;
        let map = self.depthwise.forward(ctx, map)?;
        let y = ctx.tape.flatten_tokens(map)?;
        let y = ctx.tape.gelu(y)?;
        self.compress.forward(ctx, y)
    }
}

/// Pre-norm encoder layer: `t + msa(ln(t))`, then `t + mlp(ln(t))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn build(b: &mut Builder<'_>, channels: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: b.scope("norm1").layer_norm(channels),
            attention: MultiHeadAttention::build(&mut b.scope("attn"), channels, heads)?,
            norm2: b.scope("norm2").layer_norm(channels),
            mlp: Mlp::build(&mut b.scope("mlp"), channels, mlp_ratio),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let n = self.norm1.forward(ctx, tokens)?;
        let a = self.attention.forward(ctx, n)?;
        let t = ctx.tape.add(tokens, a)?;
        let n = self.norm2.forward(ctx, t)?;
        let m = self.mlp.forward(ctx, n, grid)?;
        ctx.tape.add(t, m)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn build(b: &mut Builder<'_>, channels: usize, heads: usize, depth: usize, mlp_ratio: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::build(&mut b.scope(&format!("layer{i}")), channels, heads, mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Runs every layer and reshapes the tokens back to `[N, C, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let l = ctx.tape.shape(tokens)[1];
        if l != grid.0 * grid.1 {
            return Err(TensorError::Config(format!(
                "{l} tokens do not match a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let mut t = tokens;
        for layer in &self.layers {
            t = layer.forward(ctx, t, grid)?;
        }
        ctx.tape.unflatten_tokens(t, grid.0, grid.1)
    }
}

/// Global branch: token embedding followed by the transformer encoder.
#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub embed: TokenEmbed,
    pub encoder: TransformerEncoder,
}

impl GlobalBranch {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (tokens, grid) = self.embed.forward(ctx, x)?;
        self.encoder.forward(ctx, tokens, grid)
    }
}

/// Two-branch selective fusion with per-channel softmax gates.
#[derive(Clone, Debug)]
pub struct AdaptiveFusion {
    pub compact: Linear,
    pub compact_bn: BatchNorm,
    pub fc_local: Linear,
    pub fc_global: Linear,
}

/// Fused map plus the `[N, C]` gates applied to each branch.
#[derive(Copy, Clone, Debug)]
pub struct Fused {
    pub output: Var,
    pub w_local: Var,
    pub w_global: Var,
}

impl AdaptiveFusion {
    /// The compact layer has `max(channels / reduction, min_hidden)` units.
    pub fn build(b: &mut Builder<'_>, channels: usize, reduction: usize, min_hidden: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(min_hidden);
        Self {
            compact: b.scope("compact").linear(channels, hidden, false, Family::Fusion),
            compact_bn: b.scope("compact_bn").batch_norm(hidden),
            fc_local: b.scope("fc_local").linear(hidden, channels, true, Family::Fusion),
            fc_global: b.scope("fc_global").linear(hidden, channels, true, Family::Fusion),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, local: Var, global: Var) -> Result<Var> {
        Ok(self.forward_gates(ctx, local, global)?.output)
    }

    pub fn forward_gates(&self, ctx: &mut Ctx<'_>, local: Var, global: Var) -> Result<Fused> {
        if ctx.tape.shape(local) != ctx.tape.shape(global) {
            return Err(TensorError::Shape {
                op: "adaptive_fuse",
                detail: format!("{:?} vs {:?}", ctx.tape.shape(local), ctx.tape.shape(global)),
            });
        }
        let (n, c) = (ctx.tape.shape(local)[0], ctx.tape.shape(local)[1]);
        let u = ctx.tape.add(local, global)?;
        let s = ctx.tape.global_avg_pool(u)?;
        let z = self.compact.forward(ctx, s)?;
        let z = self.compact_bn.forward(ctx, z)?;
        let z = ctx.tape.relu(z)?;
        let a = self.fc_local.forward(ctx, z)?;
        let g = self.fc_global.forward(ctx, z)?;
        let stacked = ctx.tape.concat(&[a, g], 1)?;
        let stacked = ctx.tape.reshape(stacked, [n, 2, c])?;
        let gates = ctx.tape.softmax(stacked, 1)?;
        let wl = ctx.tape.narrow(gates, 1, 0, 1)?;
        let wl = ctx.tape.reshape(wl, [n, c])?;
        let wg = ctx.tape.narrow(gates, 1, 1, 1)?;
        let wg = ctx.tape.reshape(wg, [n, c])?;
        let fl = ctx.tape.scale_channels(local, wl)?;
        let fg = ctx.tape.scale_channels(global, wg)?;
        Ok(Fused {
            output: ctx.tape.add(fl, fg)?,
            w_local: wl,
            w_global: wg,
        })
    }
}

/// Hyperparameters of one encoder stage built from a ConvTrans block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub fuse_reduction: usize,
    pub fuse_min_hidden: usize,
    /// `false` builds the pure-CNN ablation (local branch only).
    pub global_branch: bool,
}

/// Dual-branch encoder stage: two BasicBlocks in parallel with a global
/// transformer branch, both fed the previous stage's output, merged by
/// adaptive fusion.
#[derive(Clone, Debug)]
pub struct ConvTransBlock {
    pub local: [BasicBlock; 2],
    pub global: Option<(GlobalBranch, AdaptiveFusion)>,
}

impl ConvTransBlock {
    pub fn build(b: &mut Builder<'_>, spec: &StageSpec) -> Result<Self> {
        let local = [
            BasicBlock::build(&mut b.scope("local.block1"), spec.in_channels, spec.out_channels, spec.stride),
            BasicBlock::build(&mut b.scope("local.block2"), spec.out_channels, spec.out_channels, 1),
        ];
        let global = if spec.global_branch {
            let embed = TokenEmbed::build(&mut b.scope("global.embed"), spec.in_channels, spec.out_channels, spec.stride);
            let encoder = TransformerEncoder::build(
                &mut b.scope("global.encoder"),
                spec.out_channels,
                spec.heads,
                spec.depth,
                spec.mlp_ratio,
            )?;
            if embed.conv.stride != local[0].stride {
                return Err(TensorError::Config("branch strides disagree".into()));
            }
            let fusion = AdaptiveFusion::build(
                &mut b.scope("fusion"),
                spec.out_channels,
                spec.fuse_reduction,
                spec.fuse_min_hidden,
            );
            Some((GlobalBranch { embed, encoder }, fusion))
        } else {
            None
        };
        Ok(Self { local, global })
    }

    pub fn forward_local(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.local[0].forward(ctx, x)?;
        self.local[1].forward(ctx, h)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let local = self.forward_local(ctx, x)?;
        match &self.global {
            None => Ok(local),
            Some((branch, fusion)) => {
                let global = branch.forward(ctx, x)?;
                fusion.forward(ctx, local, global)
            }
        }
    }
}
