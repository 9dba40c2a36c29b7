//! Stylization networks: a frozen multi-block encoder, a mirrored
//! trainable decoder, and a per-channel statistics transform between them.
//!
//! Architecture is carried by layer names: `conv{b}_{k}` for encoder
//! layers and `dec{b}_{k}` for decoder layers, executed in entry order
//! with 3x3 reflect-padded convolutions. Block transitions pool on the
//! way down and upsample on the way up; in full-resolution mode both are
//! the identity. Every conv is followed by a ReLU except the decoder's
//! final layer, which stays linear. The first layer of each encoder
//! block is a tap: its activation feeds the style statistics and losses.
//!
//! Weight files therefore fully determine the network: the same loader
//! accepts the built-in random priors or externally converted weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::{channel_stats, ChannelStats, Grid};
use crate::io::weights::NetWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Encoder,
    Decoder,
}

impl NetKind {
    fn prefix(self) -> &'static str {
        match self {
            NetKind::Encoder => "conv",
            NetKind::Decoder => "dec",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub block: usize,
    pub sub: usize,
    /// (out, in, 9) row-major 3x3 kernels.
    pub kernel: Grid,
    /// (out, 1, 1).
    pub bias: Grid,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.kernel.channels()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.height()
    }
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    pub kind: NetKind,
    pub layers: Vec<ConvLayer>,
}

fn he_uniform(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, fan_in: usize) -> Grid {
    let bound = (6.0 / fan_in as f32).sqrt();
    Grid::from_vec(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("sized data")
}

impl ConvNet {
    fn push(&mut self, rng: &mut ChaCha8Rng, block: usize, sub: usize, inc: usize, outc: usize) {
        self.layers.push(ConvLayer {
            name: format!("{}{block}_{sub}", self.kind.prefix()),
            block,
            sub,
            kernel: he_uniform(rng, outc, inc, 9, inc * 9),
            bias: Grid::zeros(outc, 1, 1),
        });
    }

    /// Randomly initialized encoder with the classic 19-layer geometry up
    /// to its fourth block: widths 64/128/256/512, block depths 2/2/4/1.
    pub fn encoder_vgg19(rng: &mut ChaCha8Rng) -> ConvNet {
        ConvNet::encoder_from_plan(rng, &[(64, 2), (128, 2), (256, 4), (512, 1)])
    }

    /// Small encoder with the same block structure for tests and toy runs.
    pub fn encoder_tiny(rng: &mut ChaCha8Rng) -> ConvNet {
        ConvNet::encoder_from_plan(rng, &[(16, 1), (32, 1), (64, 1), (128, 1)])
    }

    /// `plan` lists (width, conv count) per block.
    pub fn encoder_from_plan(rng: &mut ChaCha8Rng, plan: &[(usize, usize)]) -> ConvNet {
        let mut net = ConvNet {
            kind: NetKind::Encoder,
            layers: Vec::new(),
        };
        let mut inc = 3;
        for (b, &(width, count)) in plan.iter().enumerate() {
            for k in 1..=count {
                net.push(rng, b + 1, k, inc, width);
                inc = width;
            }
        }
        net
    }

    /// Decoder mirroring an encoder: same per-block conv counts, widths
    /// stepping back down, final layer mapping to 3 image channels.
    pub fn decoder_mirror(rng: &mut ChaCha8Rng, encoder: &ConvNet) -> Result<ConvNet> {
        if encoder.kind != NetKind::Encoder {
            return Err(Error::validation("decoder_mirror expects an encoder"));
        }
        let blocks = encoder.blocks();
        let mut widths = vec![0usize; blocks + 1];
        let mut counts = vec![0usize; blocks + 1];
        for l in &encoder.layers {
            widths[l.block] = l.out_channels();
            counts[l.block] += 1;
        }
        let mut net = ConvNet {
            kind: NetKind::Decoder,
            layers: Vec::new(),
        };
        let mut inc = widths[blocks];
        for b in (1..=blocks).rev() {
            for k in (1..=counts[b]).rev() {
                let outc = if k > 1 {
                    widths[b]
                } else if b > 1 {
                    widths[b - 1]
                } else {
                    3
                };
                net.push(rng, b, k, inc, outc);
                inc = outc;
            }
        }
        Ok(net)
    }

    pub fn blocks(&self) -> usize {
        self.layers.iter().map(|l| l.block).max().unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    /// Name, order and shape rules that make a weight list executable.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("network has no layers"));
        }
        let mut expect_in = match self.kind {
            NetKind::Encoder => 3,
            NetKind::Decoder => self.layers[0].in_channels(),
        };
        let mut prev_block = match self.kind {
            NetKind::Encoder => 1,
            NetKind::Decoder => self.blocks(),
        };
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel.width() != 9 {
                return Err(Error::validation(format!(
                    "layer {} kernel is not 3x3",
                    l.name
                )));
            }
            if l.in_channels() != expect_in {
                return Err(Error::validation(format!(
                    "layer {} expects {} input channels, previous layer provides {expect_in}",
                    l.name,
                    l.in_channels()
                )));
            }
            if l.bias.shape() != (l.out_channels(), 1, 1) {
                return Err(Error::validation(format!("layer {} bias shape", l.name)));
            }
            let block_ok = match self.kind {
                NetKind::Encoder => l.block == prev_block || l.block == prev_block + 1,
                NetKind::Decoder => l.block == prev_block || l.block + 1 == prev_block,
            };
            if !block_ok || (i == 0 && l.block != prev_block) {
                return Err(Error::validation(format!(
                    "layer {} breaks block order",
                    l.name
                )));
            }
            prev_block = l.block;
            expect_in = l.out_channels();
        }
        if self.kind == NetKind::Encoder {
            for b in 1..=self.blocks() {
                let first = self.layers.iter().find(|l| l.block == b);
                if first.map(|l| l.sub) != Some(1) {
                    return Err(Error::validation(format!(
                        "encoder block {b} does not start at sub-layer 1"
                    )));
                }
            }
        }
        if self.kind == NetKind::Decoder && self.out_channels() != 3 {
            return Err(Error::validation(format!(
                "decoder ends with {} channels, expected 3",
                self.out_channels()
            )));
        }
        Ok(())
    }

    pub fn to_weights(&self) -> NetWeights {
        let mut w = NetWeights::new();
        for l in &self.layers {
            w.push(&format!("{}.kernel", l.name), l.kernel.clone());
            w.push(&format!("{}.bias", l.name), l.bias.clone());
        }
        w
    }

    /// Rebuild the execution plan from weight entry order and names.
    pub fn from_weights(w: &NetWeights, kind: NetKind) -> Result<ConvNet> {
        let mut layers = Vec::new();
        let mut it = w.entries().peekable();
        while let Some((kname, kernel)) = it.next() {
            let name = kname
                .strip_suffix(".kernel")
                .ok_or_else(|| Error::validation(format!("expected a kernel entry, got {kname}")))?;
            let (bname, bias) = it
                .next()
                .ok_or_else(|| Error::validation(format!("{name} has no bias entry")))?;
            if bname != format!("{name}.bias") {
                return Err(Error::validation(format!(
                    "entry {bname} where {name}.bias was expected"
                )));
            }
            let rest = name.strip_prefix(kind.prefix()).ok_or_else(|| {
                Error::validation(format!(
                    "layer {name} does not start with {}",
                    kind.prefix()
                ))
            })?;
            let (block, sub) = rest
                .split_once('_')
                .and_then(|(b, s)| Some((b.parse().ok()?, s.parse().ok()?)))
                .ok_or_else(|| Error::validation(format!("cannot parse layer name {name}")))?;
            layers.push(ConvLayer {
                name: name.to_string(),
                block,
                sub,
                kernel: kernel.clone(),
                bias: bias.clone(),
            });
        }
        let net = ConvNet { kind, layers };
        net.validate()?;
        Ok(net)
    }
}

/// Tape node ids of one network's parameters, in layer order.
pub struct NetNodes {
    pub params: Vec<(NodeId, NodeId)>,
}

pub fn insert_net(tape: &mut Tape, net: &ConvNet, trainable: bool) -> NetNodes {
    let params = net
        .layers
        .iter()
        .map(|l| {
            if trainable {
                (tape.leaf(l.kernel.clone()), tape.leaf(l.bias.clone()))
            } else {
                (tape.constant(l.kernel.clone()), tape.constant(l.bias.clone()))
            }
        })
        .collect();
    NetNodes { params }
}

/// Encoder forward on the tape. Returns the tap node per block; the last
/// tap doubles as the encoder output.
pub fn run_encoder(
    tape: &mut Tape,
    net: &ConvNet,
    nodes: &NetNodes,
    input: NodeId,
    pooled: bool,
) -> Result<Vec<NodeId>> {
    let mut taps = Vec::new();
    let mut x = input;
    let mut prev_block = 1;
    for (l, &(k, b)) in net.layers.iter().zip(&nodes.params) {
        if l.block != prev_block && pooled {
            x = tape.avg_pool2(x)?;
        }
        prev_block = l.block;
        x = tape.conv2d(x, k, b)?;
        x = tape.relu(x);
        if l.sub == 1 {
            taps.push(x);
        }
    }
    Ok(taps)
}

/// Decoder forward on the tape; the final conv stays linear.
pub fn run_decoder(
    tape: &mut Tape,
    net: &ConvNet,
    nodes: &NetNodes,
    input: NodeId,
    pooled: bool,
) -> Result<NodeId> {
    let mut x = input;
    for (i, (l, &(k, b))) in net.layers.iter().zip(&nodes.params).enumerate() {
        x = tape.conv2d(x, k, b)?;
        let last = i + 1 == net.layers.len();
        if !last {
            x = tape.relu(x);
        }
        let next_block = net.layers.get(i + 1).map(|n| n.block);
        if pooled && next_block.is_some_and(|nb| nb < l.block) {
            x = tape.upsample2(x);
        }
    }
    Ok(x)
}

/// Plain (no tape) encoder forward; cheaper for frozen targets.
pub fn encode_plain(net: &ConvNet, input: &Grid, pooled: bool) -> Result<Vec<Grid>> {
    let mut taps = Vec::new();
    let mut x = input.clone();
    let mut prev_block = 1;
    for l in &net.layers {
        if l.block != prev_block && pooled {
            x = ops::avg_pool2(&x)?;
        }
        prev_block = l.block;
        x = ops::relu(&ops::conv2d(&x, &l.kernel, &l.bias)?);
        if l.sub == 1 {
            taps.push(x.clone());
        }
    }
    Ok(taps)
}

pub fn decode_plain(net: &ConvNet, input: &Grid, pooled: bool) -> Result<Grid> {
    let mut x = input.clone();
    for (i, l) in net.layers.iter().enumerate() {
        x = ops::conv2d(&x, &l.kernel, &l.bias)?;
        if i + 1 != net.layers.len() {
            x = ops::relu(&x);
        }
        let next_block = net.layers.get(i + 1).map(|n| n.block);
        if pooled && next_block.is_some_and(|nb| nb < l.block) {
            x = ops::upsample2(&x);
        }
    }
    Ok(x)
}

/// Per-channel statistics of every encoder tap of a style image.
pub fn style_code(net: &ConvNet, style: &Grid, pooled: bool) -> Result<Vec<ChannelStats>> {
    Ok(encode_plain(net, style, pooled)?
        .iter()
        .map(channel_stats)
        .collect())
}

fn stats_grids(code: &ChannelStats) -> Result<(Grid, Grid)> {
    let c = code.channels();
    Ok((
        Grid::from_vec(c, 1, 1, code.std.clone())?,
        Grid::from_vec(c, 1, 1, code.mean.clone())?,
    ))
}

/// Replace the content's per-channel statistics with the target code.
/// Per-channel affine move onto the style statistics. The input is taken
/// as already normalized; callers working from raw activations normalize
/// first, while the rasterized feature field arrives aligned by training.
pub fn adain(tape: &mut Tape, content: NodeId, code: &ChannelStats) -> Result<NodeId> {
    let (std_g, mean_g) = stats_grids(code)?;
    let scale = tape.constant(std_g);
    let shift = tape.constant(mean_g);
    tape.affine_channel(content, scale, shift)
}

pub fn adain_plain(content: &Grid, code: &ChannelStats) -> Result<Grid> {
    let (std_g, mean_g) = stats_grids(code)?;
    ops::affine_channel(content, &std_g, &mean_g)
}

/// Per-channel shift to zero mean and unit std, for callers outside the
/// tape. The view-specific stylization variant runs this on each view's
/// rasterized features before the style affine.
pub fn normalize_plain(x: &Grid) -> Grid {
    ops::normalize(x).0
}

/// Sum over taps of mean squared gaps between the tap's per-channel
/// statistics and the style code. Averaging inside each tap keeps wide
/// and narrow layers on comparable gradient scales, so the default unit
/// weight neither drowns the other losses nor vanishes.
pub fn style_stat_loss(
    tape: &mut Tape,
    taps: &[NodeId],
    code: &[ChannelStats],
) -> Result<NodeId> {
    if taps.len() != code.len() {
        return Err(Error::shape(format!(
            "{} taps against {} style code entries",
            taps.len(),
            code.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&tap, c) in taps.iter().zip(code) {
        let (std_g, mean_g) = stats_grids(c)?;
        let m = tape.channel_mean(tap);
        let s = tape.channel_std(tap);
        let tm = tape.constant(mean_g);
        let ts = tape.constant(std_g);
        let lm = tape.mse(m, tm)?;
        let ls = tape.mse(s, ts)?;
        let term = tape.add(lm, ls)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::shape("style loss over zero taps"))
}

/// Latent-to-feature head: a per-pixel dense layer with a ReLU, applied
/// after pooling the rasterized latent image down to the encoder's output
/// resolution.
#[derive(Clone, Debug)]
pub struct DenseHead {
    /// (1, out, in).
    pub weight: Grid,
    /// (out, 1, 1).
    pub bias: Grid,
}

impl DenseHead {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        // Small positive bias keeps the trailing ReLU live when the
        // incoming feature field starts at zero.
        let mut bias = Grid::zeros(out_dim, 1, 1);
        bias.data_mut().fill(0.01);
        DenseHead {
            weight: he_uniform(rng, 1, out_dim, in_dim, in_dim),
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.width()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.height()
    }

    pub fn to_weights(&self) -> NetWeights {
        let mut w = NetWeights::new();
        w.push("expand.weight", self.weight.clone());
        w.push("expand.bias", self.bias.clone());
        w
    }

    pub fn from_weights(w: &NetWeights) -> Result<Self> {
        let weight = w
            .get("expand.weight")
            .ok_or_else(|| Error::validation("missing expand.weight"))?
            .clone();
        let bias = w
            .get("expand.bias")
            .ok_or_else(|| Error::validation("missing expand.bias"))?
            .clone();
        if weight.channels() != 1 || bias.shape() != (weight.height(), 1, 1) {
            return Err(Error::validation(format!(
                "expand head shapes {:?}/{:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(DenseHead { weight, bias })
    }
}

/// Head forward on the tape: `pools` halvings (skipped in full-resolution
/// mode), then dense + ReLU.
pub fn run_head(
    tape: &mut Tape,
    head_nodes: (NodeId, NodeId),
    input: NodeId,
    pools: usize,
    pooled: bool,
) -> Result<NodeId> {
    let mut x = input;
    if pooled {
        for _ in 0..pools {
            x = tape.avg_pool2(x)?;
        }
    }
    let d = tape.dense(x, head_nodes.0, head_nodes.1)?;
    Ok(tape.relu(d))
}

pub fn expand_feature_plain(
    head: &DenseHead,
    feature: &Grid,
    pools: usize,
    pooled: bool,
) -> Result<Grid> {
    let mut x = feature.clone();
    if pooled {
        for _ in 0..pools {
            x = ops::avg_pool2(&x)?;
        }
    }
    Ok(ops::relu(&ops::dense(&x, &head.weight, &head.bias)?))
}

/// End-to-end 2D stylization: encode the content, move its deepest tap to
/// the style statistics, decode.
pub fn stylize_image(
    encoder: &ConvNet,
    decoder: &ConvNet,
    content: &Grid,
    style: &Grid,
    pooled: bool,
) -> Result<Grid> {
    let taps = encode_plain(encoder, content, pooled)?;
    let code = style_code(encoder, style, pooled)?;
    let (deep, target) = taps
        .last()
        .zip(code.last())
        .ok_or_else(|| Error::validation("encoder has no tap layers"))?;
    let (n, _) = ops::normalize(deep);
    let t = adain_plain(&n, target)?;
    decode_plain(decoder, &t, pooled)
}

pub struct StylizedView {
    /// Decoded image, unclamped.
    pub image: Grid,
    /// Feature map after the style affine, what the decoder consumed.
    pub stylized_feature: Grid,
    /// Expanded feature map before any statistics transform.
    pub raw_feature: Grid,
}

/// One view through the full 3D pipeline: rasterize the feature field,
/// expand per pixel, move onto the style statistics, decode. Everything
/// after rasterization runs at full resolution so each pixel is handled
/// independently of its neighbors and of the viewpoint.
///
/// `renormalize` re-normalizes the expanded map against its own per-view
/// statistics before the style affine. That is the ablation variant; the
/// default trusts the field's trained alignment and stays view-consistent.
pub fn stylize_view(
    gaussians: &[crate::field::FeatureGaussian],
    camera: &crate::camera::Camera,
    encoder: &ConvNet,
    decoder: &ConvNet,
    head: &DenseHead,
    style: &Grid,
    opts: &crate::raster::RasterizeOpts,
    renormalize: bool,
) -> Result<StylizedView> {
    let feature_dim = gaussians
        .first()
        .map(|g| g.feature.len())
        .ok_or_else(|| Error::validation("cannot stylize an empty scene"))?;
    if head.in_dim() != feature_dim {
        return Err(Error::shape(format!(
            "expansion head takes {} channels but the field carries {}",
            head.in_dim(),
            feature_dim
        )));
    }
    if head.out_dim() != encoder.out_channels() {
        return Err(Error::shape(format!(
            "expansion head emits {} channels but the encoder's deep layer has {}",
            head.out_dim(),
            encoder.out_channels()
        )));
    }
    let render = crate::raster::rasterize(gaussians, camera, opts)?;
    let raw = expand_feature_plain(head, &render.feature, 0, false)?;
    let code = style_code(encoder, style, false)?;
    let deep_code = code
        .last()
        .ok_or_else(|| Error::validation("encoder has no tap layers"))?;
    let aligned = if renormalize { normalize_plain(&raw) } else { raw.clone() };
    let stylized = adain_plain(&aligned, deep_code)?;
    let image = decode_plain(decoder, &stylized, false)?;
    Ok(StylizedView {
        image,
        stylized_feature: stylized,
        raw_feature: raw,
    })
}
