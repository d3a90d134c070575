//! Encoder and decoder construction: the base-station encoder, its symmetric
//! mirror used for stage-1 training, and the four heterogeneous user decoder
//! families (attention, convolution, residual, VGG-style).
//!
//! All models share the same latent geometry: two stride-2 stages give a
//! total spatial downsampling of 4, so a compression rate of `num/den`
//! needs `c_latent = 3 * 16 * num / den` latent channels (3 for rate 1/16).
//! Stride-2 layers use 5x5 kernels and stride-1 layers 3x3, except the
//! VGG family which keeps its customary 3x3 throughout.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers;
use crate::tape::{tconv_out_dim, Tape, Var};
use crate::tensor::{fnv1a, stream, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const TOTAL_STRIDE: usize = 4;
const K5: usize = 5;
const K3: usize = 3;

/// The model families. `Encoder` is the transmitter; the rest are decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Encoder,
    Mirror,
    Attention,
    Conv,
    ResNet,
    Vgg,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Encoder => "encoder",
            ModelKind::Mirror => "mirror",
            ModelKind::Attention => "attention",
            ModelKind::Conv => "conv",
            ModelKind::ResNet => "resnet",
            ModelKind::Vgg => "vgg",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "encoder" => Some(ModelKind::Encoder),
            "mirror" => Some(ModelKind::Mirror),
            "attention" => Some(ModelKind::Attention),
            "conv" => Some(ModelKind::Conv),
            "resnet" => Some(ModelKind::ResNet),
            "vgg" => Some(ModelKind::Vgg),
            _ => None,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ModelKind::Encoder => 0,
            ModelKind::Mirror => 1,
            ModelKind::Attention => 2,
            ModelKind::Conv => 3,
            ModelKind::ResNet => 4,
            ModelKind::Vgg => 5,
        }
    }

    fn from_tag(t: u8) -> Option<ModelKind> {
        [
            ModelKind::Encoder,
            ModelKind::Mirror,
            ModelKind::Attention,
            ModelKind::Conv,
            ModelKind::ResNet,
            ModelKind::Vgg,
        ]
        .into_iter()
        .find(|k| k.tag() == t)
    }

    /// Stable slot used to derive per-decoder rng streams, independent of
    /// training order.
    pub fn slot(&self) -> u64 {
        self.tag() as u64
    }

    /// The canonical user-decoder roster in its default training order.
    pub fn user_roster() -> [ModelKind; 4] {
        [
            ModelKind::Attention,
            ModelKind::Conv,
            ModelKind::ResNet,
            ModelKind::Vgg,
        ]
    }
}

/// Shared geometry/width knobs for one encoder-decoder family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub rate_num: u32,
    pub rate_den: u32,
    pub widths: [usize; 2],
    pub bottleneck: usize,
    pub depth_scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 32,
            image_w: 32,
            rate_num: 1,
            rate_den: 16,
            widths: [16, 32],
            bottleneck: 2,
            depth_scale: 1,
        }
    }
}

impl ModelConfig {
    /// Latent channel count for the configured rate, or the feasible rates.
    pub fn latent_channels(&self) -> Result<usize> {
        let denom_units = IMAGE_CHANNELS as u32 * (TOTAL_STRIDE * TOTAL_STRIDE) as u32;
        let total = denom_units * self.rate_num;
        if self.rate_den == 0 || self.rate_num == 0 || total % self.rate_den != 0 {
            let feasible: Vec<String> = (1..=8u32)
                .map(|c| {
                    let g = gcd(c, denom_units);
                    format!("{}/{}", c / g, denom_units / g)
                })
                .collect();
            return Err(Error::UnachievableRate {
                num: self.rate_num,
                den: self.rate_den,
                feasible: feasible.join(", "),
            });
        }
        Ok((total / self.rate_den) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h % TOTAL_STRIDE != 0 || self.image_w % TOTAL_STRIDE != 0 {
            return Err(Error::InvalidShape(format!(
                "image {}x{} not a multiple of the total stride {TOTAL_STRIDE}",
                self.image_h, self.image_w
            )));
        }
        if self.image_h < 2 * TOTAL_STRIDE || self.image_w < 2 * TOTAL_STRIDE {
            return Err(Error::InvalidShape(format!(
                "image {}x{} too small",
                self.image_h, self.image_w
            )));
        }
        if self.widths[0] < 2 || self.widths[1] < 2 {
            return Err(Error::InvalidShape("widths must be at least 2".into()));
        }
        if self.depth_scale < 1 {
            return Err(Error::InvalidShape("depth_scale must be >= 1".into()));
        }
        self.latent_channels()?;
        Ok(())
    }

    pub fn latent_spatial(&self) -> (usize, usize) {
        (self.image_h / TOTAL_STRIDE, self.image_w / TOTAL_STRIDE)
    }

    /// Transmitted latent length `k`.
    pub fn latent_len(&self) -> Result<usize> {
        let (lh, lw) = self.latent_spatial();
        Ok(self.latent_channels()? * lh * lw)
    }

    pub fn image_len(&self) -> usize {
        IMAGE_CHANNELS * self.image_h * self.image_w
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Named, ordered parameter collection for one network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub seed: u64,
    pub frozen: bool,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// FNV-1a over names, shapes and little-endian data bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            for d in &t.shape {
                bytes.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    /// Put every parameter on the tape. Frozen models bind without gradient
    /// tracking, so backward can never reach them.
    pub fn bind(&self, t: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(_, tensor)| {
                if self.frozen {
                    let mut detached = tensor.clone();
                    detached.requires_grad = false;
                    t.leaf(&detached)
                } else {
                    t.leaf(tensor)
                }
            })
            .collect();
        Bound {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    /// Bind with one tensor replaced by an existing tape variable; used to
    /// probe a single parameter (gradient checks) without copying the model.
    pub fn bind_substituting(&self, t: &mut Tape, index: usize, var: Var) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, (_, tensor))| if i == index { var } else { t.leaf(tensor) })
            .collect();
        Bound {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }
}

/// Tape bindings for one model's parameters, looked up by name.
pub struct Bound {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))
    }
}

// ---- builders ---------------------------------------------------------------

fn push(params: &mut Vec<(String, Tensor)>, mut group: Vec<(String, Tensor)>) {
    params.append(&mut group);
}

/// Base-station encoder: two stride-2 conv+GDN+PReLU stages, channel
/// attention fused with the SNR, and a final 3x3 projection to the latent
/// channels.
pub fn build_encoder(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let c_lat = config.latent_channels()?;
    let [w1, w2] = config.widths;
    let mut rng = stream(seed, &["init", "encoder"], &[]);
    let mut p = Vec::new();
    push(&mut p, layers::init_conv("conv1", w1, IMAGE_CHANNELS, K5, K5, &mut rng));
    push(&mut p, layers::init_gdn("gdn1", w1));
    push(&mut p, layers::init_prelu("act1", w1));
    push(&mut p, layers::init_conv("conv2", w2, w1, K5, K5, &mut rng));
    push(&mut p, layers::init_gdn("gdn2", w2));
    push(&mut p, layers::init_prelu("act2", w2));
    push(&mut p, layers::init_attention("attn", w2, config.bottleneck, &mut rng));
    push(&mut p, layers::init_conv("head", c_lat, w2, K3, K3, &mut rng));
    Ok(ModelParams {
        kind: ModelKind::Encoder,
        config: *config,
        seed,
        frozen: false,
        tensors: p,
    })
}

/// Symmetric decoder: the encoder's layer list reversed, convolutions
/// swapped for transpose convolutions and GDN for IGDN, with a final
/// sigmoid. Fresh parameters, not weight-tied.
pub fn build_symmetric_decoder(encoder: &ModelParams, seed: u64) -> Result<ModelParams> {
    if encoder.kind != ModelKind::Encoder {
        return Err(Error::Incompatible(format!(
            "symmetric decoder mirrors an encoder, got {}",
            encoder.kind.as_str()
        )));
    }
    build_decoder(ModelKind::Mirror, &encoder.config, seed)
}

/// Construct a decoder of the given family against the shared geometry.
pub fn build_decoder(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let c_lat = config.latent_channels()?;
    let [w1, w2] = config.widths;
    let ds = config.depth_scale;
    let mut rng = stream(seed, &["init", kind.as_str()], &[]);
    let mut p = Vec::new();
    match kind {
        ModelKind::Encoder => {
            return Err(Error::Incompatible("encoder is not a decoder".into()))
        }
        ModelKind::Mirror => {
            push(&mut p, layers::init_tconv("head", c_lat, w2, K3, K3, &mut rng));
            push(&mut p, layers::init_attention("attn", w2, config.bottleneck, &mut rng));
            push(&mut p, layers::init_prelu("act2", w2));
            push(&mut p, layers::init_gdn("igdn2", w2));
            for d in 0..ds - 1 {
                push(&mut p, layers::init_tconv(&format!("mid{d}"), w2, w2, K3, K3, &mut rng));
                push(&mut p, layers::init_prelu(&format!("midact{d}"), w2));
                push(&mut p, layers::init_gdn(&format!("midgdn{d}"), w2));
            }
            push(&mut p, layers::init_tconv("up1", w2, w1, K5, K5, &mut rng));
            push(&mut p, layers::init_prelu("act1", w1));
            push(&mut p, layers::init_gdn("igdn1", w1));
            push(&mut p, layers::init_tconv("up2", w1, IMAGE_CHANNELS, K5, K5, &mut rng));
        }
        ModelKind::Attention => {
            push(&mut p, layers::init_tconv("head", c_lat, w2, K3, K3, &mut rng));
            push(&mut p, layers::init_attention("attn1", w2, config.bottleneck, &mut rng));
            push(&mut p, layers::init_prelu("act2", w2));
            push(&mut p, layers::init_gdn("igdn2", w2));
            for d in 0..ds - 1 {
                push(&mut p, layers::init_tconv(&format!("mid{d}"), w2, w2, K3, K3, &mut rng));
                push(&mut p, layers::init_prelu(&format!("midact{d}"), w2));
                push(&mut p, layers::init_gdn(&format!("midgdn{d}"), w2));
            }
            push(&mut p, layers::init_tconv("up1", w2, w1, K5, K5, &mut rng));
            push(&mut p, layers::init_attention("attn2", w1, config.bottleneck, &mut rng));
            push(&mut p, layers::init_prelu("act1", w1));
            push(&mut p, layers::init_gdn("igdn1", w1));
            push(&mut p, layers::init_tconv("up2", w1, IMAGE_CHANNELS, K5, K5, &mut rng));
        }
        ModelKind::Conv => {
            push(&mut p, layers::init_tconv("up1", c_lat, w2, K5, K5, &mut rng));
            push(&mut p, layers::init_gdn("gdn1", w2));
            push(&mut p, layers::init_prelu("act1", w2));
            push(&mut p, layers::init_snr_fuse("fuse1", w2, &mut rng));
            for d in 0..ds - 1 {
                push(&mut p, layers::init_tconv(&format!("mid{d}"), w2, w2, K3, K3, &mut rng));
                push(&mut p, layers::init_gdn(&format!("midgdn{d}"), w2));
                push(&mut p, layers::init_prelu(&format!("midact{d}"), w2));
                push(&mut p, layers::init_snr_fuse(&format!("midfuse{d}"), w2, &mut rng));
            }
            push(&mut p, layers::init_tconv("up2", w2, w1, K5, K5, &mut rng));
            push(&mut p, layers::init_gdn("gdn2", w1));
            push(&mut p, layers::init_prelu("act2", w1));
            push(&mut p, layers::init_snr_fuse("fuse2", w1, &mut rng));
            push(&mut p, layers::init_tconv("head", w1, IMAGE_CHANNELS, K3, K3, &mut rng));
        }
        ModelKind::ResNet => {
            push(&mut p, layers::init_tconv("head", c_lat, w1, K5, K5, &mut rng));
            let blocks = 5 * ds;
            for b in 0..blocks {
                push(&mut p, layers::init_tconv(&format!("block{b}"), w1, w1, K3, K3, &mut rng));
                push(&mut p, layers::init_gdn(&format!("blockgdn{b}"), w1));
                if b + 1 < blocks {
                    push(&mut p, layers::init_prelu(&format!("blockact{b}"), w1));
                    push(&mut p, layers::init_snr_fuse(&format!("blockfuse{b}"), w1, &mut rng));
                }
            }
            push(&mut p, layers::init_tconv("tail", w1, IMAGE_CHANNELS, K5, K5, &mut rng));
        }
        ModelKind::Vgg => {
            push(&mut p, layers::init_tconv("g1a", c_lat, w2, K3, K3, &mut rng));
            push(&mut p, layers::init_prelu("g1a", w2));
            push(&mut p, layers::init_tconv("g1b", w2, w2, K3, K3, &mut rng));
            push(&mut p, layers::init_prelu("g1b", w2));
            for d in 0..ds - 1 {
                push(&mut p, layers::init_tconv(&format!("mid{d}a"), w2, w2, K3, K3, &mut rng));
                push(&mut p, layers::init_prelu(&format!("mid{d}a"), w2));
                push(&mut p, layers::init_tconv(&format!("mid{d}b"), w2, w2, K3, K3, &mut rng));
                push(&mut p, layers::init_prelu(&format!("mid{d}b"), w2));
            }
            push(&mut p, layers::init_tconv("g2a", w2, w1, K3, K3, &mut rng));
            push(&mut p, layers::init_prelu("g2a", w1));
            push(&mut p, layers::init_tconv("g2b", w1, IMAGE_CHANNELS, K3, K3, &mut rng));
            push(&mut p, layers::init_snr_fuse("fuse", IMAGE_CHANNELS, &mut rng));
        }
    }
    Ok(ModelParams {
        kind,
        config: *config,
        seed,
        frozen: false,
        tensors: p,
    })
}

// ---- forward -----------------------------------------------------------------

fn conv(t: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let k = b.var(&format!("{name}.kernel"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    t.conv2d(x, k, bias, stride, pad)
}

/// Transpose conv with output padding chosen to hit an exact x2 (stride 2)
/// or same-size (stride 1) geometry.
fn tconv(t: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize, k: usize) -> Result<Var> {
    let pad = k / 2;
    let kernel = b.var(&format!("{name}.kernel"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    let h = t.shape(x)[2];
    let target = h * stride;
    let out_pad = target - tconv_out_dim(h, k, stride, pad, 0);
    t.tconv2d(x, kernel, bias, stride, pad, out_pad)
}

fn gdn_named(t: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let beta = b.var(&format!("{name}.beta"))?;
    let gamma = b.var(&format!("{name}.gamma"))?;
    layers::gdn(t, x, beta, gamma)
}

fn igdn_named(t: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let beta = b.var(&format!("{name}.beta"))?;
    let gamma = b.var(&format!("{name}.gamma"))?;
    layers::igdn(t, x, beta, gamma)
}

fn prelu_named(t: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let slope = b.var(&format!("{name}.slope"))?;
    t.prelu(x, slope)
}

fn fuse_named(t: &mut Tape, b: &Bound, name: &str, x: Var, snr_db: f64) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    layers::snr_fuse_dense(t, x, snr_db, w, bias)
}

fn attention_named(t: &mut Tape, b: &Bound, name: &str, x: Var, snr_db: f64) -> Result<Var> {
    layers::channel_attention(
        t,
        x,
        snr_db,
        b.var(&format!("{name}.fc1.weight"))?,
        b.var(&format!("{name}.fc1.bias"))?,
        b.var(&format!("{name}.fc1.slope"))?,
        b.var(&format!("{name}.fc2.weight"))?,
        b.var(&format!("{name}.fc2.bias"))?,
    )
}

/// Encoder forward over the tape: image `[N,3,H,W]` to latent `[N,k]`.
pub fn encoder_forward(
    t: &mut Tape,
    enc: &ModelParams,
    b: &Bound,
    x: Var,
    snr_db: f64,
) -> Result<Var> {
    let cfg = &enc.config;
    let shape = t.shape(x).to_vec();
    if shape.len() != 4
        || shape[1] != IMAGE_CHANNELS
        || shape[2] != cfg.image_h
        || shape[3] != cfg.image_w
    {
        return Err(Error::InvalidShape(format!(
            "encoder wants [N,3,{},{}], got {:?}",
            cfg.image_h, cfg.image_w, shape
        )));
    }
    let n = shape[0];
    let mut v = conv(t, b, "conv1", x, 2, K5 / 2)?;
    v = gdn_named(t, b, "gdn1", v)?;
    v = prelu_named(t, b, "act1", v)?;
    v = conv(t, b, "conv2", v, 2, K5 / 2)?;
    v = gdn_named(t, b, "gdn2", v)?;
    v = prelu_named(t, b, "act2", v)?;
    v = attention_named(t, b, "attn", v, snr_db)?;
    v = conv(t, b, "head", v, 1, K3 / 2)?;
    let k = cfg.latent_len()?;
    t.reshape(v, vec![n, k])
}

/// Decoder forward over the tape: latent `[N,k]` to image `[N,3,H,W]`.
pub fn decoder_forward(
    t: &mut Tape,
    dec: &ModelParams,
    b: &Bound,
    y: Var,
    snr_db: f64,
) -> Result<Var> {
    let cfg = &dec.config;
    let k = cfg.latent_len()?;
    let shape = t.shape(y).to_vec();
    if shape.len() != 2 || shape[1] != k {
        return Err(Error::InvalidShape(format!(
            "decoder wants [N,{k}], got {shape:?}"
        )));
    }
    let n = shape[0];
    let c_lat = cfg.latent_channels()?;
    let (lh, lw) = cfg.latent_spatial();
    let ds = cfg.depth_scale;
    let mut v = t.reshape(y, vec![n, c_lat, lh, lw])?;

    match dec.kind {
        ModelKind::Encoder => {
            return Err(Error::Incompatible("encoder cannot decode".into()))
        }
        ModelKind::Mirror => {
            v = tconv(t, b, "head", v, 1, K3)?;
            v = attention_named(t, b, "attn", v, snr_db)?;
            v = prelu_named(t, b, "act2", v)?;
            v = igdn_named(t, b, "igdn2", v)?;
            for d in 0..ds - 1 {
                v = tconv(t, b, &format!("mid{d}"), v, 1, K3)?;
                v = prelu_named(t, b, &format!("midact{d}"), v)?;
                v = igdn_named(t, b, &format!("midgdn{d}"), v)?;
            }
            v = tconv(t, b, "up1", v, 2, K5)?;
            v = prelu_named(t, b, "act1", v)?;
            v = igdn_named(t, b, "igdn1", v)?;
            v = tconv(t, b, "up2", v, 2, K5)?;
            v = t.sigmoid(v);
        }
        ModelKind::Attention => {
            v = tconv(t, b, "head", v, 1, K3)?;
            v = attention_named(t, b, "attn1", v, snr_db)?;
            v = prelu_named(t, b, "act2", v)?;
            v = igdn_named(t, b, "igdn2", v)?;
            for d in 0..ds - 1 {
                v = tconv(t, b, &format!("mid{d}"), v, 1, K3)?;
                v = prelu_named(t, b, &format!("midact{d}"), v)?;
                v = igdn_named(t, b, &format!("midgdn{d}"), v)?;
            }
            v = tconv(t, b, "up1", v, 2, K5)?;
            v = attention_named(t, b, "attn2", v, snr_db)?;
            v = prelu_named(t, b, "act1", v)?;
            v = igdn_named(t, b, "igdn1", v)?;
            v = tconv(t, b, "up2", v, 2, K5)?;
            v = t.sigmoid(v);
        }
        ModelKind::Conv => {
            v = tconv(t, b, "up1", v, 2, K5)?;
            v = gdn_named(t, b, "gdn1", v)?;
            v = prelu_named(t, b, "act1", v)?;
            v = fuse_named(t, b, "fuse1", v, snr_db)?;
            for d in 0..ds - 1 {
                v = tconv(t, b, &format!("mid{d}"), v, 1, K3)?;
                v = gdn_named(t, b, &format!("midgdn{d}"), v)?;
                v = prelu_named(t, b, &format!("midact{d}"), v)?;
                v = fuse_named(t, b, &format!("midfuse{d}"), v, snr_db)?;
            }
            v = tconv(t, b, "up2", v, 2, K5)?;
            v = gdn_named(t, b, "gdn2", v)?;
            v = prelu_named(t, b, "act2", v)?;
            v = fuse_named(t, b, "fuse2", v, snr_db)?;
            v = tconv(t, b, "head", v, 1, K3)?;
            v = t.sigmoid(v);
        }
        ModelKind::ResNet => {
            v = tconv(t, b, "head", v, 2, K5)?;
            let blocks = 5 * ds;
            for blk in 0..blocks {
                let mut r = tconv(t, b, &format!("block{blk}"), v, 1, K3)?;
                r = gdn_named(t, b, &format!("blockgdn{blk}"), r)?;
                if blk + 1 < blocks {
                    r = prelu_named(t, b, &format!("blockact{blk}"), r)?;
                    r = fuse_named(t, b, &format!("blockfuse{blk}"), r, snr_db)?;
                } else {
                    // last block: sigmoid instead of PReLU, no SNR fusion
                    r = t.sigmoid(r);
                }
                v = t.add(v, r)?;
            }
            v = tconv(t, b, "tail", v, 2, K5)?;
            v = t.sigmoid(v);
        }
        ModelKind::Vgg => {
            v = tconv(t, b, "g1a", v, 2, K3)?;
            v = prelu_named(t, b, "g1a", v)?;
            v = tconv(t, b, "g1b", v, 2, K3)?;
            v = prelu_named(t, b, "g1b", v)?;
            v = t.avg_pool(v, 2)?;
            for d in 0..ds - 1 {
                v = tconv(t, b, &format!("mid{d}a"), v, 1, K3)?;
                v = prelu_named(t, b, &format!("mid{d}a"), v)?;
                v = tconv(t, b, &format!("mid{d}b"), v, 1, K3)?;
                v = prelu_named(t, b, &format!("mid{d}b"), v)?;
            }
            v = tconv(t, b, "g2a", v, 2, K3)?;
            v = prelu_named(t, b, "g2a", v)?;
            v = tconv(t, b, "g2b", v, 2, K3)?;
            v = t.avg_pool(v, 2)?;
            v = fuse_named(t, b, "fuse", v, snr_db)?;
            v = t.sigmoid(v);
        }
    }
    let os = t.shape(v);
    debug_assert_eq!(os, &[n, IMAGE_CHANNELS, cfg.image_h, cfg.image_w]);
    Ok(v)
}

fn promote_image(enc: &ModelParams, image: &Tensor) -> Result<(Tensor, bool)> {
    let cfg = &enc.config;
    let want3 = vec![IMAGE_CHANNELS, cfg.image_h, cfg.image_w];
    if image.shape == want3 {
        let mut t = image.clone();
        t.shape = vec![1, IMAGE_CHANNELS, cfg.image_h, cfg.image_w];
        Ok((t, true))
    } else if image.shape.len() == 4
        && image.shape[1..] == want3[..]
    {
        Ok((image.clone(), false))
    } else {
        Err(Error::InvalidShape(format!(
            "expected image shape {:?} (or batched), got {:?}",
            want3, image.shape
        )))
    }
}

/// Encode an image (or batch) into the transmitted latent.
pub fn encode(enc: &ModelParams, image: &Tensor, snr_db: f64) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidShape("snr must be finite".into()));
    }
    if image.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidShape("image pixels must lie in [0,1]".into()));
    }
    let (batch, single) = promote_image(enc, image)?;
    let mut t = Tape::new();
    let b = enc.bind(&mut t);
    let x = t.leaf(&batch);
    let latent = encoder_forward(&mut t, enc, &b, x, snr_db)?;
    let mut out = Tensor::new(t.shape(latent).to_vec(), t.data(latent).to_vec())?;
    if single {
        out.shape = vec![out.numel()];
    }
    Ok(out)
}

/// Decode a received latent (or batch of rows) back into image space.
pub fn decode(dec: &ModelParams, latent: &Tensor, snr_db: f64) -> Result<Tensor> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidShape("snr must be finite".into()));
    }
    let k = dec.config.latent_len()?;
    let (rows, single) = if latent.shape.len() == 1 {
        if latent.shape[0] != k {
            return Err(Error::InvalidShape(format!(
                "expected latent length {k}, got {}",
                latent.shape[0]
            )));
        }
        (1, true)
    } else if latent.shape.len() == 2 && latent.shape[1] == k {
        (latent.shape[0], false)
    } else {
        return Err(Error::InvalidShape(format!(
            "expected latent shape [{k}] or [N,{k}], got {:?}",
            latent.shape
        )));
    };
    let mut t = Tape::new();
    let b = dec.bind(&mut t);
    let y = t.constant(latent.data.clone(), vec![rows, k]);
    let img = decoder_forward(&mut t, dec, &b, y, snr_db)?;
    let mut out = Tensor::new(t.shape(img).to_vec(), t.data(img).to_vec())?;
    if single {
        out.shape = out.shape[1..].to_vec();
    }
    Ok(out)
}

// ---- checkpoints ---------------------------------------------------------------

const MAGIC: &[u8; 8] = b"DJSCCKP1";

/// Serialize to the versioned checkpoint container: header (kind, geometry,
/// rate, seed) followed by named little-endian f64 tensor blobs and a
/// trailing FNV-1a checksum. Byte-stable across platforms.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.push(params.kind.tag());
    buf.extend_from_slice(&(params.config.image_h as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.image_w as u32).to_le_bytes());
    buf.extend_from_slice(&params.config.rate_num.to_le_bytes());
    buf.extend_from_slice(&params.config.rate_den.to_le_bytes());
    buf.extend_from_slice(&(params.config.widths[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.widths[1] as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.bottleneck as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.depth_scale as u32).to_le_bytes());
    buf.extend_from_slice(&params.seed.to_le_bytes());
    buf.push(params.frozen as u8);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.push(t.requires_grad as u8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a(&buf);
    buf.extend_from_slice(&digest.to_le_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest_bytes) = buf.split_at(buf.len() - 8);
    let expect = u64::from_le_bytes(digest_bytes.try_into().unwrap());
    if fnv1a(body) != expect {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = ModelKind::from_tag(r.u8()?)
        .ok_or_else(|| Error::Checkpoint("unknown model kind".into()))?;
    let config = ModelConfig {
        image_h: r.u32()? as usize,
        image_w: r.u32()? as usize,
        rate_num: r.u32()?,
        rate_den: r.u32()?,
        widths: [r.u32()? as usize, r.u32()? as usize],
        bottleneck: r.u32()? as usize,
        depth_scale: r.u32()? as usize,
    };
    let seed = r.u64()?;
    let frozen = r.u8()? != 0;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let requires_grad = r.u8()? != 0;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(ModelParams {
        kind,
        config,
        seed,
        frozen,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            widths: [4, 6],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn latent_geometry_rate_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.latent_channels().unwrap(), 3);
        assert_eq!(cfg.latent_len().unwrap(), 192); // 3072 / 16

        let cfg12 = ModelConfig {
            rate_den: 12,
            ..ModelConfig::default()
        };
        assert_eq!(cfg12.latent_channels().unwrap(), 4);

        let bad = ModelConfig {
            rate_den: 7,
            ..ModelConfig::default()
        };
        match bad.latent_channels() {
            Err(Error::UnachievableRate { feasible, .. }) => {
                assert!(feasible.contains("1/16"), "{feasible}");
            }
            other => panic!("expected rate error, got {other:?}"),
        }
    }

    #[test]
    fn compression_rate_exact_for_all_variants() {
        for (h, w) in [(16usize, 16usize), (32, 32), (16, 32)] {
            let cfg = ModelConfig {
                image_h: h,
                image_w: w,
                widths: [4, 6],
                ..ModelConfig::default()
            };
            let k = cfg.latent_len().unwrap();
            let n = cfg.image_len();
            assert_eq!(k * 16, n, "{h}x{w}");
        }
    }

    #[test]
    fn encode_produces_exact_latent_and_is_deterministic() {
        let cfg = small_config();
        let enc = build_encoder(&cfg, 1).unwrap();
        let img = synth_dataset(1, 16, 2).unwrap().image(0);
        let a = encode(&enc, &img, 7.0).unwrap();
        let b = encode(&enc, &img, 7.0).unwrap();
        assert_eq!(a.shape, vec![cfg.latent_len().unwrap()]);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn encode_rejects_wrong_shape_and_range() {
        let enc = build_encoder(&small_config(), 1).unwrap();
        let wrong = Tensor::zeros(&[3, 8, 8]);
        assert!(encode(&enc, &wrong, 7.0).is_err());
        let mut bad = synth_dataset(1, 16, 2).unwrap().image(0);
        bad.data[0] = 1.5;
        assert!(encode(&enc, &bad, 7.0).is_err());
    }

    #[test]
    fn encoder_reacts_to_snr_input() {
        let enc = build_encoder(&small_config(), 3).unwrap();
        let img = synth_dataset(1, 16, 4).unwrap().image(0);
        let low = encode(&enc, &img, 1.0).unwrap();
        let high = encode(&enc, &img, 13.0).unwrap();
        assert_ne!(low.data, high.data, "snr conditioning must be live");
    }

    #[test]
    fn all_decoders_reconstruct_shape_and_range() {
        let cfg = small_config();
        let enc = build_encoder(&cfg, 5).unwrap();
        let img = synth_dataset(2, 16, 6).unwrap();
        let batch = img.gather(&[0, 1]);
        let latent = encode(&enc, &batch, 7.0).unwrap();

        let mut kinds = vec![ModelKind::Mirror];
        kinds.extend(ModelKind::user_roster());
        for kind in kinds {
            let dec = build_decoder(kind, &cfg, 7).unwrap();
            let out = decode(&dec, &latent, 7.0).unwrap();
            assert_eq!(
                out.shape,
                vec![2, 3, 16, 16],
                "{}",
                kind.as_str()
            );
            assert!(
                out.data.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{} output outside [0,1]",
                kind.as_str()
            );
        }
    }

    #[test]
    fn decode_rejects_wrong_latent_length() {
        let cfg = small_config();
        let dec = build_decoder(ModelKind::Conv, &cfg, 1).unwrap();
        let bad = Tensor::zeros(&[cfg.latent_len().unwrap() + 1]);
        assert!(decode(&dec, &bad, 7.0).is_err());
    }

    #[test]
    fn mirror_is_structural_reverse_of_encoder() {
        let cfg = small_config();
        let enc = build_encoder(&cfg, 1).unwrap();
        let mirror = build_symmetric_decoder(&enc, 2).unwrap();
        // encoder downsamples with convs; the mirror holds the transposed
        // counterparts in reverse order with igdn in place of gdn
        let enc_names: Vec<&str> = enc.tensors().iter().map(|(n, _)| n.as_str()).collect();
        let mir_names: Vec<&str> = mirror.tensors().iter().map(|(n, _)| n.as_str()).collect();
        assert!(enc_names.contains(&"conv1.kernel"));
        assert!(enc_names.contains(&"gdn2.beta"));
        assert!(mir_names.contains(&"up2.kernel"));
        assert!(mir_names.contains(&"igdn2.beta"));
        // mirror's first stage inverts the encoder's last conv geometry
        let head = &mirror.tensors()[0];
        assert_eq!(head.0, "head.kernel");
        assert_eq!(head.1.shape, vec![3, 6, 3, 3]); // latent channels -> w2
    }

    #[test]
    fn five_variants_have_pairwise_distinct_param_counts() {
        let cfg = ModelConfig::default();
        let mut counts = Vec::new();
        let mut kinds = vec![ModelKind::Mirror];
        kinds.extend(ModelKind::user_roster());
        for kind in kinds {
            let dec = build_decoder(kind, &cfg, 1).unwrap();
            counts.push((kind, dec.param_count()));
        }
        for i in 0..counts.len() {
            for j in i + 1..counts.len() {
                assert_ne!(
                    counts[i].1, counts[j].1,
                    "{} and {} share a parameter count",
                    counts[i].0.as_str(),
                    counts[j].0.as_str()
                );
            }
        }
    }

    #[test]
    fn depth_scale_adds_parameters() {
        let cfg = small_config();
        for kind in ModelKind::user_roster() {
            let base = build_decoder(kind, &cfg, 1).unwrap();
            let deeper_cfg = ModelConfig {
                depth_scale: 2,
                ..cfg
            };
            let deeper = build_decoder(kind, &deeper_cfg, 1).unwrap();
            assert!(
                deeper.param_count() > base.param_count(),
                "{}",
                kind.as_str()
            );
            // geometry still reaches the image shape
            let latent = Tensor::zeros(&[cfg.latent_len().unwrap()]);
            let out = decode(&deeper, &latent, 7.0).unwrap();
            assert_eq!(out.shape, vec![3, 16, 16]);
        }
    }

    #[test]
    fn resnet_zeroed_residual_blocks_pass_through() {
        // zero every residual-branch weight; blocks must become the identity
        // (up to the final block's sigmoid, which the tail consumes)
        let cfg = small_config();
        let mut dec = build_decoder(ModelKind::ResNet, &cfg, 3).unwrap();
        let blocks = 5;
        for (name, tensor) in dec.tensors_mut().iter_mut() {
            for blk in 0..blocks - 1 {
                if name.starts_with(&format!("block{blk}."))
                    || name.starts_with(&format!("blockgdn{blk}."))
                {
                    if name.ends_with(".kernel") || name.ends_with(".bias") {
                        tensor.data.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        // run the head output through the blocks manually: with zero branch
        // weights, gdn(0) = 0, prelu(0) = 0, fuse(0) = 0, so v + r = v
        let latent = Tensor::new(
            vec![cfg.latent_len().unwrap()],
            (0..cfg.latent_len().unwrap())
                .map(|i| (i % 7) as f64 / 7.0)
                .collect(),
        )
        .unwrap();
        let out = decode(&dec, &latent, 7.0).unwrap();
        assert_eq!(out.shape, vec![3, 16, 16]);

        // compare against depth that skips blocks 0..3 entirely: rebuild with
        // the same seed and identical zeroing; outputs must agree since each
        // zeroed block is an exact identity
        let mut dec2 = build_decoder(ModelKind::ResNet, &cfg, 3).unwrap();
        for (name, tensor) in dec2.tensors_mut().iter_mut() {
            for blk in 0..blocks - 1 {
                if name.starts_with(&format!("block{blk}."))
                    || name.starts_with(&format!("blockgdn{blk}."))
                {
                    if name.ends_with(".kernel") || name.ends_with(".bias") {
                        tensor.data.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        let out2 = decode(&dec2, &latent, 7.0).unwrap();
        assert_eq!(out.data, out2.data);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = small_config();
        let enc = build_encoder(&cfg, 11).unwrap();
        let dir = std::env::temp_dir().join(format!("djscc-models-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("enc.ckpt");
        save_checkpoint(&enc, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.kind, enc.kind);
        assert_eq!(back.config, enc.config);
        assert_eq!(back.seed, enc.seed);
        assert_eq!(back.checksum(), enc.checksum());
        for ((n1, t1), (n2, t2)) in enc.tensors().iter().zip(back.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data);
        }

        // stable bytes: saving twice gives identical files
        let path2 = dir.join("enc2.ckpt");
        save_checkpoint(&enc, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // corruption is detected
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        let bad = dir.join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn frozen_binding_detaches_gradients() {
        let cfg = small_config();
        let mut enc = build_encoder(&cfg, 13).unwrap();
        enc.set_frozen(true);
        let img = synth_dataset(1, 16, 14).unwrap().gather(&[0]);
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape);
        let x = tape.leaf(&img);
        let latent = encoder_forward(&mut tape, &enc, &b, x, 7.0).unwrap();
        let sq = tape.mul(latent, latent).unwrap();
        let loss = tape.reduce_mean(sq).unwrap();
        // every parameter is detached, so the loss sees no gradient source
        assert!(matches!(tape.backward(loss), Err(Error::DetachedLoss)));
    }
}
