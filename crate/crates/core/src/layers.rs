//! Layer vocabulary for the encoder and decoder families: convolutions,
//! transpose convolutions, PReLU, sigmoid, average pooling, GDN/IGDN, dense
//! layers, SNR fusion and a channel-attention block.
//!
//! A "layer" here is a group of named parameter tensors plus a forward
//! function over tape variables. Parameter construction lives in the `init_*`
//! helpers; the models module assembles them into full networks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Rng, Tensor};

/// Raw SNR in dB is divided by this before entering any network, so the
/// conditioning scalar is O(1) over the usual -20..20 dB range.
pub const SNR_SCALE_DB: f64 = 20.0;

/// Minimum effective value of the softplus-mapped GDN parameters.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// PReLU negative-side slope at init.
pub const PRELU_INIT: f64 = 0.25;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Effective (positive) value of a raw GDN parameter.
pub fn positive_map(raw: f64) -> f64 {
    softplus(raw) + POSITIVE_FLOOR
}

/// Raw value whose [`positive_map`] equals `target` (target > floor).
pub fn positive_map_inv(target: f64) -> f64 {
    let y = target - POSITIVE_FLOOR;
    // inverse softplus: ln(e^y - 1); the identity is numerically fine here
    if y > 30.0 {
        y
    } else {
        libm::log(libm::expm1(y))
    }
}

// ---- parameter construction -------------------------------------------

pub fn init_conv(
    prefix: &str,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    rng: &mut Rng,
) -> Vec<(String, Tensor)> {
    let kernel = Tensor::uniform_init(&[out_c, in_c, kh, kw], in_c * kh * kw, rng).with_grad();
    let bias = Tensor::zeros(&[out_c]).with_grad();
    vec![
        (format!("{prefix}.kernel"), kernel),
        (format!("{prefix}.bias"), bias),
    ]
}

/// Transpose-conv kernel layout is `[in_c, out_c, kh, kw]`.
pub fn init_tconv(
    prefix: &str,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    rng: &mut Rng,
) -> Vec<(String, Tensor)> {
    let kernel = Tensor::uniform_init(&[in_c, out_c, kh, kw], in_c * kh * kw, rng).with_grad();
    let bias = Tensor::zeros(&[out_c]).with_grad();
    vec![
        (format!("{prefix}.kernel"), kernel),
        (format!("{prefix}.bias"), bias),
    ]
}

pub fn init_dense(
    prefix: &str,
    out_f: usize,
    in_f: usize,
    rng: &mut Rng,
) -> Vec<(String, Tensor)> {
    let weight = Tensor::uniform_init(&[out_f, in_f], in_f, rng).with_grad();
    let bias = Tensor::zeros(&[out_f]).with_grad();
    vec![
        (format!("{prefix}.weight"), weight),
        (format!("{prefix}.bias"), bias),
    ]
}

pub fn init_prelu(prefix: &str, channels: usize) -> Vec<(String, Tensor)> {
    let slope = Tensor::filled(&[channels], PRELU_INIT).with_grad();
    vec![(format!("{prefix}.slope"), slope)]
}

/// GDN parameters: beta effective 1.0, gamma effective 0.1 on the diagonal
/// and (numerically) zero elsewhere. Stored unconstrained; mapped through
/// softplus + floor at use time so gradient steps cannot break positivity.
pub fn init_gdn(prefix: &str, channels: usize) -> Vec<(String, Tensor)> {
    let beta = Tensor::filled(&[channels], positive_map_inv(1.0)).with_grad();
    let mut gamma = Tensor::filled(&[channels, channels], -40.0);
    for i in 0..channels {
        gamma.data[i * channels + i] = positive_map_inv(0.1);
    }
    vec![
        (format!("{prefix}.beta"), beta),
        (format!("{prefix}.gamma"), gamma.with_grad()),
    ]
}

/// SNR fusion layer: one dense map from pooled stats + SNR to per-channel
/// factors.
pub fn init_snr_fuse(prefix: &str, channels: usize, rng: &mut Rng) -> Vec<(String, Tensor)> {
    init_dense(prefix, channels, channels + 1, rng)
}

/// Channel attention: squeeze + [stats || snr] -> dense -> PReLU -> dense ->
/// sigmoid gates. `bottleneck` divides the channel count (floor, min 1).
pub fn init_attention(
    prefix: &str,
    channels: usize,
    bottleneck: usize,
    rng: &mut Rng,
) -> Vec<(String, Tensor)> {
    let hidden = (channels / bottleneck).max(1);
    let mut params = init_dense(&format!("{prefix}.fc1"), hidden, channels + 1, rng);
    params.extend(init_prelu(&format!("{prefix}.fc1"), hidden));
    params.extend(init_dense(&format!("{prefix}.fc2"), channels, hidden, rng));
    params
}

// ---- forward ops ---------------------------------------------------------

pub fn conv2d(
    t: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    t.conv2d(x, kernel, bias, stride, pad)
}

pub fn tconv2d(
    t: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var> {
    t.tconv2d(x, kernel, bias, stride, pad, out_pad)
}

pub fn prelu(t: &mut Tape, x: Var, slope: Var) -> Result<Var> {
    t.prelu(x, slope)
}

pub fn sigmoid(t: &mut Tape, x: Var) -> Var {
    t.sigmoid(x)
}

pub fn avg_pool(t: &mut Tape, x: Var, k: usize) -> Result<Var> {
    t.avg_pool(x, k)
}

/// Effective positive GDN parameters on the tape: `softplus(raw) + floor`.
fn positive_params(t: &mut Tape, beta_raw: Var, gamma_raw: Var, c: usize) -> Result<(Var, Var)> {
    let beta_sp = t.softplus(beta_raw);
    let beta = t.add_scalar(beta_sp, POSITIVE_FLOOR);
    let gamma_sp = t.softplus(gamma_raw);
    let gamma_pos = t.add_scalar(gamma_sp, POSITIVE_FLOOR);
    let gamma = t.reshape(gamma_pos, vec![c, c, 1, 1])?;
    Ok((beta, gamma))
}

/// Generalized divisive normalization:
/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)` per spatial position.
///
/// The channel mixing `sum_j gamma_ij x_j^2` is a 1x1 convolution of `x^2`
/// with the gamma matrix, with beta as its bias.
pub fn gdn(t: &mut Tape, x: Var, beta_raw: Var, gamma_raw: Var) -> Result<Var> {
    let c = t.shape(x)[1];
    let (beta, gamma) = positive_params(t, beta_raw, gamma_raw, c)?;
    let x2 = t.mul(x, x)?;
    let den2 = t.conv2d(x2, gamma, beta, 1, 0)?;
    let den = t.sqrt(den2);
    t.div(x, den)
}

/// Inverse GDN as used inside decoders: the multiplicative mirror
/// `y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)`, i.e. one fixed-point
/// step of the exact inverse (the standard synthesis-transform form).
pub fn igdn(t: &mut Tape, x: Var, beta_raw: Var, gamma_raw: Var) -> Result<Var> {
    let c = t.shape(x)[1];
    let (beta, gamma) = positive_params(t, beta_raw, gamma_raw, c)?;
    let x2 = t.mul(x, x)?;
    let den2 = t.conv2d(x2, gamma, beta, 1, 0)?;
    let den = t.sqrt(den2);
    t.mul(x, den)
}

/// Exact inverse of [`gdn`] by fixed-point iteration (plain tensors, no
/// tape). Solves `x_i = y_i * sqrt(beta_i + sum_j gamma_ij x_j^2)`; the
/// one-step [`igdn`] layer is the first iterate of this map.
pub fn gdn_invert(y: &Tensor, beta_raw: &Tensor, gamma_raw: &Tensor, tol: f64) -> Result<Tensor> {
    let shape = y.shape.clone();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let beta: Vec<f64> = beta_raw.data.iter().map(|&r| positive_map(r)).collect();
    let gamma: Vec<f64> = gamma_raw.data.iter().map(|&r| positive_map(r)).collect();

    let mut x = y.data.clone();
    let mut next = vec![0.0; x.len()];
    for _ in 0..200 {
        let mut delta = 0.0f64;
        for ni in 0..n {
            for p in 0..hw {
                for ci in 0..c {
                    let mut acc = beta[ci];
                    for cj in 0..c {
                        let v = x[(ni * c + cj) * hw + p];
                        acc += gamma[ci * c + cj] * v * v;
                    }
                    let idx = (ni * c + ci) * hw + p;
                    let nv = y.data[idx] * libm::sqrt(acc);
                    delta = delta.max((nv - x[idx]).abs());
                    next[idx] = nv;
                }
            }
        }
        std::mem::swap(&mut x, &mut next);
        if delta < tol {
            break;
        }
    }
    Tensor::new(shape, x)
}

/// Constant SNR conditioning column `[N, 1]` holding `snr_db / SNR_SCALE_DB`.
pub fn snr_column(t: &mut Tape, n: usize, snr_db: f64) -> Var {
    t.constant(vec![snr_db / SNR_SCALE_DB; n], vec![n, 1])
}

/// Fuse the SNR into features through a fully connected layer: pooled
/// channel stats and the normalized SNR produce per-channel factors in
/// (0, 2) via `2 * sigmoid`, which scale the feature channels.
pub fn snr_fuse_dense(t: &mut Tape, x: Var, snr_db: f64, weight: Var, bias: Var) -> Result<Var> {
    let n = t.shape(x)[0];
    let stats = t.global_avg_pool(x)?;
    let snr = snr_column(t, n, snr_db);
    let z = t.concat_cols(stats, snr)?;
    let f = t.dense(z, weight, bias)?;
    let f = t.sigmoid(f);
    let f = t.mul_scalar(f, 2.0);
    t.channel_mul(x, f)
}

/// Squeeze-excitation channel attention conditioned on the SNR: global
/// average pool per channel, concat the normalized SNR, two dense layers
/// (PReLU then sigmoid) produce per-channel gates in (0, 1) that scale the
/// features. Gates never exceed 1, so per-channel output magnitude never
/// exceeds the input's.
pub fn channel_attention(
    t: &mut Tape,
    x: Var,
    snr_db: f64,
    fc1_w: Var,
    fc1_b: Var,
    fc1_slope: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> Result<Var> {
    let n = t.shape(x)[0];
    let stats = t.global_avg_pool(x)?;
    let snr = snr_column(t, n, snr_db);
    let z = t.concat_cols(stats, snr)?;
    let h = t.dense(z, fc1_w, fc1_b)?;
    let h = t.prelu(h, fc1_slope)?;
    let g = t.dense(h, fc2_w, fc2_b)?;
    let g = t.sigmoid(g);
    t.channel_mul(x, g)
}
