//! Analog wireless channel: power normalization, SNR-to-noise mapping, AWGN
//! and Rayleigh transmission with perfect-CSI equalization, and empirical
//! statistics used by the tests.
//!
//! The noise standard deviation is defined against unit signal power, so
//! latents must pass through [`power_normalize`] before transmission. For
//! Rayleigh, consecutive reals form complex symbols and one fading
//! coefficient is drawn per latent block (per batch row), then divided out
//! at the receiver (perfect CSI). Noise and fading draws enter the
//! differentiation graph as constants, so the channel is gradient-transparent
//! in `x`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Rng, Tensor};

/// Fading magnitudes below this trigger a deterministic redraw.
pub const DEEP_FADE_GUARD: f64 = 1e-6;

/// Caps the empirical SNR when the noise power is zero.
pub const SNR_CAP_DB: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }

    pub fn parse(s: &str) -> Option<ChannelKind> {
        match s {
            "awgn" => Some(ChannelKind::Awgn),
            "rayleigh" => Some(ChannelKind::Rayleigh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

/// One complex fading coefficient, `E[|h|^2] = 1` under the generator.
#[derive(Debug, Clone, Copy)]
pub struct FadingDraw {
    pub h_re: f64,
    pub h_im: f64,
}

impl FadingDraw {
    pub fn magnitude_sq(&self) -> f64 {
        self.h_re * self.h_re + self.h_im * self.h_im
    }
}

/// Per-component noise std under unit signal power: `sigma = 10^(-snr/20)`.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    libm::pow(10.0, -snr_db / 20.0)
}

fn rows_cols(x: &Tensor) -> (usize, usize) {
    if x.shape.len() == 2 {
        (x.shape[0], x.shape[1])
    } else {
        (1, x.numel())
    }
}

/// Scale each latent block to mean power exactly 1: `x * sqrt(k / sum(x^2))`.
/// A 2-d tensor is treated as one block per row.
pub fn power_normalize(x: &Tensor) -> Result<Tensor> {
    let (rows, k) = rows_cols(x);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * k..(r + 1) * k];
        let power: f64 = row.iter().map(|v| v * v).sum();
        if power == 0.0 {
            return Err(Error::ZeroLatent);
        }
        let scale = libm::sqrt(k as f64 / power);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Tape version of [`power_normalize`] for training paths; `x` is `[N, K]`.
pub fn power_normalize_tape(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape(format!(
            "power_normalize wants [N, K], got {shape:?}"
        )));
    }
    let k = shape[1];
    let x2 = t.mul(x, x)?;
    let s = t.sum_last_dim(x2)?;
    if t.data(s).contains(&0.0) {
        return Err(Error::ZeroLatent);
    }
    let kk = t.constant(vec![k as f64], vec![1]);
    let ratio = t.div(kk, s)?;
    let scale = t.sqrt(ratio);
    t.mul(x, scale)
}

/// Draw one fading coefficient `h = (a + ib)/sqrt(2)`, redrawing on a deep
/// fade (deterministic given the stream).
pub fn draw_fading(rng: &mut Rng) -> FadingDraw {
    loop {
        let a = rng.next_normal();
        let b = rng.next_normal();
        let h = FadingDraw {
            h_re: a / std::f64::consts::SQRT_2,
            h_im: b / std::f64::consts::SQRT_2,
        };
        if h.magnitude_sq() >= DEEP_FADE_GUARD * DEEP_FADE_GUARD {
            return h;
        }
    }
}

/// `y = x + n`, `n_i` iid Gaussian with variance `sigma^2`.
pub fn awgn_transmit(x: &Tensor, cfg: &ChannelConfig, rng: &mut Rng) -> Tensor {
    let sigma = snr_to_sigma(cfg.snr_db);
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v += sigma * rng.next_normal();
    }
    out
}

/// `y = h*x + n` on complex symbol pairs; one `h` per block (row).
pub fn rayleigh_transmit(
    x: &Tensor,
    cfg: &ChannelConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<FadingDraw>)> {
    let (rows, k) = rows_cols(x);
    if k % 2 != 0 {
        return Err(Error::OddLatent(k));
    }
    let sigma = snr_to_sigma(cfg.snr_db);
    let mut out = x.clone();
    let mut draws = Vec::with_capacity(rows);
    for r in 0..rows {
        let h = draw_fading(rng);
        let row = &mut out.data[r * k..(r + 1) * k];
        for p in 0..k / 2 {
            let re = row[2 * p];
            let im = row[2 * p + 1];
            row[2 * p] = h.h_re * re - h.h_im * im + sigma * rng.next_normal();
            row[2 * p + 1] = h.h_re * im + h.h_im * re + sigma * rng.next_normal();
        }
        draws.push(h);
    }
    Ok((out, draws))
}

/// Perfect-CSI equalization: complex division `y / h` per symbol.
pub fn equalize(y: &Tensor, draws: &[FadingDraw]) -> Result<Tensor> {
    let (rows, k) = rows_cols(y);
    if k % 2 != 0 {
        return Err(Error::OddLatent(k));
    }
    if draws.len() != rows {
        return Err(Error::Incompatible(format!(
            "{} fading draws for {} blocks",
            draws.len(),
            rows
        )));
    }
    let mut out = y.clone();
    for (r, h) in draws.iter().enumerate() {
        let m2 = h.magnitude_sq();
        if m2 < DEEP_FADE_GUARD * DEEP_FADE_GUARD {
            return Err(Error::DeepFade(libm::sqrt(m2)));
        }
        let (ir, ii) = (h.h_re / m2, -h.h_im / m2);
        let row = &mut out.data[r * k..(r + 1) * k];
        for p in 0..k / 2 {
            let re = row[2 * p];
            let im = row[2 * p + 1];
            row[2 * p] = ir * re - ii * im;
            row[2 * p + 1] = ir * im + ii * re;
        }
    }
    Ok(out)
}

/// `10 log10(sum x^2 / sum (y-x)^2)`, capped at [`SNR_CAP_DB`].
pub fn measure_empirical_snr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape != y.shape {
        return Err(Error::ShapeMismatch(x.shape.clone(), y.shape.clone()));
    }
    let signal: f64 = x.data.iter().map(|v| v * v).sum();
    let noise: f64 = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(signal / noise)).min(SNR_CAP_DB))
}

/// Transmit a power-normalized `[N, K]` latent on the tape: channel noise
/// and fading enter as constants, so the path stays differentiable in `x`.
/// Rayleigh output is already equalized (receiver front end).
pub fn transmit_tape(
    t: &mut Tape,
    x: Var,
    kind: ChannelKind,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape(format!(
            "transmit wants [N, K], got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    let sigma = snr_to_sigma(snr_db);
    match kind {
        ChannelKind::Awgn => {
            let mut noise = vec![0.0; n * k];
            rng.fill_normal(&mut noise, sigma);
            let nv = t.constant(noise, vec![n, k]);
            t.add(x, nv)
        }
        ChannelKind::Rayleigh => {
            if k % 2 != 0 {
                return Err(Error::OddLatent(k));
            }
            // y = h x + n, then y / h = x + n / h; same draw order as the
            // plain functions: h first, then the row's noise
            let mut h_fwd = Vec::with_capacity(n * 2);
            let mut h_inv = Vec::with_capacity(n * 2);
            let mut noise = vec![0.0; n * k];
            for r in 0..n {
                let h = draw_fading(rng);
                h_fwd.push(h.h_re);
                h_fwd.push(h.h_im);
                let m2 = h.magnitude_sq();
                h_inv.push(h.h_re / m2);
                h_inv.push(-h.h_im / m2);
                rng.fill_normal(&mut noise[r * k..(r + 1) * k], sigma);
            }
            let hv = t.constant(h_fwd, vec![n, 2]);
            let faded = t.complex_scale_rows(x, hv)?;
            let nv = t.constant(noise, vec![n, k]);
            let received = t.add(faded, nv)?;
            let hiv = t.constant(h_inv, vec![n, 2]);
            t.complex_scale_rows(received, hiv)
        }
    }
}
