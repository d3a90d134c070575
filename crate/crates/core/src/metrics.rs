//! Image quality metrics: PSNR and multi-scale structural similarity.
//!
//! PSNR shares its MSE with the training loss through [`mse_flat`], so the
//! identity `psnr = 10 log10(max^2 / mse)` holds over the same float
//! sequence the optimizer sees. MS-SSIM follows the standard 5-scale
//! construction with the reference per-scale weights; small images reduce
//! the scale count and renormalize the weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Caps PSNR when the images are identical (MSE = 0).
pub const PSNR_CAP_DB: f64 = 200.0;

/// Reference per-scale weights for 5-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            scales: 5,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            window: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 1.0,
        }
    }
}

/// Mean squared error over two equally shaped flat slices, summed in index
/// order. This exact routine backs both the metric and the training loss.
pub fn mse_flat(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Peak signal-to-noise ratio in dB: `10 log10(max^2 / mse)`.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    if max_val <= 0.0 {
        return Err(Error::InvalidShape("psnr max_val must be positive".into()));
    }
    let mse = mse_flat(&a.data, &b.data);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(max_val * max_val / mse)).min(PSNR_CAP_DB))
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode gaussian filter over a single-channel image.
fn gauss_filter(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += img[y * w + x + i] * kv;
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += tmp[(y + i) * ow + x] * kv;
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms of SSIM over one channel.
fn ssim_terms(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    cfg: &MsSsimConfig,
) -> Result<(f64, f64)> {
    if h < cfg.window || w < cfg.window {
        return Err(Error::InvalidShape(format!(
            "image {h}x{w} smaller than ssim window {}",
            cfg.window
        )));
    }
    let kernel = gaussian_kernel(cfg.window, cfg.window_sigma);
    let (mu_a, oh, ow) = gauss_filter(a, h, w, &kernel);
    let (mu_b, _, _) = gauss_filter(b, h, w, &kernel);

    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, _, _) = gauss_filter(&sq_a, h, w, &kernel);
    let (e_bb, _, _) = gauss_filter(&sq_b, h, w, &kernel);
    let (e_ab, _, _) = gauss_filter(&ab, h, w, &kernel);

    let c1 = (cfg.k1 * cfg.max_val) * (cfg.k1 * cfg.max_val);
    let c2 = (cfg.k2 * cfg.max_val) * (cfg.k2 * cfg.max_val);

    let mut lum = 0.0;
    let mut cs = 0.0;
    let n = oh * ow;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (var_a + var_b + c2);
    }
    Ok((lum / n as f64, cs / n as f64))
}

fn channel_views(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape.len() {
        2 => Ok((1, img.shape[0], img.shape[1])),
        3 => Ok((img.shape[0], img.shape[1], img.shape[2])),
        _ => Err(Error::InvalidShape(format!(
            "metrics want [H,W] or [C,H,W], got {:?}",
            img.shape
        ))),
    }
}

/// Single-scale SSIM, averaged over channels. Result lies in [-1, 1].
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    let (c, h, w) = channel_views(a)?;
    let mut acc = 0.0;
    for ch in 0..c {
        let pa = &a.data[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data[ch * h * w..(ch + 1) * h * w];
        let (lum, cs) = ssim_terms(pa, pb, h, w, cfg)?;
        acc += lum * cs;
    }
    Ok(acc / c as f64)
}

fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (img[2 * y * w + 2 * x]
                    + img[2 * y * w + 2 * x + 1]
                    + img[(2 * y + 1) * w + 2 * x]
                    + img[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of scales the image supports: coarsest scale must still admit one
/// ssim window.
fn usable_scales(h: usize, w: usize, cfg: &MsSsimConfig) -> usize {
    let mut scales = 0usize;
    let (mut ch, mut cw) = (h, w);
    while scales < cfg.scales && ch >= cfg.window && cw >= cfg.window {
        scales += 1;
        ch /= 2;
        cw /= 2;
    }
    scales
}

fn ms_ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &MsSsimConfig) -> Result<f64> {
    let scales = usable_scales(h, w, cfg);
    if scales == 0 {
        return Err(Error::InvalidShape(format!(
            "image {h}x{w} smaller than ssim window {}",
            cfg.window
        )));
    }
    let wsum: f64 = cfg.weights[..scales].iter().sum();
    let weights: Vec<f64> = cfg.weights[..scales].iter().map(|v| v / wsum).collect();

    let mut cur_a = a.to_vec();
    let mut cur_b = b.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut value = 1.0f64;
    for (scale, wgt) in weights.iter().enumerate() {
        let (lum, cs) = ssim_terms(&cur_a, &cur_b, ch, cw, cfg)?;
        let term = if scale + 1 == scales { lum * cs } else { cs };
        value *= libm::pow(term.max(0.0), *wgt);
        if scale + 1 < scales {
            let (da, nh, nw) = downsample2(&cur_a, ch, cw);
            let (db, _, _) = downsample2(&cur_b, ch, cw);
            cur_a = da;
            cur_b = db;
            ch = nh;
            cw = nw;
        }
    }
    Ok(value)
}

/// Multi-scale SSIM in [0, 1], averaged over channels. Scales beyond what
/// the image supports are dropped and the weights renormalized.
pub fn ms_ssim(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    let (c, h, w) = channel_views(a)?;
    let mut acc = 0.0;
    for ch in 0..c {
        let pa = &a.data[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data[ch * h * w..(ch + 1) * h * w];
        acc += ms_ssim_channel(pa, pb, h, w, cfg)?;
    }
    Ok(acc / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn image(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_f64()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn psnr_point_values() {
        let mut rng = Rng::new(1);
        let a = image(&[3, 16, 16], &mut rng);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);

        // mse = 0.01 with max 1 -> 20 dB
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v += 0.1;
        }
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");

        // max = 255 with mse = 255^2 -> 0 dB
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(vec![2], vec![255.0, 255.0]).unwrap();
        let p0 = psnr(&x, &y, 255.0).unwrap();
        assert!(p0.abs() < 1e-12, "{p0}");
    }

    #[test]
    fn psnr_is_log_identity_of_shared_mse() {
        let mut rng = Rng::new(2);
        let a = image(&[3, 8, 8], &mut rng);
        let b = image(&[3, 8, 8], &mut rng);
        let mse = mse_flat(&a.data, &b.data);
        let expect = 10.0 * libm::log10(1.0 / mse);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), expect);
    }

    #[test]
    fn psnr_invariant_under_shared_permutation() {
        let mut rng = Rng::new(3);
        let a = image(&[3, 8, 8], &mut rng);
        let b = image(&[3, 8, 8], &mut rng);
        let perm = Rng::new(9).permutation(a.numel());
        let pa = Tensor::new(
            a.shape.clone(),
            perm.iter().map(|&i| a.data[i]).collect(),
        )
        .unwrap();
        let pb = Tensor::new(
            b.shape.clone(),
            perm.iter().map(|&i| b.data[i]).collect(),
        )
        .unwrap();
        // permuting both operands reorders the mse summation, so allow
        // rounding-level slack
        let before = psnr(&a, &b, 1.0).unwrap();
        let after = psnr(&pa, &pb, 1.0).unwrap();
        assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = Rng::new(4);
        let a = image(&[16, 16], &mut rng);
        let s = ssim(&a, &a, &MsSsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let (h, w) = (16, 16);
        let mut a = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                a.data[y * w + x] = ((x + y) % 2) as f64;
            }
        }
        let b = Tensor::new(
            a.shape.clone(),
            a.data.iter().map(|v| 1.0 - v).collect(),
        )
        .unwrap();
        let s = ssim(&a, &b, &MsSsimConfig::default()).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance() {
        let (av, bv) = (0.3f64, 0.7f64);
        let a = Tensor::filled(&[12, 12], av);
        let b = Tensor::filled(&[12, 12], bv);
        let cfg = MsSsimConfig::default();
        let c1 = (cfg.k1 * cfg.max_val).powi(2);
        let expect = (2.0 * av * bv + c1) / (av * av + bv * bv + c1);
        let s = ssim(&a, &b, &cfg).unwrap();
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::zeros(&[4, 4]);
        assert!(ssim(&a, &a, &MsSsimConfig::default()).is_err());
    }

    #[test]
    fn ms_ssim_self_is_one() {
        let mut rng = Rng::new(5);
        let a = image(&[3, 32, 32], &mut rng);
        let v = ms_ssim(&a, &a, &MsSsimConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ms_ssim_symmetric() {
        let mut rng = Rng::new(6);
        let a = image(&[3, 32, 32], &mut rng);
        let b = image(&[3, 32, 32], &mut rng);
        let cfg = MsSsimConfig::default();
        let ab = ms_ssim(&a, &b, &cfg).unwrap();
        let ba = ms_ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_decreases_with_noise() {
        // smooth base image so noise is the only structural difference
        let (h, w) = (32usize, 32usize);
        let mut a = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                a.data[y * w + x] = 0.5
                    + 0.4 * libm::sin(x as f64 * 0.4) * libm::cos(y as f64 * 0.3);
            }
        }
        let mut rng = Rng::new(7);
        let noise: Vec<f64> = (0..h * w).map(|_| rng.next_normal()).collect();
        let cfg = MsSsimConfig::default();
        let mut last = 1.0f64;
        for eps in [0.01, 0.05, 0.1] {
            let b = Tensor::new(
                a.shape.clone(),
                a.data.iter().zip(&noise).map(|(v, n)| v + eps * n).collect(),
            )
            .unwrap();
            let v = ms_ssim(&a, &b, &cfg).unwrap();
            assert!(v < last, "eps {eps}: {v} !< {last}");
            assert!(v > 0.0 && v <= 1.0);
            last = v;
        }
    }

    #[test]
    fn ms_ssim_auto_reduces_scales() {
        // 32x32 supports 2 of the 5 reference scales; must not error
        let mut rng = Rng::new(8);
        let a = image(&[32, 32], &mut rng);
        let b = image(&[32, 32], &mut rng);
        let v = ms_ssim(&a, &b, &MsSsimConfig::default()).unwrap();
        assert!(v.is_finite());

        // large enough for all five scales
        let a5 = image(&[176, 176], &mut rng);
        let v5 = ms_ssim(&a5, &a5, &MsSsimConfig::default()).unwrap();
        assert!((v5 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn metric_is_pure_function_of_pixels() {
        // embedding the pair elsewhere in a canvas and cropping back cannot
        // change the value: the metric sees only pixel content
        let mut rng = Rng::new(9);
        let a = image(&[16, 16], &mut rng);
        let b = image(&[16, 16], &mut rng);
        let embed = |img: &Tensor, off: usize| -> Tensor {
            let mut canvas = Tensor::zeros(&[40, 40]);
            for y in 0..16 {
                for x in 0..16 {
                    canvas.data[(y + off) * 40 + (x + off)] = img.data[y * 16 + x];
                }
            }
            let mut crop = Tensor::zeros(&[16, 16]);
            for y in 0..16 {
                for x in 0..16 {
                    crop.data[y * 16 + x] = canvas.data[(y + off) * 40 + (x + off)];
                }
            }
            crop
        };
        let cfg = MsSsimConfig::default();
        let base = ms_ssim(&a, &b, &cfg).unwrap();
        for off in [0usize, 11, 22] {
            let va = embed(&a, off);
            let vb = embed(&b, off);
            assert_eq!(ms_ssim(&va, &vb, &cfg).unwrap(), base);
        }
    }
}
