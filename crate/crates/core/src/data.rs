//! Image ingestion (PNG, binary PPM), patch extraction, a procedural
//! synthetic dataset for self-contained runs, and reconstructed-image
//! export.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{stream, Tensor};

/// A batch of RGB images `[N, 3, H, W]` with pixels in [0, 1].
///
/// Spatial dims must be multiples of the encoder's total stride before the
/// batch enters the coding pipeline; the models module checks that at use.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Tensor,
    pub provenance: Vec<String>,
}

impl ImageBatch {
    pub fn new(data: Tensor, provenance: Vec<String>) -> Result<Self> {
        if data.shape.len() != 4 || data.shape[1] != 3 {
            return Err(Error::InvalidShape(format!(
                "image batch wants [N,3,H,W], got {:?}",
                data.shape
            )));
        }
        if data.shape[0] != provenance.len() {
            return Err(Error::InvalidShape(format!(
                "{} provenance labels for {} images",
                provenance.len(),
                data.shape[0]
            )));
        }
        if data.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidShape(
                "image batch pixel outside [0,1]".into(),
            ));
        }
        Ok(ImageBatch { data, provenance })
    }

    pub fn len(&self) -> usize {
        self.data.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape[3]
    }

    fn image_len(&self) -> usize {
        3 * self.height() * self.width()
    }

    /// A single image as `[3, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        let il = self.image_len();
        Tensor::new(
            vec![3, self.height(), self.width()],
            self.data.data[i * il..(i + 1) * il].to_vec(),
        )
        .unwrap()
    }

    /// Gather images into a `[B, 3, H, W]` tensor in the given order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let il = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * il);
        for &i in indices {
            data.extend_from_slice(&self.data.data[i * il..(i + 1) * il]);
        }
        Tensor::new(
            vec![indices.len(), 3, self.height(), self.width()],
            data,
        )
        .unwrap()
    }
}

// ---- PNG ------------------------------------------------------------------

/// Write a `[3, H, W]` image in [0, 1] as an 8-bit RGB PNG.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = to_rgb8(img)?;
    let (h, w) = (img.shape[1] as u32, img.shape[2] as u32);
    let file = File::create(path)?;
    let writer = BufWriter::new(file);
    let mut encoder = png::Encoder::new(writer, w, h);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut png_writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    png_writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

fn to_rgb8(img: &Tensor) -> Result<Vec<u8>> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(Error::InvalidShape(format!(
            "save_image wants [3,H,W], got {:?}",
            img.shape
        )));
    }
    if img.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidShape("pixel outside [0,1]".into()));
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push(libm::round(img.data[c * plane + p] * 255.0) as u8);
        }
    }
    Ok(bytes)
}

fn from_rgb8(bytes: &[u8], h: usize, w: usize, channels: usize, label: String) -> ImageBatch {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = match channels {
                1 => bytes[p],
                _ => bytes[p * channels + c.min(channels - 1)],
            };
            data[c * plane + p] = src as f64 / 255.0;
        }
    }
    let tensor = Tensor::new(vec![1, 3, h, w], data).unwrap();
    ImageBatch::new(tensor, vec![label]).unwrap()
}

/// Load a PNG or binary PPM (P6) file as a single-image batch.
pub fn load_image(path: &Path) -> Result<ImageBatch> {
    let mut file = File::open(path)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let label = path.display().to_string();
    if raw.starts_with(b"\x89PNG") {
        load_png(&raw, label)
    } else if raw.starts_with(b"P6") {
        load_ppm(&raw, path, label)
    } else {
        Err(Error::Parse {
            path: label,
            offset: 0,
            msg: "unsupported format (PNG and binary PPM only)".into(),
        })
    }
}

fn load_png(raw: &[u8], label: String) -> Result<ImageBatch> {
    let decoder = png::Decoder::new(std::io::Cursor::new(raw));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "unsupported bit depth {:?}",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    Ok(from_rgb8(&buf, h, w, channels, label))
}

// ---- PPM ------------------------------------------------------------------

/// Write a `[3, H, W]` image as binary PPM (P6, maxval 255).
pub fn save_ppm(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = to_rgb8(img)?;
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P6\n{w} {h}\n255\n")?;
    file.write_all(&bytes)?;
    Ok(())
}

struct PpmCursor<'a> {
    raw: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> PpmCursor<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while self.pos < self.raw.len() {
            let b = self.raw[self.pos];
            if b == b'#' {
                while self.pos < self.raw.len() && self.raw[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.raw.len() && self.raw[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        let text = std::str::from_utf8(&self.raw[start..self.pos]).unwrap();
        text.parse::<usize>()
            .map_err(|_| self.err("integer out of range"))
    }
}

fn load_ppm(raw: &[u8], path: &Path, label: String) -> Result<ImageBatch> {
    let mut cur = PpmCursor {
        raw,
        pos: 2, // past "P6"
        path: path.display().to_string(),
    };
    let w = cur.read_uint()?;
    let h = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return Err(cur.err("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the samples
    if cur.pos >= raw.len() || !raw[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing header terminator"));
    }
    cur.pos += 1;
    let need = w * h * 3;
    if raw.len() - cur.pos < need {
        cur.pos = raw.len();
        return Err(cur.err(&format!(
            "truncated pixel data: need {need} bytes, have {}",
            raw.len().saturating_sub(cur.pos)
        )));
    }
    Ok(from_rgb8(&raw[cur.pos..cur.pos + need], h, w, 3, label))
}

// ---- patches ---------------------------------------------------------------

/// Deterministic grid of patches with the given stride.
pub fn extract_patches_grid(img: &ImageBatch, size: usize, stride: usize) -> Result<ImageBatch> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidShape("patch size/stride must be positive".into()));
    }
    if size > img.height() || size > img.width() {
        return Err(Error::InvalidShape(format!(
            "patch {size} larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for i in 0..img.len() {
        let src = img.image(i);
        let (h, w) = (img.height(), img.width());
        let mut y = 0;
        while y + size <= h {
            let mut x = 0;
            while x + size <= w {
                copy_patch(&src, h, w, y, x, size, &mut data);
                provenance.push(format!("{}@{y},{x}", img.provenance[i]));
                x += stride;
            }
            y += stride;
        }
    }
    let n = provenance.len();
    ImageBatch::new(Tensor::new(vec![n, 3, size, size], data)?, provenance)
}

/// Seeded random crops, `count` per source image.
pub fn extract_patches_random(
    img: &ImageBatch,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<ImageBatch> {
    if size > img.height() || size > img.width() {
        return Err(Error::InvalidShape(format!(
            "patch {size} larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for i in 0..img.len() {
        let mut rng = stream(seed, &["patches"], &[i as u64]);
        let src = img.image(i);
        let (h, w) = (img.height(), img.width());
        for _ in 0..count {
            let y = rng.next_index(h - size + 1);
            let x = rng.next_index(w - size + 1);
            copy_patch(&src, h, w, y, x, size, &mut data);
            provenance.push(format!("{}@{y},{x}", img.provenance[i]));
        }
    }
    let n = provenance.len();
    ImageBatch::new(Tensor::new(vec![n, 3, size, size], data)?, provenance)
}

fn copy_patch(src: &Tensor, h: usize, w: usize, y: usize, x: usize, size: usize, out: &mut Vec<f64>) {
    for c in 0..3 {
        for dy in 0..size {
            let row = c * h * w + (y + dy) * w + x;
            out.extend_from_slice(&src.data[row..row + size]);
        }
    }
}

// ---- synthetic dataset ------------------------------------------------------

/// Procedural textures: a color gradient background, a few gaussian blobs
/// and a sinusoid grating, clamped to [0, 1]. Bit-identical for the same
/// `(n, size, seed)`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::InvalidShape("synth_dataset wants n >= 1".into()));
    }
    let plane = size * size;
    let mut data = vec![0.0; n * 3 * plane];
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, &["synth"], &[i as u64]);
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];

        // gradient background
        let base: Vec<f64> = (0..3).map(|_| 0.25 + 0.5 * rng.next_f64()).collect();
        let gx: Vec<f64> = (0..3).map(|_| 0.6 * rng.next_f64() - 0.3).collect();
        let gy: Vec<f64> = (0..3).map(|_| 0.6 * rng.next_f64() - 0.3).collect();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    img[c * plane + y * size + x] = base[c]
                        + gx[c] * (x as f64 / size as f64 - 0.5)
                        + gy[c] * (y as f64 / size as f64 - 0.5);
                }
            }
        }

        // gaussian blobs
        let blobs = 1 + rng.next_index(3);
        for _ in 0..blobs {
            let cx = rng.next_f64() * size as f64;
            let cy = rng.next_f64() * size as f64;
            let r = size as f64 * (0.08 + 0.17 * rng.next_f64());
            let amp: Vec<f64> = (0..3).map(|_| 0.8 * rng.next_f64() - 0.4).collect();
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx) * (x as f64 - cx)
                            + (y as f64 - cy) * (y as f64 - cy);
                        img[c * plane + y * size + x] +=
                            amp[c] * libm::exp(-d2 / (2.0 * r * r));
                    }
                }
            }
        }

        // sinusoid grating
        let theta = rng.next_f64() * std::f64::consts::PI;
        let freq = 1.0 + 3.0 * rng.next_f64();
        let phase = rng.next_f64() * 2.0 * std::f64::consts::PI;
        let gamp = 0.05 + 0.15 * rng.next_f64();
        let (ct, st) = (libm::cos(theta), libm::sin(theta));
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * ct + y as f64 * st) / size as f64;
                    img[c * plane + y * size + x] +=
                        gamp * libm::sin(2.0 * std::f64::consts::PI * freq * u + phase);
                }
            }
        }

        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        provenance.push(format!("synth:{seed}:{i}"));
    }
    ImageBatch::new(Tensor::new(vec![n, 3, size, size], data)?, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("djscc-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn ppm_all_white_loads_as_ones() {
        let dir = tmpdir();
        let path = dir.join("white.ppm");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"P6\n2 2\n255\n").unwrap();
        f.write_all(&[255u8; 12]).unwrap();
        drop(f);
        let batch = load_image(&path).unwrap();
        assert_eq!(batch.data.shape, vec![1, 3, 2, 2]);
        assert!(batch.data.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_single_pixel_values() {
        let dir = tmpdir();
        let path = dir.join("pix.ppm");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"P6\n# comment line\n1 1\n255\n").unwrap();
        f.write_all(&[128u8, 0, 255]).unwrap();
        drop(f);
        let batch = load_image(&path).unwrap();
        let d = &batch.data.data;
        assert!((d[0] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn truncated_ppm_reports_offset() {
        let dir = tmpdir();
        let path = dir.join("short.ppm");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"P6\n4 4\n255\n").unwrap();
        f.write_all(&[1u8; 10]).unwrap(); // needs 48
        drop(f);
        match load_image(&path) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_format_rejected() {
        let dir = tmpdir();
        let path = dir.join("garbage.bin");
        std::fs::write(&path, b"JFIF whatever").unwrap();
        assert!(matches!(load_image(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn png_and_ppm_load_identically() {
        let dir = tmpdir();
        let img = synth_dataset(1, 16, 99).unwrap().image(0);
        let png_path = dir.join("x.png");
        let ppm_path = dir.join("x.ppm");
        save_image(&img, &png_path).unwrap();
        save_ppm(&img, &ppm_path).unwrap();
        let from_png = load_image(&png_path).unwrap();
        let from_ppm = load_image(&ppm_path).unwrap();
        assert_eq!(from_png.data.data, from_ppm.data.data);
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let dir = tmpdir();
        let img = synth_dataset(1, 16, 5).unwrap().image(0);
        let path = dir.join("rt.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in back.data.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn save_black_is_deterministic() {
        let dir = tmpdir();
        let img = Tensor::zeros(&[3, 8, 8]);
        let p1 = dir.join("b1.png");
        let p2 = dir.join("b2.png");
        save_image(&img, &p1).unwrap();
        save_image(&img, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        let back = load_image(&p1).unwrap();
        assert!(back.data.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_patch_count_and_content() {
        let src = synth_dataset(1, 64, 3).unwrap();
        let patches = extract_patches_grid(&src, 32, 32).unwrap();
        assert_eq!(patches.len(), 4);
        // top-left patch equals the corresponding source region
        let img = src.image(0);
        let p0 = patches.image(0);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(
                        p0.data[(c * 32 + y) * 32 + x],
                        img.data[(c * 64 + y) * 64 + x]
                    );
                }
            }
        }
    }

    #[test]
    fn random_patches_reproducible() {
        let src = synth_dataset(2, 48, 4).unwrap();
        let a = extract_patches_random(&src, 16, 3, 11).unwrap();
        let b = extract_patches_random(&src, 16, 3, 11).unwrap();
        assert_eq!(a.data.data, b.data.data);
        let c = extract_patches_random(&src, 16, 3, 12).unwrap();
        assert_ne!(a.data.data, c.data.data);
    }

    #[test]
    fn patch_too_large_rejected() {
        let src = synth_dataset(1, 16, 3).unwrap();
        assert!(extract_patches_grid(&src, 32, 32).is_err());
        assert!(extract_patches_random(&src, 32, 1, 0).is_err());
    }

    #[test]
    fn synth_deterministic_and_in_range() {
        let a = synth_dataset(4, 16, 1234).unwrap();
        let b = synth_dataset(4, 16, 1234).unwrap();
        assert_eq!(a.data.data, b.data.data);
        assert!(a.data.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = synth_dataset(4, 16, 1235).unwrap();
        assert_ne!(a.data.data, c.data.data);
    }

    #[test]
    fn synth_mean_pixel_montecarlo() {
        let batch = synth_dataset(1000, 8, 7).unwrap();
        let mean: f64 = batch.data.data.iter().sum::<f64>() / batch.data.numel() as f64;
        assert!((0.35..=0.65).contains(&mean), "mean pixel {mean}");
    }
}
