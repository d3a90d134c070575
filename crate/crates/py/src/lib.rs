//! Python bindings for the djscc toolkit: tensors, models, the wireless
//! channel, the training schedules and the image quality metrics.
//!
//! Build with `cargo build -p djscc-py --release`; the resulting
//! `libdjscc.so` imports as the `djscc` module once renamed/symlinked to
//! `djscc.so` on the Python path (`python/smoke_test.py` does this
//! automatically).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use djscc_core::channel::{self, ChannelConfig, ChannelKind};
use djscc_core::data;
use djscc_core::metrics::{self, MsSsimConfig};
use djscc_core::models::{self, ModelConfig, ModelKind, ModelParams};
use djscc_core::tensor::{Rng, Tensor as CoreTensor};
use djscc_core::training::{self, TrainConfig};

fn err(e: djscc_core::Error) -> PyErr {
    match &e {
        djscc_core::Error::Io(_) | djscc_core::Error::Png(_) | djscc_core::Error::Parse { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(kind: &str) -> PyResult<ModelKind> {
    ModelKind::parse(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown model kind `{kind}`")))
}

fn parse_channel(kind: &str) -> PyResult<ChannelKind> {
    ChannelKind::parse(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown channel `{kind}`")))
}

/// Dense f64 tensor: flat row-major data plus a shape.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: CoreTensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, numel={})", self.inner.shape, self.inner.numel())
    }
}

/// Named parameter collection for one encoder or decoder.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.as_str().to_string()
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.frozen
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: models::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kind={}, params={}, frozen={})",
            self.inner.kind.as_str(),
            self.inner.param_count(),
            self.inner.frozen
        )
    }
}

fn model_config(image_size: usize, widths: (usize, usize), rate_den: u32) -> ModelConfig {
    ModelConfig {
        image_h: image_size,
        image_w: image_size,
        widths: [widths.0, widths.1],
        rate_den,
        ..ModelConfig::default()
    }
}

/// Build the base-station encoder.
#[pyfunction]
#[pyo3(signature = (image_size=32, widths=(16, 32), rate_den=16, seed=0))]
fn build_encoder(
    image_size: usize,
    widths: (usize, usize),
    rate_den: u32,
    seed: u64,
) -> PyResult<PyModel> {
    let cfg = model_config(image_size, widths, rate_den);
    Ok(PyModel {
        inner: models::build_encoder(&cfg, seed).map_err(err)?,
    })
}

/// Build a decoder: "mirror", "attention", "conv", "resnet" or "vgg".
#[pyfunction]
#[pyo3(signature = (kind, image_size=32, widths=(16, 32), rate_den=16, seed=0, depth_scale=1))]
fn build_decoder(
    kind: &str,
    image_size: usize,
    widths: (usize, usize),
    rate_den: u32,
    seed: u64,
    depth_scale: usize,
) -> PyResult<PyModel> {
    let mut cfg = model_config(image_size, widths, rate_den);
    cfg.depth_scale = depth_scale;
    Ok(PyModel {
        inner: models::build_decoder(parse_kind(kind)?, &cfg, seed).map_err(err)?,
    })
}

/// Encode an image (or image batch) into the transmitted latent.
#[pyfunction]
fn encode(model: &PyModel, image: &PyTensor, snr_db: f64) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: models::encode(&model.inner, &image.inner, snr_db).map_err(err)?,
    })
}

/// Decode a received latent back into image space.
#[pyfunction]
fn decode(model: &PyModel, latent: &PyTensor, snr_db: f64) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: models::decode(&model.inner, &latent.inner, snr_db).map_err(err)?,
    })
}

/// Scale a latent block (or each row) to unit mean power.
#[pyfunction]
fn power_normalize(latent: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: channel::power_normalize(&latent.inner).map_err(err)?,
    })
}

/// Per-component noise std for an SNR under unit signal power.
#[pyfunction]
fn snr_to_sigma(snr_db: f64) -> f64 {
    channel::snr_to_sigma(snr_db)
}

/// Transmit a power-normalized latent over AWGN or Rayleigh (equalized).
#[pyfunction]
#[pyo3(signature = (latent, snr_db, channel="awgn", seed=0))]
fn transmit(latent: &PyTensor, snr_db: f64, channel: &str, seed: u64) -> PyResult<PyTensor> {
    let kind = parse_channel(channel)?;
    let cfg = ChannelConfig {
        kind,
        snr_db,
        seed,
    };
    let mut rng = Rng::new(seed);
    let out = match kind {
        ChannelKind::Awgn => channel::awgn_transmit(&latent.inner, &cfg, &mut rng),
        ChannelKind::Rayleigh => {
            let (y, draws) = channel::rayleigh_transmit(&latent.inner, &cfg, &mut rng).map_err(err)?;
            channel::equalize(&y, &draws).map_err(err)?
        }
    };
    Ok(PyTensor { inner: out })
}

/// Empirical SNR between a clean and a received block, in dB.
#[pyfunction]
fn measure_empirical_snr(clean: &PyTensor, received: &PyTensor) -> PyResult<f64> {
    channel::measure_empirical_snr(&clean.inner, &received.inner).map_err(err)
}

/// Peak signal-to-noise ratio in dB.
#[pyfunction]
#[pyo3(signature = (a, b, max_val=1.0))]
fn psnr(a: &PyTensor, b: &PyTensor, max_val: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, max_val).map_err(err)
}

/// Multi-scale structural similarity in [0, 1].
#[pyfunction]
fn ms_ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ms_ssim(&a.inner, &b.inner, &MsSsimConfig::default()).map_err(err)
}

/// Procedural synthetic dataset as a `[n, 3, size, size]` tensor.
#[pyfunction]
fn synth_dataset(n: usize, size: usize, seed: u64) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: data::synth_dataset(n, size, seed).map_err(err)?.data,
    })
}

/// Load a PNG or binary PPM file as a `[1, 3, H, W]` tensor in [0, 1].
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: data::load_image(&path).map_err(err)?.data,
    })
}

/// Save a `[3, H, W]` tensor in [0, 1] as an 8-bit RGB PNG.
#[pyfunction]
fn save_image(image: &PyTensor, path: PathBuf) -> PyResult<()> {
    data::save_image(&image.inner, &path).map_err(err)
}

fn train_config(
    lr: f64,
    batch_size: usize,
    snr_set_db: Vec<f64>,
    seed: u64,
    channel: &str,
) -> PyResult<TrainConfig> {
    Ok(TrainConfig {
        lr,
        batch_size,
        snr_set_db,
        seed,
        channel: parse_channel(channel)?,
        ..TrainConfig::default()
    })
}

fn batch_from(images: &PyTensor) -> PyResult<data::ImageBatch> {
    let n = images.inner.shape.first().copied().unwrap_or(0);
    data::ImageBatch::new(
        images.inner.clone(),
        (0..n).map(|i| format!("py:{i}")).collect(),
    )
    .map_err(err)
}

/// Two-stage anchor training: stage-1 self-reflective encoder training with
/// the symmetric mirror, freeze, then per-decoder adaptation. Returns
/// (frozen encoder, mirror, trained decoders).
#[pyfunction]
#[pyo3(signature = (images, decoders, epochs_stage1, epochs_per_decoder, lr=5e-4,
                    batch_size=40, snr_set_db=vec![1.0, 4.0, 7.0, 10.0, 13.0],
                    seed=0, channel="awgn", image_size=32, widths=(16, 32)))]
#[allow(clippy::too_many_arguments)]
fn train_two_stage(
    images: &PyTensor,
    decoders: Vec<String>,
    epochs_stage1: usize,
    epochs_per_decoder: usize,
    lr: f64,
    batch_size: usize,
    snr_set_db: Vec<f64>,
    seed: u64,
    channel: &str,
    image_size: usize,
    widths: (usize, usize),
) -> PyResult<(PyModel, PyModel, Vec<PyModel>)> {
    let batch = batch_from(images)?;
    let mut cfg = train_config(lr, batch_size, snr_set_db, seed, channel)?;
    cfg.epochs_stage1 = epochs_stage1;
    cfg.epochs_per_decoder = epochs_per_decoder;
    let mcfg = model_config(image_size, widths, 16);
    let mut enc = models::build_encoder(&mcfg, seed).map_err(err)?;
    let mut mirror = models::build_symmetric_decoder(&enc, seed).map_err(err)?;
    training::train_stage1(&mut enc, &mut mirror, &batch, &cfg).map_err(err)?;
    training::freeze_encoder(&mut enc);
    let mut decs = Vec::new();
    for kind in &decoders {
        let mut dec = models::build_decoder(parse_kind(kind)?, &mcfg, seed).map_err(err)?;
        training::train_stage2_decoder(&enc, &mut dec, &batch, &cfg).map_err(err)?;
        decs.push(PyModel { inner: dec });
    }
    Ok((
        PyModel { inner: enc },
        PyModel { inner: mirror },
        decs,
    ))
}

/// Evaluate an encoder/decoder pair over an eval batch at one SNR.
/// Returns a dict with mean `psnr_db` and `ms_ssim`.
#[pyfunction]
#[pyo3(signature = (encoder, decoder, images, snr_db, channel="awgn", eval_seed=1000))]
fn evaluate_pair(
    py: Python<'_>,
    encoder: &PyModel,
    decoder: &PyModel,
    images: &PyTensor,
    snr_db: f64,
    channel: &str,
    eval_seed: u64,
) -> PyResult<Py<PyDict>> {
    let batch = batch_from(images)?;
    let (p, m) = training::evaluate_pair(
        &encoder.inner,
        &decoder.inner,
        &batch,
        snr_db,
        parse_channel(channel)?,
        eval_seed,
    )
    .map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("psnr_db", p)?;
    dict.set_item("ms_ssim", m)?;
    Ok(dict.into())
}

#[pymodule]
fn djscc(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(build_decoder, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(power_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(snr_to_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(transmit, m)?)?;
    m.add_function(wrap_pyfunction!(measure_empirical_snr, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(train_two_stage, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    Ok(())
}
