//! Training schedules: the two-stage anchor framework (self-reflective
//! encoder training, then frozen-encoder adaptive decoder training), the
//! iterative and simultaneous baselines, the Adam optimizer, pair
//! evaluation, and the catastrophic-forgetting measurement protocol.
//!
//! Every random choice is drawn from a stream labelled by (seed, schedule,
//! epoch, batch, decoder slot), so runs are bit-reproducible and stage-2
//! decoder training is independent of the order the decoders are visited
//! in. Iterative training with a single decoder consumes exactly the same
//! streams as plain end-to-end training, making the two bit-identical.

use crate::channel::{self, ChannelKind};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::metrics::{self, MsSsimConfig};
use crate::models::{self, Bound, ModelKind, ModelParams};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{stream, Tensor};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub snr_set_db: Vec<f64>,
    pub epochs_stage1: usize,
    pub epochs_per_decoder: usize,
    pub cycles: usize,
    pub seed: u64,
    pub channel: ChannelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 40,
            snr_set_db: vec![1.0, 4.0, 7.0, 10.0, 13.0],
            epochs_stage1: 30,
            epochs_per_decoder: 30,
            cycles: 30,
            seed: 0,
            channel: ChannelKind::Awgn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.lr <= 0.0 || !self.lr.is_finite() {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.snr_set_db.is_empty() {
            problems.push("snr_set_db must be nonempty".into());
        }
        if self.snr_set_db.iter().any(|s| !s.is_finite()) {
            problems.push("snr_set_db entries must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Adam moments, aligned with a model's tensor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. `grads` is aligned with the
/// model's tensor order; `None` entries (parameters off the loss path)
/// are treated as zero gradients.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.frozen {
        return Err(Error::Frozen(params.kind.as_str().into()));
    }
    if grads.len() != params.tensors().len() {
        return Err(Error::Incompatible(format!(
            "{} gradient slots for {} tensors",
            grads.len(),
            params.tensors().len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    for (i, (_, tensor)) in params.tensors_mut().iter_mut().enumerate() {
        let zero;
        let g: &[f64] = match &grads[i] {
            Some(g) => {
                if g.len() != tensor.numel() {
                    return Err(Error::Incompatible(format!(
                        "gradient length {} for tensor of {}",
                        g.len(),
                        tensor.numel()
                    )));
                }
                g
            }
            None => {
                zero = vec![0.0; tensor.numel()];
                &zero
            }
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..tensor.numel() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            tensor.data[j] -= lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        }
    }
    Ok(())
}

/// Mean squared error between two equally shaped tape values.
pub fn mse_loss(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::ShapeMismatch(
            t.shape(a).to_vec(),
            t.shape(b).to_vec(),
        ));
    }
    let diff = t.sub(a, b)?;
    let sq = t.mul(diff, diff)?;
    t.reduce_mean(sq)
}

/// Pull the gradients for one bound model out of a backward pass.
pub fn model_grads(grads: &Gradients, bound: &Bound) -> Vec<Option<Vec<f64>>> {
    bound
        .vars
        .iter()
        .map(|&v| grads.get(v).map(|g| g.to_vec()))
        .collect()
}

/// True when every gradient slot is absent (stop-gradient contract).
pub fn grads_absent(grads: &[Option<Vec<f64>>]) -> bool {
    grads.iter().all(|g| g.is_none())
}

fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Forward one batch through encoder -> normalize -> channel -> decoder ->
/// MSE, then update the decoder (always) and the encoder (when not frozen
/// and `update_encoder` is set).
#[allow(clippy::too_many_arguments)]
fn joint_batch_step(
    enc: &mut ModelParams,
    enc_state: Option<&mut AdamState>,
    dec: &mut ModelParams,
    dec_state: &mut AdamState,
    batch: &Tensor,
    snr_db: f64,
    cfg: &TrainConfig,
    noise: &mut crate::tensor::Rng,
    update_encoder: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc_bound = enc.bind(&mut tape);
    let dec_bound = dec.bind(&mut tape);
    let x = tape.constant(batch.data.clone(), batch.shape.clone());
    let latent = models::encoder_forward(&mut tape, enc, &enc_bound, x, snr_db)?;
    let norm = channel::power_normalize_tape(&mut tape, latent)?;
    let received = channel::transmit_tape(&mut tape, norm, cfg.channel, snr_db, noise)?;
    let recon = models::decoder_forward(&mut tape, dec, &dec_bound, received, snr_db)?;
    let loss = mse_loss(&mut tape, recon, x)?;
    let loss_value = tape.value(loss);
    if !loss_value.is_finite() {
        return Ok(loss_value); // caller raises the NaN abort with context
    }
    let grads = tape.backward(loss)?;
    if update_encoder && !enc.frozen {
        let enc_grads = model_grads(&grads, &enc_bound);
        let state = enc_state.ok_or_else(|| {
            Error::Incompatible("encoder update requested without optimizer state".into())
        })?;
        adam_step(enc, &enc_grads, state, cfg.lr)?;
    }
    let dec_grads = model_grads(&grads, &dec_bound);
    adam_step(dec, &dec_grads, dec_state, cfg.lr)?;
    Ok(loss_value)
}

/// One epoch of paired training under the stream label `(salt, indices)`.
#[allow(clippy::too_many_arguments)]
fn run_epoch_pair(
    enc: &mut ModelParams,
    enc_state: Option<&mut AdamState>,
    dec: &mut ModelParams,
    dec_state: &mut AdamState,
    data: &ImageBatch,
    cfg: &TrainConfig,
    salt: &str,
    stream_prefix: &[u64],
    epoch: u64,
    update_encoder: bool,
) -> Result<f64> {
    let mut shuffle_idx: Vec<u64> = stream_prefix.to_vec();
    shuffle_idx.push(epoch);
    let order = stream(cfg.seed, &[salt, "shuffle"], &shuffle_idx).permutation(data.len());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut enc_state = enc_state;
    for (bi, chunk) in batches(&order, cfg.batch_size).into_iter().enumerate() {
        let mut idx: Vec<u64> = stream_prefix.to_vec();
        idx.push(epoch);
        idx.push(bi as u64);
        let snr_pick = stream(cfg.seed, &[salt, "snr"], &idx).next_index(cfg.snr_set_db.len());
        let snr_db = cfg.snr_set_db[snr_pick];
        let mut noise = stream(cfg.seed, &[salt, "noise"], &idx);
        let batch = data.gather(&chunk);
        let loss = joint_batch_step(
            enc,
            enc_state.as_deref_mut(),
            dec,
            dec_state,
            &batch,
            snr_db,
            cfg,
            &mut noise,
            update_encoder,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: salt.into(),
                epoch: epoch as usize,
                batch: bi,
            });
        }
        total += loss;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Stage 1: jointly train the encoder and its symmetric decoder
/// (self-reflective learning). Returns the per-epoch loss curve.
pub fn train_stage1(
    enc: &mut ModelParams,
    mirror: &mut ModelParams,
    data: &ImageBatch,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if mirror.kind != ModelKind::Mirror {
        return Err(Error::Incompatible(format!(
            "stage 1 pairs the encoder with its mirror, got {}",
            mirror.kind.as_str()
        )));
    }
    if enc.config != mirror.config {
        return Err(Error::Incompatible(
            "encoder and mirror must share a geometry".into(),
        ));
    }
    let mut enc_state = AdamState::new(enc);
    let mut dec_state = AdamState::new(mirror);
    let mut curve = Vec::with_capacity(cfg.epochs_stage1);
    for epoch in 0..cfg.epochs_stage1 {
        let loss = run_epoch_pair(
            enc,
            Some(&mut enc_state),
            mirror,
            &mut dec_state,
            data,
            cfg,
            "stage1",
            &[],
            epoch as u64,
            true,
        )?;
        curve.push(loss);
    }
    Ok(curve)
}

/// Freeze the encoder as the anchor; returns its checksum for later
/// verification that stage 2 left it untouched.
pub fn freeze_encoder(enc: &mut ModelParams) -> u64 {
    enc.set_frozen(true);
    enc.checksum()
}

/// Stage 2: adapt one user decoder to the frozen anchor encoder.
/// Backpropagation stops after the decoder; the encoder binds detached and
/// never sees a gradient. Streams are labelled by the decoder's stable
/// slot, so training order cannot influence the result.
pub fn train_stage2_decoder(
    anchor: &ModelParams,
    dec: &mut ModelParams,
    data: &ImageBatch,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !anchor.frozen {
        return Err(Error::NotFrozen("encoder".into()));
    }
    let mut enc = anchor.clone();
    let mut dec_state = AdamState::new(dec);
    let slot = dec.kind.slot();
    let mut curve = Vec::with_capacity(cfg.epochs_per_decoder);
    for epoch in 0..cfg.epochs_per_decoder {
        let loss = run_epoch_pair(
            &mut enc,
            None,
            dec,
            &mut dec_state,
            data,
            cfg,
            "stage2",
            &[slot],
            epoch as u64,
            false,
        )?;
        curve.push(loss);
    }
    debug_assert_eq!(enc.checksum(), anchor.checksum());
    Ok(curve)
}

/// Single-user end-to-end training; the degenerate case of the iterative
/// schedule, sharing its streams epoch for epoch.
pub fn train_end_to_end(
    enc: &mut ModelParams,
    dec: &mut ModelParams,
    data: &ImageBatch,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut enc_state = AdamState::new(enc);
    let mut dec_state = AdamState::new(dec);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = run_epoch_pair(
            enc,
            Some(&mut enc_state),
            dec,
            &mut dec_state,
            data,
            cfg,
            "iterative",
            &[],
            epoch as u64,
            true,
        )?;
        curve.push(loss);
    }
    Ok(curve)
}

/// Snapshots produced by [`train_iterative`]: the encoder after every epoch
/// and each decoder right after its own training epoch in every cycle.
pub struct IterativeRun {
    pub encoder_snapshots: Vec<ModelParams>,
    pub decoder_snapshots: Vec<Vec<ModelParams>>,
    pub losses: Vec<f64>,
}

/// Iterative baseline: pair the encoder with each decoder for one epoch,
/// move to the next decoder, and cycle. Snapshots the encoder after every
/// epoch (cycles x decoders snapshots in total).
pub fn train_iterative(
    enc: &mut ModelParams,
    decs: &mut [ModelParams],
    data: &ImageBatch,
    cfg: &TrainConfig,
) -> Result<IterativeRun> {
    cfg.validate()?;
    if decs.is_empty() {
        return Err(Error::Incompatible("iterative training needs decoders".into()));
    }
    let mut enc_state = AdamState::new(enc);
    let mut dec_states: Vec<AdamState> = decs.iter().map(AdamState::new).collect();
    let mut encoder_snapshots = Vec::new();
    let mut decoder_snapshots = Vec::new();
    let mut losses = Vec::new();
    for cycle in 0..cfg.cycles {
        let mut cycle_decs = Vec::new();
        for slot in 0..decs.len() {
            let epoch = (cycle * decs.len() + slot) as u64;
            let loss = run_epoch_pair(
                enc,
                Some(&mut enc_state),
                &mut decs[slot],
                &mut dec_states[slot],
                data,
                cfg,
                "iterative",
                &[],
                epoch,
                true,
            )?;
            losses.push(loss);
            encoder_snapshots.push(enc.clone());
            cycle_decs.push(decs[slot].clone());
        }
        decoder_snapshots.push(cycle_decs);
    }
    Ok(IterativeRun {
        encoder_snapshots,
        decoder_snapshots,
        losses,
    })
}

/// Simultaneous baseline: one encode per batch, an independent channel draw
/// per decoder, a summed loss for the encoder (so its gradient is the sum
/// of all decoder paths) while each decoder learns from its own loss only.
pub fn train_simultaneous(
    enc: &mut ModelParams,
    decs: &mut [ModelParams],
    data: &ImageBatch,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if decs.is_empty() {
        return Err(Error::Incompatible(
            "simultaneous training needs decoders".into(),
        ));
    }
    let mut enc_state = AdamState::new(enc);
    let mut dec_states: Vec<AdamState> = decs.iter().map(AdamState::new).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = stream(cfg.seed, &["simultaneous", "shuffle"], &[epoch as u64])
            .permutation(data.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let snr_pick = stream(
                cfg.seed,
                &["simultaneous", "snr"],
                &[epoch as u64, bi as u64],
            )
            .next_index(cfg.snr_set_db.len());
            let snr_db = cfg.snr_set_db[snr_pick];
            let batch = data.gather(&chunk);

            let mut tape = Tape::new();
            let enc_bound = enc.bind(&mut tape);
            let dec_bounds: Vec<Bound> = decs.iter().map(|d| d.bind(&mut tape)).collect();
            let x = tape.constant(batch.data.clone(), batch.shape.clone());
            let latent = models::encoder_forward(&mut tape, enc, &enc_bound, x, snr_db)?;
            let norm = channel::power_normalize_tape(&mut tape, latent)?;

            let mut total_loss: Option<Var> = None;
            for (slot, dec) in decs.iter().enumerate() {
                let mut noise = stream(
                    cfg.seed,
                    &["simultaneous", "noise"],
                    &[epoch as u64, bi as u64, slot as u64],
                );
                let received =
                    channel::transmit_tape(&mut tape, norm, cfg.channel, snr_db, &mut noise)?;
                let recon =
                    models::decoder_forward(&mut tape, dec, &dec_bounds[slot], received, snr_db)?;
                let loss_k = mse_loss(&mut tape, recon, x)?;
                total_loss = Some(match total_loss {
                    None => loss_k,
                    Some(acc) => tape.add(acc, loss_k)?,
                });
            }
            let loss = total_loss.unwrap();
            let loss_value = tape.value(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "simultaneous".into(),
                    epoch,
                    batch: bi,
                });
            }
            let grads = tape.backward(loss)?;
            let enc_grads = model_grads(&grads, &enc_bound);
            adam_step(enc, &enc_grads, &mut enc_state, cfg.lr)?;
            for (slot, dec) in decs.iter_mut().enumerate() {
                let dg = model_grads(&grads, &dec_bounds[slot]);
                adam_step(dec, &dg, &mut dec_states[slot], cfg.lr)?;
            }
            total += loss_value;
            count += 1;
        }
        curve.push(total / count as f64);
    }
    Ok(curve)
}

// ---- evaluation ----------------------------------------------------------------

/// Mean per-image PSNR and MS-SSIM of an encoder/decoder pair over an eval
/// set at one SNR. Noise realizations are derived per image index and
/// shared across SNR levels (common random numbers), so SNR sweeps are
/// smooth and deterministic.
pub fn evaluate_pair(
    enc: &ModelParams,
    dec: &ModelParams,
    eval: &ImageBatch,
    snr_db: f64,
    kind: ChannelKind,
    eval_seed: u64,
) -> Result<(f64, f64)> {
    let n = eval.len();
    let k = enc.config.latent_len()?;
    let sigma = channel::snr_to_sigma(snr_db);
    let ms_cfg = MsSsimConfig::default();
    let chunk = 32usize;
    let mut psnr_sum = 0.0;
    let mut ms_sum = 0.0;
    let mut idx = 0usize;
    while idx < n {
        let hi = (idx + chunk).min(n);
        let indices: Vec<usize> = (idx..hi).collect();
        let batch = eval.gather(&indices);
        let latent = models::encode(enc, &batch, snr_db)?;
        let norm = channel::power_normalize(&latent)?;

        // channel with per-image streams
        let mut received = norm.clone();
        for (row, &img_i) in indices.iter().enumerate() {
            let mut z = stream(eval_seed, &["eval", "noise"], &[img_i as u64]);
            let row_data = &mut received.data[row * k..(row + 1) * k];
            match kind {
                ChannelKind::Awgn => {
                    for v in row_data.iter_mut() {
                        *v += sigma * z.next_normal();
                    }
                }
                ChannelKind::Rayleigh => {
                    let mut hs = stream(eval_seed, &["eval", "fading"], &[img_i as u64]);
                    let h = channel::draw_fading(&mut hs);
                    for p in 0..k / 2 {
                        let re = row_data[2 * p];
                        let im = row_data[2 * p + 1];
                        row_data[2 * p] = h.h_re * re - h.h_im * im + sigma * z.next_normal();
                        row_data[2 * p + 1] = h.h_re * im + h.h_im * re + sigma * z.next_normal();
                    }
                    let single = Tensor::new(vec![1, k], row_data.to_vec())?;
                    let eq = channel::equalize(&single, &[h])?;
                    row_data.copy_from_slice(&eq.data);
                }
            }
        }

        let recon = models::decode(dec, &received, snr_db)?;
        let img_len = 3 * eval.height() * eval.width();
        for (row, &img_i) in indices.iter().enumerate() {
            let original = eval.image(img_i);
            let rebuilt = Tensor::new(
                original.shape.clone(),
                recon.data[row * img_len..(row + 1) * img_len].to_vec(),
            )?;
            psnr_sum += metrics::psnr(&original, &rebuilt, 1.0)?;
            ms_sum += metrics::ms_ssim(&original, &rebuilt, &ms_cfg)?;
        }
        idx = hi;
    }
    Ok((psnr_sum / n as f64, ms_sum / n as f64))
}

/// Forgetting-protocol labels: the encoder snapshot taken right after the
/// decoder's own epoch, then one, two and three epochs later.
pub const FORGETTING_LABELS: [&str; 4] = ["targeted", "after_1", "after_2", "after_3"];

#[derive(Debug, Clone)]
pub struct ForgettingCell {
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone)]
pub struct ForgettingRow {
    pub decoder: ModelKind,
    pub label: &'static str,
    pub cells: Vec<ForgettingCell>,
}

#[derive(Debug, Clone)]
pub struct ForgettingReport {
    pub rows: Vec<ForgettingRow>,
}

impl ForgettingReport {
    /// Mean PSNR over eval SNRs for one (decoder, label) row.
    pub fn mean_psnr(&self, decoder: ModelKind, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.decoder == decoder && r.label == label)
            .map(|r| r.cells.iter().map(|c| c.psnr_db).sum::<f64>() / r.cells.len() as f64)
    }
}

/// Measure catastrophic forgetting from an iterative run: each decoder is
/// held at the state it had right after its own epoch in the penultimate
/// cycle, and paired with the encoder snapshots taken zero to three epochs
/// later. With the training order A, B, C, D this covers every decoder with
/// all four labels inside the run.
pub fn forgetting_eval(
    run: &IterativeRun,
    eval: &ImageBatch,
    snr_list: &[f64],
    kind: ChannelKind,
    eval_seed: u64,
) -> Result<ForgettingReport> {
    let cycles = run.decoder_snapshots.len();
    if cycles < 2 {
        return Err(Error::MissingSnapshot(
            "forgetting evaluation needs at least two iterative cycles".into(),
        ));
    }
    let n_dec = run.decoder_snapshots[0].len();
    let anchor_cycle = cycles - 2;
    let mut rows = Vec::new();
    for slot in 0..n_dec {
        let dec = &run.decoder_snapshots[anchor_cycle][slot];
        let base_epoch = anchor_cycle * n_dec + slot;
        for (offset, label) in FORGETTING_LABELS.iter().enumerate() {
            let enc_idx = base_epoch + offset;
            let enc = run
                .encoder_snapshots
                .get(enc_idx)
                .ok_or_else(|| Error::MissingSnapshot(format!("encoder epoch {enc_idx}")))?;
            let mut cells = Vec::with_capacity(snr_list.len());
            for &snr in snr_list {
                let (psnr_db, ms) = evaluate_pair(enc, dec, eval, snr, kind, eval_seed)?;
                cells.push(ForgettingCell {
                    snr_db: snr,
                    psnr_db,
                    ms_ssim: ms,
                });
            }
            rows.push(ForgettingRow {
                decoder: dec.kind,
                label,
                cells,
            });
        }
    }
    Ok(ForgettingReport { rows })
}
