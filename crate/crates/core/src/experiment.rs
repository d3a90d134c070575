//! Experiment orchestration behind the CLI subcommands: dataset assembly,
//! schedule execution with checkpoint/manifest emission, evaluation sweeps
//! and the forgetting report.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::channel::ChannelKind;
use crate::config::{DataSource, ExperimentConfig, Schedule};
use crate::data::{self, ImageBatch};
use crate::error::{Error, Result};
use crate::models::{self, ModelParams};
use crate::report::{self, EvalRecord, Series};
use crate::tensor::{fnv1a, stream};
use crate::training::{self, IterativeRun, FORGETTING_LABELS};

/// Assemble the (train, eval) datasets named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(ImageBatch, ImageBatch)> {
    match &cfg.source {
        DataSource::Synth => {
            if cfg.model.image_h != cfg.model.image_w {
                return Err(Error::InvalidShape(
                    "the synthetic dataset generates square patches".into(),
                ));
            }
            let train_seed = stream(cfg.train.seed, &["data", "train"], &[]).next_u64();
            let eval_seed = stream(cfg.eval_seed, &["data", "eval"], &[]).next_u64();
            let train = data::synth_dataset(cfg.train_images, cfg.model.image_h, train_seed)?;
            let eval = data::synth_dataset(cfg.eval_images, cfg.model.image_h, eval_seed)?;
            Ok((train, eval))
        }
        DataSource::Directory(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png") | Some("ppm")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::InvalidShape(format!(
                    "no .png or .ppm files in {}",
                    dir.display()
                )));
            }
            let mut patches: Option<ImageBatch> = None;
            for file in &files {
                let img = data::load_image(file)?;
                let grid =
                    data::extract_patches_grid(&img, cfg.model.image_h, cfg.patch_stride)?;
                patches = Some(match patches {
                    None => grid,
                    Some(acc) => concat_batches(acc, grid)?,
                });
            }
            let all = patches.unwrap();
            let need = cfg.train_images + cfg.eval_images;
            if all.len() < need {
                return Err(Error::InvalidShape(format!(
                    "dataset yields {} patches, config needs {need}",
                    all.len()
                )));
            }
            let train_idx: Vec<usize> = (0..cfg.train_images).collect();
            let eval_idx: Vec<usize> =
                (cfg.train_images..cfg.train_images + cfg.eval_images).collect();
            let train = ImageBatch::new(
                all.gather(&train_idx),
                train_idx.iter().map(|&i| all.provenance[i].clone()).collect(),
            )?;
            let eval = ImageBatch::new(
                all.gather(&eval_idx),
                eval_idx.iter().map(|&i| all.provenance[i].clone()).collect(),
            )?;
            Ok((train, eval))
        }
    }
}

fn concat_batches(a: ImageBatch, b: ImageBatch) -> Result<ImageBatch> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidShape("patch sizes differ across files".into()));
    }
    let mut data_vec = a.data.data.clone();
    data_vec.extend_from_slice(&b.data.data);
    let mut provenance = a.provenance.clone();
    provenance.extend(b.provenance.iter().cloned());
    let n = a.len() + b.len();
    ImageBatch::new(
        crate::tensor::Tensor::new(vec![n, 3, a.height(), a.width()], data_vec)?,
        provenance,
    )
}

fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

fn save_model(run_dir: &Path, name: &str, params: &ModelParams) -> Result<(String, u64)> {
    let dir = checkpoint_dir(run_dir);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.ckpt"));
    models::save_checkpoint(params, &path)?;
    let digest = fnv1a(&std::fs::read(&path)?);
    Ok((format!("{name}.ckpt"), digest))
}

fn write_manifest(
    run_dir: &Path,
    cfg: &ExperimentConfig,
    checksums: &[(String, u64)],
) -> Result<()> {
    let mut text = cfg.render();
    text.push_str("\n[manifest]\n");
    for (name, digest) in checksums {
        text.push_str(&format!("checksum_{name} = {digest:016x}\n"));
    }
    report::write_text(&run_dir.join("manifest.txt"), &text)
}

/// Train under the configured schedule; writes checkpoints, a manifest and
/// the loss-curve CSV into the run directory, which is returned.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let run_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&run_dir)?;
    let (train_set, _eval) = load_datasets(cfg)?;
    let tcfg = &cfg.train;
    let seed = tcfg.seed;

    let mut loss_rows: Vec<(String, String, usize, f64)> = Vec::new();
    let mut checksums: Vec<(String, u64)> = Vec::new();
    let schedule_name = cfg.schedule.as_str().to_string();

    let mut enc = models::build_encoder(&cfg.model, seed)?;
    let mut decoders: Vec<ModelParams> = cfg
        .roster
        .iter()
        .map(|&k| models::build_decoder(k, &cfg.model, seed))
        .collect::<Result<_>>()?;

    let outcome: Result<()> = (|| {
        match cfg.schedule {
            Schedule::TwoStage => {
                let mut mirror = models::build_symmetric_decoder(&enc, seed)?;
                let curve = training::train_stage1(&mut enc, &mut mirror, &train_set, tcfg)?;
                for (e, l) in curve.iter().enumerate() {
                    loss_rows.push((schedule_name.clone(), "stage1".into(), e, *l));
                }
                training::freeze_encoder(&mut enc);
                checksums.push(save_model(&run_dir, "mirror", &mirror)?);
                for dec in decoders.iter_mut() {
                    let curve = training::train_stage2_decoder(&enc, dec, &train_set, tcfg)?;
                    let stage = format!("stage2_{}", dec.kind.as_str());
                    for (e, l) in curve.iter().enumerate() {
                        loss_rows.push((schedule_name.clone(), stage.clone(), e, *l));
                    }
                }
            }
            Schedule::Iterative => {
                let run = training::train_iterative(&mut enc, &mut decoders, &train_set, tcfg)?;
                for (e, l) in run.losses.iter().enumerate() {
                    let slot = e % cfg.roster.len();
                    let stage = format!(
                        "cycle{}_{}",
                        e / cfg.roster.len(),
                        cfg.roster[slot].as_str()
                    );
                    loss_rows.push((schedule_name.clone(), stage, e, *l));
                }
                for (e, snap) in run.encoder_snapshots.iter().enumerate() {
                    checksums.push(save_model(&run_dir, &format!("snap_enc_{e:04}"), snap)?);
                }
                for (c, cycle) in run.decoder_snapshots.iter().enumerate() {
                    for snap in cycle {
                        checksums.push(save_model(
                            &run_dir,
                            &format!("snap_dec_c{c:04}_{}", snap.kind.as_str()),
                            snap,
                        )?);
                    }
                }
            }
            Schedule::Simultaneous => {
                let curve = training::train_simultaneous(
                    &mut enc,
                    &mut decoders,
                    &train_set,
                    tcfg,
                    cfg.epochs_simultaneous,
                )?;
                for (e, l) in curve.iter().enumerate() {
                    loss_rows.push((schedule_name.clone(), "simultaneous".into(), e, *l));
                }
            }
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        // params hold the last finite state: forward aborts before updating
        // on a non-finite loss, so dump what we have for post-mortems
        let _ = save_model(&run_dir, "encoder_lastgood", &enc);
        for dec in &decoders {
            let _ = save_model(&run_dir, &format!("dec_{}_lastgood", dec.kind.as_str()), dec);
        }
        return Err(e);
    }

    checksums.push(save_model(&run_dir, "encoder", &enc)?);
    for dec in &decoders {
        checksums.push(save_model(&run_dir, &format!("dec_{}", dec.kind.as_str()), dec)?);
    }
    checksums.sort();
    report::write_text(&run_dir.join("loss_curve.csv"), &report::loss_curve_csv(&loss_rows))?;
    write_manifest(&run_dir, cfg, &checksums)?;
    Ok(run_dir)
}

/// Load the config a run directory was produced with.
pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let manifest = std::fs::read_to_string(run_dir.join("manifest.txt"))?;
    ExperimentConfig::parse(&manifest, &[])
}

fn load_model(run_dir: &Path, name: &str) -> Result<ModelParams> {
    let path = checkpoint_dir(run_dir).join(format!("{name}.ckpt"));
    if !path.exists() {
        return Err(Error::MissingSnapshot(path.display().to_string()));
    }
    models::load_checkpoint(&path)
}

/// Evaluate every (decoder, SNR) pair of a finished run and write
/// `records.csv`. Sweeps parallelize over the pairs.
pub fn cmd_eval(
    run_dir: &Path,
    snr_override: Option<&[f64]>,
    channel_override: Option<ChannelKind>,
) -> Result<PathBuf> {
    let cfg = load_run_config(run_dir)?;
    let (_, eval_set) = load_datasets(&cfg)?;
    let enc = load_model(run_dir, "encoder")?;
    let mut decs = Vec::new();
    for kind in &cfg.roster {
        let dec = load_model(run_dir, &format!("dec_{}", kind.as_str()))?;
        if dec.config.latent_len()? != enc.config.latent_len()? {
            return Err(Error::Incompatible(format!(
                "decoder {} expects latent {}, encoder produces {}",
                kind.as_str(),
                dec.config.latent_len()?,
                enc.config.latent_len()?
            )));
        }
        decs.push(dec);
    }
    let snrs: Vec<f64> = snr_override
        .map(|s| s.to_vec())
        .unwrap_or_else(|| cfg.eval_snr_db.clone());
    let kind = channel_override.unwrap_or(cfg.train.channel);

    let jobs: Vec<(usize, f64)> = decs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| snrs.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<EvalRecord>> = jobs
        .par_iter()
        .map(|&(i, snr)| {
            let (psnr_db, ms) =
                training::evaluate_pair(&enc, &decs[i], &eval_set, snr, kind, cfg.eval_seed)?;
            Ok(EvalRecord {
                schedule: cfg.schedule.as_str().into(),
                decoder: decs[i].kind.as_str().into(),
                channel: kind.as_str().into(),
                snr_db: snr,
                psnr_db,
                ms_ssim: ms,
                seed: cfg.train.seed,
                snapshot: "final".into(),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    if cfg.save_images {
        dump_reconstructions(run_dir, &cfg, &enc, &decs, &eval_set, &snrs)?;
    }

    let path = run_dir.join("records.csv");
    report::write_text(&path, &report::records_to_csv(&records))?;
    Ok(path)
}

/// Dump a handful of original/reconstructed pairs as PNG for eyeballing.
fn dump_reconstructions(
    run_dir: &Path,
    cfg: &ExperimentConfig,
    enc: &ModelParams,
    decs: &[ModelParams],
    eval_set: &ImageBatch,
    snrs: &[f64],
) -> Result<()> {
    let dir = run_dir.join("images");
    std::fs::create_dir_all(&dir)?;
    let count = eval_set.len().min(4);
    let snr = snrs.first().copied().unwrap_or(7.0);
    for i in 0..count {
        let original = eval_set.image(i);
        data::save_image(&original, &dir.join(format!("orig_{i}.png")))?;
        for dec in decs {
            let latent = models::encode(enc, &original, snr)?;
            let norm = crate::channel::power_normalize(&latent)?;
            let mut rng = stream(cfg.eval_seed, &["dump", "noise"], &[i as u64]);
            let ccfg = crate::channel::ChannelConfig {
                kind: cfg.train.channel,
                snr_db: snr,
                seed: 0,
            };
            let received = match cfg.train.channel {
                ChannelKind::Awgn => crate::channel::awgn_transmit(&norm, &ccfg, &mut rng),
                ChannelKind::Rayleigh => {
                    let (y, h) = crate::channel::rayleigh_transmit(&norm, &ccfg, &mut rng)?;
                    crate::channel::equalize(&y, &h)?
                }
            };
            let mut recon = models::decode(dec, &received, snr)?;
            for v in recon.data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            data::save_image(
                &recon,
                &dir.join(format!("recon_{}_{i}_snr{snr:.0}.png", dec.kind.as_str())),
            )?;
        }
    }
    Ok(())
}

/// Run (or reuse) an iterative schedule and measure catastrophic
/// forgetting; writes `forgetting.csv` plus one SVG per decoder.
pub fn cmd_forgetting(cfg: &ExperimentConfig, reuse: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.schedule = Schedule::Iterative;
    let run_dir = match reuse {
        Some(dir) => dir.to_path_buf(),
        None => cmd_train(&cfg)?,
    };
    let run_cfg = load_run_config(&run_dir)?;
    if run_cfg.schedule != Schedule::Iterative {
        return Err(Error::Incompatible(
            "forgetting evaluation needs an iterative run".into(),
        ));
    }
    let (_, eval_set) = load_datasets(&run_cfg)?;

    // reconstruct the snapshot series from the checkpoint files
    let total_epochs = run_cfg.train.cycles * run_cfg.roster.len();
    let mut encoder_snapshots = Vec::with_capacity(total_epochs);
    for e in 0..total_epochs {
        encoder_snapshots.push(load_model(&run_dir, &format!("snap_enc_{e:04}"))?);
    }
    let mut decoder_snapshots = Vec::with_capacity(run_cfg.train.cycles);
    for c in 0..run_cfg.train.cycles {
        let mut cycle = Vec::new();
        for kind in &run_cfg.roster {
            cycle.push(load_model(
                &run_dir,
                &format!("snap_dec_c{c:04}_{}", kind.as_str()),
            )?);
        }
        decoder_snapshots.push(cycle);
    }
    let run = IterativeRun {
        encoder_snapshots,
        decoder_snapshots,
        losses: Vec::new(),
    };

    let report = training::forgetting_eval(
        &run,
        &eval_set,
        &run_cfg.eval_snr_db,
        run_cfg.train.channel,
        run_cfg.eval_seed,
    )?;

    let mut records = Vec::new();
    for row in &report.rows {
        for cell in &row.cells {
            records.push(EvalRecord {
                schedule: "iterative".into(),
                decoder: row.decoder.as_str().into(),
                channel: run_cfg.train.channel.as_str().into(),
                snr_db: cell.snr_db,
                psnr_db: cell.psnr_db,
                ms_ssim: cell.ms_ssim,
                seed: run_cfg.train.seed,
                snapshot: row.label.into(),
            });
        }
    }
    let csv_path = run_dir.join("forgetting.csv");
    report::write_text(&csv_path, &report::records_to_csv(&records))?;

    // one chart per decoder: psnr vs snr for each snapshot label
    for kind in &run_cfg.roster {
        let series: Vec<Series> = FORGETTING_LABELS
            .iter()
            .map(|label| Series {
                label: (*label).into(),
                points: report
                    .rows
                    .iter()
                    .filter(|r| r.decoder == *kind && r.label == *label)
                    .flat_map(|r| r.cells.iter().map(|c| (c.snr_db, c.psnr_db)))
                    .collect(),
            })
            .collect();
        let svg = report::line_chart_svg(
            &format!("forgetting: {} decoder", kind.as_str()),
            "snr (dB)",
            "psnr (dB)",
            &series,
        );
        report::write_text(
            &run_dir.join(format!("forgetting_{}.svg", kind.as_str())),
            &svg,
        )?;
    }
    Ok(csv_path)
}

/// Merge the records of several finished runs into a pivoted comparison
/// CSV plus one SVG per decoder.
pub fn cmd_compare(run_dirs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    if run_dirs.is_empty() {
        return Err(Error::Incompatible("no runs to compare".into()));
    }
    let mut runs: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    for dir in run_dirs {
        let records_path = dir.join("records.csv");
        if !records_path.exists() {
            return Err(Error::MissingSnapshot(format!(
                "{} (run `djscc eval` first)",
                records_path.display()
            )));
        }
        let text = std::fs::read_to_string(&records_path)?;
        let records = report::records_from_csv(&text)?;
        let name = records
            .first()
            .map(|r| r.schedule.clone())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, records));
    }

    std::fs::create_dir_all(out_dir)?;
    let csv = report::compare_csv(&runs)?;
    let csv_path = out_dir.join("compare.csv");
    report::write_text(&csv_path, &csv)?;

    // per-decoder psnr chart, one series per schedule
    let mut decoders: Vec<String> = Vec::new();
    for r in &runs[0].1 {
        if !decoders.contains(&r.decoder) {
            decoders.push(r.decoder.clone());
        }
    }
    for decoder in &decoders {
        let series: Vec<Series> = runs
            .iter()
            .map(|(name, records)| {
                let mut points: Vec<(f64, f64)> = records
                    .iter()
                    .filter(|r| &r.decoder == decoder)
                    .map(|r| (r.snr_db, r.psnr_db))
                    .collect();
                points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                Series {
                    label: name.clone(),
                    points,
                }
            })
            .collect();
        let svg = report::line_chart_svg(
            &format!("{decoder} decoder"),
            "snr (dB)",
            "psnr (dB)",
            &series,
        );
        report::write_text(&out_dir.join(format!("compare_{decoder}.svg")), &svg)?;
    }
    Ok(csv_path)
}
