//! Experiment configuration: a flat sectioned key-value text format, with
//! every default printable so runs are self-documenting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::channel::ChannelKind;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::training::TrainConfig;

/// Environment variable that prefixes relative output directories.
pub const OUT_ROOT_ENV: &str = "DJSCC_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    TwoStage,
    Iterative,
    Simultaneous,
}

impl Schedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Schedule::TwoStage => "two_stage",
            Schedule::Iterative => "iterative",
            Schedule::Simultaneous => "simultaneous",
        }
    }

    pub fn parse(s: &str) -> Option<Schedule> {
        match s {
            "two_stage" => Some(Schedule::TwoStage),
            "iterative" => Some(Schedule::Iterative),
            "simultaneous" => Some(Schedule::Simultaneous),
            _ => None,
        }
    }
}

/// Source of training/eval images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Directory(PathBuf),
}

/// Everything one experiment needs: training hyperparameters, model
/// geometry, dataset choice, decoder roster and report options.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub epochs_simultaneous: usize,
    pub model: ModelConfig,
    pub source: DataSource,
    pub train_images: usize,
    pub eval_images: usize,
    pub patch_stride: usize,
    pub out_dir: PathBuf,
    pub roster: Vec<ModelKind>,
    pub eval_snr_db: Vec<f64>,
    pub eval_seed: u64,
    pub save_images: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schedule: Schedule::TwoStage,
            train: TrainConfig::default(),
            epochs_simultaneous: 30,
            model: ModelConfig::default(),
            source: DataSource::Synth,
            train_images: 512,
            eval_images: 128,
            patch_stride: 32,
            out_dir: PathBuf::from("runs/default"),
            roster: ModelKind::user_roster().to_vec(),
            eval_snr_db: vec![1.0, 4.0, 7.0, 10.0, 13.0],
            eval_seed: 1000,
            save_images: false,
        }
    }
}

impl ExperimentConfig {
    /// Render in the config file format; parsing this text reproduces the
    /// configuration exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("[train]\n");
        s.push_str(&format!("schedule = {}\n", self.schedule.as_str()));
        s.push_str(&format!("lr = {}\n", self.train.lr));
        s.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("snr_set_db = {}\n", join_f64(&self.train.snr_set_db)));
        s.push_str(&format!("epochs_stage1 = {}\n", self.train.epochs_stage1));
        s.push_str(&format!(
            "epochs_per_decoder = {}\n",
            self.train.epochs_per_decoder
        ));
        s.push_str(&format!("cycles = {}\n", self.train.cycles));
        s.push_str(&format!(
            "epochs_simultaneous = {}\n",
            self.epochs_simultaneous
        ));
        s.push_str(&format!("seed = {}\n", self.train.seed));
        s.push_str(&format!("channel = {}\n", self.train.channel.as_str()));
        s.push_str("\n[model]\n");
        s.push_str(&format!("image_h = {}\n", self.model.image_h));
        s.push_str(&format!("image_w = {}\n", self.model.image_w));
        s.push_str(&format!(
            "rate = {}/{}\n",
            self.model.rate_num, self.model.rate_den
        ));
        s.push_str(&format!(
            "widths = {},{}\n",
            self.model.widths[0], self.model.widths[1]
        ));
        s.push_str(&format!("bottleneck = {}\n", self.model.bottleneck));
        s.push_str(&format!("depth_scale = {}\n", self.model.depth_scale));
        s.push_str("\n[data]\n");
        match &self.source {
            DataSource::Synth => s.push_str("source = synth\n"),
            DataSource::Directory(p) => s.push_str(&format!("source = {}\n", p.display())),
        }
        s.push_str(&format!("train_images = {}\n", self.train_images));
        s.push_str(&format!("eval_images = {}\n", self.eval_images));
        s.push_str(&format!("patch_stride = {}\n", self.patch_stride));
        s.push_str("\n[report]\n");
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!(
            "decoders = {}\n",
            self.roster
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("eval_snr_db = {}\n", join_f64(&self.eval_snr_db)));
        s.push_str(&format!("eval_seed = {}\n", self.eval_seed));
        s.push_str(&format!("save_images = {}\n", self.save_images));
        s
    }

    /// Parse config text, then apply `section.key=value` overrides. All
    /// problems are reported together.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut map = parse_sections(text)?;
        for (key, value) in overrides {
            map.insert(key.clone(), value.clone());
        }
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        let mut unknown: Vec<String> = Vec::new();

        for (key, value) in &map {
            let ok = apply_key(&mut cfg, key, value, &mut errors);
            if !ok {
                unknown.push(key.clone());
            }
        }
        for key in unknown {
            // manifest metadata is allowed to ride along in config files
            if !key.starts_with("manifest.") {
                errors.push(format!("unknown key `{key}`"));
            }
        }
        if let Err(Error::Config(mut more)) = cfg.train.validate() {
            errors.append(&mut more);
        }
        if let Err(e) = cfg.model.validate() {
            errors.push(e.to_string());
        }
        if cfg.roster.is_empty() {
            errors.push("decoder roster must be nonempty".into());
        }
        if cfg.eval_snr_db.is_empty() {
            errors.push("eval_snr_db must be nonempty".into());
        }
        if cfg.train_images == 0 || cfg.eval_images == 0 {
            errors.push("train_images and eval_images must be positive".into());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Resolve the output directory against [`OUT_ROOT_ENV`].
    pub fn resolved_out_dir(&self) -> PathBuf {
        if self.out_dir.is_absolute() {
            return self.out_dir.clone();
        }
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) if !root.is_empty() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    let mut errors = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if line.ends_with(']') && line.len() > 2 {
                section = line[1..line.len() - 1].trim().to_string();
            } else {
                errors.push(format!("line {}: malformed section `{raw}`", lineno + 1));
            }
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let key = if section.is_empty() {
                    k.trim().to_string()
                } else {
                    format!("{section}.{}", k.trim())
                };
                map.insert(key, v.trim().to_string());
            }
            None => errors.push(format!("line {}: expected key = value, got `{raw}`", lineno + 1)),
        }
    }
    if errors.is_empty() {
        Ok(map)
    } else {
        Err(Error::Config(errors))
    }
}

/// Returns false when the key is unknown.
fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str, errors: &mut Vec<String>) -> bool {
    let mut bad = |msg: String| errors.push(format!("{key} = {value}: {msg}"));
    match key {
        "train.schedule" => match Schedule::parse(value) {
            Some(s) => cfg.schedule = s,
            None => bad("expected two_stage | iterative | simultaneous".into()),
        },
        "train.lr" => match value.parse() {
            Ok(v) => cfg.train.lr = v,
            Err(_) => bad("expected a float".into()),
        },
        "train.batch_size" => match value.parse() {
            Ok(v) => cfg.train.batch_size = v,
            Err(_) => bad("expected an integer".into()),
        },
        "train.snr_set_db" => match parse_f64_list(value) {
            Ok(v) => cfg.train.snr_set_db = v,
            Err(m) => bad(m),
        },
        "train.epochs_stage1" => match value.parse() {
            Ok(v) => cfg.train.epochs_stage1 = v,
            Err(_) => bad("expected an integer".into()),
        },
        "train.epochs_per_decoder" => match value.parse() {
            Ok(v) => cfg.train.epochs_per_decoder = v,
            Err(_) => bad("expected an integer".into()),
        },
        "train.cycles" => match value.parse() {
            Ok(v) => cfg.train.cycles = v,
            Err(_) => bad("expected an integer".into()),
        },
        "train.epochs_simultaneous" => match value.parse() {
            Ok(v) => cfg.epochs_simultaneous = v,
            Err(_) => bad("expected an integer".into()),
        },
        "train.seed" => match value.parse() {
            Ok(v) => cfg.train.seed = v,
            Err(_) => bad("expected an unsigned integer".into()),
        },
        "train.channel" => match ChannelKind::parse(value) {
            Some(k) => cfg.train.channel = k,
            None => bad("expected awgn | rayleigh".into()),
        },
        "model.image_h" => match value.parse() {
            Ok(v) => cfg.model.image_h = v,
            Err(_) => bad("expected an integer".into()),
        },
        "model.image_w" => match value.parse() {
            Ok(v) => cfg.model.image_w = v,
            Err(_) => bad("expected an integer".into()),
        },
        "model.rate" => match value.split_once('/') {
            Some((n, d)) => match (n.trim().parse(), d.trim().parse()) {
                (Ok(n), Ok(d)) => {
                    cfg.model.rate_num = n;
                    cfg.model.rate_den = d;
                }
                _ => bad("expected num/den".into()),
            },
            None => bad("expected num/den, e.g. 1/16".into()),
        },
        "model.widths" => match parse_usize_list(value) {
            Ok(v) if v.len() == 2 => cfg.model.widths = [v[0], v[1]],
            Ok(_) => bad("expected exactly two widths".into()),
            Err(m) => bad(m),
        },
        "model.bottleneck" => match value.parse() {
            Ok(v) => cfg.model.bottleneck = v,
            Err(_) => bad("expected an integer".into()),
        },
        "model.depth_scale" => match value.parse() {
            Ok(v) => cfg.model.depth_scale = v,
            Err(_) => bad("expected an integer".into()),
        },
        "data.source" => {
            cfg.source = if value == "synth" {
                DataSource::Synth
            } else {
                DataSource::Directory(PathBuf::from(value))
            };
        }
        "data.train_images" => match value.parse() {
            Ok(v) => cfg.train_images = v,
            Err(_) => bad("expected an integer".into()),
        },
        "data.eval_images" => match value.parse() {
            Ok(v) => cfg.eval_images = v,
            Err(_) => bad("expected an integer".into()),
        },
        "data.patch_stride" => match value.parse() {
            Ok(v) => cfg.patch_stride = v,
            Err(_) => bad("expected an integer".into()),
        },
        "report.out_dir" => cfg.out_dir = PathBuf::from(value),
        "report.decoders" => {
            let mut roster = Vec::new();
            let mut ok = true;
            for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                match ModelKind::parse(part) {
                    Some(k) if k != ModelKind::Encoder => roster.push(k),
                    _ => {
                        bad(format!("unknown decoder `{part}`"));
                        ok = false;
                    }
                }
            }
            if ok {
                cfg.roster = roster;
            }
        }
        "report.eval_snr_db" => match parse_f64_list(value) {
            Ok(v) => cfg.eval_snr_db = v,
            Err(m) => bad(m),
        },
        "report.eval_seed" => match value.parse() {
            Ok(v) => cfg.eval_seed = v,
            Err(_) => bad("expected an unsigned integer".into()),
        },
        "report.save_images" => match value.parse() {
            Ok(v) => cfg.save_images = v,
            Err(_) => bad("expected true | false".into()),
        },
        _ => return false,
    }
    true
}

fn parse_f64_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| format!("bad float `{p}`")))
        .collect()
}

fn parse_usize_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|_| format!("bad integer `{p}`")))
        .collect()
}
