//! Run configuration: defaults, a flat `key = value` file, then command-line
//! overrides. `RI_SEED` supplies the seed when neither of those does.

use std::path::{Path, PathBuf};

use ri_core::attention::ScoreKind;
use ri_core::model::{BlockSpec, RiModelConfig, Variant};
use ri_core::synth::{GenParams, HORIZON_FRAMES};

use crate::Error;

pub const SEED_ENV: &str = "RI_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,

    // generation
    pub series: usize,
    pub frames: usize,
    pub source_size: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub ri_rate: f64,
    pub walk_sigma: f64,
    pub noise: f64,
    pub ri_threshold: f64,

    // model
    pub variant: Variant,
    pub history: usize,
    pub score: ScoreKind,
    pub frame_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub hidden_channels: usize,
    pub head_width: usize,

    // training
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub dropout: f64,
    pub pos_weight: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub validation_interval: usize,
    pub augment: bool,
    /// Tiny-overfit mode for `train`: the miniature model on the first 8 series.
    pub overfit: bool,

    // evaluation
    pub threshold: f64,
    pub reference_bs: f64,
    pub reliability_bins: usize,

    // outputs
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub masks: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenParams::default();
        RunConfig {
            seed: 0,
            dataset: "dataset.ritc".into(),
            series: 200,
            frames: gen.frames,
            source_size: gen.source_size,
            intensity_min: gen.intensity_range.0,
            intensity_max: gen.intensity_range.1,
            ri_rate: gen.ri_rate,
            walk_sigma: gen.walk_sigma,
            noise: gen.noise,
            ri_threshold: gen.ri_threshold,
            variant: Variant::Both,
            history: 4,
            score: ScoreKind::Dot,
            frame_size: 64,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
            hidden_channels: 32,
            head_width: 64,
            epochs: 500,
            learning_rate: 5e-4,
            l2: 1e-5,
            dropout: 0.9,
            pos_weight: 20.0,
            batch_size: 8,
            validation_fraction: 0.15,
            validation_interval: 10,
            augment: true,
            overfit: false,
            threshold: 0.5,
            reference_bs: 0.3,
            reliability_bins: 10,
            checkpoint: "model.rif".into(),
            report: "report.txt".into(),
            masks: "masks.tsv".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = value.into(),
            "series" => self.series = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "source_size" => self.source_size = parse(key, value)?,
            "intensity_min" => self.intensity_min = parse(key, value)?,
            "intensity_max" => self.intensity_max = parse(key, value)?,
            "ri_rate" => self.ri_rate = parse(key, value)?,
            "walk_sigma" => self.walk_sigma = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "ri_threshold" => self.ri_threshold = parse(key, value)?,
            "variant" => self.variant = value.parse().map_err(|e: ri_core::Error| Error::Config(e.to_string()))?,
            "history" | "T_h" => self.history = parse(key, value)?,
            "score" => {
                self.score = match value {
                    "dot" => ScoreKind::Dot,
                    "general" => ScoreKind::General,
                    _ => return Err(Error::Config(format!("`score`: expected dot or general, got `{value}`"))),
                }
            }
            "frame_size" => self.frame_size = parse(key, value)?,
            "widths" => self.widths = parse_list(key, value)?,
            "strides" => self.strides = parse_list(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "hidden_channels" => self.hidden_channels = parse(key, value)?,
            "head_width" => self.head_width = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "l2" | "lambda" => self.l2 = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "pos_weight" => self.pos_weight = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "validation_interval" => self.validation_interval = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "overfit" => self.overfit = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "reference_bs" => self.reference_bs = parse(key, value)?,
            "reliability_bins" => self.reliability_bins = parse(key, value)?,
            "checkpoint" => self.checkpoint = value.into(),
            "report" => self.report = value.into(),
            "masks" => self.masks = value.into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config file's text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Error> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, e.detail())))?;
        }
        Ok(())
    }

    /// Precedence, lowest first: defaults, `env_seed`, the file, `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        if let Some(seed) = env_seed {
            cfg.seed = parse(SEED_ENV, seed.trim())?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v).map_err(|e| Error::Config(format!("--{k}: {}", e.detail())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every effective setting as `key = value`, in a form `apply_text` reads back.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let score = match self.score {
            ScoreKind::Dot => "dot",
            ScoreKind::General => "general",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("series", self.series.to_string()),
            ("frames", self.frames.to_string()),
            ("source_size", self.source_size.to_string()),
            ("intensity_min", self.intensity_min.to_string()),
            ("intensity_max", self.intensity_max.to_string()),
            ("ri_rate", self.ri_rate.to_string()),
            ("walk_sigma", self.walk_sigma.to_string()),
            ("noise", self.noise.to_string()),
            ("ri_threshold", self.ri_threshold.to_string()),
            ("variant", self.variant.to_string()),
            ("history", self.effective_history().to_string()),
            ("score", score.to_string()),
            ("frame_size", self.frame_size.to_string()),
            ("widths", join(&self.widths)),
            ("strides", join(&self.strides)),
            ("kernel", self.kernel.to_string()),
            ("hidden_channels", self.hidden_channels.to_string()),
            ("head_width", self.head_width.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("l2", self.l2.to_string()),
            ("dropout", self.dropout.to_string()),
            ("pos_weight", self.pos_weight.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("validation_interval", self.validation_interval.to_string()),
            ("augment", self.augment.to_string()),
            ("overfit", self.overfit.to_string()),
            ("threshold", self.threshold.to_string()),
            ("reference_bs", self.reference_bs.to_string()),
            ("reliability_bins", self.reliability_bins.to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("report", self.report.display().to_string()),
            ("masks", self.masks.display().to_string()),
        ]
    }

    /// `T_h` as the model sees it: zero for variants without sequence attention.
    pub fn effective_history(&self) -> usize {
        if self.variant.uses_sequence_attention() {
            self.history
        } else {
            0
        }
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            seed: self.seed,
            frames: self.frames,
            intensity_range: (self.intensity_min, self.intensity_max),
            ri_rate: self.ri_rate,
            walk_sigma: self.walk_sigma,
            noise: self.noise,
            source_size: self.source_size,
            ri_threshold: self.ri_threshold,
            ..GenParams::default()
        }
    }

    pub fn model_config(&self) -> RiModelConfig {
        let backbone = self
            .widths
            .iter()
            .zip(&self.strides)
            .map(|(&channels, &stride)| BlockSpec {
                channels,
                kernel: self.kernel,
                stride,
            })
            .collect();
        RiModelConfig {
            frame_size: self.frame_size,
            backbone,
            hidden_channels: self.hidden_channels,
            score: self.score,
            head_width: self.head_width,
            dropout: self.dropout,
            pos_weight: self.pos_weight,
            ..RiModelConfig::new(self.variant)
        }
        .with_variant(self.variant, self.history)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.widths.len() != self.strides.len() {
            return bad(format!(
                "`widths` has {} entries but `strides` has {}",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.frame_size > self.source_size {
            return bad(format!(
                "frame_size {} exceeds source_size {}",
                self.frame_size, self.source_size
            ));
        }
        if self.frames <= self.effective_history() + HORIZON_FRAMES {
            return bad(format!(
                "frames ({}) must exceed history ({}) plus the {HORIZON_FRAMES}-frame horizon",
                self.frames,
                self.effective_history()
            ));
        }
        if self.batch_size == 0 || self.validation_interval == 0 {
            return bad("batch_size and validation_interval must be positive".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.l2.is_nan() || self.l2 < 0.0 {
            return bad("learning_rate must be positive and l2 non-negative".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.reliability_bins < 2 {
            return bad("reliability_bins must be at least 2".into());
        }
        self.gen_params().validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}
