//! `key = value` run configuration. Every key has a default; unknown keys
//! are errors.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use arise_core::beam::BfOption;
use arise_core::engine::{ArConfig, ArInputs};
use arise_core::scene::{ArrayGeometry, DecayTail, SourceKind};
use arise_core::tfx::StftConfig;
use arise_core::train::{Method, TrainConfig, MAX_BPTT_FRAMES};

use crate::wav::SampleFormat;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,

    pub mics: usize,
    pub array_radius: f64,

    pub ar: ArConfig,

    pub hidden: usize,
    pub init_seed: u64,

    pub train: TrainConfig,
    pub bptt_frames: usize,

    pub noise_sources: usize,
    pub noise_kinds: Vec<SourceKind>,
    /// `None` draws a random azimuth per scene.
    pub target_azimuth: Option<f64>,
    pub snr_min: f64,
    pub snr_max: f64,
    pub duration: f64,
    /// Zero means anechoic.
    pub t60: f64,
    pub scene_seed: u64,

    pub wav_format: SampleFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 320,
            hop: 160,
            mics: 6,
            array_radius: 0.08,
            ar: ArConfig::default(),
            hidden: arise_core::estimator::DEFAULT_HIDDEN,
            init_seed: 0,
            train: TrainConfig::default(),
            bptt_frames: MAX_BPTT_FRAMES,
            noise_sources: 4,
            noise_kinds: vec![
                SourceKind::BabbleLike,
                SourceKind::White,
                SourceKind::Tonal,
                SourceKind::BabbleLike,
            ],
            target_azimuth: None,
            snr_min: -5.0,
            snr_max: 5.0,
            duration: 2.0,
            t60: 0.0,
            scene_seed: 0,
            wav_format: SampleFormat::Float32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "sample_rate",
        "window_len",
        "hop",
        "mics",
        "array_radius",
        "bf_option",
        "ar_inputs",
        "diag_load",
        "clip_mag",
        "forgetting",
        "stride",
        "reference",
        "hidden",
        "init_seed",
        "method",
        "epochs",
        "steps",
        "learning_rate",
        "batch",
        "seed",
        "bptt_frames",
        "noise_sources",
        "noise_kinds",
        "target_azimuth",
        "snr_min",
        "snr_max",
        "duration",
        "t60",
        "scene_seed",
        "wav_format",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "window_len" => self.window_len = parse(key, v)?,
            "hop" => self.hop = parse(key, v)?,
            "mics" => self.mics = parse(key, v)?,
            "array_radius" => self.array_radius = parse(key, v)?,
            "bf_option" => self.ar.bf_option = parse(key, v)?,
            "ar_inputs" => self.ar.ar_inputs = parse(key, v)?,
            "diag_load" => self.ar.diag_load = parse(key, v)?,
            "clip_mag" => self.ar.clip_mag = parse(key, v)?,
            "forgetting" => self.ar.forgetting = parse(key, v)?,
            "stride" => self.ar.stride = parse(key, v)?,
            "reference" => self.ar.reference = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "method" => self.train.method = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch" => self.train.batch = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "bptt_frames" => self.bptt_frames = parse(key, v)?,
            "noise_sources" => self.noise_sources = parse(key, v)?,
            "noise_kinds" => {
                self.noise_kinds = v
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "target_azimuth" => {
                self.target_azimuth = if v == "random" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "snr_min" => self.snr_min = parse(key, v)?,
            "snr_max" => self.snr_max = parse(key, v)?,
            "duration" => self.duration = parse(key, v)?,
            "t60" => self.t60 = parse(key, v)?,
            "scene_seed" => self.scene_seed = parse(key, v)?,
            "wav_format" => self.wav_format = parse(key, v)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v)
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", p.display()))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft().validate()?;
        self.geometry()?;
        self.ar.validate(self.mics)?;
        if self.hidden == 0 {
            bail!("hidden must be positive");
        }
        if self.bptt_frames == 0 || self.bptt_frames > MAX_BPTT_FRAMES {
            bail!("bptt_frames must lie in 1..={MAX_BPTT_FRAMES}");
        }
        if self.noise_sources == 0 || self.noise_kinds.is_empty() {
            bail!("need at least one noise source and kind");
        }
        if !(self.snr_min <= self.snr_max) || !self.snr_min.is_finite() || !self.snr_max.is_finite()
        {
            bail!("snr range [{}, {}] is invalid", self.snr_min, self.snr_max);
        }
        if !(self.duration > 0.0) {
            bail!("duration must be positive");
        }
        if !(self.t60 >= 0.0) {
            bail!("t60 must be non-negative");
        }
        Ok(())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::new(self.sample_rate, self.window_len, self.hop)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        Ok(ArrayGeometry::uniform_circular(
            self.mics,
            self.array_radius,
        )?)
    }

    pub fn decay_tail(&self) -> Option<DecayTail> {
        (self.t60 > 0.0).then_some(DecayTail { t60_s: self.t60 })
    }

    pub fn value(&self, key: &str) -> String {
        let ar = &self.ar;
        let tr = &self.train;
        match key {
            "sample_rate" => self.sample_rate.to_string(),
            "window_len" => self.window_len.to_string(),
            "hop" => self.hop.to_string(),
            "mics" => self.mics.to_string(),
            "array_radius" => self.array_radius.to_string(),
            "bf_option" => ar.bf_option.to_string(),
            "ar_inputs" => ar.ar_inputs.to_string(),
            "diag_load" => ar.diag_load.to_string(),
            "clip_mag" => ar.clip_mag.to_string(),
            "forgetting" => ar.forgetting.to_string(),
            "stride" => ar.stride.to_string(),
            "reference" => ar.reference.to_string(),
            "hidden" => self.hidden.to_string(),
            "init_seed" => self.init_seed.to_string(),
            "method" => tr.method.to_string(),
            "epochs" => tr.epochs.to_string(),
            "steps" => tr.steps.to_string(),
            "learning_rate" => tr.learning_rate.to_string(),
            "batch" => tr.batch.to_string(),
            "seed" => tr.seed.to_string(),
            "bptt_frames" => self.bptt_frames.to_string(),
            "noise_sources" => self.noise_sources.to_string(),
            "noise_kinds" => self
                .noise_kinds
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "target_azimuth" => self
                .target_azimuth
                .map_or("random".into(), |a| a.to_string()),
            "snr_min" => self.snr_min.to_string(),
            "snr_max" => self.snr_max.to_string(),
            "duration" => self.duration.to_string(),
            "t60" => self.t60.to_string(),
            "scene_seed" => self.scene_seed.to_string(),
            "wav_format" => self.wav_format.to_string(),
            _ => unreachable!("key list and value table disagree"),
        }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value(k)))
            .collect()
    }

    pub fn override_engine(&mut self, bf_option: Option<BfOption>, ar_inputs: Option<ArInputs>) {
        if let Some(b) = bf_option {
            self.ar.bf_option = b;
        }
        if let Some(a) = ar_inputs {
            self.ar.ar_inputs = a;
        }
    }

    pub fn override_method(&mut self, method: Option<Method>) {
        if let Some(m) = method {
            self.train.method = m;
        }
    }
}
