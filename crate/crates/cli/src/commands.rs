use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arise_core::engine::process_utterance;
use arise_core::estimator::{AnyEstimator, CompactEstimator, OracleEstimator};
use arise_core::metrics::{seg_snr, si_sdr, MetricReport, MetricRow};
use arise_core::scene::{generate_scene, SceneSpec};
use arise_core::tfx::Stft;
use arise_core::train::{train, Method, RdsCache, Utterance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::manifest::{mixture_file, noise_file, target_file, Manifest, SceneEntry};
use crate::wav::{read_wav, write_wav, WavData};

/// Scene specs drawn from the configured distribution, in order.
pub fn scene_specs(cfg: &RunConfig, count: usize) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene_seed);
    (0..count)
        .map(|_| {
            let mut spec = SceneSpec::random(
                &mut rng,
                cfg.noise_sources,
                (cfg.snr_min, cfg.snr_max),
                cfg.duration,
            );
            if let Some(az) = cfg.target_azimuth {
                spec.target_azimuth = az;
            }
            spec.noise_kinds = cfg.noise_kinds.clone();
            spec.decay_tail = cfg.decay_tail();
            spec
        })
        .collect()
}

pub fn simulate(cfg: &RunConfig, out_dir: &Path, count: usize) -> Result<Vec<SceneEntry>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let geometry = cfg.geometry()?;
    let specs = scene_specs(cfg, count);
    let entries: Vec<SceneEntry> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = format!("scene-{i:04}");
            let mix = generate_scene(spec, &geometry, cfg.sample_rate)?;
            write_wav(
                out_dir.join(mixture_file(&id)),
                cfg.sample_rate,
                &mix.mixture,
                cfg.wav_format,
            )?;
            write_wav(
                out_dir.join(target_file(&id)),
                cfg.sample_rate,
                &mix.target,
                cfg.wav_format,
            )?;
            write_wav(
                out_dir.join(noise_file(&id)),
                cfg.sample_rate,
                &mix.noise,
                cfg.wav_format,
            )?;
            Ok(SceneEntry {
                id,
                target_azimuth: spec.target_azimuth,
                noise_azimuths: spec.noise_azimuths.clone(),
                snr_db: spec.snr_db,
                t60_s: spec.decay_tail.map_or(0.0, |t| t.t60_s),
                seed: spec.seed,
            })
        })
        .collect::<Result<_>>()?;
    Manifest::save(&out_dir.join("manifest.txt"), &entries)?;
    Ok(entries)
}

pub enum EstimatorChoice {
    Oracle,
    Checkpoint(CompactEstimator),
}

impl EstimatorChoice {
    pub fn from_arg(arg: &str) -> Result<Self> {
        if arg == "oracle" {
            return Ok(Self::Oracle);
        }
        let est =
            CompactEstimator::load(arg).with_context(|| format!("loading checkpoint {arg}"))?;
        Ok(Self::Checkpoint(est))
    }
}

fn check_input(cfg: &RunConfig, wav: &WavData, what: &Path) -> Result<()> {
    if wav.sample_rate != cfg.sample_rate {
        bail!(
            "{}: sample rate {} Hz, configuration expects {} Hz",
            what.display(),
            wav.sample_rate,
            cfg.sample_rate
        );
    }
    if wav.channels.len() < 2 {
        bail!(
            "{}: need at least 2 channels, got {}",
            what.display(),
            wav.channels.len()
        );
    }
    Ok(())
}

/// Enhances one mixture; the oracle needs the clean multichannel target.
pub fn enhance_signal(
    cfg: &RunConfig,
    mixture: &WavData,
    estimator: &EstimatorChoice,
    target: Option<&WavData>,
) -> Result<Vec<f64>> {
    let stft = Stft::new(cfg.stft())?;
    let m = mixture.channels.len();
    cfg.ar.validate(m)?;
    let y = stft.analyze(&mixture.channels)?;
    let est = match estimator {
        EstimatorChoice::Oracle => {
            let Some(t) = target else {
                bail!("the oracle estimator needs the clean target");
            };
            if t.channels.len() <= cfg.ar.reference || t.len() != mixture.len() {
                bail!("target does not match the mixture shape");
            }
            let x_ref = stft.analyze_signal(&t.channels[cfg.ar.reference])?;
            AnyEstimator::Oracle(OracleEstimator::new(
                &x_ref,
                &y.channel(cfg.ar.reference),
                cfg.ar.clip_mag,
            )?)
        }
        EstimatorChoice::Checkpoint(e) => {
            if e.channels() != m {
                bail!(
                    "checkpoint expects {} channels, mixture has {m}",
                    e.channels()
                );
            }
            AnyEstimator::Compact(e.clone())
        }
    };
    let out = process_utterance(&cfg.ar, &est, &y)?;
    Ok(stft.synthesize_trimmed(&out, mixture.len())?)
}

pub fn enhance_file(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    estimator: &EstimatorChoice,
    target: Option<&Path>,
) -> Result<()> {
    let mixture = read_wav(input)?;
    check_input(cfg, &mixture, input)?;
    let target = match (estimator, target) {
        (EstimatorChoice::Oracle, Some(p)) => Some(read_wav(p)?),
        (EstimatorChoice::Oracle, None) => {
            let guess = default_target_path(input).with_context(|| {
                format!(
                    "no --target given and {} is not a *_mixture.wav",
                    input.display()
                )
            })?;
            Some(read_wav(&guess)?)
        }
        _ => None,
    };
    let wave = enhance_signal(cfg, &mixture, estimator, target.as_ref())?;
    write_wav(output, cfg.sample_rate, &[wave], cfg.wav_format)
}

fn default_target_path(mixture: &Path) -> Option<PathBuf> {
    let name = mixture.file_name()?.to_str()?;
    let id = name.strip_suffix("_mixture.wav")?;
    Some(mixture.with_file_name(target_file(id)))
}

/// Enhances every scene of a manifest into `<out_dir>/<id>.wav`.
pub fn enhance_manifest(
    cfg: &RunConfig,
    manifest: &Manifest,
    out_dir: &Path,
    estimator: &EstimatorChoice,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    manifest.entries.par_iter().try_for_each(|e| {
        let target = manifest.target_path(e);
        enhance_file(
            cfg,
            &manifest.mixture_path(e),
            &out_dir.join(format!("{}.wav", e.id)),
            estimator,
            Some(&target),
        )
        .with_context(|| format!("scene {}", e.id))
    })
}

pub fn load_utterances(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<Utterance>> {
    let stft = Stft::new(cfg.stft())?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.mixture_path(e);
            let mixture = read_wav(&path)?;
            check_input(cfg, &mixture, &path)?;
            let target = read_wav(manifest.target_path(e))?;
            let Some(target_ref) = target.channels.get(cfg.ar.reference) else {
                bail!("{}: target lacks reference channel", e.id);
            };
            Ok(Utterance {
                id: e.id.clone(),
                mixture: stft.analyze(&mixture.channels)?,
                target: stft.analyze_signal(target_ref)?,
            })
        })
        .collect()
}

/// Cache file written next to an RDS checkpoint.
pub fn cache_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("rdscache")
}

pub fn train_command(
    cfg: &RunConfig,
    manifest: &Manifest,
    checkpoint: &Path,
    init: Option<&Path>,
    log_path: Option<&Path>,
    mut emit: impl FnMut(&str),
) -> Result<()> {
    let data = load_utterances(cfg, manifest)?;
    let Some(first) = data.first() else {
        bail!("manifest is empty");
    };
    let channels = first.mixture.channels();
    let mut est = match init {
        Some(p) => CompactEstimator::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CompactEstimator::random(channels, cfg.hidden, cfg.init_seed),
    };
    if est.channels() != channels {
        bail!(
            "estimator expects {} channels, data has {channels}",
            est.channels()
        );
    }
    let data = if cfg.train.method == Method::Bptt {
        data.iter()
            .flat_map(|u| u.segments(cfg.bptt_frames))
            .collect()
    } else {
        data
    };
    let cache_file = cache_path(checkpoint);
    let mut cache = match (cfg.train.method, init) {
        (Method::Rds, Some(_)) if cache_file.exists() => RdsCache::load(&cache_file)?,
        _ => RdsCache::new(),
    };
    let mut lines = Vec::new();
    train(&mut est, &cfg.ar, &cfg.train, &data, &mut cache, |entry| {
        let line = entry.to_string();
        emit(&line);
        lines.push(line);
    })?;
    est.save(checkpoint)?;
    if cfg.train.method == Method::Rds {
        cache.save(&cache_file)?;
    }
    if let Some(p) = log_path {
        let mut f =
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        for l in &lines {
            writeln!(f, "{l}")?;
        }
    }
    Ok(())
}

pub struct Evaluation {
    pub report: MetricReport,
    pub missing: Vec<PathBuf>,
}

pub fn evaluate(cfg: &RunConfig, manifest: &Manifest, enhanced_dir: &Path) -> Result<Evaluation> {
    let q = cfg.ar.reference;
    let frame = (cfg.sample_rate / 50).max(1) as usize;
    let hop = (frame / 2).max(1);
    let results: Vec<std::result::Result<MetricRow, PathBuf>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let paths = [
                manifest.mixture_path(e),
                manifest.target_path(e),
                enhanced_dir.join(format!("{}.wav", e.id)),
            ];
            if let Some(p) = paths.iter().find(|p| !p.exists()) {
                return Ok(Err(p.clone()));
            }
            let [mix, tgt, enh] = paths.map(read_wav);
            let (mix, tgt, enh) = (mix?, tgt?, enh?);
            let (Some(y), Some(x), Some(out)) = (
                mix.channels.get(q),
                tgt.channels.get(q),
                enh.channels.first(),
            ) else {
                bail!("{}: missing reference channel", e.id);
            };
            if out.len() != x.len() {
                bail!(
                    "{}: enhanced length {} differs from reference {}",
                    e.id,
                    out.len(),
                    x.len()
                );
            }
            Ok(Ok(MetricRow {
                id: e.id.clone(),
                snr_db: e.snr_db,
                t60_s: e.t60_s,
                si_sdr_mix: si_sdr(y, x)?,
                si_sdr_enh: si_sdr(out, x)?,
                seg_snr_mix: seg_snr(y, x, frame, hop)?,
                seg_snr_enh: seg_snr(out, x, frame, hop)?,
            }))
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    let mut missing = Vec::new();
    for r in results {
        match r {
            Ok(row) => report.rows.push(row),
            Err(p) => missing.push(p),
        }
    }
    Ok(Evaluation { report, missing })
}
