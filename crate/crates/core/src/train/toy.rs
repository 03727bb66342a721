//! Small two-microphone task used for smoke training and trend checks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{process_utterance, ArConfig};
use crate::error::Result;
use crate::estimator::CompactEstimator;
use crate::metrics::si_sdr;
use crate::scene::{generate_scene, ArrayGeometry, Mixture, SceneSpec, SourceKind};
use crate::tfx::{Stft, StftConfig};

use super::Utterance;

pub const TOY_SAMPLE_RATE: u32 = 4000;
pub const TOY_DURATION: f64 = 1.0;

/// Window 16, hop 8: nine bins.
pub fn toy_stft() -> Stft {
    Stft::new(StftConfig::new(TOY_SAMPLE_RATE, 16, 8)).expect("toy stft config is valid")
}

pub fn toy_geometry() -> ArrayGeometry {
    ArrayGeometry::uniform_circular(2, 0.08).expect("two-mic circle is valid")
}

/// Broadside target, one white noise at least 60 degrees off broadside,
/// SNR uniform in [-5, 5] dB.
pub fn toy_spec(rng: &mut impl Rng) -> SceneSpec {
    let noise_az = loop {
        let az: f64 = rng.gen_range(0.0..2.0 * PI);
        if az.cos().abs() >= 0.5 {
            break az;
        }
    };
    SceneSpec {
        target_azimuth: PI / 2.0,
        noise_azimuths: vec![noise_az],
        noise_kinds: vec![SourceKind::White],
        snr_db: rng.gen_range(-5.0..5.0),
        duration: TOY_DURATION,
        decay_tail: None,
        seed: rng.gen(),
    }
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub utterance: Utterance,
    pub mixture_ref: Vec<f64>,
    pub target_ref: Vec<f64>,
    pub snr_db: f64,
}

pub fn utterance_from_mixture(
    id: &str,
    mixture: &Mixture,
    stft: &Stft,
    reference: usize,
) -> Result<Utterance> {
    Ok(Utterance {
        id: id.to_string(),
        mixture: stft.analyze(&mixture.mixture)?,
        target: stft.analyze_signal(&mixture.target[reference])?,
    })
}

/// `count` scenes from one seed; ids are `toy-<seed>-<index>`.
pub fn toy_set(count: usize, seed: u64) -> Result<Vec<ToyScene>> {
    let stft = toy_stft();
    let geometry = toy_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = toy_spec(&mut rng);
            let mixture = generate_scene(&spec, &geometry, TOY_SAMPLE_RATE)?;
            Ok(ToyScene {
                utterance: utterance_from_mixture(&format!("toy-{seed}-{i}"), &mixture, &stft, 0)?,
                mixture_ref: mixture.mixture[0].clone(),
                target_ref: mixture.target[0].clone(),
                snr_db: spec.snr_db,
            })
        })
        .collect()
}

/// Mean SI-SDR of the mixture and of the enhanced reference channel.
pub fn evaluate_si_sdr(
    est: &CompactEstimator,
    cfg: &ArConfig,
    scenes: &[ToyScene],
    stft: &Stft,
) -> Result<(f64, f64)> {
    let mut mix = 0.0;
    let mut enh = 0.0;
    for s in scenes {
        let out = process_utterance(cfg, est, &s.utterance.mixture)?;
        let wave = stft.synthesize_trimmed(&out, s.target_ref.len())?;
        mix += si_sdr(&s.mixture_ref, &s.target_ref)?;
        enh += si_sdr(&wave, &s.target_ref)?;
    }
    let n = scenes.len().max(1) as f64;
    Ok((mix / n, enh / n))
}
