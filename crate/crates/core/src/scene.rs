//! Synthetic far-field scenes for a microphone array.
//!
//! Sources are plane waves steered onto the array with windowed-sinc
//! fractional delays. An optional exponentially decaying noise tail stands in
//! for late reverberation. Channel 0 is the reference microphone.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the fractional delay kernel (33 taps).
const FRAC_DELAY_HALF: i64 = 16;

/// Grid that mixture, target and noise samples are rounded to. Every value on
/// it with magnitude below 2 is exact in f32, and sums of such values are exact
/// in both f32 and f64, so `Y = X + N` holds bit for bit.
const SAMPLE_GRID: f64 = 1.0 / (1u64 << 23) as f64;

/// Peak magnitude that scenes are scaled to before rounding.
const SCENE_PEAK: f64 = 0.9;

/// Late tail energy relative to the direct path, per second of T60.
const TAIL_ENERGY_PER_T60: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    mic_positions: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>) -> Result<Self> {
        if mic_positions.len() < 2 {
            return Err(Error::InvalidConfig(
                "array needs at least 2 microphones".into(),
            ));
        }
        for (i, a) in mic_positions.iter().enumerate() {
            for b in &mic_positions[i + 1..] {
                let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
                if d.sqrt() < 1e-9 {
                    return Err(Error::InvalidConfig("microphone positions coincide".into()));
                }
            }
        }
        Ok(Self { mic_positions })
    }

    /// `mics` microphones equally spaced on a horizontal circle.
    pub fn uniform_circular(mics: usize, radius: f64) -> Result<Self> {
        let positions = (0..mics)
            .map(|m| {
                let angle = 2.0 * PI * m as f64 / mics as f64;
                [radius * angle.cos(), radius * angle.sin(), 0.0]
            })
            .collect();
        Self::new(positions)
    }

    pub fn mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.mic_positions
    }

    /// Relative arrival delays in seconds for a far-field source at `azimuth`,
    /// with the earliest microphone at zero.
    pub fn delays(&self, azimuth: f64) -> Vec<f64> {
        let look = [azimuth.cos(), azimuth.sin(), 0.0];
        let raw: Vec<f64> = self
            .mic_positions
            .iter()
            .map(|p| -(look[0] * p[0] + look[1] * p[1] + look[2] * p[2]) / SPEED_OF_SOUND)
            .collect();
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        raw.into_iter().map(|d| d - min).collect()
    }
}

impl Default for ArrayGeometry {
    /// Six microphones on an 8 cm radius circle.
    fn default() -> Self {
        Self::uniform_circular(6, 0.08).expect("valid default geometry")
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Delays `source` by a non-negative, possibly fractional number of samples.
/// Output has the same length as the input.
pub fn fractional_delay(source: &[f64], delay: f64) -> Vec<f64> {
    let whole = delay.floor();
    let frac = delay - whole;
    let whole = whole as i64;
    let span = (FRAC_DELAY_HALF + 1) as f64;
    let taps: Vec<f64> = (-FRAC_DELAY_HALF..=FRAC_DELAY_HALF)
        .map(|k| {
            let x = k as f64 - frac;
            sinc(x) * 0.5 * (1.0 + (PI * x / span).cos())
        })
        .collect();
    let len = source.len() as i64;
    (0..len)
        .map(|n| {
            let centre = n - whole;
            taps.iter()
                .zip(-FRAC_DELAY_HALF..=FRAC_DELAY_HALF)
                .filter_map(|(h, k)| {
                    let idx = centre - k;
                    (0..len).contains(&idx).then(|| h * source[idx as usize])
                })
                .sum()
        })
        .collect()
}

/// Renders a mono source as a far-field plane wave arriving from `azimuth`.
pub fn steer(
    geometry: &ArrayGeometry,
    azimuth: f64,
    source: &[f64],
    sample_rate: u32,
) -> Result<Vec<Vec<f64>>> {
    if source.is_empty() {
        return Err(Error::InvalidConfig("empty source".into()));
    }
    if !azimuth.is_finite() || source.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("non-finite steering input".into()));
    }
    Ok(geometry
        .delays(azimuth)
        .into_iter()
        .map(|tau| fractional_delay(source, tau * sample_rate as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    SpeechLike,
    Tonal,
    White,
    BabbleLike,
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech_like" => Ok(Self::SpeechLike),
            "tonal" => Ok(Self::Tonal),
            "white" => Ok(Self::White),
            "babble_like" => Ok(Self::BabbleLike),
            other => Err(Error::InvalidConfig(format!(
                "unknown source kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SpeechLike => "speech_like",
            Self::Tonal => "tonal",
            Self::White => "white",
            Self::BabbleLike => "babble_like",
        })
    }
}

fn normalize_peak(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    x
}

/// Deterministic mono test source with unit peak.
pub fn synth_source(
    kind: SourceKind,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(duration > 0.0) || sample_rate == 0 {
        return Err(Error::InvalidConfig(format!(
            "source duration must be positive, got {duration}"
        )));
    }
    let len = (duration * sample_rate as f64).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let out = match kind {
        SourceKind::SpeechLike => speech_like(len, fs, &mut rng),
        SourceKind::White => (0..len)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        SourceKind::Tonal => {
            let tones: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.03..0.4) * fs,
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            (0..len)
                .map(|n| {
                    let t = n as f64 / fs;
                    tones
                        .iter()
                        .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                        .sum()
                })
                .collect()
        }
        SourceKind::BabbleLike => {
            let mut acc = vec![0.0; len];
            for _ in 0..5 {
                let mut talker = ChaCha8Rng::seed_from_u64(rng.gen());
                for (a, v) in acc.iter_mut().zip(speech_like(len, fs, &mut talker)) {
                    *a += v;
                }
            }
            acc
        }
    };
    Ok(normalize_peak(out))
}

/// Harmonic bursts with gliding pitch, separated by silent pauses of at least
/// 110 ms.
fn speech_like(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let top = (0.45 * fs).min(4000.0);
    let mut pos = (rng.gen_range(0.0..0.15) * fs) as usize;
    while pos < len {
        let burst = ((rng.gen_range(0.12..0.35) * fs) as usize).min(len - pos);
        let f_start = rng.gen_range(90.0..220.0);
        let f_end = f_start * rng.gen_range(0.8..1.2);
        let formant = rng.gen_range(400.0..1500.0f64).min(top * 0.5);
        let rate = rng.gen_range(3.0..6.0);
        let mut phase = 0.0;
        for i in 0..burst {
            let u = i as f64 / burst as f64;
            let f0 = f_start + (f_end - f_start) * u;
            phase += 2.0 * PI * f0 / fs;
            let env =
                (PI * u).sin().powi(2) * (1.0 + 0.4 * (2.0 * PI * rate * i as f64 / fs).sin());
            let mut s = 0.0;
            let mut k = 1;
            while k as f64 * f0 < top {
                let fk = k as f64 * f0;
                let gain =
                    (1.0 / k as f64) * (1.0 + 2.0 * (-((fk - formant) / 300.0).powi(2)).exp());
                s += gain * (k as f64 * phase).sin();
                k += 1;
            }
            out[pos + i] = env * s;
        }
        pos += burst + (rng.gen_range(0.11..0.26) * fs) as usize;
    }
    out
}

/// Exponential late tail, as a full impulse response without the direct path.
pub fn decay_tail(t60_s: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if !(t60_s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "t60 must be positive, got {t60_s}"
        )));
    }
    let fs = sample_rate as f64;
    let len = (t60_s * fs).ceil() as usize + 1;
    let onset = (0.002 * fs).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = 3.0 * 10f64.ln() / (t60_s * fs);
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            let v: f64 = rng.sample(StandardNormal);
            if n < onset {
                0.0
            } else {
                v * (-rate * n as f64).exp()
            }
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let gain = (TAIL_ENERGY_PER_T60 * t60_s / energy).sqrt();
    h.iter_mut().for_each(|v| *v *= gain);
    Ok(h)
}

/// Linear convolution truncated to `signal.len()` samples.
pub fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = (signal.len() + kernel.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    a.iter()
        .take(signal.len())
        .map(|z| z.re / n as f64)
        .collect()
}

/// Mixture, target and noise, each `[channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl Mixture {
    pub fn channels(&self) -> usize {
        self.mixture.len()
    }

    pub fn len(&self) -> usize {
        self.mixture.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn check_shapes(reference: &[Vec<f64>], others: &[&[Vec<f64>]]) -> Result<()> {
    let len = reference.first().map_or(0, Vec::len);
    if reference.is_empty() || len == 0 {
        return Err(Error::DegenerateScene("empty target".into()));
    }
    for sig in std::iter::once(reference).chain(others.iter().copied()) {
        if sig.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "channel count {} differs from {}",
                sig.len(),
                reference.len()
            )));
        }
        if let Some(ch) = sig.iter().find(|c| c.len() != len) {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: ch.len(),
            });
        }
    }
    Ok(())
}

/// Scales the noise sum so the reference-channel SNR equals `snr_db`.
pub fn mix(target: &[Vec<f64>], noises: &[Vec<Vec<f64>>], snr_db: f64) -> Result<Mixture> {
    mix_with_residual(target, noises, None, snr_db)
}

/// Like [`mix`], with an unscaled `residual` (e.g. the target's late
/// reverberation) counted as part of the noise. The noise sources are scaled
/// so that residual plus scaled noise meets the SNR at the reference channel.
pub fn mix_with_residual(
    target: &[Vec<f64>],
    noises: &[Vec<Vec<f64>>],
    residual: Option<&[Vec<f64>]>,
    snr_db: f64,
) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "snr_db must be finite, got {snr_db}"
        )));
    }
    if noises.is_empty() {
        return Err(Error::DegenerateScene("no noise sources".into()));
    }
    let mut others: Vec<&[Vec<f64>]> = noises.iter().map(Vec::as_slice).collect();
    if let Some(r) = residual {
        others.push(r);
    }
    check_shapes(target, &others)?;
    let channels = target.len();
    let len = target[0].len();
    let noise_sum: Vec<Vec<f64>> = (0..channels)
        .map(|m| {
            (0..len)
                .map(|n| noises.iter().map(|src| src[m][n]).sum())
                .collect()
        })
        .collect();

    let p_x = power(&target[0]);
    let p_s = power(&noise_sum[0]);
    if p_x <= 0.0 {
        return Err(Error::DegenerateScene("zero-power target".into()));
    }
    if p_s <= 0.0 {
        return Err(Error::DegenerateScene("zero-power noise".into()));
    }
    let desired = p_x / 10f64.powf(snr_db / 10.0);
    let gain = match residual {
        None => (desired / p_s).sqrt(),
        Some(r) => {
            let p_r = power(&r[0]);
            let cross = r[0]
                .iter()
                .zip(&noise_sum[0])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / len as f64;
            let disc = cross * cross - p_s * (p_r - desired);
            let g = (-cross + disc.max(0.0).sqrt()) / p_s;
            if disc < 0.0 || g <= 0.0 {
                return Err(Error::DegenerateScene(format!(
                    "residual alone exceeds the noise budget for {snr_db} dB SNR"
                )));
            }
            g
        }
    };

    let noise: Vec<Vec<f64>> = (0..channels)
        .map(|m| {
            (0..len)
                .map(|n| gain * noise_sum[m][n] + residual.map_or(0.0, |r| r[m][n]))
                .collect()
        })
        .collect();
    let peak = (0..channels)
        .flat_map(|m| (0..len).map(move |n| (m, n)))
        .map(|(m, n)| {
            let (x, v) = (target[m][n], noise[m][n]);
            x.abs().max(v.abs()).max((x + v).abs())
        })
        .fold(0.0f64, f64::max);
    let scale = SCENE_PEAK / peak;
    let quantize = |v: f64| (v * scale / SAMPLE_GRID).round() * SAMPLE_GRID;
    let target: Vec<Vec<f64>> = target
        .iter()
        .map(|c| c.iter().map(|&v| quantize(v)).collect())
        .collect();
    let noise: Vec<Vec<f64>> = noise
        .iter()
        .map(|c| c.iter().map(|&v| quantize(v)).collect())
        .collect();
    let mixture = target
        .iter()
        .zip(&noise)
        .map(|(x, v)| x.iter().zip(v).map(|(a, b)| a + b).collect())
        .collect();
    Ok(Mixture {
        mixture,
        target,
        noise,
    })
}

/// Reference-channel SNR of a generated scene.
pub fn measured_snr_db(target_ref: &[f64], noise_ref: &[f64]) -> f64 {
    10.0 * (power(target_ref) / power(noise_ref)).log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayTail {
    pub t60_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub target_azimuth: f64,
    pub noise_azimuths: Vec<f64>,
    /// Kinds of the noise sources, cycled if shorter than `noise_azimuths`.
    pub noise_kinds: Vec<SourceKind>,
    pub snr_db: f64,
    pub duration: f64,
    pub decay_tail: Option<DecayTail>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            target_azimuth: 0.0,
            noise_azimuths: vec![0.9, 2.1, 3.6, 5.0],
            noise_kinds: vec![
                SourceKind::BabbleLike,
                SourceKind::White,
                SourceKind::Tonal,
                SourceKind::BabbleLike,
            ],
            snr_db: 0.0,
            duration: 2.0,
            decay_tail: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidConfig("snr_db must be finite".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive".into()));
        }
        if let Some(tail) = self.decay_tail {
            if !(tail.t60_s > 0.0) {
                return Err(Error::InvalidConfig("t60_s must be positive".into()));
            }
        }
        if self.noise_azimuths.is_empty() {
            return Err(Error::DegenerateScene("no noise sources".into()));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::InvalidConfig("noise_kinds is empty".into()));
        }
        Ok(())
    }

    /// Random directions, SNR and seed around a fixed duration.
    pub fn random(
        rng: &mut impl Rng,
        noise_sources: usize,
        snr_range: (f64, f64),
        duration: f64,
    ) -> Self {
        Self {
            target_azimuth: rng.gen_range(0.0..2.0 * PI),
            noise_azimuths: (0..noise_sources)
                .map(|_| rng.gen_range(0.0..2.0 * PI))
                .collect(),
            snr_db: if snr_range.0 < snr_range.1 {
                rng.gen_range(snr_range.0..snr_range.1)
            } else {
                snr_range.0
            },
            duration,
            seed: rng.gen(),
            ..Self::default()
        }
    }
}

/// Renders a scene: a speech-like target plus steered noise sources.
pub fn generate_scene(
    spec: &SceneSpec,
    geometry: &ArrayGeometry,
    sample_rate: u32,
) -> Result<Mixture> {
    spec.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let target_src = synth_source(
        SourceKind::SpeechLike,
        spec.duration,
        sample_rate,
        seeds.gen(),
    )?;
    let target = steer(geometry, spec.target_azimuth, &target_src, sample_rate)?;
    let mut noises = Vec::with_capacity(spec.noise_azimuths.len());
    for (i, &az) in spec.noise_azimuths.iter().enumerate() {
        let kind = spec.noise_kinds[i % spec.noise_kinds.len()];
        let src = synth_source(kind, spec.duration, sample_rate, seeds.gen())?;
        noises.push(steer(geometry, az, &src, sample_rate)?);
    }
    match spec.decay_tail {
        None => mix(&target, &noises, spec.snr_db),
        Some(tail) => {
            let mut tail_for = |sig: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                sig.iter()
                    .map(|ch| {
                        Ok(convolve_truncated(
                            ch,
                            &decay_tail(tail.t60_s, sample_rate, seeds.gen())?,
                        ))
                    })
                    .collect()
            };
            let residual = tail_for(&target)?;
            let mut reverberant = Vec::with_capacity(noises.len());
            for noise in &noises {
                let late = tail_for(noise)?;
                reverberant.push(
                    noise
                        .iter()
                        .zip(&late)
                        .map(|(d, l)| d.iter().zip(l).map(|(a, b)| a + b).collect())
                        .collect(),
                );
            }
            mix_with_residual(&target, &reverberant, Some(&residual), spec.snr_db)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn energy(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn default_geometry_is_six_mic_circle() {
        let g = ArrayGeometry::default();
        assert_eq!(g.mics(), 6);
        for p in g.positions() {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 0.08).abs() < 1e-15);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn geometry_rejects_degenerate_arrays() {
        assert!(ArrayGeometry::new(vec![[0.0; 3]]).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3], [0.0; 3]]).is_err());
    }

    #[test]
    fn broadside_source_gives_identical_channels() {
        let g = ArrayGeometry::new(vec![[0.04, 0.0, 0.0], [-0.04, 0.0, 0.0]]).unwrap();
        let src = synth_source(SourceKind::White, 0.1, 16_000, 4).unwrap();
        let out = steer(&g, PI / 2.0, &src, 16_000).unwrap();
        for (a, b) in out[0].iter().zip(&out[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn endfire_delay_matches_geometry() {
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [0.08, 0.0, 0.0]]).unwrap();
        // Source on the negative x axis: the wave reaches mic 1 first.
        let expected = 0.08 / SPEED_OF_SOUND * 16_000.0;
        let delays = g.delays(PI);
        assert!((delays[1] * 16_000.0 - expected).abs() < 1e-12);
        assert!((expected - 3.7318).abs() < 1e-3);

        let src = synth_source(SourceKind::White, 0.25, 16_000, 8).unwrap();
        let out = steer(&g, PI, &src, 16_000).unwrap();
        // Cross-correlation peak refined by parabolic interpolation.
        let xcorr = |lag: i64| -> f64 {
            (0..src.len() as i64)
                .filter_map(|n| {
                    let k = n - lag;
                    (0..src.len() as i64)
                        .contains(&k)
                        .then(|| out[1][n as usize] * out[0][k as usize])
                })
                .sum()
        };
        let vals: Vec<f64> = (0..8).map(xcorr).collect();
        let peak = (0..8).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        assert_eq!(peak, 4, "{vals:?}");
        let (l, c, r) = (vals[peak - 1], vals[peak], vals[peak + 1]);
        let refined = peak as f64 + 0.5 * (l - r) / (l - 2.0 * c + r);
        // Parabolic interpolation is biased by roughly a tenth of a sample here.
        assert!((refined - expected).abs() < 0.15, "refined lag {refined}");
    }

    #[test]
    fn zero_source_steers_to_zero() {
        let out = steer(&ArrayGeometry::default(), 1.0, &[0.0; 100], 16_000).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn steering_preserves_energy() {
        let g = ArrayGeometry::default();
        for seed in 0..4 {
            let src = synth_source(SourceKind::SpeechLike, 1.0, 16_000, seed).unwrap();
            let e = energy(&src);
            for ch in steer(&g, 0.3 + seed as f64, &src, 16_000).unwrap() {
                assert!((energy(&ch) - e).abs() / e < 1e-3);
            }
        }
    }

    #[test]
    fn sources_are_deterministic_and_unit_peak() {
        for kind in [
            SourceKind::SpeechLike,
            SourceKind::Tonal,
            SourceKind::White,
            SourceKind::BabbleLike,
        ] {
            let a = synth_source(kind, 0.5, 16_000, 11).unwrap();
            let b = synth_source(kind, 0.5, 16_000, 11).unwrap();
            assert_eq!(a, b);
            let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 1.0).abs() < 1e-12);
        }
        assert!(synth_source(SourceKind::White, 0.0, 16_000, 0).is_err());
    }

    #[test]
    fn white_source_is_spectrally_flat() {
        let x = synth_source(SourceKind::White, 4.0, 16_000, 5).unwrap();
        let seg = 256;
        let mut psd = vec![0.0; seg / 2 + 1];
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(seg);
        for chunk in x.chunks_exact(seg) {
            let mut buf: Vec<Complex64> = chunk.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for (p, z) in psd.iter_mut().zip(&buf) {
                *p += z.norm_sqr();
            }
        }
        let bin_hz = 16_000.0 / seg as f64;
        let band: Vec<f64> = psd
            .iter()
            .enumerate()
            .filter(|(k, _)| (100.0..=7000.0).contains(&(*k as f64 * bin_hz)))
            .map(|(_, p)| *p)
            .collect();
        let mean = band.iter().sum::<f64>() / band.len() as f64;
        for p in band {
            assert!((10.0 * (p / mean).log10()).abs() < 3.0);
        }
    }

    #[test]
    fn speech_like_has_pauses() {
        let fs = 16_000;
        let x = synth_source(SourceKind::SpeechLike, 6.0, fs, 21).unwrap();
        let frame = 160;
        let env: Vec<f64> = x.chunks(frame).map(energy).collect();
        let peak = env.iter().copied().fold(0.0, f64::max);
        for window in env.chunks(200) {
            // Longest run of near-silent 10 ms frames inside each 2 s window.
            let mut best = 0;
            let mut run = 0;
            for &e in window {
                run = if e <= peak * 1e-6 { run + 1 } else { 0 };
                best = best.max(run);
            }
            assert!(best >= 10, "longest silent run {best} frames");
        }
    }

    fn two_channel(len: usize, seed: u64) -> Vec<Vec<f64>> {
        let src = synth_source(SourceKind::White, len as f64 / 16_000.0, 16_000, seed).unwrap();
        vec![src.clone(), src.iter().map(|v| 0.5 * v).collect()]
    }

    #[test]
    fn zero_db_mix_has_equal_powers() {
        let target = two_channel(8000, 1);
        let noises = vec![two_channel(8000, 2), two_channel(8000, 3)];
        let m = mix(&target, &noises, 0.0).unwrap();
        let (px, pn) = (power(&m.target[0]), power(&m.noise[0]));
        assert!((px - pn).abs() / px < 1e-6);
    }

    #[test]
    fn mix_rejects_degenerate_inputs() {
        let target = two_channel(100, 1);
        assert!(matches!(
            mix(&target, &[], 0.0),
            Err(Error::DegenerateScene(_))
        ));
        let silent = vec![vec![0.0; 100]; 2];
        assert!(matches!(
            mix(&silent, &[two_channel(100, 2)], 0.0),
            Err(Error::DegenerateScene(_))
        ));
        assert!(matches!(
            mix(&target, &[silent], 0.0),
            Err(Error::DegenerateScene(_))
        ));
        assert!(mix(&target, &[two_channel(99, 2)], 0.0).is_err());
    }

    #[test]
    fn generated_scene_satisfies_signal_model_exactly() {
        let spec = SceneSpec {
            duration: 0.5,
            seed: 17,
            ..SceneSpec::default()
        };
        let m = generate_scene(&spec, &ArrayGeometry::default(), 16_000).unwrap();
        for ch in 0..m.channels() {
            for n in 0..m.len() {
                assert_eq!(m.mixture[ch][n], m.target[ch][n] + m.noise[ch][n]);
                assert_eq!(m.mixture[ch][n] - m.target[ch][n], m.noise[ch][n]);
                // Exact in single precision as well.
                assert_eq!(
                    m.mixture[ch][n] as f32,
                    m.target[ch][n] as f32 + m.noise[ch][n] as f32
                );
            }
        }
    }

    #[test]
    fn reverberant_scene_meets_snr() {
        let spec = SceneSpec {
            duration: 1.0,
            snr_db: 3.0,
            decay_tail: Some(DecayTail { t60_s: 0.4 }),
            seed: 5,
            ..SceneSpec::default()
        };
        let m = generate_scene(&spec, &ArrayGeometry::default(), 16_000).unwrap();
        assert!((measured_snr_db(&m.target[0], &m.noise[0]) - 3.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn snr_contract_holds(seed in any::<u64>(), snr in -10.0f64..10.0) {
            let spec = SceneSpec { duration: 0.4, snr_db: snr, seed, ..SceneSpec::default() };
            let m = generate_scene(&spec, &ArrayGeometry::default(), 16_000).unwrap();
            prop_assert!((measured_snr_db(&m.target[0], &m.noise[0]) - snr).abs() < 1e-6);
        }
    }
}
