//! The frame-online auto-regressive enhancement loop.
//!
//! Per frame: beamform with the weights of the previous frame, run the mask
//! estimator on the mixture plus the gated AR features, mask every channel,
//! fold the masked frame into the covariances and refresh the weights for the
//! next frame.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beam::{
    apply_bf, mvdr_weights, BeamformerWeights, BfOption, ScmPair, DEFAULT_DIAG_LOAD,
};
use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{EstimatorInput, MaskEstimator};
use crate::mask::{clip_value, DEFAULT_CLIP_MAG};
use crate::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Which AR features reach the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArInputs {
    BfOnly,
    NnOnly,
    #[default]
    Both,
    None,
}

impl ArInputs {
    pub fn uses_bf(self) -> bool {
        matches!(self, Self::BfOnly | Self::Both)
    }

    pub fn uses_nn(self) -> bool {
        matches!(self, Self::NnOnly | Self::Both)
    }
}

impl std::str::FromStr for ArInputs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bf" | "bf_only" => Ok(Self::BfOnly),
            "nn" | "nn_only" => Ok(Self::NnOnly),
            "both" => Ok(Self::Both),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!("unknown AR inputs {other:?}"))),
        }
    }
}

impl std::fmt::Display for ArInputs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BfOnly => "bf",
            Self::NnOnly => "nn",
            Self::Both => "both",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArConfig {
    pub bf_option: BfOption,
    pub ar_inputs: ArInputs,
    pub diag_load: f64,
    pub clip_mag: f64,
    pub forgetting: f64,
    /// Weights are refreshed every `stride` frames.
    pub stride: usize,
    pub reference: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            bf_option: BfOption::CurrFrame,
            ar_inputs: ArInputs::Both,
            diag_load: DEFAULT_DIAG_LOAD,
            clip_mag: DEFAULT_CLIP_MAG,
            forgetting: 1.0,
            stride: 1,
            reference: 0,
        }
    }
}

impl ArConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reference >= channels {
            return Err(Error::InvalidConfig(format!(
                "reference channel {} out of range for {channels} channels",
                self.reference
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        if !(self.diag_load >= 0.0) || !self.diag_load.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "diagonal loading must be >= 0, got {}",
                self.diag_load
            )));
        }
        if !(self.clip_mag > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip magnitude must be positive, got {}",
                self.clip_mag
            )));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "forgetting factor must lie in (0, 1], got {}",
                self.forgetting
            )));
        }
        Ok(())
    }
}

/// Loop-carried state between frames.
#[derive(Debug, Clone)]
pub struct ArState {
    pub scm: ScmPair,
    pub weights: BeamformerWeights,
    /// Reference-channel estimate of the previous frame.
    pub prev_est_frame: Vec<Complex64>,
    /// Previous mixture frame, `[channel][bin]`.
    pub prev_y_frame: Vec<Complex64>,
    /// Frames processed so far.
    pub frame_index: usize,
}

impl ArState {
    pub fn new(cfg: &ArConfig, channels: usize, bins: usize) -> Result<Self> {
        Ok(Self {
            scm: ScmPair::new(channels, bins, cfg.forgetting)?,
            weights: BeamformerWeights::reference_selector(channels, bins, cfg.reference),
            prev_est_frame: vec![ZERO; bins],
            prev_y_frame: vec![ZERO; channels * bins],
            frame_index: 0,
        })
    }
}

/// Everything produced while processing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    /// Reference-channel estimate.
    pub estimate: Vec<Complex64>,
    /// Beamformed feature before gating; zero when not computed.
    pub bf: Vec<Complex64>,
    /// Clipped mask.
    pub mask: Vec<Complex64>,
    /// `frames_seen` of the covariances behind the weights used this frame.
    pub weights_through: usize,
}

/// A running stream.
pub struct ArEngine<'e, E: MaskEstimator> {
    cfg: ArConfig,
    est: &'e E,
    est_state: E::State,
    state: ArState,
    channels: usize,
    bins: usize,
    force_bf: bool,
    solves: usize,
}

impl<'e, E: MaskEstimator> ArEngine<'e, E> {
    pub fn new(cfg: ArConfig, est: &'e E, channels: usize, bins: usize) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(Self {
            est_state: est.init_state(channels, bins),
            state: ArState::new(&cfg, channels, bins)?,
            cfg,
            est,
            channels,
            bins,
            force_bf: false,
            solves: 0,
        })
    }

    /// Keeps the beamformer running even when its output is gated off, so
    /// the feature can be recorded.
    pub fn with_bf_trace(mut self, on: bool) -> Self {
        self.force_bf = on;
        self
    }

    pub fn state(&self) -> &ArState {
        &self.state
    }

    /// Number of per-bin MVDR solves performed so far.
    pub fn solves(&self) -> usize {
        self.solves
    }

    fn beamforming(&self) -> bool {
        self.force_bf || self.cfg.ar_inputs.uses_bf()
    }

    /// Processes the next mixture frame (`[channel][bin]`).
    pub fn process_frame(&mut self, y_frame: &[Complex64]) -> Result<FrameOutput> {
        let (m, bins) = (self.channels, self.bins);
        if y_frame.len() != m * bins {
            return Err(Error::LengthMismatch {
                expected: m * bins,
                actual: y_frame.len(),
            });
        }
        ensure_finite(y_frame, "mixture frame")?;
        let beamforming = self.beamforming();
        let weights_through = self.state.weights.computed_through();

        let bf = if beamforming && self.state.frame_index > 0 {
            apply_bf(
                &self.state.weights,
                &self.state.prev_y_frame,
                y_frame,
                self.cfg.bf_option,
            )?
        } else {
            vec![ZERO; bins]
        };
        let zeros = vec![ZERO; bins];
        let input = EstimatorInput {
            y_frame,
            bf_frame: if self.cfg.ar_inputs.uses_bf() {
                &bf
            } else {
                &zeros
            },
            prev_est_frame: if self.cfg.ar_inputs.uses_nn() {
                &self.state.prev_est_frame
            } else {
                &zeros
            },
            channels: m,
            bins,
            reference: self.cfg.reference,
        };
        let raw = self.est.step(&mut self.est_state, &input)?;
        if raw.len() != bins {
            return Err(Error::LengthMismatch {
                expected: bins,
                actual: raw.len(),
            });
        }
        let mask: Vec<Complex64> = raw
            .iter()
            .map(|z| clip_value(*z, self.cfg.clip_mag))
            .collect();
        ensure_finite(&mask, "estimated mask")?;

        let q = self.cfg.reference;
        let estimate: Vec<Complex64> = (0..bins).map(|f| y_frame[q * bins + f] * mask[f]).collect();
        if beamforming {
            let mut x_hat = Vec::with_capacity(m * bins);
            for c in 0..m {
                x_hat.extend((0..bins).map(|f| y_frame[c * bins + f] * mask[f]));
            }
            self.state.scm.update(&x_hat, y_frame)?;
            if self.state.scm.frames_seen().is_multiple_of(self.cfg.stride) {
                self.state.weights = mvdr_weights(&self.state.scm, q, self.cfg.diag_load);
                if self.state.scm.frames_seen() >= m {
                    self.solves += bins;
                }
            }
        }
        self.state.prev_est_frame.copy_from_slice(&estimate);
        self.state.prev_y_frame.copy_from_slice(y_frame);
        self.state.frame_index += 1;
        Ok(FrameOutput {
            estimate,
            bf,
            mask,
            weights_through,
        })
    }
}

/// Outputs of a whole utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineTrace {
    pub estimate: SingleChannelSpectrogram,
    pub bf: SingleChannelSpectrogram,
    pub mask: SingleChannelSpectrogram,
    pub weights_through: Vec<usize>,
    pub solves: usize,
}

/// Runs a fresh stream over `y`. With `bf_trace`, the beamformer runs even
/// when gated off so that its output is recorded.
pub fn run_utterance<E: MaskEstimator>(
    cfg: &ArConfig,
    est: &E,
    y: &MultichannelSpectrogram,
    bf_trace: bool,
) -> Result<EngineTrace> {
    let (frames, bins) = (y.frames(), y.bins());
    if frames == 0 || bins == 0 {
        return Err(Error::ShapeMismatch("empty mixture".into()));
    }
    let mut engine = ArEngine::new(*cfg, est, y.channels(), bins)?.with_bf_trace(bf_trace);
    let mut estimate = Vec::with_capacity(frames * bins);
    let mut bf = Vec::with_capacity(frames * bins);
    let mut mask = Vec::with_capacity(frames * bins);
    let mut weights_through = Vec::with_capacity(frames);
    for t in 0..frames {
        let out = engine.process_frame(y.frame(t))?;
        estimate.extend_from_slice(&out.estimate);
        bf.extend_from_slice(&out.bf);
        mask.extend_from_slice(&out.mask);
        weights_through.push(out.weights_through);
    }
    Ok(EngineTrace {
        estimate: SingleChannelSpectrogram::from_vec(frames, bins, estimate)?,
        bf: SingleChannelSpectrogram::from_vec(frames, bins, bf)?,
        mask: SingleChannelSpectrogram::from_vec(frames, bins, mask)?,
        weights_through,
        solves: engine.solves(),
    })
}

/// Reference-channel estimate of a whole utterance.
pub fn process_utterance<E: MaskEstimator>(
    cfg: &ArConfig,
    est: &E,
    y: &MultichannelSpectrogram,
) -> Result<SingleChannelSpectrogram> {
    Ok(run_utterance(cfg, est, y, false)?.estimate)
}

/// Median and 95th percentile of a set of durations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub median_s: f64,
    pub p95_s: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self {
                median_s: f64::NAN,
                p95_s: f64::NAN,
                samples: 0,
            };
        }
        samples.sort_by(f64::total_cmp);
        let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Self {
            median_s: pick(0.5),
            p95_s: pick(0.95),
            samples: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub channels: usize,
    pub bins: usize,
    pub ar_on: TimingStats,
    pub ar_off: TimingStats,
    pub solves_on: usize,
    pub solves_off: usize,
}

impl std::fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "per-frame latency, M={} F={}", self.channels, self.bins)?;
        for (name, s, solves) in [
            ("ar on ", self.ar_on, self.solves_on),
            ("ar off", self.ar_off, self.solves_off),
        ] {
            writeln!(
                f,
                "  {name}: median {:.1} us, p95 {:.1} us, {solves} solves",
                s.median_s * 1e6,
                s.p95_s * 1e6
            )?;
        }
        Ok(())
    }
}

pub(crate) fn random_mixture(
    channels: usize,
    frames: usize,
    bins: usize,
    seed: u64,
) -> MultichannelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * frames * bins)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    MultichannelSpectrogram::from_vec(channels, frames, bins, data).expect("shape is consistent")
}

/// Per-frame wall-clock cost with the AR loop on (`cfg`, or both inputs if
/// `cfg` disables them) and off, on random mixtures.
pub fn latency_report<E: MaskEstimator>(
    cfg: &ArConfig,
    est: &E,
    channels: usize,
    bins: usize,
    frames: usize,
    trials: usize,
) -> Result<LatencyReport> {
    let mut on = *cfg;
    if on.ar_inputs == ArInputs::None {
        on.ar_inputs = ArInputs::Both;
    }
    let off = ArConfig {
        ar_inputs: ArInputs::None,
        ..*cfg
    };
    let run = |c: &ArConfig| -> Result<(Vec<f64>, usize)> {
        let mut times = Vec::with_capacity(frames * trials);
        let mut solves = 0;
        for trial in 0..trials {
            let y = random_mixture(channels, frames, bins, trial as u64);
            let mut engine = ArEngine::new(*c, est, channels, bins)?;
            for t in 0..frames {
                let start = Instant::now();
                engine.process_frame(y.frame(t))?;
                times.push(start.elapsed().as_secs_f64());
            }
            solves += engine.solves();
        }
        Ok((times, solves))
    };
    let (t_on, solves_on) = run(&on)?;
    let (t_off, solves_off) = run(&off)?;
    Ok(LatencyReport {
        channels,
        bins,
        ar_on: TimingStats::from_samples(t_on),
        ar_off: TimingStats::from_samples(t_off),
        solves_on,
        solves_off,
    })
}

/// Median per-frame cost of the beamforming half of the loop (covariance
/// update, weight solve, beamformer application) for random data.
pub fn beamforming_cost(channels: usize, bins: usize, frames: usize, trials: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(frames * trials);
    for trial in 0..trials {
        let y = random_mixture(channels, frames + 1, bins, 100 + trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial as u64);
        let mut scm = ScmPair::new(channels, bins, 1.0)?;
        // Warm up past the cold start so every timed frame solves.
        let mut x_hat = vec![ZERO; channels * bins];
        let mut weights = BeamformerWeights::reference_selector(channels, bins, 0);
        for t in 0..=frames {
            let yf = y.frame(t);
            for f in 0..bins {
                let g = Complex64::new(rng.gen_range(0.0..1.0), rng.gen_range(-0.2..0.2));
                for c in 0..channels {
                    x_hat[c * bins + f] = yf[c * bins + f] * g;
                }
            }
            let start = Instant::now();
            let out = apply_bf(&weights, yf, yf, BfOption::CurrFrame)?;
            scm.update(&x_hat, yf)?;
            weights = mvdr_weights(&scm, 0, DEFAULT_DIAG_LOAD);
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(out);
            if t >= channels {
                times.push(elapsed);
            }
        }
    }
    Ok(TimingStats::from_samples(times).median_s)
}

/// Least-squares slope of `log(cost)` against `log(size)`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
