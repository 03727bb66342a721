//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames are windowed with a periodic square-root Hann window on both sides
//! of the transform, so that with any hop of `window_len / k` (`k >= 2`) the
//! product of analysis and synthesis windows overlap-adds to a constant and
//! the round trip reconstructs the input exactly (up to rounding).
//!
//! Signals are zero padded by `window_len - hop` samples at both ends before
//! framing, so the first frame already ends on the first `hop` input samples.
//! The streaming analyzer and synthesizer reproduce the batch framing sample
//! for sample.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowKind {
    #[default]
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 20 ms window, 10 ms hop at 16 kHz, giving 161 bins.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 320,
            hop: 160,
            fft_len: 320,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    /// Config with `fft_len == window_len`.
    pub fn new(sample_rate: u32, window_len: usize, hop: usize) -> Self {
        Self {
            sample_rate,
            window_len,
            hop,
            fft_len: window_len,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of zeros prepended (and appended) before framing.
    pub fn pad(&self) -> usize {
        self.window_len - self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop == 0 || self.window_len == 0 {
            return Err(Error::InvalidConfig(
                "sample_rate, window_len and hop must be positive".into(),
            ));
        }
        if !self.window_len.is_multiple_of(self.hop) || self.window_len / self.hop < 2 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide window_len {} with at least 2 frames of overlap",
                self.hop, self.window_len
            )));
        }
        if self.fft_len < self.window_len {
            return Err(Error::InvalidConfig(format!(
                "fft_len {} shorter than window_len {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        let padded_len = len.div_ceil(self.hop) * self.hop;
        (padded_len + 2 * self.pad() - self.window_len) / self.hop + 1
    }
}

/// Complex spectrogram of a single channel, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleChannelSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl SingleChannelSpectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::LengthMismatch {
                expected: frames * bins,
                actual: data.len(),
            });
        }
        ensure_finite(&data, "spectrogram")?;
        Ok(Self { frames, bins, data })
    }

    pub fn from_frames(bins: usize, frames: &[Vec<Complex64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(bins * frames.len());
        for frame in frames {
            if frame.len() != bins {
                return Err(Error::LengthMismatch {
                    expected: bins,
                    actual: frame.len(),
                });
            }
            data.extend_from_slice(frame);
        }
        Self::from_vec(frames.len(), bins, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// First `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            bins: self.bins,
            data: self.data[..frames * self.bins].to_vec(),
        }
    }
}

/// Complex spectrogram of an M-channel signal.
///
/// Storage is frame-major: all channels of one frame are contiguous, channel
/// by channel, so the frame-online loop reads a single slice per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl MultichannelSpectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        Self {
            channels,
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); channels * frames * bins],
        }
    }

    /// Builds from frame-major data (`[frame][channel][bin]`).
    pub fn from_vec(
        channels: usize,
        frames: usize,
        bins: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if channels == 0 || frames == 0 || bins == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram dimensions must be positive, got M={channels} T={frames} F={bins}"
            )));
        }
        if data.len() != channels * frames * bins {
            return Err(Error::LengthMismatch {
                expected: channels * frames * bins,
                actual: data.len(),
            });
        }
        ensure_finite(&data, "spectrogram")?;
        Ok(Self {
            channels,
            frames,
            bins,
            data,
        })
    }

    /// Stacks single-channel spectrograms of identical shape.
    pub fn from_channels(channels: &[SingleChannelSpectrogram]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::ShapeMismatch("no channels".into()))?;
        let (frames, bins) = (first.frames, first.bins);
        if channels
            .iter()
            .any(|c| c.frames != frames || c.bins != bins)
        {
            return Err(Error::ShapeMismatch("channel shapes differ".into()));
        }
        let mut data = Vec::with_capacity(channels.len() * frames * bins);
        for t in 0..frames {
            for c in channels {
                data.extend_from_slice(c.frame(t));
            }
        }
        Self::from_vec(channels.len(), frames, bins, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// All channels of frame `t`, `[channel][bin]`.
    pub fn frame(&self, t: usize) -> &[Complex64] {
        let n = self.channels * self.bins;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let n = self.channels * self.bins;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn channel_frame(&self, m: usize, t: usize) -> &[Complex64] {
        let start = (t * self.channels + m) * self.bins;
        &self.data[start..start + self.bins]
    }

    pub fn get(&self, m: usize, t: usize, f: usize) -> Complex64 {
        self.data[(t * self.channels + m) * self.bins + f]
    }

    pub fn channel(&self, m: usize) -> SingleChannelSpectrogram {
        let mut data = Vec::with_capacity(self.frames * self.bins);
        for t in 0..self.frames {
            data.extend_from_slice(self.channel_frame(m, t));
        }
        SingleChannelSpectrogram {
            frames: self.frames,
            bins: self.bins,
            data,
        }
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        let n = self.channels * self.bins;
        Self {
            channels: self.channels,
            frames,
            bins: self.bins,
            data: self.data[..frames * n].to_vec(),
        }
    }
}

fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos())).sqrt())
        .collect()
}

/// Planned transform pair for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    synthesis_window: Vec<f64>,
    cola: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("cfg", &self.cfg)
            .field("cola", &self.cola)
            .finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let window = match cfg.window {
            WindowKind::SqrtHann => sqrt_hann(cfg.window_len),
        };
        // Overlap-added squared window, constant across the hop.
        let cola = (0..cfg.hop)
            .map(|n| {
                (0..cfg.window_len / cfg.hop)
                    .map(|k| window[n + k * cfg.hop].powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / cfg.hop as f64;
        let synthesis_window = window.iter().map(|w| w / cola).collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window,
            synthesis_window,
            cola,
            forward: planner.plan_fft_forward(cfg.fft_len),
            inverse: planner.plan_fft_inverse(cfg.fft_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Constant value of the overlap-added squared analysis window.
    pub fn cola_sum(&self) -> f64 {
        self.cola
    }

    /// Windowed transform of exactly `window_len` samples.
    pub fn analyze_frame(&self, samples: &[f64]) -> Result<Vec<Complex64>> {
        if samples.len() != self.cfg.window_len {
            return Err(Error::LengthMismatch {
                expected: self.cfg.window_len,
                actual: samples.len(),
            });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_len];
        for ((b, &s), &w) in buf.iter_mut().zip(samples).zip(&self.window) {
            b.re = s * w;
        }
        self.forward.process(&mut buf);
        buf.truncate(self.cfg.num_bins());
        Ok(buf)
    }

    /// One frame for every channel, `[channel][bin]` concatenated.
    pub fn analyze_frame_multi(&self, channels: &[&[f64]]) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(channels.len() * self.cfg.num_bins());
        for ch in channels {
            out.extend(self.analyze_frame(ch)?);
        }
        Ok(out)
    }

    /// Frames a single channel signal after zero padding both ends.
    pub fn analyze_signal(&self, signal: &[f64]) -> Result<SingleChannelSpectrogram> {
        let padded = self.padded(signal);
        let frames = self.cfg.frames_for(signal.len());
        let bins = self.cfg.num_bins();
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            let start = t * self.cfg.hop;
            data.extend(self.analyze_frame(&padded[start..start + self.cfg.window_len])?);
        }
        SingleChannelSpectrogram::from_vec(frames, bins, data)
    }

    /// Frames every channel; all channels must have equal length.
    pub fn analyze(&self, channels: &[Vec<f64>]) -> Result<MultichannelSpectrogram> {
        let first = channels
            .first()
            .ok_or_else(|| Error::ShapeMismatch("no channels".into()))?;
        if let Some(bad) = channels.iter().find(|c| c.len() != first.len()) {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                actual: bad.len(),
            });
        }
        let specs = channels
            .iter()
            .map(|c| self.analyze_signal(c))
            .collect::<Result<Vec<_>>>()?;
        MultichannelSpectrogram::from_channels(&specs)
    }

    fn padded(&self, signal: &[f64]) -> Vec<f64> {
        let pad = self.cfg.pad();
        let body = signal.len().div_ceil(self.cfg.hop) * self.cfg.hop;
        let mut padded = vec![0.0; pad + body + pad];
        padded[pad..pad + signal.len()].copy_from_slice(signal);
        padded
    }

    /// Inverse transform of one frame, weighted by the synthesis window.
    pub fn synthesize_frame(&self, bins: &[Complex64]) -> Result<Vec<f64>> {
        let nb = self.cfg.num_bins();
        if bins.len() != nb {
            return Err(Error::LengthMismatch {
                expected: nb,
                actual: bins.len(),
            });
        }
        let n = self.cfg.fft_len;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..nb].copy_from_slice(bins);
        // Imaginary parts of DC and Nyquist carry nothing for a real signal.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[nb - 1].im = 0.0;
        }
        for k in nb..n {
            buf[k] = buf[n - k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        Ok(buf[..self.cfg.window_len]
            .iter()
            .zip(&self.synthesis_window)
            .map(|(z, w)| z.re * scale * w)
            .collect())
    }

    /// Overlap-add synthesis; output length is `(T - 1) * hop + window_len`.
    pub fn synthesize(&self, spec: &SingleChannelSpectrogram) -> Result<Vec<f64>> {
        if spec.bins() != self.cfg.num_bins() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram has {} bins, config expects {}",
                spec.bins(),
                self.cfg.num_bins()
            )));
        }
        if spec.frames() == 0 {
            return Ok(Vec::new());
        }
        let len = (spec.frames() - 1) * self.cfg.hop + self.cfg.window_len;
        let mut out = vec![0.0; len];
        for t in 0..spec.frames() {
            let frame = self.synthesize_frame(spec.frame(t))?;
            let start = t * self.cfg.hop;
            for (o, s) in out[start..].iter_mut().zip(frame) {
                *o += s;
            }
        }
        Ok(out)
    }

    /// Synthesizes and strips the analysis padding, returning `len` samples.
    pub fn synthesize_trimmed(
        &self,
        spec: &SingleChannelSpectrogram,
        len: usize,
    ) -> Result<Vec<f64>> {
        let full = self.synthesize(spec)?;
        let pad = self.cfg.pad();
        let mut out: Vec<f64> = full.into_iter().skip(pad).take(len).collect();
        out.resize(len, 0.0);
        Ok(out)
    }
}

/// Time-domain energy of a windowed frame, computed from its one-sided spectrum.
pub fn spectral_frame_energy(bins: &[Complex64], fft_len: usize) -> f64 {
    let last = fft_len / 2;
    let sum: f64 = bins
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let weight = if k == 0 || (fft_len.is_multiple_of(2) && k == last) {
                1.0
            } else {
                2.0
            };
            weight * z.norm_sqr()
        })
        .sum();
    sum / fft_len as f64
}

/// Frame-by-frame analyzer for a live stream of `channels` signals.
///
/// Each call to [`StreamingAnalyzer::push`] takes `hop` new samples per channel
/// and yields one multichannel frame identical to the batch framing.
pub struct StreamingAnalyzer {
    stft: Stft,
    buffers: Vec<Vec<f64>>,
}

impl StreamingAnalyzer {
    pub fn new(stft: Stft, channels: usize) -> Self {
        let len = stft.cfg.window_len;
        Self {
            stft,
            buffers: vec![vec![0.0; len]; channels],
        }
    }

    pub fn push(&mut self, hop_samples: &[&[f64]]) -> Result<Vec<Complex64>> {
        if hop_samples.len() != self.buffers.len() {
            return Err(Error::LengthMismatch {
                expected: self.buffers.len(),
                actual: hop_samples.len(),
            });
        }
        let hop = self.stft.cfg.hop;
        for (buf, new) in self.buffers.iter_mut().zip(hop_samples) {
            if new.len() != hop {
                return Err(Error::LengthMismatch {
                    expected: hop,
                    actual: new.len(),
                });
            }
            buf.copy_within(hop.., 0);
            let len = buf.len();
            buf[len - hop..].copy_from_slice(new);
        }
        let refs: Vec<&[f64]> = self.buffers.iter().map(Vec::as_slice).collect();
        self.stft.analyze_frame_multi(&refs)
    }
}

/// Overlap-add synthesizer emitting `hop` samples per pushed frame.
pub struct StreamingSynthesizer {
    stft: Stft,
    overlap: Vec<f64>,
}

impl StreamingSynthesizer {
    pub fn new(stft: Stft) -> Self {
        let len = stft.cfg.window_len;
        Self {
            stft,
            overlap: vec![0.0; len],
        }
    }

    pub fn push(&mut self, bins: &[Complex64]) -> Result<Vec<f64>> {
        let frame = self.stft.synthesize_frame(bins)?;
        for (o, s) in self.overlap.iter_mut().zip(frame) {
            *o += s;
        }
        let hop = self.stft.cfg.hop;
        let out = self.overlap[..hop].to_vec();
        self.overlap.copy_within(hop.., 0);
        let len = self.overlap.len();
        self.overlap[len - hop..].fill(0.0);
        Ok(out)
    }

    /// Remaining `window_len - hop` samples of the overlap buffer.
    pub fn flush(self) -> Vec<f64> {
        let pad = self.stft.cfg.pad();
        self.overlap[..pad].to_vec()
    }
}
