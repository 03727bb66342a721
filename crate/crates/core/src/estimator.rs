//! Mask estimators driven frame by frame by the auto-regressive engine.
//!
//! An estimator sees the mixture frame, the beamformed feature and its own
//! previous reference-channel estimate, and emits one raw complex mask value
//! per bin. Clipping is applied by the caller.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::mask::{oracle_crm, ComplexMask};
use crate::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Power floor of the reference-relative feature normalization.
pub const FEATURE_FLOOR: f64 = 1e-10;

pub const DEFAULT_HIDDEN: usize = 16;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ARSE";
const CHECKPOINT_VERSION: u32 = 1;

/// One frame of estimator input. `y_frame` is `[channel][bin]`; the two AR
/// slots hold one value per bin and are zero when disabled.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorInput<'a> {
    pub y_frame: &'a [Complex64],
    pub bf_frame: &'a [Complex64],
    pub prev_est_frame: &'a [Complex64],
    pub channels: usize,
    pub bins: usize,
    pub reference: usize,
}

impl EstimatorInput<'_> {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.y_frame.len(), self.channels * self.bins),
            (self.bf_frame.len(), self.bins),
            (self.prev_est_frame.len(), self.bins),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::LengthMismatch { expected, actual });
            }
        }
        if self.reference >= self.channels {
            return Err(Error::ShapeMismatch(format!(
                "reference {} out of range for {} channels",
                self.reference, self.channels
            )));
        }
        ensure_finite(self.y_frame, "mixture frame")?;
        ensure_finite(self.bf_frame, "beamformer feature")?;
        ensure_finite(self.prev_est_frame, "previous estimate")
    }
}

/// Causal frame-by-frame mask estimator.
pub trait MaskEstimator {
    type State;

    fn init_state(&self, channels: usize, bins: usize) -> Self::State;

    /// Raw (unclipped) mask values for the current frame, one per bin.
    fn step(&self, state: &mut Self::State, input: &EstimatorInput<'_>) -> Result<Vec<Complex64>>;
}

/// Replays the oracle mask of a known target, ignoring the AR inputs.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    mask: ComplexMask,
}

impl OracleEstimator {
    pub fn new(
        x_ref: &SingleChannelSpectrogram,
        y_ref: &SingleChannelSpectrogram,
        clip_mag: f64,
    ) -> Result<Self> {
        Ok(Self {
            mask: oracle_crm(x_ref, y_ref, clip_mag)?,
        })
    }

    pub fn mask(&self) -> &ComplexMask {
        &self.mask
    }
}

impl MaskEstimator for OracleEstimator {
    /// Index of the next frame.
    type State = usize;

    fn init_state(&self, _channels: usize, _bins: usize) -> usize {
        0
    }

    fn step(&self, state: &mut usize, input: &EstimatorInput<'_>) -> Result<Vec<Complex64>> {
        input.validate()?;
        if input.bins != self.mask.bins() {
            return Err(Error::LengthMismatch {
                expected: self.mask.bins(),
                actual: input.bins,
            });
        }
        if *state >= self.mask.frames() {
            return Err(Error::ShapeMismatch(format!(
                "oracle mask has {} frames, frame {} requested",
                self.mask.frames(),
                *state + 1
            )));
        }
        let out = self.mask.frame(*state).to_vec();
        *state += 1;
        Ok(out)
    }
}

/// Complex gain mapping an input value to its feature: `conj(Y_q) / (|Y_q|^2 + floor)`.
/// Features are therefore ratios to the reference mixture bin.
pub fn feature_gain(y_ref: Complex64) -> Complex64 {
    y_ref.conj() / (y_ref.norm_sqr() + FEATURE_FLOOR)
}

/// Index ranges of the parameter blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub inputs: usize,
    pub hidden: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_h: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(channels: usize, hidden: usize) -> Self {
        let d = 2 * (channels + 2);
        let w_in = 0;
        let b_in = w_in + hidden * d;
        let w_h = b_in + hidden;
        let w_out = w_h + hidden * hidden;
        let b_out = w_out + 2 * hidden;
        Self {
            inputs: d,
            hidden,
            w_in,
            b_in,
            w_h,
            w_out,
            b_out,
            len: b_out + 2,
        }
    }
}

/// Per-bin recurrent cell with parameters shared across bins:
///
/// ```text
/// h_t = tanh(W_in u_t + b_in + W_h h_{t-1})
/// o_t = W_out h_t + b_out          (mask = o_0 + i o_1)
/// ```
///
/// `u_t` holds the real and imaginary parts of the `M` mixture channels, the
/// beamformed feature and the previous estimate, each scaled by
/// [`feature_gain`] of the reference bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactEstimator {
    channels: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Hidden state of every bin, `[bin][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactState {
    pub hidden: Vec<f64>,
}

/// Encoded features of a whole utterance, `[frame][bin][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: usize,
    pub bins: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureSequence {
    pub fn at(&self, t: usize, f: usize) -> &[f64] {
        let start = (t * self.bins + f) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Activations of a recorded forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceRecord {
    pub frames: usize,
    pub bins: usize,
    pub features: Vec<f64>,
    /// `[frame][bin][unit]`
    pub hidden: Vec<f64>,
    /// Raw mask outputs, `[frame][bin]`.
    pub outputs: Vec<Complex64>,
}

/// Gradients of a recorded pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// Gradient with respect to every feature, laid out like [`FeatureSequence`].
    pub features: Option<Vec<f64>>,
}

impl CompactEstimator {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let len = ParamLayout::new(channels, hidden).len;
        Self {
            channels,
            hidden,
            params: vec![0.0; len],
        }
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn random(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut est = Self::zeros(channels, hidden);
        let l = est.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_in = 1.0 / (l.inputs as f64).sqrt();
        let a_h = 1.0 / (hidden as f64).sqrt();
        for p in &mut est.params[l.w_in..l.b_in] {
            *p = rng.gen_range(-a_in..a_in);
        }
        for p in &mut est.params[l.w_h..l.w_out] {
            *p = rng.gen_range(-a_h..a_h);
        }
        for p in &mut est.params[l.w_out..l.b_out] {
            *p = rng.gen_range(-a_h..a_h);
        }
        est
    }

    pub fn from_params(channels: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let len = ParamLayout::new(channels, hidden).len;
        if params.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: params.len(),
            });
        }
        Ok(Self {
            channels,
            hidden,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.channels, self.hidden)
    }

    pub fn input_dim(&self) -> usize {
        2 * (self.channels + 2)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Writes the features of bin `f` into `out`.
    pub fn encode(&self, input: &EstimatorInput<'_>, f: usize, out: &mut [f64]) {
        encode_bin(
            input.y_frame,
            input.bins,
            input.channels,
            input.reference,
            f,
            input.bf_frame[f],
            input.prev_est_frame[f],
            out,
        );
    }

    /// Encodes a whole utterance. `bf` is used as-is per frame; the previous
    /// estimate slot at frame `t` holds `nn[t-1]` and is zero at the first
    /// frame. `None` fills a slot with zeros.
    pub fn encode_sequence(
        &self,
        y: &MultichannelSpectrogram,
        bf: Option<&SingleChannelSpectrogram>,
        nn: Option<&SingleChannelSpectrogram>,
        reference: usize,
    ) -> Result<FeatureSequence> {
        if y.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects {} channels, mixture has {}",
                self.channels,
                y.channels()
            )));
        }
        if reference >= self.channels {
            return Err(Error::ShapeMismatch(format!(
                "reference {reference} out of range"
            )));
        }
        let (frames, bins) = (y.frames(), y.bins());
        for s in [bf, nn].into_iter().flatten() {
            if s.frames() != frames || s.bins() != bins {
                return Err(Error::ShapeMismatch(format!(
                    "AR feature {}x{} vs mixture {frames}x{bins}",
                    s.frames(),
                    s.bins()
                )));
            }
        }
        ensure_finite(y.as_slice(), "mixture")?;
        let d = self.input_dim();
        let mut values = vec![0.0; frames * bins * d];
        for t in 0..frames {
            let yf = y.frame(t);
            for f in 0..bins {
                let b = bf.map_or(ZERO, |s| s.get(t, f));
                let p = match nn {
                    Some(s) if t > 0 => s.get(t - 1, f),
                    _ => ZERO,
                };
                let start = (t * bins + f) * d;
                encode_bin(
                    yf,
                    bins,
                    self.channels,
                    reference,
                    f,
                    b,
                    p,
                    &mut values[start..start + d],
                );
            }
        }
        Ok(FeatureSequence {
            frames,
            bins,
            dim: d,
            values,
        })
    }

    /// One cell evaluation: writes `h` and returns the raw output pair.
    pub fn cell_forward(&self, u: &[f64], h_prev: &[f64], h: &mut [f64]) -> [f64; 2] {
        let l = self.layout();
        let (d, hn) = (l.inputs, l.hidden);
        let p = &self.params;
        for j in 0..hn {
            let wi = &p[l.w_in + j * d..l.w_in + (j + 1) * d];
            let wh = &p[l.w_h + j * hn..l.w_h + (j + 1) * hn];
            let mut a = p[l.b_in + j];
            for k in 0..d {
                a += wi[k] * u[k];
            }
            for k in 0..hn {
                a += wh[k] * h_prev[k];
            }
            h[j] = a.tanh();
        }
        let mut o = [p[l.b_out], p[l.b_out + 1]];
        for (r, out) in o.iter_mut().enumerate() {
            let wo = &p[l.w_out + r * hn..l.w_out + (r + 1) * hn];
            for k in 0..hn {
                *out += wo[k] * h[k];
            }
        }
        o
    }

    /// Backward through one cell evaluation.
    ///
    /// `dh` carries the gradient with respect to `h` on entry and is replaced
    /// by the gradient with respect to `h_prev`. Parameter gradients are
    /// accumulated into `grad`; the feature gradient is written to `du` if
    /// requested. `scratch` must hold at least `hidden` values.
    #[allow(clippy::too_many_arguments)]
    pub fn cell_backward(
        &self,
        u: &[f64],
        h_prev: &[f64],
        h: &[f64],
        dout: [f64; 2],
        dh: &mut [f64],
        grad: &mut [f64],
        du: Option<&mut [f64]>,
        scratch: &mut [f64],
    ) {
        let l = self.layout();
        let (d, hn) = (l.inputs, l.hidden);
        let p = &self.params;
        grad[l.b_out] += dout[0];
        grad[l.b_out + 1] += dout[1];
        for (r, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in 0..hn {
                grad[l.w_out + r * hn + k] += g * h[k];
                dh[k] += p[l.w_out + r * hn + k] * g;
            }
        }
        let da = &mut scratch[..hn];
        for j in 0..hn {
            da[j] = dh[j] * (1.0 - h[j] * h[j]);
        }
        dh.fill(0.0);
        for j in 0..hn {
            let g = da[j];
            if g == 0.0 {
                continue;
            }
            grad[l.b_in + j] += g;
            let gi = &mut grad[l.w_in + j * d..l.w_in + (j + 1) * d];
            for k in 0..d {
                gi[k] += g * u[k];
            }
            let gh = &mut grad[l.w_h + j * hn..l.w_h + (j + 1) * hn];
            for k in 0..hn {
                gh[k] += g * h_prev[k];
            }
            let wh = &p[l.w_h + j * hn..l.w_h + (j + 1) * hn];
            for k in 0..hn {
                dh[k] += wh[k] * g;
            }
        }
        if let Some(du) = du {
            du.fill(0.0);
            for j in 0..hn {
                let g = da[j];
                let wi = &p[l.w_in + j * d..l.w_in + (j + 1) * d];
                for k in 0..d {
                    du[k] += wi[k] * g;
                }
            }
        }
    }

    /// Runs the cell over a whole feature sequence from a zero state,
    /// recording every activation.
    pub fn forward_sequence(&self, features: &FeatureSequence) -> Result<SequenceRecord> {
        if features.dim != self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: self.input_dim(),
                actual: features.dim,
            });
        }
        let (frames, bins, hn) = (features.frames, features.bins, self.hidden);
        let zero_h = vec![0.0; hn];
        let mut hidden = vec![0.0; frames * bins * hn];
        let mut outputs = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            let (before, rest) = hidden.split_at_mut(t * bins * hn);
            for f in 0..bins {
                let h_prev = if t == 0 {
                    &zero_h[..]
                } else {
                    &before[((t - 1) * bins + f) * hn..((t - 1) * bins + f + 1) * hn]
                };
                let o =
                    self.cell_forward(features.at(t, f), h_prev, &mut rest[f * hn..(f + 1) * hn]);
                outputs.push(Complex64::new(o[0], o[1]));
            }
        }
        Ok(SequenceRecord {
            frames,
            bins,
            features: features.values.clone(),
            hidden,
            outputs,
        })
    }

    /// Exact gradients of a recorded pass given the gradient with respect to
    /// every raw output, `[frame][bin]`, as `d/dRe + i d/dIm`.
    pub fn backward(
        &self,
        record: &SequenceRecord,
        grad_out: &[Complex64],
        want_features: bool,
    ) -> Result<Gradients> {
        if record.frames == 0 {
            return Err(Error::NoForwardPass);
        }
        let (frames, bins) = (record.frames, record.bins);
        if grad_out.len() != frames * bins {
            return Err(Error::LengthMismatch {
                expected: frames * bins,
                actual: grad_out.len(),
            });
        }
        let (d, hn) = (self.input_dim(), self.hidden);
        let mut grad = vec![0.0; self.params.len()];
        let mut feature_grad = want_features.then(|| vec![0.0; frames * bins * d]);
        let zero_h = vec![0.0; hn];
        let mut dh = vec![0.0; hn];
        let mut scratch = vec![0.0; hn];
        for f in 0..bins {
            dh.fill(0.0);
            for t in (0..frames).rev() {
                let idx = t * bins + f;
                let h = &record.hidden[idx * hn..(idx + 1) * hn];
                let h_prev = if t == 0 {
                    &zero_h[..]
                } else {
                    let p = (t - 1) * bins + f;
                    &record.hidden[p * hn..(p + 1) * hn]
                };
                let u = &record.features[idx * d..(idx + 1) * d];
                let g = grad_out[idx];
                let du = feature_grad
                    .as_mut()
                    .map(|fg| &mut fg[idx * d..(idx + 1) * d]);
                self.cell_backward(
                    u,
                    h_prev,
                    h,
                    [g.re, g.im],
                    &mut dh,
                    &mut grad,
                    du,
                    &mut scratch,
                );
            }
        }
        Ok(Gradients {
            params: grad,
            features: feature_grad,
        })
    }

    /// Little-endian checkpoint: magic, version, hidden size, channel count,
    /// bin-sharing flag, then every parameter block as `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            self.hidden as u32,
            self.channels as u32,
            1,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut next = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hidden = next(&mut r)? as usize;
        let channels = next(&mut r)? as usize;
        let shared = next(&mut r)?;
        if shared != 1 {
            return Err(bad("only bin-shared parameters are supported".into()));
        }
        if hidden == 0 || channels < 2 || hidden > 4096 || channels > 1024 {
            return Err(bad(format!("implausible sizes H={hidden} M={channels}")));
        }
        let len = ParamLayout::new(channels, hidden).len;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        Self::from_params(channels, hidden, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&bytes[..])
    }

    /// Rounds every parameter to the checkpoint precision.
    pub fn round_to_checkpoint(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_bin(
    y_frame: &[Complex64],
    bins: usize,
    channels: usize,
    reference: usize,
    f: usize,
    bf: Complex64,
    prev: Complex64,
    out: &mut [f64],
) {
    let g = feature_gain(y_frame[reference * bins + f]);
    for c in 0..channels {
        let v = y_frame[c * bins + f] * g;
        out[2 * c] = v.re;
        out[2 * c + 1] = v.im;
    }
    let b = bf * g;
    let p = prev * g;
    out[2 * channels] = b.re;
    out[2 * channels + 1] = b.im;
    out[2 * channels + 2] = p.re;
    out[2 * channels + 3] = p.im;
}

impl MaskEstimator for CompactEstimator {
    type State = CompactState;

    fn init_state(&self, _channels: usize, bins: usize) -> CompactState {
        CompactState {
            hidden: vec![0.0; bins * self.hidden],
        }
    }

    fn step(&self, state: &mut CompactState, input: &EstimatorInput<'_>) -> Result<Vec<Complex64>> {
        input.validate()?;
        if input.channels != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects {} channels, got {}",
                self.channels, input.channels
            )));
        }
        let hn = self.hidden;
        if state.hidden.len() != input.bins * hn {
            return Err(Error::LengthMismatch {
                expected: input.bins * hn,
                actual: state.hidden.len(),
            });
        }
        let mut u = vec![0.0; self.input_dim()];
        let mut h = vec![0.0; hn];
        let mut out = Vec::with_capacity(input.bins);
        for f in 0..input.bins {
            self.encode(input, f, &mut u);
            let slot = &mut state.hidden[f * hn..(f + 1) * hn];
            let o = self.cell_forward(&u, slot, &mut h);
            slot.copy_from_slice(&h);
            out.push(Complex64::new(o[0], o[1]));
        }
        Ok(out)
    }
}

/// Either estimator, for callers choosing at run time.
#[derive(Debug, Clone)]
pub enum AnyEstimator {
    Oracle(OracleEstimator),
    Compact(CompactEstimator),
}

#[derive(Debug, Clone)]
pub enum AnyState {
    Oracle(usize),
    Compact(CompactState),
}

impl MaskEstimator for AnyEstimator {
    type State = AnyState;

    fn init_state(&self, channels: usize, bins: usize) -> AnyState {
        match self {
            Self::Oracle(e) => AnyState::Oracle(e.init_state(channels, bins)),
            Self::Compact(e) => AnyState::Compact(e.init_state(channels, bins)),
        }
    }

    fn step(&self, state: &mut AnyState, input: &EstimatorInput<'_>) -> Result<Vec<Complex64>> {
        match (self, state) {
            (Self::Oracle(e), AnyState::Oracle(s)) => e.step(s, input),
            (Self::Compact(e), AnyState::Compact(s)) => e.step(s, input),
            _ => Err(Error::InvalidConfig(
                "estimator state of the wrong kind".into(),
            )),
        }
    }
}
