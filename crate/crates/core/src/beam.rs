//! Mask-driven spatial covariance accumulation and MVDR beamforming.
//!
//! Target and noise covariances are running sums of outer products of the
//! masked mixture and its complement. The beamformer is the trace-normalized
//! MVDR solution `(Phi_N^-1 Phi_X / tr(Phi_N^-1 Phi_X)) u_q`, computed per
//! frequency with a Cholesky solve against a diagonally loaded noise SCM.

use num_complex::Complex64;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Bins whose trace normalizer falls below this magnitude are invalid.
pub const TRACE_FLOOR: f64 = 1e-12;

/// Default relative diagonal loading of the noise SCM.
pub const DEFAULT_DIAG_LOAD: f64 = 1e-6;

/// Running target/noise spatial covariance matrices for every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmPair {
    channels: usize,
    bins: usize,
    /// `[bin][row][col]`
    phi_x: Vec<Complex64>,
    phi_n: Vec<Complex64>,
    frames_seen: usize,
    forgetting: f64,
}

impl ScmPair {
    pub fn new(channels: usize, bins: usize, forgetting: f64) -> Result<Self> {
        if !(forgetting > 0.0 && forgetting <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "forgetting factor must lie in (0, 1], got {forgetting}"
            )));
        }
        Ok(Self {
            channels,
            bins,
            phi_x: vec![ZERO; bins * channels * channels],
            phi_n: vec![ZERO; bins * channels * channels],
            frames_seen: 0,
            forgetting,
        })
    }

    /// Builds a pair from explicit matrices (`[bin][row][col]`).
    pub fn from_matrices(
        channels: usize,
        bins: usize,
        phi_x: Vec<Complex64>,
        phi_n: Vec<Complex64>,
        frames_seen: usize,
    ) -> Result<Self> {
        let n = bins * channels * channels;
        for len in [phi_x.len(), phi_n.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(Self {
            channels,
            bins,
            phi_x,
            phi_n,
            frames_seen,
            forgetting: 1.0,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn forgetting(&self) -> f64 {
        self.forgetting
    }

    pub fn phi_x(&self, f: usize) -> &[Complex64] {
        let mm = self.channels * self.channels;
        &self.phi_x[f * mm..(f + 1) * mm]
    }

    pub fn phi_n(&self, f: usize) -> &[Complex64] {
        let mm = self.channels * self.channels;
        &self.phi_n[f * mm..(f + 1) * mm]
    }

    /// Adds one frame. Both frames are `[channel][bin]`; the noise estimate
    /// is `y - x_hat`.
    pub fn update(&mut self, x_hat_frame: &[Complex64], y_frame: &[Complex64]) -> Result<()> {
        let n = self.channels * self.bins;
        for len in [x_hat_frame.len(), y_frame.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        ensure_finite(x_hat_frame, "target estimate frame")?;
        ensure_finite(y_frame, "mixture frame")?;
        let (m, bins, lambda) = (self.channels, self.bins, self.forgetting);
        let mut xv = vec![ZERO; m];
        let mut nv = vec![ZERO; m];
        for f in 0..bins {
            for c in 0..m {
                xv[c] = x_hat_frame[c * bins + f];
                nv[c] = y_frame[c * bins + f] - xv[c];
            }
            let base = f * m * m;
            accumulate_outer(&mut self.phi_x[base..base + m * m], &xv, lambda);
            accumulate_outer(&mut self.phi_n[base..base + m * m], &nv, lambda);
        }
        self.frames_seen += 1;
        Ok(())
    }
}

/// `phi = lambda * phi + v v^H`, filling the upper triangle and mirroring it
/// so the result is exactly Hermitian.
pub(crate) fn accumulate_outer(phi: &mut [Complex64], v: &[Complex64], lambda: f64) {
    let m = v.len();
    for i in 0..m {
        for j in i..m {
            let mut p = phi[i * m + j];
            if lambda != 1.0 {
                p *= lambda;
            }
            p += v[i] * v[j].conj();
            if i == j {
                p.im = 0.0;
            }
            phi[i * m + j] = p;
            phi[j * m + i] = p.conj();
        }
    }
}

/// Per-frequency beamformer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    channels: usize,
    reference: usize,
    /// `[bin][channel]`
    w: Vec<Complex64>,
    valid: Vec<bool>,
    /// Number of frames of covariance data the weights were computed from.
    computed_through: usize,
}

impl BeamformerWeights {
    /// The reference-channel selector `e_q` in every bin.
    pub fn reference_selector(channels: usize, bins: usize, reference: usize) -> Self {
        let mut w = vec![ZERO; bins * channels];
        for f in 0..bins {
            w[f * channels + reference] = Complex64::new(1.0, 0.0);
        }
        Self {
            channels,
            reference,
            w,
            valid: vec![true; bins],
            computed_through: 0,
        }
    }

    pub fn from_parts(
        channels: usize,
        reference: usize,
        w: Vec<Complex64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if w.len() != valid.len() * channels {
            return Err(Error::LengthMismatch {
                expected: valid.len() * channels,
                actual: w.len(),
            });
        }
        Ok(Self {
            channels,
            reference,
            w,
            valid,
            computed_through: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.valid.len()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn weights(&self, f: usize) -> &[Complex64] {
        &self.w[f * self.channels..(f + 1) * self.channels]
    }

    pub fn is_valid(&self, f: usize) -> bool {
        self.valid[f]
    }

    pub fn computed_through(&self) -> usize {
        self.computed_through
    }
}

/// Intermediate quantities of one bin's MVDR solve.
#[derive(Debug, Clone)]
pub struct MvdrSolution {
    /// Cholesky factor of the loaded noise SCM.
    pub factor: Vec<Complex64>,
    /// `A^-1 Phi_X`, row-major.
    pub ratio: Vec<Complex64>,
    pub trace: Complex64,
    pub w: Vec<Complex64>,
}

/// Loaded noise SCM `Phi_N + eps * tr(Phi_N) / M * I`.
pub fn loaded_noise(phi_n: &[Complex64], m: usize, diag_load: f64) -> Vec<Complex64> {
    let mut a = phi_n.to_vec();
    if diag_load != 0.0 {
        let load = diag_load * linalg::trace(phi_n, m) / m as f64;
        for i in 0..m {
            a[i * m + i] += load;
        }
    }
    a
}

/// MVDR weights for one bin, or `None` where the solve is unusable.
pub fn mvdr_bin(
    phi_x: &[Complex64],
    phi_n: &[Complex64],
    m: usize,
    reference: usize,
    diag_load: f64,
) -> Option<MvdrSolution> {
    let a = loaded_noise(phi_n, m, diag_load);
    let factor = linalg::cholesky(&a, m)?;
    let mut ratio = phi_x.to_vec();
    linalg::cholesky_solve(&factor, m, &mut ratio, m);
    let trace = linalg::trace(&ratio, m);
    if !(trace.norm() >= TRACE_FLOOR) {
        return None;
    }
    let w: Vec<Complex64> = (0..m).map(|i| ratio[i * m + reference] / trace).collect();
    if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(MvdrSolution {
        factor,
        ratio,
        trace,
        w,
    })
}

/// Computes MVDR weights for every bin. Until `M` frames have been seen, the
/// reference selector is returned.
pub fn mvdr_weights(scm: &ScmPair, reference: usize, diag_load: f64) -> BeamformerWeights {
    let (m, bins) = (scm.channels, scm.bins);
    let mut out = BeamformerWeights::reference_selector(m, bins, reference);
    out.computed_through = scm.frames_seen;
    if scm.frames_seen < m {
        return out;
    }
    for f in 0..bins {
        match mvdr_bin(scm.phi_x(f), scm.phi_n(f), m, reference, diag_load) {
            Some(sol) => out.w[f * m..(f + 1) * m].copy_from_slice(&sol.w),
            None => {
                out.w[f * m..(f + 1) * m].fill(ZERO);
                out.valid[f] = false;
            }
        }
    }
    out
}

/// Which mixture frame the previous frame's beamformer is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BfOption {
    /// `w(t-1)^H Y(t-1)`
    PrevFrame,
    /// `w(t-1)^H Y(t)`
    #[default]
    CurrFrame,
}

impl std::str::FromStr for BfOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prev" | "prev_frame" => Ok(Self::PrevFrame),
            "curr" | "curr_frame" => Ok(Self::CurrFrame),
            other => Err(Error::InvalidConfig(format!("unknown bf option {other:?}"))),
        }
    }
}

impl std::fmt::Display for BfOption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PrevFrame => "prev_frame",
            Self::CurrFrame => "curr_frame",
        })
    }
}

/// `w^H y` per bin on the frame selected by `option`. Invalid bins give zero.
pub fn apply_bf(
    weights: &BeamformerWeights,
    y_frame_prev: &[Complex64],
    y_frame_curr: &[Complex64],
    option: BfOption,
) -> Result<Vec<Complex64>> {
    let (m, bins) = (weights.channels, weights.bins());
    for len in [y_frame_prev.len(), y_frame_curr.len()] {
        if len != m * bins {
            return Err(Error::LengthMismatch {
                expected: m * bins,
                actual: len,
            });
        }
    }
    let y = match option {
        BfOption::PrevFrame => y_frame_prev,
        BfOption::CurrFrame => y_frame_curr,
    };
    Ok((0..bins)
        .map(|f| {
            if !weights.valid[f] {
                return ZERO;
            }
            weights
                .weights(f)
                .iter()
                .enumerate()
                .map(|(c, w)| w.conj() * y[c * bins + f])
                .sum()
        })
        .collect())
}
