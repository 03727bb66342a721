//! Exact gradients through the whole auto-regressive loop, including the
//! covariance accumulation and the MVDR solve.
//!
//! Every quantity in the loop is per bin, so each bin is unrolled forward in
//! time, then swept backward. With `a_t = |Z_t|^2` and `b_t = |1 - Z_t|^2`,
//! the covariances are `Phi_X(t) = lambda Phi_X(t-1) + a_t y_t y_t^H` (and
//! likewise for the noise), so their adjoints are reverse-time running sums
//! and `dL/da_t = Re(y_t^H Psi_X(t) y_t)`.

use num_complex::Complex64;

use crate::beam::{accumulate_outer, mvdr_bin, BfOption, MvdrSolution};
use crate::engine::ArConfig;
use crate::error::{Error, Result};
use crate::estimator::{encode_bin, feature_gain, CompactEstimator};
use crate::linalg;
use crate::mask::{clip_backward, clip_value};
use crate::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram};

use super::l1_element;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Longest utterance accepted for through-time training.
pub const MAX_BPTT_FRAMES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BpttOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Reference-channel estimate of the unrolled forward pass.
    pub estimate: SingleChannelSpectrogram,
}

/// Pulls a weight gradient back to the two covariances of one bin's solve.
///
/// With `A = Phi_N + eps tr(Phi_N)/M I`, `R = A^-1 Phi_X`, `tau = tr R` and
/// `w = R e_q / tau`: `Rbar = wbar e_q^T / conj(tau) - conj(c) I` where
/// `c = sum conj(wbar_i) w_i / tau`. Then `Phi_X bar = A^-1 Rbar`,
/// `A bar = -Phi_X bar R^H` (from `d(A^-1) = -A^-1 dA A^-1`), and the loading
/// adds `eps/M tr(A bar) I` to the noise adjoint. Gradients use the
/// `d/dRe + i d/dIm` convention throughout.
pub fn mvdr_bin_backward(
    sol: &MvdrSolution,
    wbar: &[Complex64],
    m: usize,
    reference: usize,
    diag_load: f64,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let tau = sol.trace;
    let c: Complex64 = wbar
        .iter()
        .zip(&sol.w)
        .map(|(g, w)| g.conj() * w)
        .sum::<Complex64>()
        / tau;
    let mut a_inv = vec![ZERO; m * m];
    for i in 0..m {
        a_inv[i * m + i] = Complex64::new(1.0, 0.0);
    }
    linalg::cholesky_solve(&sol.factor, m, &mut a_inv, m);
    let tau_c = tau.conj();
    let cc = c.conj();
    let mut phi_x_bar = vec![ZERO; m * m];
    for i in 0..m {
        let v: Complex64 = (0..m)
            .map(|k| a_inv[i * m + k] * wbar[k])
            .sum::<Complex64>()
            / tau_c;
        for j in 0..m {
            phi_x_bar[i * m + j] = -cc * a_inv[i * m + j];
        }
        phi_x_bar[i * m + reference] += v;
    }
    let r = &sol.ratio;
    let mut phi_n_bar = vec![ZERO; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut s = ZERO;
            for k in 0..m {
                s += phi_x_bar[i * m + k] * r[j * m + k].conj();
            }
            phi_n_bar[i * m + j] = -s;
        }
    }
    if diag_load != 0.0 {
        let tr = linalg::trace(&phi_n_bar, m) * (diag_load / m as f64);
        for i in 0..m {
            phi_n_bar[i * m + i] += tr;
        }
    }
    (phi_x_bar, phi_n_bar)
}

/// Everything the backward sweep of one bin needs.
struct BinTape {
    u: Vec<f64>,
    h: Vec<f64>,
    z: Vec<Complex64>,
    mask: Vec<Complex64>,
    /// Frame whose solve produced the weights used at each frame.
    w_src: Vec<Option<usize>>,
    sols: Vec<Option<MvdrSolution>>,
}

/// L1 loss of the unrolled loop against `target` and its exact gradient with
/// respect to every estimator parameter.
pub fn bptt_gradient(
    est: &CompactEstimator,
    cfg: &ArConfig,
    y: &MultichannelSpectrogram,
    target: &SingleChannelSpectrogram,
) -> Result<BpttOutput> {
    let (m, frames, bins) = (y.channels(), y.frames(), y.bins());
    cfg.validate(m)?;
    if frames > MAX_BPTT_FRAMES {
        return Err(Error::SequenceTooLong {
            frames,
            limit: MAX_BPTT_FRAMES,
        });
    }
    if frames == 0 {
        return Err(Error::ShapeMismatch("empty mixture".into()));
    }
    if est.channels() != m {
        return Err(Error::ShapeMismatch(format!(
            "estimator expects {} channels, mixture has {m}",
            est.channels()
        )));
    }
    if target.frames() != frames || target.bins() != bins {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs mixture {frames}x{bins}",
            target.frames(),
            target.bins()
        )));
    }
    crate::error::ensure_finite(y.as_slice(), "mixture")?;
    let scale = 1.0 / (frames * bins) as f64;
    let mut grad = vec![0.0; est.params().len()];
    let mut estimate = vec![ZERO; frames * bins];
    let mut loss = 0.0;
    for f in 0..bins {
        let tape = forward_bin(est, cfg, y, f);
        let mut lgrad = vec![ZERO; frames];
        for t in 0..frames {
            let e = y.get(cfg.reference, t, f) * tape.mask[t];
            estimate[t * bins + f] = e;
            let (l, g) = l1_element(e - target.get(t, f));
            loss += l * scale;
            lgrad[t] = g * scale;
        }
        backward_bin(est, cfg, y, f, &tape, &lgrad, &mut grad);
    }
    Ok(BpttOutput {
        loss,
        grad,
        estimate: SingleChannelSpectrogram::from_vec(frames, bins, estimate)?,
    })
}

fn forward_bin(
    est: &CompactEstimator,
    cfg: &ArConfig,
    y: &MultichannelSpectrogram,
    f: usize,
) -> BinTape {
    let (m, frames, bins) = (y.channels(), y.frames(), y.bins());
    let (d, hn, q) = (est.input_dim(), est.hidden(), cfg.reference);
    let beam = cfg.ar_inputs.uses_bf();
    let selector = |w: &mut Vec<Complex64>| {
        w.fill(ZERO);
        w[q] = Complex64::new(1.0, 0.0);
    };
    let mut tape = BinTape {
        u: vec![0.0; frames * d],
        h: vec![0.0; frames * hn],
        z: Vec::with_capacity(frames),
        mask: Vec::with_capacity(frames),
        w_src: Vec::with_capacity(frames),
        sols: Vec::with_capacity(frames),
    };
    let mut phi_x = vec![ZERO; m * m];
    let mut phi_n = vec![ZERO; m * m];
    let mut w = vec![ZERO; m];
    selector(&mut w);
    let (mut valid, mut src) = (true, None);
    let mut prev = ZERO;
    let zero_h = vec![0.0; hn];
    let mut xv = vec![ZERO; m];
    let mut nv = vec![ZERO; m];
    for t in 0..frames {
        let yt = y.frame(t);
        let mut bf = ZERO;
        let mut used_src = None;
        if beam && t > 0 && valid {
            let ysel = match cfg.bf_option {
                BfOption::PrevFrame => y.frame(t - 1),
                BfOption::CurrFrame => yt,
            };
            bf = w
                .iter()
                .enumerate()
                .map(|(c, wc)| wc.conj() * ysel[c * bins + f])
                .sum();
            used_src = src;
        }
        tape.w_src.push(used_src);
        let bf_in = if beam { bf } else { ZERO };
        let prev_in = if cfg.ar_inputs.uses_nn() { prev } else { ZERO };
        let (before, rest) = tape.h.split_at_mut(t * hn);
        let h_prev = if t == 0 {
            &zero_h[..]
        } else {
            &before[(t - 1) * hn..]
        };
        let u = &mut tape.u[t * d..(t + 1) * d];
        encode_bin(yt, bins, m, q, f, bf_in, prev_in, u);
        let o = est.cell_forward(u, h_prev, &mut rest[..hn]);
        let z = Complex64::new(o[0], o[1]);
        let mk = clip_value(z, cfg.clip_mag);
        tape.z.push(z);
        tape.mask.push(mk);
        let mut sol_t = None;
        if beam {
            for c in 0..m {
                xv[c] = yt[c * bins + f] * mk;
                nv[c] = yt[c * bins + f] - xv[c];
            }
            accumulate_outer(&mut phi_x, &xv, cfg.forgetting);
            accumulate_outer(&mut phi_n, &nv, cfg.forgetting);
            let seen = t + 1;
            if seen % cfg.stride == 0 {
                if seen < m {
                    selector(&mut w);
                    valid = true;
                    src = None;
                } else {
                    match mvdr_bin(&phi_x, &phi_n, m, q, cfg.diag_load) {
                        Some(sol) => {
                            w.copy_from_slice(&sol.w);
                            valid = true;
                            src = Some(t);
                            sol_t = Some(sol);
                        }
                        None => {
                            w.fill(ZERO);
                            valid = false;
                            src = None;
                        }
                    }
                }
            }
        }
        tape.sols.push(sol_t);
        prev = yt[q * bins + f] * mk;
    }
    tape
}

fn backward_bin(
    est: &CompactEstimator,
    cfg: &ArConfig,
    y: &MultichannelSpectrogram,
    f: usize,
    tape: &BinTape,
    lgrad: &[Complex64],
    grad: &mut [f64],
) {
    let (m, frames, bins) = (y.channels(), y.frames(), y.bins());
    let (d, hn, q) = (est.input_dim(), est.hidden(), cfg.reference);
    let beam = cfg.ar_inputs.uses_bf();
    let nn = cfg.ar_inputs.uses_nn();
    let lambda = cfg.forgetting;
    let mut wbar = vec![ZERO; frames * m];
    let mut psi_x = vec![ZERO; m * m];
    let mut psi_n = vec![ZERO; m * m];
    let mut dh = vec![0.0; hn];
    let mut du = vec![0.0; d];
    let mut scratch = vec![0.0; hn];
    let zero_h = vec![0.0; hn];
    let mut carry = ZERO;
    let mut ycol = vec![ZERO; m];
    for t in (0..frames).rev() {
        let yt = y.frame(t);
        for c in 0..m {
            ycol[c] = yt[c * bins + f];
        }
        let mut zbar = (lgrad[t] + carry) * ycol[q].conj();
        if beam {
            if lambda != 1.0 {
                for v in psi_x.iter_mut().chain(psi_n.iter_mut()) {
                    *v *= lambda;
                }
            }
            if let Some(sol) = &tape.sols[t] {
                let wb = &wbar[t * m..(t + 1) * m];
                if wb.iter().any(|v| *v != ZERO) {
                    let (gx, gn) = mvdr_bin_backward(sol, wb, m, q, cfg.diag_load);
                    for i in 0..m * m {
                        psi_x[i] += gx[i];
                        psi_n[i] += gn[i];
                    }
                }
            }
            let quad = |psi: &[Complex64]| -> f64 {
                let mut s = ZERO;
                for i in 0..m {
                    for j in 0..m {
                        s += ycol[i].conj() * psi[i * m + j] * ycol[j];
                    }
                }
                s.re
            };
            let (da, db) = (quad(&psi_x), quad(&psi_n));
            let mk = tape.mask[t];
            zbar += mk * (2.0 * da) - (Complex64::new(1.0, 0.0) - mk) * (2.0 * db);
        }
        let zg = clip_backward(tape.z[t], zbar, cfg.clip_mag);
        let h = &tape.h[t * hn..(t + 1) * hn];
        let h_prev = if t == 0 {
            &zero_h[..]
        } else {
            &tape.h[(t - 1) * hn..t * hn]
        };
        let u = &tape.u[t * d..(t + 1) * d];
        est.cell_backward(
            u,
            h_prev,
            h,
            [zg.re, zg.im],
            &mut dh,
            grad,
            Some(&mut du),
            &mut scratch,
        );
        carry = ZERO;
        if t == 0 {
            continue;
        }
        let g = feature_gain(ycol[q]).conj();
        if nn {
            carry = g * Complex64::new(du[2 * m + 2], du[2 * m + 3]);
        }
        if let (true, Some(s)) = (beam, tape.w_src[t]) {
            let bf_bar = g * Complex64::new(du[2 * m], du[2 * m + 1]);
            let ysel = match cfg.bf_option {
                BfOption::PrevFrame => y.frame(t - 1),
                BfOption::CurrFrame => yt,
            };
            for c in 0..m {
                wbar[s * m + c] += bf_bar.conj() * ysel[c * bins + f];
            }
        }
    }
}
