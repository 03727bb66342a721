//! Complex ratio masks.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram};

pub const DEFAULT_CLIP_MAG: f64 = 5.0;

/// Mixture bins below this magnitude get a zero oracle mask.
pub const MIXTURE_FLOOR: f64 = 1e-12;

/// Limits `z` to magnitude `clip`, keeping its phase. Idempotent.
pub fn clip_value(z: Complex64, clip: f64) -> Complex64 {
    let mag = z.norm();
    if mag <= clip {
        return z;
    }
    let mut out = z * (clip / mag);
    while out.norm() > clip {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

/// Pulls a gradient (`d/dRe + i d/dIm`) on `clip_value(z, clip)` back to `z`.
pub fn clip_backward(z: Complex64, grad: Complex64, clip: f64) -> Complex64 {
    let mag = z.norm();
    if mag <= clip {
        return grad;
    }
    let n = z / mag;
    let radial = n.re * grad.re + n.im * grad.im;
    (grad - n * radial) * (clip / mag)
}

/// Complex mask over `[frame][bin]` with bounded magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    frames: usize,
    bins: usize,
    values: Vec<Complex64>,
    clip_mag: f64,
}

impl ComplexMask {
    /// Clips every raw value to `clip_mag`.
    pub fn from_raw(
        frames: usize,
        bins: usize,
        raw: Vec<Complex64>,
        clip_mag: f64,
    ) -> Result<Self> {
        if raw.len() != frames * bins {
            return Err(Error::LengthMismatch {
                expected: frames * bins,
                actual: raw.len(),
            });
        }
        if !(clip_mag > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip magnitude must be positive, got {clip_mag}"
            )));
        }
        let values = raw.into_iter().map(|z| clip_value(z, clip_mag)).collect();
        Ok(Self {
            frames,
            bins,
            values,
            clip_mag,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn clip_mag(&self) -> f64 {
        self.clip_mag
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
}

/// `X / Y` per bin, clipped to `clip_mag`; zero where `|Y|` is negligible.
/// Pass `f64::INFINITY` to disable clipping.
pub fn oracle_crm(
    x_ref: &SingleChannelSpectrogram,
    y_ref: &SingleChannelSpectrogram,
    clip_mag: f64,
) -> Result<ComplexMask> {
    if x_ref.frames() != y_ref.frames() || x_ref.bins() != y_ref.bins() {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs mixture {}x{}",
            x_ref.frames(),
            x_ref.bins(),
            y_ref.frames(),
            y_ref.bins()
        )));
    }
    let raw = x_ref
        .as_slice()
        .iter()
        .zip(y_ref.as_slice())
        .map(|(x, y)| {
            if y.norm() < MIXTURE_FLOOR {
                Complex64::new(0.0, 0.0)
            } else {
                x / y
            }
        })
        .collect();
    ComplexMask::from_raw(x_ref.frames(), x_ref.bins(), raw, clip_mag)
}

/// Applies the reference mask to channel `m` of the mixture.
pub fn apply_mask(
    mask: &ComplexMask,
    y: &MultichannelSpectrogram,
    m: usize,
) -> Result<SingleChannelSpectrogram> {
    if mask.frames != y.frames() || mask.bins != y.bins() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs mixture {}x{}",
            mask.frames,
            mask.bins,
            y.frames(),
            y.bins()
        )));
    }
    if m >= y.channels() {
        return Err(Error::ShapeMismatch(format!(
            "channel {m} out of range for {} channels",
            y.channels()
        )));
    }
    let mut data = Vec::with_capacity(mask.values.len());
    for t in 0..mask.frames {
        data.extend(
            y.channel_frame(m, t)
                .iter()
                .zip(mask.frame(t))
                .map(|(a, b)| a * b),
        );
    }
    SingleChannelSpectrogram::from_vec(mask.frames, mask.bins, data)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> SingleChannelSpectrogram {
        let data = (0..frames * bins)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        SingleChannelSpectrogram::from_vec(frames, bins, data).unwrap()
    }

    fn constant_mask(frames: usize, bins: usize, v: f64) -> ComplexMask {
        ComplexMask::from_raw(
            frames,
            bins,
            vec![Complex64::new(v, 0.0); frames * bins],
            DEFAULT_CLIP_MAG,
        )
        .unwrap()
    }

    #[test]
    fn identical_target_gives_unit_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_spec(6, 5, &mut rng);
        let mask = oracle_crm(&y, &y, DEFAULT_CLIP_MAG).unwrap();
        assert!(mask.values().iter().all(|z| (z - 1.0).norm() < 1e-15));
    }

    #[test]
    fn silent_target_gives_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_spec(6, 5, &mut rng);
        let x = SingleChannelSpectrogram::zeros(6, 5);
        let mask = oracle_crm(&x, &y, DEFAULT_CLIP_MAG).unwrap();
        assert!(mask.values().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn near_zero_mixture_gives_zero_mask() {
        let x =
            SingleChannelSpectrogram::from_vec(1, 2, vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        let y = SingleChannelSpectrogram::from_vec(
            1,
            2,
            vec![Complex64::new(1e-13, 0.0), Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        let mask = oracle_crm(&x, &y, f64::INFINITY).unwrap();
        assert_eq!(mask.values()[0], Complex64::new(0.0, 0.0));
        assert_eq!(mask.values()[1], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = SingleChannelSpectrogram::zeros(2, 3);
        let b = SingleChannelSpectrogram::zeros(3, 3);
        assert!(oracle_crm(&a, &b, 5.0).is_err());
        let y = MultichannelSpectrogram::zeros(2, 3, 3);
        assert!(apply_mask(&constant_mask(2, 3, 1.0), &y, 0).is_err());
        assert!(apply_mask(&constant_mask(3, 3, 1.0), &y, 2).is_err());
    }

    #[test]
    fn unclipped_round_trip_recovers_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_spec(20, 9, &mut rng);
        let y = random_spec(20, 9, &mut rng);
        let mask = oracle_crm(&x, &y, f64::INFINITY).unwrap();
        let y_multi = MultichannelSpectrogram::from_channels(std::slice::from_ref(&y)).unwrap();
        let back = apply_mask(&mask, &y_multi, 0).unwrap();
        for ((b, xv), yv) in back.as_slice().iter().zip(x.as_slice()).zip(y.as_slice()) {
            if yv.norm() > 1e-6 {
                assert!((b - xv).norm() <= 1e-10 * xv.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn unit_and_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chans = [random_spec(4, 3, &mut rng), random_spec(4, 3, &mut rng)];
        let y = MultichannelSpectrogram::from_channels(&chans).unwrap();
        assert_eq!(
            apply_mask(&constant_mask(4, 3, 1.0), &y, 1).unwrap(),
            chans[1]
        );
        let zero = apply_mask(&constant_mask(4, 3, 0.0), &y, 1).unwrap();
        assert!(zero.as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn product_matches_per_bin_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chans = [
            random_spec(5, 4, &mut rng),
            random_spec(5, 4, &mut rng),
            random_spec(5, 4, &mut rng),
        ];
        let y = MultichannelSpectrogram::from_channels(&chans).unwrap();
        let raw: Vec<Complex64> = (0..20)
            .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let mask = ComplexMask::from_raw(5, 4, raw, DEFAULT_CLIP_MAG).unwrap();
        for m in 0..3 {
            let out = apply_mask(&mask, &y, m).unwrap();
            for t in 0..5 {
                for f in 0..4 {
                    let (a, b) = (chans[m].get(t, f), mask.frame(t)[f]);
                    let expected =
                        Complex64::new(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re);
                    assert!((out.get(t, f) - expected).norm() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn clip_backward_matches_finite_differences() {
        let g = Complex64::new(0.3, -1.1);
        let phi = |z: Complex64| {
            let c = clip_value(z, 2.0);
            g.re * c.re + g.im * c.im
        };
        for z in [
            Complex64::new(0.5, 0.7),
            Complex64::new(3.0, -4.0),
            Complex64::new(-0.1, 2.5),
        ] {
            let an = clip_backward(z, g, 2.0);
            let h = 1e-6;
            let dre = (phi(z + h) - phi(z - h)) / (2.0 * h);
            let dim =
                (phi(z + Complex64::new(0.0, h)) - phi(z - Complex64::new(0.0, h))) / (2.0 * h);
            assert!(
                (an.re - dre).abs() < 1e-7 && (an.im - dim).abs() < 1e-7,
                "{z}"
            );
        }
    }

    proptest! {
        #[test]
        fn clipping_bounds_magnitude(re in -1e6f64..1e6, im in -1e6f64..1e6, clip in 0.1f64..10.0) {
            let z = clip_value(Complex64::new(re, im), clip);
            prop_assert!(z.norm() <= clip);
            prop_assert_eq!(clip_value(z, clip), z);
        }
    }
}
