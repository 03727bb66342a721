//! Objective quality metrics on time-domain signals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;
/// Frames quieter than this, relative to the loudest reference frame, are skipped.
pub const VOICED_THRESHOLD_DB: f64 = -40.0;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}

/// Scale-invariant SDR in dB. A zero residual gives `+inf`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let ref_energy: f64 = reference.iter().map(|s| s * s).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, s)| e * s).sum();
    let alpha = dot / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (e, s) in estimate.iter().zip(reference) {
        let t = alpha * s;
        target += t * t;
        residual += (t - e) * (t - e);
    }
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / residual).log10())
}

/// Mean per-frame SNR over voiced reference frames, each clamped to
/// `[-10, 35]` dB. Only complete frames are scored.
pub fn seg_snr(estimate: &[f64], reference: &[f64], frame_len: usize, hop: usize) -> Result<f64> {
    check_lengths(estimate, reference)?;
    if frame_len == 0 || hop == 0 {
        return Err(Error::InvalidConfig(
            "frame length and hop must be positive".into(),
        ));
    }
    if reference.len() < frame_len {
        return Err(Error::NoVoicedFrames);
    }
    let starts: Vec<usize> = (0..=reference.len() - frame_len).step_by(hop).collect();
    let powers: Vec<(f64, f64)> = starts
        .iter()
        .map(|&s| {
            let (mut sig, mut err) = (0.0, 0.0);
            for i in s..s + frame_len {
                sig += reference[i] * reference[i];
                let d = reference[i] - estimate[i];
                err += d * d;
            }
            (sig, err)
        })
        .collect();
    let peak = powers.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::NoVoicedFrames);
    }
    let threshold = peak * 10f64.powf(VOICED_THRESHOLD_DB / 10.0);
    let voiced: Vec<f64> = powers
        .iter()
        .filter(|p| p.0 > threshold)
        .map(|&(sig, err)| {
            let snr = if err == 0.0 {
                SEG_SNR_CEIL_DB
            } else {
                10.0 * (sig / err).log10()
            };
            snr.clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)
        })
        .collect();
    Ok(voiced.iter().sum::<f64>() / voiced.len() as f64)
}

/// One scored utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub snr_db: f64,
    /// Zero for anechoic scenes.
    pub t60_s: f64,
    pub si_sdr_mix: f64,
    pub si_sdr_enh: f64,
    pub seg_snr_mix: f64,
    pub seg_snr_enh: f64,
}

impl MetricRow {
    pub fn si_sdr_improvement(&self) -> f64 {
        self.si_sdr_enh - self.si_sdr_mix
    }
}

/// Means of every metric column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMeans {
    pub count: usize,
    pub si_sdr_mix: f64,
    pub si_sdr_enh: f64,
    pub seg_snr_mix: f64,
    pub seg_snr_enh: f64,
}

fn means<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> MetricMeans {
    let mut out = MetricMeans {
        count: 0,
        si_sdr_mix: 0.0,
        si_sdr_enh: 0.0,
        seg_snr_mix: 0.0,
        seg_snr_enh: 0.0,
    };
    for r in rows {
        out.count += 1;
        out.si_sdr_mix += r.si_sdr_mix;
        out.si_sdr_enh += r.si_sdr_enh;
        out.seg_snr_mix += r.seg_snr_mix;
        out.seg_snr_enh += r.seg_snr_enh;
    }
    let n = out.count.max(1) as f64;
    out.si_sdr_mix /= n;
    out.si_sdr_enh /= n;
    out.seg_snr_mix /= n;
    out.seg_snr_enh /= n;
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "id,snr_db,t60_s,si_sdr_mix,si_sdr_enh,seg_snr_mix,seg_snr_enh";

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn mean(&self) -> MetricMeans {
        means(self.rows.iter())
    }

    /// Means per `(snr_db, t60_s)` pair, keyed by the values printed to 3 decimals.
    pub fn grouped(&self) -> BTreeMap<(String, String), MetricMeans> {
        let mut groups: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((format!("{:.3}", r.snr_db), format!("{:.3}", r.t60_s)))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, means(v.into_iter())))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.id,
                fmt_num(r.snr_db),
                fmt_num(r.t60_s),
                fmt_num(r.si_sdr_mix),
                fmt_num(r.si_sdr_enh),
                fmt_num(r.seg_snr_mix),
                fmt_num(r.seg_snr_enh)
            );
        }
        out
    }

    pub fn grouped_csv(&self) -> String {
        let mut out =
            String::from("snr_db,t60_s,count,si_sdr_mix,si_sdr_enh,seg_snr_mix,seg_snr_enh\n");
        for ((snr, t60), m) in self.grouped() {
            let _ = writeln!(
                out,
                "{snr},{t60},{},{},{},{},{}",
                m.count,
                fmt_num(m.si_sdr_mix),
                fmt_num(m.si_sdr_enh),
                fmt_num(m.seg_snr_mix),
                fmt_num(m.seg_snr_enh)
            );
        }
        out
    }

    /// Human-readable per-utterance lines followed by the overall mean.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}: snr {:.2} dB, si-sdr {} -> {} dB, seg-snr {} -> {} dB",
                r.id,
                r.snr_db,
                fmt_num(r.si_sdr_mix),
                fmt_num(r.si_sdr_enh),
                fmt_num(r.seg_snr_mix),
                fmt_num(r.seg_snr_enh)
            );
        }
        let m = self.mean();
        let _ = writeln!(
            out,
            "mean over {}: si-sdr {} -> {} dB, seg-snr {} -> {} dB",
            m.count,
            fmt_num(m.si_sdr_mix),
            fmt_num(m.si_sdr_enh),
            fmt_num(m.seg_snr_mix),
            fmt_num(m.seg_snr_enh)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_are_infinite() {
        let s = noise(500, 1);
        assert_eq!(si_sdr(&s, &s).unwrap(), f64::INFINITY);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &s).unwrap(), f64::INFINITY);
    }

    #[test]
    fn orthogonal_noise_at_ten_to_one_gives_ten_db() {
        let s = noise(1000, 2);
        let mut n = noise(1000, 3);
        let es: f64 = s.iter().map(|v| v * v).sum();
        let proj: f64 = n.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / es;
        for (v, x) in n.iter_mut().zip(&s) {
            *v -= proj * x;
        }
        let en: f64 = n.iter().map(|v| v * v).sum();
        let g = (es / (10.0 * en)).sqrt();
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
        assert!((si_sdr(&est, &s).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn si_sdr_errors() {
        assert!(matches!(si_sdr(&[1.0], &[0.0]), Err(Error::ZeroReference)));
        assert!(si_sdr(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn seg_snr_clamps() {
        let s = noise(800, 4);
        assert_eq!(seg_snr(&s, &s, 100, 50).unwrap(), SEG_SNR_CEIL_DB);
        assert_eq!(seg_snr(&vec![0.0; 800], &s, 100, 50).unwrap(), 0.0);
        let flipped: Vec<f64> = s.iter().map(|v| -3.0 * v).collect();
        assert_eq!(seg_snr(&flipped, &s, 100, 50).unwrap(), SEG_SNR_FLOOR_DB);
        assert!(matches!(
            seg_snr(&s, &vec![0.0; 800], 100, 50),
            Err(Error::NoVoicedFrames)
        ));
    }

    #[test]
    fn seg_snr_matches_direct_recomputation() {
        let mut s = noise(1200, 5);
        for v in &mut s[300..500] {
            *v *= 1e-4;
        }
        let e: Vec<f64> = s
            .iter()
            .zip(noise(1200, 6))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let (len, hop) = (160, 80);
        let mut frames = Vec::new();
        let mut start = 0;
        while start + len <= s.len() {
            frames.push(&s[start..start + len]);
            start += hop;
        }
        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let peak = frames.iter().map(|f| energy(f)).fold(0.0, f64::max);
        let mut total = 0.0;
        let mut count = 0;
        for (k, f) in frames.iter().enumerate() {
            if 10.0 * (energy(f) / peak).log10() > -40.0 {
                let err: f64 = (0..len)
                    .map(|i| (s[k * hop + i] - e[k * hop + i]).powi(2))
                    .sum();
                total += (10.0 * (energy(f) / err).log10()).clamp(-10.0, 35.0);
                count += 1;
            }
        }
        assert!(count < frames.len());
        assert!((seg_snr(&e, &s, len, hop).unwrap() - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn moving_silence_between_edges_leaves_seg_snr_unchanged() {
        let core = noise(640, 7);
        let est_core: Vec<f64> = core
            .iter()
            .zip(noise(640, 8))
            .map(|(a, b)| a + 0.2 * b)
            .collect();
        let build = |lead: usize, trail: usize, x: &[f64]| {
            let mut v = vec![0.0; lead];
            v.extend_from_slice(x);
            v.extend(std::iter::repeat_n(0.0, trail));
            v
        };
        let a = seg_snr(
            &build(320, 160, &est_core),
            &build(320, 160, &core),
            160,
            80,
        )
        .unwrap();
        let b = seg_snr(
            &build(160, 320, &est_core),
            &build(160, 320, &core),
            160,
            80,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn report_groups_and_serializes() {
        let row = |id: &str, snr: f64, enh: f64| MetricRow {
            id: id.into(),
            snr_db: snr,
            t60_s: 0.0,
            si_sdr_mix: snr,
            si_sdr_enh: enh,
            seg_snr_mix: 1.0,
            seg_snr_enh: 2.0,
        };
        let report = MetricReport {
            rows: vec![row("a", 0.0, 4.0), row("b", 5.0, 9.0), row("c", 0.0, 6.0)],
        };
        let g = report.grouped();
        assert_eq!(g.len(), 2);
        let zero = g[&("0.000".to_string(), "0.000".to_string())];
        assert_eq!(zero.count, 2);
        assert!((zero.si_sdr_enh - 5.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
        let inf = MetricReport {
            rows: vec![row("d", 0.0, f64::INFINITY)],
        };
        assert!(inf.to_csv().contains(",inf,"));
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..500, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let s = noise(256, seed);
            let e: Vec<f64> = s.iter().zip(noise(256, seed + 1000)).map(|(a, b)| a + 0.5 * b).collect();
            let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
            let base = si_sdr(&e, &s).unwrap();
            let other = si_sdr(&scaled, &s).unwrap();
            // Negative scaling flips the projection sign but keeps the ratio.
            prop_assert!((base - other).abs() < 1e-9);
        }
    }
}
