//! Multichannel WAV reading and writing.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleFormat {
    Pcm16,
    #[default]
    Float32,
}

impl std::str::FromStr for SampleFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(Self::Pcm16),
            "float32" => Ok(Self::Float32),
            other => bail!("unknown wav format {other:?} (expected pcm16 or float32)"),
        }
    }
}

impl std::fmt::Display for SampleFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pcm16 => "pcm16",
            Self::Float32 => "float32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavData {
    pub sample_rate: u32,
    pub format: SampleFormat,
    /// `[channel][sample]`
    pub channels: Vec<Vec<f64>>,
}

impl WavData {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

const PCM16_SCALE: f64 = 32768.0;

pub fn read_wav(path: impl AsRef<Path>) -> Result<WavData> {
    let path = path.as_ref();
    let mut reader =
        WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        bail!("{}: no channels", path.display());
    }
    let declared = reader.len() as usize;
    let (format, interleaved): (SampleFormat, Vec<f64>) =
        match (spec.sample_format, spec.bits_per_sample) {
            (HoundFormat::Float, 32) => (
                SampleFormat::Float32,
                reader
                    .samples::<f32>()
                    .map(|s| s.map(f64::from))
                    .collect::<Result<_, _>>()?,
            ),
            (HoundFormat::Int, 16) => (
                SampleFormat::Pcm16,
                reader
                    .samples::<i16>()
                    .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
                    .collect::<Result<_, _>>()?,
            ),
            (fmt, bits) => bail!(
                "{}: unsupported sample format {fmt:?}/{bits}",
                path.display()
            ),
        };
    if interleaved.len() != declared || !declared.is_multiple_of(n_ch) {
        bail!(
            "{}: declared {declared} samples, read {} for {n_ch} channels",
            path.display(),
            interleaved.len()
        );
    }
    let frames = declared / n_ch;
    let channels = (0..n_ch)
        .map(|c| (0..frames).map(|i| interleaved[i * n_ch + c]).collect())
        .collect();
    Ok(WavData {
        sample_rate: spec.sample_rate,
        format,
        channels,
    })
}

pub fn write_wav(
    path: impl AsRef<Path>,
    sample_rate: u32,
    channels: &[Vec<f64>],
    format: SampleFormat,
) -> Result<()> {
    let path = path.as_ref();
    let Some(first) = channels.first() else {
        bail!("{}: nothing to write", path.display());
    };
    if channels.iter().any(|c| c.len() != first.len()) {
        bail!("{}: channels differ in length", path.display());
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => HoundFormat::Int,
            SampleFormat::Float32 => HoundFormat::Float,
        },
    };
    let mut writer =
        WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    for i in 0..first.len() {
        for c in channels {
            match format {
                SampleFormat::Float32 => writer.write_sample(c[i] as f32)?,
                SampleFormat::Pcm16 => {
                    let v = (c[i] * PCM16_SCALE)
                        .round()
                        .clamp(i16::MIN as f64, i16::MAX as f64);
                    writer.write_sample(v as i16)?
                }
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
