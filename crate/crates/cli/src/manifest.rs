//! Line-oriented scene manifest: `key=value` fields separated by spaces.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub id: String,
    pub target_azimuth: f64,
    pub noise_azimuths: Vec<f64>,
    pub snr_db: f64,
    /// Zero for anechoic scenes.
    pub t60_s: f64,
    pub seed: u64,
}

impl SceneEntry {
    pub fn to_line(&self) -> String {
        let noise: Vec<String> = self.noise_azimuths.iter().map(|a| a.to_string()).collect();
        format!(
            "id={} target_az={} noise_az={} snr_db={} t60={} seed={}",
            self.id,
            self.target_azimuth,
            noise.join(","),
            self.snr_db,
            self.t60_s,
            self.seed
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut id = None;
        let mut target = None;
        let mut noise = None;
        let mut snr = None;
        let mut t60 = None;
        let mut seed = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| anyhow!("field {field:?} is not key=value"))?;
            let num = |v: &str| v.parse::<f64>().with_context(|| format!("{k}={v}"));
            match k {
                "id" => id = Some(v.to_string()),
                "target_az" => target = Some(num(v)?),
                "noise_az" => noise = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
                "snr_db" => snr = Some(num(v)?),
                "t60" => t60 = Some(num(v)?),
                "seed" => seed = Some(v.parse::<u64>().with_context(|| format!("seed={v}"))?),
                other => bail!("unknown manifest field {other:?}"),
            }
        }
        let need = |name: &str| anyhow!("manifest line lacks {name}: {line:?}");
        Ok(Self {
            id: id.ok_or_else(|| need("id"))?,
            target_azimuth: target.ok_or_else(|| need("target_az"))?,
            noise_azimuths: noise.ok_or_else(|| need("noise_az"))?,
            snr_db: snr.ok_or_else(|| need("snr_db"))?,
            t60_s: t60.unwrap_or(0.0),
            seed: seed.ok_or_else(|| need("seed"))?,
        })
    }
}

/// A manifest together with the directory its WAV files live in.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<SceneEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(n, l)| {
                SceneEntry::parse_line(l).with_context(|| format!("{}:{}", path.display(), n + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: path
                .parent()
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            entries,
        })
    }

    pub fn save(path: &Path, entries: &[SceneEntry]) -> Result<()> {
        let text: String = entries.iter().map(|e| e.to_line() + "\n").collect();
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn mixture_path(&self, e: &SceneEntry) -> PathBuf {
        self.dir.join(mixture_file(&e.id))
    }

    pub fn target_path(&self, e: &SceneEntry) -> PathBuf {
        self.dir.join(target_file(&e.id))
    }
}

pub fn mixture_file(id: &str) -> String {
    format!("{id}_mixture.wav")
}

pub fn target_file(id: &str) -> String {
    format!("{id}_target.wav")
}

pub fn noise_file(id: &str) -> String {
    format!("{id}_noise.wav")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip_exactly() {
        let e = SceneEntry {
            id: "scene-0007".into(),
            target_azimuth: 1.0 / 3.0,
            noise_azimuths: vec![0.1, 2.5],
            snr_db: -4.999999999,
            t60_s: 0.3,
            seed: u64::MAX,
        };
        assert_eq!(SceneEntry::parse_line(&e.to_line()).unwrap(), e);
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(SceneEntry::parse_line("id=a target_az=0 snr_db=1 seed=2").is_err());
        assert!(SceneEntry::parse_line("id=a target_az=0 noise_az=1 snr_db=x seed=2").is_err());
        assert!(SceneEntry::parse_line("id=a colour=red").is_err());
    }
}
