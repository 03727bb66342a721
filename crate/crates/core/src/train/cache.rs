//! Per-utterance store of the AR features produced by the previous epoch.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};
use crate::tfx::SingleChannelSpectrogram;

const MAGIC: &[u8; 4] = b"ARSC";
const VERSION: u32 = 1;

/// Cached outputs of one utterance, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub frames: usize,
    pub bins: usize,
    /// Reference-channel estimate, `[frame][bin]`.
    pub nn: Vec<Complex32>,
    /// Beamformer output, `[frame][bin]`.
    pub bf: Vec<Complex32>,
    /// Epoch whose final model produced the record; 0 for the initial model.
    pub epoch: u32,
}

fn narrow(spec: &SingleChannelSpectrogram) -> Vec<Complex32> {
    spec.as_slice()
        .iter()
        .map(|z| Complex32::new(z.re as f32, z.im as f32))
        .collect()
}

fn widen(frames: usize, bins: usize, data: &[Complex32]) -> SingleChannelSpectrogram {
    let wide = data
        .iter()
        .map(|z| Complex64::new(z.re as f64, z.im as f64))
        .collect();
    SingleChannelSpectrogram::from_vec(frames, bins, wide).expect("record shape is consistent")
}

impl CacheRecord {
    pub fn new(
        nn: &SingleChannelSpectrogram,
        bf: &SingleChannelSpectrogram,
        epoch: u32,
    ) -> Result<Self> {
        if nn.frames() != bf.frames() || nn.bins() != bf.bins() {
            return Err(Error::ShapeMismatch(format!(
                "estimate {}x{} vs beamformer {}x{}",
                nn.frames(),
                nn.bins(),
                bf.frames(),
                bf.bins()
            )));
        }
        Ok(Self {
            frames: nn.frames(),
            bins: nn.bins(),
            nn: narrow(nn),
            bf: narrow(bf),
            epoch,
        })
    }

    pub fn nn_spectrogram(&self) -> SingleChannelSpectrogram {
        widen(self.frames, self.bins, &self.nn)
    }

    pub fn bf_spectrogram(&self) -> SingleChannelSpectrogram {
        widen(self.frames, self.bins, &self.bf)
    }
}

/// Records keyed by utterance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RdsCache {
    records: BTreeMap<String, CacheRecord>,
}

impl RdsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CacheRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = (&String, &CacheRecord)> {
        self.records.iter()
    }

    /// Inserts or replaces a record. Stamps must not go backwards.
    pub fn insert(&mut self, id: &str, record: CacheRecord) -> Result<()> {
        if let Some(old) = self.records.get(id) {
            if record.epoch < old.epoch {
                return Err(Error::InvalidConfig(format!(
                    "cache stamp for {id} would go from {} back to {}",
                    old.epoch, record.epoch
                )));
            }
        }
        self.records.insert(id.to_string(), record);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (id, r) in &self.records {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(r.frames as u32).to_le_bytes())?;
            w.write_all(&(r.bins as u32).to_le_bytes())?;
            for z in r.nn.iter().chain(&r.bf) {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
            w.write_all(&r.epoch.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "cache",
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut u32_at = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = u32_at(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32_at(&mut r)?;
        let mut cache = Self::new();
        for _ in 0..count {
            let id_len = u32_at(&mut r)? as usize;
            if id_len > 1 << 16 {
                return Err(bad(format!("id length {id_len}")));
            }
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|e| bad(e.to_string()))?;
            let frames = u32_at(&mut r)? as usize;
            let bins = u32_at(&mut r)? as usize;
            let n = frames
                .checked_mul(bins)
                .filter(|n| *n <= 1 << 28)
                .ok_or_else(|| bad("record too large".into()))?;
            let read_array = |r: &mut R| -> Result<Vec<Complex32>> {
                let mut bytes = vec![0u8; n * 8];
                r.read_exact(&mut bytes)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                            f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                        )
                    })
                    .collect())
            };
            let nn = read_array(&mut r)?;
            let bf = read_array(&mut r)?;
            let epoch = u32_at(&mut r)?;
            if cache.records.contains_key(&id) {
                return Err(bad(format!("duplicate id {id}")));
            }
            cache.records.insert(
                id,
                CacheRecord {
                    frames,
                    bins,
                    nn,
                    bf,
                    epoch,
                },
            );
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(frames: usize, bins: usize, seed: u64) -> SingleChannelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * bins)
            .map(|_| Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        SingleChannelSpectrogram::from_vec(frames, bins, data).unwrap()
    }

    fn sample_cache() -> RdsCache {
        let mut cache = RdsCache::new();
        cache
            .insert(
                "utt-a",
                CacheRecord::new(&spec(4, 3, 1), &spec(4, 3, 2), 2).unwrap(),
            )
            .unwrap();
        cache
            .insert(
                "b",
                CacheRecord::new(&spec(7, 5, 3), &spec(7, 5, 4), 2).unwrap(),
            )
            .unwrap();
        cache
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let cache = sample_cache();
        let mut bytes = Vec::new();
        cache.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"ARSC");
        let back = RdsCache::read_from(&bytes[..]).unwrap();
        assert_eq!(back, cache);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mut bytes = Vec::new();
        sample_cache().write_to(&mut bytes).unwrap();
        assert!(RdsCache::read_from(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(RdsCache::read_from(&extra[..]).is_err());
        let mut magic = bytes.clone();
        magic[3] = b'X';
        assert!(RdsCache::read_from(&magic[..]).is_err());
    }

    #[test]
    fn stamps_are_monotone() {
        let mut cache = sample_cache();
        let rec = CacheRecord::new(&spec(4, 3, 5), &spec(4, 3, 6), 1).unwrap();
        assert!(cache.insert("utt-a", rec.clone()).is_err());
        let newer = CacheRecord { epoch: 3, ..rec };
        cache.insert("utt-a", newer).unwrap();
        assert_eq!(cache.get("utt-a").unwrap().epoch, 3);
    }

    #[test]
    fn widening_recovers_f32_values() {
        let nn = spec(3, 2, 7);
        let rec = CacheRecord::new(&nn, &nn, 0).unwrap();
        for (a, b) in rec.nn_spectrogram().as_slice().iter().zip(nn.as_slice()) {
            assert_eq!(a.re, b.re as f32 as f64);
            assert_eq!(a.im, b.im as f32 as f64);
        }
        assert!(CacheRecord::new(&nn, &spec(2, 2, 8), 0).is_err());
    }
}
