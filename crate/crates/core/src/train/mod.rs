//! Training regimes for the compact estimator.
//!
//! * PARIS: a no-gradient pass with the AR inputs zeroed produces the
//!   features of a second, supervised pass.
//! * RDS: AR features come from a per-utterance cache produced by the model
//!   of the previous epoch and refreshed after every epoch.
//! * BPTT: exact gradients through the unrolled loop, beamformer included.

pub mod adam;
pub mod bptt;
pub mod cache;
pub mod toy;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{process_utterance, run_utterance, ArConfig, ArInputs, EngineTrace};
use crate::error::{Error, Result};
use crate::estimator::CompactEstimator;
use crate::mask::{clip_backward, clip_value};
use crate::tfx::{MultichannelSpectrogram, SingleChannelSpectrogram};

pub use adam::Adam;
pub use bptt::{bptt_gradient, MAX_BPTT_FRAMES};
pub use cache::{CacheRecord, RdsCache};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Paris,
    Rds,
    Bptt,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paris" => Ok(Self::Paris),
            "rds" => Ok(Self::Rds),
            "bptt" => Ok(Self::Bptt),
            other => Err(Error::InvalidConfig(format!(
                "unknown training method {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paris => "paris",
            Self::Rds => "rds",
            Self::Bptt => "bptt",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    /// Step budget for step-based methods; 0 means `epochs` full passes.
    pub steps: usize,
    pub learning_rate: f64,
    /// Utterances per step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Paris,
            epochs: 10,
            steps: 0,
            learning_rate: 0.001,
            batch: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.epochs == 0 && self.steps == 0 {
            return Err(Error::InvalidConfig(
                "need a positive number of epochs or steps".into(),
            ));
        }
        if self.method == Method::Rds && self.epochs == 0 {
            return Err(Error::InvalidConfig("rds trains by epochs".into()));
        }
        Ok(())
    }
}

/// A training example: the multichannel mixture and the clean reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mixture: MultichannelSpectrogram,
    pub target: SingleChannelSpectrogram,
}

impl Utterance {
    /// Splits into consecutive pieces of at most `max_frames` frames.
    pub fn segments(&self, max_frames: usize) -> Vec<Utterance> {
        let frames = self.mixture.frames();
        if frames <= max_frames {
            return vec![self.clone()];
        }
        let (m, bins) = (self.mixture.channels(), self.mixture.bins());
        (0..frames)
            .step_by(max_frames)
            .enumerate()
            .map(|(k, start)| {
                let end = (start + max_frames).min(frames);
                let mix: Vec<Complex64> = (start..end)
                    .flat_map(|t| self.mixture.frame(t).iter().copied())
                    .collect();
                let tgt: Vec<Complex64> = (start..end)
                    .flat_map(|t| self.target.frame(t).iter().copied())
                    .collect();
                Utterance {
                    id: format!("{}#{k}", self.id),
                    mixture: MultichannelSpectrogram::from_vec(m, end - start, bins, mix)
                        .expect("slice shape"),
                    target: SingleChannelSpectrogram::from_vec(end - start, bins, tgt)
                        .expect("slice shape"),
                }
            })
            .collect()
    }
}

/// `|Re d| + |Im d|` and its subgradient (zero at exact zeros).
pub fn l1_element(delta: Complex64) -> (f64, Complex64) {
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    (
        delta.re.abs() + delta.im.abs(),
        Complex64::new(sign(delta.re), sign(delta.im)),
    )
}

/// Mean of `|Re(est - target)| + |Im(est - target)|` over all bins, with its
/// gradient with respect to `est` (`d/dRe + i d/dIm`).
pub fn loss_l1(
    est: &SingleChannelSpectrogram,
    target: &SingleChannelSpectrogram,
) -> Result<(f64, Vec<Complex64>)> {
    if est.frames() != target.frames() || est.bins() != target.bins() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {}x{} vs target {}x{}",
            est.frames(),
            est.bins(),
            target.frames(),
            target.bins()
        )));
    }
    let n = est.as_slice().len();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty spectrogram".into()));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = est
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(e, t)| {
            let (l, g) = l1_element(e - t);
            loss += l * scale;
            g * scale
        })
        .collect();
    Ok((loss, grad))
}

/// Loss and parameter gradient of one supervised pass whose AR features are
/// constants. `bf` is used per frame, `nn` is shifted by one frame; each is
/// dropped if `cfg.ar_inputs` gates it off.
pub fn supervised_gradient(
    est: &CompactEstimator,
    cfg: &ArConfig,
    y: &MultichannelSpectrogram,
    bf: Option<&SingleChannelSpectrogram>,
    nn: Option<&SingleChannelSpectrogram>,
    target: &SingleChannelSpectrogram,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate(y.channels())?;
    let bf = bf.filter(|_| cfg.ar_inputs.uses_bf());
    let nn = nn.filter(|_| cfg.ar_inputs.uses_nn());
    let features = est.encode_sequence(y, bf, nn, cfg.reference)?;
    let record = est.forward_sequence(&features)?;
    let (frames, bins) = (y.frames(), y.bins());
    let q = cfg.reference;
    let mut estimate = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        for f in 0..bins {
            estimate.push(y.get(q, t, f) * clip_value(record.outputs[t * bins + f], cfg.clip_mag));
        }
    }
    let estimate = SingleChannelSpectrogram::from_vec(frames, bins, estimate)?;
    let (loss, lgrad) = loss_l1(&estimate, target)?;
    let mut out_grad = vec![ZERO; frames * bins];
    for t in 0..frames {
        for f in 0..bins {
            let i = t * bins + f;
            out_grad[i] = clip_backward(
                record.outputs[i],
                lgrad[i] * y.get(q, t, f).conj(),
                cfg.clip_mag,
            );
        }
    }
    let grads = est.backward(&record, &out_grad, false)?;
    Ok((loss, grads.params))
}

/// First PARIS iteration: the engine with AR inputs zeroed, beamformer traced.
pub fn paris_first_pass(
    est: &CompactEstimator,
    cfg: &ArConfig,
    y: &MultichannelSpectrogram,
) -> Result<EngineTrace> {
    let first = ArConfig {
        ar_inputs: ArInputs::None,
        ..*cfg
    };
    run_utterance(&first, est, y, true)
}

/// Both PARIS iterations for one utterance; only the second is differentiated.
pub fn paris_gradient(
    est: &CompactEstimator,
    cfg: &ArConfig,
    utt: &Utterance,
) -> Result<(f64, Vec<f64>)> {
    let first = paris_first_pass(est, cfg, &utt.mixture)?;
    supervised_gradient(
        est,
        cfg,
        &utt.mixture,
        Some(&first.bf),
        Some(&first.estimate),
        &utt.target,
    )
}

/// Averages per-utterance gradients in batch order and takes one Adam step.
fn batch_step<F>(
    est: &mut CompactEstimator,
    adam: &mut Adam,
    batch: &[&Utterance],
    grad_fn: F,
) -> Result<f64>
where
    F: Fn(&CompactEstimator, &Utterance) -> Result<(f64, Vec<f64>)> + Sync,
{
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let model = &*est;
    let results: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|u| grad_fn(model, u))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut grad = vec![0.0; est.params().len()];
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    adam.step(est.params_mut(), &grad);
    Ok(loss / n)
}

pub fn train_step_paris(
    est: &mut CompactEstimator,
    adam: &mut Adam,
    cfg: &ArConfig,
    batch: &[&Utterance],
) -> Result<f64> {
    batch_step(est, adam, batch, |m, u| paris_gradient(m, cfg, u))
}

pub fn train_step_bptt(
    est: &mut CompactEstimator,
    adam: &mut Adam,
    cfg: &ArConfig,
    batch: &[&Utterance],
) -> Result<f64> {
    batch_step(est, adam, batch, |m, u| {
        let out = bptt_gradient(m, cfg, &u.mixture, &u.target)?;
        Ok((out.loss, out.grad))
    })
}

/// Refills the cache with a no-gradient AR pass of the current model over
/// every utterance, stamped `epoch`.
pub fn rebuild_cache(
    est: &CompactEstimator,
    cfg: &ArConfig,
    data: &[Utterance],
    cache: &mut RdsCache,
    epoch: u32,
) -> Result<()> {
    let records: Vec<CacheRecord> = data
        .par_iter()
        .map(|u| {
            let trace = run_utterance(cfg, est, &u.mixture, true)?;
            CacheRecord::new(&trace.estimate, &trace.bf, epoch)
        })
        .collect::<Result<Vec<_>>>()?;
    for (u, r) in data.iter().zip(records) {
        cache.insert(&u.id, r)?;
    }
    Ok(())
}

/// True when every utterance has a record of the right shape stamped `epoch`.
pub fn cache_is_current(cache: &RdsCache, data: &[Utterance], epoch: u32) -> bool {
    data.iter().all(|u| {
        cache.get(&u.id).is_some_and(|r| {
            r.frames == u.mixture.frames() && r.bins == u.mixture.bins() && r.epoch == epoch
        })
    })
}

/// Deterministic visiting order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Mean loss and gradient-step count of one RDS epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub steps: usize,
}

/// One RDS epoch (`epoch` counts from 1). Features come from the cache,
/// which must hold the output of the previous epoch's model; on the first
/// epoch an empty cache means zero features. A stale or mismatched cache is
/// discarded and rebuilt from the current model. After training, the cache
/// is regenerated and stamped `epoch`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_rds(
    est: &mut CompactEstimator,
    adam: &mut Adam,
    cfg: &ArConfig,
    data: &[Utterance],
    cache: &mut RdsCache,
    epoch: u32,
    batch: usize,
    seed: u64,
) -> Result<EpochSummary> {
    if epoch == 0 {
        return Err(Error::InvalidConfig("epochs count from 1".into()));
    }
    let cold = epoch == 1 && cache.is_empty();
    if !cold && !cache_is_current(cache, data, epoch - 1) {
        cache.clear();
        rebuild_cache(est, cfg, data, cache, epoch - 1)?;
    }
    let order = epoch_order(data.len(), seed, epoch as usize);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch.max(1)) {
        let items: Vec<&Utterance> = chunk.iter().map(|&i| &data[i]).collect();
        let snapshot = &*cache;
        let loss = batch_step(est, adam, &items, |m, u| {
            if cold {
                return supervised_gradient(m, cfg, &u.mixture, None, None, &u.target);
            }
            let r = snapshot.get(&u.id).expect("cache validated above");
            debug_assert_eq!(r.epoch + 1, epoch);
            let (bf, nn) = (r.bf_spectrogram(), r.nn_spectrogram());
            supervised_gradient(m, cfg, &u.mixture, Some(&bf), Some(&nn), &u.target)
        })?;
        total += loss;
        steps += 1;
    }
    rebuild_cache(est, cfg, data, cache, epoch)?;
    Ok(EpochSummary {
        mean_loss: total / steps.max(1) as f64,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// Gradient steps taken so far.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

impl std::fmt::Display for LogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} step {} loss {:.9}",
            self.epoch, self.step, self.loss
        )
    }
}

/// Trains `est` in place. PARIS and BPTT log every step, RDS every epoch.
pub fn train(
    est: &mut CompactEstimator,
    cfg: &ArConfig,
    tcfg: &TrainConfig,
    data: &[Utterance],
    cache: &mut RdsCache,
    mut log: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut adam = Adam::new(est.params().len(), tcfg.learning_rate);
    let mut entries = Vec::new();
    let mut emit = |e: LogEntry, entries: &mut Vec<LogEntry>| {
        log(&e);
        entries.push(e);
    };
    match tcfg.method {
        Method::Rds => {
            let mut step = 0;
            for epoch in 1..=tcfg.epochs {
                let s = train_epoch_rds(
                    est,
                    &mut adam,
                    cfg,
                    data,
                    cache,
                    epoch as u32,
                    tcfg.batch,
                    tcfg.seed,
                )?;
                step += s.steps;
                emit(
                    LogEntry {
                        step,
                        epoch,
                        loss: s.mean_loss,
                    },
                    &mut entries,
                );
            }
        }
        Method::Paris | Method::Bptt => {
            let mut step = 0;
            let mut epoch = 0;
            'outer: loop {
                epoch += 1;
                if tcfg.steps == 0 && epoch > tcfg.epochs {
                    break;
                }
                for chunk in epoch_order(data.len(), tcfg.seed, epoch).chunks(tcfg.batch) {
                    if tcfg.steps > 0 && step >= tcfg.steps {
                        break 'outer;
                    }
                    let items: Vec<&Utterance> = chunk.iter().map(|&i| &data[i]).collect();
                    let loss = if tcfg.method == Method::Paris {
                        train_step_paris(est, &mut adam, cfg, &items)?
                    } else {
                        train_step_bptt(est, &mut adam, cfg, &items)?
                    };
                    step += 1;
                    emit(LogEntry { step, epoch, loss }, &mut entries);
                }
            }
        }
    }
    Ok(entries)
}

/// Mean L1 loss of full online inference over a data set.
pub fn inference_loss(est: &CompactEstimator, cfg: &ArConfig, data: &[Utterance]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|u| Ok(loss_l1(&process_utterance(cfg, est, &u.mixture)?, &u.target)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
