//! The online protocol: a seeded stream of samples with randomly missing
//! modalities, predicted one step at a time before any adaptation.
//!
//! All randomness comes from ChaCha8 keyed by the schedule seed. Stream id
//! [`SCHEDULE_STREAM`] draws modalities (one `f64` per position), stream id
//! [`ORDER_STREAM`] shuffles the dataset. Both are prefix-stable: a shorter
//! stream with the same seed is a prefix of a longer one.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{AdaptError, Adapter};
use crate::data::{rng_stream, Dataset};
use crate::losses::ClassProbabilities;
use crate::model::Modality;

pub const SCHEDULE_STREAM: u64 = 32;
pub const ORDER_STREAM: u64 = 33;
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("schedule length {length} exceeds dataset size {available}")]
    TooLong { length: usize, available: usize },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Modality probabilities `{p_A, p_V, p_AV}` plus seed and length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSchedule {
    pub p_a: f64,
    pub p_v: f64,
    pub p_av: f64,
    pub seed: u64,
    pub length: usize,
}

impl StreamSchedule {
    pub fn new(p_a: f64, p_v: f64, p_av: f64, seed: u64, length: usize) -> Result<Self, StreamError> {
        let s = Self {
            p_a,
            p_v,
            p_av,
            seed,
            length,
        };
        s.validate()?;
        Ok(s)
    }

    /// `mixed = false` drops video (`{r, 0, 1 - r}`); `mixed = true` splits
    /// the missing mass evenly between the two modalities.
    pub fn from_missing_rate(rate: f64, mixed: bool, seed: u64, length: usize) -> Result<Self, StreamError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(StreamError::Schedule(format!("missing rate {rate} outside [0, 1]")));
        }
        let (p_a, p_v) = if mixed { (0.5 * rate, 0.5 * rate) } else { (rate, 0.0) };
        Self::new(p_a, p_v, 1.0 - rate, seed, length)
    }

    pub fn complete(seed: u64, length: usize) -> Self {
        Self {
            p_a: 0.0,
            p_v: 0.0,
            p_av: 1.0,
            seed,
            length,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        for (name, p) in [("p_a", self.p_a), ("p_v", self.p_v), ("p_av", self.p_av)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(StreamError::Schedule(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let sum = self.p_a + self.p_v + self.p_av;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(StreamError::Schedule(format!("p_a + p_v + p_av = {sum}, expected 1")));
        }
        if self.length == 0 {
            return Err(StreamError::Schedule("length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn missing_rate(&self) -> f64 {
        1.0 - self.p_av
    }
}

/// Draws one modality per position: `u < p_A` is audio, `u < p_A + p_V` is
/// video, anything else is complete.
pub fn build_schedule(schedule: &StreamSchedule) -> Result<Vec<Modality>, StreamError> {
    schedule.validate()?;
    let mut rng = rng_stream(schedule.seed, SCHEDULE_STREAM);
    Ok((0..schedule.length)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < schedule.p_a {
                Modality::Audio
            } else if u < schedule.p_a + schedule.p_v {
                Modality::Video
            } else {
                Modality::AudioVisual
            }
        })
        .collect())
}

/// Lowest index among the maxima.
pub fn argmax_label(pred: &ClassProbabilities) -> usize {
    let p = pred.as_slice();
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub t: usize,
    /// Index into the dataset.
    pub sample: usize,
    pub modality: Modality,
}

/// Dataset order shuffled by the schedule seed, paired with the drawn modalities.
pub fn stream_events(schedule: &StreamSchedule, dataset_len: usize) -> Result<Vec<StreamEvent>, StreamError> {
    if schedule.length > dataset_len {
        return Err(StreamError::TooLong {
            length: schedule.length,
            available: dataset_len,
        });
    }
    let modalities = build_schedule(schedule)?;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut rng_stream(schedule.seed, ORDER_STREAM));
    Ok(modalities
        .into_iter()
        .zip(order)
        .enumerate()
        .map(|(t, (modality, sample))| StreamEvent { t, sample, modality })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Evaluate,
    Warmup,
}

/// One row of the per-step trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub modality: Modality,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
    pub l_ent: f64,
    pub l_div: f64,
    pub l_mi: f64,
    pub l_kl: f64,
    pub adapted: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineMetrics {
    /// Samples revealed, including warm-up samples that are never scored.
    pub revealed: usize,
    /// Steps that changed the parameters.
    pub adapted_steps: usize,
    pub overall: Tally,
    /// Indexed by [`Modality::index`].
    pub per_modality: [Tally; 3],
    pub records: Vec<StepRecord>,
}

impl OnlineMetrics {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }

    pub fn modality(&self, m: Modality) -> Tally {
        self.per_modality[m.index()]
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.predicted).collect()
    }

    /// Mean of each loss column over adapted steps.
    pub fn mean_losses(&self) -> [f64; 4] {
        let adapted: Vec<_> = self.records.iter().filter(|r| r.adapted).collect();
        if adapted.is_empty() {
            return [0.0; 4];
        }
        let n = adapted.len() as f64;
        let mut out = [0.0; 4];
        for r in adapted {
            for (o, v) in out.iter_mut().zip([r.l_ent, r.l_div, r.l_mi, r.l_kl]) {
                *o += v / n;
            }
        }
        out
    }
}

/// Runs the protocol over explicit events, in order.
///
/// Each batch is predicted with the current parameters before the adapter
/// may update them. Labels are read only to score the evaluate phase.
pub fn run_events(adapter: &mut Adapter, events: &[StreamEvent], dataset: &Dataset, phase: Phase) -> Result<OnlineMetrics, StreamError> {
    let batch = adapter.config().effective_batch_size();
    let mut metrics = OnlineMetrics::default();
    for chunk in events.chunks(batch) {
        let rows: Vec<_> = chunk.iter().map(|e| (&dataset.samples[e.sample], e.modality)).collect();
        let out = adapter.on_batch(&rows)?;
        metrics.revealed += chunk.len();
        metrics.adapted_steps += usize::from(out.adapted);
        if phase == Phase::Warmup {
            continue;
        }
        let losses = out.losses.unwrap_or_default();
        for (e, p) in chunk.iter().zip(&out.predictions) {
            let predicted = argmax_label(p);
            let label = dataset.samples[e.sample].label;
            let correct = predicted == label;
            for tally in [&mut metrics.overall, &mut metrics.per_modality[e.modality.index()]] {
                tally.total += 1;
                tally.correct += usize::from(correct);
            }
            metrics.records.push(StepRecord {
                t: e.t,
                modality: e.modality,
                predicted,
                label,
                correct,
                l_ent: losses.l_ent,
                l_div: losses.l_div,
                l_mi: losses.l_mi,
                l_kl: losses.l_kl,
                adapted: out.adapted,
            });
        }
    }
    Ok(metrics)
}

pub fn run_protocol(adapter: &mut Adapter, schedule: &StreamSchedule, dataset: &Dataset, phase: Phase) -> Result<OnlineMetrics, StreamError> {
    let events = stream_events(schedule, dataset.len())?;
    run_events(adapter, &events, dataset, phase)
}

pub fn write_trace_csv(records: &[StepRecord], mut out: impl Write) -> Result<(), StreamError> {
    writeln!(out, "t,modality,predicted,label,correct,l_ent,l_div,l_mi,l_kl,adapted")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.modality.tag(),
            r.predicted,
            r.label,
            u8::from(r.correct),
            r.l_ent,
            r.l_div,
            r.l_mi,
            r.l_kl,
            u8::from(r.adapted)
        )?;
    }
    Ok(())
}
