//! Discrete-event transport model.
//!
//! Links sample a delay per message from a configured distribution, optionally
//! drop messages, and count payload plus a constant per-message header overhead.
//! Events are ordered by (time, insertion sequence), so a run is a pure function
//! of its configuration and seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::codec::Timestamp;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid link {name}: {reason}")]
    InvalidLink { name: String, reason: String },
    #[error("unknown link {0:?}")]
    UnknownLink(String),
    #[error("link configuration: {0}")]
    Config(String),
    #[error("no latency records")]
    NoRecords,
}

/// Simulation time in nanoseconds since the run epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(s: f64) -> Self {
        SimTime((s.max(0.0) * 1e9).round() as u64)
    }

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e9
    }

    /// Simulation time at which a frame stamped `ts` was measured, given the
    /// timestamp corresponding to time zero.
    pub fn of_timestamp(ts: Timestamp, epoch: Timestamp) -> Self {
        SimTime::from_micros(ts.as_micros().saturating_sub(epoch.as_micros()))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs())
    }
}

/// Per-message delay distribution, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Constant {
        seconds: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// `shift + exp(N(mu, sigma²))`, with `mu` in ln-seconds.
    ShiftedLognormal {
        shift: f64,
        mu: f64,
        sigma: f64,
    },
}

impl DelayModel {
    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            DelayModel::Constant { seconds } => seconds >= 0.0 && seconds.is_finite(),
            DelayModel::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
            DelayModel::ShiftedLognormal { shift, mu, sigma } => {
                shift >= 0.0
                    && shift.is_finite()
                    && mu.is_finite()
                    && sigma >= 0.0
                    && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad delay parameters {self:?}"))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayModel::Constant { seconds } => seconds,
            DelayModel::Uniform { low, high } => {
                if high > low {
                    rng.gen_range(low..high)
                } else {
                    low
                }
            }
            DelayModel::ShiftedLognormal { shift, mu, sigma } => {
                shift
                    + LogNormal::new(mu, sigma)
                        .expect("validated lognormal parameters")
                        .sample(rng)
            }
        }
    }

    /// Lower bound of the support.
    pub fn minimum(&self) -> f64 {
        match *self {
            DelayModel::Constant { seconds } => seconds,
            DelayModel::Uniform { low, .. } => low,
            DelayModel::ShiftedLognormal { shift, .. } => shift,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DelayModel::Constant { seconds } => seconds,
            DelayModel::Uniform { low, high } => 0.5 * (low + high),
            DelayModel::ShiftedLognormal { shift, mu, sigma } => {
                shift + (mu + 0.5 * sigma * sigma).exp()
            }
        }
    }
}

fn default_fifo() -> bool {
    false
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LinkModel {
    #[serde(skip)]
    pub name: String,
    pub delay: DelayModel,
    /// Header bytes charged on every message.
    #[serde(default)]
    pub overhead: u64,
    #[serde(default, rename = "loss")]
    pub loss_probability: f64,
    #[serde(default = "default_fifo")]
    pub fifo: bool,
}

impl LinkModel {
    pub fn new(name: impl Into<String>, delay: DelayModel) -> Self {
        Self {
            name: name.into(),
            delay,
            overhead: 0,
            loss_probability: 0.0,
            fifo: false,
        }
    }

    pub fn with_overhead(mut self, bytes: u64) -> Self {
        self.overhead = bytes;
        self
    }

    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_probability = p;
        self
    }

    pub fn fifo(mut self, fifo: bool) -> Self {
        self.fifo = fifo;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let invalid = |reason: String| NetError::InvalidLink {
            name: self.name.clone(),
            reason,
        };
        self.delay.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(invalid("loss probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub payload_bytes: u64,
    /// Payload plus per-message overhead of every message offered to the link.
    pub wire_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Delivered(SimTime),
    Dropped,
}

#[derive(Debug)]
struct LinkState {
    model: LinkModel,
    last_delivery: SimTime,
    stats: LinkStats,
}

/// A set of named links sharing one random stream.
#[derive(Debug)]
pub struct Network {
    links: BTreeMap<String, LinkState>,
    rng: ChaCha8Rng,
}

impl Network {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            links: BTreeMap::new(),
            rng,
        }
    }

    pub fn add_link(&mut self, link: LinkModel) -> Result<(), NetError> {
        link.validate()?;
        self.links.insert(
            link.name.clone(),
            LinkState {
                model: link,
                last_delivery: SimTime::ZERO,
                stats: LinkStats::default(),
            },
        );
        Ok(())
    }

    pub fn link(&self, name: &str) -> Option<&LinkModel> {
        self.links.get(name).map(|l| &l.model)
    }

    pub fn stats(&self, name: &str) -> Option<&LinkStats> {
        self.links.get(name).map(|l| &l.stats)
    }

    /// Offers a message of `payload_len` bytes sent at `sent_at`.
    ///
    /// FIFO links never deliver before the previous delivery on the same link.
    pub fn send(
        &mut self,
        link: &str,
        sent_at: SimTime,
        payload_len: usize,
    ) -> Result<SendOutcome, NetError> {
        let state = self
            .links
            .get_mut(link)
            .ok_or_else(|| NetError::UnknownLink(link.to_string()))?;
        let m = &state.model;
        state.stats.sent += 1;
        state.stats.payload_bytes += payload_len as u64;
        state.stats.wire_bytes += payload_len as u64 + m.overhead;
        if m.loss_probability > 0.0 && self.rng.gen::<f64>() < m.loss_probability {
            state.stats.dropped += 1;
            return Ok(SendOutcome::Dropped);
        }
        let mut at = sent_at + SimTime::from_secs(m.delay.sample(&mut self.rng));
        if m.fifo && at < state.last_delivery {
            at = state.last_delivery;
        }
        state.last_delivery = state.last_delivery.max(at);
        state.stats.delivered += 1;
        Ok(SendOutcome::Delivered(at))
    }
}

/// Link configuration file (TOML):
///
/// ```toml
/// [pipeline]
/// wait_timeout = 1.0
///
/// [links.cvo_app_local]
/// delay = { kind = "shifted_lognormal", shift = 0.045, mu = -6.37, sigma = 1.3 }
/// overhead = 210
/// loss = 0.0
/// fifo = false
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LinkConfig {
    #[serde(default)]
    pub pipeline: PipelineTiming,
    pub links: BTreeMap<String, LinkModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct PipelineTiming {
    /// CVO alignment wait, seconds.
    #[serde(default = "PipelineTiming::default_wait")]
    pub wait_timeout: f64,
    /// Time a CVO spends composing and forwarding an aligned set, seconds.
    #[serde(default)]
    pub cvo_processing: f64,
}

impl PipelineTiming {
    fn default_wait() -> f64 {
        0.040
    }
}

impl Default for PipelineTiming {
    fn default() -> Self {
        Self {
            wait_timeout: Self::default_wait(),
            cvo_processing: 0.0,
        }
    }
}

impl LinkConfig {
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut cfg: LinkConfig =
            toml::from_str(text).map_err(|e| NetError::Config(e.to_string()))?;
        for (name, link) in cfg.links.iter_mut() {
            link.name = name.clone();
            link.validate()?;
        }
        if cfg.pipeline.wait_timeout.is_nan()
            || cfg.pipeline.wait_timeout <= 0.0
            || cfg.pipeline.cvo_processing < 0.0
        {
            return Err(NetError::Config("pipeline timings must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn link(&self, name: &str) -> Result<&LinkModel, NetError> {
        self.links
            .get(name)
            .ok_or_else(|| NetError::UnknownLink(name.to_string()))
    }

    /// Replaces every link's delay with a constant, keeping overheads.
    pub fn with_constant_delays(mut self, seconds: f64) -> Self {
        for link in self.links.values_mut() {
            link.delay = DelayModel::Constant { seconds };
        }
        self
    }
}

struct Scheduled<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, sequence)
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Priority queue of events ordered by (time, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    seq: u64,
    now: SimTime,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedules `event` at `at`, clamped to the current time.
    pub fn schedule(&mut self, at: SimTime, event: E) {
        let at = at.max(self.now);
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let s = self.heap.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Bits per second of `streams` streams of `frame_bytes` + `overhead` at `rate` fps.
pub fn stream_bandwidth(frame_bytes: u64, rate: u64, overhead: u64, streams: u64) -> u64 {
    streams * (frame_bytes + overhead) * rate * 8
}

/// Percentage saved by `local` relative to `remote`, rounded to one decimal.
pub fn bandwidth_saving(local_bps: f64, remote_bps: f64) -> f64 {
    round1(100.0 * (1.0 - local_bps / remote_bps))
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Per-message overhead that makes `streams` streams of `frame_bytes` at `rate`
/// fps use exactly `bps`, if it is a whole number of bytes.
pub fn solve_overhead(bps: u64, frame_bytes: u64, rate: u64, streams: u64) -> Option<u64> {
    let per_message_bits = streams * rate * 8;
    if per_message_bits == 0 || !bps.is_multiple_of(per_message_bits) {
        return None;
    }
    (bps / per_message_bits).checked_sub(frame_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyRecord {
    pub timestamp: Timestamp,
    pub received_at: SimTime,
    /// Seconds.
    pub latency: f64,
}

impl LatencyRecord {
    pub fn new(timestamp: Timestamp, epoch: Timestamp, received_at: SimTime) -> Self {
        let sent = SimTime::of_timestamp(timestamp, epoch);
        Self {
            timestamp,
            received_at,
            latency: (received_at - sent).as_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    /// Sorted latencies, seconds.
    pub sorted: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl EmpiricalCdf {
    /// Fraction of samples ≤ `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.sorted.partition_point(|&v| v <= x);
        n as f64 / self.sorted.len() as f64
    }

    /// Smallest sample with cumulative fraction ≥ `p` (0 < p ≤ 1).
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let k = ((p * n as f64).ceil() as usize).clamp(1, n);
        self.sorted[k - 1]
    }

    /// (latency, cumulative fraction) steps, one per sample.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.sorted.len() as f64;
        self.sorted
            .iter()
            .enumerate()
            .map(move |(i, &v)| (v, (i + 1) as f64 / n))
    }

    /// True if `self` is no slower than `other` at each quantile of `grid`.
    pub fn dominates(&self, other: &EmpiricalCdf, grid: &[f64]) -> bool {
        grid.iter().all(|&p| self.quantile(p) <= other.quantile(p))
    }
}

pub fn latency_cdf(records: &[LatencyRecord]) -> Result<EmpiricalCdf, NetError> {
    if records.is_empty() {
        return Err(NetError::NoRecords);
    }
    let mut sorted: Vec<f64> = records.iter().map(|r| r.latency).collect();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(EmpiricalCdf {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean,
        sorted,
    })
}

/// Percentage of records with latency ≤ `threshold` seconds.
pub fn dependability(records: &[LatencyRecord], threshold: f64) -> Result<f64, NetError> {
    if records.is_empty() {
        return Err(NetError::NoRecords);
    }
    let ok = records.iter().filter(|r| r.latency <= threshold).count();
    Ok(100.0 * ok as f64 / records.len() as f64)
}
