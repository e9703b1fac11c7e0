//! Composite Virtual Object: PDC-style timestamp alignment over member sources,
//! composition into a multi-channel virtual PMU, and threshold actions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::audit::AuditLog;
use crate::broker::TopicName;
use crate::codec::{encode_data_frame, CodecError, DataFrame, PmuBlock, StreamLayout, Timestamp};
use crate::kv::{FieldKey, KeyValueRecord, Part};
use crate::netsim::SimTime;
use crate::vo::Comparator;

/// Two reporting intervals at 50 fps.
pub const DEFAULT_WAIT_TIMEOUT: f64 = 0.040;
/// Emitted timestamps older than this (relative to the newest) are folded into a watermark.
const EMITTED_HORIZON_US: u64 = 60_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum CvoError {
    #[error("cvo {cvo}: unknown source {source_id:?}")]
    UnknownSource { cvo: String, source_id: String },
    #[error("cvo {cvo}: late record from {source_id:?} for already emitted {timestamp}")]
    Late {
        cvo: String,
        source_id: String,
        timestamp: Timestamp,
    },
    #[error("aligned set for {0} is incomplete")]
    Incomplete(Timestamp),
    #[error("contribution of {0:?} is not frame shaped")]
    NotFrameShaped(String),
    #[error("invalid cvo configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CvoPlacement {
    /// At the edge, inside the PMU subnetwork.
    Local,
    /// Across the WAN, e.g. in the cloud.
    Remote,
}

impl fmt::Display for CvoPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CvoPlacement::Local => "local",
            CvoPlacement::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    AggregatedFrame,
    KeyValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRule {
    pub field: FieldKey,
    pub cmp: Comparator,
    pub bound: f64,
    pub action_topic: TopicName,
    /// Reporting rate advertised to members when the rule fires.
    pub requested_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvoConfig {
    pub cvo_id: String,
    pub idcode: u16,
    pub members: Vec<String>,
    pub placement: CvoPlacement,
    /// Seconds after the first arrival for a timestamp before a partial set is emitted.
    pub wait_timeout: f64,
    pub output_mode: OutputMode,
    pub thresholds: Vec<ThresholdRule>,
    pub parent: Option<String>,
}

impl CvoConfig {
    pub fn new(cvo_id: impl Into<String>, idcode: u16, members: Vec<String>) -> Self {
        Self {
            cvo_id: cvo_id.into(),
            idcode,
            members,
            placement: CvoPlacement::Local,
            wait_timeout: DEFAULT_WAIT_TIMEOUT,
            output_mode: OutputMode::AggregatedFrame,
            thresholds: Vec::new(),
            parent: None,
        }
    }

    fn validate(&self) -> Result<(), CvoError> {
        if self.members.is_empty() {
            return Err(CvoError::Config("no members".into()));
        }
        let unique: BTreeSet<&String> = self.members.iter().collect();
        if unique.len() != self.members.len() {
            return Err(CvoError::Config("duplicate member".into()));
        }
        if self.wait_timeout.is_nan() || self.wait_timeout <= 0.0 {
            return Err(CvoError::Config("wait_timeout must be > 0".into()));
        }
        Ok(())
    }

    /// Messages crossing the WAN per reporting period for this placement.
    pub fn wan_messages_per_period(&self) -> usize {
        match self.placement {
            CvoPlacement::Local => 1,
            CvoPlacement::Remote => self.members.len(),
        }
    }
}

/// One member's data for a timestamp.
#[derive(Debug, Clone, PartialEq)]
pub enum Contribution {
    /// PMU blocks: one from a VO, several from a child CVO.
    Blocks(Vec<PmuBlock>),
    Record(KeyValueRecord),
}

impl Contribution {
    fn values(&self, key: FieldKey) -> Vec<f64> {
        match self {
            Contribution::Record(r) => r.get(key).into_iter().collect(),
            Contribution::Blocks(blocks) => {
                blocks.iter().filter_map(|b| block_value(b, key)).collect()
            }
        }
    }
}

fn block_value(b: &PmuBlock, key: FieldKey) -> Option<f64> {
    match key {
        FieldKey::Freq => Some(b.freq_dev),
        FieldKey::Rocof => Some(b.rocof),
        FieldKey::Phasor(k, Part::Re) => b.phasors.get(k).map(|p| p.re),
        FieldKey::Phasor(k, Part::Im) => b.phasors.get(k).map(|p| p.im),
        FieldKey::Idcode | FieldKey::Soc | FieldKey::Fracsec => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSet {
    pub timestamp: Timestamp,
    /// In configured member order; absent members are skipped.
    pub contributions: Vec<(String, Contribution)>,
    pub complete: bool,
    pub absent: Vec<String>,
}

impl AlignedSet {
    pub fn to_document(&self) -> String {
        let mut s = format!(
            "soc={}\nfracsec={}\ncomplete={}\n",
            self.timestamp.soc,
            self.timestamp.fracsec,
            u8::from(self.complete)
        );
        for (member, c) in &self.contributions {
            match c {
                Contribution::Record(r) => {
                    for (k, v) in &r.0 {
                        s += &format!("{member}:{k}={v}\n");
                    }
                }
                Contribution::Blocks(blocks) => {
                    for (i, b) in blocks.iter().enumerate() {
                        s += &format!(
                            "{member}#{i}:freq={}\n{member}#{i}:rocof={}\n",
                            b.freq_dev, b.rocof
                        );
                        for (k, p) in b.phasors.iter().enumerate() {
                            s += &format!(
                                "{member}#{i}:phasor.{k}.re={}\n{member}#{i}:phasor.{k}.im={}\n",
                                p.re, p.im
                            );
                        }
                    }
                }
            }
        }
        s
    }
}

/// Published on a rule's action topic.
#[derive(Debug, Clone, PartialEq)]
pub struct RateAdvertisement {
    pub cvo_id: String,
    pub field: FieldKey,
    pub value: f64,
    pub timestamp: Timestamp,
    pub requested_rate: u32,
}

impl RateAdvertisement {
    pub fn to_document(&self) -> String {
        format!(
            "cvo={}\nfield={}\nvalue={}\nsoc={}\nfracsec={}\nrate={}\n",
            self.cvo_id,
            self.field,
            self.value,
            self.timestamp.soc,
            self.timestamp.fracsec,
            self.requested_rate
        )
    }

    pub fn from_document(doc: &str) -> Option<Self> {
        let map: BTreeMap<&str, &str> = doc.lines().filter_map(|l| l.split_once('=')).collect();
        Some(Self {
            cvo_id: map.get("cvo")?.to_string(),
            field: map.get("field")?.parse().ok()?,
            value: map.get("value")?.parse().ok()?,
            timestamp: Timestamp::new(
                map.get("soc")?.parse().ok()?,
                map.get("fracsec")?.parse().ok()?,
            )
            .ok()?,
            requested_rate: map.get("rate")?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdAction {
    pub topic: TopicName,
    pub advertisement: RateAdvertisement,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Frame(Vec<u8>),
    Document(String),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Frame(b) => b.len(),
            Payload::Document(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    /// Parent CVO id, or `None` for the application endpoint.
    pub destination: Option<String>,
    pub timestamp: Timestamp,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
struct Slot {
    first_arrival: SimTime,
    contributions: BTreeMap<String, Contribution>,
}

#[derive(Debug, Clone)]
pub struct Cvo {
    config: CvoConfig,
    pending: BTreeMap<Timestamp, Slot>,
    emitted: BTreeSet<Timestamp>,
    watermark: Option<Timestamp>,
    pub audit: AuditLog,
}

impl Cvo {
    pub fn new(config: CvoConfig) -> Result<Self, CvoError> {
        config.validate()?;
        Ok(Self {
            config,
            pending: BTreeMap::new(),
            emitted: BTreeSet::new(),
            watermark: None,
            audit: AuditLog::default(),
        })
    }

    pub fn config(&self) -> &CvoConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.cvo_id
    }

    fn wait(&self) -> SimTime {
        SimTime::from_secs(self.config.wait_timeout)
    }

    fn already_emitted(&self, ts: Timestamp) -> bool {
        self.emitted.contains(&ts) || self.watermark.is_some_and(|w| ts <= w)
    }

    /// Files a member's record; returns the set if this arrival completed it.
    pub fn ingest(
        &mut self,
        now: SimTime,
        source: &str,
        timestamp: Timestamp,
        contribution: Contribution,
    ) -> Result<Option<AlignedSet>, CvoError> {
        if !self.config.members.iter().any(|m| m == source) {
            self.audit.record(format!(
                "cvo {}: rejected record from unknown source {source}",
                self.config.cvo_id
            ));
            return Err(CvoError::UnknownSource {
                cvo: self.config.cvo_id.clone(),
                source_id: source.to_string(),
            });
        }
        if self.already_emitted(timestamp) {
            self.audit.record(format!(
                "cvo {}: dropped late record from {source} for {timestamp}",
                self.config.cvo_id
            ));
            return Err(CvoError::Late {
                cvo: self.config.cvo_id.clone(),
                source_id: source.to_string(),
                timestamp,
            });
        }
        let slot = self.pending.entry(timestamp).or_insert_with(|| Slot {
            first_arrival: now,
            contributions: BTreeMap::new(),
        });
        if slot.contributions.contains_key(source) {
            self.audit.record(format!(
                "cvo {}: duplicate record from {source} for {timestamp}",
                self.config.cvo_id
            ));
            return Ok(None);
        }
        slot.contributions.insert(source.to_string(), contribution);
        if slot.contributions.len() == self.config.members.len() {
            return Ok(Some(self.emit(timestamp)));
        }
        Ok(None)
    }

    /// Emits partial sets whose wait has expired at `now`, oldest first.
    pub fn poll_timeouts(&mut self, now: SimTime) -> Vec<AlignedSet> {
        let wait = self.wait();
        let expired: Vec<Timestamp> = self
            .pending
            .iter()
            .filter(|(_, s)| s.first_arrival + wait <= now)
            .map(|(ts, _)| *ts)
            .collect();
        expired.into_iter().map(|ts| self.emit(ts)).collect()
    }

    /// Time at which the pending slot for `ts` times out.
    pub fn deadline(&self, ts: Timestamp) -> Option<SimTime> {
        self.pending.get(&ts).map(|s| s.first_arrival + self.wait())
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn emit(&mut self, ts: Timestamp) -> AlignedSet {
        let mut slot = self.pending.remove(&ts).expect("emit of a pending slot");
        let mut contributions = Vec::new();
        let mut absent = Vec::new();
        for m in &self.config.members {
            match slot.contributions.remove(m) {
                Some(c) => contributions.push((m.clone(), c)),
                None => absent.push(m.clone()),
            }
        }
        self.emitted.insert(ts);
        if let Some(&newest) = self.emitted.iter().next_back() {
            let cutoff = newest.as_micros().saturating_sub(EMITTED_HORIZON_US);
            while let Some(&oldest) = self.emitted.iter().next() {
                if oldest.as_micros() >= cutoff {
                    break;
                }
                self.emitted.remove(&oldest);
                self.watermark = Some(self.watermark.map_or(oldest, |w| w.max(oldest)));
            }
        }
        AlignedSet {
            timestamp: ts,
            complete: absent.is_empty(),
            contributions,
            absent,
        }
    }

    /// Concatenates member blocks, in member order, under one header.
    pub fn compose_aggregate_frame(&self, set: &AlignedSet) -> Result<DataFrame, CvoError> {
        compose_aggregate_frame(set, self.config.idcode)
    }

    /// At most one action per rule for a set, carrying the first violating value
    /// in member order.
    pub fn check_thresholds(&self, set: &AlignedSet) -> Vec<ThresholdAction> {
        let mut out = Vec::new();
        for rule in &self.config.thresholds {
            let hit = set
                .contributions
                .iter()
                .flat_map(|(_, c)| c.values(rule.field))
                .find(|&v| rule.cmp.holds(v, rule.bound));
            if let Some(value) = hit {
                out.push(ThresholdAction {
                    topic: rule.action_topic.clone(),
                    advertisement: RateAdvertisement {
                        cvo_id: self.config.cvo_id.clone(),
                        field: rule.field,
                        value,
                        timestamp: set.timestamp,
                        requested_rate: rule.requested_rate,
                    },
                });
            }
        }
        out
    }

    /// Builds the upstream message for a set. `layout` describes the aggregate
    /// frame and is only used in aggregated-frame mode.
    pub fn forward(&self, set: &AlignedSet, layout: &StreamLayout) -> Result<Outbound, CvoError> {
        let payload = match self.config.output_mode {
            OutputMode::AggregatedFrame => {
                let frame = self.compose_aggregate_frame(set)?;
                Payload::Frame(encode_data_frame(&frame, layout)?)
            }
            OutputMode::KeyValue => Payload::Document(set.to_document()),
        };
        Ok(Outbound {
            destination: self.config.parent.clone(),
            timestamp: set.timestamp,
            payload,
        })
    }
}

pub fn compose_aggregate_frame(set: &AlignedSet, idcode: u16) -> Result<DataFrame, CvoError> {
    if !set.complete {
        return Err(CvoError::Incomplete(set.timestamp));
    }
    let mut blocks = Vec::new();
    for (member, c) in &set.contributions {
        match c {
            Contribution::Blocks(b) => blocks.extend(b.iter().cloned()),
            Contribution::Record(_) => return Err(CvoError::NotFrameShaped(member.clone())),
        }
    }
    Ok(DataFrame {
        idcode,
        timestamp: set.timestamp,
        blocks,
    })
}
