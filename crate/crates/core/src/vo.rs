//! Virtual Object: the cyber counterpart of one PMU.
//!
//! A VO keeps the most recent frames of its device, serves field-selected or
//! window-averaged views of them, and pushes data to other resources or topics
//! when registered triggers fire.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::audit::AuditLog;
use crate::broker::{TopicError, TopicName};
use crate::codec::DataFrame;
use crate::kv::{parse_selector, selector_to_string, FieldKey, KeyError, KeyValueRecord};

/// 12 s at 50 fps.
pub const DEFAULT_CAPACITY: usize = 600;

#[derive(Debug, Error, PartialEq)]
pub enum VoError {
    #[error("no data buffered")]
    NoData,
    #[error(transparent)]
    Selector(#[from] KeyError),
    #[error("field {0} not present in frames of this stream")]
    MissingField(FieldKey),
    #[error("window {window} exceeds {available} buffered frames")]
    Window { window: usize, available: usize },
    #[error("frame from idcode {got} rejected by VO of idcode {expected}")]
    ForeignIdcode { expected: u16, got: u16 },
    #[error("trigger id {0:?} already registered")]
    DuplicateTrigger(String),
    #[error("no trigger {0:?}")]
    UnknownTrigger(String),
    #[error("malformed trigger: {0}")]
    MalformedTrigger(String),
    #[error(transparent)]
    Topic(#[from] TopicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Gt,
    Lt,
    Ge,
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Comparator::Gt => value > bound,
            Comparator::Lt => value < bound,
            Comparator::Ge => value >= bound,
            Comparator::Le => value <= bound,
        }
    }
}

impl FromStr for Comparator {
    type Err = VoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            ">" => Ok(Comparator::Gt),
            "<" => Ok(Comparator::Lt),
            ">=" => Ok(Comparator::Ge),
            "<=" => Ok(Comparator::Le),
            other => Err(VoError::MalformedTrigger(format!("comparator {other:?}"))),
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Gt => ">",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        })
    }
}

/// Where a push goes: another resource's ingest endpoint or a broker topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Destination {
    Resource(String),
    Topic(TopicName),
}

impl FromStr for Destination {
    type Err = VoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(topic) = s.strip_prefix("topic:") {
            Ok(Destination::Topic(topic.parse()?))
        } else if s.starts_with('/') {
            Ok(Destination::Resource(s.to_string()))
        } else {
            Err(VoError::MalformedTrigger(format!("destination {s:?}")))
        }
    }
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Resource(r) => f.write_str(r),
            Destination::Topic(t) => write!(f, "topic:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TriggerKind {
    /// Fires on the first frame of each period; periods start at `anchor` seconds
    /// (epoch time) plus multiples of `period`.
    Periodic { period: f64, anchor: f64 },
    Threshold {
        field: FieldKey,
        cmp: Comparator,
        bound: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub id: String,
    pub kind: TriggerKind,
    pub selector: Vec<FieldKey>,
    pub destination: Destination,
}

impl Trigger {
    fn validate(&self) -> Result<(), VoError> {
        if self.id.is_empty() {
            return Err(VoError::MalformedTrigger("empty id".into()));
        }
        match self.kind {
            TriggerKind::Periodic { period, anchor } => {
                if !(period > 0.0 && period.is_finite()) || !anchor.is_finite() {
                    return Err(VoError::MalformedTrigger("period must be > 0".into()));
                }
                if micros(period) == 0 {
                    return Err(VoError::MalformedTrigger("period below 1 µs".into()));
                }
            }
            TriggerKind::Threshold { bound, .. } => {
                if !bound.is_finite() {
                    return Err(VoError::MalformedTrigger("bound must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Trigger document: one `key=value` per line.
    pub fn to_document(&self) -> String {
        let mut s = format!("id={}\n", self.id);
        match &self.kind {
            TriggerKind::Periodic { period, anchor } => {
                s += &format!("kind=periodic\nperiod={period}\nanchor={anchor}\n");
            }
            TriggerKind::Threshold { field, cmp, bound } => {
                s += &format!("kind=threshold\nfield={field}\ncmp={cmp}\nbound={bound}\n");
            }
        }
        s += &format!(
            "fields={}\ndestination={}\n",
            selector_to_string(&self.selector),
            self.destination
        );
        s
    }

    pub fn from_document(doc: &str) -> Result<Self, VoError> {
        let mut fields = BTreeMap::new();
        for line in doc.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VoError::MalformedTrigger(format!("line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| VoError::MalformedTrigger(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<f64, VoError> {
            get(k)?
                .parse()
                .map_err(|_| VoError::MalformedTrigger(format!("{k} is not a number")))
        };
        let kind = match get("kind")? {
            "periodic" => TriggerKind::Periodic {
                period: num("period")?,
                anchor: fields.get("anchor").map_or(Ok(0.0), |_| num("anchor"))?,
            },
            "threshold" => TriggerKind::Threshold {
                field: get("field")?.parse()?,
                cmp: get("cmp")?.parse()?,
                bound: num("bound")?,
            },
            other => return Err(VoError::MalformedTrigger(format!("kind {other:?}"))),
        };
        let t = Trigger {
            id: get("id")?.to_string(),
            kind,
            selector: parse_selector(fields.get("fields").copied().unwrap_or(""))?,
            destination: get("destination")?.parse()?,
        };
        t.validate()?;
        Ok(t)
    }
}

fn micros(secs: f64) -> i64 {
    (secs * 1e6).round() as i64
}

#[derive(Debug, Clone)]
struct TriggerState {
    trigger: Trigger,
    last_period: Option<i64>,
}

impl TriggerState {
    fn fires(&mut self, f: &DataFrame) -> bool {
        match self.trigger.kind {
            TriggerKind::Periodic { period, anchor } => {
                let (p, a) = (micros(period), micros(anchor));
                let offset = f.timestamp.as_micros() as i64 - a;
                let index = offset.div_euclid(p);
                match self.last_period {
                    None => {
                        self.last_period = Some(index);
                        offset.rem_euclid(p) == 0
                    }
                    Some(last) if index > last => {
                        self.last_period = Some(index);
                        true
                    }
                    Some(_) => false,
                }
            }
            TriggerKind::Threshold { field, cmp, bound } => {
                field.value_in(f).is_some_and(|v| cmp.holds(v, bound))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushMessage {
    pub trigger_id: String,
    pub destination: Destination,
    pub record: KeyValueRecord,
}

#[derive(Debug, Clone)]
pub struct VoResource {
    pub vo_id: String,
    pub pmu_idcode: u16,
    capacity: usize,
    buffer: VecDeque<DataFrame>,
    triggers: Vec<TriggerState>,
    pub audit: AuditLog,
}

impl VoResource {
    pub fn new(vo_id: impl Into<String>, pmu_idcode: u16) -> Self {
        Self::with_capacity(vo_id, pmu_idcode, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(vo_id: impl Into<String>, pmu_idcode: u16, capacity: usize) -> Self {
        Self {
            vo_id: vo_id.into(),
            pmu_idcode,
            capacity: capacity.max(1),
            buffer: VecDeque::new(),
            triggers: Vec::new(),
            audit: AuditLog::default(),
        }
    }

    pub fn buffered(&self) -> impl Iterator<Item = &DataFrame> {
        self.buffer.iter()
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn latest(&self) -> Option<&DataFrame> {
        self.buffer.back()
    }

    /// Stores `f` in timestamp order and evaluates triggers on it.
    ///
    /// Duplicate timestamps are dropped without evaluating triggers.
    pub fn ingest(&mut self, f: DataFrame) -> Result<Vec<PushMessage>, VoError> {
        if f.idcode != self.pmu_idcode {
            self.audit.record(format!(
                "vo {}: rejected frame {} from idcode {}",
                self.vo_id, f.timestamp, f.idcode
            ));
            return Err(VoError::ForeignIdcode {
                expected: self.pmu_idcode,
                got: f.idcode,
            });
        }
        let pos = match self
            .buffer
            .binary_search_by(|b| b.timestamp.cmp(&f.timestamp))
        {
            Ok(_) => {
                self.audit.record(format!(
                    "vo {}: dropped duplicate frame {}",
                    self.vo_id, f.timestamp
                ));
                return Ok(Vec::new());
            }
            Err(pos) => pos,
        };
        let pushes = self.evaluate_triggers(&f);
        self.buffer.insert(pos, f);
        while self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
        Ok(pushes)
    }

    pub fn register_trigger(&mut self, t: Trigger) -> Result<(), VoError> {
        t.validate()?;
        if self.triggers.iter().any(|s| s.trigger.id == t.id) {
            return Err(VoError::DuplicateTrigger(t.id));
        }
        self.triggers.push(TriggerState {
            trigger: t,
            last_period: None,
        });
        Ok(())
    }

    pub fn remove_trigger(&mut self, id: &str) -> Result<Trigger, VoError> {
        let pos = self
            .triggers
            .iter()
            .position(|s| s.trigger.id == id)
            .ok_or_else(|| VoError::UnknownTrigger(id.to_string()))?;
        Ok(self.triggers.remove(pos).trigger)
    }

    pub fn triggers(&self) -> impl Iterator<Item = &Trigger> {
        self.triggers.iter().map(|s| &s.trigger)
    }

    /// One push per firing trigger, projected through the trigger's selector.
    pub fn evaluate_triggers(&mut self, f: &DataFrame) -> Vec<PushMessage> {
        let mut out = Vec::new();
        for state in &mut self.triggers {
            if !state.fires(f) {
                continue;
            }
            match KeyValueRecord::project(f, &state.trigger.selector) {
                Some(record) => out.push(PushMessage {
                    trigger_id: state.trigger.id.clone(),
                    destination: state.trigger.destination.clone(),
                    record,
                }),
                None => self.audit.record(format!(
                    "vo {}: trigger {} selects fields absent from frame {}",
                    self.vo_id, state.trigger.id, f.timestamp
                )),
            }
        }
        out
    }

    /// Latest values of `selector`, or their mean over the newest `window` frames.
    pub fn get_resource(
        &self,
        selector: &[FieldKey],
        window: Option<usize>,
    ) -> Result<KeyValueRecord, VoError> {
        let newest = self.buffer.back().ok_or(VoError::NoData)?;
        let n = window.unwrap_or(1);
        if n == 0 || n > self.buffer.len() {
            return Err(VoError::Window {
                window: n,
                available: self.buffer.len(),
            });
        }
        let keys: Vec<FieldKey> = if selector.is_empty() {
            FieldKey::all(newest.blocks.first().map_or(0, |b| b.phasors.len()))
        } else {
            selector.to_vec()
        };
        let frames = self.buffer.iter().rev().take(n);
        let mut out = BTreeMap::new();
        for key in keys {
            let value = if key.is_header() || n == 1 {
                key.value_in(newest).ok_or(VoError::MissingField(key))?
            } else {
                let mut sum = 0.0;
                for f in frames.clone() {
                    sum += key.value_in(f).ok_or(VoError::MissingField(key))?;
                }
                sum / n as f64
            };
            out.insert(key, value);
        }
        Ok(KeyValueRecord(out))
    }

    /// Serves the VO resource protocol:
    ///
    /// - `GET /vo/{id}/measurements?fields=..&window=N`
    /// - `POST /vo/{id}/triggers` with a trigger document
    /// - `DELETE /vo/{id}/triggers/{trigger}`
    pub fn handle(&mut self, req: &Request) -> Response {
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        match (req.method, segments.as_slice()) {
            (_, ["vo", id, ..]) if *id != self.vo_id => Response::new(404, "unknown vo"),
            (Method::Get, ["vo", _, "measurements"]) => {
                let selector =
                    match parse_selector(req.query.get("fields").map_or("", String::as_str)) {
                        Ok(s) => s,
                        Err(e) => return Response::new(400, e.to_string()),
                    };
                let window = match req.query.get("window").map(|w| w.parse::<usize>()) {
                    None => None,
                    Some(Ok(w)) => Some(w),
                    Some(Err(_)) => return Response::new(400, "bad window"),
                };
                match self.get_resource(&selector, window) {
                    Ok(rec) => Response::new(200, rec.to_document()),
                    Err(VoError::NoData) => Response::new(404, "no data"),
                    Err(e) => Response::new(400, e.to_string()),
                }
            }
            (Method::Post, ["vo", _, "triggers"]) => {
                match Trigger::from_document(&req.body).and_then(|t| {
                    let id = t.id.clone();
                    self.register_trigger(t).map(|_| id)
                }) {
                    Ok(id) => Response::new(201, format!("id={id}\n")),
                    Err(e @ VoError::DuplicateTrigger(_)) => Response::new(409, e.to_string()),
                    Err(e) => Response::new(400, e.to_string()),
                }
            }
            (Method::Delete, ["vo", _, "triggers", tid]) => match self.remove_trigger(tid) {
                Ok(_) => Response::new(204, ""),
                Err(e) => Response::new(404, e.to_string()),
            },
            _ => Response::new(405, "unsupported request"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
    Delete,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Delete => "DELETE",
        })
    }
}

/// A resource-protocol request as carried by the simulated transport.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: Method,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: String,
}

impl Request {
    /// Parses `"GET /vo/a/measurements?fields=freq&window=4"`.
    pub fn parse(line: &str, body: impl Into<String>) -> Result<Self, String> {
        let (method, target) = line
            .trim()
            .split_once(' ')
            .ok_or_else(|| format!("bad request line {line:?}"))?;
        let method = match method {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "DELETE" => Method::Delete,
            m => return Err(format!("unsupported method {m}")),
        };
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let query = query
            .split('&')
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (k, v) = p.split_once('=').unwrap_or((p, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        Ok(Self {
            method,
            path: path.to_string(),
            query,
            body: body.into(),
        })
    }

    /// Request line and body; header bytes are accounted separately as link overhead.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut target = self.path.clone();
        if !self.query.is_empty() {
            let q: Vec<String> = self.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
            target = format!("{target}?{}", q.join("&"));
        }
        format!("{} {}\n{}", self.method, target, self.body).into_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub body: String,
}

impl Response {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Phasor, PmuBlock, Timestamp};

    fn frame_at(us: u64, freq: f64, rocof: f64) -> DataFrame {
        DataFrame {
            idcode: 1,
            timestamp: Timestamp::from_micros(us),
            blocks: vec![PmuBlock {
                stat: 0,
                phasors: vec![Phasor::new(1.0, 0.0)],
                freq_dev: freq,
                rocof,
            }],
        }
    }

    fn secs(s: f64) -> u64 {
        (s * 1e6).round() as u64
    }

    fn stamps(vo: &VoResource) -> Vec<u64> {
        vo.buffered().map(|f| f.timestamp.as_micros()).collect()
    }

    #[test]
    fn eviction_reorder_dedup() {
        let mut vo = VoResource::with_capacity("a", 1, 2);
        for t in [1, 2, 3] {
            vo.ingest(frame_at(t, 0.0, 0.0)).unwrap();
        }
        assert_eq!(stamps(&vo), vec![2, 3]);

        let mut vo = VoResource::new("a", 1);
        vo.ingest(frame_at(2, 0.0, 0.0)).unwrap();
        vo.ingest(frame_at(1, 0.0, 0.0)).unwrap();
        assert_eq!(stamps(&vo), vec![1, 2]);
        vo.ingest(frame_at(2, 5.0, 0.0)).unwrap();
        assert_eq!(stamps(&vo), vec![1, 2]);
        assert_eq!(vo.latest().unwrap().blocks[0].freq_dev, 0.0);
    }

    #[test]
    fn foreign_frame_rejected() {
        let mut vo = VoResource::new("a", 2);
        assert_eq!(
            vo.ingest(frame_at(1, 0.0, 0.0)),
            Err(VoError::ForeignIdcode {
                expected: 2,
                got: 1
            })
        );
        assert_eq!(vo.audit.len(), 1);
        assert!(vo.is_empty());
    }

    #[test]
    fn get_latest_and_window() {
        let mut vo = VoResource::new("a", 1);
        assert_eq!(
            vo.get_resource(&[FieldKey::Rocof], None),
            Err(VoError::NoData)
        );
        for (i, dev) in [10.0, 10.0, 20.0, 20.0].into_iter().enumerate() {
            vo.ingest(frame_at(i as u64 * 20_000, dev, 0.0)).unwrap();
        }
        let latest = vo.get_resource(&[FieldKey::Freq], None).unwrap();
        assert_eq!(latest.0, BTreeMap::from([(FieldKey::Freq, 20.0)]));
        let avg = vo
            .get_resource(&[FieldKey::Freq, FieldKey::Fracsec], Some(4))
            .unwrap();
        assert_eq!(avg.get(FieldKey::Freq), Some(15.0));
        assert_eq!(avg.get(FieldKey::Fracsec), Some(60_000.0));
        assert!(matches!(
            vo.get_resource(&[FieldKey::Freq], Some(5)),
            Err(VoError::Window { .. })
        ));
        assert_eq!(
            vo.get_resource(&[FieldKey::Phasor(3, crate::kv::Part::Re)], None),
            Err(VoError::MissingField(FieldKey::Phasor(
                3,
                crate::kv::Part::Re
            )))
        );
    }

    fn threshold(id: &str, bound: f64) -> Trigger {
        Trigger {
            id: id.into(),
            kind: TriggerKind::Threshold {
                field: FieldKey::Rocof,
                cmp: Comparator::Gt,
                bound,
            },
            selector: vec![FieldKey::Rocof],
            destination: "topic:REGION_1/ZONE_1/Node_2/ROCOF".parse().unwrap(),
        }
    }

    #[test]
    fn threshold_trigger_is_strict() {
        let mut vo = VoResource::new("a", 1);
        vo.register_trigger(threshold("t", 0.5)).unwrap();
        let pushes = vo.ingest(frame_at(0, 0.0, 0.7)).unwrap();
        assert_eq!(pushes.len(), 1);
        assert_eq!(pushes[0].record.get(FieldKey::Rocof), Some(0.7));
        assert!(vo.ingest(frame_at(20_000, 0.0, 0.5)).unwrap().is_empty());
        assert!(vo.ingest(frame_at(40_000, 0.0, 0.2)).unwrap().is_empty());
    }

    #[test]
    fn trigger_registry() {
        let mut vo = VoResource::new("a", 1);
        vo.register_trigger(threshold("t", 0.5)).unwrap();
        assert_eq!(
            vo.register_trigger(threshold("t", 0.9)),
            Err(VoError::DuplicateTrigger("t".into()))
        );
        let bad = Trigger {
            kind: TriggerKind::Periodic {
                period: 0.0,
                anchor: 0.0,
            },
            ..threshold("p", 0.0)
        };
        assert!(matches!(
            vo.register_trigger(bad),
            Err(VoError::MalformedTrigger(_))
        ));
        vo.remove_trigger("t").unwrap();
        assert!(vo.remove_trigger("t").is_err());
        assert!(vo.ingest(frame_at(0, 0.0, 0.9)).unwrap().is_empty());
    }

    #[test]
    fn minute_trigger_fires_once_at_boundary() {
        let mut vo = VoResource::new("a", 1);
        vo.register_trigger(Trigger {
            id: "minute".into(),
            kind: TriggerKind::Periodic {
                period: 60.0,
                anchor: 0.0,
            },
            selector: vec![FieldKey::Soc, FieldKey::Freq],
            destination: Destination::Resource("/cvo/app/ingest".into()),
        })
        .unwrap();
        let mut fired = Vec::new();
        for s in [59.98, 60.00, 60.02] {
            for p in vo.ingest(frame_at(secs(s), 0.0, 0.0)).unwrap() {
                fired.push((s, p));
            }
        }
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].0, 60.0);
        assert_eq!(fired[0].1.record.get(FieldKey::Soc), Some(60.0));
    }

    #[test]
    fn first_frame_on_boundary_fires() {
        let mut vo = VoResource::new("a", 1);
        vo.register_trigger(Trigger {
            kind: TriggerKind::Periodic {
                period: 1.0,
                anchor: 0.0,
            },
            ..threshold("p", 0.0)
        })
        .unwrap();
        assert_eq!(vo.ingest(frame_at(secs(5.0), 0.0, 0.0)).unwrap().len(), 1);
    }

    #[test]
    fn trigger_document_round_trip() {
        let t = threshold("r", 0.5);
        assert_eq!(Trigger::from_document(&t.to_document()).unwrap(), t);
        let p = Trigger {
            kind: TriggerKind::Periodic {
                period: 60.0,
                anchor: 0.0,
            },
            destination: Destination::Resource("/cvo/c1/ingest".into()),
            ..threshold("m", 0.0)
        };
        assert_eq!(Trigger::from_document(&p.to_document()).unwrap(), p);
        assert!(Trigger::from_document("id=x\nkind=threshold\n").is_err());
        assert!(
            Trigger::from_document("id=x\nkind=periodic\nperiod=1\ndestination=nowhere").is_err()
        );
    }

    #[test]
    fn resource_protocol() {
        let mut vo = VoResource::new("pmu2a", 1);
        let get = Request::parse("GET /vo/pmu2a/measurements?fields=freq&window=2", "").unwrap();
        assert_eq!(vo.handle(&get).status, 404);
        vo.ingest(frame_at(0, 10.0, 0.0)).unwrap();
        vo.ingest(frame_at(20_000, 20.0, 0.0)).unwrap();
        let resp = vo.handle(&get);
        assert_eq!(resp, Response::new(200, "freq=15\n"));

        let post = Request::parse(
            "POST /vo/pmu2a/triggers",
            threshold("hi", 0.5).to_document(),
        )
        .unwrap();
        assert_eq!(vo.handle(&post), Response::new(201, "id=hi\n"));
        assert_eq!(vo.handle(&post).status, 409);
        let del = Request::parse("DELETE /vo/pmu2a/triggers/hi", "").unwrap();
        assert_eq!(vo.handle(&del).status, 204);
        assert_eq!(vo.handle(&del).status, 404);

        let other = Request::parse("GET /vo/zzz/measurements", "").unwrap();
        assert_eq!(vo.handle(&other).status, 404);
        let bad = Request::parse("GET /vo/pmu2a/measurements?fields=volts", "").unwrap();
        assert_eq!(vo.handle(&bad).status, 400);
        assert_eq!(
            String::from_utf8(get.to_wire()).unwrap(),
            "GET /vo/pmu2a/measurements?fields=freq&window=2\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ingest_orders_any_permutation(perm in Just((0u64..40).collect::<Vec<_>>()).prop_shuffle()) {
                let mut vo = VoResource::new("a", 1);
                for t in &perm {
                    vo.ingest(frame_at(*t * 20_000, 0.0, 0.0)).unwrap();
                }
                let got = stamps(&vo);
                prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(got.len(), 40);
            }

            #[test]
            fn periodic_fire_count(
                start in 0u64..10_000_000,
                steps in proptest::collection::vec(1u64..400_000, 1..200),
                period_ms in 1u64..2_000,
            ) {
                let period = period_ms as f64 / 1000.0;
                let mut vo = VoResource::new("a", 1);
                vo.register_trigger(Trigger {
                    kind: TriggerKind::Periodic { period, anchor: 0.0 },
                    ..threshold("p", 0.0)
                }).unwrap();
                let p = period_ms * 1000;
                let mut t = start;
                let mut fires = vo.ingest(frame_at(t, 0.0, 0.0)).unwrap().len() as u64;
                let first = t;
                let mut expected = u64::from(first % p == 0);
                let mut prev = t;
                for s in steps {
                    t += s;
                    fires += vo.ingest(frame_at(t, 0.0, 0.0)).unwrap().len() as u64;
                    // at most once per ingest, and only when a boundary is crossed
                    expected += u64::from(t / p > prev / p);
                    prev = t;
                }
                prop_assert_eq!(fires, expected);
                if p > 400_000 {
                    // every period is visited, so the count is exactly the boundaries crossed
                    prop_assert_eq!(fires, t / p - first / p + u64::from(first % p == 0));
                }
            }

            #[test]
            fn window_mean_is_exact(devs in proptest::collection::vec(-500i32..500, 1..30), n in 1usize..30) {
                let mut vo = VoResource::new("a", 1);
                for (i, d) in devs.iter().enumerate() {
                    vo.ingest(frame_at(i as u64 * 20_000, f64::from(*d), 0.0)).unwrap();
                }
                let n = n.min(devs.len());
                let got = vo.get_resource(&[FieldKey::Freq], Some(n)).unwrap().get(FieldKey::Freq).unwrap();
                let want = devs.iter().rev().take(n).map(|d| f64::from(*d)).sum::<f64>() / n as f64;
                prop_assert!((got - want).abs() < 1e-9);
            }
        }
    }
}
