//! End-to-end discrete-event run: PMUs → VOs → per-node CVOs → application.
//!
//! Every hop is a named link of the transport model. Frames travel encoded so
//! byte accounting is exact; receivers decode them unless the run is in
//! [`Fidelity::Exact`] mode, where the sender's in-memory frame is used.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::broker::{Broker, Delivery, TopicFilter};
use crate::codec::{self, CodecError, DataFrame, Format, StreamLayout, Timestamp};
use crate::cvo::{AlignedSet, Contribution, Cvo, CvoConfig, CvoError, CvoPlacement, ThresholdRule};
use crate::grid::{build_placement, BusId, Descriptor, GridError, GridModel, PmuPlacement};
use crate::netsim::{
    EventQueue, LatencyRecord, LinkConfig, LinkStats, NetError, Network, SendOutcome, SimTime,
};
use crate::pmu::{EmulatedPmu, NoiseConfig, PhasorSet, PmuError, ReportingRate, Scenario};
use crate::vo::{VoError, VoResource};

pub const LINK_PMU_VO: &str = "pmu_vo";
pub const LINK_VO_CVO_LOCAL: &str = "vo_cvo_local";
pub const LINK_VO_CVO_REMOTE: &str = "vo_cvo_remote";
pub const LINK_CVO_APP_LOCAL: &str = "cvo_app_local";
pub const LINK_CVO_APP_REMOTE: &str = "cvo_app_remote";

/// Stream ids under the root seed.
pub const STREAM_NETWORK: u64 = 1;
pub const STREAM_NOISE: u64 = 2;

const APP_IDCODE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pmu(#[from] PmuError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Vo(#[from] VoError),
    #[error(transparent)]
    Cvo(#[from] CvoError),
    #[error("invalid pipeline setup: {0}")]
    Setup(String),
}

/// Frame configuration of every PMU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameConfig {
    /// Two three-phase channels, 6 phasors.
    A,
    /// Two three-phase channels with sequence components, 12 phasors.
    B,
}

impl FrameConfig {
    pub fn phasor_set(self) -> PhasorSet {
        match self {
            FrameConfig::A => PhasorSet::ThreePhase,
            FrameConfig::B => PhasorSet::ThreePhaseSequences,
        }
    }

    pub fn phasors_per_pmu(self, channels: usize) -> usize {
        channels * self.phasor_set().per_channel()
    }
}

impl std::fmt::Display for FrameConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameConfig::A => "A",
            FrameConfig::B => "B",
        })
    }
}

impl std::str::FromStr for FrameConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(FrameConfig::A),
            "B" | "b" => Ok(FrameConfig::B),
            _ => Err(format!("unknown frame config {s:?}, expected A or B")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    /// Receivers decode the bytes that crossed the link.
    Wire,
    /// Receivers use the sender's frame; bytes are still counted.
    Exact,
}

#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub nodes: BTreeSet<BusId>,
    pub channels_per_pmu: usize,
    pub frame: FrameConfig,
    pub format: Format,
    pub mode: CvoPlacement,
    pub rate: u32,
    /// Reporting instants to simulate.
    pub periods: u64,
    pub noise: NoiseConfig,
    pub fidelity: Fidelity,
    pub seed: u64,
    /// Align node CVO outputs at the application into one set per instant.
    pub app_alignment: bool,
    pub thresholds: Vec<ThresholdRule>,
}

impl PipelineSpec {
    pub fn new(nodes: impl IntoIterator<Item = BusId>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            channels_per_pmu: crate::data::REFERENCE_CHANNELS,
            frame: FrameConfig::A,
            format: Format::Float32,
            mode: CvoPlacement::Local,
            rate: 50,
            periods: 1,
            noise: NoiseConfig::default(),
            fidelity: Fidelity::Wire,
            seed: 0,
            app_alignment: false,
            thresholds: Vec::new(),
        }
    }

    fn vo_cvo_link(&self) -> &'static str {
        match self.mode {
            CvoPlacement::Local => LINK_VO_CVO_LOCAL,
            CvoPlacement::Remote => LINK_VO_CVO_REMOTE,
        }
    }

    fn cvo_app_link(&self) -> &'static str {
        match self.mode {
            CvoPlacement::Local => LINK_CVO_APP_LOCAL,
            CvoPlacement::Remote => LINK_CVO_APP_REMOTE,
        }
    }
}

/// Root-seeded generator for one sub-experiment stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One aggregate frame delivered to the application by a node CVO.
#[derive(Debug, Clone, PartialEq)]
pub struct AppDelivery {
    pub cvo: String,
    pub record: LatencyRecord,
}

/// Instant aligned across all node CVOs at the application.
#[derive(Debug, Clone, PartialEq)]
pub struct AppSet {
    pub timestamp: Timestamp,
    pub received_at: SimTime,
    /// Blocks in placement PMU order.
    pub frame: DataFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SetCounts {
    pub complete: u64,
    pub partial: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub placement: PmuPlacement,
    /// Descriptors of every PMU, in placement order.
    pub pmu_descriptors: Vec<Vec<Descriptor>>,
    pub phasors_per_channel: usize,
    pub epoch: Timestamp,
    pub deliveries: Vec<AppDelivery>,
    pub sets: BTreeMap<String, SetCounts>,
    pub app_sets: Vec<AppSet>,
    pub app_partial: u64,
    pub links: BTreeMap<String, LinkStats>,
    pub actions: Vec<Delivery>,
    pub audit: Vec<String>,
    /// Frames cached per VO at the end of the run.
    pub vo_buffered: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Message {
    frame: DataFrame,
    bytes: Vec<u8>,
}

#[derive(Debug)]
enum Event {
    Sample(u64),
    AtVo {
        pmu: usize,
        msg: Message,
    },
    AtCvo {
        cvo: usize,
        pmu: usize,
        msg: Message,
    },
    CvoTimeout {
        cvo: usize,
    },
    AtApp {
        cvo: usize,
        msg: Message,
    },
    AppTimeout,
}

struct Node {
    cvo: Cvo,
    layout: StreamLayout,
}

struct Sim<'a> {
    spec: &'a PipelineSpec,
    grid: &'a GridModel,
    scenario: &'a Scenario,
    processing: SimTime,
    epoch: Timestamp,
    rate: ReportingRate,
    pmus: Vec<EmulatedPmu>,
    pmu_node: Vec<usize>,
    vos: Vec<VoResource>,
    nodes: Vec<Node>,
    app: Option<Cvo>,
    net: Network,
    noise_rng: ChaCha8Rng,
    queue: EventQueue<Event>,
    broker: Broker,
    report_deliveries: Vec<AppDelivery>,
    sets: BTreeMap<String, SetCounts>,
    app_sets: Vec<AppSet>,
    app_partial: u64,
    actions: Vec<Delivery>,
    audit: Vec<String>,
}

fn vo_id(idcode: u16) -> String {
    format!("VO{idcode}")
}

fn cvo_id(node: BusId) -> String {
    format!("CVO_N{node}")
}

/// Topic of a node-level resource in the shipped topic tree.
pub fn node_topic(node: BusId, leaf: &str) -> String {
    format!("REGION_1/ZONE_1/Node_{node}/{leaf}")
}

pub fn run_pipeline(
    grid: &GridModel,
    scenario: &Scenario,
    links: &LinkConfig,
    spec: &PipelineSpec,
) -> Result<PipelineReport, PipelineError> {
    if spec.nodes.is_empty() {
        return Err(PipelineError::Setup("no monitored nodes".into()));
    }
    let placement = build_placement(grid, &spec.nodes, spec.channels_per_pmu)?;
    let rate = ReportingRate::new(spec.rate)?;

    let mut net = Network::new(stream_rng(spec.seed, STREAM_NETWORK));
    for name in [LINK_PMU_VO, spec.vo_cvo_link(), spec.cvo_app_link()] {
        net.add_link(links.link(name)?.clone())?;
    }

    let mut pmus = Vec::new();
    let mut pmu_node = Vec::new();
    let mut nodes = Vec::new();
    for (n, (&node, node_pmus)) in placement.assignments.iter().enumerate() {
        let mut members = Vec::new();
        let mut layouts = Vec::new();
        for descriptors in node_pmus {
            let idcode = u16::try_from(pmus.len() + 1)
                .map_err(|_| PipelineError::Setup("too many PMUs".into()))?;
            let mut pmu = EmulatedPmu::new(idcode, descriptors.clone(), spec.format)
                .with_channels(spec.channels_per_pmu, spec.frame.phasor_set())
                .with_noise(spec.noise);
            pmu.rate = rate;
            members.push(vo_id(idcode));
            layouts.push(pmu.layout());
            pmus.push(pmu);
            pmu_node.push(n);
        }
        let mut cfg = CvoConfig::new(cvo_id(node), 1000 + node as u16, members);
        cfg.placement = spec.mode;
        cfg.wait_timeout = links.pipeline.wait_timeout;
        cfg.thresholds = spec.thresholds.clone();
        nodes.push(Node {
            cvo: Cvo::new(cfg)?,
            layout: StreamLayout::concat(spec.format, &layouts),
        });
    }
    let vos = pmus
        .iter()
        .map(|p| VoResource::new(vo_id(p.idcode), p.idcode))
        .collect();
    let app = if spec.app_alignment {
        let members = placement.assignments.keys().map(|&n| cvo_id(n)).collect();
        let mut cfg = CvoConfig::new("APP", APP_IDCODE, members);
        cfg.placement = CvoPlacement::Remote;
        cfg.wait_timeout = links.pipeline.wait_timeout;
        Some(Cvo::new(cfg)?)
    } else {
        None
    };
    let mut broker = Broker::new();
    broker.subscribe(
        "APP",
        "REGION_1/#".parse::<TopicFilter>().expect("valid filter"),
    );

    let mut sim = Sim {
        spec,
        grid,
        scenario,
        processing: SimTime::from_secs(links.pipeline.cvo_processing),
        epoch: scenario.epoch_timestamp(),
        rate,
        pmus,
        pmu_node,
        vos,
        nodes,
        app,
        net,
        noise_rng: stream_rng(spec.seed, STREAM_NOISE),
        queue: EventQueue::new(),
        broker,
        report_deliveries: Vec::new(),
        sets: BTreeMap::new(),
        app_sets: Vec::new(),
        app_partial: 0,
        actions: Vec::new(),
        audit: Vec::new(),
    };
    if spec.periods > 0 {
        sim.queue.schedule(SimTime::ZERO, Event::Sample(0));
    }
    while let Some((now, ev)) = sim.queue.pop() {
        sim.handle(now, ev)?;
    }
    sim.finish(placement)
}

impl Sim<'_> {
    fn handle(&mut self, now: SimTime, ev: Event) -> Result<(), PipelineError> {
        match ev {
            Event::Sample(k) => self.sample(now, k),
            Event::AtVo { pmu, msg } => self.at_vo(now, pmu, msg),
            Event::AtCvo { cvo, pmu, msg } => self.at_cvo(now, cvo, pmu, msg),
            Event::CvoTimeout { cvo } => {
                for set in self.nodes[cvo].cvo.poll_timeouts(now) {
                    self.node_set(now, cvo, set)?;
                }
                Ok(())
            }
            Event::AtApp { cvo, msg } => self.at_app(now, cvo, msg),
            Event::AppTimeout => {
                if let Some(app) = self.app.as_mut() {
                    self.app_partial += app.poll_timeouts(now).len() as u64;
                }
                Ok(())
            }
        }
    }

    fn receive(&self, msg: Message, layout: &StreamLayout) -> Result<DataFrame, PipelineError> {
        Ok(match self.spec.fidelity {
            Fidelity::Exact => msg.frame,
            Fidelity::Wire => codec::decode_data_frame(&msg.bytes, layout)?,
        })
    }

    fn send(
        &mut self,
        link: &str,
        at: SimTime,
        msg: Message,
    ) -> Result<Option<(SimTime, Message)>, PipelineError> {
        Ok(match self.net.send(link, at, msg.bytes.len())? {
            SendOutcome::Delivered(t) => Some((t, msg)),
            SendOutcome::Dropped => None,
        })
    }

    fn sample(&mut self, now: SimTime, k: u64) -> Result<(), PipelineError> {
        let ts = self.rate.instant(self.epoch, k);
        for i in 0..self.pmus.len() {
            let pmu = &self.pmus[i];
            let Some(frame) =
                pmu.sample_frame(ts, self.grid, self.scenario, &mut self.noise_rng)?
            else {
                continue;
            };
            let bytes = codec::encode_data_frame(&frame, &pmu.layout())?;
            if let Some((t, msg)) = self.send(LINK_PMU_VO, now, Message { frame, bytes })? {
                self.queue.schedule(t, Event::AtVo { pmu: i, msg });
            }
        }
        if k + 1 < self.spec.periods {
            let next = self.rate.instant(self.epoch, k + 1);
            self.queue.schedule(
                SimTime::of_timestamp(next, self.epoch),
                Event::Sample(k + 1),
            );
        }
        Ok(())
    }

    fn at_vo(&mut self, now: SimTime, pmu: usize, msg: Message) -> Result<(), PipelineError> {
        let layout = self.pmus[pmu].layout();
        let frame = self.receive(msg.clone(), &layout)?;
        self.vos[pmu].ingest(frame)?;
        let link = self.spec.vo_cvo_link();
        if let Some((t, msg)) = self.send(link, now, msg)? {
            let cvo = self.pmu_node[pmu];
            self.queue.schedule(t, Event::AtCvo { cvo, pmu, msg });
        }
        Ok(())
    }

    fn at_cvo(
        &mut self,
        now: SimTime,
        cvo: usize,
        pmu: usize,
        msg: Message,
    ) -> Result<(), PipelineError> {
        let frame = self.receive(msg, &self.pmus[pmu].layout())?;
        let source = vo_id(self.pmus[pmu].idcode);
        let node = &mut self.nodes[cvo].cvo;
        let ts = frame.timestamp;
        let first = node.deadline(ts).is_none();
        match node.ingest(now, &source, ts, Contribution::Blocks(frame.blocks)) {
            Ok(Some(set)) => self.node_set(now, cvo, set),
            Ok(None) => {
                if first {
                    if let Some(d) = node.deadline(ts) {
                        self.queue.schedule(d, Event::CvoTimeout { cvo });
                    }
                }
                Ok(())
            }
            Err(e @ (CvoError::Late { .. } | CvoError::UnknownSource { .. })) => {
                self.audit.push(e.to_string());
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn node_set(&mut self, now: SimTime, cvo: usize, set: AlignedSet) -> Result<(), PipelineError> {
        let node = &self.nodes[cvo];
        let counts = self.sets.entry(node.cvo.id().to_string()).or_default();
        for action in node.cvo.check_thresholds(&set) {
            let doc = action.advertisement.to_document();
            self.actions
                .extend(self.broker.publish(&action.topic, doc.as_bytes()));
        }
        if !set.complete {
            counts.partial += 1;
            self.audit.push(format!(
                "{}: partial set at {} without {}",
                node.cvo.id(),
                set.timestamp,
                set.absent.join(",")
            ));
            return Ok(());
        }
        counts.complete += 1;
        let frame = node.cvo.compose_aggregate_frame(&set)?;
        let bytes = codec::encode_data_frame(&frame, &node.layout)?;
        let link = self.spec.cvo_app_link();
        if let Some((t, msg)) = self.send(link, now + self.processing, Message { frame, bytes })? {
            self.queue.schedule(t, Event::AtApp { cvo, msg });
        }
        Ok(())
    }

    fn at_app(&mut self, now: SimTime, cvo: usize, msg: Message) -> Result<(), PipelineError> {
        let frame = self.receive(msg, &self.nodes[cvo].layout)?;
        let id = self.nodes[cvo].cvo.id().to_string();
        self.report_deliveries.push(AppDelivery {
            cvo: id.clone(),
            record: LatencyRecord::new(frame.timestamp, self.epoch, now),
        });
        let Some(app) = self.app.as_mut() else {
            return Ok(());
        };
        let ts = frame.timestamp;
        let first = app.deadline(ts).is_none();
        match app.ingest(now, &id, ts, Contribution::Blocks(frame.blocks)) {
            Ok(Some(set)) => {
                let frame = crate::cvo::compose_aggregate_frame(&set, APP_IDCODE)?;
                self.app_sets.push(AppSet {
                    timestamp: ts,
                    received_at: now,
                    frame,
                });
            }
            Ok(None) => {
                if first {
                    if let Some(d) = app.deadline(ts) {
                        self.queue.schedule(d, Event::AppTimeout);
                    }
                }
            }
            Err(e) => self.audit.push(e.to_string()),
        }
        Ok(())
    }

    fn finish(self, placement: PmuPlacement) -> Result<PipelineReport, PipelineError> {
        let mut links = BTreeMap::new();
        for name in [
            LINK_PMU_VO,
            self.spec.vo_cvo_link(),
            self.spec.cvo_app_link(),
        ] {
            if let Some(s) = self.net.stats(name) {
                links.insert(name.to_string(), s.clone());
            }
        }
        let mut audit = self.audit;
        for n in &self.nodes {
            audit.extend(n.cvo.audit.entries().iter().cloned());
        }
        Ok(PipelineReport {
            pmu_descriptors: self.pmus.iter().map(|p| p.descriptors.clone()).collect(),
            phasors_per_channel: self.spec.frame.phasor_set().per_channel(),
            placement,
            epoch: self.epoch,
            deliveries: self.report_deliveries,
            sets: self.sets,
            app_sets: self.app_sets,
            app_partial: self.app_partial,
            links,
            actions: self.actions,
            audit,
            vo_buffered: self.vos.iter().map(VoResource::len).collect(),
        })
    }
}
