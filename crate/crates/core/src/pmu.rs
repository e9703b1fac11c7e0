//! Measurement-level PMU emulator driven by a pre-stored operating point.

use std::collections::BTreeMap;

use num_complex::{Complex, Complex64};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::audit::AuditLog;
use crate::codec::{
    BlockLayout, Command, CommandFrame, DataFrame, Format, Phasor, PmuBlock, StreamLayout,
    Timestamp, TIME_BASE,
};
use crate::grid::{branch_admittance, BusId, Descriptor, GridError, GridModel};
use crate::scalar::Scalar;

pub const NOMINAL_FREQ_HZ: f64 = 50.0;
/// Nominal magnitude used to scale voltage channels in fixed16 frames, per-unit.
pub const VOLTAGE_NOMINAL: f64 = 1.0;
/// Nominal magnitude used to scale current channels in fixed16 frames, per-unit.
pub const CURRENT_NOMINAL: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum PmuError {
    #[error("scenario line {line}: {reason}")]
    Scenario { line: usize, reason: String },
    #[error("no voltage for bus {0} in scenario")]
    MissingVoltage(BusId),
    #[error("descriptor {0} references unknown branch")]
    UnknownBranch(Descriptor),
    #[error("unsupported reporting rate {0} fps")]
    UnsupportedRate(u32),
    #[error("timestamp {ts} is not on the {rate} fps reporting grid")]
    Unaligned { ts: Timestamp, rate: u32 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqPoint {
    /// Seconds after the scenario epoch.
    pub t: f64,
    pub dev_mhz: f64,
    pub rocof: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// SOC of the first reporting instant; freq profile times are relative to it.
    pub epoch: u32,
    pub bus_voltages: BTreeMap<BusId, Complex64>,
    pub nominal_freq: f64,
    pub freq_profile: Vec<FreqPoint>,
}

impl Scenario {
    pub fn new(bus_voltages: BTreeMap<BusId, Complex64>) -> Self {
        Self {
            epoch: 0,
            bus_voltages,
            nominal_freq: NOMINAL_FREQ_HZ,
            freq_profile: Vec::new(),
        }
    }

    /// Piecewise-constant frequency deviation and ROCOF at `t`, (0, 0) before the first point.
    pub fn freq_at(&self, t: Timestamp) -> (f64, f64) {
        let elapsed = t.as_secs_f64() - f64::from(self.epoch);
        self.freq_profile
            .iter()
            .take_while(|p| p.t <= elapsed)
            .last()
            .map_or((0.0, 0.0), |p| (p.dev_mhz, p.rocof))
    }

    pub fn voltage(&self, bus: BusId) -> Result<Complex64, PmuError> {
        self.bus_voltages
            .get(&bus)
            .copied()
            .ok_or(PmuError::MissingVoltage(bus))
    }

    pub fn epoch_timestamp(&self) -> Timestamp {
        Timestamp {
            soc: self.epoch,
            fracsec: 0,
        }
    }
}

/// Reads a scenario file.
///
/// Lines are `bus,v_re,v_im`, `freq,t,dev_mhz,rocof` or `epoch,soc`; blank lines
/// and lines starting with `#` are skipped.
pub fn parse_scenario(text: &str) -> Result<Scenario, PmuError> {
    let mut s = Scenario::new(BTreeMap::new());
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| PmuError::Scenario {
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64, PmuError> {
            fields
                .get(i)
                .ok_or_else(|| err(format!("missing field {}", i + 1)))?
                .parse::<f64>()
                .map_err(|_| err(format!("bad number {:?}", fields[i])))
        };
        match fields[0] {
            "freq" => {
                if fields.len() != 4 {
                    return Err(err("freq record needs t,dev_mhz,rocof".into()));
                }
                s.freq_profile.push(FreqPoint {
                    t: num(1)?,
                    dev_mhz: num(2)?,
                    rocof: num(3)?,
                });
            }
            "epoch" => {
                s.epoch = fields
                    .get(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("epoch needs an integer SOC".into()))?;
            }
            id => {
                let bus: BusId = id.parse().map_err(|_| err(format!("bad bus id {id:?}")))?;
                if fields.len() != 3 {
                    return Err(err("bus record needs bus,v_re,v_im".into()));
                }
                let v = Complex64::new(num(1)?, num(2)?);
                if !(v.norm() > 0.5 && v.norm() < 1.5) {
                    return Err(err(format!("|V| = {} outside (0.5, 1.5) pu", v.norm())));
                }
                if s.bus_voltages.insert(bus, v).is_some() {
                    return Err(err(format!("duplicate bus {bus}")));
                }
            }
        }
    }
    s.freq_profile.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(s)
}

/// Noise-free value of one measured quantity.
pub fn true_measurement<T: Scalar>(
    g: &GridModel,
    s: &Scenario,
    d: &Descriptor,
) -> Result<Complex<T>, PmuError> {
    let cast = |v: Complex64| Complex::new(T::of(v.re), T::of(v.im));
    match *d {
        Descriptor::Voltage { bus } => Ok(cast(s.voltage(bus)?)),
        Descriptor::Current { branch, at } => {
            let br = g.branches.get(branch).ok_or(PmuError::UnknownBranch(*d))?;
            if !br.touches(at) {
                return Err(PmuError::UnknownBranch(*d));
            }
            let y = branch_admittance::<T>(br)?;
            let vf = cast(s.voltage(br.from)?);
            let vt = cast(s.voltage(br.to)?);
            Ok(if at == br.from {
                y.current_at_from(vf, vt)
            } else {
                y.current_at_to(vf, vt)
            })
        }
    }
}

/// Reporting rates available at 50 Hz nominal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReportingRate(u32);

impl ReportingRate {
    pub const SUPPORTED: [u32; 3] = [10, 25, 50];

    pub fn new(fps: u32) -> Result<Self, PmuError> {
        if Self::SUPPORTED.contains(&fps) {
            Ok(Self(fps))
        } else {
            Err(PmuError::UnsupportedRate(fps))
        }
    }

    pub fn fps(self) -> u32 {
        self.0
    }

    /// FRACSEC ticks between consecutive frames.
    pub fn step_ticks(self) -> u32 {
        TIME_BASE / self.0
    }

    pub fn is_aligned(self, t: Timestamp) -> bool {
        t.fracsec.is_multiple_of(self.step_ticks())
    }

    /// The `k`-th reporting instant at or after `start` (itself aligned to a second).
    pub fn instant(self, start: Timestamp, k: u64) -> Timestamp {
        Timestamp::from_micros(start.as_micros() + k * u64::from(self.step_ticks()))
    }
}

impl Default for ReportingRate {
    fn default() -> Self {
        Self(50)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    /// Per rectangular component, relative to the true phasor magnitude.
    pub phasor_rel: f64,
    pub freq_mhz: f64,
    pub rocof: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.phasor_rel == 0.0 && self.freq_mhz == 0.0 && self.rocof == 0.0
    }
}

/// Phasors reported per measured quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhasorSet {
    /// One phasor (positive sequence).
    #[default]
    Single,
    /// Phases a, b, c.
    ThreePhase,
    /// Phases a, b, c followed by positive, negative and zero sequence.
    ThreePhaseSequences,
}

impl PhasorSet {
    pub fn per_channel(self) -> usize {
        match self {
            PhasorSet::Single => 1,
            PhasorSet::ThreePhase => 3,
            PhasorSet::ThreePhaseSequences => 6,
        }
    }

    /// Balanced expansion of a positive-sequence phasor.
    pub fn expand(self, v: Complex64) -> Vec<Complex64> {
        let a = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0);
        let zero = Complex64::new(0.0, 0.0);
        match self {
            PhasorSet::Single => vec![v],
            PhasorSet::ThreePhase => vec![v, v * a * a, v * a],
            PhasorSet::ThreePhaseSequences => vec![v, v * a * a, v * a, v, zero, zero],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandOutcome {
    Applied,
    Ignored,
}

#[derive(Debug, Clone)]
pub struct EmulatedPmu {
    pub idcode: u16,
    pub descriptors: Vec<Descriptor>,
    pub rate: ReportingRate,
    pub streaming: bool,
    pub noise: NoiseConfig,
    pub format: Format,
    pub phasor_set: PhasorSet,
    /// Channel slots in the frame; slots beyond `descriptors` report zero.
    pub slots: usize,
    pub audit: AuditLog,
}

impl EmulatedPmu {
    pub fn new(idcode: u16, descriptors: Vec<Descriptor>, format: Format) -> Self {
        Self {
            idcode,
            rate: ReportingRate::default(),
            streaming: true,
            noise: NoiseConfig::default(),
            format,
            phasor_set: PhasorSet::Single,
            slots: descriptors.len(),
            audit: AuditLog::default(),
            descriptors,
        }
    }

    /// Fixed channel count with `set` phasors per channel. Fewer slots than
    /// descriptors is clamped up.
    pub fn with_channels(mut self, slots: usize, set: PhasorSet) -> Self {
        self.slots = slots.max(self.descriptors.len());
        self.phasor_set = set;
        self
    }

    pub fn phasors_per_frame(&self) -> usize {
        self.slots * self.phasor_set.per_channel()
    }

    /// Index of the first (positive-sequence or phase a) phasor of descriptor `k`.
    pub fn phasor_index(&self, k: usize) -> usize {
        k * self.phasor_set.per_channel()
    }

    pub fn with_noise(mut self, noise: NoiseConfig) -> Self {
        self.noise = noise;
        self
    }

    /// The stream description a receiver needs to decode this PMU's frames.
    pub fn layout(&self) -> StreamLayout {
        let per = self.phasor_set.per_channel();
        let nominal = (0..self.slots)
            .flat_map(|k| {
                let n = match self.descriptors.get(k) {
                    Some(Descriptor::Current { .. }) => CURRENT_NOMINAL,
                    _ => VOLTAGE_NOMINAL,
                };
                std::iter::repeat_n(n, per)
            })
            .collect();
        StreamLayout::new(self.format, vec![BlockLayout { nominal }])
    }

    pub fn sample_frame<R: Rng + ?Sized>(
        &self,
        t: Timestamp,
        g: &GridModel,
        s: &Scenario,
        rng: &mut R,
    ) -> Result<Option<DataFrame>, PmuError> {
        if !self.rate.is_aligned(t) {
            return Err(PmuError::Unaligned {
                ts: t,
                rate: self.rate.fps(),
            });
        }
        if !self.streaming {
            return Ok(None);
        }
        let mut phasors = Vec::with_capacity(self.phasors_per_frame());
        for d in &self.descriptors {
            let v: Complex64 = true_measurement(g, s, d)?;
            for p in self.phasor_set.expand(v) {
                let sigma = self.noise.phasor_rel * p.norm();
                phasors.push(Phasor::new(
                    p.re + gaussian(rng, sigma),
                    p.im + gaussian(rng, sigma),
                ));
            }
        }
        phasors.resize(self.phasors_per_frame(), Phasor::new(0.0, 0.0));
        let (dev, rocof) = s.freq_at(t);
        Ok(Some(DataFrame {
            idcode: self.idcode,
            timestamp: t,
            blocks: vec![PmuBlock {
                stat: 0,
                phasors,
                freq_dev: dev + gaussian(rng, self.noise.freq_mhz),
                rocof: rocof + gaussian(rng, self.noise.rocof),
            }],
        }))
    }

    pub fn handle_command(&mut self, c: &CommandFrame) -> CommandOutcome {
        if c.idcode != self.idcode {
            self.audit.record(format!(
                "pmu {}: ignored {:?} addressed to idcode {}",
                self.idcode, c.command, c.idcode
            ));
            return CommandOutcome::Ignored;
        }
        self.streaming = match c.command {
            Command::DataOn => true,
            Command::DataOff => false,
        };
        CommandOutcome::Applied
    }

    pub fn set_rate(&mut self, fps: u32) -> Result<(), PmuError> {
        self.rate = ReportingRate::new(fps)?;
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma)
            .expect("positive finite sigma")
            .sample(rng)
    } else {
        0.0
    }
}
