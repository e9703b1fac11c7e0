//! Campaigns behind the command line: bandwidth table, latency and state estimation.

use std::fmt::Write as _;
use std::time::Duration;

use num_complex::Complex64;
use thiserror::Error;

use crate::codec::{data_frame_size, Format};
use crate::cvo::CvoPlacement;
use crate::estimator::{
    build_measurement_matrix, observability_rank, timed_estimate, timing_stats, EstimatorError,
    StateVector,
};
use crate::grid::{build_placement, GridError, GridModel};
use crate::netsim::{
    bandwidth_saving, dependability, latency_cdf, stream_bandwidth, EmpiricalCdf, LatencyRecord,
    LinkConfig, LinkStats, NetError,
};
use crate::pipeline::{run_pipeline, FrameConfig, PipelineError, PipelineSpec, SetCounts};
use crate::pmu::Scenario;

/// HTTP plus TCP/IP header allowance per message, bytes.
pub const HTTP_OVERHEAD: u64 = 210;
/// TCP/IP header only, bytes.
pub const TCPIP_OVERHEAD: u64 = 40;
/// PMUs at the node used for the bandwidth comparison.
pub const BANDWIDTH_PMUS: u64 = 3;
/// Channels per PMU in the bandwidth comparison.
pub const BANDWIDTH_CHANNELS: usize = 2;
pub const DEPENDABILITY_MS: [f64; 3] = [50.0, 100.0, 500.0];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("placement {nodes:?} is unobservable: rank {rank} of {states} states")]
    Unobservable {
        nodes: Vec<u32>,
        rank: usize,
        states: usize,
    },
    #[error("no complete measurement sets reached the application")]
    NoSets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthRow {
    pub config: FrameConfig,
    pub format: Format,
    pub local_frame: usize,
    pub remote_frame: usize,
    pub local_bps: u64,
    pub remote_bps: u64,
    pub saving_pct: f64,
}

/// Local: one aggregate stream of all PMU blocks. Remote: one stream per PMU.
pub fn bandwidth_row(
    config: FrameConfig,
    format: Format,
    overhead: u64,
    rate: u64,
    pmus: u64,
) -> BandwidthRow {
    let phasors = config.phasors_per_pmu(BANDWIDTH_CHANNELS);
    let local_frame = data_frame_size(pmus as usize, phasors, format);
    let remote_frame = data_frame_size(1, phasors, format);
    let local_bps = stream_bandwidth(local_frame as u64, rate, overhead, 1);
    let remote_bps = stream_bandwidth(remote_frame as u64, rate, overhead, pmus);
    BandwidthRow {
        config,
        format,
        local_frame,
        remote_frame,
        local_bps,
        remote_bps,
        saving_pct: bandwidth_saving(local_bps as f64, remote_bps as f64),
    }
}

/// Rows in the order A-fixed, A-float, B-fixed, B-float.
pub fn bandwidth_table(overhead: u64, rate: u64) -> Vec<BandwidthRow> {
    let mut rows = Vec::new();
    for config in [FrameConfig::A, FrameConfig::B] {
        for format in [Format::Fixed16, Format::Float32] {
            rows.push(bandwidth_row(
                config,
                format,
                overhead,
                rate,
                BANDWIDTH_PMUS,
            ));
        }
    }
    rows
}

pub fn bandwidth_csv(rows: &[BandwidthRow]) -> String {
    let mut s = String::from("config,format,placement,frame_bytes,bps,saving_pct\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},local,{},{},{:.1}",
            r.config, r.format, r.local_frame, r.local_bps, r.saving_pct
        );
        let _ = writeln!(
            s,
            "{},{},remote,{},{},{:.1}",
            r.config, r.format, r.remote_frame, r.remote_bps, r.saving_pct
        );
    }
    s
}

pub fn bandwidth_text(rows: &[BandwidthRow]) -> String {
    let mut s = format!(
        "{:<18}{:>14}{:>14}{:>12}\n",
        "frame config", "local [bps]", "remote [bps]", "saving [%]"
    );
    for r in rows {
        let label = format!("Config {} - {}", r.config, r.format);
        let _ = writeln!(
            s,
            "{label:<18}{:>14}{:>14}{:>12.1}",
            r.local_bps, r.remote_bps, r.saving_pct
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub mode: CvoPlacement,
    pub records: Vec<LatencyRecord>,
    pub cdf: EmpiricalCdf,
    /// (threshold ms, percentage) for each of [`DEPENDABILITY_MS`].
    pub dependability: Vec<(f64, f64)>,
    pub sets: SetCounts,
    pub links: std::collections::BTreeMap<String, LinkStats>,
}

impl LatencyReport {
    pub fn dependability_at(&self, ms: f64) -> Option<f64> {
        self.dependability
            .iter()
            .find(|(t, _)| *t == ms)
            .map(|(_, p)| *p)
    }

    pub fn latency_csv(&self) -> String {
        let mut s = String::from("soc,fracsec,latency_ms\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.6}",
                r.timestamp.soc,
                r.timestamp.fracsec,
                r.latency * 1e3
            );
        }
        s
    }

    pub fn cdf_csv(&self) -> String {
        let mut s = String::from("latency_ms,cum_fraction\n");
        for (v, p) in self.cdf.points() {
            let _ = writeln!(s, "{:.6},{:.6}", v * 1e3, p);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("mode,trials,min_ms,mean_ms,max_ms");
        for (t, _) in &self.dependability {
            let _ = write!(s, ",dep_{t}ms");
        }
        let _ = write!(
            s,
            "\n{},{},{:.3},{:.3},{:.3}",
            self.mode,
            self.records.len(),
            self.cdf.min * 1e3,
            self.cdf.mean * 1e3,
            self.cdf.max * 1e3
        );
        for (_, p) in &self.dependability {
            let _ = write!(s, ",{p:.1}");
        }
        s.push('\n');
        s
    }
}

/// One record per reporting instant that reached the application.
pub fn latency_campaign(
    grid: &GridModel,
    scenario: &Scenario,
    links: &LinkConfig,
    spec: &PipelineSpec,
) -> Result<LatencyReport, ExperimentError> {
    let run = run_pipeline(grid, scenario, links, spec)?;
    let records: Vec<LatencyRecord> = run.deliveries.iter().map(|d| d.record).collect();
    let cdf = latency_cdf(&records)?;
    let mut dep = Vec::new();
    for ms in DEPENDABILITY_MS {
        dep.push((ms, dependability(&records, ms / 1e3)?));
    }
    let sets = run
        .sets
        .values()
        .fold(SetCounts::default(), |a, c| SetCounts {
            complete: a.complete + c.complete,
            partial: a.partial + c.partial,
        });
    Ok(LatencyReport {
        mode: spec.mode,
        records,
        cdf,
        dependability: dep,
        sets,
        links: run.links,
    })
}

#[derive(Debug, Clone)]
pub struct SeReport {
    pub trials: usize,
    pub rank: usize,
    pub states: usize,
    /// Mean of the per-trial estimates.
    pub estimate: StateVector<f64>,
    pub truth: StateVector<f64>,
    /// Worst relative error of any single trial against the scenario.
    pub max_relative_error: f64,
    /// Mean of the weighted objective at the optimum.
    pub mean_objective: f64,
    /// Degrees of freedom of the objective: measurement rows minus states.
    pub dof: usize,
    pub mean_residual_norm: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl SeReport {
    pub fn timing_csv(&self) -> String {
        format!(
            "mean_ms,std_ms,trials\n{:.6},{:.6},{}\n",
            self.mean_ms, self.std_ms, self.trials
        )
    }

    pub fn summary_text(&self) -> String {
        format!(
            "trials {}\nrank {}/{}\nmax relative error {:.3e}\nmean residual norm {:.3e}\nmean objective {:.3} (dof {})\nsolve time {:.4} ms ± {:.4} ms\n",
            self.trials,
            self.rank,
            self.states,
            self.max_relative_error,
            self.mean_residual_norm,
            self.mean_objective,
            self.dof,
            self.mean_ms,
            self.std_ms
        )
    }
}

/// Runs the pipeline with application alignment and solves one estimate per
/// aligned instant. Weights come from the configured relative noise applied to
/// each measured magnitude; with zero noise all weights are one.
pub fn se_campaign(
    grid: &GridModel,
    scenario: &Scenario,
    links: &LinkConfig,
    spec: &PipelineSpec,
) -> Result<SeReport, ExperimentError> {
    let placement = build_placement(grid, &spec.nodes, spec.channels_per_pmu)?;
    let base = build_measurement_matrix::<f64>(grid, &placement)?;
    let obs = observability_rank(&base);
    if !obs.observable() {
        return Err(ExperimentError::Unobservable {
            nodes: spec.nodes.iter().copied().collect(),
            rank: obs.rank,
            states: obs.states,
        });
    }
    let mut spec = spec.clone();
    spec.app_alignment = true;
    let run = run_pipeline(grid, scenario, links, &spec)?;
    if run.app_sets.is_empty() {
        return Err(ExperimentError::NoSets);
    }
    let truth = StateVector::from_voltages(&scenario.bus_voltages);
    let per = run.phasors_per_channel;
    let mut sum = vec![0.0; base.states()];
    let mut max_err = 0.0f64;
    let mut objective = 0.0;
    let mut residual = 0.0;
    let mut times: Vec<Duration> = Vec::with_capacity(run.app_sets.len());
    for set in &run.app_sets {
        let mut phasors = Vec::with_capacity(base.rows.len() / 2);
        for (block, descriptors) in set.frame.blocks.iter().zip(&run.pmu_descriptors) {
            for k in 0..descriptors.len() {
                let p = block.phasors[k * per];
                phasors.push(Complex64::new(p.re, p.im));
            }
        }
        let mut model = base.clone();
        if spec.noise.phasor_rel > 0.0 {
            let sigmas: Vec<f64> = phasors
                .iter()
                .map(|p| (spec.noise.phasor_rel * p.norm()).max(f64::MIN_POSITIVE.sqrt()))
                .collect();
            model.set_sigmas(&sigmas)?;
        }
        let z = model.measurement_vector(&phasors)?;
        let (sol, elapsed) = timed_estimate(&model, &z)?;
        times.push(elapsed);
        max_err = max_err.max(sol.state.relative_error(&truth));
        objective += sol.objective(&model.weights);
        residual += sol.residual_norm();
        for (acc, v) in sum.iter_mut().zip(&sol.state.x) {
            *acc += v;
        }
    }
    let n = run.app_sets.len() as f64;
    let (mean_ms, std_ms) = timing_stats(&times);
    Ok(SeReport {
        trials: run.app_sets.len(),
        rank: obs.rank,
        states: obs.states,
        estimate: StateVector {
            buses: base.buses.clone(),
            x: sum.into_iter().map(|v| v / n).collect(),
        },
        truth,
        max_relative_error: max_err,
        mean_objective: objective / n,
        dof: base.rows.len() - base.states(),
        mean_residual_norm: residual / n,
        mean_ms,
        std_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::grid::parse_cdf;
    use crate::pipeline::Fidelity;
    use crate::pmu::{parse_scenario, NoiseConfig};

    fn setup() -> (GridModel, Scenario, LinkConfig) {
        (
            parse_cdf(data::IEEE14_CDF).unwrap(),
            parse_scenario(data::IEEE14_SCENARIO).unwrap(),
            LinkConfig::parse(data::LINKS_TOML).unwrap(),
        )
    }

    #[test]
    fn table_values() {
        let rows = bandwidth_table(HTTP_OVERHEAD, 50);
        let bps: Vec<(u64, u64)> = rows.iter().map(|r| (r.local_bps, r.remote_bps)).collect();
        assert_eq!(
            bps,
            vec![
                (126400, 307200),
                (160000, 340800),
                (155200, 336000),
                (217600, 398400)
            ]
        );
        let savings: Vec<f64> = rows.iter().map(|r| r.saving_pct).collect();
        assert_eq!(savings, vec![58.9, 53.1, 53.8, 45.4]);
        let lb = bandwidth_row(
            FrameConfig::A,
            Format::Float32,
            TCPIP_OVERHEAD,
            50,
            BANDWIDTH_PMUS,
        );
        assert_eq!(lb.saving_pct, 32.7);
        let one = bandwidth_row(FrameConfig::A, Format::Float32, 0, 50, 1);
        assert_eq!(one.saving_pct, 0.0);
        let csv = bandwidth_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.contains("A,fixed,local,106,126400,58.9\n"));
        assert!(bandwidth_text(&rows).contains("Config B - float"));
    }

    #[test]
    fn pipeline_bytes_match_table() {
        let (g, s, links) = setup();
        for (mode, link) in [
            (CvoPlacement::Local, "cvo_app_local"),
            (CvoPlacement::Remote, "vo_cvo_remote"),
        ] {
            for config in [FrameConfig::A, FrameConfig::B] {
                for format in [Format::Fixed16, Format::Float32] {
                    let mut spec = PipelineSpec::new([2]);
                    spec.mode = mode;
                    spec.frame = config;
                    spec.format = format;
                    spec.periods = 50;
                    let rep = latency_campaign(&g, &s, &links, &spec).unwrap();
                    let row = bandwidth_row(config, format, HTTP_OVERHEAD, 50, BANDWIDTH_PMUS);
                    let expect = match mode {
                        CvoPlacement::Local => row.local_bps,
                        CvoPlacement::Remote => row.remote_bps,
                    };
                    // 50 periods at 50 fps is one second of traffic.
                    assert_eq!(
                        rep.links[link].wire_bytes * 8,
                        expect,
                        "{mode} {config} {format}"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_links_give_degenerate_cdf() {
        let (g, s, links) = setup();
        let links = links.with_constant_delays(0.002);
        let mut spec = PipelineSpec::new([2]);
        spec.periods = 20;
        let rep = latency_campaign(&g, &s, &links, &spec).unwrap();
        assert_eq!(rep.records.len(), 20);
        assert_eq!(rep.cdf.min, rep.cdf.max);
        assert!((rep.cdf.min - 0.006).abs() < 1e-9);
        assert_eq!(
            rep.sets,
            SetCounts {
                complete: 20,
                partial: 0
            }
        );
        assert_eq!(rep.cdf_csv().lines().count(), 21);
        assert!(rep.summary_csv().starts_with(
            "mode,trials,min_ms,mean_ms,max_ms,dep_50ms,dep_100ms,dep_500ms\nlocal,20,6.000,"
        ));
    }

    #[test]
    fn se_noiseless_and_unobservable() {
        let (g, s, links) = setup();
        let mut spec = PipelineSpec::new(data::REFERENCE_NODES);
        spec.periods = 5;
        spec.fidelity = Fidelity::Exact;
        let rep = se_campaign(&g, &s, &links, &spec).unwrap();
        assert_eq!(rep.trials, 5);
        assert_eq!(rep.rank, 28);
        assert!(rep.max_relative_error < 1e-9);
        assert!(rep.timing_csv().starts_with("mean_ms,std_ms,trials\n"));

        let err = se_campaign(&g, &s, &links, &PipelineSpec::new([2])).unwrap_err();
        assert!(
            matches!(
                err,
                ExperimentError::Unobservable {
                    rank: 10,
                    states: 28,
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("rank 10 of 28"));
    }

    #[test]
    fn se_float_wire_close() {
        let (g, s, links) = setup();
        let mut spec = PipelineSpec::new(data::REFERENCE_NODES);
        spec.periods = 3;
        let rep = se_campaign(&g, &s, &links, &spec).unwrap();
        assert!(rep.max_relative_error < 1e-6, "{}", rep.max_relative_error);
    }

    #[test]
    fn se_noisy_objective_tracks_dof() {
        let (g, s, links) = setup();
        let mut spec = PipelineSpec::new(data::REFERENCE_NODES);
        spec.periods = 400;
        spec.fidelity = Fidelity::Exact;
        spec.seed = 11;
        spec.noise = NoiseConfig {
            phasor_rel: 1e-3,
            ..NoiseConfig::default()
        };
        let rep = se_campaign(&g, &s, &links.with_constant_delays(0.001), &spec).unwrap();
        assert_eq!(rep.dof, 10);
        assert!(
            (rep.mean_objective / rep.dof as f64 - 1.0).abs() < 0.2,
            "{}",
            rep.mean_objective
        );
        assert!(rep.estimate.relative_error(&rep.truth) < 1e-3);
    }
}
