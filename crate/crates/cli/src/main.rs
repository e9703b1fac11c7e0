use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wams_core::broker::{topic_matches, TopicFilter, TopicName};
use wams_core::codec::Format;
use wams_core::cvo::CvoPlacement;
use wams_core::data;
use wams_core::experiment::{
    bandwidth_csv, bandwidth_row, bandwidth_table, bandwidth_text, latency_campaign, se_campaign,
    BANDWIDTH_PMUS,
};
use wams_core::grid::{parse_cdf, BusId, GridModel};
use wams_core::netsim::LinkConfig;
use wams_core::pipeline::{Fidelity, FrameConfig, PipelineSpec};
use wams_core::pmu::{parse_scenario, NoiseConfig, Scenario};

/// Virtualized PMU wide-area measurement simulator.
#[derive(Parser)]
#[command(name = "wams", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bandwidth of local versus remote composition for each frame configuration.
    Bandwidth(BandwidthArgs),
    /// End-to-end latency campaign through the simulated pipeline.
    Latency(LatencyArgs),
    /// State estimation over measurements delivered by the pipeline.
    Se(SeArgs),
    /// Check a topic name against a subscription filter.
    Topics { filter: String, name: String },
    /// Write the grid model as buses.csv and branches.csv.
    DumpGrid {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    A,
    B,
}

impl From<ConfigArg> for FrameConfig {
    fn from(c: ConfigArg) -> Self {
        match c {
            ConfigArg::A => FrameConfig::A,
            ConfigArg::B => FrameConfig::B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Fixed,
    Float,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Fixed => Format::Fixed16,
            FormatArg::Float => Format::Float32,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Local,
    Remote,
}

impl From<ModeArg> for CvoPlacement {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Local => CvoPlacement::Local,
            ModeArg::Remote => CvoPlacement::Remote,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WireArg {
    /// Decode the encoded frames at every hop.
    Wire,
    /// Pass in-memory values; bytes are still accounted.
    Exact,
}

#[derive(Args)]
struct BandwidthArgs {
    /// Only this frame configuration.
    #[arg(long, value_enum)]
    config: Option<ConfigArg>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Per-message header bytes.
    #[arg(long, default_value_t = 210)]
    overhead: u64,
    #[arg(long, default_value_t = 50)]
    rate: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    links: Option<PathBuf>,
    /// Comma separated monitored buses.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long, value_enum, default_value = "a")]
    config: ConfigArg,
    #[arg(long, value_enum, default_value = "float")]
    format: FormatArg,
    #[arg(long, value_enum, default_value = "local")]
    mode: ModeArg,
    #[arg(long, default_value_t = 2500)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    rate: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Phasor noise, relative to magnitude, per rectangular component.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value = "exact")]
    wire: WireArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bandwidth(a) => cmd_bandwidth(&a),
        Command::Latency(a) => cmd_latency(&a),
        Command::Se(a) => cmd_se(&a),
        Command::Topics { filter, name } => return cmd_topics(&filter, &name),
        Command::DumpGrid { grid, out } => cmd_dump_grid(grid.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_or(path: Option<&Path>, shipped: &str) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(shipped.to_string()),
    }
}

fn load_grid(path: Option<&Path>) -> Result<GridModel> {
    Ok(parse_cdf(&read_or(path, data::IEEE14_CDF)?)?)
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    Ok(parse_scenario(&read_or(path, data::IEEE14_SCENARIO)?)?)
}

fn load_links(path: Option<&Path>) -> Result<LinkConfig> {
    Ok(LinkConfig::parse(&read_or(path, data::LINKS_TOML)?)?)
}

fn parse_placement(s: &str) -> Result<BTreeSet<BusId>> {
    let nodes: BTreeSet<BusId> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().with_context(|| format!("bad bus id {p:?}")))
        .collect::<Result<_>>()?;
    if nodes.is_empty() {
        bail!("empty placement");
    }
    Ok(nodes)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn spec_from(run: &RunArgs, default_nodes: &str) -> Result<PipelineSpec> {
    if run.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let nodes = parse_placement(run.placement.as_deref().unwrap_or(default_nodes))?;
    let mut spec = PipelineSpec::new(nodes);
    spec.frame = run.config.into();
    spec.format = run.format.into();
    spec.mode = run.mode.into();
    spec.periods = run.trials;
    spec.seed = run.seed;
    spec.rate = run.rate;
    Ok(spec)
}

fn cmd_bandwidth(a: &BandwidthArgs) -> Result<()> {
    let mut rows = bandwidth_table(a.overhead, a.rate);
    if a.config.is_some() || a.format.is_some() {
        rows = [FrameConfig::A, FrameConfig::B]
            .into_iter()
            .filter(|c| a.config.is_none_or(|x| FrameConfig::from(x) == *c))
            .flat_map(|c| {
                [Format::Fixed16, Format::Float32]
                    .into_iter()
                    .filter(|f| a.format.is_none_or(|x| Format::from(x) == *f))
                    .map(move |f| bandwidth_row(c, f, a.overhead, a.rate, BANDWIDTH_PMUS))
            })
            .collect();
    }
    print!("{}", bandwidth_text(&rows));
    if let Some(dir) = &a.out {
        write_out(dir, "bandwidth.csv", &bandwidth_csv(&rows))?;
    }
    Ok(())
}

fn cmd_latency(a: &LatencyArgs) -> Result<()> {
    let r = &a.run;
    let spec = spec_from(r, "2")?;
    let grid = load_grid(r.grid.as_deref())?;
    let scenario = load_scenario(r.scenario.as_deref())?;
    let links = load_links(r.links.as_deref())?;
    let rep = latency_campaign(&grid, &scenario, &links, &spec)?;
    print!("{}", rep.summary_csv());
    if rep.sets.partial > 0 {
        eprintln!(
            "warning: {} partial sets dropped at the CVO",
            rep.sets.partial
        );
    }
    if let Some(dir) = &r.out {
        let mode = spec.mode;
        write_out(dir, &format!("latency_{mode}.csv"), &rep.latency_csv())?;
        write_out(dir, &format!("cdf_{mode}.csv"), &rep.cdf_csv())?;
        write_out(dir, &format!("summary_{mode}.csv"), &rep.summary_csv())?;
    }
    Ok(())
}

fn cmd_se(a: &SeArgs) -> Result<()> {
    let r = &a.run;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        bail!("--noise must be a finite non-negative number");
    }
    let mut spec = spec_from(r, "2,6,7,9")?;
    spec.noise = NoiseConfig {
        phasor_rel: a.noise,
        ..NoiseConfig::default()
    };
    spec.fidelity = match a.wire {
        WireArg::Wire => Fidelity::Wire,
        WireArg::Exact => Fidelity::Exact,
    };
    let grid = load_grid(r.grid.as_deref())?;
    let scenario = load_scenario(r.scenario.as_deref())?;
    let links = load_links(r.links.as_deref())?;
    let rep = se_campaign(&grid, &scenario, &links, &spec)?;
    print!("{}", rep.summary_text());
    if let Some(dir) = &r.out {
        write_out(dir, "estimate.csv", &rep.estimate.to_csv())?;
        write_out(dir, "timing.csv", &rep.timing_csv())?;
    }
    Ok(())
}

fn cmd_topics(filter: &str, name: &str) -> ExitCode {
    let filter: TopicFilter = match filter.parse() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: invalid filter: {e}");
            return ExitCode::from(2);
        }
    };
    let name: TopicName = match name.parse() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: invalid topic name: {e}");
            return ExitCode::from(2);
        }
    };
    let hit = topic_matches(&filter, &name);
    println!("{hit}");
    if hit {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_dump_grid(grid: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let g = load_grid(grid)?;
    match out {
        Some(dir) => {
            write_out(dir, "buses.csv", &g.buses_csv())?;
            write_out(dir, "branches.csv", &g.branches_csv())?;
        }
        None => print!("{}\n{}", g.buses_csv(), g.branches_csv()),
    }
    Ok(())
}
