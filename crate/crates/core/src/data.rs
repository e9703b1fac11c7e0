//! Data shipped with the crate: the IEEE 14-bus case, its operating point and the
//! calibrated transport configuration.

pub const IEEE14_CDF: &str = include_str!("../data/ieee14.cdf");
pub const IEEE14_SCENARIO: &str = include_str!("../data/scenario_ieee14.csv");
pub const LINKS_TOML: &str = include_str!("../data/links.toml");

/// Buses monitored in the reference deployment.
pub const REFERENCE_NODES: [u32; 4] = [2, 6, 7, 9];
/// Quantities one physical PMU measures in the reference deployment.
pub const REFERENCE_CHANNELS: usize = 2;
