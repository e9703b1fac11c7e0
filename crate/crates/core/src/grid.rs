//! Network model: buses, π-model branches, IEEE Common Data Format ingestion and
//! PMU placement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_complex::Complex;
use thiserror::Error;

use crate::scalar::Scalar;

pub type BusId = u32;

/// System base used by the archive data, MVA.
pub const SYSTEM_BASE_MVA: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("branch {from}-{to} references unknown bus {missing}")]
    DanglingBranch {
        from: BusId,
        to: BusId,
        missing: BusId,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("invalid branch {from}-{to}: {reason}")]
    InvalidBranch {
        from: BusId,
        to: BusId,
        reason: String,
    },
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("channels per PMU must be at least 1")]
    ZeroChannels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub name: String,
    /// Base voltage in kV. The archive writes 0.0 when unknown, read as `None`.
    pub base_kv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    pub b_total: f64,
    pub tap: f64,
}

impl Branch {
    pub fn new(from: BusId, to: BusId, r: f64, x: f64) -> Self {
        Self {
            from,
            to,
            r,
            x,
            b_total: 0.0,
            tap: 1.0,
        }
    }

    pub fn touches(&self, bus: BusId) -> bool {
        self.from == bus || self.to == bus
    }

    fn validate(&self) -> Result<(), GridError> {
        let invalid = |reason: &str| GridError::InvalidBranch {
            from: self.from,
            to: self.to,
            reason: reason.to_string(),
        };
        if self.from == self.to {
            return Err(invalid("self loop"));
        }
        if self.r == 0.0 && self.x == 0.0 {
            return Err(invalid("zero impedance"));
        }
        if self.tap.is_nan() || self.tap <= 0.0 {
            return Err(invalid("tap ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

impl GridModel {
    /// Builds a model, checking ids and branch endpoints.
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self, GridError> {
        let mut seen = BTreeSet::new();
        for bus in &buses {
            if !seen.insert(bus.id) {
                return Err(GridError::DuplicateBus(bus.id));
            }
        }
        for br in &branches {
            for end in [br.from, br.to] {
                if !seen.contains(&end) {
                    return Err(GridError::DanglingBranch {
                        from: br.from,
                        to: br.to,
                        missing: end,
                    });
                }
            }
            br.validate()?;
        }
        Ok(Self { buses, branches })
    }

    pub fn has_bus(&self, id: BusId) -> bool {
        self.buses.iter().any(|b| b.id == id)
    }

    /// Bus ids in ascending order; this is the state ordering used by the estimator.
    pub fn bus_ids(&self) -> Vec<BusId> {
        let mut ids: Vec<BusId> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Branches touching `node`, sorted by (from, to) then file order.
    pub fn incident_branches(&self, node: BusId) -> Result<Vec<(usize, &Branch)>, GridError> {
        if !self.has_bus(node) {
            return Err(GridError::UnknownBus(node));
        }
        let mut out: Vec<(usize, &Branch)> = self
            .branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.touches(node))
            .collect();
        out.sort_by_key(|(i, b)| (b.from, b.to, *i));
        Ok(out)
    }

    pub fn degree(&self, node: BusId) -> Result<usize, GridError> {
        self.incident_branches(node).map(|v| v.len())
    }

    pub fn is_connected(&self) -> bool {
        let Some(first) = self.buses.first() else {
            return true;
        };
        let mut reached = BTreeSet::from([first.id]);
        let mut frontier = vec![first.id];
        while let Some(n) = frontier.pop() {
            for br in self.branches.iter().filter(|b| b.touches(n)) {
                let other = if br.from == n { br.to } else { br.from };
                if reached.insert(other) {
                    frontier.push(other);
                }
            }
        }
        reached.len() == self.buses.len()
    }

    /// `buses.csv` with columns id,name,base_kv.
    pub fn buses_csv(&self) -> String {
        let mut s = String::from("id,name,base_kv\n");
        for b in &self.buses {
            let kv = b.base_kv.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", b.id, b.name, kv));
        }
        s
    }

    /// `branches.csv` with columns from,to,r,x,b,tap.
    pub fn branches_csv(&self) -> String {
        let mut s = String::from("from,to,r,x,b,tap\n");
        for b in &self.branches {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.from, b.to, b.r, b.x, b.b_total, b.tap
            ));
        }
        s
    }
}

/// Reads the bus and branch sections of an IEEE Common Data Format document.
///
/// Bus records are column based up to the name field (columns 1-4 id, 6-17 name),
/// the remaining fields are whitespace separated. Branch records carry no text and
/// are split on whitespace; the final turns ratio is field 15, with 0 meaning
/// "no transformer".
pub fn parse_cdf(text: &str) -> Result<GridModel, GridError> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Bus,
        Branch,
        Done,
    }
    let mut section = Section::Preamble;
    let mut saw_bus = false;
    let mut saw_branch = false;
    let mut buses = Vec::new();
    let mut branches = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        let err = |reason: String| GridError::Parse {
            line: lineno,
            reason,
        };
        match section {
            Section::Preamble | Section::Done => {
                if trimmed.starts_with("BUS DATA FOLLOWS") {
                    section = Section::Bus;
                    saw_bus = true;
                } else if trimmed.starts_with("BRANCH DATA FOLLOWS") {
                    if !saw_bus {
                        return Err(err("branch section before bus section".into()));
                    }
                    section = Section::Branch;
                    saw_branch = true;
                }
            }
            Section::Bus => {
                if trimmed.starts_with("-999") {
                    section = Section::Done;
                    continue;
                }
                if trimmed.is_empty() {
                    continue;
                }
                buses.push(parse_bus_record(line).map_err(err)?);
            }
            Section::Branch => {
                if trimmed.starts_with("-999") {
                    section = Section::Done;
                    continue;
                }
                if trimmed.is_empty() {
                    continue;
                }
                branches.push(parse_branch_record(trimmed).map_err(err)?);
            }
        }
    }
    let last = text.lines().count();
    if !saw_bus {
        return Err(GridError::Parse {
            line: last,
            reason: "missing bus section".into(),
        });
    }
    if !saw_branch {
        return Err(GridError::Parse {
            line: last,
            reason: "missing branch section".into(),
        });
    }
    if section == Section::Bus || section == Section::Branch {
        return Err(GridError::Parse {
            line: last,
            reason: "section not terminated by -999".into(),
        });
    }
    GridModel::new(buses, branches)
}

fn parse_bus_record(line: &str) -> Result<Bus, String> {
    let id_field = line.get(0..4).ok_or("bus record too short")?.trim();
    let id: BusId = id_field
        .parse()
        .map_err(|_| format!("bad bus number {id_field:?}"))?;
    let name = line.get(5..17).unwrap_or("").trim().to_string();
    let rest: Vec<&str> = line.get(17..).unwrap_or("").split_whitespace().collect();
    // area zone type V angle PL QL PG QG baseKV ...
    if rest.len() < 10 {
        return Err(format!("bus {id}: expected at least 10 numeric fields"));
    }
    let base_kv: f64 = rest[9]
        .parse()
        .map_err(|_| format!("bus {id}: bad base kV {:?}", rest[9]))?;
    if base_kv < 0.0 {
        return Err(format!("bus {id}: negative base kV"));
    }
    Ok(Bus {
        id,
        name,
        base_kv: (base_kv > 0.0).then_some(base_kv),
    })
}

fn parse_branch_record(line: &str) -> Result<Branch, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 15 {
        return Err(format!(
            "branch record has {} fields, expected at least 15",
            f.len()
        ));
    }
    let int = |i: usize| -> Result<BusId, String> {
        f[i].parse()
            .map_err(|_| format!("bad integer field {}: {:?}", i + 1, f[i]))
    };
    let num = |i: usize| -> Result<f64, String> {
        f[i].parse()
            .map_err(|_| format!("bad numeric field {}: {:?}", i + 1, f[i]))
    };
    let tap = num(14)?;
    Ok(Branch {
        from: int(0)?,
        to: int(1)?,
        r: num(6)?,
        x: num(7)?,
        b_total: num(8)?,
        tap: if tap == 0.0 { 1.0 } else { tap },
    })
}

/// π-equivalent of a branch: `I_from = series·(V_from − V_to) + shunt_from·V_from`
/// and symmetrically for the `to` end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance<T> {
    pub series: Complex<T>,
    pub shunt_from: Complex<T>,
    pub shunt_to: Complex<T>,
}

impl<T: Scalar> BranchAdmittance<T> {
    /// Current leaving `at` into the branch given both terminal voltages.
    pub fn current_at_from(&self, v_from: Complex<T>, v_to: Complex<T>) -> Complex<T> {
        self.series * (v_from - v_to) + self.shunt_from * v_from
    }

    pub fn current_at_to(&self, v_from: Complex<T>, v_to: Complex<T>) -> Complex<T> {
        self.series * (v_to - v_from) + self.shunt_to * v_to
    }
}

/// Standard π tap model with the off-nominal ratio on the `from` side.
///
/// With `ys = 1/(r + jx)`, `bc = j·b_total/2` and tap `t`:
/// `Yff = (ys + bc)/t²`, `Yft = Ytf = −ys/t`, `Ytt = ys + bc`.
pub fn branch_admittance<T: Scalar>(b: &Branch) -> Result<BranchAdmittance<T>, GridError> {
    if b.r == 0.0 && b.x == 0.0 {
        return Err(GridError::InvalidBranch {
            from: b.from,
            to: b.to,
            reason: "zero impedance".into(),
        });
    }
    let z = Complex::new(T::of(b.r), T::of(b.x));
    let ys = z.inv();
    let bc = Complex::new(T::zero(), T::of(b.b_total / 2.0));
    let t = T::of(b.tap);
    let series = ys / t;
    let yff = (ys + bc) / (t * t);
    let ytt = ys + bc;
    Ok(BranchAdmittance {
        series,
        shunt_from: yff - series,
        shunt_to: ytt - series,
    })
}

/// One measured quantity of a PMU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Descriptor {
    Voltage {
        bus: BusId,
    },
    /// Current into branch `branch` (index into `GridModel::branches`) leaving bus `at`.
    Current {
        branch: usize,
        at: BusId,
    },
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Descriptor::Voltage { bus } => write!(f, "V{bus}"),
            Descriptor::Current { branch, at } => write!(f, "I[{branch}]@{at}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmuPlacement {
    pub monitored_nodes: BTreeSet<BusId>,
    pub channels_per_pmu: usize,
    pub assignments: BTreeMap<BusId, Vec<Vec<Descriptor>>>,
}

impl PmuPlacement {
    pub fn pmu_count(&self) -> usize {
        self.assignments.values().map(Vec::len).sum()
    }

    /// All PMUs in node order, each with its node.
    pub fn pmus(&self) -> impl Iterator<Item = (BusId, &[Descriptor])> {
        self.assignments
            .iter()
            .flat_map(|(n, pmus)| pmus.iter().map(move |p| (*n, p.as_slice())))
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &Descriptor> {
        self.assignments.values().flatten().flatten()
    }
}

/// Voltage first, then every incident branch current, packed greedily.
pub fn build_placement(
    g: &GridModel,
    monitored: &BTreeSet<BusId>,
    channels_per_pmu: usize,
) -> Result<PmuPlacement, GridError> {
    if channels_per_pmu == 0 {
        return Err(GridError::ZeroChannels);
    }
    let mut assignments = BTreeMap::new();
    for &node in monitored {
        let mut descriptors = vec![Descriptor::Voltage { bus: node }];
        descriptors.extend(
            g.incident_branches(node)?
                .into_iter()
                .map(|(branch, _)| Descriptor::Current { branch, at: node }),
        );
        let pmus = descriptors
            .chunks(channels_per_pmu)
            .map(<[Descriptor]>::to_vec)
            .collect();
        assignments.insert(node, pmus);
    }
    Ok(PmuPlacement {
        monitored_nodes: monitored.clone(),
        channels_per_pmu,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    fn ieee14() -> GridModel {
        parse_cdf(data::IEEE14_CDF).unwrap()
    }

    fn pair(g: &GridModel, node: BusId) -> Vec<(BusId, BusId)> {
        g.incident_branches(node)
            .unwrap()
            .iter()
            .map(|(_, b)| (b.from, b.to))
            .collect()
    }

    #[test]
    fn ieee14_counts() {
        let g = ieee14();
        assert_eq!(g.buses.len(), 14);
        assert_eq!(g.branches.len(), 20);
        assert!(g.is_connected());
        assert_eq!(g.buses[0].name, "Bus 1     HV");
        assert_eq!(g.buses[0].base_kv, None);
        let t47 = g
            .branches
            .iter()
            .find(|b| (b.from, b.to) == (4, 7))
            .unwrap();
        assert_eq!(t47.tap, 0.978);
        assert_eq!(g.branches[0].tap, 1.0);
    }

    #[test]
    fn parse_is_idempotent() {
        assert_eq!(ieee14(), ieee14());
    }

    #[test]
    fn missing_branch_section() {
        let text: String = data::IEEE14_CDF
            .lines()
            .take_while(|l| !l.starts_with("BRANCH"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = parse_cdf(&text).unwrap_err();
        assert!(matches!(err, GridError::Parse { ref reason, .. } if reason.contains("branch")));
    }

    #[test]
    fn dangling_branch() {
        let text = data::IEEE14_CDF.replacen("   2    3  1 1", "   2   99  1 1", 1);
        assert_eq!(
            parse_cdf(&text).unwrap_err(),
            GridError::DanglingBranch {
                from: 2,
                to: 99,
                missing: 99
            }
        );
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = data::IEEE14_CDF.replacen("0.05917", "0.0x917", 1);
        match parse_cdf(&text).unwrap_err() {
            GridError::Parse { line, .. } => assert_eq!(line, 19),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn incident_branches_of_7_and_2() {
        let g = ieee14();
        assert_eq!(pair(&g, 7), vec![(4, 7), (7, 8), (7, 9)]);
        assert_eq!(pair(&g, 2).len(), 4);
        assert_eq!(
            g.incident_branches(99).unwrap_err(),
            GridError::UnknownBus(99)
        );
    }

    #[test]
    fn isolated_bus() {
        let bus = |id| Bus {
            id,
            name: String::new(),
            base_kv: None,
        };
        let g = GridModel::new(vec![bus(1), bus(2)], vec![]).unwrap();
        assert!(g.incident_branches(2).unwrap().is_empty());
    }

    #[test]
    fn pure_reactance() {
        let y = branch_admittance::<f64>(&Branch::new(1, 2, 0.0, 0.1)).unwrap();
        assert!((y.series - Complex::new(0.0, -10.0)).norm() < 1e-12);
        assert_eq!(y.shunt_from, Complex::new(0.0, 0.0));
        assert_eq!(y.shunt_to, Complex::new(0.0, 0.0));
    }

    #[test]
    fn branch_1_2_admittance() {
        let mut b = Branch::new(1, 2, 0.01938, 0.05917);
        b.b_total = 0.0528;
        let y = branch_admittance::<f64>(&b).unwrap();
        // 1/(r+jx) = (r - jx)/(r²+x²)
        let d = 0.01938f64.powi(2) + 0.05917f64.powi(2);
        assert!((y.series.re - 0.01938 / d).abs() < 1e-12);
        assert!((y.series.im + 0.05917 / d).abs() < 1e-12);
        assert!((y.series.re - 4.999).abs() < 1e-3);
        assert!((y.series.im + 15.263).abs() < 1e-3);
        assert!((y.shunt_from - Complex::new(0.0, 0.0264)).norm() < 1e-15);
        assert_eq!(y.shunt_from, y.shunt_to);
    }

    #[test]
    fn zero_impedance_rejected() {
        assert!(branch_admittance::<f64>(&Branch::new(1, 2, 0.0, 0.0)).is_err());
    }

    #[test]
    fn tap_enters_from_side() {
        let mut b = Branch::new(4, 7, 0.0, 0.20912);
        b.tap = 0.978;
        let y = branch_admittance::<f64>(&b).unwrap();
        let ys = Complex::new(0.0, 0.20912f64).inv();
        assert!((y.series - ys / 0.978).norm() < 1e-12);
        assert!((y.shunt_from + y.series - ys / (0.978 * 0.978)).norm() < 1e-12);
        assert!((y.shunt_to + y.series - ys).norm() < 1e-12);
    }

    #[test]
    fn reference_placement() {
        let g = ieee14();
        let p = build_placement(&g, &BTreeSet::from([2, 6, 7, 9]), 2).unwrap();
        let per_node: Vec<usize> = p.assignments.values().map(Vec::len).collect();
        assert_eq!(per_node, vec![3, 3, 2, 3]);
        assert_eq!(p.pmu_count(), 11);
        let node7 = &p.assignments[&7];
        assert_eq!(node7[0].len(), 2);
        assert_eq!(node7[1].len(), 2);
        assert_eq!(node7[0][0], Descriptor::Voltage { bus: 7 });
    }

    #[test]
    fn placement_other_capacities() {
        let g = ieee14();
        let p = build_placement(&g, &BTreeSet::from([7]), 4).unwrap();
        assert_eq!(p.pmu_count(), 1);
        assert_eq!(p.assignments[&7][0].len(), 4);
        let p = build_placement(&g, &BTreeSet::from([2]), 1).unwrap();
        assert_eq!(p.pmu_count(), 5);
        assert!(build_placement(&g, &BTreeSet::from([42]), 2).is_err());
        assert_eq!(
            build_placement(&g, &BTreeSet::from([2]), 0).unwrap_err(),
            GridError::ZeroChannels
        );
    }

    #[test]
    fn csv_dump() {
        let g = ieee14();
        let csv = g.branches_csv();
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.starts_with("from,to,r,x,b,tap\n1,2,0.01938,0.05917,0.0528,1\n"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn placement_covers_exactly_node_quantities(
                nodes in proptest::collection::btree_set(1u32..=14, 1..6),
                channels in 1usize..6,
            ) {
                let g = ieee14();
                let p = build_placement(&g, &nodes, channels).unwrap();
                for &n in &nodes {
                    let pmus = &p.assignments[&n];
                    let deg = g.degree(n).unwrap();
                    prop_assert_eq!(pmus.len(), (1 + deg).div_ceil(channels));
                    prop_assert!(pmus.iter().all(|d| d.len() <= channels));
                    let flat: BTreeSet<Descriptor> = pmus.iter().flatten().copied().collect();
                    prop_assert_eq!(flat.len(), 1 + deg);
                    let mut expected = BTreeSet::from([Descriptor::Voltage { bus: n }]);
                    for (i, _) in g.incident_branches(n).unwrap() {
                        expected.insert(Descriptor::Current { branch: i, at: n });
                    }
                    prop_assert_eq!(flat, expected);
                }
            }

            #[test]
            fn unit_tap_is_symmetric(r in 0.0f64..0.5, x in 0.01f64..0.5, b in 0.0f64..0.1) {
                let mut fwd = Branch::new(1, 2, r, x);
                fwd.b_total = b;
                let mut rev = fwd.clone();
                rev.from = 2;
                rev.to = 1;
                let a = branch_admittance::<f64>(&fwd).unwrap();
                let c = branch_admittance::<f64>(&rev).unwrap();
                prop_assert_eq!(a.series, c.series);
                prop_assert_eq!(a.shunt_from, c.shunt_to);
                prop_assert_eq!(a.shunt_to, c.shunt_from);
            }
        }
    }
}
