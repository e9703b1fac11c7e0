//! Linear weighted-least-squares state estimation over rectangular bus voltages.
//!
//! The state is `(e_1, f_1, …, e_N, f_N)` in bus-id order. Every phasor
//! measurement is linear in the state, so one solve gives the estimate.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use num_complex::Complex;
use thiserror::Error;

use crate::grid::{branch_admittance, BusId, Descriptor, GridError, GridModel, PmuPlacement};
use crate::kv::Part;
use crate::linalg::{self, LinalgError, Matrix};
use crate::scalar::Scalar;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("unobservable: zero pivot at state {name} (column {index})")]
    Unobservable { index: usize, name: String },
    #[error("unobservable: {rows} measurement rows for {states} states")]
    TooFewMeasurements { rows: usize, states: usize },
    #[error("descriptor {0} references an unknown bus")]
    UnknownBus(Descriptor),
    #[error("descriptor {0} references an unknown branch")]
    UnknownBranch(Descriptor),
    #[error("measurement vector has {actual} entries, model has {expected} rows")]
    Dimension { expected: usize, actual: usize },
    #[error("weights must be finite and positive")]
    BadWeight,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MeasurementRow {
    pub descriptor: Descriptor,
    pub part: Part,
}

impl fmt::Display for MeasurementRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.part {
            Part::Re => "re",
            Part::Im => "im",
        };
        write!(f, "{}.{p}", self.descriptor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    /// Include branch charging and tap shunt terms in current rows.
    pub include_shunts: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            include_shunts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel<T> {
    /// Column order: bus `buses[k]` owns columns `2k` (e) and `2k+1` (f).
    pub buses: Vec<BusId>,
    pub rows: Vec<MeasurementRow>,
    pub h: Matrix<T>,
    /// Diagonal of W, one entry per row.
    pub weights: Vec<T>,
}

impl<T: Scalar> MeasurementModel<T> {
    pub fn states(&self) -> usize {
        2 * self.buses.len()
    }

    pub fn state_name(&self, column: usize) -> String {
        let bus = self.buses.get(column / 2).copied().unwrap_or_default();
        if column.is_multiple_of(2) {
            format!("e{bus}")
        } else {
            format!("f{bus}")
        }
    }

    /// Replaces the diagonal of W.
    pub fn set_weights(&mut self, weights: Vec<T>) -> Result<(), EstimatorError> {
        if weights.len() != self.rows.len() {
            return Err(EstimatorError::Dimension {
                expected: self.rows.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > T::zero())) {
            return Err(EstimatorError::BadWeight);
        }
        self.weights = weights;
        Ok(())
    }

    /// Weights from per-phasor standard deviations, in descriptor order.
    pub fn set_sigmas(&mut self, sigmas: &[T]) -> Result<(), EstimatorError> {
        if sigmas.len() * 2 != self.rows.len() {
            return Err(EstimatorError::Dimension {
                expected: self.rows.len() / 2,
                actual: sigmas.len(),
            });
        }
        let w = sigmas
            .iter()
            .flat_map(|&s| {
                let w = T::one() / (s * s);
                [w, w]
            })
            .collect();
        self.set_weights(w)
    }

    /// Stacks phasor values (one per descriptor, in model order) into `z`.
    pub fn measurement_vector(&self, phasors: &[Complex<T>]) -> Result<Vec<T>, EstimatorError> {
        if phasors.len() * 2 != self.rows.len() {
            return Err(EstimatorError::Dimension {
                expected: self.rows.len() / 2,
                actual: phasors.len(),
            });
        }
        Ok(phasors.iter().flat_map(|p| [p.re, p.im]).collect())
    }

    pub fn descriptors(&self) -> impl Iterator<Item = Descriptor> + '_ {
        self.rows.iter().step_by(2).map(|r| r.descriptor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T> {
    pub buses: Vec<BusId>,
    /// Interleaved `(e, f)` per bus.
    pub x: Vec<T>,
}

impl<T: Scalar> StateVector<T> {
    pub fn from_voltages(voltages: &BTreeMap<BusId, Complex<T>>) -> Self {
        Self {
            buses: voltages.keys().copied().collect(),
            x: voltages.values().flat_map(|v| [v.re, v.im]).collect(),
        }
    }

    pub fn voltage(&self, bus: BusId) -> Option<Complex<T>> {
        let k = self.buses.iter().position(|&b| b == bus)?;
        Some(Complex::new(self.x[2 * k], self.x[2 * k + 1]))
    }

    pub fn voltages(&self) -> impl Iterator<Item = (BusId, Complex<T>)> + '_ {
        self.buses
            .iter()
            .enumerate()
            .map(|(k, &b)| (b, Complex::new(self.x[2 * k], self.x[2 * k + 1])))
    }

    /// Largest componentwise difference relative to the largest entry of `other`.
    pub fn relative_error(&self, other: &StateVector<T>) -> T {
        let scale = other.x.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let diff = self
            .x
            .iter()
            .zip(&other.x)
            .fold(T::zero(), |a, (p, q)| a.max((*p - *q).abs()));
        diff / scale
    }

    /// CSV with columns `bus,e,f,vm,va_deg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bus,e,f,vm,va_deg\n");
        for (bus, v) in self.voltages() {
            s += &format!(
                "{bus},{},{},{},{}\n",
                v.re,
                v.im,
                v.norm(),
                v.arg().to_degrees()
            );
        }
        s
    }
}

/// Coefficient rows for `c·V_bus` written into columns of `bus`:
/// `a+jb` acting on `(e, f)` is `[[a, −b], [b, a]]`.
fn add_complex<T: Scalar>(h: &mut Matrix<T>, row: usize, col: usize, c: Complex<T>) {
    h[(row, col)] += c.re;
    h[(row, col + 1)] -= c.im;
    h[(row + 1, col)] += c.im;
    h[(row + 1, col + 1)] += c.re;
}

pub fn build_model_for<T: Scalar>(
    g: &GridModel,
    descriptors: &[Descriptor],
    options: ModelOptions,
) -> Result<MeasurementModel<T>, EstimatorError> {
    let buses = g.bus_ids();
    let column: BTreeMap<BusId, usize> =
        buses.iter().enumerate().map(|(k, &b)| (b, 2 * k)).collect();
    let mut h = Matrix::zeros(2 * descriptors.len(), 2 * buses.len());
    let mut rows = Vec::with_capacity(2 * descriptors.len());
    for (k, d) in descriptors.iter().enumerate() {
        let r = 2 * k;
        match *d {
            Descriptor::Voltage { bus } => {
                let c = *column.get(&bus).ok_or(EstimatorError::UnknownBus(*d))?;
                add_complex(&mut h, r, c, Complex::new(T::one(), T::zero()));
            }
            Descriptor::Current { branch, at } => {
                let br = g
                    .branches
                    .get(branch)
                    .ok_or(EstimatorError::UnknownBranch(*d))?;
                if !br.touches(at) {
                    return Err(EstimatorError::UnknownBranch(*d));
                }
                let y = branch_admittance::<T>(br)?;
                let (near, far, shunt) = if at == br.from {
                    (br.from, br.to, y.shunt_from)
                } else {
                    (br.to, br.from, y.shunt_to)
                };
                let shunt = if options.include_shunts {
                    shunt
                } else {
                    Complex::new(T::zero(), T::zero())
                };
                let cn = *column.get(&near).ok_or(EstimatorError::UnknownBus(*d))?;
                let cf = *column.get(&far).ok_or(EstimatorError::UnknownBus(*d))?;
                add_complex(&mut h, r, cn, y.series + shunt);
                add_complex(&mut h, r, cf, -y.series);
            }
        }
        rows.push(MeasurementRow {
            descriptor: *d,
            part: Part::Re,
        });
        rows.push(MeasurementRow {
            descriptor: *d,
            part: Part::Im,
        });
    }
    let weights = vec![T::one(); rows.len()];
    Ok(MeasurementModel {
        buses,
        rows,
        h,
        weights,
    })
}

/// Rows in placement order: nodes ascending, PMUs in packing order.
pub fn build_measurement_matrix<T: Scalar>(
    g: &GridModel,
    p: &PmuPlacement,
) -> Result<MeasurementModel<T>, EstimatorError> {
    let descriptors: Vec<Descriptor> = p.descriptors().copied().collect();
    build_model_for(g, &descriptors, ModelOptions::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution<T> {
    pub state: StateVector<T>,
    /// `z − H·x̂`.
    pub residuals: Vec<T>,
}

impl<T: Scalar> WlsSolution<T> {
    /// `Σ wᵢ rᵢ²`, the weighted objective at the optimum.
    pub fn objective(&self, weights: &[T]) -> T {
        self.residuals
            .iter()
            .zip(weights)
            .fold(T::zero(), |a, (r, w)| a + *w * *r * *r)
    }

    pub fn residual_norm(&self) -> T {
        linalg::norm(&self.residuals)
    }
}

/// Solves `min (z − Hx)ᵀ W (z − Hx)` by QR on `W^½·H`.
pub fn wls_solve<T: Scalar>(
    m: &MeasurementModel<T>,
    z: &[T],
) -> Result<WlsSolution<T>, EstimatorError> {
    if z.len() != m.rows.len() {
        return Err(EstimatorError::Dimension {
            expected: m.rows.len(),
            actual: z.len(),
        });
    }
    let sw: Vec<T> = m.weights.iter().map(|w| w.sqrt()).collect();
    let a = m.h.scale_rows(&sw).expect("weights match rows");
    let b: Vec<T> = z.iter().zip(&sw).map(|(z, s)| *z * *s).collect();
    let x = linalg::least_squares(&a, &b).map_err(|e| match e {
        LinalgError::ZeroPivot { index } => EstimatorError::Unobservable {
            index,
            name: m.state_name(index),
        },
        LinalgError::Underdetermined { rows, cols } => {
            EstimatorError::TooFewMeasurements { rows, states: cols }
        }
        LinalgError::Dimension { expected, actual } => {
            EstimatorError::Dimension { expected, actual }
        }
    })?;
    let hx = m.h.mul_vec(&x).expect("state matches columns");
    let residuals = z.iter().zip(&hx).map(|(z, h)| *z - *h).collect();
    Ok(WlsSolution {
        state: StateVector {
            buses: m.buses.clone(),
            x,
        },
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observability {
    pub rank: usize,
    pub states: usize,
}

impl Observability {
    pub fn observable(&self) -> bool {
        self.rank == self.states
    }
}

pub fn observability_rank<T: Scalar>(m: &MeasurementModel<T>) -> Observability {
    let tol = T::of(RANK_TOLERANCE).max(T::epsilon() * T::of(100.0));
    Observability {
        rank: linalg::numerical_rank(&m.h, tol),
        states: m.states(),
    }
}

pub fn timed_estimate<T: Scalar>(
    m: &MeasurementModel<T>,
    z: &[T],
) -> Result<(WlsSolution<T>, Duration), EstimatorError> {
    let start = Instant::now();
    let sol = wls_solve(m, z)?;
    Ok((sol, start.elapsed()))
}

/// Mean and population standard deviation of durations, in milliseconds.
pub fn timing_stats(samples: &[Duration]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::grid::{build_placement, parse_cdf, Branch, Bus};
    use crate::pmu::{parse_scenario, true_measurement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::collections::BTreeSet;

    fn toy() -> GridModel {
        let bus = |id| Bus {
            id,
            name: format!("B{id}"),
            base_kv: None,
        };
        // 1/(0.00990099 + j0.0990099) = 1 − j10
        let z = Complex::new(1.0, -10.0).inv();
        GridModel::new(vec![bus(1), bus(2)], vec![Branch::new(1, 2, z.re, z.im)]).unwrap()
    }

    fn toy_descriptors() -> Vec<Descriptor> {
        vec![
            Descriptor::Voltage { bus: 1 },
            Descriptor::Current { branch: 0, at: 1 },
        ]
    }

    #[test]
    fn toy_rows() {
        let m: MeasurementModel<f64> =
            build_model_for(&toy(), &toy_descriptors(), ModelOptions::default()).unwrap();
        assert_eq!(m.h.row(0), &[1.0, 0.0, 0.0, 0.0]);
        let expect = [1.0, 10.0, -1.0, -10.0];
        for (a, b) in m.h.row(2).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", m.h.row(2));
        }
        assert_eq!(m.rows[3].to_string(), "I[0]@1.im");
    }

    #[test]
    fn toy_recovery() {
        let m: MeasurementModel<f64> =
            build_model_for(&toy(), &toy_descriptors(), ModelOptions::default()).unwrap();
        let z = m
            .measurement_vector(&[Complex::new(1.0, 0.0), Complex::new(0.55, -0.45)])
            .unwrap();
        let sol = wls_solve(&m, &z).unwrap();
        let v2 = sol.state.voltage(2).unwrap();
        assert!((v2.re - 0.95).abs() < 1e-12 && (v2.im + 0.05).abs() < 1e-12);
        assert_eq!(observability_rank(&m).rank, 4);
    }

    #[test]
    fn duplicated_rows_same_estimate() {
        let g = toy();
        let once: MeasurementModel<f64> =
            build_model_for(&g, &toy_descriptors(), ModelOptions::default()).unwrap();
        let mut d = toy_descriptors();
        d.extend(toy_descriptors());
        let twice: MeasurementModel<f64> =
            build_model_for(&g, &d, ModelOptions::default()).unwrap();
        let ph = [Complex::new(1.01, 0.0), Complex::new(0.5, -0.4)];
        let a = wls_solve(&once, &once.measurement_vector(&ph).unwrap()).unwrap();
        let b = wls_solve(
            &twice,
            &twice.measurement_vector(&[ph, ph].concat()).unwrap(),
        )
        .unwrap();
        assert!(a.state.relative_error(&b.state) < 1e-12);
    }

    fn ieee14() -> (GridModel, StateVector<f64>) {
        let g = parse_cdf(data::IEEE14_CDF).unwrap();
        let s = parse_scenario(data::IEEE14_SCENARIO).unwrap();
        (g, StateVector::from_voltages(&s.bus_voltages))
    }

    fn reference_model(g: &GridModel) -> MeasurementModel<f64> {
        let p = build_placement(
            g,
            &BTreeSet::from(data::REFERENCE_NODES),
            data::REFERENCE_CHANNELS,
        )
        .unwrap();
        build_measurement_matrix(g, &p).unwrap()
    }

    #[test]
    fn ieee14_shape_and_rank() {
        let (g, _) = ieee14();
        let m = reference_model(&g);
        assert_eq!((m.h.rows(), m.h.cols()), (38, 28));
        let o = observability_rank(&m);
        assert_eq!(o.rank, 28);
        assert!(o.observable());

        let single: MeasurementModel<f64> = build_model_for(
            &g,
            &[Descriptor::Voltage { bus: 5 }],
            ModelOptions::default(),
        )
        .unwrap();
        let o = observability_rank(&single);
        assert_eq!(o.rank, 2);
        assert!(!o.observable());
    }

    #[test]
    fn ieee14_noiseless_recovery() {
        let (g, truth) = ieee14();
        let s = parse_scenario(data::IEEE14_SCENARIO).unwrap();
        let m = reference_model(&g);
        let ph: Vec<Complex<f64>> = m
            .descriptors()
            .map(|d| true_measurement(&g, &s, &d).unwrap())
            .collect();
        let z = m.measurement_vector(&ph).unwrap();
        let sol = wls_solve(&m, &z).unwrap();
        assert!(sol.state.relative_error(&truth) < 1e-9);
        assert!(sol.residual_norm() < 1e-9);
    }

    #[test]
    fn hx_matches_true_measurements_without_shunts_too() {
        let (g, truth) = ieee14();
        let s = parse_scenario(data::IEEE14_SCENARIO).unwrap();
        let descriptors: Vec<Descriptor> = (0..g.branches.len())
            .map(|b| Descriptor::Current {
                branch: b,
                at: g.branches[b].to,
            })
            .collect();
        let m: MeasurementModel<f64> =
            build_model_for(&g, &descriptors, ModelOptions::default()).unwrap();
        let hx = m.h.mul_vec(&truth.x).unwrap();
        for (k, d) in descriptors.iter().enumerate() {
            let i: Complex<f64> = true_measurement(&g, &s, d).unwrap();
            assert!((hx[2 * k] - i.re).abs() < 1e-12 && (hx[2 * k + 1] - i.im).abs() < 1e-12);
        }
        let bare: MeasurementModel<f64> = build_model_for(
            &g,
            &descriptors,
            ModelOptions {
                include_shunts: false,
            },
        )
        .unwrap();
        assert_ne!(bare.h, m.h);
    }

    #[test]
    fn unobservable_names_a_state() {
        let (g, _) = ieee14();
        let p = build_placement(&g, &BTreeSet::from([2]), 2).unwrap();
        let m: MeasurementModel<f64> = build_measurement_matrix(&g, &p).unwrap();
        assert!(!observability_rank(&m).observable());
        let z = vec![0.0; m.rows.len()];
        assert!(matches!(
            wls_solve(&m, &z),
            Err(EstimatorError::TooFewMeasurements {
                rows: 10,
                states: 28
            })
        ));

        let mut d: Vec<Descriptor> = p.descriptors().copied().collect();
        d.extend(
            (1..=14)
                .filter(|&b| b != 7)
                .map(|bus| Descriptor::Voltage { bus }),
        );
        let m: MeasurementModel<f64> = build_model_for(&g, &d, ModelOptions::default()).unwrap();
        let err = wls_solve(&m, &vec![0.0; m.rows.len()]).unwrap_err();
        assert_eq!(
            err,
            EstimatorError::Unobservable {
                index: 12,
                name: "e7".into()
            }
        );
    }

    #[test]
    fn weights_validated() {
        let mut m: MeasurementModel<f64> =
            build_model_for(&toy(), &toy_descriptors(), ModelOptions::default()).unwrap();
        assert_eq!(
            m.set_weights(vec![1.0; 3]),
            Err(EstimatorError::Dimension {
                expected: 4,
                actual: 3
            })
        );
        assert_eq!(
            m.set_weights(vec![1.0, 0.0, 1.0, 1.0]),
            Err(EstimatorError::BadWeight)
        );
        m.set_sigmas(&[0.01, 0.02]).unwrap();
        assert!((m.weights[2] - 2500.0).abs() < 1e-9);
    }

    #[test]
    fn f32_model() {
        let (g, truth) = ieee14();
        let s = parse_scenario(data::IEEE14_SCENARIO).unwrap();
        let p = build_placement(&g, &BTreeSet::from(data::REFERENCE_NODES), 2).unwrap();
        let m: MeasurementModel<f32> = build_measurement_matrix(&g, &p).unwrap();
        assert_eq!(observability_rank(&m).rank, 28);
        let ph: Vec<Complex<f32>> = m
            .descriptors()
            .map(|d| true_measurement(&g, &s, &d).unwrap())
            .collect();
        let sol = wls_solve(&m, &m.measurement_vector(&ph).unwrap()).unwrap();
        for (a, b) in sol.state.x.iter().zip(&truth.x) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }

    #[test]
    fn timing_reported() {
        let (g, truth) = ieee14();
        let m = reference_model(&g);
        let z = m.h.mul_vec(&truth.x).unwrap();
        let (a, d) = timed_estimate(&m, &z).unwrap();
        let (b, _) = timed_estimate(&m, &z).unwrap();
        assert_eq!(a, b);
        let (mean, std) = timing_stats(&[d, d]);
        assert!(mean >= 0.0 && std == 0.0);
    }

    #[test]
    fn orthogonality_and_weight_scaling_under_noise() {
        let (g, truth) = ieee14();
        let mut m = reference_model(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig: Vec<f64> = (0..m.rows.len() / 2)
            .map(|k| 0.001 * (1.0 + (k % 3) as f64))
            .collect();
        m.set_sigmas(&sig).unwrap();
        let clean = m.h.mul_vec(&truth.x).unwrap();
        let z: Vec<f64> = clean
            .iter()
            .enumerate()
            .map(|(i, v)| v + Normal::new(0.0, sig[i / 2]).unwrap().sample(&mut rng))
            .collect();
        let sol = wls_solve(&m, &z).unwrap();
        let wr: Vec<f64> = sol
            .residuals
            .iter()
            .zip(&m.weights)
            .map(|(r, w)| r * w)
            .collect();
        let g_vec = m.h.transpose().mul_vec(&wr).unwrap();
        let scale: f64 = m.weights.iter().zip(&z).map(|(w, z)| w * z.abs()).sum();
        assert!(linalg::norm(&g_vec) / scale < 1e-8);

        let mut scaled = m.clone();
        scaled
            .set_weights(m.weights.iter().map(|w| w * 37.5).collect())
            .unwrap();
        let sol2 = wls_solve(&scaled, &z).unwrap();
        assert!(sol.state.relative_error(&sol2.state) < 1e-12);
    }
}
