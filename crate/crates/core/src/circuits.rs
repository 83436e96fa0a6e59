//! Gate-level circuits, simulated device descriptions, the layered
//! hardware-efficient circuit family and basis translation.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gate durations used to turn T1/T2 into per-gate damping strengths.
pub const SINGLE_QUBIT_GATE_DURATION_US: f64 = 0.05;
pub const CNOT_GATE_DURATION_US: f64 = 0.3;

const ANGLE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("invalid circuit size: {0}")]
    InvalidSize(String),
    #[error("gate {kind} references qubit {qubit} but the circuit has {n_qubits} qubits")]
    QubitOutOfRange {
        kind: GateKind,
        qubit: usize,
        n_qubits: usize,
    },
    #[error("malformed {kind} gate: {reason}")]
    MalformedGate { kind: GateKind, reason: String },
    #[error("circuit needs {needed} qubits but profile `{profile}` has {available}")]
    DoesNotFit {
        profile: String,
        needed: usize,
        available: usize,
    },
    #[error("routing unsupported: CNOT({0}, {1}) is not on the coupling map")]
    RoutingUnsupported(usize, usize),
    #[error("basis {basis:?} cannot express a {kind} gate")]
    UnsupportedBasis { kind: GateKind, basis: Vec<GateKind> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GateKind {
    #[serde(rename = "RX")]
    Rx,
    #[serde(rename = "RY")]
    Ry,
    #[serde(rename = "RZ")]
    Rz,
    #[serde(rename = "SX")]
    Sx,
    #[serde(rename = "X")]
    X,
    #[serde(rename = "U1")]
    U1,
    #[serde(rename = "U2")]
    U2,
    #[serde(rename = "U3")]
    U3,
    #[serde(rename = "CNOT")]
    Cnot,
    #[serde(rename = "INPUT")]
    Input,
    #[serde(rename = "OUTPUT")]
    Output,
}

impl GateKind {
    /// Every kind, in the fixed order used for one-hot vocabularies.
    pub const ALL: [GateKind; 11] = [
        GateKind::Rx,
        GateKind::Ry,
        GateKind::Rz,
        GateKind::Sx,
        GateKind::X,
        GateKind::U1,
        GateKind::U2,
        GateKind::U3,
        GateKind::Cnot,
        GateKind::Input,
        GateKind::Output,
    ];

    pub fn arity(self) -> usize {
        match self {
            GateKind::Cnot => 2,
            _ => 1,
        }
    }

    pub fn angle_count(self) -> usize {
        match self {
            GateKind::Rx | GateKind::Ry | GateKind::Rz | GateKind::U1 => 1,
            GateKind::U2 => 2,
            GateKind::U3 => 3,
            GateKind::Sx | GateKind::X | GateKind::Cnot | GateKind::Input | GateKind::Output => 0,
        }
    }

    /// INPUT and OUTPUT only exist as graph markers.
    pub fn is_executable(self) -> bool {
        !matches!(self, GateKind::Input | GateKind::Output)
    }

    pub fn duration_us(self) -> f64 {
        match self {
            GateKind::Cnot => CNOT_GATE_DURATION_US,
            _ => SINGLE_QUBIT_GATE_DURATION_US,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Rx => "RX",
            GateKind::Ry => "RY",
            GateKind::Rz => "RZ",
            GateKind::Sx => "SX",
            GateKind::X => "X",
            GateKind::U1 => "U1",
            GateKind::U2 => "U2",
            GateKind::U3 => "U3",
            GateKind::Cnot => "CNOT",
            GateKind::Input => "INPUT",
            GateKind::Output => "OUTPUT",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    #[serde(default)]
    pub angles: Vec<f64>,
}

impl Gate {
    pub fn new(kind: GateKind, qubits: Vec<usize>, angles: Vec<f64>) -> Result<Self, CircuitError> {
        let gate = Gate {
            kind,
            qubits,
            angles,
        };
        gate.check_shape()?;
        Ok(gate)
    }

    pub fn rx(q: usize, theta: f64) -> Self {
        Gate { kind: GateKind::Rx, qubits: vec![q], angles: vec![theta] }
    }

    pub fn ry(q: usize, theta: f64) -> Self {
        Gate { kind: GateKind::Ry, qubits: vec![q], angles: vec![theta] }
    }

    pub fn rz(q: usize, theta: f64) -> Self {
        Gate { kind: GateKind::Rz, qubits: vec![q], angles: vec![theta] }
    }

    pub fn sx(q: usize) -> Self {
        Gate { kind: GateKind::Sx, qubits: vec![q], angles: vec![] }
    }

    pub fn x(q: usize) -> Self {
        Gate { kind: GateKind::X, qubits: vec![q], angles: vec![] }
    }

    pub fn u1(q: usize, lambda: f64) -> Self {
        Gate { kind: GateKind::U1, qubits: vec![q], angles: vec![lambda] }
    }

    pub fn u2(q: usize, phi: f64, lambda: f64) -> Self {
        Gate { kind: GateKind::U2, qubits: vec![q], angles: vec![phi, lambda] }
    }

    pub fn u3(q: usize, theta: f64, phi: f64, lambda: f64) -> Self {
        Gate { kind: GateKind::U3, qubits: vec![q], angles: vec![theta, phi, lambda] }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Gate { kind: GateKind::Cnot, qubits: vec![control, target], angles: vec![] }
    }

    /// Arity, distinctness and angle-count checks.
    pub fn check_shape(&self) -> Result<(), CircuitError> {
        let malformed = |reason: String| CircuitError::MalformedGate {
            kind: self.kind,
            reason,
        };
        if !self.kind.is_executable() {
            return Err(malformed("graph marker is not an executable gate".into()));
        }
        if self.qubits.len() != self.kind.arity() {
            return Err(malformed(format!(
                "expected {} qubit(s), got {}",
                self.kind.arity(),
                self.qubits.len()
            )));
        }
        if self.kind == GateKind::Cnot && self.qubits[0] == self.qubits[1] {
            return Err(malformed("control and target coincide".into()));
        }
        if self.angles.len() != self.kind.angle_count() {
            return Err(malformed(format!(
                "expected {} angle(s), got {}",
                self.kind.angle_count(),
                self.angles.len()
            )));
        }
        if let Some(a) = self.angles.iter().find(|a| !a.is_finite()) {
            return Err(malformed(format!("non-finite angle {a}")));
        }
        Ok(())
    }

    /// 2×2 unitary (row-major) of a single-qubit gate.
    pub fn matrix_1q(&self) -> Option<[Complex64; 4]> {
        let a = &self.angles;
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let m = match self.kind {
            GateKind::Rx => {
                let (s, co) = (a[0] / 2.0).sin_cos();
                [c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)]
            }
            GateKind::Ry => {
                let (s, co) = (a[0] / 2.0).sin_cos();
                [c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)]
            }
            GateKind::Rz => {
                let half = a[0] / 2.0;
                [Complex64::from_polar(1.0, -half), c(0.0, 0.0), c(0.0, 0.0), Complex64::from_polar(1.0, half)]
            }
            GateKind::Sx => [c(0.5, 0.5), c(0.5, -0.5), c(0.5, -0.5), c(0.5, 0.5)],
            GateKind::X => [c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
            GateKind::U1 => u3_matrix(0.0, 0.0, a[0]),
            GateKind::U2 => u3_matrix(FRAC_PI_2, a[0], a[1]),
            GateKind::U3 => u3_matrix(a[0], a[1], a[2]),
            GateKind::Cnot | GateKind::Input | GateKind::Output => return None,
        };
        Some(m)
    }
}

pub fn u3_matrix(theta: f64, phi: f64, lambda: f64) -> [Complex64; 4] {
    let (s, c) = (theta / 2.0).sin_cos();
    [
        Complex64::new(c, 0.0),
        -Complex64::from_polar(s, lambda),
        Complex64::from_polar(s, phi),
        Complex64::from_polar(c, phi + lambda),
    ]
}

/// Euler angles `(theta, phi, lambda)` with `u = e^{i alpha} U3(theta, phi, lambda)`.
pub fn u3_angles(u: &[Complex64; 4]) -> (f64, f64, f64) {
    let (u00, u01, u10, u11) = (u[0], u[1], u[2], u[3]);
    let theta = 2.0 * u10.norm().atan2(u00.norm());
    if u00.norm() > 1e-9 {
        let phase = u00.arg();
        let rot = Complex64::from_polar(1.0, -phase);
        if u10.norm() > 1e-9 {
            let phi = (u10 * rot).arg();
            let lambda = (-u01 * rot).arg();
            (theta, phi, lambda)
        } else {
            (theta, 0.0, (u11 * rot).arg())
        }
    } else {
        // cos(theta/2) = 0: only phi - lambda relative to the U10 phase matters
        let phase = u10.arg();
        let rot = Complex64::from_polar(1.0, -phase);
        (theta, 0.0, (-u01 * rot).arg())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub n_qubits: usize,
    pub gates: Vec<Gate>,
    #[serde(default)]
    pub layer_count: usize,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Circuit {
            n_qubits,
            gates: Vec::new(),
            layer_count: 0,
        }
    }

    pub fn push(&mut self, gate: Gate) -> Result<(), CircuitError> {
        self.check_gate(&gate)?;
        self.gates.push(gate);
        Ok(())
    }

    fn check_gate(&self, gate: &Gate) -> Result<(), CircuitError> {
        gate.check_shape()?;
        if let Some(&q) = gate.qubits.iter().find(|&&q| q >= self.n_qubits) {
            return Err(CircuitError::QubitOutOfRange {
                kind: gate.kind,
                qubit: q,
                n_qubits: self.n_qubits,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        self.gates.iter().try_for_each(|g| self.check_gate(g))
    }

    pub fn count(&self, kind: GateKind) -> usize {
        self.gates.iter().filter(|g| g.kind == kind).count()
    }

    /// Gate list as JSON `[{kind, qubits, angles}, ...]`.
    pub fn gates_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.gates).expect("gates serialize")
    }
}

/// One draw from the layered hardware-efficient family.
///
/// Each layer applies a rotation about an axis shared by the whole layer
/// (uniform over X, Y, Z) with independent angles in `[0, 2π)`, then a
/// nearest-neighbour CNOT block where every pair `(n, n+1)` gets a CNOT
/// with probability 1/2 and a random control side.
pub fn sample_circuit<R: Rng + ?Sized>(
    n_qubits: usize,
    layers: usize,
    rng: &mut R,
) -> Result<Circuit, CircuitError> {
    if n_qubits < 2 {
        return Err(CircuitError::InvalidSize(format!(
            "need at least 2 qubits, got {n_qubits}"
        )));
    }
    if layers < 1 {
        return Err(CircuitError::InvalidSize("need at least 1 layer".into()));
    }
    let mut circuit = Circuit::new(n_qubits);
    circuit.layer_count = layers;
    for _ in 0..layers {
        let axis = rng.gen_range(0..3);
        for q in 0..n_qubits {
            let theta = rng.gen::<f64>() * 2.0 * PI;
            let gate = match axis {
                0 => Gate::rx(q, theta),
                1 => Gate::ry(q, theta),
                _ => Gate::rz(q, theta),
            };
            circuit.gates.push(gate);
        }
        for n in 0..n_qubits - 1 {
            if rng.gen_bool(0.5) {
                let gate = if rng.gen_bool(0.5) {
                    Gate::cnot(n, n + 1)
                } else {
                    Gate::cnot(n + 1, n)
                };
                circuit.gates.push(gate);
            }
        }
    }
    Ok(circuit)
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Per-qubit calibration. `null` T1/T2 in JSON means no decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitCalibration {
    #[serde(with = "inf_as_null")]
    pub t1_us: f64,
    #[serde(with = "inf_as_null")]
    pub t2_us: f64,
    pub prob_meas0_prep1: f64,
    pub prob_meas1_prep0: f64,
}

impl QubitCalibration {
    pub fn ideal() -> Self {
        QubitCalibration {
            t1_us: f64::INFINITY,
            t2_us: f64::INFINITY,
            prob_meas0_prep1: 0.0,
            prob_meas1_prep0: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub qubits: Vec<QubitCalibration>,
    pub gate_errors: BTreeMap<GateKind, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Two-qubit depolarizing channel of strength `p` after every CNOT.
    Depolarizing { p: f64 },
    Calibrated(Calibration),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub n_qubits: usize,
    pub basis_gates: BTreeSet<GateKind>,
    pub coupling_map: BTreeSet<(usize, usize)>,
    pub noise: NoiseSpec,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["depolarizing", "device_a", "device_b"];

fn linear_coupling(n_qubits: usize) -> BTreeSet<(usize, usize)> {
    (0..n_qubits.saturating_sub(1)).map(|q| (q, q + 1)).collect()
}

// Per-qubit calibration tables spanning the min/median/max ranges of two
// superconducting chips; cycled when a profile has more qubits.
const A_T1: [f64; 10] = [71.86, 38.89, 119.14, 64.2, 88.5, 52.3, 97.1, 71.0, 45.6, 103.7];
const A_T2: [f64; 10] = [88.30, 14.55, 142.49, 60.1, 120.4, 35.8, 101.2, 92.6, 48.0, 77.3];
const A_M0P1: [f64; 10] = [0.025, 0.0186, 0.09, 0.031, 0.022, 0.047, 0.027, 0.019, 0.064, 0.024];
const A_M1P0: [f64; 10] = [0.0057, 0.0016, 0.0298, 0.0071, 0.0044, 0.0123, 0.0062, 0.0021, 0.0185, 0.0052];
const B_T1: [f64; 10] = [73.76, 24.11, 98.44, 61.5, 85.0, 40.7, 92.2, 70.3, 33.9, 80.8];
const B_T2: [f64; 10] = [79.06, 9.60, 153.18, 55.4, 110.9, 30.2, 131.5, 84.7, 21.3, 96.0];
const B_M0P1: [f64; 10] = [0.0481, 0.0202, 0.2128, 0.061, 0.035, 0.094, 0.052, 0.028, 0.133, 0.044];
const B_M1P0: [f64; 10] = [0.0227, 0.0062, 0.2128, 0.031, 0.015, 0.058, 0.026, 0.011, 0.087, 0.019];

fn calibration_from_tables(
    n_qubits: usize,
    t1: &[f64; 10],
    t2: &[f64; 10],
    m0p1: &[f64; 10],
    m1p0: &[f64; 10],
    gate_errors: &[(GateKind, f64)],
) -> Calibration {
    let qubits = (0..n_qubits)
        .map(|q| {
            let i = q % 10;
            QubitCalibration {
                t1_us: t1[i],
                t2_us: t2[i].min(2.0 * t1[i]),
                prob_meas0_prep1: m0p1[i],
                prob_meas1_prep0: m1p0[i],
            }
        })
        .collect();
    Calibration {
        qubits,
        gate_errors: gate_errors.iter().copied().collect(),
    }
}

/// Built-in synthetic devices on a linear chain of `n_qubits`.
///
/// * `depolarizing`: ideal rotation basis, CNOTs followed by a two-qubit
///   depolarizing channel (p = 0.05 unless overridden).
/// * `device_a`: RZ/SX/X/CNOT basis with calibration-style noise.
/// * `device_b`: U1/U2/U3/CNOT basis with calibration-style noise.
pub fn builtin_profile(name: &str, n_qubits: usize) -> Option<DeviceProfile> {
    use GateKind::*;
    let (basis, noise): (Vec<GateKind>, NoiseSpec) = match name {
        "depolarizing" => (vec![Rx, Ry, Rz, Cnot], NoiseSpec::Depolarizing { p: 0.05 }),
        "device_a" => (
            vec![Rz, Sx, X, Cnot],
            NoiseSpec::Calibrated(calibration_from_tables(
                n_qubits,
                &A_T1,
                &A_T2,
                &A_M0P1,
                &A_M1P0,
                &[(Rz, 0.0), (Sx, 0.0003), (X, 0.0003), (Cnot, 0.0101)],
            )),
        ),
        "device_b" => (
            vec![U1, U2, U3, Cnot],
            NoiseSpec::Calibrated(calibration_from_tables(
                n_qubits,
                &B_T1,
                &B_T2,
                &B_M0P1,
                &B_M1P0,
                &[(U1, 0.0), (U2, 0.0005), (U3, 0.0010), (Cnot, 0.0165)],
            )),
        ),
        _ => return None,
    };
    Some(DeviceProfile {
        name: name.to_string(),
        n_qubits,
        basis_gates: basis.into_iter().collect(),
        coupling_map: linear_coupling(n_qubits),
        noise,
    })
}

impl DeviceProfile {
    pub fn depolarizing(name: &str, n_qubits: usize, p: f64) -> Self {
        let mut profile = builtin_profile("depolarizing", n_qubits).expect("builtin");
        profile.name = name.to_string();
        profile.noise = NoiseSpec::Depolarizing { p };
        profile
    }

    pub fn is_coupled(&self, a: usize, b: usize) -> bool {
        self.coupling_map.contains(&(a, b)) || self.coupling_map.contains(&(b, a))
    }

    /// Error rate applied after a gate of this kind.
    pub fn gate_error(&self, kind: GateKind) -> f64 {
        match &self.noise {
            NoiseSpec::Depolarizing { p } => {
                if kind == GateKind::Cnot {
                    *p
                } else {
                    0.0
                }
            }
            NoiseSpec::Calibrated(cal) => cal.gate_errors.get(&kind).copied().unwrap_or(0.0),
        }
    }

    pub fn qubit_calibration(&self, q: usize) -> Option<&QubitCalibration> {
        match &self.noise {
            NoiseSpec::Depolarizing { .. } => None,
            NoiseSpec::Calibrated(cal) => cal.qubits.get(q),
        }
    }

    /// Same device with the noise rescaled to a new level: the depolarizing
    /// strength is replaced, or calibrated gate errors are scaled so that the
    /// CNOT error equals `level`.
    pub fn at_noise_level(&self, level: f64) -> DeviceProfile {
        let mut out = self.clone();
        out.name = format!("{}@{level:.6}", self.name);
        match &mut out.noise {
            NoiseSpec::Depolarizing { p } => *p = level,
            NoiseSpec::Calibrated(cal) => {
                let base = cal.gate_errors.get(&GateKind::Cnot).copied().unwrap_or(0.0);
                if base > 0.0 {
                    let scale = level / base;
                    for e in cal.gate_errors.values_mut() {
                        *e = (*e * scale).min(1.0);
                    }
                } else {
                    cal.gate_errors.insert(GateKind::Cnot, level);
                }
            }
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

fn check_prob(what: &str, p: f64, out: &mut Vec<String>) {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        out.push(format!("{what} = {p} is outside [0, 1]"));
    }
}

/// Checks every profile invariant and reports all violations at once.
pub fn validate_profile(profile: &DeviceProfile) -> Result<(), Vec<String>> {
    let mut v = Vec::new();
    if profile.n_qubits == 0 {
        v.push("n_qubits must be positive".to_string());
    }
    for kind in &profile.basis_gates {
        if !kind.is_executable() {
            v.push(format!("basis contains graph marker {kind}"));
        }
    }
    for &(a, b) in &profile.coupling_map {
        if a >= profile.n_qubits || b >= profile.n_qubits {
            v.push(format!("coupling pair ({a}, {b}) out of range for {} qubits", profile.n_qubits));
        }
        if a == b {
            v.push(format!("coupling pair ({a}, {b}) is a self-loop"));
        }
    }
    match &profile.noise {
        NoiseSpec::Depolarizing { p } => check_prob("depolarizing p", *p, &mut v),
        NoiseSpec::Calibrated(cal) => {
            if cal.qubits.len() != profile.n_qubits {
                v.push(format!(
                    "calibration lists {} qubits, profile has {}",
                    cal.qubits.len(),
                    profile.n_qubits
                ));
            }
            for (q, c) in cal.qubits.iter().enumerate() {
                if !(c.t1_us > 0.0) {
                    v.push(format!("qubit {q}: T1 = {} must be positive", c.t1_us));
                }
                if !(c.t2_us > 0.0) {
                    v.push(format!("qubit {q}: T2 = {} must be positive", c.t2_us));
                }
                if c.t1_us.is_finite() && c.t2_us > 2.0 * c.t1_us {
                    v.push(format!("qubit {q}: T2 = {} exceeds 2·T1 = {}", c.t2_us, 2.0 * c.t1_us));
                }
                check_prob(&format!("qubit {q}: prob_meas0_prep1"), c.prob_meas0_prep1, &mut v);
                check_prob(&format!("qubit {q}: prob_meas1_prep0"), c.prob_meas1_prep0, &mut v);
            }
            for (kind, e) in &cal.gate_errors {
                check_prob(&format!("{kind} error"), *e, &mut v);
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Rewrites `circuit` into `profile`'s basis. Gates already in the basis pass
/// through untouched; other single-qubit gates are re-synthesised from their
/// Euler angles. No routing: every CNOT must already sit on a coupled pair.
pub fn transpile(circuit: &Circuit, profile: &DeviceProfile) -> Result<Circuit, CircuitError> {
    circuit.validate()?;
    if circuit.n_qubits > profile.n_qubits {
        return Err(CircuitError::DoesNotFit {
            profile: profile.name.clone(),
            needed: circuit.n_qubits,
            available: profile.n_qubits,
        });
    }
    let basis = &profile.basis_gates;
    let has = |k: GateKind| basis.contains(&k);
    let unsupported = |kind| CircuitError::UnsupportedBasis {
        kind,
        basis: basis.iter().copied().collect(),
    };
    let mut out = Circuit::new(circuit.n_qubits);
    out.layer_count = circuit.layer_count;
    for gate in &circuit.gates {
        if gate.kind == GateKind::Cnot {
            let (c, t) = (gate.qubits[0], gate.qubits[1]);
            if !profile.is_coupled(c, t) {
                return Err(CircuitError::RoutingUnsupported(c, t));
            }
            if !has(GateKind::Cnot) {
                return Err(unsupported(GateKind::Cnot));
            }
            out.gates.push(gate.clone());
            continue;
        }
        if has(gate.kind) {
            out.gates.push(gate.clone());
            continue;
        }
        let q = gate.qubits[0];
        let u = gate.matrix_1q().ok_or_else(|| unsupported(gate.kind))?;
        let (theta, phi, lambda) = u3_angles(&u);
        let small = |a: f64| wrap_angle(a).abs() < ANGLE_EPS;
        if has(GateKind::Rz) && has(GateKind::Sx) {
            if small(theta) {
                out.gates.push(Gate::rz(q, wrap_angle(phi + lambda)));
            } else {
                // U3(θ, φ, λ) ≃ RZ(φ + π) · SX · RZ(θ + π) · SX · RZ(λ)
                out.gates.push(Gate::rz(q, wrap_angle(lambda)));
                out.gates.push(Gate::sx(q));
                out.gates.push(Gate::rz(q, wrap_angle(theta + PI)));
                out.gates.push(Gate::sx(q));
                out.gates.push(Gate::rz(q, wrap_angle(phi + PI)));
            }
        } else if has(GateKind::U3) {
            if small(theta) && has(GateKind::U1) {
                out.gates.push(Gate::u1(q, wrap_angle(phi + lambda)));
            } else if (theta - FRAC_PI_2).abs() < ANGLE_EPS && has(GateKind::U2) {
                out.gates.push(Gate::u2(q, wrap_angle(phi), wrap_angle(lambda)));
            } else {
                out.gates.push(Gate::u3(q, theta, wrap_angle(phi), wrap_angle(lambda)));
            }
        } else if has(GateKind::Rz) && has(GateKind::Ry) {
            out.gates.push(Gate::rz(q, wrap_angle(lambda)));
            out.gates.push(Gate::ry(q, theta));
            out.gates.push(Gate::rz(q, wrap_angle(phi)));
        } else {
            return Err(unsupported(gate.kind));
        }
    }
    Ok(out)
}

/// Dense `2^n × 2^n` unitary of a circuit (qubit 0 is the most significant
/// bit). Exponential in `n`; meant for equivalence checks on small circuits.
pub fn circuit_unitary(circuit: &Circuit) -> Vec<Complex64> {
    let dim = 1usize << circuit.n_qubits;
    let mut u = vec![Complex64::new(0.0, 0.0); dim * dim];
    for i in 0..dim {
        u[i * dim + i] = Complex64::new(1.0, 0.0);
    }
    for gate in &circuit.gates {
        let g = gate_full_matrix(gate, circuit.n_qubits);
        u = matmul(&g, &u, dim);
    }
    u
}

fn gate_full_matrix(gate: &Gate, n: usize) -> Vec<Complex64> {
    let dim = 1usize << n;
    let mut m = vec![Complex64::new(0.0, 0.0); dim * dim];
    let bit = |q: usize| n - 1 - q;
    if gate.kind == GateKind::Cnot {
        let (c, t) = (bit(gate.qubits[0]), bit(gate.qubits[1]));
        for col in 0..dim {
            let row = if (col >> c) & 1 == 1 { col ^ (1 << t) } else { col };
            m[row * dim + col] = Complex64::new(1.0, 0.0);
        }
        return m;
    }
    let u = gate.matrix_1q().expect("single-qubit gate");
    let b = bit(gate.qubits[0]);
    for row in 0..dim {
        for col in 0..dim {
            if (row ^ col) & !(1 << b) != 0 {
                continue;
            }
            let r = (row >> b) & 1;
            let c = (col >> b) & 1;
            m[row * dim + col] = u[r * 2 + c];
        }
    }
    m
}

fn matmul(a: &[Complex64], b: &[Complex64], dim: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let aik = a[i * dim + k];
            if aik == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..dim {
                out[i * dim + j] += aik * b[k * dim + j];
            }
        }
    }
    out
}

/// `min_φ ‖a − e^{iφ} b‖_F`, an upper bound on the spectral distance.
pub fn phase_insensitive_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    let overlap: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    let phase = if overlap.norm() > 0.0 {
        Complex64::from_polar(1.0, -overlap.arg())
    } else {
        Complex64::new(1.0, 0.0)
    };
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - phase * y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}
