//! Exact density-matrix simulation of noisy circuits and the state
//! functionals used as ground truth (cross-platform fidelity, purity).

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::circuits::{Circuit, DeviceProfile, Gate, GateKind, NoiseSpec};

/// Dense storage is `4^n` complex numbers; ten qubits is 16 MiB.
pub const MAX_QUBITS: usize = 10;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("{0} qubits exceeds the dense simulation limit of {MAX_QUBITS}")]
    TooManyQubits(usize),
    #[error("qubit index {qubit} out of range for {n_qubits} qubits")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },
    #[error("unsupported gate: {0}")]
    UnsupportedGate(String),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("channel qubits must be distinct, got {0:?}")]
    RepeatedQubit(Vec<usize>),
    #[error("dimension mismatch: {0} vs {1} qubits")]
    DimensionMismatch(usize, usize),
    #[error("purity {0:e} is too small for a well-defined fidelity")]
    DegeneratePurity(f64),
    #[error("profile `{profile}` has no calibration entry for qubit {qubit}")]
    MissingCalibration { profile: String, qubit: usize },
    #[error("circuit has {circuit} qubits but profile `{profile}` has {profile_qubits}")]
    ProfileMismatch {
        profile: String,
        circuit: usize,
        profile_qubits: usize,
    },
    #[error("matrix data has length {len}, expected {expected}")]
    BadShape { len: usize, expected: usize },
}

/// Row-major `2^n × 2^n` density matrix; qubit 0 is the most significant bit
/// of the basis index.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    data: Vec<Complex64>,
}

impl DensityMatrix {
    /// `(|0⟩⟨0|)^{⊗n}`.
    pub fn zero_state(n_qubits: usize) -> Result<Self, QsimError> {
        check_size(n_qubits)?;
        let dim = 1 << n_qubits;
        let mut data = vec![ZERO; dim * dim];
        data[0] = ONE;
        Ok(DensityMatrix { n_qubits, data })
    }

    pub fn maximally_mixed(n_qubits: usize) -> Result<Self, QsimError> {
        check_size(n_qubits)?;
        let dim = 1 << n_qubits;
        let mut data = vec![ZERO; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(1.0 / dim as f64, 0.0);
        }
        Ok(DensityMatrix { n_qubits, data })
    }

    /// `|ψ⟩⟨ψ|` for a normalised state vector.
    pub fn from_pure(amplitudes: &[Complex64]) -> Result<Self, QsimError> {
        let dim = amplitudes.len();
        let n_qubits = dim.trailing_zeros() as usize;
        if !dim.is_power_of_two() || dim < 2 {
            return Err(QsimError::BadShape { len: dim, expected: 1 << n_qubits.max(1) });
        }
        check_size(n_qubits)?;
        let mut data = vec![ZERO; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                data[r * dim + c] = amplitudes[r] * amplitudes[c].conj();
            }
        }
        Ok(DensityMatrix { n_qubits, data })
    }

    /// Wraps raw row-major data without checking the state invariants.
    pub fn from_matrix(n_qubits: usize, data: Vec<Complex64>) -> Result<Self, QsimError> {
        check_size(n_qubits)?;
        let expected = 1usize << (2 * n_qubits);
        if data.len() != expected {
            return Err(QsimError::BadShape { len: data.len(), expected });
        }
        Ok(DensityMatrix { n_qubits, data })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim() + col]
    }

    pub fn trace(&self) -> Complex64 {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i]).sum()
    }

    /// Computational-basis outcome distribution (real part of the diagonal).
    pub fn probabilities(&self) -> Vec<f64> {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i].re.max(0.0)).collect()
    }

    /// `max |ρ − ρ†|` over entries.
    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for r in 0..dim {
            for c in r..dim {
                worst = worst.max((self.data[r * dim + c] - self.data[c * dim + r].conj()).norm());
            }
        }
        worst
    }

    /// Whether the smallest eigenvalue is at least `-tol`, decided by a
    /// Cholesky factorisation of `ρ + tol·I`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let dim = self.dim();
        let mut a = self.data.clone();
        for i in 0..dim {
            a[i * dim + i] += tol;
        }
        let mut l = vec![ZERO; dim * dim];
        for j in 0..dim {
            let mut d = a[j * dim + j].re;
            for k in 0..j {
                d -= l[j * dim + k].norm_sqr();
            }
            if d <= 0.0 {
                return false;
            }
            let djj = d.sqrt();
            l[j * dim + j] = Complex64::new(djj, 0.0);
            for i in j + 1..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k].conj();
                }
                l[i * dim + j] = s / djj;
            }
        }
        true
    }

    /// Trace 1 (1e-10), Hermitian (1e-10) and PSD (−1e-9).
    pub fn check_invariants(&self) -> Result<(), String> {
        let tr = self.trace();
        if (tr - ONE).norm() > 1e-10 {
            return Err(format!("trace {tr} differs from 1"));
        }
        let h = self.hermiticity_error();
        if h > 1e-10 {
            return Err(format!("hermiticity error {h:e}"));
        }
        if !self.is_psd(1e-9) {
            return Err("matrix is not positive semidefinite".into());
        }
        Ok(())
    }

    fn check_qubit(&self, q: usize) -> Result<(), QsimError> {
        if q >= self.n_qubits {
            Err(QsimError::QubitOutOfRange { qubit: q, n_qubits: self.n_qubits })
        } else {
            Ok(())
        }
    }

    /// `ρ ← U ρ U†` for a single-qubit unitary (row-major 2×2).
    pub fn apply_1q_unitary(&mut self, q: usize, u: &[Complex64; 4]) -> Result<(), QsimError> {
        self.check_qubit(q)?;
        self.conjugate(&[q], u);
        Ok(())
    }

    /// `ρ ← K ρ K†` where `op` is a `2^k × 2^k` operator on `qubits` (first
    /// listed qubit is the most significant bit of `op`'s index).
    fn conjugate(&mut self, qubits: &[usize], op: &[Complex64]) {
        self.data = sandwich(&self.data, self.n_qubits, qubits, op);
    }

    /// `ρ ← Σ_k K_k ρ K_k†`.
    fn apply_kraus(&mut self, qubits: &[usize], kraus: &[Vec<Complex64>]) {
        let mut acc = vec![ZERO; self.data.len()];
        for k in kraus {
            let term = sandwich(&self.data, self.n_qubits, qubits, k);
            for (a, t) in acc.iter_mut().zip(term) {
                *a += t;
            }
        }
        self.data = acc;
    }

    /// `(1 − p)·ρ + p·Tr_Q(ρ) ⊗ I/2^{|Q|}` on the qubit set `Q`.
    fn depolarize(&mut self, qubits: &[usize], p: f64) {
        if p == 0.0 {
            return;
        }
        let dim = self.dim();
        let mask: usize = qubits.iter().map(|&q| 1usize << (self.n_qubits - 1 - q)).sum();
        let sub = 1usize << qubits.len();
        let mut replaced = vec![ZERO; dim * dim];
        // Tr_Q over the masked bits, then tensor back the maximally mixed part.
        for r in 0..dim {
            if r & mask != 0 {
                continue;
            }
            for c in 0..dim {
                if c & mask != 0 {
                    continue;
                }
                let mut s = ZERO;
                let mut m = mask;
                loop {
                    s += self.data[(r | m) * dim + (c | m)];
                    if m == 0 {
                        break;
                    }
                    m = (m - 1) & mask;
                }
                let v = s / sub as f64;
                let mut m = mask;
                loop {
                    replaced[(r | m) * dim + (c | m)] = v;
                    if m == 0 {
                        break;
                    }
                    m = (m - 1) & mask;
                }
            }
        }
        for (x, y) in self.data.iter_mut().zip(replaced) {
            *x = *x * (1.0 - p) + y * p;
        }
    }

    pub fn amplitude_damp(&mut self, q: usize, gamma: f64) -> Result<(), QsimError> {
        self.check_qubit(q)?;
        check_prob(gamma)?;
        if gamma == 0.0 {
            return Ok(());
        }
        let k0 = vec![ONE, ZERO, ZERO, Complex64::new((1.0 - gamma).sqrt(), 0.0)];
        let k1 = vec![ZERO, Complex64::new(gamma.sqrt(), 0.0), ZERO, ZERO];
        self.apply_kraus(&[q], &[k0, k1]);
        Ok(())
    }

    pub fn phase_damp(&mut self, q: usize, lambda: f64) -> Result<(), QsimError> {
        self.check_qubit(q)?;
        check_prob(lambda)?;
        if lambda == 0.0 {
            return Ok(());
        }
        let k0 = vec![ONE, ZERO, ZERO, Complex64::new((1.0 - lambda).sqrt(), 0.0)];
        let k1 = vec![ZERO, ZERO, ZERO, Complex64::new(lambda.sqrt(), 0.0)];
        self.apply_kraus(&[q], &[k0, k1]);
        Ok(())
    }

    pub fn depolarize_qubits(&mut self, qubits: &[usize], p: f64) -> Result<(), QsimError> {
        check_prob(p)?;
        for &q in qubits {
            self.check_qubit(q)?;
        }
        for (i, q) in qubits.iter().enumerate() {
            if qubits[..i].contains(q) {
                return Err(QsimError::RepeatedQubit(qubits.to_vec()));
            }
        }
        self.depolarize(qubits, p);
        Ok(())
    }
}

fn check_size(n_qubits: usize) -> Result<(), QsimError> {
    if n_qubits > MAX_QUBITS {
        Err(QsimError::TooManyQubits(n_qubits))
    } else {
        Ok(())
    }
}

fn check_prob(p: f64) -> Result<(), QsimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(QsimError::InvalidProbability(p))
    }
}

/// `K ρ K†` with `K` acting on `qubits`.
fn sandwich(rho: &[Complex64], n: usize, qubits: &[usize], op: &[Complex64]) -> Vec<Complex64> {
    let dim = 1usize << n;
    let k = qubits.len();
    let sub = 1usize << k;
    let bits: Vec<usize> = qubits.iter().map(|&q| n - 1 - q).collect();
    let mask: usize = bits.iter().map(|b| 1usize << b).sum();
    // offsets[s]: basis-index bits for sub-index s (first qubit = MSB of s)
    let offsets: Vec<usize> = (0..sub)
        .map(|s| {
            (0..k)
                .filter(|i| (s >> (k - 1 - i)) & 1 == 1)
                .map(|i| 1usize << bits[i])
                .sum()
        })
        .collect();
    let bases: Vec<usize> = (0..dim).filter(|i| i & mask == 0).collect();

    // left: K ρ (acts on rows)
    let mut left = vec![ZERO; dim * dim];
    let mut buf = vec![ZERO; sub];
    for &base in &bases {
        for col in 0..dim {
            for (s, off) in offsets.iter().enumerate() {
                buf[s] = rho[(base | off) * dim + col];
            }
            for (r, off) in offsets.iter().enumerate() {
                let mut acc = ZERO;
                for s in 0..sub {
                    acc += op[r * sub + s] * buf[s];
                }
                left[(base | off) * dim + col] = acc;
            }
        }
    }
    // right: (K ρ) K† (acts on columns)
    let mut out = vec![ZERO; dim * dim];
    for row in 0..dim {
        for &base in &bases {
            for (s, off) in offsets.iter().enumerate() {
                buf[s] = left[row * dim + (base | off)];
            }
            for (c, off) in offsets.iter().enumerate() {
                let mut acc = ZERO;
                for s in 0..sub {
                    acc += buf[s] * op[c * sub + s].conj();
                }
                out[row * dim + (base | off)] = acc;
            }
        }
    }
    out
}

fn cnot_matrix() -> Vec<Complex64> {
    let mut m = vec![ZERO; 16];
    for (r, c) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        m[r * 4 + c] = ONE;
    }
    m
}

/// `U ρ U†` for one circuit gate.
pub fn apply_gate(state: &DensityMatrix, gate: &Gate) -> Result<DensityMatrix, QsimError> {
    if !gate.kind.is_executable() {
        return Err(QsimError::UnsupportedGate(gate.kind.to_string()));
    }
    gate.check_shape()
        .map_err(|e| QsimError::UnsupportedGate(e.to_string()))?;
    for &q in &gate.qubits {
        state.check_qubit(q)?;
    }
    let mut out = state.clone();
    if gate.kind == GateKind::Cnot {
        out.conjugate(&gate.qubits, &cnot_matrix());
    } else {
        let u = gate.matrix_1q().expect("single-qubit gate has a matrix");
        out.conjugate(&gate.qubits, &u);
    }
    Ok(out)
}

/// Two-qubit depolarizing channel `(1 − p)ρ + p·Tr_{ab}(ρ) ⊗ I/4`.
pub fn apply_depolarizing2(
    state: &DensityMatrix,
    qubits: (usize, usize),
    p: f64,
) -> Result<DensityMatrix, QsimError> {
    let mut out = state.clone();
    out.depolarize_qubits(&[qubits.0, qubits.1], p)?;
    Ok(out)
}

/// `γ = 1 − exp(−t/T1)`.
pub fn amplitude_damping_gamma(duration_us: f64, t1_us: f64) -> f64 {
    if t1_us.is_infinite() {
        0.0
    } else {
        1.0 - (-duration_us / t1_us).exp()
    }
}

/// Pure-dephasing strength from `1/Tφ = 1/T2 − 1/(2·T1)` (clamped at 0).
/// Combined with amplitude damping the coherences decay as `exp(−t/T2)`.
pub fn phase_damping_lambda(duration_us: f64, t1_us: f64, t2_us: f64) -> f64 {
    let rate = (1.0 / t2_us - 0.5 / t1_us).max(0.0);
    1.0 - (-2.0 * duration_us * rate).exp()
}

/// Noise that follows `gate` on `profile`: depolarizing with the gate's error
/// rate, then amplitude damping, then phase damping on each touched qubit.
pub fn apply_device_noise(
    state: &DensityMatrix,
    gate: &Gate,
    profile: &DeviceProfile,
) -> Result<DensityMatrix, QsimError> {
    let mut out = state.clone();
    match &profile.noise {
        NoiseSpec::Depolarizing { p } => {
            if gate.kind == GateKind::Cnot {
                out.depolarize_qubits(&gate.qubits, *p)?;
            }
        }
        NoiseSpec::Calibrated(_) => {
            let err = profile.gate_error(gate.kind);
            out.depolarize_qubits(&gate.qubits, err)?;
            let t = gate.kind.duration_us();
            for &q in &gate.qubits {
                let cal = profile
                    .qubit_calibration(q)
                    .ok_or_else(|| QsimError::MissingCalibration {
                        profile: profile.name.clone(),
                        qubit: q,
                    })?;
                out.amplitude_damp(q, amplitude_damping_gamma(t, cal.t1_us))?;
                out.phase_damp(q, phase_damping_lambda(t, cal.t1_us, cal.t2_us))?;
            }
        }
    }
    Ok(out)
}

/// Flips each measured bit with the profile's prepared-state-dependent
/// readout error. Profiles without calibration leave bits untouched.
pub fn apply_readout_error<R: Rng + ?Sized>(
    bits: &[u8],
    profile: &DeviceProfile,
    rng: &mut R,
) -> Vec<u8> {
    bits.iter()
        .enumerate()
        .map(|(q, &b)| {
            let Some(cal) = profile.qubit_calibration(q) else {
                return b;
            };
            let flip = if b == 1 { cal.prob_meas0_prep1 } else { cal.prob_meas1_prep0 };
            if flip > 0.0 && rng.gen::<f64>() < flip {
                1 - b
            } else {
                b
            }
        })
        .collect()
}

/// Runs `circuit` from `|0…0⟩` on `profile`, each gate followed by its noise.
pub fn run_circuit(circuit: &Circuit, profile: &DeviceProfile) -> Result<DensityMatrix, QsimError> {
    if circuit.n_qubits != profile.n_qubits {
        return Err(QsimError::ProfileMismatch {
            profile: profile.name.clone(),
            circuit: circuit.n_qubits,
            profile_qubits: profile.n_qubits,
        });
    }
    let mut state = DensityMatrix::zero_state(circuit.n_qubits)?;
    for gate in &circuit.gates {
        state = apply_gate(&state, gate)?;
        state = apply_device_noise(&state, gate, profile)?;
    }
    Ok(state)
}

/// `Tr(ρσ)` (real part; both arguments Hermitian).
pub fn overlap(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64, QsimError> {
    if a.n_qubits != b.n_qubits {
        return Err(QsimError::DimensionMismatch(a.n_qubits, b.n_qubits));
    }
    let dim = a.dim();
    let mut s = 0.0;
    for r in 0..dim {
        for c in 0..dim {
            s += (a.data[r * dim + c] * b.data[c * dim + r]).re;
        }
    }
    Ok(s)
}

/// `Tr(ρ²)`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.data.iter().map(|z| z.norm_sqr()).sum()
}

/// `Tr(ρ_i ρ_j) / √(Tr(ρ_i²)·Tr(ρ_j²))`.
pub fn cross_fidelity(rho_i: &DensityMatrix, rho_j: &DensityMatrix) -> Result<f64, QsimError> {
    let num = overlap(rho_i, rho_j)?;
    let (pi, pj) = (purity(rho_i), purity(rho_j));
    for p in [pi, pj] {
        if p < 1e-12 {
            return Err(QsimError::DegeneratePurity(p));
        }
    }
    Ok(num / (pi * pj).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{builtin_profile, sample_circuit, Calibration, QubitCalibration};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn close(a: &DensityMatrix, b: &DensityMatrix, tol: f64) -> bool {
        a.data.iter().zip(&b.data).all(|(x, y)| (x - y).norm() <= tol)
    }

    fn bell() -> DensityMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        DensityMatrix::from_pure(&[c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)]).unwrap()
    }

    #[test]
    fn rz_leaves_ground_state() {
        let z = DensityMatrix::zero_state(1).unwrap();
        let out = apply_gate(&z, &Gate::rz(0, 0.77)).unwrap();
        assert!(close(&out, &z, 1e-15));
    }

    #[test]
    fn x_flips_ground_state() {
        let out = apply_gate(&DensityMatrix::zero_state(1).unwrap(), &Gate::x(0)).unwrap();
        assert!((out.get(1, 1) - ONE).norm() < 1e-15);
        assert!(out.get(0, 0).norm() < 1e-15);
    }

    #[test]
    fn h_then_cnot_gives_bell_state() {
        // H = RY(π/2) up to a Z: RZ(π)·RY(π/2) equals H up to global phase
        let mut rho = DensityMatrix::zero_state(2).unwrap();
        rho = apply_gate(&rho, &Gate::ry(0, std::f64::consts::FRAC_PI_2)).unwrap();
        rho = apply_gate(&rho, &Gate::cnot(0, 1)).unwrap();
        assert!(close(&rho, &bell(), 1e-12));
        assert!((purity(&rho) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_errors() {
        let z = DensityMatrix::zero_state(2).unwrap();
        assert!(matches!(
            apply_gate(&z, &Gate::x(2)),
            Err(QsimError::QubitOutOfRange { qubit: 2, .. })
        ));
        let marker = Gate { kind: GateKind::Input, qubits: vec![0], angles: vec![] };
        assert!(matches!(apply_gate(&z, &marker), Err(QsimError::UnsupportedGate(_))));
        assert!(matches!(
            apply_gate(&z, &Gate::rx(0, f64::INFINITY)),
            Err(QsimError::UnsupportedGate(_))
        ));
        assert!(DensityMatrix::zero_state(11).is_err());
    }

    #[test]
    fn depolarizing_extremes() {
        let b = bell();
        assert_eq!(apply_depolarizing2(&b, (0, 1), 0.0).unwrap(), b);
        let mixed = apply_depolarizing2(&b, (0, 1), 1.0).unwrap();
        assert!(close(&mixed, &DensityMatrix::maximally_mixed(2).unwrap(), 1e-15));
        assert!((purity(&mixed) - 0.25).abs() < 1e-15);
        assert!(matches!(
            apply_depolarizing2(&b, (0, 1), 1.5),
            Err(QsimError::InvalidProbability(_))
        ));
        assert!(matches!(
            apply_depolarizing2(&b, (1, 1), 0.5),
            Err(QsimError::RepeatedQubit(_))
        ));
    }

    #[test]
    fn depolarizing_half_on_bell_matches_matrix_oracle() {
        // 0.5·Bell + 0.5·I/4 built entrywise; Tr(ρ²) = 0.25 + 0.25 + 2·0.5·0.5·0.25
        let mut expected = vec![ZERO; 16];
        for (r, col) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
            expected[r * 4 + col] += c(0.25, 0.0);
        }
        for i in 0..4 {
            expected[i * 4 + i] += c(0.125, 0.0);
        }
        let oracle = DensityMatrix::from_matrix(2, expected).unwrap();
        let oracle_purity: f64 = oracle.data.iter().map(|z| z.norm_sqr()).sum();
        assert!((oracle_purity - 0.4375).abs() < 1e-15);
        let out = apply_depolarizing2(&bell(), (0, 1), 0.5).unwrap();
        assert!(close(&out, &oracle, 1e-15));
        assert!((purity(&out) - 0.4375).abs() < 1e-14);
    }

    #[test]
    fn depolarizing_on_subsystem_keeps_other_qubit() {
        // qubits (0, 2) of |1⟩|+⟩|0⟩ with p = 1 leave qubit 1 in |+⟩
        let mut rho = DensityMatrix::zero_state(3).unwrap();
        rho = apply_gate(&rho, &Gate::x(0)).unwrap();
        rho = apply_gate(&rho, &Gate::ry(1, std::f64::consts::FRAC_PI_2)).unwrap();
        let out = apply_depolarizing2(&rho, (0, 2), 1.0).unwrap();
        assert!((purity(&out) - 0.25).abs() < 1e-14);
        out.check_invariants().unwrap();
    }

    fn calibrated(t1: f64, t2: f64, err: f64) -> DeviceProfile {
        let mut p = builtin_profile("device_a", 1).unwrap();
        p.noise = NoiseSpec::Calibrated(Calibration {
            qubits: vec![QubitCalibration {
                t1_us: t1,
                t2_us: t2,
                prob_meas0_prep1: 0.0,
                prob_meas1_prep0: 0.0,
            }],
            gate_errors: BTreeMap::from([(GateKind::Sx, err), (GateKind::X, err)]),
        });
        p
    }

    #[test]
    fn ideal_calibration_is_identity() {
        let p = calibrated(f64::INFINITY, f64::INFINITY, 0.0);
        let mut rho = DensityMatrix::zero_state(1).unwrap();
        rho = apply_gate(&rho, &Gate::sx(0)).unwrap();
        let out = apply_device_noise(&rho, &Gate::sx(0), &p).unwrap();
        assert_eq!(out, rho);
    }

    #[test]
    fn full_relaxation() {
        let mut rho = apply_gate(&DensityMatrix::zero_state(1).unwrap(), &Gate::x(0)).unwrap();
        rho.amplitude_damp(0, 1.0).unwrap();
        assert!(close(&rho, &DensityMatrix::zero_state(1).unwrap(), 1e-15));
    }

    #[test]
    fn damping_strengths() {
        let expected = 1.0 - (-0.3f64 / 70.0).exp();
        assert!((amplitude_damping_gamma(0.3, 70.0) - expected).abs() < 1e-15);
        assert_eq!(amplitude_damping_gamma(0.3, f64::INFINITY), 0.0);
        // T2 = 2·T1: no pure dephasing
        assert_eq!(phase_damping_lambda(0.3, 50.0, 100.0), 0.0);
        assert_eq!(phase_damping_lambda(0.3, f64::INFINITY, f64::INFINITY), 0.0);
    }

    #[test]
    fn coherence_decays_with_t2() {
        // |+⟩ idles through one SX-duration of noise; off-diagonal ~ exp(−t/T2)/2
        let (t1, t2) = (40.0, 30.0);
        let p = calibrated(t1, t2, 0.0);
        let mut rho = DensityMatrix::zero_state(1).unwrap();
        rho = apply_gate(&rho, &Gate::ry(0, std::f64::consts::FRAC_PI_2)).unwrap();
        let out = apply_device_noise(&rho, &Gate::sx(0), &p).unwrap();
        let expected = 0.5 * (-crate::circuits::SINGLE_QUBIT_GATE_DURATION_US / t2).exp();
        assert!((out.get(0, 1).re - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_calibration_is_reported() {
        let mut p = calibrated(50.0, 50.0, 0.0);
        p.n_qubits = 2;
        let rho = DensityMatrix::zero_state(2).unwrap();
        assert!(matches!(
            apply_device_noise(&rho, &Gate::sx(1), &p),
            Err(QsimError::MissingCalibration { qubit: 1, .. })
        ));
    }

    #[test]
    fn readout_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = builtin_profile("device_a", 3).unwrap();
        if let NoiseSpec::Calibrated(cal) = &mut p.noise {
            for q in &mut cal.qubits {
                q.prob_meas0_prep1 = 0.0;
                q.prob_meas1_prep0 = 0.0;
            }
        }
        assert_eq!(apply_readout_error(&[1, 0, 1], &p, &mut rng), vec![1, 0, 1]);
        if let NoiseSpec::Calibrated(cal) = &mut p.noise {
            cal.qubits[0].prob_meas0_prep1 = 1.0;
        }
        assert_eq!(apply_readout_error(&[1, 0, 1], &p, &mut rng), vec![0, 0, 1]);
    }

    #[test]
    fn readout_flip_frequency() {
        let mut p = builtin_profile("device_a", 1).unwrap();
        if let NoiseSpec::Calibrated(cal) = &mut p.noise {
            cal.qubits[0].prob_meas1_prep0 = 0.1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 100_000;
        let flips: usize = (0..trials)
            .map(|_| apply_readout_error(&[0], &p, &mut rng)[0] as usize)
            .sum();
        let rate = flips as f64 / trials as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn run_circuit_basics() {
        let noiseless = DeviceProfile::depolarizing("ideal", 3, 0.0);
        let empty = Circuit::new(3);
        assert_eq!(run_circuit(&empty, &noiseless).unwrap(), DensityMatrix::zero_state(3).unwrap());
        let mut cx = Circuit::new(3);
        cx.gates.push(Gate::x(0));
        let rho = run_circuit(&cx, &noiseless).unwrap();
        assert!((rho.get(4, 4) - ONE).norm() < 1e-15);
        assert!(run_circuit(&Circuit::new(2), &noiseless).is_err());
    }

    #[test]
    fn noisy_circuit_is_mixed() {
        let profile = DeviceProfile::depolarizing("d", 4, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut seen = 0;
        for _ in 0..20 {
            let circuit = sample_circuit(4, 2, &mut rng).unwrap();
            let rho = run_circuit(&circuit, &profile).unwrap();
            rho.check_invariants().unwrap();
            if circuit.count(GateKind::Cnot) > 0 {
                seen += 1;
                assert!(purity(&rho) < 1.0 - 1e-6);
            } else {
                assert!((purity(&rho) - 1.0).abs() < 1e-10);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn fidelity_examples() {
        let zero = DensityMatrix::zero_state(1).unwrap();
        let one = apply_gate(&zero, &Gate::x(0)).unwrap();
        let mixed = DensityMatrix::maximally_mixed(1).unwrap();
        assert!((cross_fidelity(&mixed, &mixed).unwrap() - 1.0).abs() < 1e-15);
        // Tr(|0⟩⟨0|·I/2) = 1/2, purities 1 and 1/2 → (1/2)/√(1/2)
        assert!((cross_fidelity(&zero, &mixed).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cross_fidelity(&zero, &one).unwrap(), 0.0);
        assert!(matches!(
            cross_fidelity(&zero, &DensityMatrix::zero_state(2).unwrap()),
            Err(QsimError::DimensionMismatch(1, 2))
        ));
        let null = DensityMatrix::from_matrix(1, vec![ZERO; 4]).unwrap();
        assert!(matches!(cross_fidelity(&zero, &null), Err(QsimError::DegeneratePurity(_))));
    }

    #[test]
    fn purity_examples() {
        assert!((purity(&bell()) - 1.0).abs() < 1e-15);
        assert!((purity(&DensityMatrix::maximally_mixed(1).unwrap()) - 0.5).abs() < 1e-15);
        assert!((purity(&DensityMatrix::maximally_mixed(2).unwrap()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn psd_check_detects_negative_eigenvalue() {
        let bad = DensityMatrix::from_matrix(1, vec![c(1.1, 0.0), ZERO, ZERO, c(-0.1, 0.0)]).unwrap();
        assert!(!bad.is_psd(1e-9));
        assert!(bell().is_psd(1e-9));
    }
}
