//! Random local-Pauli measurements, classical-shadow snapshots and the two
//! random-measurement fidelity baselines (classical shadows and
//! cross-correlations of outcome distributions).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::DeviceProfile;
use crate::qsim::{apply_readout_error, DensityMatrix, MAX_QUBITS};

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("snapshot set is empty")]
    Empty,
    #[error("need at least {need} records, got {got}")]
    TooFewRecords { need: usize, got: usize },
    #[error("qubit count mismatch: {0} vs {1}")]
    QubitMismatch(usize, usize),
    #[error("{0} qubits exceeds the dense limit of {MAX_QUBITS}")]
    TooManyQubits(usize),
    #[error("probability tables were collected under different basis settings")]
    MismatchedSettings,
    #[error("shot count must be positive")]
    ZeroShots,
    #[error("malformed snapshot data: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn code(self) -> u8 {
        match self {
            Pauli::X => 0,
            Pauli::Y => 1,
            Pauli::Z => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Pauli::X),
            1 => Some(Pauli::Y),
            2 => Some(Pauli::Z),
            _ => None,
        }
    }

    /// Unitary `U` that maps this Pauli's eigenbasis onto the computational
    /// basis (`H` for X, `H·S†` for Y, identity for Z).
    pub fn basis_change(self) -> [Complex64; 4] {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let c = |re: f64, im: f64| Complex64::new(re, im);
        match self {
            Pauli::X => [c(s, 0.0), c(s, 0.0), c(s, 0.0), c(-s, 0.0)],
            Pauli::Y => [c(s, 0.0), c(0.0, -s), c(s, 0.0), c(0.0, s)],
            Pauli::Z => [c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Pauli::ALL[rng.gen_range(0..3)]
    }
}

/// One random-basis measurement: a Pauli per qubit and the observed bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotRecord {
    pub bases: Vec<Pauli>,
    pub bits: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotSet {
    pub n_qubits: usize,
    pub records: Vec<SnapshotRecord>,
}

/// `3 U†|b⟩⟨b|U − I` as a row-major 2×2 matrix.
pub fn snapshot_local(basis: Pauli, bit: u8) -> [Complex64; 4] {
    let u = basis.basis_change();
    // U†|b⟩ is the conjugated b-th row of U
    let v = [u[2 * bit as usize].conj(), u[2 * bit as usize + 1].conj()];
    let mut m = [Complex64::new(0.0, 0.0); 4];
    for r in 0..2 {
        for c in 0..2 {
            m[2 * r + c] = 3.0 * v[r] * v[c].conj();
        }
    }
    m[0] -= 1.0;
    m[3] -= 1.0;
    m
}

/// `Tr(ρ̂_a ρ̂_b)` for two single-qubit snapshots: 5 for equal basis and bit,
/// −4 for equal basis and opposite bit, 1/2 for different bases.
pub fn local_overlap(basis_a: Pauli, bit_a: u8, basis_b: Pauli, bit_b: u8) -> f64 {
    if basis_a != basis_b {
        0.5
    } else if bit_a == bit_b {
        5.0
    } else {
        -4.0
    }
}

fn diag_in_bases(rho: &DensityMatrix, bases: &[Pauli]) -> Vec<f64> {
    let mut rotated = rho.clone();
    for (q, b) in bases.iter().enumerate() {
        if *b != Pauli::Z {
            rotated
                .apply_1q_unitary(q, &b.basis_change())
                .expect("basis qubit in range");
        }
    }
    rotated.probabilities()
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn index_to_bits(index: usize, n: usize) -> Vec<u8> {
    (0..n).map(|q| ((index >> (n - 1 - q)) & 1) as u8).collect()
}

fn shot_rng(seed: u64, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    rng
}

/// `m` shots, each with an independent uniform Pauli basis per qubit, sampled
/// from the exact outcome distribution of `rho` and optionally corrupted by the
/// profile's readout error. Shot `k` draws from its own RNG stream derived
/// from `seed`, so the result does not depend on thread scheduling.
pub fn measure_random_pauli(
    rho: &DensityMatrix,
    m: usize,
    seed: u64,
    readout: Option<&DeviceProfile>,
) -> Result<SnapshotSet, ShadowError> {
    if m == 0 {
        return Err(ShadowError::ZeroShots);
    }
    let n = rho.n_qubits();
    let mut rngs: Vec<ChaCha8Rng> = (0..m).map(|k| shot_rng(seed, k)).collect();
    let bases: Vec<Vec<Pauli>> = rngs
        .iter_mut()
        .map(|rng| (0..n).map(|_| Pauli::random(rng)).collect())
        .collect();
    let mut distinct: BTreeMap<Vec<Pauli>, Vec<f64>> = BTreeMap::new();
    for b in &bases {
        distinct.entry(b.clone()).or_default();
    }
    distinct
        .par_iter_mut()
        .for_each(|(b, probs)| *probs = diag_in_bases(rho, b));
    let records = rngs
        .into_par_iter()
        .zip(bases)
        .map(|(mut rng, bases)| {
            let idx = sample_index(&distinct[&bases], &mut rng);
            let mut bits = index_to_bits(idx, n);
            if let Some(profile) = readout {
                bits = apply_readout_error(&bits, profile, &mut rng);
            }
            SnapshotRecord { bases, bits }
        })
        .collect();
    Ok(SnapshotSet { n_qubits: n, records })
}

/// Shots measured in fixed bases.
pub fn measure_in_bases<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    bases: &[Pauli],
    shots: usize,
    rng: &mut R,
) -> SnapshotSet {
    let probs = diag_in_bases(rho, bases);
    let n = rho.n_qubits();
    let records = (0..shots)
        .map(|_| SnapshotRecord {
            bases: bases.to_vec(),
            bits: index_to_bits(sample_index(&probs, rng), n),
        })
        .collect();
    SnapshotSet { n_qubits: n, records }
}

fn kron(a: &[Complex64], da: usize, b: &[Complex64; 4]) -> Vec<Complex64> {
    let d = da * 2;
    let mut out = vec![Complex64::new(0.0, 0.0); d * d];
    for ra in 0..da {
        for ca in 0..da {
            let x = a[ra * da + ca];
            for rb in 0..2 {
                for cb in 0..2 {
                    out[(ra * 2 + rb) * d + ca * 2 + cb] = x * b[rb * 2 + cb];
                }
            }
        }
    }
    out
}

/// Dense `⊗_n snapshot_local(U_{m,n}, b_{m,n})` for one record.
pub fn record_matrix(record: &SnapshotRecord) -> Vec<Complex64> {
    let mut acc = vec![Complex64::new(1.0, 0.0)];
    let mut d = 1;
    for (b, bit) in record.bases.iter().zip(&record.bits) {
        acc = kron(&acc, d, &snapshot_local(*b, *bit));
        d *= 2;
    }
    acc
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check(&self) -> Result<(), ShadowError> {
        for r in &self.records {
            if r.bases.len() != self.n_qubits || r.bits.len() != self.n_qubits {
                return Err(ShadowError::Decode(format!(
                    "record has {} bases and {} bits for {} qubits",
                    r.bases.len(),
                    r.bits.len(),
                    self.n_qubits
                )));
            }
            if r.bits.iter().any(|b| *b > 1) {
                return Err(ShadowError::Decode("outcome bit outside {0, 1}".into()));
            }
        }
        Ok(())
    }

    /// First `m` records (or all of them).
    pub fn truncated(&self, m: usize) -> SnapshotSet {
        SnapshotSet {
            n_qubits: self.n_qubits,
            records: self.records.iter().take(m).cloned().collect(),
        }
    }

    /// Per-qubit `(basis, bit)` code in `0..6`, packed per record.
    fn record_codes(&self) -> BTreeMap<Vec<u8>, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.records {
            let key: Vec<u8> = r
                .bases
                .iter()
                .zip(&r.bits)
                .map(|(b, bit)| b.code() * 2 + bit)
                .collect();
            *hist.entry(key).or_insert(0) += 1;
        }
        hist
    }

    /// `header {n_qubits: u32, M: u32}` then, per record, 2-bit basis codes
    /// (X=0, Y=1, Z=2; four per byte, qubit 0 in the low bits) followed by the
    /// outcome bits (eight per byte, qubit 0 in the low bit). Little-endian,
    /// each block padded to a byte boundary.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ShadowError> {
        self.check()?;
        let n = self.n_qubits;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        let basis_bytes = (2 * n).div_ceil(8);
        let bit_bytes = n.div_ceil(8);
        let mut buf = vec![0u8; basis_bytes + bit_bytes];
        for r in &self.records {
            buf.iter_mut().for_each(|b| *b = 0);
            for (q, b) in r.bases.iter().enumerate() {
                buf[q / 4] |= b.code() << (2 * (q % 4));
            }
            for (q, bit) in r.bits.iter().enumerate() {
                buf[basis_bytes + q / 8] |= bit << (q % 8);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ShadowError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let m = u32::from_le_bytes(word) as usize;
        let basis_bytes = (2 * n).div_ceil(8);
        let bit_bytes = n.div_ceil(8);
        let mut buf = vec![0u8; basis_bytes + bit_bytes];
        let mut records = Vec::with_capacity(m);
        for _ in 0..m {
            r.read_exact(&mut buf)?;
            let bases = (0..n)
                .map(|q| {
                    let code = (buf[q / 4] >> (2 * (q % 4))) & 0b11;
                    Pauli::from_code(code)
                        .ok_or_else(|| ShadowError::Decode(format!("invalid basis code {code}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let bits = (0..n).map(|q| (buf[basis_bytes + q / 8] >> (q % 8)) & 1).collect();
            records.push(SnapshotRecord { bases, bits });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ShadowError::Decode(format!("{} trailing bytes", rest.len())));
        }
        Ok(SnapshotSet { n_qubits: n, records })
    }
}

/// Sidecar metadata stored next to a binary snapshot file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub seed: u64,
    pub profile_name: String,
    pub circuit_id: usize,
}

/// `ρ̂ = (1/M) Σ_m ⊗_n (3U†|b⟩⟨b|U − I)`. Unit trace but not necessarily PSD.
pub fn reconstruct_state(snaps: &SnapshotSet) -> Result<DensityMatrix, ShadowError> {
    if snaps.n_qubits > MAX_QUBITS {
        return Err(ShadowError::TooManyQubits(snaps.n_qubits));
    }
    if snaps.is_empty() {
        return Err(ShadowError::Empty);
    }
    snaps.check()?;
    let dim = 1usize << snaps.n_qubits;
    let mut acc = vec![Complex64::new(0.0, 0.0); dim * dim];
    for (key, count) in snaps.record_codes() {
        let record = SnapshotRecord {
            bases: key.iter().map(|c| Pauli::from_code(c / 2).unwrap()).collect(),
            bits: key.iter().map(|c| c % 2).collect(),
        };
        let term = record_matrix(&record);
        for (a, t) in acc.iter_mut().zip(term) {
            *a += t * count as f64;
        }
    }
    let m = snaps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(DensityMatrix::from_matrix(snaps.n_qubits, acc).expect("shape matches"))
}

/// How self-overlaps treat the `m = m'` terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalConvention {
    /// Drop `m = m'` pairs (U-statistic, unbiased for `Tr(ρ²)`).
    #[default]
    Exclude,
    /// Keep all `M²` pairs, as in the plain plug-in formula.
    Include,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityEstimate {
    pub value: f64,
    pub overlap: f64,
    pub self_i: f64,
    pub self_j: f64,
    /// A self-overlap estimate was non-positive; `value` then uses `|·|`.
    pub unreliable: bool,
}

impl FidelityEstimate {
    fn from_parts(overlap: f64, self_i: f64, self_j: f64) -> Self {
        let unreliable = self_i <= 0.0 || self_j <= 0.0;
        let denom = (self_i * self_j).abs().sqrt();
        let value = if denom > 0.0 { overlap / denom } else { f64::NAN };
        FidelityEstimate {
            value,
            overlap,
            self_i,
            self_j,
            unreliable,
        }
    }
}

type CodeHist = BTreeMap<Vec<u8>, usize>;

fn product_overlap(a: &[u8], b: &[u8]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| local_overlap(Pauli::from_code(x / 2).unwrap(), x % 2, Pauli::from_code(y / 2).unwrap(), y % 2))
        .product()
}

/// `(1/(M_a M_b)) Σ_{m,m'} Π_n Tr(ρ̂_{a,m,n} ρ̂_{b,m',n})`.
fn cross_sum(a: &CodeHist, b: &CodeHist, ma: usize, mb: usize) -> f64 {
    let mut s = 0.0;
    for (ka, ca) in a {
        for (kb, cb) in b {
            s += (*ca * *cb) as f64 * product_overlap(ka, kb);
        }
    }
    s / (ma as f64 * mb as f64)
}

fn self_sum(h: &CodeHist, m: usize, n_qubits: usize, convention: DiagonalConvention) -> f64 {
    let all = cross_sum(h, h, m, m) * (m * m) as f64;
    match convention {
        DiagonalConvention::Include => all / (m * m) as f64,
        DiagonalConvention::Exclude => {
            let diag = m as f64 * 5f64.powi(n_qubits as i32);
            (all - diag) / (m as f64 * (m as f64 - 1.0))
        }
    }
}

/// Classical-shadow cross-platform fidelity in product form; never builds a
/// `2^N × 2^N` matrix.
pub fn cs_fidelity(
    snaps_i: &SnapshotSet,
    snaps_j: &SnapshotSet,
    convention: DiagonalConvention,
) -> Result<FidelityEstimate, ShadowError> {
    if snaps_i.n_qubits != snaps_j.n_qubits {
        return Err(ShadowError::QubitMismatch(snaps_i.n_qubits, snaps_j.n_qubits));
    }
    for s in [snaps_i, snaps_j] {
        if s.len() < 2 {
            return Err(ShadowError::TooFewRecords { need: 2, got: s.len() });
        }
        s.check()?;
    }
    let (hi, hj) = (snaps_i.record_codes(), snaps_j.record_codes());
    let (mi, mj) = (snaps_i.len(), snaps_j.len());
    let n = snaps_i.n_qubits;
    Ok(FidelityEstimate::from_parts(
        cross_sum(&hi, &hj, mi, mj),
        self_sum(&hi, mi, n, convention),
        self_sum(&hj, mj, n, convention),
    ))
}

/// Empirical (or exact) outcome distributions per random basis setting.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    pub n_qubits: usize,
    pub settings: Vec<Vec<Pauli>>,
    /// One distribution of length `2^N` per setting.
    pub probs: Vec<Vec<f64>>,
    /// Shots per setting; `None` for exact distributions.
    pub shots: Option<usize>,
}

/// Stratified random basis settings: whole cycles through all `3^N` local
/// Pauli settings (each cycle shuffled), then independent uniform draws for
/// the remainder. When `count` is a multiple of `3^N` the setting average is
/// an exact local 2-design average, so exact tables give exact overlaps.
pub fn random_settings<R: Rng + ?Sized>(n_qubits: usize, count: usize, rng: &mut R) -> Vec<Vec<Pauli>> {
    use rand::seq::SliceRandom;
    let total = 3usize.checked_pow(n_qubits as u32).unwrap_or(usize::MAX);
    let mut out = Vec::with_capacity(count);
    if total <= count {
        let all: Vec<Vec<Pauli>> = (0..total)
            .map(|mut k| {
                (0..n_qubits)
                    .map(|_| {
                        let p = Pauli::ALL[k % 3];
                        k /= 3;
                        p
                    })
                    .collect()
            })
            .collect();
        while out.len() + total <= count {
            let mut cycle = all.clone();
            cycle.shuffle(rng);
            out.extend(cycle);
        }
    }
    while out.len() < count {
        out.push((0..n_qubits).map(|_| Pauli::random(rng)).collect());
    }
    out
}

/// Outcome distribution of `rho` for each setting: exact when `shots` is
/// `None`, otherwise frequencies of `shots` samples (setting `k` uses RNG
/// stream `k` of `seed`).
pub fn prob_table(
    rho: &DensityMatrix,
    settings: &[Vec<Pauli>],
    shots: Option<usize>,
    seed: u64,
    readout: Option<&DeviceProfile>,
) -> Result<ProbTable, ShadowError> {
    if rho.n_qubits() > MAX_QUBITS {
        return Err(ShadowError::TooManyQubits(rho.n_qubits()));
    }
    if shots == Some(0) {
        return Err(ShadowError::ZeroShots);
    }
    let n = rho.n_qubits();
    let probs = settings
        .par_iter()
        .enumerate()
        .map(|(k, setting)| {
            let exact = diag_in_bases(rho, setting);
            match shots {
                None => exact,
                Some(s) => {
                    let mut rng = shot_rng(seed, k);
                    let mut freq = vec![0.0; exact.len()];
                    for _ in 0..s {
                        let mut idx = sample_index(&exact, &mut rng);
                        if let Some(profile) = readout {
                            let bits = apply_readout_error(&index_to_bits(idx, n), profile, &mut rng);
                            idx = bits.iter().fold(0, |acc, b| (acc << 1) | *b as usize);
                        }
                        freq[idx] += 1.0;
                    }
                    freq.iter_mut().for_each(|f| *f /= s as f64);
                    freq
                }
            }
        })
        .collect();
    Ok(ProbTable {
        n_qubits: n,
        settings: settings.to_vec(),
        probs,
        shots,
    })
}

/// Applies `f^{⊗N}` with `f = [[1, −1/2], [−1/2, 1]]`, i.e. the
/// `(−2)^{−D[b,b']}` Hamming kernel, in `O(N·2^N)`.
fn hamming_kernel(p: &[f64], n: usize) -> Vec<f64> {
    let mut v = p.to_vec();
    for q in 0..n {
        let bit = 1usize << q;
        for i in 0..v.len() {
            if i & bit == 0 {
                let (a, b) = (v[i], v[i | bit]);
                v[i] = a - 0.5 * b;
                v[i | bit] = b - 0.5 * a;
            }
        }
    }
    v
}

fn setting_overlaps(ti: &ProbTable, tj: &ProbTable) -> Result<Vec<f64>, ShadowError> {
    if ti.n_qubits != tj.n_qubits {
        return Err(ShadowError::QubitMismatch(ti.n_qubits, tj.n_qubits));
    }
    if ti.settings != tj.settings {
        return Err(ShadowError::MismatchedSettings);
    }
    if ti.settings.is_empty() {
        return Err(ShadowError::Empty);
    }
    Ok(ti
        .probs
        .iter()
        .zip(&tj.probs)
        .map(|(pi, pj)| {
            let k = hamming_kernel(pj, ti.n_qubits);
            pi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

/// `2^N Σ_{b,b'} (−2)^{−D[b,b']} · mean_U P_i(b) P_j(b')`.
pub fn cc_overlap(table_i: &ProbTable, table_j: &ProbTable) -> Result<f64, ShadowError> {
    let per = setting_overlaps(table_i, table_j)?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((1usize << table_i.n_qubits) as f64 * mean)
}

/// `Tr(ρ²)` from one table. With finite shots the `b = b'` self-pairing bias
/// is removed: `E[P̂(b)P̂(b')] = P(b)P(b')(1 − 1/S) + δ_{bb'}P(b)/S`.
pub fn cc_purity(table: &ProbTable) -> Result<f64, ShadowError> {
    let raw = cc_overlap(table, table)?;
    Ok(match table.shots {
        None => raw,
        Some(s) if s > 1 => {
            let d = (1usize << table.n_qubits) as f64;
            (s as f64 * raw - d) / (s as f64 - 1.0)
        }
        Some(_) => raw,
    })
}

/// Cross-correlation fidelity estimate `Tr(ρ_iρ_j)/√(Tr ρ_i² · Tr ρ_j²)`.
pub fn cc_fidelity(table_i: &ProbTable, table_j: &ProbTable) -> Result<FidelityEstimate, ShadowError> {
    Ok(FidelityEstimate::from_parts(
        cc_overlap(table_i, table_j)?,
        cc_purity(table_i)?,
        cc_purity(table_j)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{Gate, NoiseSpec};
    use crate::qsim::{apply_gate, overlap, purity};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn close4(a: &[Complex64; 4], b: [Complex64; 4]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).norm() < 1e-12)
    }

    #[test]
    fn local_snapshots() {
        assert!(close4(&snapshot_local(Pauli::Z, 0), [c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)]));
        assert!(close4(&snapshot_local(Pauli::Z, 1), [c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(2.0, 0.0)]));
        assert!(close4(&snapshot_local(Pauli::X, 0), [c(0.5, 0.0), c(1.5, 0.0), c(1.5, 0.0), c(0.5, 0.0)]));
        // Y eigenstate |+i⟩: 3|+i⟩⟨+i| − I
        assert!(close4(&snapshot_local(Pauli::Y, 0), [c(0.5, 0.0), c(0.0, -1.5), c(0.0, 1.5), c(0.5, 0.0)]));
    }

    #[test]
    fn local_snapshot_trace_and_spectrum() {
        for b in Pauli::ALL {
            for bit in 0..2 {
                let m = snapshot_local(b, bit);
                assert!((m[0] + m[3] - 1.0).norm() < 1e-12);
                // eigenvalues of a 2×2 Hermitian matrix from trace/determinant
                let det = (m[0] * m[3] - m[1] * m[2]).re;
                assert!((det + 2.0).abs() < 1e-12, "det {det}");
            }
        }
    }

    #[test]
    fn local_overlap_table_matches_matrices() {
        for a in Pauli::ALL {
            for b in Pauli::ALL {
                for (x, y) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (ma, mb) = (snapshot_local(a, x), snapshot_local(b, y));
                    let tr: Complex64 = (0..2)
                        .flat_map(|r| (0..2).map(move |k| (r, k)))
                        .map(|(r, k)| ma[r * 2 + k] * mb[k * 2 + r])
                        .sum();
                    assert!((tr.re - local_overlap(a, x, b, y)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forced_basis_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero = DensityMatrix::zero_state(1).unwrap();
        let s = measure_in_bases(&zero, &[Pauli::Z], 200, &mut rng);
        assert!(s.records.iter().all(|r| r.bits == vec![0]));
        let plus = apply_gate(&zero, &Gate::ry(0, std::f64::consts::FRAC_PI_2)).unwrap();
        let s = measure_in_bases(&plus, &[Pauli::X], 200, &mut rng);
        assert!(s.records.iter().all(|r| r.bits == vec![0]));
    }

    #[test]
    fn mixed_state_bit_frequency() {
        let mixed = DensityMatrix::maximally_mixed(1).unwrap();
        let s = measure_random_pauli(&mixed, 100_000, 17, None).unwrap();
        let ones: usize = s.records.iter().map(|r| r.bits[0] as usize).sum();
        let f = ones as f64 / 1e5;
        assert!((f - 0.5).abs() < 0.01, "{f}");
        let basis_z = s.records.iter().filter(|r| r.bases[0] == Pauli::Z).count() as f64 / 1e5;
        assert!((basis_z - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let rho = DensityMatrix::maximally_mixed(3).unwrap();
        let a = measure_random_pauli(&rho, 300, 5, None).unwrap();
        let b = measure_random_pauli(&rho, 300, 5, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, measure_random_pauli(&rho, 300, 6, None).unwrap());
        assert!(matches!(measure_random_pauli(&rho, 0, 5, None), Err(ShadowError::ZeroShots)));
    }

    #[test]
    fn readout_error_applies_to_snapshots() {
        let mut p = crate::circuits::builtin_profile("device_a", 1).unwrap();
        if let NoiseSpec::Calibrated(cal) = &mut p.noise {
            cal.qubits[0].prob_meas1_prep0 = 1.0;
        }
        let zero = DensityMatrix::zero_state(1).unwrap();
        let s = measure_random_pauli(&zero, 50, 1, Some(&p)).unwrap();
        for r in &s.records {
            if r.bases[0] == Pauli::Z {
                assert_eq!(r.bits[0], 1);
            }
        }
    }

    #[test]
    fn reconstruct_single_record() {
        let s = SnapshotSet {
            n_qubits: 2,
            records: vec![SnapshotRecord { bases: vec![Pauli::Z, Pauli::Z], bits: vec![0, 0] }],
        };
        let rho = reconstruct_state(&s).unwrap();
        let expected = [4.0, -2.0, -2.0, 1.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((rho.get(i, i).re - e).abs() < 1e-12);
        }
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
        let empty = SnapshotSet { n_qubits: 2, records: vec![] };
        assert!(matches!(reconstruct_state(&empty), Err(ShadowError::Empty)));
    }

    #[test]
    fn reconstruction_converges() {
        let zero = DensityMatrix::zero_state(1).unwrap();
        let dist = |m: usize| {
            let s = measure_random_pauli(&zero, m, 123, None).unwrap();
            let r = reconstruct_state(&s).unwrap();
            r.data().iter().zip(zero.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
        };
        let (d_small, d_large) = (dist(1_000), dist(100_000));
        assert!(d_large < d_small);
        // O(1/√M): the single-qubit shadow variance gives ≈ 2.8/√M
        assert!(d_large < 0.03, "{d_large}");
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let s = SnapshotSet {
            n_qubits: 5,
            records: vec![
                SnapshotRecord {
                    bases: vec![Pauli::X, Pauli::Y, Pauli::Z, Pauli::Z, Pauli::Y],
                    bits: vec![1, 0, 1, 1, 0],
                },
                SnapshotRecord {
                    bases: vec![Pauli::Z; 5],
                    bits: vec![0; 5],
                },
            ],
        };
        let mut bytes = Vec::new();
        s.write_binary(&mut bytes).unwrap();
        // header 8 + per record (2 basis bytes + 1 bit byte)
        assert_eq!(bytes.len(), 8 + 2 * 3);
        assert_eq!(&bytes[0..8], &[5, 0, 0, 0, 2, 0, 0, 0]);
        // X=0 | Y=1<<2 | Z=2<<4 | Z=2<<6 ; Y=1
        assert_eq!(bytes[8], 0b1010_0100);
        assert_eq!(bytes[9], 0b01);
        assert_eq!(bytes[10], 0b01101);
        assert_eq!(SnapshotSet::read_binary(&bytes[..]).unwrap(), s);

        let mut bad = bytes.clone();
        bad[9] = 0b11;
        assert!(matches!(SnapshotSet::read_binary(&bad[..]), Err(ShadowError::Decode(_))));
        bytes.push(0);
        assert!(SnapshotSet::read_binary(&bytes[..]).is_err());
    }

    fn dense_trace(a: &[Complex64], b: &[Complex64], dim: usize) -> f64 {
        let mut s = 0.0;
        for r in 0..dim {
            for k in 0..dim {
                s += (a[r * dim + k] * b[k * dim + r]).re;
            }
        }
        s
    }

    /// Dense evaluation of the shadow fidelity from per-record matrices.
    fn dense_cs(a: &SnapshotSet, b: &SnapshotSet, convention: DiagonalConvention) -> f64 {
        let dim = 1 << a.n_qubits;
        let ma: Vec<_> = a.records.iter().map(record_matrix).collect();
        let mb: Vec<_> = b.records.iter().map(record_matrix).collect();
        let pair = |x: &[Vec<Complex64>], y: &[Vec<Complex64>], same: bool| {
            let mut s = 0.0;
            let mut count = 0.0;
            for (i, p) in x.iter().enumerate() {
                for (j, q) in y.iter().enumerate() {
                    if same && i == j && convention == DiagonalConvention::Exclude {
                        continue;
                    }
                    s += dense_trace(p, q, dim);
                    count += 1.0;
                }
            }
            s / count
        };
        pair(&ma, &mb, false) / (pair(&ma, &ma, true) * pair(&mb, &mb, true)).sqrt()
    }

    #[test]
    fn product_form_matches_dense() {
        let mut rho = DensityMatrix::zero_state(2).unwrap();
        rho = apply_gate(&rho, &Gate::ry(0, 0.9)).unwrap();
        rho = apply_gate(&rho, &Gate::cnot(0, 1)).unwrap();
        let sigma = crate::qsim::apply_depolarizing2(&rho, (0, 1), 0.3).unwrap();
        let a = measure_random_pauli(&rho, 50, 1, None).unwrap();
        let b = measure_random_pauli(&sigma, 50, 2, None).unwrap();
        for conv in [DiagonalConvention::Exclude, DiagonalConvention::Include] {
            let est = cs_fidelity(&a, &b, conv).unwrap();
            let dense = dense_cs(&a, &b, conv);
            assert!((est.value - dense).abs() < 1e-9, "{conv:?}: {} vs {dense}", est.value);
        }
    }

    #[test]
    fn cs_precondition() {
        let rho = DensityMatrix::zero_state(2).unwrap();
        let a = measure_random_pauli(&rho, 1, 1, None).unwrap();
        let b = measure_random_pauli(&rho, 10, 2, None).unwrap();
        assert!(matches!(
            cs_fidelity(&a, &b, DiagonalConvention::Exclude),
            Err(ShadowError::TooFewRecords { need: 2, got: 1 })
        ));
    }

    #[test]
    fn cs_same_pure_state_is_near_one() {
        let mut rho = DensityMatrix::zero_state(2).unwrap();
        rho = apply_gate(&rho, &Gate::rx(1, 1.3)).unwrap();
        rho = apply_gate(&rho, &Gate::cnot(1, 0)).unwrap();
        let a = measure_random_pauli(&rho, 10_000, 10, None).unwrap();
        let b = measure_random_pauli(&rho, 10_000, 11, None).unwrap();
        let est = cs_fidelity(&a, &b, DiagonalConvention::Exclude).unwrap();
        assert!((est.value - 1.0).abs() < 0.1, "{est:?}");
        assert!(!est.unreliable);
        // self-estimate with the unbiased convention
        let selfie = cs_fidelity(&a, &a, DiagonalConvention::Exclude).unwrap();
        assert!((selfie.self_i - purity(&rho)).abs() < 0.15, "{selfie:?}");
    }

    #[test]
    fn hamming_coefficient() {
        // D(00, 01) = 1 → (−2)^{−1}
        let p = [0.0, 1.0, 0.0, 0.0];
        let k = hamming_kernel(&p, 2);
        assert!((k[0] + 0.5).abs() < 1e-15);
        assert!((k[1] - 1.0).abs() < 1e-15);
        assert!((k[3] + 0.5).abs() < 1e-15);
        assert!((k[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cc_single_qubit_hand_values() {
        // N = 1 table with one Z setting: 2·(P0² + P1² − P0·P1)
        let t = ProbTable {
            n_qubits: 1,
            settings: vec![vec![Pauli::Z]],
            probs: vec![vec![0.75, 0.25]],
            shots: None,
        };
        let expected = 2.0 * (0.75f64.powi(2) + 0.25f64.powi(2) - 0.75 * 0.25);
        assert!((cc_overlap(&t, &t).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn cc_exact_tables_recover_overlaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rho = DensityMatrix::zero_state(3).unwrap();
        for g in [Gate::ry(0, 0.7), Gate::cnot(0, 1), Gate::rx(2, 2.1), Gate::cnot(1, 2)] {
            rho = apply_gate(&rho, &g).unwrap();
        }
        let settings = random_settings(3, 2000, &mut rng);
        let t = prob_table(&rho, &settings, None, 0, None).unwrap();
        assert!((cc_overlap(&t, &t).unwrap() - 1.0).abs() < 0.05);
        let mixed = DensityMatrix::maximally_mixed(3).unwrap();
        let tm = prob_table(&mixed, &settings, None, 0, None).unwrap();
        let expected = overlap(&rho, &mixed).unwrap();
        // every distribution of I/8 is uniform, so the estimate is exact
        assert!((cc_overlap(&t, &tm).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.125).abs() < 1e-15);
    }

    #[test]
    fn cc_complete_cycles_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rho = DensityMatrix::zero_state(2).unwrap();
        rho = apply_gate(&rho, &Gate::rx(0, 0.4)).unwrap();
        rho = apply_gate(&rho, &Gate::cnot(0, 1)).unwrap();
        rho = apply_gate(&rho, &Gate::ry(1, 2.2)).unwrap();
        let settings = random_settings(2, 108, &mut rng);
        let mut counts = BTreeMap::new();
        for s in &settings {
            *counts.entry(s.clone()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 9);
        assert!(counts.values().all(|c| *c == 12));
        let t = prob_table(&rho, &settings, None, 0, None).unwrap();
        assert!((cc_overlap(&t, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cc_setting_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = DensityMatrix::zero_state(2).unwrap();
        let a = prob_table(&rho, &random_settings(2, 5, &mut rng), None, 0, None).unwrap();
        let b = prob_table(&rho, &random_settings(2, 5, &mut rng), None, 0, None).unwrap();
        assert!(matches!(cc_overlap(&a, &b), Err(ShadowError::MismatchedSettings)));
    }

    #[test]
    fn cc_finite_shot_purity_is_debiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho = crate::qsim::apply_depolarizing2(
            &apply_gate(&DensityMatrix::zero_state(2).unwrap(), &Gate::ry(0, 1.0)).unwrap(),
            (0, 1),
            0.4,
        )
        .unwrap();
        let settings = random_settings(2, 400, &mut rng);
        let t = prob_table(&rho, &settings, Some(20), 3, None).unwrap();
        let est = cc_purity(&t).unwrap();
        let raw = cc_overlap(&t, &t).unwrap();
        let truth = purity(&rho);
        assert!((est - truth).abs() < (raw - truth).abs());
        assert!((est - truth).abs() < 0.05, "{est} vs {truth}");
    }
}
