//! Dataset construction, persistence, splits and metrics.
//!
//! A dataset holds `n_circuits` random circuits, each run on every noise level
//! of one device family. Each (circuit, level) pair is a *state* with its own
//! snapshot file and DAG; each unordered pair of levels of the same circuit is
//! a labelled *record* whose label is the exact cross fidelity.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::circuits::{sample_circuit, transpile, Circuit, CircuitError, DeviceProfile, NoiseSpec};
use crate::dagenc::{circuit_to_dag, CircuitDag, DagError};
use crate::mcnet::{build_measurement_features, Branch, McNet, ModelError, PairSample, StateInput};
use crate::qsim::{cross_fidelity, purity, run_circuit, DensityMatrix, QsimError, MAX_QUBITS};
use crate::shadows::{
    cc_fidelity, cs_fidelity, measure_random_pauli, prob_table, random_settings, DiagonalConvention, ProbTable,
    ShadowError, SnapshotSet, SnapshotSidecar,
};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_LAYERS: usize = 20;
pub const NOISE_RANGE: (f64, f64) = (0.01, 0.1);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("size limit: {0}")]
    TooLarge(String),
    #[error("dataset at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{0}")]
    Metric(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_qubits: usize,
    pub n_circuits: usize,
    pub n_levels: usize,
    pub m_shots: usize,
    pub seed: u64,
    /// Device family; every level is `profile.at_noise_level(level)`.
    pub profile: DeviceProfile,
    pub layers: usize,
    /// Explicit noise levels; sampled from [`NOISE_RANGE`] when absent.
    pub levels: Option<Vec<f64>>,
}

impl DatasetConfig {
    pub fn new(n_qubits: usize, n_circuits: usize, n_levels: usize, m_shots: usize, seed: u64, profile: DeviceProfile) -> Self {
        DatasetConfig {
            n_qubits,
            n_circuits,
            n_levels,
            m_shots,
            seed,
            profile,
            layers: DEFAULT_LAYERS,
            levels: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_qubits > MAX_QUBITS {
            return Err(DataError::TooLarge(format!(
                "{} qubits exceeds the simulator limit of {MAX_QUBITS}",
                self.n_qubits
            )));
        }
        if self.n_qubits == 0 || self.n_circuits == 0 || self.m_shots < 2 || self.layers == 0 {
            return Err(DataError::Config(
                "qubits, circuits and layers must be positive and shots at least 2".into(),
            ));
        }
        let levels = self.levels.as_ref().map_or(self.n_levels, Vec::len);
        if levels < 2 {
            return Err(DataError::Config(format!("need at least 2 noise levels, got {levels}")));
        }
        if self.profile.n_qubits != self.n_qubits {
            return Err(DataError::Config(format!(
                "profile `{}` has {} qubits, dataset asks for {}",
                self.profile.name, self.profile.n_qubits, self.n_qubits
            )));
        }
        Ok(())
    }
}

/// Independent 64-bit seed for a labelled sub-stream.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub state_id: usize,
    pub circuit_id: usize,
    pub level_index: usize,
    pub level: f64,
    pub profile_name: String,
    pub snapshot_seed: u64,
    pub purity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub record_id: usize,
    pub circuit_id: usize,
    pub state_i: usize,
    pub state_j: usize,
    pub level_i: f64,
    pub level_j: f64,
    pub fidelity: f64,
    pub purity_i: f64,
    pub purity_j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub levels: Vec<f64>,
    /// Logical (pre-transpilation) circuits, indexed by circuit id.
    pub circuits: Vec<Circuit>,
    pub states: Vec<StateEntry>,
    pub snapshots: Vec<SnapshotSet>,
    pub dags: Vec<CircuitDag>,
    pub records: Vec<SampleRecord>,
}

fn readout_profile(p: &DeviceProfile) -> Option<&DeviceProfile> {
    match p.noise {
        NoiseSpec::Calibrated(_) => Some(p),
        NoiseSpec::Depolarizing { .. } => None,
    }
}

/// Exact state of `circuit` on `profile` after compiling to its basis.
pub fn simulate(circuit: &Circuit, profile: &DeviceProfile) -> Result<(Circuit, DensityMatrix)> {
    let compiled = transpile(circuit, profile)?;
    let rho = run_circuit(&compiled, profile)?;
    Ok((compiled, rho))
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let levels = match &config.levels {
        Some(l) => {
            if let Some(bad) = l.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(DataError::Config(format!("noise level {bad} outside [0, 1]")));
            }
            l.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "levels", 0));
            // one uniform draw per equal-width bin: uniform marginal, full coverage
            let width = (NOISE_RANGE.1 - NOISE_RANGE.0) / config.n_levels as f64;
            (0..config.n_levels)
                .map(|k| NOISE_RANGE.0 + width * (k as f64 + rng.gen::<f64>()))
                .collect()
        }
    };
    let circuits = (0..config.n_circuits)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "circuit", c as u64));
            sample_circuit(config.n_qubits, config.layers, &mut rng)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let nl = levels.len();
    let jobs: Vec<(usize, usize)> = (0..config.n_circuits)
        .flat_map(|c| (0..nl).map(move |l| (c, l)))
        .collect();
    let simulated = jobs
        .par_iter()
        .map(|&(c, l)| -> Result<_> {
            let state_id = c * nl + l;
            let profile = config.profile.at_noise_level(levels[l]);
            let (compiled, rho) = simulate(&circuits[c], &profile)?;
            let seed = derive_seed(config.seed, "snapshots", state_id as u64);
            let snaps = measure_random_pauli(&rho, config.m_shots, seed, readout_profile(&profile))?;
            let dag = circuit_to_dag(&compiled, &profile)?;
            let entry = StateEntry {
                state_id,
                circuit_id: c,
                level_index: l,
                level: levels[l],
                profile_name: profile.name.clone(),
                snapshot_seed: seed,
                purity: purity(&rho),
            };
            Ok((entry, snaps, dag, rho))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states = Vec::with_capacity(simulated.len());
    let mut snapshots = Vec::with_capacity(simulated.len());
    let mut dags = Vec::with_capacity(simulated.len());
    let mut rhos = Vec::with_capacity(simulated.len());
    for (e, s, d, r) in simulated {
        states.push(e);
        snapshots.push(s);
        dags.push(d);
        rhos.push(r);
    }
    let mut records = Vec::new();
    for c in 0..config.n_circuits {
        for a in 0..nl {
            for b in a + 1..nl {
                let (si, sj) = (c * nl + a, c * nl + b);
                records.push(SampleRecord {
                    record_id: records.len(),
                    circuit_id: c,
                    state_i: si,
                    state_j: sj,
                    level_i: levels[a],
                    level_j: levels[b],
                    fidelity: cross_fidelity(&rhos[si], &rhos[sj])?,
                    purity_i: states[si].purity,
                    purity_j: states[sj].purity,
                });
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        levels,
        circuits,
        states,
        snapshots,
        dags,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordIndexEntry {
    pub record_id: usize,
    pub circuit_id: usize,
    pub state_i: usize,
    pub state_j: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_qubits: usize,
    pub m_shots: usize,
    pub layers: usize,
    pub levels: Vec<f64>,
    pub base_profile: DeviceProfile,
    pub profiles: Vec<String>,
    pub circuit_ids: Vec<usize>,
    pub states: Vec<StateEntry>,
    pub record_index: Vec<RecordIndexEntry>,
    /// SHA-256 of every other file, keyed by relative path.
    pub files: std::collections::BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn state_stem(id: usize) -> String {
    format!("state_{id:05}")
}

pub const LABELS_HEADER: &str = "record_id,circuit_id,level_i,level_j,fidelity,purity_i,purity_j";

impl Dataset {
    pub fn labels_csv(&self) -> String {
        let mut s = format!("{LABELS_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.record_id, r.circuit_id, r.level_i, r.level_j, r.fidelity, r.purity_i, r.purity_j
            ));
        }
        s
    }

    /// Writes the dataset directory; the manifest is written last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with(dir, &[])
    }

    /// Like [`Dataset::save`], plus extra top-level files that the manifest
    /// also hashes.
    pub fn save_with(&self, dir: &Path, extra: &[(&str, &[u8])]) -> Result<()> {
        fs::create_dir_all(dir.join("snapshots"))?;
        fs::create_dir_all(dir.join("dags"))?;
        let mut files = std::collections::BTreeMap::new();
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            fs::write(dir.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
            Ok(())
        };
        let circuits = serde_json::to_vec_pretty(&self.circuits).expect("circuits serialize");
        put("circuits.json".into(), circuits)?;
        put("labels.csv".into(), self.labels_csv().into_bytes())?;
        for (name, bytes) in extra {
            put(name.to_string(), bytes.to_vec())?;
        }
        for (st, (snaps, dag)) in self.states.iter().zip(self.snapshots.iter().zip(&self.dags)) {
            let stem = state_stem(st.state_id);
            let mut bin = Vec::new();
            snaps.write_binary(&mut bin)?;
            put(format!("snapshots/{stem}.bin"), bin)?;
            let side = SnapshotSidecar {
                seed: st.snapshot_seed,
                profile_name: st.profile_name.clone(),
                circuit_id: st.circuit_id,
            };
            put(
                format!("snapshots/{stem}.json"),
                serde_json::to_vec_pretty(&side).expect("sidecar serializes"),
            )?;
            put(format!("dags/{stem}.json"), dag.to_json().into_bytes())?;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            seed: self.config.seed,
            n_qubits: self.config.n_qubits,
            m_shots: self.config.m_shots,
            layers: self.config.layers,
            levels: self.levels.clone(),
            base_profile: self.config.profile.clone(),
            profiles: self.states.iter().map(|s| s.profile_name.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
            circuit_ids: (0..self.circuits.len()).collect(),
            states: self.states.clone(),
            record_index: self
                .records
                .iter()
                .map(|r| RecordIndexEntry {
                    record_id: r.record_id,
                    circuit_id: r.circuit_id,
                    state_i: r.state_i,
                    state_j: r.state_j,
                })
                .collect(),
            files,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    /// Loads a dataset directory, checking every file against its manifest
    /// hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |reason: String| DataError::Corrupt {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| corrupt(format!("manifest.json: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", manifest.version)));
        }
        let read = |rel: &str| -> Result<Vec<u8>> {
            let want = manifest
                .files
                .get(rel)
                .ok_or_else(|| corrupt(format!("{rel} missing from manifest")))?;
            let bytes = fs::read(dir.join(rel))?;
            if &sha256_hex(&bytes) != want {
                return Err(corrupt(format!("{rel}: hash mismatch")));
            }
            Ok(bytes)
        };
        let circuits: Vec<Circuit> =
            serde_json::from_slice(&read("circuits.json")?).map_err(|e| corrupt(format!("circuits.json: {e}")))?;
        let mut snapshots = Vec::new();
        let mut dags = Vec::new();
        for st in &manifest.states {
            let stem = state_stem(st.state_id);
            snapshots.push(SnapshotSet::read_binary(&read(&format!("snapshots/{stem}.bin"))?[..])?);
            let text = String::from_utf8(read(&format!("dags/{stem}.json"))?)
                .map_err(|_| corrupt(format!("dags/{stem}.json is not UTF-8")))?;
            dags.push(CircuitDag::from_json(&text)?);
        }
        let labels = String::from_utf8(read("labels.csv")?).map_err(|_| corrupt("labels.csv is not UTF-8".into()))?;
        let mut lines = labels.lines();
        if lines.next() != Some(LABELS_HEADER) {
            return Err(corrupt("labels.csv header".into()));
        }
        let mut records = Vec::new();
        for (line, idx) in lines.zip(&manifest.record_index) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| corrupt(format!("labels.csv: bad line `{line}`")))
            };
            records.push(SampleRecord {
                record_id: idx.record_id,
                circuit_id: idx.circuit_id,
                state_i: idx.state_i,
                state_j: idx.state_j,
                level_i: num(2)?,
                level_j: num(3)?,
                fidelity: num(4)?,
                purity_i: num(5)?,
                purity_j: num(6)?,
            });
        }
        if records.len() != manifest.record_index.len() {
            return Err(corrupt("labels.csv and record index disagree".into()));
        }
        let n_levels = manifest.levels.len();
        Ok(Dataset {
            config: DatasetConfig {
                n_qubits: manifest.n_qubits,
                n_circuits: circuits.len(),
                n_levels,
                m_shots: manifest.m_shots,
                seed: manifest.seed,
                profile: manifest.base_profile.clone(),
                layers: manifest.layers,
                levels: Some(manifest.levels.clone()),
            },
            levels: manifest.levels,
            circuits,
            states: manifest.states,
            snapshots,
            dags,
            records,
        })
    }

    /// Profile a state was simulated on.
    pub fn state_profile(&self, state: usize) -> DeviceProfile {
        self.config.profile.at_noise_level(self.states[state].level)
    }

    /// Re-simulates a state exactly.
    pub fn state_rho(&self, state: usize) -> Result<DensityMatrix> {
        let st = &self.states[state];
        Ok(simulate(&self.circuits[st.circuit_id], &self.state_profile(state))?.1)
    }

    /// Model inputs for every state, optionally with measurements truncated to
    /// the first `shots` records.
    pub fn state_inputs(&self, shots: Option<usize>) -> Result<Vec<StateInput>> {
        self.snapshots
            .iter()
            .zip(&self.dags)
            .map(|(s, d)| {
                let s = match shots {
                    Some(m) => s.truncated(m),
                    None => s.clone(),
                };
                Ok(StateInput {
                    features: build_measurement_features(&s, None)?,
                    dag: d.clone(),
                })
            })
            .collect()
    }

    pub fn pairs(&self, records: &[usize]) -> Vec<PairSample> {
        records
            .iter()
            .map(|&r| {
                let rec = &self.records[r];
                PairSample {
                    i: rec.state_i,
                    j: rec.state_j,
                    label: rec.fidelity,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_circuits: Vec<usize>,
    pub test_circuits: Vec<usize>,
    pub train_records: Vec<usize>,
    pub test_records: Vec<usize>,
}

/// Holds out whole circuits: `round(test_fraction · circuits)` circuit ids,
/// chosen by a seeded shuffle, with all their records.
pub fn split_by_circuit(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    let ids: BTreeSet<usize> = ds.records.iter().map(|r| r.circuit_id).collect();
    let mut ids: Vec<usize> = ids.into_iter().collect();
    if ids.len() < 2 {
        return Err(DataError::Config(format!("need at least 2 circuits to split, got {}", ids.len())));
    }
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    if !(0.0..1.0).contains(&test_fraction) || n_test == 0 || n_test >= ids.len() {
        return Err(DataError::Config(format!(
            "test fraction {test_fraction} of {} circuits leaves an empty side",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)));
    let mut test_circuits: Vec<usize> = ids[..n_test].to_vec();
    let mut train_circuits: Vec<usize> = ids[n_test..].to_vec();
    test_circuits.sort_unstable();
    train_circuits.sort_unstable();
    let (test_records, train_records): (Vec<usize>, Vec<usize>) = ds
        .records
        .iter()
        .map(|r| r.record_id)
        .partition(|&r| test_circuits.binary_search(&ds.records[r].circuit_id).is_ok());
    Ok(Split {
        train_circuits,
        test_circuits,
        train_records,
        test_records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// `None` when the labels have zero variance.
    pub r2: Option<f64>,
    /// Relative MSE; `None` when a label is zero.
    pub rmse: Option<f64>,
    pub count: usize,
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(DataError::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

pub fn r2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(DataError::Metric("R² undefined: labels have zero variance".into()));
    }
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean of `((F − F̂)/F)²`.
pub fn relative_mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    if labels.contains(&0.0) {
        return Err(DataError::Metric("relative MSE undefined: a label is zero".into()));
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, y)| ((y - p) / y).powi(2))
        .sum::<f64>()
        / preds.len() as f64)
}

pub fn metrics(preds: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mse: mse(preds, labels)?,
        r2: r2(preds, labels).ok(),
        rmse: relative_mse(preds, labels).ok(),
        count: preds.len(),
    })
}

/// One CSV row per state: `state_id, device, circuit_id, v_0 … v_{D−1}`.
pub fn export_representations(model: &McNet, ds: &Dataset, states: &[usize], branch: Branch) -> Result<String> {
    let inputs = ds.state_inputs(None)?;
    let refs: Vec<&StateInput> = states.iter().map(|&s| &inputs[s]).collect();
    let reps = model.represent(&refs, branch)?;
    let d = model.config.d;
    let mut out = String::from("state_id,device,circuit_id");
    for k in 0..d {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for (&s, v) in states.iter().zip(&reps) {
        let st = &ds.states[s];
        out.push_str(&format!("{},{},{}", s, st.profile_name, st.circuit_id));
        for x in v {
            out.push_str(&format!(",{x:.16e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Cs,
    Cc,
}

impl std::str::FromStr for BaselineMethod {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(BaselineMethod::Cs),
            "cc" => Ok(BaselineMethod::Cc),
            other => Err(DataError::Config(format!("unknown baseline method `{other}` (expected cs or cc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOptions {
    pub method: BaselineMethod,
    /// Cs: use only the first `shots` stored snapshots of each state.
    pub shots_override: Option<usize>,
    pub convention: DiagonalConvention,
    /// Cc: number of random basis settings and shots per setting.
    pub cc_settings: usize,
    pub cc_shots: usize,
    pub seed: u64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            method: BaselineMethod::Cs,
            shots_override: None,
            convention: DiagonalConvention::Exclude,
            cc_settings: 50,
            cc_shots: 4,
            seed: 0,
        }
    }
}

/// Estimated fidelity of every listed record.
///
/// Cs reuses the stored snapshots. Cc re-simulates both states and draws
/// fresh measurements in shared random settings.
pub fn run_baseline(ds: &Dataset, records: &[usize], opts: &BaselineOptions) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|&r| -> Result<f64> {
            let rec = &ds.records[r];
            match opts.method {
                BaselineMethod::Cs => {
                    let get = |s: usize| match opts.shots_override {
                        Some(m) => ds.snapshots[s].truncated(m),
                        None => ds.snapshots[s].clone(),
                    };
                    Ok(cs_fidelity(&get(rec.state_i), &get(rec.state_j), opts.convention)?.value)
                }
                BaselineMethod::Cc => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "cc-settings", r as u64));
                    let settings = random_settings(ds.config.n_qubits, opts.cc_settings, &mut rng);
                    let table = |s: usize| -> Result<ProbTable> {
                        let profile = ds.state_profile(s);
                        let rho = ds.state_rho(s)?;
                        let seed = derive_seed(opts.seed, "cc-shots", s as u64);
                        Ok(prob_table(&rho, &settings, Some(opts.cc_shots), seed, readout_profile(&profile))?)
                    };
                    Ok(cc_fidelity(&table(rec.state_i)?, &table(rec.state_j)?)?.value)
                }
            }
        })
        .collect()
}

/// Per-record estimates as CSV: `record_id,label,prediction`.
pub fn predictions_csv(ds: &Dataset, records: &[usize], preds: &[f64]) -> String {
    let mut s = String::from("record_id,label,prediction\n");
    for (&r, p) in records.iter().zip(preds) {
        s.push_str(&format!("{},{:.16e},{:.16e}\n", r, ds.records[r].fidelity, p));
    }
    s
}
