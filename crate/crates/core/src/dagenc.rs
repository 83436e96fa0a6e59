//! Circuit-to-graph encoding: one node per gate plus an INPUT and OUTPUT node
//! per wire, edges in execution order, and per-node feature vectors carrying
//! gate type, device noise, qubit placement and position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{Circuit, CircuitError, DeviceProfile, GateKind, NoiseSpec};

/// T1/T2 are divided by this before entering a feature vector.
pub const COHERENCE_SCALE_US: f64 = 150.0;

/// Length of the gate-type one-hot block (the global kind table).
pub const VOCAB_LEN: usize = GateKind::ALL.len();

#[derive(Debug, Error)]
pub enum DagError {
    #[error("{kind} is not a basis gate of profile `{profile}`")]
    NotInBasis { kind: GateKind, profile: String },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("malformed DAG: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DagNode {
    pub node_id: usize,
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircuitDag {
    pub nodes: Vec<DagNode>,
    /// Directed `(src, dst)` pairs. Two CNOTs back to back on the same pair
    /// are joined by one edge per shared wire.
    pub edges: Vec<(usize, usize)>,
    pub feature_dim: usize,
}

/// Width of the noise block for a profile: `[p]` under the depolarizing model,
/// `[T1, T2, gate error, prob_meas0_prep1, prob_meas1_prep0]` otherwise.
pub fn noise_block_len(profile: &DeviceProfile) -> usize {
    match profile.noise {
        NoiseSpec::Depolarizing { .. } => 1,
        NoiseSpec::Calibrated(_) => 5,
    }
}

pub fn feature_dim(profile: &DeviceProfile) -> usize {
    VOCAB_LEN + noise_block_len(profile) + profile.n_qubits + 1
}

fn scaled_time(t: f64) -> f64 {
    if t.is_finite() {
        t / COHERENCE_SCALE_US
    } else {
        0.0
    }
}

/// Feature vector of one node: gate-type one-hot, noise block, qubit
/// (multi-)hot, and `node_index / node_count`.
pub fn node_features(
    kind: GateKind,
    qubits: &[usize],
    node_index: usize,
    node_count: usize,
    profile: &DeviceProfile,
) -> Vec<f64> {
    let mut f = vec![0.0; feature_dim(profile)];
    let kind_pos = GateKind::ALL.iter().position(|k| *k == kind).expect("kind in table");
    f[kind_pos] = 1.0;
    let noise = &mut f[VOCAB_LEN..VOCAB_LEN + noise_block_len(profile)];
    match &profile.noise {
        NoiseSpec::Depolarizing { p } => {
            if kind == GateKind::Cnot {
                noise[0] = *p;
            }
        }
        NoiseSpec::Calibrated(_) => {
            let cals: Vec<_> = qubits.iter().filter_map(|&q| profile.qubit_calibration(q)).collect();
            if !cals.is_empty() {
                let mean = |g: &dyn Fn(&crate::circuits::QubitCalibration) -> f64| {
                    cals.iter().map(|c| g(c)).sum::<f64>() / cals.len() as f64
                };
                noise[0] = mean(&|c| scaled_time(c.t1_us));
                noise[1] = mean(&|c| scaled_time(c.t2_us));
                if kind.is_executable() {
                    noise[2] = profile.gate_error(kind);
                }
                if kind == GateKind::Output {
                    noise[3] = mean(&|c| c.prob_meas0_prep1);
                    noise[4] = mean(&|c| c.prob_meas1_prep0);
                }
            }
        }
    }
    let qubit_offset = VOCAB_LEN + noise_block_len(profile);
    for &q in qubits {
        f[qubit_offset + q] = 1.0;
    }
    *f.last_mut().unwrap() = node_index as f64 / node_count as f64;
    f
}

/// Builds the DAG of a circuit that is already expressed in `profile`'s basis.
/// Node ids: INPUT nodes `0..N`, gates in program order, then OUTPUT nodes.
pub fn circuit_to_dag(circuit: &Circuit, profile: &DeviceProfile) -> Result<CircuitDag, DagError> {
    circuit.validate()?;
    if circuit.n_qubits > profile.n_qubits {
        return Err(CircuitError::DoesNotFit {
            profile: profile.name.clone(),
            needed: circuit.n_qubits,
            available: profile.n_qubits,
        }
        .into());
    }
    if let Some(g) = circuit.gates.iter().find(|g| !profile.basis_gates.contains(&g.kind)) {
        return Err(DagError::NotInBasis {
            kind: g.kind,
            profile: profile.name.clone(),
        });
    }
    let n = circuit.n_qubits;
    let node_count = circuit.gates.len() + 2 * n;
    let mut nodes = Vec::with_capacity(node_count);
    let mut edges = Vec::new();
    let mut last: Vec<usize> = (0..n).collect();
    let push = |kind: GateKind, qubits: Vec<usize>, nodes: &mut Vec<DagNode>| {
        let id = nodes.len();
        nodes.push(DagNode {
            node_id: id,
            kind,
            feature: node_features(kind, &qubits, id, node_count, profile),
            qubits,
        });
        id
    };
    for q in 0..n {
        push(GateKind::Input, vec![q], &mut nodes);
    }
    for gate in &circuit.gates {
        let id = push(gate.kind, gate.qubits.clone(), &mut nodes);
        for &q in &gate.qubits {
            edges.push((last[q], id));
            last[q] = id;
        }
    }
    for q in 0..n {
        let id = push(GateKind::Output, vec![q], &mut nodes);
        edges.push((last[q], id));
    }
    Ok(CircuitDag {
        nodes,
        edges,
        feature_dim: feature_dim(profile),
    })
}

#[derive(Serialize, Deserialize)]
struct DagJson {
    nodes: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
}

impl CircuitDag {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Kahn traversal; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(s, d) in &self.edges {
            indeg[d] += 1;
            out[s].push(d);
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = ready.pop_first() {
            order.push(u);
            for &v in &out[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.insert(v);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Distinct direct predecessors of every node.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut inn: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &(s, d) in &self.edges {
            if !inn[d].contains(&s) {
                inn[d].push(s);
            }
        }
        inn
    }

    pub fn kind_histogram(&self) -> std::collections::BTreeMap<GateKind, usize> {
        let mut h = std::collections::BTreeMap::new();
        for node in &self.nodes {
            *h.entry(node.kind).or_insert(0) += 1;
        }
        h
    }

    /// `{"nodes": [[features…]…], "edges": [[s, d]…]}`.
    pub fn to_json(&self) -> String {
        let doc = DagJson {
            nodes: self.nodes.iter().map(|n| n.feature.clone()).collect(),
            edges: self.edges.clone(),
        };
        serde_json::to_string(&doc).expect("dag serializes")
    }

    /// Inverse of [`CircuitDag::to_json`]. Node kinds are recovered from the
    /// one-hot block and qubits (ascending) from the qubit block.
    pub fn from_json(text: &str) -> Result<Self, DagError> {
        let doc: DagJson = serde_json::from_str(text).map_err(|e| DagError::Malformed(e.to_string()))?;
        let feature_dim = doc.nodes.first().map(Vec::len).unwrap_or(0);
        let n = doc.nodes.len();
        if doc.nodes.iter().any(|f| f.len() != feature_dim) {
            return Err(DagError::Malformed("ragged feature vectors".into()));
        }
        if feature_dim < VOCAB_LEN + 1 && n > 0 {
            return Err(DagError::Malformed(format!("feature_dim {feature_dim} too small")));
        }
        if let Some(&(s, d)) = doc.edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(DagError::Malformed(format!("edge ({s}, {d}) out of range")));
        }
        let input_count = doc
            .nodes
            .iter()
            .filter(|f| f[GateKind::ALL.iter().position(|k| *k == GateKind::Input).unwrap()] == 1.0)
            .count();
        let nodes = doc
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, feature)| {
                let kind_pos = feature[..VOCAB_LEN]
                    .iter()
                    .position(|x| *x == 1.0)
                    .ok_or_else(|| DagError::Malformed(format!("node {id} has no gate type")))?;
                // the qubit block sits right before the trailing index scalar
                let qubit_start = feature_dim - 1 - input_count;
                let qubits = (0..input_count).filter(|&q| feature[qubit_start + q] == 1.0).collect();
                Ok(DagNode {
                    node_id: id,
                    kind: GateKind::ALL[kind_pos],
                    qubits,
                    feature,
                })
            })
            .collect::<Result<Vec<_>, DagError>>()?;
        let dag = CircuitDag {
            nodes,
            edges: doc.edges,
            feature_dim,
        };
        if dag.topological_order().is_none() {
            return Err(DagError::Malformed("graph has a cycle".into()));
        }
        Ok(dag)
    }
}
