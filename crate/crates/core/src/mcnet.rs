//! The two-branch fidelity network.
//!
//! A measurement branch (pointwise 1-D convolutions shared across snapshot
//! records, mean pooling, MLP) and a circuit branch (mean-neighbourhood graph
//! convolutions over the circuit DAG, mean pooling, MLP) each map one state to
//! a vector; a fusion layer merges them and the cosine of two states'
//! vectors is the predicted fidelity. Both states of a pair go through the
//! same parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{DeviceProfile, NoiseSpec};
use crate::dagenc::{CircuitDag, COHERENCE_SCALE_US};
use crate::shadows::{snapshot_local, SnapshotSet};
use crate::tensornet::{
    kaiming_uniform, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average the raw records, then transform.
    EarlyAverage,
    /// Transform every record, then average.
    LazyAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Sum,
    Concat,
    Lrbp,
    Attention,
}

impl std::str::FromStr for Fusion {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "concat" => Ok(Fusion::Concat),
            "lrbp" => Ok(Fusion::Lrbp),
            "attention" => Ok(Fusion::Attention),
            _ => Err(ModelError::Config(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// Which part of the network produces the representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Measurement,
    Circuit,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_qubits: usize,
    /// Per-record measurement feature length (8N plus any noise suffix).
    pub measurement_dim: usize,
    /// DAG node feature length.
    pub node_dim: usize,
    /// Representation length `D` (= D1 = D2).
    pub d: usize,
    /// Bilinear rank `D3 ≤ D`.
    pub d3: usize,
    pub aggregation: Aggregation,
    pub fusion: Fusion,
    pub conv_widths: Vec<usize>,
    pub graph_layers: usize,
    pub graph_width: usize,
    pub glimpses: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_qubits: 4,
            measurement_dim: 32,
            node_dim: 0,
            d: 256,
            d3: 256,
            aggregation: Aggregation::LazyAverage,
            fusion: Fusion::Lrbp,
            conv_widths: vec![64, 128, 256],
            graph_layers: 3,
            graph_width: 64,
            glimpses: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.d3 == 0 || self.d3 > self.d {
            return bad(format!("need 0 < d3 ≤ d, got d = {}, d3 = {}", self.d, self.d3));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return bad(format!("conv widths must be positive, got {:?}", self.conv_widths));
        }
        if self.measurement_dim == 0 || self.node_dim == 0 {
            return bad("measurement_dim and node_dim must be positive".into());
        }
        if self.graph_layers == 0 || self.graph_width == 0 {
            return bad("graph convolution needs at least one positive-width layer".into());
        }
        if self.fusion == Fusion::Attention && self.glimpses == 0 {
            return bad("attention fusion needs at least one glimpse".into());
        }
        Ok(())
    }
}

/// One record → `8N` reals: every qubit's local snapshot `3U†|b⟩⟨b|U − I`
/// flattened row-major with real and imaginary parts interleaved.
pub fn record_features(snaps: &SnapshotSet, record: usize) -> Vec<f64> {
    let r = &snaps.records[record];
    let mut out = Vec::with_capacity(8 * snaps.n_qubits);
    for (basis, &bit) in r.bases.iter().zip(&r.bits) {
        for z in snapshot_local(*basis, bit) {
            out.push(z.re);
            out.push(z.im);
        }
    }
    out
}

/// Noise suffix appended to every record when a profile is supplied:
/// `[p]` for the depolarizing model, otherwise per qubit
/// `[T1/150, T2/150, prob_meas0_prep1, prob_meas1_prep0]` followed by the
/// CNOT error.
pub fn noise_suffix(profile: &DeviceProfile) -> Vec<f64> {
    match &profile.noise {
        NoiseSpec::Depolarizing { p } => vec![*p],
        NoiseSpec::Calibrated(cal) => {
            let scale = |t: f64| if t.is_finite() { t / COHERENCE_SCALE_US } else { 0.0 };
            let mut v: Vec<f64> = cal
                .qubits
                .iter()
                .flat_map(|q| [scale(q.t1_us), scale(q.t2_us), q.prob_meas0_prep1, q.prob_meas1_prep0])
                .collect();
            v.push(profile.gate_error(crate::circuits::GateKind::Cnot));
            v
        }
    }
}

/// `M × F` feature matrix of a snapshot set.
pub fn build_measurement_features(snaps: &SnapshotSet, profile: Option<&DeviceProfile>) -> Result<Tensor> {
    if snaps.is_empty() {
        return Err(ModelError::Input("snapshot set is empty".into()));
    }
    let suffix = profile.map(noise_suffix).unwrap_or_default();
    let f = 8 * snaps.n_qubits + suffix.len();
    let mut data = Vec::with_capacity(snaps.len() * f);
    for m in 0..snaps.len() {
        data.extend(record_features(snaps, m));
        data.extend_from_slice(&suffix);
    }
    Ok(Tensor::matrix(snaps.len(), f, data)?)
}

/// `⟨a, b⟩ / (‖a‖‖b‖ + 1e-12)`, not clamped.
pub fn fidelity_head(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + crate::tensornet::COSINE_EPS)
}

pub fn purity_head(v: &[f64], w: &[f64]) -> Result<f64> {
    if v.len() != w.len() {
        return Err(ModelError::Input(format!(
            "purity head: representation has {} entries, weights {}",
            v.len(),
            w.len()
        )));
    }
    Ok(v.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// Mean cosine similarity over all unordered pairs `i < j`.
pub fn kdevice_fidelity(vs: &[Vec<f64>]) -> Result<f64> {
    if vs.len() < 2 {
        return Err(ModelError::Input(format!("need at least 2 representations, got {}", vs.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            total += fidelity_head(&vs[i], &vs[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn mse_loss(pred: &[f64], labels: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(ModelError::Input(format!(
            "mse over {} predictions and {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// Model input for one state.
#[derive(Clone, Debug)]
pub struct StateInput {
    pub features: Tensor,
    pub dag: CircuitDag,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    name: String,
}

#[derive(Clone, Debug)]
enum FusionParams {
    Sum { w1: ParamId, w2: ParamId, p: ParamId },
    Concat { lin: Linear },
    Lrbp { a: ParamId, b: ParamId, p: ParamId },
    Attention { c: ParamId, dm: ParamId, q: ParamId, a: ParamId, b: ParamId, p: ParamId },
}

#[derive(Clone, Debug)]
pub struct McNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    conv: Vec<(Linear, Norm)>,
    mea_mlp: Vec<Linear>,
    gconv: Vec<Linear>,
    circ_mlp: Vec<Linear>,
    fusion: FusionParams,
    purity_w: ParamId,
}

/// Parameters copied into a graph, indexed by `ParamId`.
pub struct Bound(Vec<Var>);

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Output of a forward pass over a batch of states.
pub struct Forward {
    /// `[states, D]`.
    pub reps: Var,
    pub batch_stats: Vec<(String, crate::tensornet::BatchStats)>,
}

impl McNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let linear = |ps: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| Linear {
            w: ps.add(&format!("{name}.w"), kaiming_uniform(vec![i, o], i, rng)),
            b: ps.add(&format!("{name}.b"), Tensor::zeros(vec![1, o])),
        };
        let mut conv = Vec::new();
        let mut width = config.measurement_dim;
        for (k, &w) in config.conv_widths.iter().enumerate() {
            let lin = linear(&mut ps, &format!("mea.conv{k}"), width, w, &mut rng);
            let name = format!("mea.bn{k}");
            let norm = Norm {
                gamma: ps.add(&format!("{name}.gamma"), Tensor::matrix(1, w, vec![1.0; w])?),
                beta: ps.add(&format!("{name}.beta"), Tensor::zeros(vec![1, w])),
                name: name.clone(),
            };
            ps.set_buffer(&format!("{name}.mean"), vec![0.0; w]);
            ps.set_buffer(&format!("{name}.var"), vec![1.0; w]);
            conv.push((lin, norm));
            width = w;
        }
        let d = config.d;
        let mea_mlp = vec![
            linear(&mut ps, "mea.mlp0", width, d, &mut rng),
            linear(&mut ps, "mea.mlp1", d, d, &mut rng),
        ];
        let mut gconv = Vec::new();
        let mut width = config.node_dim;
        for k in 0..config.graph_layers {
            gconv.push(linear(&mut ps, &format!("circ.gc{k}"), width, config.graph_width, &mut rng));
            width = config.graph_width;
        }
        let circ_mlp = vec![
            linear(&mut ps, "circ.mlp0", width, d, &mut rng),
            linear(&mut ps, "circ.mlp1", d, d, &mut rng),
        ];
        let d3 = config.d3;
        let mut mat = |ps: &mut ParamStore, name: &str, i: usize, o: usize| {
            ps.add(name, kaiming_uniform(vec![i, o], i, &mut rng))
        };
        let fusion = match config.fusion {
            Fusion::Sum => FusionParams::Sum {
                w1: mat(&mut ps, "fuse.w1", d, d),
                w2: mat(&mut ps, "fuse.w2", d, d),
                p: mat(&mut ps, "fuse.p", d, d),
            },
            Fusion::Concat => {
                let w = mat(&mut ps, "fuse.w", 2 * d, d);
                FusionParams::Concat {
                    lin: Linear {
                        w,
                        b: ps.add("fuse.b", Tensor::zeros(vec![1, d])),
                    },
                }
            }
            Fusion::Lrbp => FusionParams::Lrbp {
                a: mat(&mut ps, "fuse.a", d, d3),
                b: mat(&mut ps, "fuse.b", d, d3),
                p: mat(&mut ps, "fuse.p", d3, d),
            },
            Fusion::Attention => {
                let (g, h) = (config.glimpses, config.graph_width);
                FusionParams::Attention {
                    c: mat(&mut ps, "fuse.att_c", d, d3),
                    dm: mat(&mut ps, "fuse.att_d", h, d3),
                    q: mat(&mut ps, "fuse.att_q", d3, g),
                    a: mat(&mut ps, "fuse.a", d, d3),
                    b: mat(&mut ps, "fuse.b", g * h, d3),
                    p: mat(&mut ps, "fuse.p", d3, d),
                }
            }
        };
        let purity_w = ps.add("head.purity.w", Tensor::zeros(vec![d, 1]));
        Ok(McNet {
            config,
            params: ps,
            conv,
            mea_mlp,
            gconv,
            circ_mlp,
            fusion,
            purity_w,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.ids().map(|id| g.param(&self.params, id)).collect())
    }

    /// Binds caller-provided variables (in parameter order) instead of copies
    /// of the stored values; used for gradient checks.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Input(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound(vars.to_vec()))
    }

    fn lin(&self, g: &mut Graph, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.get(l.w), p.get(l.b))?)
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, layers: &[Linear], mut x: Var) -> Result<Var> {
        for (k, &l) in layers.iter().enumerate() {
            x = self.lin(g, p, l, x)?;
            if k + 1 < layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    fn conv_blocks(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        train: bool,
        stats: &mut Vec<(String, crate::tensornet::BatchStats)>,
    ) -> Result<Var> {
        for (lin, norm) in &self.conv {
            x = g.conv1d(x, p.get(lin.w), p.get(lin.b), 1)?;
            x = g.relu(x);
            x = if train {
                let (y, s) = g.batchnorm_train(x, p.get(norm.gamma), p.get(norm.beta))?;
                stats.push((norm.name.clone(), s));
                y
            } else {
                let mean = self.params.buffer(&format!("{}.mean", norm.name)).expect("bn buffer");
                let var = self.params.buffer(&format!("{}.var", norm.name)).expect("bn buffer");
                g.batchnorm_eval(x, p.get(norm.gamma), p.get(norm.beta), mean, var)?
            };
        }
        Ok(x)
    }

    /// Measurement branch over a batch, `[states, D]`.
    pub fn meanet(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &[&StateInput],
        train: bool,
        stats: &mut Vec<(String, crate::tensornet::BatchStats)>,
    ) -> Result<Var> {
        if states.iter().any(|s| s.features.rows() == 0) {
            return Err(ModelError::Input("a state has no measurement records".into()));
        }
        let f = self.config.measurement_dim;
        if let Some(s) = states.iter().find(|s| s.features.cols() != f) {
            return Err(ModelError::Input(format!(
                "measurement features have {} columns, model expects {f}",
                s.features.cols()
            )));
        }
        let lengths: Vec<usize> = states.iter().map(|s| s.features.rows()).collect();
        let data: Vec<f64> = states.iter().flat_map(|s| s.features.data.iter().copied()).collect();
        let x = g.constant(Tensor::matrix(lengths.iter().sum(), f, data)?);
        let pooled = match self.config.aggregation {
            Aggregation::LazyAverage => {
                let h = self.conv_blocks(g, p, x, train, stats)?;
                g.segment_mean(h, &lengths)?
            }
            Aggregation::EarlyAverage => {
                let m = g.segment_mean(x, &lengths)?;
                self.conv_blocks(g, p, m, train, stats)?
            }
        };
        self.mlp(g, p, &self.mea_mlp, pooled)
    }

    /// Graph convolutions over a batch of DAGs; returns node features
    /// `[Σ nodes, graph_width]` and per-DAG node counts.
    fn graph_nodes(&self, g: &mut Graph, p: &Bound, states: &[&StateInput]) -> Result<(Var, Vec<usize>)> {
        let nd = self.config.node_dim;
        let mut data = Vec::new();
        let mut lists = Vec::new();
        let mut counts = Vec::new();
        let mut offset = 0;
        for s in states {
            let dag = &s.dag;
            if dag.nodes.is_empty() {
                return Err(ModelError::Input("circuit DAG has no nodes".into()));
            }
            if dag.feature_dim != nd {
                return Err(ModelError::Input(format!(
                    "DAG node features have {} entries, model expects {nd}",
                    dag.feature_dim
                )));
            }
            for node in &dag.nodes {
                data.extend_from_slice(&node.feature);
            }
            for (u, inn) in dag.in_neighbors().into_iter().enumerate() {
                let mut l = vec![offset + u];
                l.extend(inn.into_iter().map(|v| offset + v));
                lists.push(l);
            }
            counts.push(dag.nodes.len());
            offset += dag.nodes.len();
        }
        let lists = Arc::new(lists);
        let mut h = g.constant(Tensor::matrix(offset, nd, data)?);
        for &l in &self.gconv {
            let agg = g.gather_mean(h, lists.clone())?;
            let z = self.lin(g, p, l, agg)?;
            h = g.relu(z);
        }
        Ok((h, counts))
    }

    /// Circuit branch over a batch, `[states, D]`.
    pub fn circuitnet(&self, g: &mut Graph, p: &Bound, states: &[&StateInput]) -> Result<Var> {
        let (h, counts) = self.graph_nodes(g, p, states)?;
        let pooled = g.segment_mean(h, &counts)?;
        self.mlp(g, p, &self.circ_mlp, pooled)
    }

    fn lrbp(g: &mut Graph, x: Var, y: Var, a: Var, b: Var, pm: Var) -> Result<Var> {
        let xa = g.matmul(x, a)?;
        let xa = g.tanh(xa);
        let yb = g.matmul(y, b)?;
        let yb = g.tanh(yb);
        let h = g.hadamard(xa, yb)?;
        Ok(g.matmul(h, pm)?)
    }

    /// Fuses branch outputs `x`, `y` (`[states, D]`). Attention mode also
    /// needs the circuit node features.
    fn fuse(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        y: Var,
        nodes: Option<(Var, &[usize])>,
    ) -> Result<Var> {
        match &self.fusion {
            FusionParams::Sum { w1, w2, p: pm } => {
                let a = g.matmul(x, p.get(*w1))?;
                let b = g.matmul(y, p.get(*w2))?;
                let s = g.add(a, b)?;
                Ok(g.matmul(s, p.get(*pm))?)
            }
            FusionParams::Concat { lin } => {
                let c = g.concat_cols(&[x, y])?;
                self.lin(g, p, *lin, c)
            }
            FusionParams::Lrbp { a, b, p: pm } => Self::lrbp(g, x, y, p.get(*a), p.get(*b), p.get(*pm)),
            FusionParams::Attention { c, dm, q, a, b, p: pm } => {
                let (h, counts) = nodes.ok_or_else(|| ModelError::Input("attention needs node features".into()))?;
                let g_count = self.config.glimpses;
                let hw = self.config.graph_width;
                let xc = g.matmul(x, p.get(*c))?;
                let xc = g.tanh(xc);
                let hd = g.matmul(h, p.get(*dm))?;
                let hd = g.tanh(hd);
                let mut attended = Vec::with_capacity(counts.len());
                let mut start = 0;
                for (u, &n) in counts.iter().enumerate() {
                    let hu = g.slice_rows(h, start, start + n)?;
                    let hdu = g.slice_rows(hd, start, start + n)?;
                    let xu = g.slice_rows(xc, u, u + 1)?;
                    let joint = g.mul_row(hdu, xu)?;
                    let logits = g.matmul(joint, p.get(*q))?;
                    let att = g.softmax(logits, 0)?;
                    let att_t = g.transpose(att)?;
                    let yg = g.matmul(att_t, hu)?;
                    attended.push(g.reshape(yg, vec![1, g_count * hw])?);
                    start += n;
                }
                let yatt = g.concat_rows(&attended)?;
                Self::lrbp(g, x, yatt, p.get(*a), p.get(*b), p.get(*pm))
            }
        }
    }

    /// Representations of a batch of states from the chosen branch.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &[&StateInput],
        branch: Branch,
        train: bool,
    ) -> Result<Forward> {
        if states.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut batch_stats = Vec::new();
        let reps = match branch {
            Branch::Measurement => self.meanet(g, p, states, train, &mut batch_stats)?,
            Branch::Circuit => self.circuitnet(g, p, states)?,
            Branch::Full => {
                let x = self.meanet(g, p, states, train, &mut batch_stats)?;
                if self.config.fusion == Fusion::Attention {
                    let (h, counts) = self.graph_nodes(g, p, states)?;
                    // the circuit MLP output is not used by attention fusion
                    let y = g.segment_mean(h, &counts)?;
                    self.fuse(g, p, x, y, Some((h, &counts)))?
                } else {
                    let y = self.circuitnet(g, p, states)?;
                    self.fuse(g, p, x, y, None)?
                }
            }
        };
        Ok(Forward { reps, batch_stats })
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, crate::tensornet::BatchStats)]) {
        for (name, s) in stats {
            for (key, batch) in [("mean", &s.mean), ("var", &s.var)] {
                let k = format!("{name}.{key}");
                let run = self.params.buffer(&k).expect("bn buffer").to_vec();
                let upd = run
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                    .collect();
                self.params.set_buffer(&k, upd);
            }
        }
    }

    /// Inference-mode representations, one row per state.
    pub fn represent(&self, states: &[&StateInput], branch: Branch) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(32) {
            let mut g = Graph::new();
            let p = self.bind(&mut g);
            let f = self.forward(&mut g, &p, chunk, branch, false)?;
            let t = g.value(f.reps);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn purity_weights(&self) -> &[f64] {
        &self.params.get(self.purity_w).data
    }

    /// Parameter-name prefixes for a branch.
    fn prefixes(branch: Branch) -> &'static [&'static str] {
        match branch {
            Branch::Measurement => &["mea."],
            Branch::Circuit => &["circ."],
            Branch::Full => &["mea.", "circ.", "fuse."],
        }
    }

    /// Marks exactly the parameters of `branch` trainable.
    fn select_trainable(&mut self, branch: Branch, freeze_branches: bool) {
        self.params.set_trainable("", false);
        for pre in Self::prefixes(branch) {
            self.params.set_trainable(pre, true);
        }
        if branch == Branch::Full && freeze_branches {
            self.params.set_trainable("mea.", false);
            self.params.set_trainable("circ.", false);
        }
    }

    /// Writes `<stem>.bin`, `<stem>.json` and `<stem>.config.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params.save(stem)?;
        std::fs::write(
            stem.with_extension("config.json"),
            serde_json::to_string_pretty(&self.config).expect("config serializes"),
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(stem.with_extension("config.json"))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("model config: {e}")))?;
        let mut m = McNet::new(config)?;
        m.params.load(stem)?;
        Ok(m)
    }
}

/// A labelled pair of states, by index into the state list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub i: usize,
    pub j: usize,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    /// Defaults to a tenth of `lr_stage1` when absent.
    pub lr_stage2: Option<f64>,
    pub seed: u64,
    /// Stage 2 updates only the fusion layer.
    pub freeze_branches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 30,
            epochs_stage2: 10,
            batch_size: 32,
            lr_stage1: 1e-3,
            lr_stage2: None,
            seed: 0,
            freeze_branches: false,
        }
    }
}

impl TrainConfig {
    pub fn stage2_lr(&self) -> f64 {
        self.lr_stage2.unwrap_or(self.lr_stage1 / 10.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mse: f64,
    pub test_r2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,epoch,train_loss,test_mse,test_r2\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e}\n",
                e.stage, e.epoch, e.train_loss, e.test_mse, e.test_r2
            ));
        }
        s
    }

    pub fn stage(&self, name: &str) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|e| e.stage == name).collect()
    }
}

/// Coefficient of determination; `NaN` when the labels are constant.
pub fn r2_score(pred: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = pred.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    if ss_tot == 0.0 {
        f64::NAN
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Predicted fidelities for `pairs` from one branch.
pub fn predict(model: &McNet, states: &[StateInput], pairs: &[PairSample], branch: Branch) -> Result<Vec<f64>> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.i, p.j]).collect();
    needed.sort_unstable();
    needed.dedup();
    let refs: Vec<&StateInput> = needed.iter().map(|&i| &states[i]).collect();
    let reps = model.represent(&refs, branch)?;
    let pos: BTreeMap<usize, usize> = needed.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    Ok(pairs
        .iter()
        .map(|p| fidelity_head(&reps[pos[&p.i]], &reps[pos[&p.j]]))
        .collect())
}

/// Test-set `(mse, r2)` of a branch.
pub fn evaluate(model: &McNet, states: &[StateInput], pairs: &[PairSample], branch: Branch) -> Result<(f64, f64)> {
    let pred = predict(model, states, pairs, branch)?;
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    Ok((mse_loss(&pred, &labels)?, r2_score(&pred, &labels)))
}

/// Loss of one batch with gradients accumulated into the store; returns the
/// batch loss.
fn batch_step(model: &mut McNet, states: &[StateInput], batch: &[PairSample], branch: Branch) -> Result<f64> {
    let mut uniq: Vec<usize> = batch.iter().flat_map(|p| [p.i, p.j]).collect();
    uniq.sort_unstable();
    uniq.dedup();
    let pos: BTreeMap<usize, usize> = uniq.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let refs: Vec<&StateInput> = uniq.iter().map(|&i| &states[i]).collect();
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let f = model.forward(&mut g, &p, &refs, branch, true)?;
    let ia = g.gather_rows(f.reps, Arc::new(batch.iter().map(|s| pos[&s.i]).collect()))?;
    let ib = g.gather_rows(f.reps, Arc::new(batch.iter().map(|s| pos[&s.j]).collect()))?;
    let cos = g.cosine_similarity(ia, ib)?;
    let y = g.constant(Tensor::matrix(batch.len(), 1, batch.iter().map(|s| s.label).collect())?);
    let loss = g.mse(cos, y)?;
    let value = g.data(loss)[0];
    if !value.is_finite() {
        return Err(ModelError::Diverged(format!("batch loss {value}")));
    }
    g.backward(loss)?;
    model.params.zero_grad();
    g.accumulate_into(&mut model.params);
    model.update_running_stats(&f.batch_stats);
    Ok(value)
}

/// Trains `branch` for `epochs` epochs; appends to `history` under `stage`.
#[allow(clippy::too_many_arguments)]
pub fn train_branch(
    model: &mut McNet,
    states: &[StateInput],
    train: &[PairSample],
    test: &[PairSample],
    branch: Branch,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    stage: &str,
    history: &mut History,
) -> Result<()> {
    if train.is_empty() {
        return Err(ModelError::Input("no training pairs".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    model.select_trainable(branch, cfg.freeze_branches);
    let mut adam = AdamState::new(AdamConfig { lr, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage.bytes().fold(0u64, |h, b| h.rotate_left(8) ^ b as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairSample> = chunk.iter().map(|&k| train[k]).collect();
            total += batch_step(model, states, &batch, branch)? * batch.len() as f64;
            adam.step(&mut model.params);
        }
        let (test_mse, test_r2) = if test.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(model, states, test, branch)?
        };
        history.epochs.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            train_loss: total / train.len() as f64,
            test_mse,
            test_r2,
        });
    }
    model.params.set_trainable("", true);
    Ok(())
}

/// Stage 1 trains the measurement and circuit branches separately (each one's
/// representation feeds the cosine head directly); stage 2 fine-tunes the
/// whole network, fusion included, at the smaller learning rate.
pub fn train_two_stage(
    model: &mut McNet,
    states: &[StateInput],
    train: &[PairSample],
    test: &[PairSample],
    cfg: &TrainConfig,
) -> Result<History> {
    let mut h = History::default();
    train_branch(model, states, train, test, Branch::Measurement, cfg.epochs_stage1, cfg.lr_stage1, cfg, "mea", &mut h)?;
    train_branch(model, states, train, test, Branch::Circuit, cfg.epochs_stage1, cfg.lr_stage1, cfg, "circ", &mut h)?;
    train_branch(model, states, train, test, Branch::Full, cfg.epochs_stage2, cfg.stage2_lr(), cfg, "finetune", &mut h)?;
    Ok(h)
}

/// Fits the purity head `w_Cᵀ v` on frozen full-network representations.
/// `targets` pairs state indices with purities. Returns the final train MSE.
pub fn train_purity_head(
    model: &mut McNet,
    states: &[StateInput],
    targets: &[(usize, f64)],
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(ModelError::Input("no purity targets".into()));
    }
    let refs: Vec<&StateInput> = targets.iter().map(|&(i, _)| &states[i]).collect();
    let reps = model.represent(&refs, Branch::Full)?;
    let d = model.config.d;
    let x = Tensor::matrix(reps.len(), d, reps.concat())?;
    let y = Tensor::matrix(targets.len(), 1, targets.iter().map(|t| t.1).collect())?;
    model.params.set_trainable("", false);
    model.params.set_trainable("head.purity.", true);
    let mut adam = AdamState::new(AdamConfig { lr, ..Default::default() })?;
    let mut last = f64::NAN;
    for _ in 0..epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let w = g.param(&model.params, model.purity_w);
        let pred = g.matmul(xv, w)?;
        let loss = g.mse(pred, yv)?;
        last = g.data(loss)[0];
        g.backward(loss)?;
        model.params.zero_grad();
        g.accumulate_into(&mut model.params);
        adam.step(&mut model.params);
    }
    model.params.set_trainable("", true);
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{sample_circuit, Circuit};
    use crate::dagenc::circuit_to_dag;
    use crate::qsim::run_circuit;
    use crate::shadows::{measure_random_pauli, Pauli, SnapshotRecord};
    use crate::tensornet::grad_check;

    fn tiny_config(fusion: Fusion, n: usize) -> ModelConfig {
        let profile = DeviceProfile::depolarizing("d", n, 0.05);
        ModelConfig {
            n_qubits: n,
            measurement_dim: 8 * n,
            node_dim: crate::dagenc::feature_dim(&profile),
            d: 8,
            d3: 8,
            fusion,
            conv_widths: vec![4, 8],
            graph_layers: 2,
            graph_width: 4,
            glimpses: 2,
            ..Default::default()
        }
    }

    fn toy_states(n: usize, count: usize, m: usize, seed: u64) -> Vec<StateInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let p = 0.02 + 0.02 * (k % 4) as f64;
                let profile = DeviceProfile::depolarizing("d", n, p);
                let c = sample_circuit(n, 2, &mut rng).unwrap();
                let rho = run_circuit(&c, &profile).unwrap();
                let snaps = measure_random_pauli(&rho, m, seed + k as u64, None).unwrap();
                StateInput {
                    features: build_measurement_features(&snaps, None).unwrap(),
                    dag: circuit_to_dag(&c, &profile).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn feature_layout() {
        let snaps = SnapshotSet {
            n_qubits: 6,
            records: vec![SnapshotRecord {
                bases: vec![Pauli::Z; 6],
                bits: vec![0; 6],
            }],
        };
        let t = build_measurement_features(&snaps, None).unwrap();
        assert_eq!(t.shape, vec![1, 48]);
        assert_eq!(&t.data[..8], &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        let with = build_measurement_features(&snaps, Some(&DeviceProfile::depolarizing("d", 6, 0.07))).unwrap();
        assert_eq!(with.shape, vec![1, 49]);
        assert_eq!(with.data[48], 0.07);
        let empty = SnapshotSet {
            n_qubits: 6,
            records: vec![],
        };
        assert!(build_measurement_features(&empty, None).is_err());
    }

    #[test]
    fn heads() {
        let v = [0.3, -1.2, 2.0];
        let w = [1.0, 0.5, -0.25];
        assert!((fidelity_head(&v, &v) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((fidelity_head(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(fidelity_head(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(fidelity_head(&v, &w).to_bits(), fidelity_head(&w, &v).to_bits());
        assert_eq!(purity_head(&v, &[0.0; 3]).unwrap(), 0.0);
        let scaled: Vec<f64> = v.iter().map(|x| 2.5 * x).collect();
        assert!((purity_head(&scaled, &w).unwrap() - 2.5 * purity_head(&v, &w).unwrap()).abs() < 1e-12);
        assert!(purity_head(&v, &[1.0]).is_err());
    }

    #[test]
    fn kdevice_pairs() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert!((kdevice_fidelity(&[e1.clone(), e1.clone(), e1.clone()]).unwrap() - 1.0).abs() < 1e-11);
        let a = vec![0.3, 0.9];
        assert_eq!(kdevice_fidelity(&[a.clone(), e1.clone()]).unwrap(), fidelity_head(&a, &e1));
        // pairs (1,2) = 1, (1,3) = 0, (2,3) = 0
        assert!((kdevice_fidelity(&[e1.clone(), e1.clone(), e2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(kdevice_fidelity(&[e1]).is_err());
    }

    #[test]
    fn loss_values() {
        assert_eq!(mse_loss(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.5], &[1.0]).unwrap(), 0.25);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn lrbp_and_sum_reference_values() {
        let d = 3;
        let mut g = Graph::new();
        let one = g.constant(Tensor::matrix(1, d, vec![1.0; d]).unwrap());
        let eye = g.constant(Tensor::identity(d));
        let v = McNet::lrbp(&mut g, one, one, eye, eye, eye).unwrap();
        let t1 = 1f64.tanh();
        for &x in g.data(v) {
            assert!((x - t1 * t1).abs() < 1e-15);
            assert!((x - 0.5800).abs() < 1e-4);
        }
        let mut cfg = tiny_config(Fusion::Sum, 2);
        cfg.d = d;
        cfg.d3 = d;
        let model = McNet::new(cfg).unwrap();
        let mut g = Graph::new();
        let mut vars: Vec<Var> = model.params.ids().map(|id| g.param(&model.params, id)).collect();
        let eye = g.constant(Tensor::identity(d));
        for name in ["fuse.w1", "fuse.w2", "fuse.p"] {
            vars[model.params.id(name).unwrap().0] = eye;
        }
        let p = model.bind_vars(&vars).unwrap();
        let x = g.constant(Tensor::matrix(1, d, vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.constant(Tensor::matrix(1, d, vec![0.25, 4.0, -3.0]).unwrap());
        let s = model.fuse(&mut g, &p, x, y, None).unwrap();
        assert_eq!(g.data(s), &[0.75, 3.0, -1.0]);
    }

    #[test]
    fn every_fusion_yields_d_outputs() {
        let states = toy_states(2, 3, 5, 1);
        let refs: Vec<&StateInput> = states.iter().collect();
        for fusion in [Fusion::Sum, Fusion::Concat, Fusion::Lrbp, Fusion::Attention] {
            let model = McNet::new(tiny_config(fusion, 2)).unwrap();
            let reps = model.represent(&refs, Branch::Full).unwrap();
            assert_eq!(reps.len(), 3);
            assert!(reps.iter().all(|r| r.len() == 8 && r.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn lazy_meanet_is_permutation_invariant() {
        let states = toy_states(2, 2, 40, 5);
        let model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let mut perm = states[0].clone();
        let (m, f) = (perm.features.rows(), perm.features.cols());
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        perm.features.data = order.iter().flat_map(|&r| states[0].features.row(r).to_vec()).collect();
        assert_eq!(perm.features.cols(), f);
        for train in [false, true] {
            let run = |s: &StateInput| {
                let mut g = Graph::new();
                let p = model.bind(&mut g);
                let out = model.forward(&mut g, &p, &[s, &states[1]], Branch::Measurement, train).unwrap();
                g.data(out.reps)[..8].to_vec()
            };
            let a: Vec<u64> = run(&states[0]).iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = run(&perm).iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b, "train = {train}");
        }
    }

    #[test]
    fn duplicated_records_match_single_record() {
        let states = toy_states(2, 1, 1, 6);
        let model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let mut dup = states[0].clone();
        dup.features = Tensor::matrix(5, 16, states[0].features.data.repeat(5)).unwrap();
        let a = model.represent(&[&states[0]], Branch::Measurement).unwrap();
        let b = model.represent(&[&dup], Branch::Measurement).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn circuitnet_pools_identical_wires() {
        // with no gates every wire is IN→OUT; identical node features collapse
        let profile = DeviceProfile::depolarizing("d", 2, 0.05);
        let mut dag = circuit_to_dag(&Circuit::new(2), &profile).unwrap();
        let f = dag.nodes[0].feature.clone();
        for n in &mut dag.nodes {
            n.feature = f.clone();
        }
        let model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let s = StateInput {
            features: Tensor::matrix(1, 16, vec![0.0; 16]).unwrap(),
            dag,
        };
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let (h, _) = model.graph_nodes(&mut g, &p, &[&s]).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| g.value(h).row(r).to_vec()).collect();
        assert!(rows.iter().all(|r| r == &rows[0]));
        let pooled = g.segment_mean(h, &[4]).unwrap();
        assert_eq!(g.data(pooled), &rows[0][..]);
    }

    #[test]
    fn end_to_end_gradients_every_fusion() {
        let states = toy_states(2, 2, 3, 11);
        for fusion in [Fusion::Sum, Fusion::Concat, Fusion::Lrbp, Fusion::Attention] {
            let model = McNet::new(tiny_config(fusion, 2)).unwrap();
            let inputs: Vec<Tensor> = model.params.ids().map(|id| model.params.get(id).clone()).collect();
            let refs: Vec<&StateInput> = states.iter().collect();
            let rep = grad_check(
                |g, vars| {
                    let p = model.bind_vars(vars).map_err(|e| TensorError::Invalid {
                        op: "bind",
                        reason: e.to_string(),
                    })?;
                    let f = model.forward(g, &p, &refs, Branch::Full, true).map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => TensorError::Invalid {
                            op: "forward",
                            reason: other.to_string(),
                        },
                    })?;
                    let a = g.slice_rows(f.reps, 0, 1)?;
                    let b = g.slice_rows(f.reps, 1, 2)?;
                    let c = g.cosine_similarity(a, b)?;
                    let y = g.constant(Tensor::scalar(0.8));
                    g.mse(c, y)
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "{fusion:?}: {rep:?}");
        }
    }

    #[test]
    fn siamese_parameters_are_shared() {
        let states = toy_states(2, 2, 10, 3);
        let model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let ab = model.represent(&[&states[0], &states[1]], Branch::Full).unwrap();
        let ba = model.represent(&[&states[1], &states[0]], Branch::Full).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    fn toy_pairs(count: usize) -> Vec<PairSample> {
        let mut v = Vec::new();
        for i in 0..count {
            for j in i + 1..count {
                v.push(PairSample {
                    i,
                    j,
                    label: 0.5 + 0.4 * ((i + 2 * j) as f64).sin(),
                });
            }
        }
        v
    }

    #[test]
    fn smoke_training_loss_mostly_decreases() {
        let states = toy_states(2, 8, 20, 21);
        let pairs = toy_pairs(8);
        let mut model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            lr_stage1: 3e-3,
            ..Default::default()
        };
        let mut h = History::default();
        train_branch(&mut model, &states, &pairs, &[], Branch::Circuit, 5, 3e-3, &cfg, "circ", &mut h).unwrap();
        let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
        let upticks = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(upticks <= 2, "{losses:?}");
        assert!(losses[4] < losses[0]);
        assert!(h.to_csv().lines().count() == 6);
    }

    #[test]
    fn training_is_deterministic() {
        let states = toy_states(2, 5, 10, 2);
        let pairs = toy_pairs(5);
        let run = || {
            let mut model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
            let cfg = TrainConfig {
                epochs_stage1: 2,
                epochs_stage2: 1,
                batch_size: 4,
                ..Default::default()
            };
            let h = train_two_stage(&mut model, &states, &pairs, &pairs[..3], &cfg).unwrap();
            h.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_stage_two_touches_only_fusion() {
        let states = toy_states(2, 4, 10, 8);
        let pairs = toy_pairs(4);
        let mut model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            freeze_branches: true,
            batch_size: 4,
            ..Default::default()
        };
        let mut h = History::default();
        train_branch(&mut model, &states, &pairs, &[], Branch::Full, 2, 1e-3, &cfg, "finetune", &mut h).unwrap();
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let changed = model.params.get(id).data != before.get(id).data;
            assert_eq!(changed, name.starts_with("fuse."), "{name}");
        }
    }

    #[test]
    fn purity_head_fits_linear_target() {
        let states = toy_states(2, 6, 10, 4);
        let mut model = McNet::new(tiny_config(Fusion::Lrbp, 2)).unwrap();
        let refs: Vec<&StateInput> = states.iter().collect();
        let reps = model.represent(&refs, Branch::Full).unwrap();
        // target is an exact linear function of the representation
        let targets: Vec<(usize, f64)> = reps.iter().enumerate().map(|(i, r)| (i, 0.3 * r[0] - 0.1 * r[3])).collect();
        let mse = train_purity_head(&mut model, &states, &targets, 3000, 1e-2).unwrap();
        assert!(mse < 1e-5, "{mse}");
    }

    #[test]
    fn config_validation_and_checkpoint() {
        let mut bad = tiny_config(Fusion::Lrbp, 2);
        bad.d3 = 9;
        assert!(McNet::new(bad).is_err());
        let mut bad = tiny_config(Fusion::Lrbp, 2);
        bad.conv_widths = vec![4, 0];
        assert!(McNet::new(bad).is_err());
        assert!("bogus".parse::<Fusion>().is_err());

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let model = McNet::new(tiny_config(Fusion::Attention, 2)).unwrap();
        model.save(&stem).unwrap();
        let back = McNet::load(&stem).unwrap();
        let states = toy_states(2, 2, 4, 0);
        let refs: Vec<&StateInput> = states.iter().collect();
        assert_eq!(
            model.represent(&refs, Branch::Full).unwrap(),
            back.represent(&refs, Branch::Full).unwrap()
        );
    }
}
