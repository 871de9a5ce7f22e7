//! The asynchronous two-timescale executor.
//!
//! A virtual clock drives independent renewal event streams, one per
//! (process, update kind): inner gradient steps, consensus steps, task
//! penalty steps, group broadcasts, and messenger exchanges. Events are
//! merged into one totally ordered queue and drained by a single logical
//! thread, so a run is bit-reproducible from its seed. Inner updates fire
//! at high rates with a constant stepsize; messenger updates fire at a
//! lower rate with a decreasing stepsize.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::datagen::{DatagenError, GroundTruth, NodeDataModel};
use crate::kv::{KvError, KvFile};
use crate::metrics::{self, MetricsError, MetricsLog};
use crate::objectives::{
    consensus_gradient, inner_gradient, outer_objective, task_penalty_gradient, ObjectiveError,
};
use crate::precision::{PrecisionError, PrecisionState, Schedule};
use crate::rng::{stream, StreamId};
use crate::topology::Topology;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("at t = {time}, {kind:?}: {source}")]
    Event {
        time: f64,
        kind: EventKind,
        source: EventFailure,
    },
    #[error("invalid run setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Error)]
pub enum EventFailure {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Precision(#[from] PrecisionError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Typed update and communication events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Node draws an observation and applies the loss gradient.
    InnerGrad(usize),
    /// Node refreshes neighbor caches and applies the consensus gradient.
    ConsensusGrad(usize),
    /// Node applies its cached task-penalty gradient.
    TaskGrad(usize),
    /// Messenger runs a precision step on its current assembled matrix.
    OuterStep(usize),
    /// All members of a group refresh their neighbor caches.
    GroupBroadcast(usize),
    /// Messenger sends its slice, assembles, steps the precision matrix,
    /// and pushes task gradients back to its group.
    MessengerExchange(usize),
}

impl EventKind {
    fn stream_tag(self) -> u64 {
        match self {
            EventKind::InnerGrad(i) => (i as u64) << 3,
            EventKind::ConsensusGrad(i) => (i as u64) << 3 | 1,
            EventKind::TaskGrad(i) => (i as u64) << 3 | 2,
            EventKind::GroupBroadcast(l) => (l as u64) << 3 | 3,
            EventKind::MessengerExchange(l) => (l as u64) << 3 | 4,
            EventKind::OuterStep(l) => (l as u64) << 3 | 5,
        }
    }
}

/// One scheduled firing.
#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

/// Rate of one renewal stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamSpec {
    pub kind: EventKind,
    pub rate: f64,
}

struct StreamState {
    kind: EventKind,
    rate: f64,
    rng: ChaCha8Rng,
    count: u64,
}

#[derive(PartialEq)]
struct Pending {
    time: f64,
    stream: usize,
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so the max-heap pops the earliest (time, stream) pair;
        // the stream index breaks ties deterministically.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.stream.cmp(&self.stream))
    }
}

/// Merged priority queue over all renewal streams of a run.
pub struct EventSchedule {
    streams: Vec<StreamState>,
    heap: BinaryHeap<Pending>,
    horizon: f64,
    deterministic: bool,
    seq: u64,
}

impl EventSchedule {
    /// Builds independent renewal streams (exponential inter-arrivals by
    /// default, fixed `1/rate` intervals in deterministic mode) and merges
    /// them. Streams with zero rate never fire.
    pub fn build(specs: &[StreamSpec], horizon: f64, seed: u64, deterministic: bool) -> Self {
        let mut streams = Vec::new();
        let mut heap = BinaryHeap::new();
        for spec in specs {
            if spec.rate <= 0.0 {
                continue;
            }
            let mut state = StreamState {
                kind: spec.kind,
                rate: spec.rate,
                rng: stream(seed, StreamId::Arrivals(spec.kind.stream_tag())),
                count: 0,
            };
            let first = Self::draw_next(&mut state, 0.0, deterministic);
            heap.push(Pending {
                time: first,
                stream: streams.len(),
            });
            streams.push(state);
        }
        EventSchedule {
            streams,
            heap,
            horizon,
            deterministic,
            seq: 0,
        }
    }

    fn draw_next(state: &mut StreamState, now: f64, deterministic: bool) -> f64 {
        state.count += 1;
        if deterministic {
            state.count as f64 / state.rate
        } else {
            let exp = Exp::new(state.rate).expect("positive rate");
            now + exp.sample(&mut state.rng)
        }
    }

    /// Pops the next event at or before the horizon.
    pub fn next_event(&mut self) -> Option<Event> {
        let pending = self.heap.pop()?;
        if pending.time > self.horizon {
            self.heap.clear();
            return None;
        }
        let kind = self.streams[pending.stream].kind;
        let event = Event {
            time: pending.time,
            seq: self.seq,
            kind,
        };
        self.seq += 1;
        let next = Self::draw_next(
            &mut self.streams[pending.stream],
            pending.time,
            self.deterministic,
        );
        self.heap.push(Pending {
            time: next,
            stream: pending.stream,
        });
        Some(event)
    }
}

/// Per-process update rates (events per unit virtual time).
#[derive(Debug, Clone, Copy)]
pub struct NodeRates {
    pub inner: f64,
    pub consensus: f64,
    pub task: f64,
}

/// A node's live state.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub w: DVector<f64>,
    /// Last model seen from each in-group neighbor, with the receipt time.
    pub last_seen: Vec<Option<(DVector<f64>, f64)>>,
    /// Cached task-penalty gradient pushed by the messenger.
    pub task_grad: DVector<f64>,
    /// Time the cache was last refreshed; stale use is by design.
    pub task_grad_time: f64,
    pub rates: NodeRates,
    pub group: usize,
}

/// A messenger's group-level state.
#[derive(Debug, Clone)]
pub struct GroupState {
    /// Assembled estimate matrix W^(l): own slice live, remote slices as
    /// most recently received (initialization values until first receipt).
    pub assembled: DMatrix<f64>,
    /// Receipt time of each column's current value.
    pub slice_time: Vec<f64>,
    pub precision: PrecisionState,
    /// Latest slice sent by each other group's messenger, if any:
    /// (member column values, send time).
    inbox: Vec<Option<(Vec<DVector<f64>>, f64)>>,
}

/// What the nodes learn from.
pub enum DataSource {
    /// Per-node generative stream models plus the ground truth they came
    /// from; enables U, V, and Est metrics.
    Synthetic {
        models: Vec<NodeDataModel>,
        ground_truth: GroundTruth,
    },
    /// Fixed per-node design/response (tabular runs); the inner gradient
    /// is the full local least-squares gradient and Omega = I.
    Dataset { tables: Vec<(DMatrix<f64>, DVector<f64>)> },
}

/// Run parameters. `inner` rates apply per node, `exchange` per messenger.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gamma: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Constant part of the outer stepsize.
    pub beta: f64,
    /// Decreasing part of the outer stepsize.
    pub beta_hat: Schedule,
    /// Ridge magnitude schedule b_k.
    pub ridge: Schedule,
    /// Outer gradient noise level.
    pub iota: f64,
    pub eig_floor: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Metric sampling period in virtual time.
    pub cadence: f64,
    pub rate_inner: f64,
    pub rate_consensus: f64,
    pub rate_task: f64,
    pub rate_exchange: f64,
    pub rate_broadcast: f64,
    pub rate_outer: f64,
    pub deterministic_arrivals: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gamma: 1e-2,
            delta1: 0.0,
            delta2: 0.0,
            beta: 1.0,
            beta_hat: Schedule::Harmonic { scale: 1.0 },
            ridge: Schedule::Harmonic { scale: 1.0 },
            iota: 0.0,
            eig_floor: 1e-6,
            horizon: 100.0,
            seed: 0,
            cadence: 1.0,
            rate_inner: 1.0,
            rate_consensus: 1.0,
            rate_task: 1.0,
            rate_exchange: 1.0,
            rate_broadcast: 0.0,
            rate_outer: 0.0,
            deterministic_arrivals: false,
        }
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "gamma",
        "delta1",
        "delta2",
        "beta",
        "beta_hat_scale",
        "ridge_scale",
        "iota",
        "eig_floor",
        "horizon",
        "seed",
        "cadence",
        "rate_inner",
        "rate_consensus",
        "rate_task",
        "rate_exchange",
        "rate_broadcast",
        "rate_outer",
        "deterministic_arrivals",
    ];

    /// Reads overrides from a flat `key = value` file.
    pub fn from_kv(kv: &KvFile) -> Result<Self, KvError> {
        let d = RunConfig::default();
        let beta_hat_scale = kv.get_f64("beta_hat_scale", 1.0)?;
        let ridge_scale = kv.get_f64("ridge_scale", 1.0)?;
        Ok(RunConfig {
            gamma: kv.get_f64("gamma", d.gamma)?,
            delta1: kv.get_f64("delta1", d.delta1)?,
            delta2: kv.get_f64("delta2", d.delta2)?,
            beta: kv.get_f64("beta", d.beta)?,
            beta_hat: Schedule::Harmonic {
                scale: beta_hat_scale,
            },
            ridge: Schedule::Harmonic { scale: ridge_scale },
            iota: kv.get_f64("iota", d.iota)?,
            eig_floor: kv.get_f64("eig_floor", d.eig_floor)?,
            horizon: kv.get_f64("horizon", d.horizon)?,
            seed: kv.get_u64("seed", d.seed)?,
            cadence: kv.get_f64("cadence", d.cadence)?,
            rate_inner: kv.get_f64("rate_inner", d.rate_inner)?,
            rate_consensus: kv.get_f64("rate_consensus", d.rate_consensus)?,
            rate_task: kv.get_f64("rate_task", d.rate_task)?,
            rate_exchange: kv.get_f64("rate_exchange", d.rate_exchange)?,
            rate_broadcast: kv.get_f64("rate_broadcast", d.rate_broadcast)?,
            rate_outer: kv.get_f64("rate_outer", d.rate_outer)?,
            deterministic_arrivals: kv.get_bool("deterministic_arrivals", false)?,
        })
    }

    /// Canonical echo of every parameter, used for metadata and hashing.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let sched = |s: &Schedule| match *s {
            Schedule::Harmonic { scale } => format!("{scale}/k"),
            Schedule::Constant { value } => format!("{value}"),
        };
        let _ = writeln!(out, "gamma = {}", self.gamma);
        let _ = writeln!(out, "delta1 = {}", self.delta1);
        let _ = writeln!(out, "delta2 = {}", self.delta2);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "beta_hat = {}", sched(&self.beta_hat));
        let _ = writeln!(out, "ridge = {}", sched(&self.ridge));
        let _ = writeln!(out, "iota = {}", self.iota);
        let _ = writeln!(out, "eig_floor = {}", self.eig_floor);
        let _ = writeln!(out, "horizon = {}", self.horizon);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "cadence = {}", self.cadence);
        let _ = writeln!(out, "rate_inner = {}", self.rate_inner);
        let _ = writeln!(out, "rate_consensus = {}", self.rate_consensus);
        let _ = writeln!(out, "rate_task = {}", self.rate_task);
        let _ = writeln!(out, "rate_exchange = {}", self.rate_exchange);
        let _ = writeln!(out, "rate_broadcast = {}", self.rate_broadcast);
        let _ = writeln!(out, "rate_outer = {}", self.rate_outer);
        let _ = writeln!(
            out,
            "deterministic_arrivals = {}",
            self.deterministic_arrivals
        );
        out
    }
}

enum NodeData {
    Stream {
        model: NodeDataModel,
        omega_inv: DVector<f64>,
        rng: ChaCha8Rng,
    },
    Fixed {
        x: DMatrix<f64>,
        y: DVector<f64>,
        omega_inv: DVector<f64>,
    },
}

/// Shared common-noise sequence: one realization per integer tick, a pure
/// function of (seed, tick).
struct CommonNoise {
    seed: u64,
    dim: usize,
    cached_tick: u64,
    cached: DVector<f64>,
}

impl CommonNoise {
    fn new(seed: u64, dim: usize) -> Self {
        CommonNoise {
            seed,
            dim,
            cached_tick: u64::MAX,
            cached: DVector::zeros(dim),
        }
    }

    fn at(&mut self, tick: u64) -> &DVector<f64> {
        if tick != self.cached_tick {
            let mut rng = stream(self.seed, StreamId::CommonNoiseTick(tick));
            self.cached = DVector::from_fn(self.dim, |_, _| {
                use rand::Rng as _;
                rng.sample(rand_distr::StandardNormal)
            });
            self.cached_tick = tick;
        }
        &self.cached
    }
}

/// A fully assembled run: topology, node and group states, data, clocks.
pub struct Simulation {
    topo: Topology,
    cfg: RunConfig,
    nodes: Vec<NodeState>,
    groups: Vec<GroupState>,
    data: Vec<NodeData>,
    precision_rngs: Vec<ChaCha8Rng>,
    common: Option<CommonNoise>,
    ground_truth: Option<GroundTruth>,
    p: usize,
    time: f64,
}

impl Simulation {
    pub fn new(topo: Topology, source: DataSource, cfg: RunConfig) -> Result<Self, EngineError> {
        let n = topo.node_count();
        let q = topo.group_count();
        let (data, ground_truth, p, common) = match source {
            DataSource::Synthetic {
                models,
                ground_truth,
            } => {
                if models.len() != n {
                    return Err(EngineError::Setup(format!(
                        "{} models for {} nodes",
                        models.len(),
                        n
                    )));
                }
                let p = models[0].dims().1;
                let m = models[0].dims().0;
                for (i, model) in models.iter().enumerate() {
                    if model.dims().1 != p {
                        return Err(EngineError::Setup(format!(
                            "node {i} has p = {}, expected {p}",
                            model.dims().1
                        )));
                    }
                    if model.dims().0 != m {
                        return Err(EngineError::Setup(format!(
                            "node {i} has m = {}, expected {m} (common noise is shared)",
                            model.dims().0
                        )));
                    }
                }
                if ground_truth.w_star.shape() != (p, n) {
                    return Err(EngineError::Setup(format!(
                        "ground truth is {:?}, expected ({p}, {n})",
                        ground_truth.w_star.shape()
                    )));
                }
                let data = models
                    .into_iter()
                    .enumerate()
                    .map(|(i, model)| {
                        // Noise-free models have a singular error covariance;
                        // the loss then falls back to unit weights.
                        let omega_inv = model
                            .omega_inv_diag()
                            .unwrap_or_else(|_| DVector::from_element(m, 1.0));
                        NodeData::Stream {
                            model,
                            omega_inv,
                            rng: stream(cfg.seed, StreamId::NodeData(i)),
                        }
                    })
                    .collect::<Vec<_>>();
                let common = CommonNoise::new(cfg.seed, m);
                (data, Some(ground_truth), p, Some(common))
            }
            DataSource::Dataset { tables } => {
                if tables.len() != n {
                    return Err(EngineError::Setup(format!(
                        "{} tables for {} nodes",
                        tables.len(),
                        n
                    )));
                }
                let p = tables[0].0.ncols();
                let data = tables
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, y))| {
                        if x.ncols() != p {
                            return Err(EngineError::Setup(format!(
                                "node {i} has p = {}, expected {p}",
                                x.ncols()
                            )));
                        }
                        if x.nrows() != y.len() {
                            return Err(EngineError::Setup(format!(
                                "node {i}: {} rows vs {} responses",
                                x.nrows(),
                                y.len()
                            )));
                        }
                        let omega_inv = DVector::from_element(x.nrows(), 1.0);
                        Ok(NodeData::Fixed { x, y, omega_inv })
                    })
                    .collect::<Result<Vec<_>, EngineError>>()?;
                (data, None, p, None)
            }
        };

        let nodes = (0..n)
            .map(|i| NodeState {
                w: DVector::zeros(p),
                last_seen: vec![None; n],
                task_grad: DVector::zeros(p),
                task_grad_time: 0.0,
                rates: NodeRates {
                    inner: cfg.rate_inner,
                    consensus: cfg.rate_consensus,
                    task: cfg.rate_task,
                },
                group: topo.group_of(i),
            })
            .collect();
        let groups = (0..q)
            .map(|_| GroupState {
                assembled: DMatrix::zeros(p, n),
                slice_time: vec![0.0; n],
                precision: PrecisionState::new(
                    n,
                    DMatrix::identity(n, n),
                    cfg.beta,
                    cfg.beta_hat,
                    cfg.ridge,
                    cfg.eig_floor,
                ),
                inbox: vec![None; q],
            })
            .collect();
        let precision_rngs = (0..q)
            .map(|l| stream(cfg.seed, StreamId::PrecisionNoise(l)))
            .collect();
        Ok(Simulation {
            topo,
            cfg,
            nodes,
            groups,
            data,
            precision_rngs,
            common,
            ground_truth,
            p,
            time: 0.0,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn node(&self, i: usize) -> &NodeState {
        &self.nodes[i]
    }

    pub fn group(&self, l: usize) -> &GroupState {
        &self.groups[l]
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Live estimate matrix, one column per node.
    pub fn estimates(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.p, self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            w.set_column(i, &node.w);
        }
        w
    }

    /// Regularity against the run's ground truth.
    pub fn regularity(&self) -> Result<f64, MetricsError> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or(MetricsError::NoGroundTruth("U"))?;
        metrics::regularity(&self.estimates(), &gt.w_star)
    }

    /// Consistency of the group precision estimates against the truth.
    pub fn consistency(&self) -> Result<f64, MetricsError> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or(MetricsError::NoGroundTruth("V"))?;
        let thetas: Vec<DMatrix<f64>> = self
            .groups
            .iter()
            .map(|g| g.precision.theta().clone())
            .collect();
        metrics::consistency(&thetas, &gt.theta_star)
    }

    /// Mean distance of the assembled group matrices to the truth.
    pub fn estimation_error(&self) -> Result<f64, MetricsError> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or(MetricsError::NoGroundTruth("Est"))?;
        let ws: Vec<DMatrix<f64>> = self.groups.iter().map(|g| g.assembled.clone()).collect();
        metrics::estimation_error(&ws, &gt.w_star)
    }

    /// Per-group mean prediction error on fixed datasets.
    pub fn group_prediction_errors(&self) -> Result<Vec<f64>, MetricsError> {
        let mut sums = vec![0.0; self.topo.group_count()];
        let mut counts = vec![0usize; self.topo.group_count()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeData::Fixed { x, y, .. } = &self.data[i] {
                sums[node.group] += metrics::prediction_error(x, y, &node.w)?;
                counts[node.group] += 1;
            } else {
                return Err(MetricsError::NoGroundTruth("Err needs fixed datasets"));
            }
        }
        Ok(sums
            .iter()
            .zip(counts.iter())
            .map(|(s, &c)| s / c.max(1) as f64)
            .collect())
    }

    fn streams(&self) -> Vec<StreamSpec> {
        let mut specs = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            specs.push(StreamSpec {
                kind: EventKind::InnerGrad(i),
                rate: node.rates.inner,
            });
            specs.push(StreamSpec {
                kind: EventKind::ConsensusGrad(i),
                rate: if self.cfg.delta1 > 0.0 {
                    node.rates.consensus
                } else {
                    0.0
                },
            });
            specs.push(StreamSpec {
                kind: EventKind::TaskGrad(i),
                rate: if self.cfg.delta2 > 0.0 {
                    node.rates.task
                } else {
                    0.0
                },
            });
        }
        for l in 0..self.topo.group_count() {
            specs.push(StreamSpec {
                kind: EventKind::MessengerExchange(l),
                rate: self.cfg.rate_exchange,
            });
            specs.push(StreamSpec {
                kind: EventKind::GroupBroadcast(l),
                rate: self.cfg.rate_broadcast,
            });
            specs.push(StreamSpec {
                kind: EventKind::OuterStep(l),
                rate: self.cfg.rate_outer,
            });
        }
        specs
    }

    /// Applies one event.
    pub fn apply(&mut self, event: Event) -> Result<(), EngineError> {
        self.time = event.time;
        let tag = |source: EventFailure| EngineError::Event {
            time: event.time,
            kind: event.kind,
            source,
        };
        match event.kind {
            EventKind::InnerGrad(i) => {
                let gamma = self.cfg.gamma;
                let node_w = self.nodes[i].w.clone();
                let grad = match &mut self.data[i] {
                    NodeData::Stream {
                        model,
                        omega_inv,
                        rng,
                    } => {
                        let tick = event.time.floor() as u64;
                        let common = self.common.as_mut().expect("stream runs share noise");
                        let xi = common.at(tick);
                        let obs = model
                            .gen_observation(xi, tick, i, rng)
                            .map_err(|e| tag(e.into()))?;
                        inner_gradient(&node_w, &obs.x, &obs.y, omega_inv)
                            .map_err(|e| tag(e.into()))?
                    }
                    NodeData::Fixed { x, y, omega_inv } => {
                        inner_gradient(&node_w, x, y, omega_inv).map_err(|e| tag(e.into()))?
                    }
                };
                self.nodes[i].w -= grad * gamma;
            }
            EventKind::ConsensusGrad(i) => {
                self.refresh_caches(i, event.time);
                let node = &self.nodes[i];
                let neighbors: Vec<&DVector<f64>> = self
                    .topo
                    .neighbors(i)
                    .iter()
                    .map(|&j| {
                        node.last_seen[j]
                            .as_ref()
                            .map(|(w, _)| w)
                            .unwrap_or(&self.nodes[j].w)
                    })
                    .collect();
                let grad = consensus_gradient(&node.w, neighbors.into_iter().map(|w| (1.0, w)));
                let step = grad * (self.cfg.gamma * self.cfg.delta1);
                self.nodes[i].w -= step;
            }
            EventKind::TaskGrad(i) => {
                let step = &self.nodes[i].task_grad * (self.cfg.gamma * self.cfg.delta2);
                self.nodes[i].w -= step;
            }
            EventKind::GroupBroadcast(l) => {
                let members = self.topo.members(l).to_vec();
                for &i in &members {
                    self.refresh_caches(i, event.time);
                }
            }
            EventKind::OuterStep(l) => {
                self.refresh_own_slice(l, event.time);
                self.precision_step(l).map_err(tag)?;
            }
            EventKind::MessengerExchange(l) => {
                self.refresh_own_slice(l, event.time);
                // Send this group's slice to every connected messenger.
                let members = self.topo.members(l).to_vec();
                let slice: Vec<DVector<f64>> =
                    members.iter().map(|&i| self.nodes[i].w.clone()).collect();
                for peer in self.topo.messenger_peers(l) {
                    self.groups[peer].inbox[l] = Some((slice.clone(), event.time));
                }
                // Assemble from the latest received slices; columns of
                // groups never heard from keep their current values.
                for j in 0..self.topo.group_count() {
                    if j == l {
                        continue;
                    }
                    if let Some((cols, sent)) = self.groups[l].inbox[j].clone() {
                        let peers = self.topo.members(j).to_vec();
                        for (&node, w) in peers.iter().zip(cols.iter()) {
                            self.groups[l].assembled.set_column(node, w);
                            self.groups[l].slice_time[node] = sent;
                        }
                    }
                }
                self.precision_step(l).map_err(tag)?;
                // Recompute and push task-penalty gradients to the group.
                let group = &self.groups[l];
                let (_, mean) = crate::precision::center_estimates(&group.assembled);
                let m = DMatrix::from_fn(self.p, self.topo.node_count(), |r, _| mean[r]);
                for &i in &members {
                    let v = task_penalty_gradient(
                        i,
                        &group.assembled,
                        &m,
                        group.precision.theta(),
                    )
                    .map_err(|e| tag(e.into()))?;
                    self.nodes[i].task_grad = v;
                    self.nodes[i].task_grad_time = event.time;
                }
            }
        }
        Ok(())
    }

    fn refresh_caches(&mut self, i: usize, now: f64) {
        let neighbor_ids: Vec<usize> = self.topo.neighbors(i).to_vec();
        for j in neighbor_ids {
            let w = self.nodes[j].w.clone();
            self.nodes[i].last_seen[j] = Some((w, now));
        }
    }

    fn refresh_own_slice(&mut self, l: usize, now: f64) {
        let members = self.topo.members(l).to_vec();
        for &i in &members {
            let w = self.nodes[i].w.clone();
            self.groups[l].assembled.set_column(i, &w);
            self.groups[l].slice_time[i] = now;
        }
    }

    fn precision_step(&mut self, l: usize) -> Result<(), EventFailure> {
        let assembled = self.groups[l].assembled.clone();
        self.groups[l]
            .precision
            .step(&assembled, self.cfg.iota, &mut self.precision_rngs[l])?;
        Ok(())
    }

    fn record(&self, log: &mut MetricsLog, at: f64) {
        if self.ground_truth.is_some() {
            if let Ok(u) = self.regularity() {
                log.record(at, "U", u);
            }
            if let Ok(v) = self.consistency() {
                log.record(at, "V", v);
            }
            if let Ok(est) = self.estimation_error() {
                log.record(at, "Est", est);
            }
        } else if let Ok(errs) = self.group_prediction_errors() {
            for (g, e) in errs.iter().enumerate() {
                log.record(at, &format!("Err_group_{}", g + 1), *e);
            }
            let total: f64 = errs.iter().sum();
            log.record(at, "Err", total / errs.len().max(1) as f64);
        }
        let mut obj = 0.0;
        let mut have_obj = true;
        for group in &self.groups {
            match outer_objective(
                group.precision.theta(),
                group.precision.covariance(),
                group.precision.current_ridge(),
                group.precision.target(),
            ) {
                Ok(v) => obj += v,
                Err(_) => {
                    have_obj = false;
                    break;
                }
            }
        }
        if have_obj {
            log.record(at, "outer_objective", obj / self.groups.len().max(1) as f64);
        }
        let floors: u64 = self.groups.iter().map(|g| g.precision.floor_activations()).sum();
        log.record(at, "spd_floor_activations", floors as f64);
        let shrinks: u64 = self
            .groups
            .iter()
            .map(|g| g.precision.safeguard_shrinks())
            .sum();
        log.record(at, "stepsize_safeguards", shrinks as f64);
    }

    /// Drains the schedule, recording metrics at the configured cadence.
    pub fn run(&mut self) -> Result<MetricsLog, EngineError> {
        let config_hash = crate::metrics::fnv1a(self.cfg.echo().as_bytes());
        let mut log = MetricsLog::new(self.cfg.seed, config_hash);
        let mut schedule = EventSchedule::build(
            &self.streams(),
            self.cfg.horizon,
            self.cfg.seed,
            self.cfg.deterministic_arrivals,
        );
        let cadence = self.cfg.cadence;
        let mut sample_idx: u64 = 0;
        while let Some(event) = schedule.next_event() {
            while (sample_idx as f64) * cadence <= event.time
                && (sample_idx as f64) * cadence <= self.cfg.horizon
            {
                self.record(&mut log, sample_idx as f64 * cadence);
                sample_idx += 1;
            }
            self.apply(event)?;
        }
        while (sample_idx as f64) * cadence <= self.cfg.horizon {
            self.record(&mut log, sample_idx as f64 * cadence);
            sample_idx += 1;
        }
        let last_grid = (sample_idx.saturating_sub(1)) as f64 * cadence;
        if last_grid < self.cfg.horizon {
            self.record(&mut log, self.cfg.horizon);
        }
        self.time = self.cfg.horizon;
        Ok(log)
    }
}

/// Builds and drains a run in one call.
pub fn run(
    topo: Topology,
    source: DataSource,
    cfg: RunConfig,
) -> Result<MetricsLog, EngineError> {
    Simulation::new(topo, source, cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_ground_truth;
    use crate::topology::{build_topology, EdgeSpec};
    use approx::assert_relative_eq;

    fn single_node_source(
        p: usize,
        sigma: f64,
        seed: u64,
    ) -> (Topology, DataSource) {
        let topo = build_topology(&[1], &EdgeSpec::StarToMessenger, seed).unwrap();
        let mut rng = stream(seed, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            p,
            &[0],
            &DVector::from_element(p, 2.0),
            &DMatrix::identity(1, 1),
            &mut rng,
        )
        .unwrap();
        let model = NodeDataModel::identity(
            gt.w_star.column(0).into_owned(),
            sigma,
            DVector::zeros(p),
        )
        .unwrap();
        (
            topo,
            DataSource::Synthetic {
                models: vec![model],
                ground_truth: gt,
            },
        )
    }

    #[test]
    fn deterministic_intervals_fire_floor_of_rate_times_horizon() {
        let specs = [StreamSpec {
            kind: EventKind::InnerGrad(0),
            rate: 0.5,
        }];
        let mut sched = EventSchedule::build(&specs, 10.0, 1, true);
        let mut count = 0;
        let mut last = 0.0;
        while let Some(ev) = sched.next_event() {
            assert!(ev.time > last || count == 0);
            last = ev.time;
            count += 1;
        }
        assert_eq!(count, 5);
    }

    #[test]
    fn poisson_counts_concentrate_around_rate_times_horizon() {
        let mut within = 0;
        let total = 100;
        for seed in 0..total {
            let specs = [StreamSpec {
                kind: EventKind::InnerGrad(0),
                rate: 1.0,
            }];
            let mut sched = EventSchedule::build(&specs, 1000.0, seed, false);
            let mut count = 0;
            while sched.next_event().is_some() {
                count += 1;
            }
            if (900..=1100).contains(&count) {
                within += 1;
            }
        }
        assert!(within >= 95, "{within} of {total} seeds in range");
    }

    #[test]
    fn merged_order_is_reproducible() {
        let specs = [
            StreamSpec {
                kind: EventKind::InnerGrad(0),
                rate: 1.0,
            },
            StreamSpec {
                kind: EventKind::InnerGrad(1),
                rate: 2.0,
            },
        ];
        let collect = |seed| {
            let mut sched = EventSchedule::build(&specs, 50.0, seed, false);
            let mut events = Vec::new();
            while let Some(ev) = sched.next_event() {
                events.push((ev.time, ev.seq, ev.kind));
            }
            events
        };
        let a = collect(42);
        let b = collect(42);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
            assert_eq!(x.2, y.2);
        }
        // Times strictly ordered after tie-breaking.
        for pair in a.windows(2) {
            assert!(pair[0].0 <= pair[1].0);
            assert!(pair[0].1 < pair[1].1);
        }
    }

    #[test]
    fn noise_free_single_node_descends_monotonically() {
        let (topo, source) = single_node_source(3, 0.0, 5);
        let cfg = RunConfig {
            gamma: 0.2,
            horizon: 1000.0,
            deterministic_arrivals: true,
            rate_exchange: 0.1,
            cadence: 10.0,
            ..Default::default()
        };
        let mut sim = Simulation::new(topo, source, cfg).unwrap();
        let log = sim.run().unwrap();
        let series = log.series("U");
        assert!(series.len() > 50);
        for pair in series.windows(2) {
            assert!(
                pair[1].1 <= pair[0].1 + 1e-15,
                "U rose from {} to {}",
                pair[0].1,
                pair[1].1
            );
        }
        assert!(series.last().unwrap().1 < 1e-8 * series[0].1);
    }

    #[test]
    fn task_grad_with_zero_cache_is_a_no_op() {
        let (topo, source) = single_node_source(2, 0.0, 6);
        let cfg = RunConfig {
            delta2: 1.0,
            ..Default::default()
        };
        let mut sim = Simulation::new(topo, source, cfg).unwrap();
        let before = sim.node(0).w.clone();
        sim.apply(Event {
            time: 0.5,
            seq: 0,
            kind: EventKind::TaskGrad(0),
        })
        .unwrap();
        assert_eq!(sim.node(0).w, before);
    }

    #[test]
    fn inner_grad_at_truth_is_a_no_op_when_noise_free() {
        let (topo, source) = single_node_source(2, 0.0, 7);
        let cfg = RunConfig::default();
        let mut sim = Simulation::new(topo, source, cfg).unwrap();
        let w_star = sim.ground_truth.as_ref().unwrap().w_star.column(0).into_owned();
        sim.nodes[0].w = w_star.clone();
        sim.apply(Event {
            time: 0.25,
            seq: 0,
            kind: EventKind::InnerGrad(0),
        })
        .unwrap();
        assert_relative_eq!((sim.node(0).w.clone() - w_star).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn same_seed_reruns_bit_identically() {
        let topo = build_topology(&[3, 2], &EdgeSpec::StarToMessenger, 0).unwrap();
        let mut rng = stream(3, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            4,
            &[0, 0, 0, 1, 1],
            &DVector::zeros(4),
            &(DMatrix::identity(5, 5) * 2.0),
            &mut rng,
        )
        .unwrap();
        let models: Vec<NodeDataModel> = (0..5)
            .map(|i| {
                NodeDataModel::identity(
                    gt.w_star.column(i).into_owned(),
                    0.5,
                    DVector::from_element(4, 0.4),
                )
                .unwrap()
            })
            .collect();
        let cfg = RunConfig {
            gamma: 0.05,
            delta1: 0.5,
            delta2: 0.1,
            iota: 0.05,
            horizon: 50.0,
            seed: 99,
            ..Default::default()
        };
        let run_once = || {
            let source = DataSource::Synthetic {
                models: models.clone(),
                ground_truth: gt.clone(),
            };
            run(topo.clone(), source, cfg.clone()).unwrap().to_csv()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn broadcast_refreshes_neighbor_caches() {
        let topo = build_topology(&[3], &EdgeSpec::StarToMessenger, 0).unwrap();
        let mut rng = stream(4, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            2,
            &[0, 0, 0],
            &DVector::zeros(2),
            &DMatrix::identity(3, 3),
            &mut rng,
        )
        .unwrap();
        let models: Vec<NodeDataModel> = (0..3)
            .map(|i| {
                NodeDataModel::identity(gt.w_star.column(i).into_owned(), 0.0, DVector::zeros(2))
                    .unwrap()
            })
            .collect();
        let mut sim = Simulation::new(
            topo,
            DataSource::Synthetic {
                models,
                ground_truth: gt,
            },
            RunConfig::default(),
        )
        .unwrap();
        sim.nodes[1].w = DVector::from_element(2, 3.0);
        sim.apply(Event {
            time: 1.0,
            seq: 0,
            kind: EventKind::GroupBroadcast(0),
        })
        .unwrap();
        // Node 0 is the messenger, adjacent to 1 and 2.
        let (cached, at) = sim.node(0).last_seen[1].clone().unwrap();
        assert_eq!(cached, DVector::from_element(2, 3.0));
        assert_eq!(at, 1.0);
    }

    #[test]
    fn unreceived_slices_keep_initialization_values() {
        // Two groups whose messengers never exchange: after group 0's
        // exchange fires, group 1's columns in W^(0) stay at zero.
        let topo = build_topology(&[2, 2], &EdgeSpec::StarToMessenger, 0).unwrap();
        let mut rng = stream(8, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            2,
            &[0, 0, 1, 1],
            &DVector::from_element(2, 5.0),
            &DMatrix::identity(4, 4),
            &mut rng,
        )
        .unwrap();
        let models: Vec<NodeDataModel> = (0..4)
            .map(|i| {
                NodeDataModel::identity(gt.w_star.column(i).into_owned(), 0.0, DVector::zeros(2))
                    .unwrap()
            })
            .collect();
        let mut sim = Simulation::new(
            topo,
            DataSource::Synthetic {
                models,
                ground_truth: gt,
            },
            RunConfig::default(),
        )
        .unwrap();
        for i in 0..4 {
            sim.nodes[i].w = DVector::from_element(2, (i + 1) as f64);
        }
        sim.apply(Event {
            time: 1.0,
            seq: 0,
            kind: EventKind::MessengerExchange(0),
        })
        .unwrap();
        let w0 = &sim.group(0).assembled;
        assert_eq!(w0.column(0), DVector::from_element(2, 1.0).column(0));
        assert_eq!(w0.column(1), DVector::from_element(2, 2.0).column(0));
        assert_eq!(w0.column(2), DVector::zeros(2).column(0));
        assert_eq!(w0.column(3), DVector::zeros(2).column(0));
        // Group 1 received group 0's slice into its inbox; its own
        // exchange assembles all four columns.
        sim.apply(Event {
            time: 2.0,
            seq: 1,
            kind: EventKind::MessengerExchange(1),
        })
        .unwrap();
        let w1 = &sim.group(1).assembled;
        for i in 0..4 {
            assert_eq!(
                w1.column(i),
                DVector::from_element(2, (i + 1) as f64).column(0)
            );
        }
    }

    #[test]
    fn fresh_slices_assemble_the_true_global_matrix() {
        let topo = build_topology(&[2, 2], &EdgeSpec::StarToMessenger, 0).unwrap();
        let mut rng = stream(9, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            2,
            &[0, 0, 1, 1],
            &DVector::zeros(2),
            &DMatrix::identity(4, 4),
            &mut rng,
        )
        .unwrap();
        let models: Vec<NodeDataModel> = (0..4)
            .map(|i| {
                NodeDataModel::identity(gt.w_star.column(i).into_owned(), 0.0, DVector::zeros(2))
                    .unwrap()
            })
            .collect();
        let mut sim = Simulation::new(
            topo,
            DataSource::Synthetic {
                models,
                ground_truth: gt,
            },
            RunConfig::default(),
        )
        .unwrap();
        for i in 0..4 {
            sim.nodes[i].w = DVector::from_element(2, (10 * (i + 1)) as f64);
        }
        sim.apply(Event {
            time: 1.0,
            seq: 0,
            kind: EventKind::MessengerExchange(0),
        })
        .unwrap();
        sim.apply(Event {
            time: 2.0,
            seq: 1,
            kind: EventKind::MessengerExchange(1),
        })
        .unwrap();
        let live = sim.estimates();
        assert_eq!(sim.group(1).assembled, live);
    }

    #[test]
    fn two_timescale_event_ratio_tracks_rates() {
        let specs = [
            StreamSpec {
                kind: EventKind::InnerGrad(0),
                rate: 5.0,
            },
            StreamSpec {
                kind: EventKind::MessengerExchange(0),
                rate: 0.5,
            },
        ];
        let mut sched = EventSchedule::build(&specs, 4000.0, 11, false);
        let (mut inner, mut outer) = (0u64, 0u64);
        while let Some(ev) = sched.next_event() {
            match ev.kind {
                EventKind::InnerGrad(_) => inner += 1,
                EventKind::MessengerExchange(_) => outer += 1,
                _ => {}
            }
        }
        let ratio = outer as f64 / inner as f64;
        assert!(
            (ratio - 0.1).abs() / 0.1 < 0.1,
            "outer/inner ratio {ratio} not within 10% of 0.1"
        );
    }

    #[test]
    fn disabling_penalty_streams_reduces_to_independent_sgd() {
        // With delta1 = delta2 = 0 the run must equal a hand-rolled SGD
        // loop fed by the same derived streams.
        let p = 3;
        let topo = build_topology(&[2], &EdgeSpec::StarToMessenger, 0).unwrap();
        let mut rng = stream(12, StreamId::GroundTruth);
        let gt = sample_ground_truth(
            p,
            &[0, 0],
            &DVector::from_element(p, 1.0),
            &DMatrix::identity(2, 2),
            &mut rng,
        )
        .unwrap();
        let sigma = 0.3;
        let lambda = DVector::from_element(p, 0.2);
        let models: Vec<NodeDataModel> = (0..2)
            .map(|i| {
                NodeDataModel::identity(gt.w_star.column(i).into_owned(), sigma, lambda.clone())
                    .unwrap()
            })
            .collect();
        let seed = 77;
        let cfg = RunConfig {
            gamma: 0.1,
            delta1: 0.0,
            delta2: 0.0,
            horizon: 10.0,
            seed,
            deterministic_arrivals: true,
            rate_inner: 1.0,
            rate_exchange: 0.25,
            ..Default::default()
        };
        let mut sim = Simulation::new(
            topo,
            DataSource::Synthetic {
                models: models.clone(),
                ground_truth: gt.clone(),
            },
            cfg,
        )
        .unwrap();
        sim.run().unwrap();

        // Oracle: each node sees InnerGrad events at times 1..=10 and
        // draws from its own stream; xi comes from the per-tick stream.
        let mut oracle = vec![DVector::zeros(p); 2];
        let mut rngs: Vec<ChaCha8Rng> =
            (0..2).map(|i| stream(seed, StreamId::NodeData(i))).collect();
        for t in 1..=10u64 {
            for i in 0..2 {
                let mut xi_rng = stream(seed, StreamId::CommonNoiseTick(t));
                let xi = DVector::from_fn(p, |_, _| {
                    use rand::Rng as _;
                    xi_rng.sample(rand_distr::StandardNormal)
                });
                let obs = models[i].gen_observation(&xi, t, i, &mut rngs[i]).unwrap();
                let oi = models[i].omega_inv_diag().unwrap();
                let g = inner_gradient(&oracle[i], &obs.x, &obs.y, &oi).unwrap();
                oracle[i] -= g * 0.1;
            }
        }
        for i in 0..2 {
            assert_eq!(sim.node(i).w, oracle[i], "node {i} trajectory diverged");
        }
    }
}
