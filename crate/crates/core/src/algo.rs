//! Decentralized optimization engines.
//!
//! * `cgt`: clipped gradient tracking. Each agent mixes iterates through
//!   `R`, steps along its tracking variable clipped to norm `c0`, and updates
//!   the tracking variable through `C` plus the change in its local gradient.
//! * `gt`: the same recursion without clipping.
//! * `dgd_clip`: decentralized gradient descent that clips each local
//!   gradient before stepping; no tracking.
//!
//! States are stacked row-wise: row `i` of `x` and `y` belongs to agent `i`.

use std::fmt;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{Matrix, MixingPair, Vector};
use crate::metrics::{self, Recorder, TrajectoryRecord};
use crate::objective::{LocalObjective, ObjectiveError};
use crate::rng::{self, stream, ChaCha8Rng};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("non-finite state at iteration {k}")]
    NonFiniteState { k: usize },
    #[error("objective evaluation failed: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid algorithm configuration: {0}")]
    Config(String),
    #[error("recorder failed: {0}")]
    Recorder(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Cgt,
    Gt,
    DgdClip,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cgt => "cgt",
            Algorithm::Gt => "gt",
            Algorithm::DgdClip => "dgd_clip",
        }
    }

    pub fn tracks(self) -> bool {
        !matches!(self, Algorithm::DgdClip)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Clipping threshold: a positive number, `"inf"` (no clipping) or
/// `"auto"` (`1/sqrt(max_iters)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipThreshold {
    Finite(f64),
    Infinite,
    Auto,
}

impl Serialize for ClipThreshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ClipThreshold::Finite(c) => s.serialize_f64(*c),
            ClipThreshold::Infinite => s.serialize_str("inf"),
            ClipThreshold::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for ClipThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = ClipThreshold;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number, \"inf\" or \"auto\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<ClipThreshold, E> {
                if v == f64::INFINITY {
                    Ok(ClipThreshold::Infinite)
                } else {
                    Ok(ClipThreshold::Finite(v))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ClipThreshold, E> {
                Ok(ClipThreshold::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ClipThreshold, E> {
                Ok(ClipThreshold::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<ClipThreshold, E> {
                match v {
                    "inf" | "infinity" | "none" => Ok(ClipThreshold::Infinite),
                    "auto" => Ok(ClipThreshold::Auto),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Batch {
    #[default]
    Full,
    Minibatch {
        size: usize,
        seed: u64,
        #[serde(default)]
        tracking: MinibatchTracking,
    },
}

/// Which stochastic gradients enter `y^{k+1} = C y^k + g^{k+1} - g^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinibatchTracking {
    /// `g^{k+1}` on a fresh batch, `g^k` carried over from the previous
    /// step, so `1^T y^k` equals the sum of the current stochastic gradients.
    #[default]
    Resample,
    /// Both terms re-evaluated on the batch drawn for this step.
    SameBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    #[serde(default = "default_c0")]
    pub c0: ClipThreshold,
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default)]
    pub batch: Batch,
}

fn default_c0() -> ClipThreshold {
    ClipThreshold::Infinite
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm, alpha: f64, c0: ClipThreshold, max_iters: usize) -> Self {
        Self {
            algorithm,
            alpha,
            c0,
            max_iters,
            grad_tol: None,
            batch: Batch::Full,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AlgoError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        match (self.algorithm, self.c0) {
            (_, ClipThreshold::Finite(c)) if !(c > 0.0) => {
                return Err(AlgoError::Config(format!("c0 must be positive, got {c}")))
            }
            (Algorithm::Gt, ClipThreshold::Finite(_) | ClipThreshold::Auto) => {
                return Err(AlgoError::Config("gt runs without clipping; set c0 = \"inf\"".into()))
            }
            _ => {}
        }
        if let Some(t) = self.grad_tol {
            if !(t > 0.0) {
                return Err(AlgoError::Config(format!("grad_tol must be positive, got {t}")));
            }
        }
        if let Batch::Minibatch { size, .. } = self.batch {
            if size == 0 {
                return Err(AlgoError::Config("minibatch size must be positive".into()));
            }
        }
        Ok(())
    }

    /// The numeric threshold actually used (`inf` when not clipping).
    pub fn resolved_c0(&self) -> f64 {
        match (self.algorithm, self.c0) {
            (Algorithm::Gt, _) | (_, ClipThreshold::Infinite) => f64::INFINITY,
            (_, ClipThreshold::Finite(c)) => c,
            (_, ClipThreshold::Auto) => 1.0 / (self.max_iters.max(1) as f64).sqrt(),
        }
    }
}

/// Stacked iterates `x`, tracking variables `y` and the iteration counter.
///
/// For `dgd_clip`, `y` holds the local gradients that the next step uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub x: Matrix,
    pub y: Matrix,
    pub k: usize,
}

impl NetworkState {
    pub fn n_agents(&self) -> usize {
        self.x.nrows()
    }
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// `min{1, c0 / ||y||}`, and 1 for the zero vector.
pub fn clip_factor(y: &[f64], c0: f64) -> f64 {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || n <= c0 {
        1.0
    } else {
        c0 / n
    }
}

fn row_norm(m: &Matrix, i: usize) -> f64 {
    m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `W z` for an `N x N` weight matrix and `N x d` stack, summed in index
/// order.
fn mix(w: &Matrix, z: &Matrix) -> Matrix {
    let (n, d) = z.dim();
    let mut out = Matrix::zeros((n, d));
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            if wij != 0.0 {
                for c in 0..d {
                    out[(i, c)] += wij * z[(j, c)];
                }
            }
        }
    }
    out
}

/// Local gradients stacked by agent; each row is evaluated independently
/// so the result does not depend on the thread count.
fn local_gradients(objs: &[LocalObjective], x: &Matrix, batches: &[Option<Vec<usize>>]) -> Result<Matrix, ObjectiveError> {
    let rows: Vec<Vector> = objs
        .par_iter()
        .enumerate()
        .map(|(i, o)| {
            let xi = x.row(i).to_vec();
            o.eval_batch(&xi, batches[i].as_deref()).map(|(_, g)| g)
        })
        .collect::<Result<_, _>>()?;
    let (n, d) = x.dim();
    let mut g = Matrix::zeros((n, d));
    for (i, r) in rows.into_iter().enumerate() {
        g.row_mut(i).assign(&r);
    }
    Ok(g)
}

fn check_shapes(x: &Matrix, mix: &MixingPair, objs: &[LocalObjective]) -> Result<(), AlgoError> {
    let (n, d) = x.dim();
    if n != mix.n_agents() || n != objs.len() {
        return Err(AlgoError::Shape(format!(
            "{n} state rows, {} agents in the graph, {} objectives",
            mix.n_agents(),
            objs.len()
        )));
    }
    if let Some(o) = objs.iter().find(|o| o.dim() != d) {
        return Err(AlgoError::Shape(format!("state dimension {d}, objective dimension {}", o.dim())));
    }
    Ok(())
}

fn nonfinite(k: usize, e: ObjectiveError) -> AlgoError {
    match e {
        ObjectiveError::Overflow | ObjectiveError::NonFiniteInput => AlgoError::NonFiniteState { k },
        other => AlgoError::Objective(other),
    }
}

/// One tracking update with threshold `c0` (`inf` for plain tracking).
/// `old_grad` holds the gradients at `state.x` that `y` currently tracks.
fn tracking_update(
    state: &NetworkState,
    mixing: &MixingPair,
    objs: &[LocalObjective],
    alpha: f64,
    c0: f64,
    batches: &[Option<Vec<usize>>],
    old_grad: &Matrix,
) -> Result<(NetworkState, Matrix), AlgoError> {
    let k = state.k + 1;
    let mut x = mix(mixing.r(), &state.x);
    for i in 0..state.n_agents() {
        let step = alpha * clip_factor(state.y.row(i).as_slice().unwrap(), c0);
        x.row_mut(i).scaled_add(-step, &state.y.row(i));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NonFiniteState { k });
    }
    let new_grad = local_gradients(objs, &x, batches).map_err(|e| nonfinite(k, e))?;
    let mut y = mix(mixing.c(), &state.y);
    y += &new_grad;
    y -= old_grad;
    let next = NetworkState { x, y, k };
    if !next.is_finite() {
        return Err(AlgoError::NonFiniteState { k });
    }
    Ok((next, new_grad))
}

fn dgd_update(
    state: &NetworkState,
    mixing: &MixingPair,
    objs: &[LocalObjective],
    alpha: f64,
    c0: f64,
    next_batches: &[Option<Vec<usize>>],
) -> Result<NetworkState, AlgoError> {
    let k = state.k + 1;
    let mut x = mix(mixing.r(), &state.x);
    for i in 0..state.n_agents() {
        let step = alpha * clip_factor(state.y.row(i).as_slice().unwrap(), c0);
        x.row_mut(i).scaled_add(-step, &state.y.row(i));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NonFiniteState { k });
    }
    let y = local_gradients(objs, &x, next_batches).map_err(|e| nonfinite(k, e))?;
    Ok(NetworkState { x, y, k })
}

fn full_batches(n: usize) -> Vec<Option<Vec<usize>>> {
    vec![None; n]
}

/// Initial state: `y^0 = grad f(x^0)` (full batch).
pub fn initial_state(x0: Matrix, mixing: &MixingPair, objs: &[LocalObjective]) -> Result<NetworkState, AlgoError> {
    check_shapes(&x0, mixing, objs)?;
    let y = local_gradients(objs, &x0, &full_batches(objs.len())).map_err(|e| nonfinite(0, e))?;
    Ok(NetworkState { x: x0, y, k: 0 })
}

/// One full-batch clipped-gradient-tracking step.
pub fn cgt_step(state: &NetworkState, mixing: &MixingPair, objs: &[LocalObjective], cfg: &AlgoConfig) -> Result<NetworkState, AlgoError> {
    check_shapes(&state.x, mixing, objs)?;
    let b = full_batches(objs.len());
    let old = local_gradients(objs, &state.x, &b).map_err(|e| nonfinite(state.k, e))?;
    Ok(tracking_update(state, mixing, objs, cfg.alpha, cfg.resolved_c0(), &b, &old)?.0)
}

/// One full-batch gradient-tracking step (no clipping).
pub fn gt_step(state: &NetworkState, mixing: &MixingPair, objs: &[LocalObjective], cfg: &AlgoConfig) -> Result<NetworkState, AlgoError> {
    check_shapes(&state.x, mixing, objs)?;
    let b = full_batches(objs.len());
    let old = local_gradients(objs, &state.x, &b).map_err(|e| nonfinite(state.k, e))?;
    Ok(tracking_update(state, mixing, objs, cfg.alpha, f64::INFINITY, &b, &old)?.0)
}

/// One full-batch DGD step with clipped local gradients. `state.y` must
/// hold the local gradients at `state.x` (as produced by [`initial_state`]).
pub fn dgd_clip_step(state: &NetworkState, mixing: &MixingPair, objs: &[LocalObjective], cfg: &AlgoConfig) -> Result<NetworkState, AlgoError> {
    check_shapes(&state.x, mixing, objs)?;
    dgd_update(state, mixing, objs, cfg.alpha, cfg.resolved_c0(), &full_batches(objs.len()))
}

/// Per-agent sampler: without replacement within an epoch, reshuffled at
/// each epoch boundary (a short tail that cannot fill a batch is dropped).
#[derive(Debug, Clone)]
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, size: usize, seed: u64, agent: usize) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng: rng::seeded(seed, stream::MINIBATCH_BASE + agent as u64),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Stateful driver that owns minibatch samplers and gradient caches.
pub struct Engine<'a> {
    mixing: &'a MixingPair,
    objs: &'a [LocalObjective],
    cfg: AlgoConfig,
    c0: f64,
    samplers: Option<Vec<Option<BatchSampler>>>,
    cached_grad: Option<Matrix>,
}

impl<'a> Engine<'a> {
    pub fn new(mixing: &'a MixingPair, objs: &'a [LocalObjective], cfg: &AlgoConfig) -> Result<Self, AlgoError> {
        cfg.validate()?;
        if mixing.n_agents() != objs.len() {
            return Err(AlgoError::Shape(format!(
                "{} agents in the graph, {} objectives",
                mixing.n_agents(),
                objs.len()
            )));
        }
        let samplers = match cfg.batch {
            Batch::Full => None,
            Batch::Minibatch { size, seed, .. } => Some(
                objs.iter()
                    .enumerate()
                    .map(|(i, o)| o.n_samples().map(|n| BatchSampler::new(n, size, seed, i)))
                    .collect(),
            ),
        };
        Ok(Self {
            mixing,
            objs,
            c0: cfg.resolved_c0(),
            cfg: cfg.clone(),
            samplers,
            cached_grad: None,
        })
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    fn carries_gradient(&self) -> bool {
        self.cfg.algorithm.tracks()
            && !matches!(
                self.cfg.batch,
                Batch::Minibatch {
                    tracking: MinibatchTracking::SameBatch,
                    ..
                }
            )
    }

    fn draw(&mut self) -> Vec<Option<Vec<usize>>> {
        match &mut self.samplers {
            None => full_batches(self.objs.len()),
            Some(s) => s.iter_mut().map(|s| s.as_mut().map(BatchSampler::next_batch)).collect(),
        }
    }

    /// `x^0` given, `y^0` = local gradients at `x^0` (on a fresh minibatch
    /// in minibatch mode).
    pub fn init(&mut self, x0: Matrix) -> Result<NetworkState, AlgoError> {
        check_shapes(&x0, self.mixing, self.objs)?;
        let b = self.draw();
        let y = local_gradients(self.objs, &x0, &b).map_err(|e| nonfinite(0, e))?;
        if self.carries_gradient() {
            self.cached_grad = Some(y.clone());
        }
        Ok(NetworkState { x: x0, y, k: 0 })
    }

    pub fn step(&mut self, state: &NetworkState) -> Result<NetworkState, AlgoError> {
        let alpha = self.cfg.alpha;
        match self.cfg.algorithm {
            Algorithm::Cgt | Algorithm::Gt => {
                let b = self.draw();
                let old = match self.cached_grad.take() {
                    Some(g) => g,
                    None => local_gradients(self.objs, &state.x, &b).map_err(|e| nonfinite(state.k, e))?,
                };
                let (next, new_grad) = tracking_update(state, self.mixing, self.objs, alpha, self.c0, &b, &old)?;
                if self.carries_gradient() {
                    self.cached_grad = Some(new_grad);
                }
                Ok(next)
            }
            Algorithm::DgdClip => {
                let b = self.draw();
                dgd_update(state, self.mixing, self.objs, alpha, self.c0, &b)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    GradTol,
    /// A step produced a non-finite entry at iteration `k`.
    NonFiniteState { k: usize },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxIters => f.write_str("max_iters"),
            StopReason::GradTol => f.write_str("grad_tol"),
            StopReason::NonFiniteState { k } => write!(f, "non_finite_state at k={k}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: NetworkState,
    pub stop: StopReason,
    pub iterations: usize,
}

/// Runs until `max_iters`, until `||grad F(x_bar)|| <= grad_tol`, or until
/// the state stops being finite. One record is emitted per visited
/// iterate, `k = 0` included.
pub fn run(
    initial_x: Matrix,
    mixing: &MixingPair,
    objs: &[LocalObjective],
    cfg: &AlgoConfig,
    recorder: &mut dyn Recorder,
) -> Result<RunResult, AlgoError> {
    let mut engine = Engine::new(mixing, objs, cfg)?;
    let c0 = engine.c0();
    let mut state = match engine.init(initial_x) {
        Ok(s) => s,
        Err(AlgoError::NonFiniteState { .. }) => {
            return Err(AlgoError::Config("initial point is not finite or overflows the objective".into()))
        }
        Err(e) => return Err(e),
    };
    let mut min_grad = f64::INFINITY;
    loop {
        let rec: TrajectoryRecord = match metrics::record_step(&state, mixing, objs, cfg.alpha, c0, min_grad, recorder.wants_local_loss()) {
            Ok(r) => r,
            Err(ObjectiveError::Overflow | ObjectiveError::NonFiniteInput) => {
                return Ok(RunResult {
                    iterations: state.k,
                    stop: StopReason::NonFiniteState { k: state.k },
                    state,
                })
            }
            Err(e) => return Err(e.into()),
        };
        min_grad = rec.min_grad_so_far;
        recorder.record(&rec)?;
        if state.k >= cfg.max_iters {
            return Ok(RunResult {
                iterations: state.k,
                stop: StopReason::MaxIters,
                state,
            });
        }
        if cfg.grad_tol.is_some_and(|t| rec.grad_norm_avg <= t) {
            return Ok(RunResult {
                iterations: state.k,
                stop: StopReason::GradTol,
                state,
            });
        }
        match engine.step(&state) {
            Ok(next) => state = next,
            Err(AlgoError::NonFiniteState { k }) => {
                return Ok(RunResult {
                    iterations: state.k,
                    stop: StopReason::NonFiniteState { k },
                    state,
                })
            }
            Err(e) => return Err(e),
        }
    }
}

/// Slack values of the clipped-stepsize comparison for one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStepReport {
    /// `alpha * min{1, c0/||y_i||}`
    pub alpha_i: f64,
    /// `alpha * min{1, c0/(v_i ||grad F||)}`
    pub alpha_bar_i: f64,
    /// `alpha * min{1, c0/(||v|| ||grad F||)}`
    pub alpha_bar: f64,
    /// `|alpha_i - alpha_bar_i| * ||y_i||`
    pub lhs: f64,
    /// `alpha_bar_i * ||y_i - v_i grad F||`
    pub rhs: f64,
}

impl ClipStepReport {
    /// `rhs - lhs`; nonnegative when the deviation inequality holds.
    pub fn deviation_slack(&self) -> f64 {
        self.rhs - self.lhs
    }
    /// `alpha_bar_i - alpha_bar`; nonnegative when the ordering holds.
    pub fn ordering_slack(&self) -> f64 {
        self.alpha_bar_i - self.alpha_bar
    }
    /// Both inequalities hold up to a relative rounding allowance.
    pub fn holds(&self) -> bool {
        let tol = 1e-12 * self.lhs.max(self.rhs).max(f64::MIN_POSITIVE);
        self.deviation_slack() >= -tol && self.ordering_slack() >= -1e-15 * self.alpha_bar_i
    }
}

fn clipped_step(alpha: f64, c0: f64, norm: f64) -> f64 {
    if norm <= c0 {
        alpha
    } else {
        alpha * c0 / norm
    }
}

/// Compares the clipped local stepsize with the one an agent would use if
/// its tracking variable equalled `v_i grad F`. `v_norm` is `||v||` for the
/// network-wide stepsize and must be at least `v_i`.
pub fn clipped_step_check(y_i: &[f64], v_i: f64, grad_f: &[f64], alpha: f64, c0: f64, v_norm: f64) -> ClipStepReport {
    assert!(v_i > 0.0 && v_norm >= v_i, "need 0 < v_i <= ||v||");
    let yn = y_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gn = grad_f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let alpha_i = clipped_step(alpha, c0, yn);
    let alpha_bar_i = clipped_step(alpha, c0, v_i * gn);
    let alpha_bar = clipped_step(alpha, c0, v_norm * gn);
    let dev = y_i
        .iter()
        .zip(grad_f)
        .map(|(y, g)| (y - v_i * g).powi(2))
        .sum::<f64>()
        .sqrt();
    ClipStepReport {
        alpha_i,
        alpha_bar_i,
        alpha_bar,
        lhs: (alpha_i - alpha_bar_i).abs() * yn,
        rhs: alpha_bar_i * dev,
    }
}

/// Simple stepsize diagnostic `u^T v / (9 L N ||v||^2)` for a smoothness
/// level `l_hat`.
pub fn stepsize_bound(mixing: &MixingPair, l_hat: f64) -> f64 {
    let u = mixing.u();
    let v = mixing.v();
    let n = mixing.n_agents() as f64;
    u.dot(v) / (9.0 * l_hat * n * v.dot(v))
}

/// Column sums of `y` against the sum of local gradients at `x`:
/// `(||1^T y - sum_i grad f_i(x_i)||, ||sum_i grad f_i(x_i)||)`.
pub fn tracking_conservation_gap(state: &NetworkState, objs: &[LocalObjective]) -> Result<(f64, f64), ObjectiveError> {
    let g = local_gradients(objs, &state.x, &full_batches(objs.len()))?;
    let sum_y = state.y.sum_axis(Axis(0));
    let sum_g = g.sum_axis(Axis(0));
    let gap = (&sum_y - &sum_g).iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((gap, sum_g.iter().map(|v| v * v).sum::<f64>().sqrt()))
}

/// `max_i ||alpha_i y_i||` for the step about to be taken from `state`.
pub fn max_local_step(state: &NetworkState, alpha: f64, c0: f64) -> f64 {
    (0..state.n_agents())
        .map(|i| {
            let n = row_norm(&state.y, i);
            alpha * clip_factor(state.y.row(i).as_slice().unwrap(), c0) * n
        })
        .fold(0.0, f64::max)
}
