//! The dynamical pathway: linear state transitions over adaptive strides,
//! discrete derivatives, the three-channel error decomposition, and the
//! replica mechanism that lets several stride hypotheses compete to explain
//! the same input.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Shape, Tape, Tensor};
use crate::error::{invalid_config, GpcError, Result};
use crate::layer::{
    energy_on_tape, Activation, ErrorChannel, LayerState, Precision, PredictionWeights,
};

/// Learnable linear map that propagates a state across one stride. Kept
/// linear deliberately; nonlinearity lives in the hierarchical pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionWeights {
    weight: Tensor,
}

impl TransitionWeights {
    pub fn new(weight: Tensor) -> Self {
        debug_assert!(matches!(weight.shape(), Shape::Matrix(r, c) if r == c));
        TransitionWeights { weight }
    }

    /// Seeded uniform init in [-0.1, 0.1], matching the prediction weights.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..dim * dim)
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect();
        TransitionWeights::new(Tensor::matrix(dim, dim, data))
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn set_weight(&mut self, weight: Tensor) {
        debug_assert_eq!(weight.shape(), self.weight.shape());
        self.weight = weight;
    }

    pub fn dim(&self) -> usize {
        match self.weight.shape() {
            Shape::Matrix(n, _) => n,
            _ => unreachable!(),
        }
    }
}

/// Sampling interval in base samples. One transition step spans exactly one
/// stride: the transition map predicts the state a full stride ahead, it is
/// never composed from unit steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Stride(usize);

impl Stride {
    pub fn new(dt: usize) -> Result<Self> {
        if dt == 0 {
            return Err(invalid_config("stride", "must be at least 1"));
        }
        Ok(Stride(dt))
    }

    pub fn dt(&self) -> usize {
        self.0
    }
}

impl std::fmt::Display for Stride {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite categorical prior over admissible strides.
#[derive(Debug, Clone, PartialEq)]
pub struct StridePrior {
    candidates: Vec<usize>,
    weights: Vec<f64>,
    noise_scale: f64,
}

impl StridePrior {
    pub fn new(candidates: Vec<usize>, weights: Vec<f64>, noise_scale: f64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(GpcError::EmptyCandidates);
        }
        if candidates.contains(&0) {
            return Err(invalid_config(
                "stride_candidates",
                "strides must be at least 1",
            ));
        }
        let mut seen = candidates.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != candidates.len() {
            return Err(invalid_config("stride_candidates", "duplicate stride"));
        }
        if weights.len() != candidates.len() {
            return Err(invalid_config(
                "stride_weights",
                "must match the number of candidates",
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid_config(
                "stride_weights",
                "must be finite and not negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid_config("stride_weights", "must sum to 1"));
        }
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(invalid_config(
                "noise_scale",
                "must be finite and not negative",
            ));
        }
        Ok(StridePrior {
            candidates,
            weights,
            noise_scale,
        })
    }

    /// Uniform prior over the given candidates, no resampling noise.
    pub fn uniform(candidates: Vec<usize>) -> Result<Self> {
        let n = candidates.len();
        if n == 0 {
            return Err(GpcError::EmptyCandidates);
        }
        let w = vec![1.0 / n as f64; n];
        StridePrior::new(candidates, w, 0.0)
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// Draw a stride by the prior's probabilities.
    pub fn sample(&self, rng: &mut impl Rng) -> Stride {
        let idx = categorical(&self.weights, rng);
        Stride(self.candidates[idx])
    }

    /// Draw a stride among candidates not currently in use. Resampling noise
    /// perturbs the log-weights, letting a nonzero `noise_scale` occasionally
    /// promote low-probability strides. Returns `None` when every candidate
    /// is taken.
    pub fn sample_excluding(&self, in_use: &[usize], rng: &mut impl Rng) -> Option<Stride> {
        let mut cands = Vec::new();
        let mut logits = Vec::new();
        for (dt, w) in self.candidates.iter().zip(&self.weights) {
            if in_use.contains(dt) {
                continue;
            }
            cands.push(*dt);
            // Zero-probability candidates stay unreachable even under noise.
            logits.push(if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY });
        }
        if cands.is_empty() {
            return None;
        }
        if self.noise_scale > 0.0 {
            let noise = Normal::new(0.0, self.noise_scale).expect("validated scale");
            for l in logits.iter_mut() {
                if l.is_finite() {
                    *l += noise.sample(rng);
                }
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Some(Stride(cands[categorical(&probs, rng)]))
    }
}

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// A state in generalized coordinates of motion: order 0 is the value, order
/// k is the k-th temporal derivative, all sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    orders: Vec<LayerState>,
}

impl GeneralizedState {
    pub fn zeros(dim: usize, level: usize, max_order: usize) -> Self {
        let orders = (0..=max_order)
            .map(|k| LayerState::zeros(dim, level, k))
            .collect();
        GeneralizedState { orders }
    }

    /// Number of orders, i.e. max_order + 1.
    pub fn num_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn dim(&self) -> usize {
        self.orders[0].dim()
    }

    pub fn order(&self, k: usize) -> &LayerState {
        &self.orders[k]
    }

    pub fn order_mut(&mut self, k: usize) -> &mut LayerState {
        &mut self.orders[k]
    }
}

/// Predict the state one stride ahead.
pub fn transition(tape: &mut Tape, w: &TransitionWeights, x: &Tensor) -> Result<Tensor> {
    tape.matmul(&w.weight, x)
}

/// Discrete temporal derivative implied by the transition map:
/// dx = (w x - x) / dt.
pub fn discrete_derivative(
    tape: &mut Tape,
    w: &TransitionWeights,
    x: &Tensor,
    dt: Stride,
) -> Result<Tensor> {
    let ahead = transition(tape, w, x)?;
    let diff = tape.sub(&ahead, x)?;
    Ok(tape.scale(&diff, 1.0 / dt.dt() as f64))
}

/// One gradient step on a transition matrix against its channel error:
/// weight <- weight - rate * dE/dweight for E measured on eps = x - w x_prev,
/// with the gradient taken by reverse-mode differentiation.
pub fn update_transition(
    w: &mut TransitionWeights,
    eps: &ErrorChannel,
    prec: &Precision,
    x_prev: &Tensor,
    rate: f64,
) -> Result<()> {
    // The activity the propagation was compared against: eps = target - w x_prev.
    let mut tape = Tape::new();
    let current = transition(&mut tape, w, x_prev)?;
    let target = eps.epsilon().add(&current.detached())?;

    let mut tape = Tape::new();
    let leaf = tape.leaf(w.weight.clone());
    let pred = tape.matmul(&leaf, x_prev)?;
    let err = tape.sub(&target, &pred)?;
    let energy = energy_on_tape(&mut tape, &err, prec)?;
    let grads = tape.backward(&energy)?;
    let grad_w = grads.wrt_or_zero(&leaf);

    w.weight = w.weight.sub(&grad_w.scale(rate))?;
    Ok(())
}

/// The three error channels of one dynamical layer, kept separate so each
/// can carry its own precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicalErrors {
    /// Activity minus the top-down prediction of it.
    pub e_h: Tensor,
    /// Activity minus the transition model's propagation of the previous
    /// activity.
    pub e_d: Tensor,
    /// Discrete derivative minus the top-down prediction of it.
    pub e_d_prime: Tensor,
}

impl DynamicalErrors {
    /// Plain sum of the three channels, the undifferentiated total layer
    /// error. Diagnostic only; energies are always computed per channel.
    pub fn total(&self) -> Result<Tensor> {
        self.e_h.add(&self.e_d)?.add(&self.e_d_prime)
    }
}

/// Compute all three error channels for one state.
pub fn dynamical_errors(
    x: &Tensor,
    x_prev: &Tensor,
    pred_hier: &Tensor,
    pred_deriv: &Tensor,
    w: &TransitionWeights,
    dt: Stride,
) -> Result<DynamicalErrors> {
    let mut tape = Tape::new();
    let e_h = x.sub(pred_hier)?;
    let propagated = transition(&mut tape, w, x_prev)?;
    let e_d = x.sub(&propagated)?;
    let dx = discrete_derivative(&mut tape, w, x, dt)?;
    let e_d_prime = dx.sub(pred_deriv)?;
    Ok(DynamicalErrors {
        e_h,
        e_d,
        e_d_prime,
    })
}

/// One stride hypothesis: a full dynamical layer instance with its own
/// generalized state, transition map and derivative predictor per order,
/// per-channel precisions, and a window of recent precision-weighted errors.
#[derive(Debug, Clone)]
pub struct Replica {
    pub(crate) id: usize,
    pub(crate) stride: Stride,
    pub(crate) state: GeneralizedState,
    /// State snapshot one stride ago, the transition channel's input.
    pub(crate) prev: GeneralizedState,
    /// Transition map per order.
    pub(crate) transitions: Vec<TransitionWeights>,
    /// Map from order k+1 to the predicted derivative of order k.
    pub(crate) derivative_maps: Vec<PredictionWeights>,
    /// Transition-channel precision per order.
    pub(crate) trans_prec: Vec<Precision>,
    /// Derivative-channel precision per order below the top.
    pub(crate) deriv_prec: Vec<Precision>,
    /// Step at which this replica last (re)started; transition boundaries
    /// are counted from here.
    pub(crate) anchor: usize,
    /// False until the first on-grid step records a previous state; a replica
    /// without one has no transition error yet.
    pub(crate) primed: bool,
    pub(crate) window: VecDeque<f64>,
}

impl Replica {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        id: usize,
        dim: usize,
        level: usize,
        max_order: usize,
        stride: Stride,
        activation: Activation,
        anchor: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let transitions = (0..=max_order)
            .map(|_| TransitionWeights::init(dim, rng))
            .collect();
        let derivative_maps = (0..max_order)
            .map(|_| PredictionWeights::init(dim, dim, activation, rng))
            .collect();
        Replica {
            id,
            stride,
            state: GeneralizedState::zeros(dim, level, max_order),
            prev: GeneralizedState::zeros(dim, level, max_order),
            transitions,
            derivative_maps,
            trans_prec: (0..=max_order).map(|_| Precision::identity(dim)).collect(),
            deriv_prec: (0..max_order).map(|_| Precision::identity(dim)).collect(),
            anchor,
            primed: false,
            window: VecDeque::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn stride(&self) -> Stride {
        self.stride
    }

    pub fn state(&self) -> &GeneralizedState {
        &self.state
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Whether this replica has seen at least one on-grid sample since its
    /// last (re)initialization.
    pub fn primed(&self) -> bool {
        self.primed
    }

    /// Whether `step` falls on this replica's sampling grid.
    pub fn on_grid(&self, step: usize) -> bool {
        step >= self.anchor && (step - self.anchor).is_multiple_of(self.stride.dt())
    }

    /// Record one step's summed precision-weighted error norm, keeping at
    /// most `cap` entries.
    pub fn record_error(&mut self, value: f64, cap: usize) {
        self.window.push_back(value);
        while self.window.len() > cap {
            self.window.pop_front();
        }
    }

    /// Mean of the most recent `window` recorded errors, if that many exist.
    pub fn windowed_mean(&self, window: usize) -> Option<f64> {
        if window == 0 || self.window.len() < window {
            return None;
        }
        let sum: f64 = self.window.iter().rev().take(window).sum();
        Some(sum / window as f64)
    }
}

/// Competing stride hypotheses for one level, plus the prior they are drawn
/// from.
#[derive(Debug, Clone)]
pub struct ReplicaSet {
    replicas: Vec<Replica>,
    prior: StridePrior,
}

/// Outcome of one management pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ManageOutcome {
    /// Replica with the lowest windowed error.
    pub best: usize,
    pub resampled: Option<ResampleEvent>,
}

/// A replica was reinitialized with a fresh stride.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleEvent {
    pub replica: usize,
    pub old_stride: usize,
    pub new_stride: usize,
}

impl ReplicaSet {
    /// Create `count` replicas with distinct strides drawn from the prior.
    pub fn init(
        count: usize,
        dim: usize,
        level: usize,
        max_order: usize,
        prior: StridePrior,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if count == 0 {
            return Err(invalid_config("replicas", "must be at least 1"));
        }
        if count > prior.candidates().len() {
            return Err(invalid_config(
                "replicas",
                "more replicas than stride candidates",
            ));
        }
        let mut replicas = Vec::with_capacity(count);
        let mut in_use: Vec<usize> = Vec::new();
        for id in 0..count {
            let stride = prior
                .sample_excluding(&in_use, rng)
                .expect("count <= candidates");
            in_use.push(stride.dt());
            replicas.push(Replica::init(
                id, dim, level, max_order, stride, activation, 0, rng,
            ));
        }
        Ok(ReplicaSet { replicas, prior })
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn replicas_mut(&mut self) -> &mut [Replica] {
        &mut self.replicas
    }

    pub fn prior(&self) -> &StridePrior {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.replicas.iter().map(|r| r.stride.dt()).collect()
    }

    /// Whether every replica has accumulated a full error window.
    pub fn ready(&self, window: usize) -> bool {
        self.replicas.iter().all(|r| r.window.len() >= window)
    }

    /// Best replica id by windowed error without any resampling.
    pub fn best(&self, window: usize) -> usize {
        self.rank(window).0
    }

    /// (best, worst) ids. Best: lowest windowed mean, ties to the smaller
    /// stride, then the smaller id. Worst: the mirror image.
    fn rank(&self, window: usize) -> (usize, usize) {
        let mut best = 0;
        let mut worst = 0;
        let mean = |r: &Replica| {
            r.windowed_mean(window)
                .unwrap_or_else(|| r.window.iter().sum::<f64>() / r.window.len().max(1) as f64)
        };
        for i in 1..self.replicas.len() {
            let (ri, rb, rw) = (
                &self.replicas[i],
                &self.replicas[best],
                &self.replicas[worst],
            );
            let (mi, mb, mw) = (mean(ri), mean(rb), mean(rw));
            if mi < mb || (mi == mb && ri.stride < rb.stride) {
                best = i;
            }
            if mi > mw || (mi == mw && ri.stride > rw.stride) {
                worst = i;
            }
        }
        (best, worst)
    }
}

/// Rank replicas by windowed precision-weighted error and resample the worst
/// if it is more than twice as bad as the best.
///
/// The fresh stride is drawn from the prior excluding every stride currently
/// in use (including the one being replaced); if no candidate is free the set
/// is left as it is. The resampled replica restarts from scratch: zero state,
/// fresh weights, identity precisions, empty window, anchor at `step`.
///
/// Callers should wait until [`ReplicaSet::ready`]; on a partial window the
/// ranking falls back to the mean of whatever is recorded.
pub fn manage_replicas(
    set: &mut ReplicaSet,
    window: usize,
    step: usize,
    rng: &mut impl Rng,
) -> ManageOutcome {
    let (best, worst) = set.rank(window);
    if set.replicas.len() < 2 || best == worst {
        return ManageOutcome {
            best,
            resampled: None,
        };
    }

    let mean = |r: &Replica| {
        r.windowed_mean(window)
            .unwrap_or_else(|| r.window.iter().sum::<f64>() / r.window.len().max(1) as f64)
    };
    let best_mean = mean(&set.replicas[best]);
    let worst_mean = mean(&set.replicas[worst]);
    if worst_mean <= 2.0 * best_mean {
        return ManageOutcome {
            best,
            resampled: None,
        };
    }

    let in_use = set.strides();
    let Some(new_stride) = set.prior.sample_excluding(&in_use, rng) else {
        return ManageOutcome {
            best,
            resampled: None,
        };
    };

    let old = &set.replicas[worst];
    let (id, dim, level, max_order) = (
        old.id,
        old.state.dim(),
        old.state.order(0).layer(),
        old.state.num_orders() - 1,
    );
    let activation = old
        .derivative_maps
        .first()
        .map(|m| m.activation())
        .unwrap_or(Activation::Linear);
    let event = ResampleEvent {
        replica: id,
        old_stride: old.stride.dt(),
        new_stride: new_stride.dt(),
    };
    set.replicas[worst] =
        Replica::init(id, dim, level, max_order, new_stride, activation, step, rng);
    ManageOutcome {
        best,
        resampled: Some(event),
    }
}
