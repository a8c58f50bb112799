//! One predictive coding layer: a state vector that predicts the layer below
//! through learnable weights, plus the local gradient updates for state,
//! weights, and precision.
//!
//! Every update here is local: it reads the layer's own error channels and
//! writes only the layer's own fields, which is what lets the network step
//! layers in any order against an immutable snapshot.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Tensor};
use crate::error::{GpcError, Result};

/// Lower bound on eigenvalues of the precision matrix.
pub const PI_EIG_MIN: f64 = 1e-3;
/// Upper bound on eigenvalues of the precision matrix.
pub const PI_EIG_MAX: f64 = 1e6;
/// Step-halving attempts before a state update gives up and keeps the state.
pub const MAX_HALVINGS: u32 = 20;
/// A state update may not increase its objective by more than this.
pub const ENERGY_SLACK: f64 = 1e-9;

/// Weight initialization half-range.
const INIT_RANGE: f64 = 0.1;

/// Activation applied to a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

/// Which kind of mismatch an error channel measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Activity minus the top-down prediction of it.
    Hierarchical,
    /// Activity minus the transition model's propagation of the previous
    /// activity.
    Transition,
    /// Discrete temporal derivative minus the top-down prediction of it.
    Derivative,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Hierarchical => write!(f, "hierarchical"),
            ChannelKind::Transition => write!(f, "transition"),
            ChannelKind::Derivative => write!(f, "derivative"),
        }
    }
}

/// State vector of one layer at one dynamical order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    mu: Tensor,
    layer: usize,
    order: usize,
}

impl LayerState {
    pub fn new(mu: Tensor, layer: usize, order: usize) -> Self {
        debug_assert!(matches!(mu.shape(), Shape::Vector(_)));
        LayerState { mu, layer, order }
    }

    pub fn zeros(dim: usize, layer: usize, order: usize) -> Self {
        LayerState::new(Tensor::zeros(Shape::Vector(dim)), layer, order)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn set_mu(&mut self, mu: Tensor) {
        debug_assert_eq!(mu.shape(), self.mu.shape());
        self.mu = mu;
    }

    pub fn dim(&self) -> usize {
        self.mu.shape().len()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

/// Learnable map from a layer's state to its prediction of the layer below.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWeights {
    weight: Tensor,
    activation: Activation,
}

impl PredictionWeights {
    pub fn new(weight: Tensor, activation: Activation) -> Self {
        debug_assert!(matches!(weight.shape(), Shape::Matrix(..)));
        PredictionWeights { weight, activation }
    }

    /// Seeded uniform init in [-0.1, 0.1]; small and symmetric so relu units
    /// start near the active side of the kink in expectation.
    pub fn init(rows: usize, cols: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        PredictionWeights::new(Tensor::matrix(rows, cols, data), activation)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn set_weight(&mut self, weight: Tensor) {
        debug_assert_eq!(weight.shape(), self.weight.shape());
        self.weight = weight;
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_dim(&self) -> usize {
        match self.weight.shape() {
            Shape::Matrix(r, _) => r,
            _ => unreachable!(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self.weight.shape() {
            Shape::Matrix(_, c) => c,
            _ => unreachable!(),
        }
    }
}

/// activation(weight_tensor * mu). The weight is passed explicitly so the
/// caller decides whether it is a tape leaf (weight learning) or a constant
/// (state inference).
fn forward(
    tape: &mut Tape,
    weight: &Tensor,
    activation: Activation,
    mu: &Tensor,
) -> Result<Tensor> {
    let pre = tape.matmul(weight, mu)?;
    Ok(match activation {
        Activation::Linear => pre,
        Activation::Relu => tape.relu(&pre),
    })
}

/// Predict the layer below from the state above.
pub fn predict(tape: &mut Tape, weights: &PredictionWeights, mu_above: &Tensor) -> Result<Tensor> {
    forward(tape, &weights.weight, weights.activation, mu_above)
}

/// Inverse covariance and covariance of one error channel, maintained as a
/// pair so neither is ever stale.
#[derive(Debug, Clone, PartialEq)]
pub struct Precision {
    pi: Tensor,
    sigma: Tensor,
    ln_det_pi: f64,
}

impl Precision {
    pub fn identity(n: usize) -> Self {
        Precision {
            pi: Tensor::identity(n),
            sigma: Tensor::identity(n),
            ln_det_pi: 0.0,
        }
    }

    /// Build from a covariance estimate: symmetrize, clip eigenvalues so the
    /// precision stays within [PI_EIG_MIN, PI_EIG_MAX], and derive pi and
    /// ln det pi from the same eigendecomposition so pi * sigma = I holds by
    /// construction.
    pub fn from_sigma(sigma: &Tensor) -> Result<Self> {
        let n = match sigma.shape() {
            Shape::Matrix(r, c) if r == c => r,
            _ => {
                return Err(GpcError::ShapeMismatch {
                    op: "precision",
                    lhs: sigma.shape().to_string(),
                    rhs: "square matrix".into(),
                })
            }
        };

        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = 0.5 * (sigma.at(i, j) + sigma.at(j, i));
            }
        }
        let eig = SymmetricEigen::new(m);

        let (sig_min, sig_max) = (1.0 / PI_EIG_MAX, 1.0 / PI_EIG_MIN);
        let lambda: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|l| l.clamp(sig_min, sig_max))
            .collect();

        let mut sig = vec![0.0; n * n];
        let mut pi = vec![0.0; n * n];
        let mut ln_det_pi = 0.0;
        for (k, l) in lambda.iter().enumerate() {
            ln_det_pi -= l.ln();
            for i in 0..n {
                let vik = eig.eigenvectors[(i, k)];
                for j in 0..n {
                    let vjk = eig.eigenvectors[(j, k)];
                    sig[i * n + j] += l * vik * vjk;
                    pi[i * n + j] += vik * vjk / l;
                }
            }
        }

        Ok(Precision {
            pi: Tensor::matrix(n, n, pi),
            sigma: Tensor::matrix(n, n, sig),
            ln_det_pi,
        })
    }

    /// Restore a stored triple verbatim. Used when deserializing; the values
    /// are trusted to obey the same invariants `from_sigma` establishes, so
    /// a round trip through storage is bitwise exact.
    pub fn from_parts(pi: Tensor, sigma: Tensor, ln_det_pi: f64) -> Result<Self> {
        let square = |t: &Tensor| matches!(t.shape(), Shape::Matrix(r, c) if r == c);
        if !square(&pi) || !square(&sigma) || pi.shape() != sigma.shape() {
            return Err(GpcError::ShapeMismatch {
                op: "precision",
                lhs: pi.shape().to_string(),
                rhs: sigma.shape().to_string(),
            });
        }
        if !ln_det_pi.is_finite() {
            return Err(GpcError::Checkpoint("non-finite log determinant".into()));
        }
        Ok(Precision {
            pi,
            sigma,
            ln_det_pi,
        })
    }

    pub fn pi(&self) -> &Tensor {
        &self.pi
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn ln_det_pi(&self) -> f64 {
        self.ln_det_pi
    }

    pub fn dim(&self) -> usize {
        match self.pi.shape() {
            Shape::Matrix(n, _) => n,
            _ => unreachable!(),
        }
    }

    /// The error-independent part of the channel energy:
    /// (n ln 2 pi - ln det pi) / 2.
    pub fn energy_constant(&self) -> f64 {
        let n = self.dim() as f64;
        0.5 * (n * std::f64::consts::TAU.ln() - self.ln_det_pi)
    }
}

/// A raw prediction error and its precision-weighted form.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorChannel {
    kind: ChannelKind,
    epsilon: Tensor,
    xi: Tensor,
}

impl ErrorChannel {
    /// xi is recomputed as pi * epsilon here, never cached independently.
    pub fn new(kind: ChannelKind, epsilon: Tensor, prec: &Precision) -> Result<Self> {
        let xi = prec.pi.matmul(&epsilon)?;
        Ok(ErrorChannel { kind, epsilon, xi })
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn epsilon(&self) -> &Tensor {
        &self.epsilon
    }

    pub fn xi(&self) -> &Tensor {
        &self.xi
    }

    pub fn dim(&self) -> usize {
        self.epsilon.shape().len()
    }
}

/// Channel energy under the Laplace assumption:
/// E = (eps^T pi eps - ln det pi + n ln 2 pi) / 2.
pub fn layer_energy(eps: &ErrorChannel, prec: &Precision) -> f64 {
    energy_value(&eps.epsilon, prec)
}

/// Same energy, for a bare error vector.
pub fn energy_value(epsilon: &Tensor, prec: &Precision) -> f64 {
    let quad = epsilon
        .quadratic_form(&prec.pi)
        .expect("dims checked upstream");
    0.5 * quad + prec.energy_constant()
}

/// Channel energy as a taped expression of a (possibly taped) error vector.
/// The log-determinant and 2 pi terms do not depend on the error, so they
/// enter as an added constant.
pub fn energy_on_tape(tape: &mut Tape, epsilon: &Tensor, prec: &Precision) -> Result<Tensor> {
    let quad = tape.quadratic_form(epsilon, &prec.pi)?;
    let half = tape.scale(&quad, 0.5);
    tape.add(&half, &Tensor::scalar(prec.energy_constant()))
}

/// One gradient step on the weights against the error they cause below:
/// weight <- weight - rate * dE_below/dweight, with the gradient taken by
/// reverse-mode differentiation through the prediction and the energy.
pub fn update_weights(
    weights: &mut PredictionWeights,
    eps_below: &ErrorChannel,
    prec_below: &Precision,
    mu: &LayerState,
    rate: f64,
) -> Result<()> {
    // The activity the prediction was compared against: eps = target - pred.
    let mut tape = Tape::new();
    let current_pred = predict(&mut tape, weights, &mu.mu)?;
    let target = eps_below.epsilon.add(&current_pred.detached())?;

    let mut tape = Tape::new();
    let w = tape.leaf(weights.weight.clone());
    let pred = forward(&mut tape, &w, weights.activation, &mu.mu)?;
    let eps = tape.sub(&target, &pred)?;
    let energy = energy_on_tape(&mut tape, &eps, prec_below)?;
    let grads = tape.backward(&energy)?;
    let grad_w = grads.wrt_or_zero(&w);

    weights.weight = weights.weight.sub(&grad_w.scale(rate))?;
    Ok(())
}

/// Top-down pressure on a state: the error channel measured on the state
/// itself, with its precision.
#[derive(Clone, Copy)]
pub struct OwnChannel<'a> {
    pub eps: &'a ErrorChannel,
    pub prec: &'a Precision,
}

/// Bottom-up pressure on a state: the error channel its prediction causes in
/// the layer below, with that channel's precision and the generating weights.
#[derive(Clone, Copy)]
pub struct BelowChannel<'a> {
    pub eps: &'a ErrorChannel,
    pub prec: &'a Precision,
    pub weights: &'a PredictionWeights,
}

/// One gradient step on a state against the sum of the energies it touches:
/// the error on itself and the error it causes below. The deepest layer
/// passes `below = None`; a layer with nothing above passes `own = None`.
///
/// The step is halved up to [`MAX_HALVINGS`] times until the objective does
/// not increase by more than [`ENERGY_SLACK`]; if no step qualifies the state
/// is left unchanged.
pub fn update_state(
    mu: &mut LayerState,
    own: Option<OwnChannel<'_>>,
    below: Option<BelowChannel<'_>>,
    rate: f64,
) -> Result<()> {
    // Reconstruct the fixed quantities each channel compared against.
    let own_pred = match &own {
        Some(o) => Some(mu.mu.sub(&o.eps.epsilon)?),
        None => None,
    };
    let below_target = match &below {
        Some(b) => {
            let mut tape = Tape::new();
            let pred = predict(&mut tape, b.weights, &mu.mu)?;
            Some(b.eps.epsilon.add(&pred)?)
        }
        None => None,
    };

    let objective = |tape: &mut Tape, mu_t: &Tensor| -> Result<Tensor> {
        let mut total = Tensor::scalar(0.0);
        if let (Some(o), Some(pred)) = (&own, &own_pred) {
            let eps = tape.sub(mu_t, pred)?;
            let e = energy_on_tape(tape, &eps, o.prec)?;
            total = tape.add(&total, &e)?;
        }
        if let (Some(b), Some(target)) = (&below, &below_target) {
            let pred = predict(tape, b.weights, mu_t)?;
            let eps = tape.sub(target, &pred)?;
            let e = energy_on_tape(tape, &eps, b.prec)?;
            total = tape.add(&total, &e)?;
        }
        Ok(total)
    };

    let mut tape = Tape::new();
    let mu_leaf = tape.leaf(mu.mu.clone());
    let root = objective(&mut tape, &mu_leaf)?;
    let base_energy = root.scalar_value();
    let grads = tape.backward(&root)?;
    let grad = grads.wrt_or_zero(&mu_leaf);

    let mut step = rate;
    for _ in 0..=MAX_HALVINGS {
        let candidate = mu.mu.sub(&grad.scale(step))?;
        let mut probe = Tape::new();
        let energy = objective(&mut probe, &candidate)?.scalar_value();
        if energy <= base_energy + ENERGY_SLACK {
            mu.mu = candidate;
            return Ok(());
        }
        step *= 0.5;
    }
    Ok(())
}

/// Move the covariance toward the empirical second moment of the error:
/// sigma <- sigma + rate * (eps eps^T - sigma), then symmetrize, clip, and
/// refresh pi. Fixed point: sigma = E[eps eps^T].
pub fn update_covariance(prec: &mut Precision, eps: &ErrorChannel, rate: f64) -> Result<()> {
    let moment = eps.epsilon.outer(&eps.epsilon)?;
    let delta = moment.sub(&prec.sigma)?;
    let sigma = prec.sigma.add(&delta.scale(rate))?;
    *prec = Precision::from_sigma(&sigma)?;
    Ok(())
}
