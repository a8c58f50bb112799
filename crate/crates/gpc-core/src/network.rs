//! The full hierarchical-dynamical model: a stack of levels, each carrying a
//! set of stride replicas, stepped against a sample stream.
//!
//! One step clamps the observation, relaxes the free states against every
//! live error channel (settling), then applies one local gradient update per
//! weight matrix and one covariance update per channel. Levels above the
//! first run on their replicas' sampling grids, so slow levels change on a
//! coarser clock than fast ones.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Tensor};
use crate::dynamics::{
    discrete_derivative, update_transition, Replica, ReplicaSet, Stride, StridePrior,
};
use crate::error::{invalid_config, GpcError, Result};
use crate::layer::{
    energy_on_tape, energy_value, layer_energy, predict, update_covariance, update_weights,
    Activation, ChannelKind, ErrorChannel, Precision, PredictionWeights,
};
use crate::signal::Sequence;

fn default_window() -> usize {
    100
}

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of hierarchical levels, at least 1. Level 0 receives the data.
    pub levels: usize,
    /// Highest dynamical order; each level tracks orders 0..=orders.
    pub orders: usize,
    /// State width per level, lowest first.
    pub widths: Vec<usize>,
    /// Stride replicas per level, at least 1.
    pub replicas: usize,
    /// Stride candidates per level; distinct, at least `replicas` of them.
    pub stride_candidates: Vec<Vec<usize>>,
    /// Optional prior weights over the candidates, uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride_weights: Option<Vec<Vec<f64>>>,
    /// Log-weight perturbation scale used when a replica is resampled.
    #[serde(default)]
    pub noise_scale: f64,
    /// State relaxation rate.
    pub rate_mu: f64,
    /// Weight learning rate.
    pub rate_theta: f64,
    /// Covariance tracking rate.
    pub rate_pi: f64,
    /// Relaxation iterations per step, at least 1.
    pub settle_iterations: usize,
    /// Passes over the training sequence.
    pub epochs: usize,
    pub seed: u64,
    /// Error window length used to rank replicas; management runs at this
    /// cadence during training.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Activation of the downward and derivative predictions. Transitions
    /// stay linear.
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid_config("levels", "must be at least 1"));
        }
        if self.widths.len() != self.levels {
            return Err(invalid_config("widths", "must list one width per level"));
        }
        if self.widths.contains(&0) {
            return Err(invalid_config("widths", "must be positive"));
        }
        if self.replicas == 0 {
            return Err(invalid_config("replicas", "must be at least 1"));
        }
        if self.stride_candidates.len() != self.levels {
            return Err(invalid_config(
                "stride_candidates",
                "must list one candidate set per level",
            ));
        }
        for set in &self.stride_candidates {
            if set.len() < self.replicas {
                return Err(invalid_config(
                    "stride_candidates",
                    "need at least as many candidates as replicas",
                ));
            }
        }
        if let Some(w) = &self.stride_weights {
            if w.len() != self.levels {
                return Err(invalid_config(
                    "stride_weights",
                    "must list one weight set per level",
                ));
            }
        }
        for (rate, field) in [
            (self.rate_mu, "rate_mu"),
            (self.rate_theta, "rate_theta"),
            (self.rate_pi, "rate_pi"),
        ] {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(invalid_config(field, "must be finite and not negative"));
            }
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(invalid_config(
                "noise_scale",
                "must be finite and not negative",
            ));
        }
        if self.settle_iterations == 0 {
            return Err(invalid_config("settle_iterations", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(invalid_config("window", "must be at least 1"));
        }
        Ok(())
    }
}

/// Identity of one error channel within the model.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ChannelSpec {
    level: usize,
    replica: usize,
    order: usize,
    kind: ChannelKind,
    stride: usize,
}

/// One error channel's diagnostics for one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub level: usize,
    pub replica: usize,
    pub order: usize,
    pub channel: ChannelKind,
    pub stride: usize,
    pub error_norm: f64,
    pub xi_norm: f64,
    pub energy: f64,
}

/// Per-level summary for one step: the best replica's stride and the norm of
/// its summed order-0 error vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub stride: usize,
    pub combined_error_norm: f64,
}

/// What one call to [`Model::step`] did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Step counter value the observation was consumed at.
    pub step: usize,
    /// One row per error channel that fired, measured at the settled states
    /// before any parameter update.
    pub channels: Vec<ChannelReport>,
    pub levels: Vec<LevelReport>,
    /// Total energy after each relaxation iteration.
    pub settle_energies: Vec<f64>,
    /// Sum of the energies of every row in `channels`.
    pub total_free_energy: f64,
}

/// A replica was resampled during training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManageEvent {
    pub step: usize,
    pub level: usize,
    pub replica: usize,
    pub old_stride: usize,
    pub new_stride: usize,
}

/// Full record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub steps: Vec<StepReport>,
    pub events: Vec<ManageEvent>,
}

/// Open-loop prediction from the current states.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Predicted observation per rollout step.
    pub predictions: Vec<Tensor>,
    /// True when every transition used has zero norm, i.e. the model has not
    /// learned any dynamics to roll forward.
    pub untrained: bool,
}

/// One hierarchical level: the map predicting the level below, the precision
/// of this level's own top-down error, and the competing stride replicas.
#[derive(Debug, Clone)]
struct Level {
    /// Prediction of the level below; `None` at level 0.
    down: Option<PredictionWeights>,
    /// Precision of the top-down error on this level's activity.
    hier_prec: Precision,
    set: ReplicaSet,
    /// Index of the currently preferred replica, updated at management time.
    best: usize,
}

/// A built model: levels, replicas, and the step counter that drives every
/// sampling grid.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    levels: Vec<Level>,
    step: usize,
    rng: ChaCha8Rng,
}

impl Model {
    /// Build a fresh model. All randomness (weight init, stride draws) comes
    /// from the config seed, so equal configs build bit-identical models.
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let dim = config.widths[l];
            let down = if l == 0 {
                None
            } else {
                Some(PredictionWeights::init(
                    config.widths[l - 1],
                    dim,
                    config.activation,
                    &mut rng,
                ))
            };
            let candidates = config.stride_candidates[l].clone();
            let prior = match &config.stride_weights {
                Some(w) => StridePrior::new(candidates, w[l].clone(), config.noise_scale)?,
                None => {
                    let n = candidates.len();
                    StridePrior::new(candidates, vec![1.0 / n as f64; n], config.noise_scale)?
                }
            };
            let set = ReplicaSet::init(
                config.replicas,
                dim,
                l,
                config.orders,
                prior,
                config.activation,
                &mut rng,
            )?;
            levels.push(Level {
                down,
                hier_prec: Precision::identity(dim),
                set,
                best: 0,
            });
        }
        Ok(Model {
            config,
            levels,
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Observations consumed so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, level: usize, what: &'static str) -> Result<&Level> {
        self.levels
            .get(level)
            .ok_or(GpcError::LevelOutOfRange { level, what })
    }

    pub fn replicas(&self, level: usize) -> Result<&[Replica]> {
        Ok(self.level(level, "replicas")?.set.replicas())
    }

    pub fn best_replica(&self, level: usize) -> Result<&Replica> {
        let l = self.level(level, "best replica")?;
        Ok(&l.set.replicas()[l.best])
    }

    pub fn best_stride(&self, level: usize) -> Result<usize> {
        Ok(self.best_replica(level)?.stride().dt())
    }

    pub fn down_weights(&self, level: usize) -> Result<Option<&PredictionWeights>> {
        Ok(self.level(level, "downward weights")?.down.as_ref())
    }

    pub fn hier_precision(&self, level: usize) -> Result<&Precision> {
        Ok(&self.level(level, "precision")?.hier_prec)
    }

    /// Consume one observation: clamp it, settle the free states, then apply
    /// one local update per weight matrix and per channel covariance.
    pub fn step(&mut self, observation: &Tensor) -> Result<StepReport> {
        let obs_dim = self.config.widths[0];
        if observation.shape() != Shape::Vector(obs_dim) {
            return Err(GpcError::ShapeMismatch {
                op: "observe",
                lhs: observation.shape().to_string(),
                rhs: Shape::Vector(obs_dim).to_string(),
            });
        }
        let t = self.step;

        // Pin the data: every level-0 replica holds the current observation
        // at order 0, whether or not this is one of its sampling instants.
        for rep in self.levels[0].set.replicas_mut() {
            rep.state.order_mut(0).set_mu(observation.detached());
        }

        // Replicas at a sampling instant, split by whether they already have
        // a previous sample to propagate from. A replica's first instant only
        // takes the sample in.
        let mut active: Vec<(usize, usize)> = Vec::new();
        let mut priming: Vec<(usize, usize)> = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            for (r, rep) in level.set.replicas().iter().enumerate() {
                if rep.on_grid(t) {
                    if rep.primed() {
                        active.push((l, r));
                    } else {
                        priming.push((l, r));
                    }
                }
            }
        }
        // A level's top-down channel fires when its preferred replica does.
        let hier: Vec<(usize, usize)> = self
            .levels
            .iter()
            .enumerate()
            .filter_map(|(l, level)| active.contains(&(l, level.best)).then_some((l, level.best)))
            .collect();

        let mut settle_energies = Vec::with_capacity(self.config.settle_iterations);
        if !active.is_empty() {
            for _ in 0..self.config.settle_iterations {
                settle_energies.push(self.settle_iteration(&active, &hier)?);
            }
        }

        // Errors at the settled states, before any parameter moves. Every
        // update below reads this snapshot.
        let raw = {
            let mut scratch = Tape::new();
            let lookup = |l: usize, r: usize, k: usize| {
                self.levels[l].set.replicas()[r]
                    .state()
                    .order(k)
                    .mu()
                    .detached()
            };
            let (_, channels) = self.assemble_energy(&mut scratch, &active, &hier, &lookup)?;
            channels
        };
        let mut channels: Vec<(ChannelSpec, ErrorChannel)> = Vec::with_capacity(raw.len());
        let mut rows = Vec::with_capacity(raw.len());
        for (spec, eps) in raw {
            let prec = self.precision_of(&spec);
            let ch = ErrorChannel::new(spec.kind, eps, prec)?;
            rows.push(ChannelReport {
                level: spec.level,
                replica: spec.replica,
                order: spec.order,
                channel: spec.kind,
                stride: spec.stride,
                error_norm: ch.epsilon().norm(),
                xi_norm: ch.xi().norm(),
                energy: layer_energy(&ch, prec),
            });
            channels.push((spec, ch));
        }

        // One gradient step per weight matrix, each from its own channel.
        let rate_theta = self.config.rate_theta;
        for (spec, ch) in &channels {
            match spec.kind {
                ChannelKind::Transition => {
                    let rep = &mut self.levels[spec.level].set.replicas_mut()[spec.replica];
                    let prev = rep.prev.order(spec.order).mu().clone();
                    update_transition(
                        &mut rep.transitions[spec.order],
                        ch,
                        &rep.trans_prec[spec.order],
                        &prev,
                        rate_theta,
                    )?;
                }
                ChannelKind::Derivative => {
                    let rep = &mut self.levels[spec.level].set.replicas_mut()[spec.replica];
                    let above = rep.state.order(spec.order + 1).clone();
                    update_weights(
                        &mut rep.derivative_maps[spec.order],
                        ch,
                        &rep.deriv_prec[spec.order],
                        &above,
                        rate_theta,
                    )?;
                }
                ChannelKind::Hierarchical => {
                    // The map predicting this level lives one level up; the
                    // top level is predicted to be quiet and has no map.
                    if spec.level + 1 < self.levels.len() {
                        let up = spec.level + 1;
                        let src = self.levels[up].set.replicas()[self.levels[up].best]
                            .state()
                            .order(0)
                            .clone();
                        let prec = self.levels[spec.level].hier_prec.clone();
                        let down = self.levels[up]
                            .down
                            .as_mut()
                            .expect("levels above the first predict downward");
                        update_weights(down, ch, &prec, &src, rate_theta)?;
                    }
                }
            }
        }

        // One covariance update per channel.
        let rate_pi = self.config.rate_pi;
        for (spec, ch) in &channels {
            update_covariance(self.precision_of_mut(spec), ch, rate_pi)?;
        }

        // Each active replica scores this step by its summed precision-
        // weighted dynamical error; the window feeds replica management.
        let cap = self.config.window;
        for &(l, r) in &active {
            let sum: f64 = channels
                .iter()
                .filter(|(s, _)| {
                    s.level == l && s.replica == r && s.kind != ChannelKind::Hierarchical
                })
                .map(|(_, ch)| ch.xi().norm())
                .sum();
            self.levels[l].set.replicas_mut()[r].record_error(sum, cap);
        }

        let mut level_rows = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let b = level.best;
            let mut combined = Tensor::vector(vec![0.0; self.config.widths[l]]);
            for (s, ch) in &channels {
                if s.level == l && s.replica == b && s.order == 0 {
                    combined = combined.add(ch.epsilon())?;
                }
            }
            level_rows.push(LevelReport {
                level: l,
                stride: level.set.replicas()[b].stride().dt(),
                combined_error_norm: combined.norm(),
            });
        }

        // The sample each firing replica will propagate from next time.
        for &(l, r) in active.iter().chain(priming.iter()) {
            let rep = &mut self.levels[l].set.replicas_mut()[r];
            rep.prev = rep.state.clone();
            rep.primed = true;
        }

        self.step += 1;
        let total = rows.iter().map(|r| r.energy).sum();
        Ok(StepReport {
            step: t,
            channels: rows,
            levels: level_rows,
            settle_energies,
            total_free_energy: total,
        })
    }

    /// One relaxation iteration: a single gradient step on every free state
    /// against the total energy, accepted only if the total does not rise
    /// (halving the rate up to [`crate::layer::MAX_HALVINGS`] times, else the
    /// states stay put). Returns the energy after the iteration.
    fn settle_iteration(
        &mut self,
        active: &[(usize, usize)],
        hier: &[(usize, usize)],
    ) -> Result<f64> {
        let k_max = self.config.orders;

        let mut tape = Tape::new();
        let mut leaves: BTreeMap<(usize, usize, usize), Tensor> = BTreeMap::new();
        for &(l, r) in active {
            for k in 0..=k_max {
                if l == 0 && k == 0 {
                    continue; // clamped to the observation
                }
                let cur = self.levels[l].set.replicas()[r]
                    .state()
                    .order(k)
                    .mu()
                    .clone();
                leaves.insert((l, r, k), tape.leaf(cur));
            }
        }

        if leaves.is_empty() {
            // Nothing free to relax; report the energy as it stands.
            let mut scratch = Tape::new();
            let lookup = |l: usize, r: usize, k: usize| {
                self.levels[l].set.replicas()[r]
                    .state()
                    .order(k)
                    .mu()
                    .detached()
            };
            let (total, _) = self.assemble_energy(&mut scratch, active, hier, &lookup)?;
            return Ok(total.scalar_value());
        }

        let (base, grads) = {
            let lookup = |l: usize, r: usize, k: usize| match leaves.get(&(l, r, k)) {
                Some(leaf) => leaf.clone(),
                None => self.levels[l].set.replicas()[r]
                    .state()
                    .order(k)
                    .mu()
                    .detached(),
            };
            let (root, _) = self.assemble_energy(&mut tape, active, hier, &lookup)?;
            (root.scalar_value(), tape.backward(&root)?)
        };

        let mut rate = self.config.rate_mu;
        for _ in 0..=crate::layer::MAX_HALVINGS {
            let mut candidate: BTreeMap<(usize, usize, usize), Tensor> = BTreeMap::new();
            for (key, leaf) in &leaves {
                let g = grads.wrt_or_zero(leaf);
                candidate.insert(*key, leaf.detached().sub(&g.scale(rate))?);
            }
            let energy = {
                let mut scratch = Tape::new();
                let lookup = |l: usize, r: usize, k: usize| match candidate.get(&(l, r, k)) {
                    Some(t) => t.clone(),
                    None => self.levels[l].set.replicas()[r]
                        .state()
                        .order(k)
                        .mu()
                        .detached(),
                };
                let (total, _) = self.assemble_energy(&mut scratch, active, hier, &lookup)?;
                total.scalar_value()
            };
            if energy <= base + crate::layer::ENERGY_SLACK {
                for ((l, r, k), value) in candidate {
                    self.levels[l].set.replicas_mut()[r]
                        .state
                        .order_mut(k)
                        .set_mu(value);
                }
                return Ok(energy);
            }
            rate *= 0.5;
        }
        Ok(base)
    }

    /// Sum every live channel's energy on the given tape, reading states
    /// through `lookup` so the same expression serves relaxation (taped
    /// leaves), acceptance checks, and plain error collection.
    fn assemble_energy(
        &self,
        tape: &mut Tape,
        active: &[(usize, usize)],
        hier: &[(usize, usize)],
        lookup: &dyn Fn(usize, usize, usize) -> Tensor,
    ) -> Result<(Tensor, Vec<(ChannelSpec, Tensor)>)> {
        let k_max = self.config.orders;
        let mut channels: Vec<(ChannelSpec, Tensor)> = Vec::new();
        let mut total: Option<Tensor> = None;
        let mut accumulate = |tape: &mut Tape, e: Tensor| -> Result<()> {
            total = Some(match total.take() {
                None => e,
                Some(t) => tape.add(&t, &e)?,
            });
            Ok(())
        };

        for &(l, r) in active {
            let rep = &self.levels[l].set.replicas()[r];
            let dt = rep.stride();
            for k in 0..=k_max {
                let x = lookup(l, r, k);
                let prop = tape.matmul(rep.transitions[k].weight(), rep.prev.order(k).mu())?;
                let eps = tape.sub(&x, &prop)?;
                let e = energy_on_tape(tape, &eps, &rep.trans_prec[k])?;
                accumulate(tape, e)?;
                channels.push((
                    ChannelSpec {
                        level: l,
                        replica: r,
                        order: k,
                        kind: ChannelKind::Transition,
                        stride: dt.dt(),
                    },
                    eps,
                ));
            }
            for k in 0..k_max {
                let x = lookup(l, r, k);
                let above = lookup(l, r, k + 1);
                let dx = discrete_derivative(tape, &rep.transitions[k], &x, dt)?;
                let pred = predict(tape, &rep.derivative_maps[k], &above)?;
                let eps = tape.sub(&dx, &pred)?;
                let e = energy_on_tape(tape, &eps, &rep.deriv_prec[k])?;
                accumulate(tape, e)?;
                channels.push((
                    ChannelSpec {
                        level: l,
                        replica: r,
                        order: k,
                        kind: ChannelKind::Derivative,
                        stride: dt.dt(),
                    },
                    eps,
                ));
            }
        }

        for &(l, r) in hier {
            let target = lookup(l, r, 0);
            let pred = if l + 1 < self.levels.len() {
                let up = &self.levels[l + 1];
                let src = lookup(l + 1, up.best, 0);
                predict(
                    tape,
                    up.down
                        .as_ref()
                        .expect("levels above the first predict downward"),
                    &src,
                )?
            } else {
                Tensor::vector(vec![0.0; self.config.widths[l]])
            };
            let eps = tape.sub(&target, &pred)?;
            let e = energy_on_tape(tape, &eps, &self.levels[l].hier_prec)?;
            accumulate(tape, e)?;
            channels.push((
                ChannelSpec {
                    level: l,
                    replica: r,
                    order: 0,
                    kind: ChannelKind::Hierarchical,
                    stride: self.levels[l].set.replicas()[r].stride().dt(),
                },
                eps,
            ));
        }

        Ok((total.unwrap_or_else(|| Tensor::scalar(0.0)), channels))
    }

    fn precision_of(&self, spec: &ChannelSpec) -> &Precision {
        let level = &self.levels[spec.level];
        match spec.kind {
            ChannelKind::Hierarchical => &level.hier_prec,
            ChannelKind::Transition => &level.set.replicas()[spec.replica].trans_prec[spec.order],
            ChannelKind::Derivative => &level.set.replicas()[spec.replica].deriv_prec[spec.order],
        }
    }

    fn precision_of_mut(&mut self, spec: &ChannelSpec) -> &mut Precision {
        let level = &mut self.levels[spec.level];
        match spec.kind {
            ChannelKind::Hierarchical => &mut level.hier_prec,
            ChannelKind::Transition => {
                &mut level.set.replicas_mut()[spec.replica].trans_prec[spec.order]
            }
            ChannelKind::Derivative => {
                &mut level.set.replicas_mut()[spec.replica].deriv_prec[spec.order]
            }
        }
    }

    /// Rank replicas at every level and resample stragglers. Call between
    /// steps; [`Model::train`] does so every `window` steps.
    pub fn manage(&mut self) -> Vec<ManageEvent> {
        let mut events = Vec::new();
        let window = self.config.window;
        let step = self.step;
        for (l, level) in self.levels.iter_mut().enumerate() {
            if !level.set.ready(window) {
                continue;
            }
            let outcome =
                crate::dynamics::manage_replicas(&mut level.set, window, step, &mut self.rng);
            level.best = outcome.best;
            if let Some(ev) = outcome.resampled {
                events.push(ManageEvent {
                    step,
                    level: l,
                    replica: ev.replica,
                    old_stride: ev.old_stride,
                    new_stride: ev.new_stride,
                });
            }
        }
        events
    }

    /// Run `config.epochs` passes over the sequence, managing replicas every
    /// `config.window` steps.
    pub fn train(&mut self, seq: &Sequence) -> Result<Trace> {
        if seq.dim() != self.config.widths[0] {
            return Err(GpcError::ShapeMismatch {
                op: "train",
                lhs: Shape::Vector(seq.dim()).to_string(),
                rhs: Shape::Vector(self.config.widths[0]).to_string(),
            });
        }
        let mut steps = Vec::new();
        let mut events = Vec::new();
        for _ in 0..self.config.epochs {
            for i in 0..seq.len() {
                steps.push(self.step(seq.sample(i))?);
                if self.step.is_multiple_of(self.config.window) {
                    events.extend(self.manage());
                }
            }
        }
        Ok(Trace { steps, events })
    }

    /// Roll the current states forward without consuming data. Per step:
    /// every level's preferred transition propagates its state, `actions`
    /// (if any) perturb the top level, and the hierarchy maps the result
    /// down to a predicted observation. Action i of n applies at step i,
    /// with the last action held for the remaining steps.
    ///
    /// The model is never mutated; the rollout works on cloned states.
    pub fn rollout(&self, actions: &[Tensor], horizon: usize) -> Result<Rollout> {
        if horizon < 1 {
            return Err(GpcError::InvalidHorizon);
        }
        let top = self.levels.len() - 1;
        let top_dim = self.config.widths[top];
        for a in actions {
            if a.shape() != Shape::Vector(top_dim) {
                return Err(GpcError::ShapeMismatch {
                    op: "rollout",
                    lhs: a.shape().to_string(),
                    rhs: Shape::Vector(top_dim).to_string(),
                });
            }
        }

        let best = |l: usize| &self.levels[l].set.replicas()[self.levels[l].best];
        let mut states: Vec<Tensor> = (0..=top)
            .map(|l| best(l).state().order(0).mu().detached())
            .collect();
        let used_norm: f64 = (0..=top)
            .map(|l| best(l).transitions[0].weight().norm())
            .sum();

        let mut predictions = Vec::with_capacity(horizon);
        for i in 1..=horizon {
            for (l, state) in states.iter_mut().enumerate() {
                *state = best(l).transitions[0].weight().matmul(state)?;
            }
            if !actions.is_empty() {
                let idx = i.min(actions.len()) - 1;
                states[top] = states[top].add(&actions[idx])?;
            }
            for l in (0..top).rev() {
                let mut tape = Tape::new();
                let down = self.levels[l + 1]
                    .down
                    .as_ref()
                    .expect("levels above the first predict downward");
                states[l] = predict(&mut tape, down, &states[l + 1])?;
            }
            predictions.push(states[0].clone());
        }
        Ok(Rollout {
            predictions,
            untrained: used_norm == 0.0,
        })
    }

    /// Predicted observations over `horizon` steps with no actions applied.
    pub fn predict_rollout(&self, horizon: usize) -> Result<Vec<Tensor>> {
        Ok(self.rollout(&[], horizon)?.predictions)
    }

    /// How far transporting a state across time and across the hierarchy
    /// disagree: || d_l(h(x)) - h(d_{l+1}(x)) || for the preferred replicas'
    /// order-0 state x at `level + 1`.
    pub fn consistency_gap(&self, level: usize) -> Result<f64> {
        if level + 1 >= self.levels.len() {
            return Err(GpcError::LevelOutOfRange {
                level,
                what: "consistency gap",
            });
        }
        let up = &self.levels[level + 1];
        let down = up
            .down
            .as_ref()
            .expect("levels above the first predict downward");
        let x = up.set.replicas()[up.best].state().order(0).mu();
        let d_lo = &self.levels[level].set.replicas()[self.levels[level].best].transitions[0];
        let d_hi = &up.set.replicas()[up.best].transitions[0];

        let mut tape = Tape::new();
        let through_below = d_lo.weight().matmul(&predict(&mut tape, down, x)?)?;
        let through_above = predict(&mut tape, down, &d_hi.weight().matmul(x)?)?;
        Ok(through_below.sub(&through_above)?.norm())
    }

    /// Total free energy of the model as it stands: every replica's dynamical
    /// channels (transitions only once a replica has a previous sample) plus
    /// each level's top-down channel through its preferred replica.
    pub fn total_free_energy(&self) -> f64 {
        let k_max = self.config.orders;
        let mut total = 0.0;
        for (l, level) in self.levels.iter().enumerate() {
            for rep in level.set.replicas() {
                let dt = rep.stride();
                if rep.primed() {
                    for k in 0..=k_max {
                        let prop = rep.transitions[k]
                            .weight()
                            .matmul(rep.prev.order(k).mu())
                            .expect("consistent shapes by construction");
                        let eps = rep
                            .state()
                            .order(k)
                            .mu()
                            .sub(&prop)
                            .expect("consistent shapes by construction");
                        total += energy_value(&eps, &rep.trans_prec[k]);
                    }
                }
                for k in 0..k_max {
                    let mut tape = Tape::new();
                    let dx = discrete_derivative(
                        &mut tape,
                        &rep.transitions[k],
                        rep.state().order(k).mu(),
                        dt,
                    )
                    .expect("consistent shapes by construction");
                    let pred = predict(
                        &mut tape,
                        &rep.derivative_maps[k],
                        rep.state().order(k + 1).mu(),
                    )
                    .expect("consistent shapes by construction");
                    let eps = dx.sub(&pred).expect("consistent shapes by construction");
                    total += energy_value(&eps, &rep.deriv_prec[k]);
                }
            }
            let x = level.set.replicas()[level.best].state().order(0).mu();
            let pred = if l + 1 < self.levels.len() {
                let up = &self.levels[l + 1];
                let src = up.set.replicas()[up.best].state().order(0).mu();
                let mut tape = Tape::new();
                predict(
                    &mut tape,
                    up.down
                        .as_ref()
                        .expect("levels above the first predict downward"),
                    src,
                )
                .expect("consistent shapes by construction")
            } else {
                Tensor::vector(vec![0.0; self.config.widths[l]])
            };
            let eps = x.sub(&pred).expect("consistent shapes by construction");
            total += energy_value(&eps, &level.hier_prec);
        }
        total
    }
}

const CHECKPOINT_VERSION: u32 = 1;

/// Dense array with an explicit shape, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredReplica {
    level: usize,
    replica: usize,
    stride: usize,
    anchor: usize,
    primed: bool,
    window: Vec<f64>,
}

/// On-disk model snapshot. Arrays are keyed by position in the hierarchy so
/// the file stays greppable; see `hier_key` and friends for the scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    step: usize,
    weights: BTreeMap<String, StoredArray>,
    precisions: BTreeMap<String, StoredArray>,
    states: BTreeMap<String, StoredArray>,
    replicas: Vec<StoredReplica>,
    best: Vec<usize>,
}

fn hier_key(level: usize) -> String {
    format!("l{level}.hier")
}

fn trans_key(level: usize, replica: usize, order: usize) -> String {
    format!("l{level}.r{replica}.k{order}.trans")
}

fn deriv_key(level: usize, replica: usize, order: usize) -> String {
    format!("l{level}.r{replica}.k{order}.deriv")
}

fn state_key(level: usize, replica: usize, order: usize, which: &str) -> String {
    format!("l{level}.r{replica}.k{order}.{which}")
}

fn store(t: &Tensor) -> StoredArray {
    StoredArray {
        shape: t.shape().dims(),
        data: t.data().to_vec(),
    }
}

fn restore(map: &mut BTreeMap<String, StoredArray>, key: &str, expected: Shape) -> Result<Tensor> {
    let arr = map
        .remove(key)
        .ok_or_else(|| GpcError::Checkpoint(format!("missing entry {key}")))?;
    if arr.shape != expected.dims() || arr.data.len() != expected.len() {
        return Err(GpcError::Checkpoint(format!(
            "entry {key} has shape {:?}, expected {}",
            arr.shape, expected
        )));
    }
    Ok(Tensor::new(expected, arr.data))
}

fn store_precision(map: &mut BTreeMap<String, StoredArray>, name: &str, prec: &Precision) {
    map.insert(format!("{name}.pi"), store(prec.pi()));
    map.insert(format!("{name}.sigma"), store(prec.sigma()));
    map.insert(
        format!("{name}.lndet"),
        StoredArray {
            shape: vec![],
            data: vec![prec.ln_det_pi()],
        },
    );
}

fn restore_precision(
    map: &mut BTreeMap<String, StoredArray>,
    name: &str,
    dim: usize,
) -> Result<Precision> {
    let pi = restore(map, &format!("{name}.pi"), Shape::Matrix(dim, dim))?;
    let sigma = restore(map, &format!("{name}.sigma"), Shape::Matrix(dim, dim))?;
    let lndet = restore(map, &format!("{name}.lndet"), Shape::Scalar)?;
    Precision::from_parts(pi, sigma, lndet.scalar_value())
}

impl Model {
    fn to_checkpoint(&self) -> CheckpointFile {
        let k_max = self.config.orders;
        let mut weights = BTreeMap::new();
        let mut precisions = BTreeMap::new();
        let mut states = BTreeMap::new();
        let mut replicas = Vec::new();
        let mut best = Vec::with_capacity(self.levels.len());

        for (l, level) in self.levels.iter().enumerate() {
            if let Some(down) = &level.down {
                weights.insert(hier_key(l), store(down.weight()));
            }
            store_precision(&mut precisions, &hier_key(l), &level.hier_prec);
            best.push(level.best);
            for (r, rep) in level.set.replicas().iter().enumerate() {
                for k in 0..=k_max {
                    weights.insert(trans_key(l, r, k), store(rep.transitions[k].weight()));
                    store_precision(&mut precisions, &trans_key(l, r, k), &rep.trans_prec[k]);
                    states.insert(state_key(l, r, k, "mu"), store(rep.state().order(k).mu()));
                    states.insert(state_key(l, r, k, "prev"), store(rep.prev.order(k).mu()));
                }
                for k in 0..k_max {
                    weights.insert(deriv_key(l, r, k), store(rep.derivative_maps[k].weight()));
                    store_precision(&mut precisions, &deriv_key(l, r, k), &rep.deriv_prec[k]);
                }
                replicas.push(StoredReplica {
                    level: l,
                    replica: r,
                    stride: rep.stride().dt(),
                    anchor: rep.anchor(),
                    primed: rep.primed(),
                    window: rep.window.iter().copied().collect(),
                });
            }
        }

        CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            weights,
            precisions,
            states,
            replicas,
            best,
        }
    }

    fn from_checkpoint(mut file: CheckpointFile) -> Result<Model> {
        if file.format_version != CHECKPOINT_VERSION {
            return Err(GpcError::Checkpoint(format!(
                "format version {} not supported (expected {})",
                file.format_version, CHECKPOINT_VERSION
            )));
        }
        let mut model = Model::build(file.config.clone())?;
        model.step = file.step;
        // Fresh draws after a resume must not replay the build sequence.
        model.rng = ChaCha8Rng::seed_from_u64(file.config.seed.wrapping_add(file.step as u64));

        let levels = model.levels.len();
        let k_max = model.config.orders;
        if file.best.len() != levels {
            return Err(GpcError::Checkpoint("wrong number of best entries".into()));
        }
        if file.replicas.len() != levels * model.config.replicas {
            return Err(GpcError::Checkpoint(
                "wrong number of replica entries".into(),
            ));
        }

        for (l, level) in model.levels.iter_mut().enumerate() {
            let dim = model.config.widths[l];
            if let Some(down) = &mut level.down {
                let shape = Shape::Matrix(model.config.widths[l - 1], dim);
                down.set_weight(restore(&mut file.weights, &hier_key(l), shape)?);
            }
            level.hier_prec = restore_precision(&mut file.precisions, &hier_key(l), dim)?;
            if file.best[l] >= level.set.len() {
                return Err(GpcError::Checkpoint(format!(
                    "best replica {} out of range at level {l}",
                    file.best[l]
                )));
            }
            level.best = file.best[l];

            let candidates = &model.config.stride_candidates[l];
            let mut strides_seen: Vec<usize> = Vec::new();
            for (r, rep) in level.set.replicas_mut().iter_mut().enumerate() {
                let meta = file
                    .replicas
                    .iter()
                    .find(|m| m.level == l && m.replica == r)
                    .ok_or_else(|| {
                        GpcError::Checkpoint(format!("missing replica entry l{l}.r{r}"))
                    })?;
                if !candidates.contains(&meta.stride) {
                    return Err(GpcError::Checkpoint(format!(
                        "stride {} at l{l}.r{r} is not a candidate",
                        meta.stride
                    )));
                }
                if strides_seen.contains(&meta.stride) {
                    return Err(GpcError::Checkpoint(format!(
                        "duplicate stride {} at level {l}",
                        meta.stride
                    )));
                }
                strides_seen.push(meta.stride);
                rep.stride = Stride::new(meta.stride)?;
                rep.anchor = meta.anchor;
                rep.primed = meta.primed;
                rep.window = meta.window.iter().copied().collect();

                for k in 0..=k_max {
                    let shape = Shape::Matrix(dim, dim);
                    rep.transitions[k].set_weight(restore(
                        &mut file.weights,
                        &trans_key(l, r, k),
                        shape,
                    )?);
                    rep.trans_prec[k] =
                        restore_precision(&mut file.precisions, &trans_key(l, r, k), dim)?;
                    let vec = Shape::Vector(dim);
                    rep.state.order_mut(k).set_mu(restore(
                        &mut file.states,
                        &state_key(l, r, k, "mu"),
                        vec,
                    )?);
                    rep.prev.order_mut(k).set_mu(restore(
                        &mut file.states,
                        &state_key(l, r, k, "prev"),
                        vec,
                    )?);
                }
                for k in 0..k_max {
                    let shape = Shape::Matrix(dim, dim);
                    rep.derivative_maps[k].set_weight(restore(
                        &mut file.weights,
                        &deriv_key(l, r, k),
                        shape,
                    )?);
                    rep.deriv_prec[k] =
                        restore_precision(&mut file.precisions, &deriv_key(l, r, k), dim)?;
                }
            }
        }

        for (what, map) in [
            ("weight", &file.weights),
            ("precision", &file.precisions),
            ("state", &file.states),
        ] {
            if let Some(key) = map.keys().next() {
                return Err(GpcError::Checkpoint(format!("unknown {what} entry {key}")));
            }
        }
        Ok(model)
    }

    /// Serialize the full model to a JSON string. Loading the result gives a
    /// bit-identical model; serializing again gives an identical string.
    pub fn checkpoint_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Model> {
        Model::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.checkpoint_string()?;
        std::fs::write(path.as_ref(), text).map_err(|e| GpcError::io(path.as_ref(), e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| GpcError::io(path.as_ref(), e))?;
        Model::from_checkpoint_str(&text)
    }
}

/// Surgical access for in-crate tests that need exact weights or states.
#[cfg(test)]
impl Model {
    pub(crate) fn replica_set_mut(&mut self, level: usize) -> &mut ReplicaSet {
        &mut self.levels[level].set
    }

    pub(crate) fn down_weights_mut(&mut self, level: usize) -> &mut PredictionWeights {
        self.levels[level]
            .down
            .as_mut()
            .expect("levels above the first predict downward")
    }
}
