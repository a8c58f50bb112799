//! Policy selection by expected-free-energy scoring: enumerate candidate
//! action sequences paired with their own rollout horizons, roll each one
//! forward on a cloned copy of the model, and pick the policy whose
//! predicted observations deviate least from a goal trajectory.
//!
//! Only the risk term is scored: the precision-weighted quadratic deviation
//! from the preference, length-normalized so policies with different
//! horizons compete on mean rather than accumulated deviation. Epistemic
//! value is not modelled, and neither is gradient-based policy search; the
//! action sets here are small enough for exhaustive argmin.

use serde::Serialize;

use crate::autodiff::{Shape, Tensor};
use crate::dynamics::Stride;
use crate::error::{invalid_config, GpcError, Result};
use crate::layer::Precision;
use crate::network::{Model, Rollout};

/// Hard ceiling on |actions|^max_length before enumeration refuses to run.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// One discrete control option: a bias added to the top-level state at each
/// rollout step that selects it.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    delta: Tensor,
}

impl Action {
    /// The delta must be a finite vector. Its width is checked against the
    /// model's top level when a policy is rolled out.
    pub fn new(delta: Tensor) -> Result<Self> {
        if !matches!(delta.shape(), Shape::Vector(_)) {
            return Err(GpcError::ShapeMismatch {
                op: "action",
                lhs: delta.shape().to_string(),
                rhs: "vector".into(),
            });
        }
        if !delta.is_finite() {
            return Err(invalid_config("action", "delta must be finite"));
        }
        Ok(Action { delta })
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }
}

/// An ordered action sequence and the horizon it is rolled out over. The
/// horizon may exceed the sequence length; the final action is then held
/// for the remaining steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    actions: Vec<Action>,
    horizon: Stride,
}

impl Policy {
    pub fn new(actions: Vec<Action>, horizon: Stride) -> Result<Self> {
        if actions.is_empty() {
            return Err(GpcError::EmptyActionSet);
        }
        if horizon.dt() < actions.len() {
            return Err(GpcError::InvalidHorizon);
        }
        Ok(Policy { actions, horizon })
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn horizon(&self) -> Stride {
        self.horizon
    }
}

/// Where the observations should go: a goal trajectory over observation
/// space and the precision that weights deviations from it.
#[derive(Debug, Clone)]
pub struct Preference {
    goal: Vec<Tensor>,
    goal_precision: Precision,
}

impl Preference {
    /// A full goal trajectory. Rollouts that run past its end hold the last
    /// entry, so a one-entry trajectory acts as a standing terminal goal.
    pub fn trajectory(goal: Vec<Tensor>, goal_precision: Precision) -> Result<Self> {
        if goal.is_empty() {
            return Err(invalid_config("goal", "needs at least one entry"));
        }
        let want = Shape::Vector(goal_precision.dim());
        for g in &goal {
            if g.shape() != want {
                return Err(GpcError::ShapeMismatch {
                    op: "preference",
                    lhs: g.shape().to_string(),
                    rhs: want.to_string(),
                });
            }
            if !g.is_finite() {
                return Err(invalid_config("goal", "entries must be finite"));
            }
        }
        Ok(Preference {
            goal,
            goal_precision,
        })
    }

    /// A single goal applied to every rollout step.
    pub fn terminal(goal: Tensor, goal_precision: Precision) -> Result<Self> {
        Preference::trajectory(vec![goal], goal_precision)
    }

    /// Goal for rollout step `i`, holding the last entry past the end.
    pub fn goal_at(&self, i: usize) -> &Tensor {
        &self.goal[i.min(self.goal.len() - 1)]
    }

    pub fn goal(&self) -> &[Tensor] {
        &self.goal
    }

    pub fn goal_precision(&self) -> &Precision {
        &self.goal_precision
    }
}

/// Score of one policy: per-step precision-weighted deviations from the
/// goal, already divided by the horizon, and their sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfeScore {
    /// Sum of the breakdown entries.
    pub value: f64,
    /// One entry per rollout step.
    pub breakdown: Vec<f64>,
}

/// Every action sequence over `actions` of each requested length, paired
/// with every horizon long enough to cover it.
///
/// The order is deterministic: lengths as given, sequences in lexicographic
/// order of action index, horizons as given innermost. Refuses to run when
/// |actions|^max_length exceeds [`ENUMERATION_LIMIT`].
pub fn enumerate_policies(
    actions: &[Action],
    lengths: &[usize],
    horizons: &[Stride],
) -> Result<Vec<Policy>> {
    if actions.is_empty() {
        return Err(GpcError::EmptyActionSet);
    }
    if lengths.contains(&0) {
        return Err(invalid_config(
            "lengths",
            "policies need at least one action",
        ));
    }
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let count = u32::try_from(max_len)
        .ok()
        .and_then(|e| (actions.len() as u128).checked_pow(e))
        .unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(GpcError::EnumerationExplosion {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }

    let mut out = Vec::new();
    for &n in lengths {
        let mut idx = vec![0usize; n];
        'sequences: loop {
            for &h in horizons {
                if h.dt() >= n {
                    out.push(Policy {
                        actions: idx.iter().map(|&i| actions[i].clone()).collect(),
                        horizon: h,
                    });
                }
            }
            // Odometer increment on the last position gives lexicographic order.
            let mut pos = n;
            loop {
                if pos == 0 {
                    break 'sequences;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < actions.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
    Ok(out)
}

/// Predicted observation trajectory under `policy`, computed on cloned
/// state. The model is never mutated; an all-zero transition stack is
/// reported through [`Rollout::untrained`] rather than an error.
pub fn rollout_policy(model: &Model, policy: &Policy) -> Result<Rollout> {
    let deltas: Vec<Tensor> = policy.actions.iter().map(|a| a.delta.clone()).collect();
    model.rollout(&deltas, policy.horizon.dt())
}

/// Risk of a predicted trajectory against a preference. Step `i`
/// contributes (y_i - g_i)' Pi (y_i - g_i) / 2, and every contribution is
/// divided by the trajectory length so adaptive horizons compare on mean
/// deviation. The total is the exact sum of the breakdown entries.
pub fn efe_score(trajectory: &[Tensor], pref: &Preference) -> Result<EfeScore> {
    if trajectory.is_empty() {
        return Err(GpcError::EmptySequence);
    }
    let horizon = trajectory.len() as f64;
    let mut breakdown = Vec::with_capacity(trajectory.len());
    for (i, y) in trajectory.iter().enumerate() {
        let dev = y.sub(pref.goal_at(i))?;
        let weighted = dev.quadratic_form(pref.goal_precision.pi())?;
        breakdown.push(0.5 * weighted / horizon);
    }
    let value = breakdown.iter().sum();
    Ok(EfeScore { value, breakdown })
}

/// Exhaustive argmin of [`efe_score`] over the candidates. Every policy is
/// rolled out and scored; ties go to the earliest policy in the list.
pub fn select_policy(
    model: &Model,
    policies: &[Policy],
    pref: &Preference,
) -> Result<(Policy, Vec<EfeScore>)> {
    if policies.is_empty() {
        return Err(GpcError::EmptyPolicyList);
    }
    let mut scores = Vec::with_capacity(policies.len());
    let mut best = 0usize;
    for (i, policy) in policies.iter().enumerate() {
        let rollout = rollout_policy(model, policy)?;
        let score = efe_score(&rollout.predictions, pref)?;
        scores.push(score);
        if scores[i].value < scores[best].value {
            best = i;
        }
    }
    Ok((policies[best].clone(), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Activation;
    use crate::network::ModelConfig;
    use nalgebra::{DMatrix, DVector};

    fn act(v: Vec<f64>) -> Action {
        Action::new(Tensor::vector(v)).unwrap()
    }

    fn stride(dt: usize) -> Stride {
        Stride::new(dt).unwrap()
    }

    fn two_level_config() -> ModelConfig {
        ModelConfig {
            levels: 2,
            orders: 1,
            widths: vec![2, 2],
            replicas: 1,
            stride_candidates: vec![vec![1], vec![2]],
            stride_weights: None,
            noise_scale: 0.0,
            rate_mu: 0.1,
            rate_theta: 0.05,
            rate_pi: 0.01,
            settle_iterations: 2,
            epochs: 1,
            seed: 7,
            window: 10,
            activation: Activation::Linear,
        }
    }

    /// Two levels with hand-picked top transition, downward map, and top
    /// state, so rollouts have a closed matrix form.
    fn rigged_model() -> Model {
        let mut model = Model::build(two_level_config()).unwrap();
        model.replica_set_mut(1).replicas_mut()[0].transitions[0].set_weight(Tensor::matrix(
            2,
            2,
            vec![0.5, 0.1, -0.2, 0.3],
        ));
        model
            .down_weights_mut(1)
            .set_weight(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, -1.0]));
        model.replica_set_mut(1).replicas_mut()[0]
            .state
            .order_mut(0)
            .set_mu(Tensor::vector(vec![0.4, -0.6]));
        model
    }

    #[test]
    fn action_requires_a_finite_vector() {
        assert!(Action::new(Tensor::vector(vec![0.1, -0.2])).is_ok());
        assert!(matches!(
            Action::new(Tensor::matrix(1, 2, vec![0.1, -0.2])),
            Err(GpcError::ShapeMismatch { .. })
        ));
        assert!(Action::new(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn policy_horizon_must_cover_the_action_sequence() {
        let a = act(vec![1.0]);
        assert!(matches!(
            Policy::new(vec![], stride(3)),
            Err(GpcError::EmptyActionSet)
        ));
        assert!(matches!(
            Policy::new(vec![a.clone(), a.clone()], stride(1)),
            Err(GpcError::InvalidHorizon)
        ));
        let p = Policy::new(vec![a.clone(), a], stride(2)).unwrap();
        assert_eq!(p.actions().len(), 2);
        assert_eq!(p.horizon().dt(), 2);
    }

    #[test]
    fn preference_rejects_mismatched_or_empty_goals() {
        let prec = Precision::identity(2);
        assert!(Preference::trajectory(vec![], prec.clone()).is_err());
        assert!(matches!(
            Preference::terminal(Tensor::vector(vec![1.0, 2.0, 3.0]), prec.clone()),
            Err(GpcError::ShapeMismatch { .. })
        ));
        assert!(
            Preference::terminal(Tensor::vector(vec![f64::INFINITY, 0.0]), prec.clone()).is_err()
        );

        let pref = Preference::terminal(Tensor::vector(vec![1.0, 2.0]), prec).unwrap();
        assert_eq!(pref.goal_at(0).data(), &[1.0, 2.0]);
        assert_eq!(pref.goal_at(17).data(), &[1.0, 2.0]);
    }

    #[test]
    fn single_action_single_length_gives_one_policy() {
        let policies = enumerate_policies(&[act(vec![1.0])], &[1], &[stride(1)]).unwrap();
        assert_eq!(policies.len(), 1);
        assert_eq!(policies[0].actions().len(), 1);
    }

    #[test]
    fn three_actions_length_three_give_twenty_seven_in_lexicographic_order() {
        let actions: Vec<Action> = (0..3).map(|i| act(vec![i as f64])).collect();
        let policies = enumerate_policies(&actions, &[3], &[stride(3)]).unwrap();
        assert_eq!(policies.len(), 27);

        let digits =
            |p: &Policy| -> Vec<f64> { p.actions().iter().map(|a| a.delta().data()[0]).collect() };
        assert_eq!(digits(&policies[0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(digits(&policies[1]), vec![0.0, 0.0, 1.0]);
        assert_eq!(digits(&policies[3]), vec![0.0, 1.0, 0.0]);
        assert_eq!(digits(&policies[26]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn enumeration_order_is_stable_across_runs() {
        let actions: Vec<Action> = (0..3).map(|i| act(vec![i as f64 - 1.0])).collect();
        let lengths = [1, 2];
        let horizons = [stride(2), stride(4)];
        let a = enumerate_policies(&actions, &lengths, &horizons).unwrap();
        let b = enumerate_policies(&actions, &lengths, &horizons).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_horizons_are_skipped_during_enumeration() {
        let actions = [act(vec![0.0]), act(vec![1.0])];
        let policies = enumerate_policies(&actions, &[1, 2], &[stride(1), stride(2)]).unwrap();
        // Length 1 pairs with both horizons, length 2 only with the longer.
        assert_eq!(policies.len(), 2 * 2 + 4);
        assert_eq!(policies[0].horizon().dt(), 1);
        assert_eq!(policies[1].horizon().dt(), 2);
        assert!(policies[4..].iter().all(|p| p.horizon().dt() == 2));
        assert!(policies[4..].iter().all(|p| p.actions().len() == 2));
    }

    #[test]
    fn oversized_enumerations_are_refused() {
        let actions: Vec<Action> = (0..10).map(|i| act(vec![i as f64])).collect();
        let err = enumerate_policies(&actions, &[7], &[stride(7)]).unwrap_err();
        match err {
            GpcError::EnumerationExplosion { count, limit } => {
                assert_eq!(count, 10_000_000);
                assert_eq!(limit, ENUMERATION_LIMIT);
            }
            other => panic!("expected explosion, got {other}"),
        }

        assert!(matches!(
            enumerate_policies(&[], &[1], &[stride(1)]),
            Err(GpcError::EmptyActionSet)
        ));
        // A single action never explodes, whatever the length.
        let ok = enumerate_policies(&[act(vec![0.0])], &[30], &[stride(30)]).unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn scoring_a_unit_deviation_gives_half_weighted_square() {
        let pref = Preference::terminal(Tensor::vector(vec![0.0]), Precision::identity(1)).unwrap();
        let score = efe_score(&[Tensor::vector(vec![2.0])], &pref).unwrap();
        assert_eq!(score.value, 2.0);
        assert_eq!(score.breakdown, vec![2.0]);
    }

    #[test]
    fn goal_trajectory_equal_to_itself_scores_zero() {
        let goal = vec![
            Tensor::vector(vec![0.3, -0.4]),
            Tensor::vector(vec![-1.2, 0.9]),
        ];
        let pref = Preference::trajectory(goal.clone(), Precision::identity(2)).unwrap();
        let score = efe_score(&goal, &pref).unwrap();
        assert_eq!(score.value, 0.0);
        assert!(score.breakdown.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn doubling_every_deviation_quadruples_the_score() {
        let pref =
            Preference::terminal(Tensor::vector(vec![0.0, 0.0]), Precision::identity(2)).unwrap();
        let base: Vec<Tensor> = vec![
            Tensor::vector(vec![0.7, -0.1]),
            Tensor::vector(vec![-0.3, 0.5]),
            Tensor::vector(vec![0.2, 0.2]),
        ];
        let doubled: Vec<Tensor> = base.iter().map(|t| t.scale(2.0)).collect();
        let s1 = efe_score(&base, &pref).unwrap();
        let s2 = efe_score(&doubled, &pref).unwrap();
        assert!((s2.value - 4.0 * s1.value).abs() < 1e-12);
    }

    #[test]
    fn score_is_the_exact_sum_of_its_breakdown() {
        let pref =
            Preference::terminal(Tensor::vector(vec![0.1, -0.2]), Precision::identity(2)).unwrap();
        let traj: Vec<Tensor> = (0..5)
            .map(|i| Tensor::vector(vec![0.3 * i as f64, -0.11 * i as f64]))
            .collect();
        let score = efe_score(&traj, &pref).unwrap();
        assert_eq!(score.breakdown.len(), 5);
        assert_eq!(score.value, score.breakdown.iter().sum::<f64>());
        assert!(score.breakdown.iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn terminal_goal_broadcasts_over_the_trajectory() {
        let g = Tensor::vector(vec![0.5, -0.5]);
        let traj: Vec<Tensor> = vec![
            Tensor::vector(vec![1.0, 0.0]),
            Tensor::vector(vec![0.0, 1.0]),
            Tensor::vector(vec![0.5, -0.5]),
        ];
        let broadcast = Preference::terminal(g.clone(), Precision::identity(2)).unwrap();
        let spelled =
            Preference::trajectory(vec![g.clone(), g.clone(), g], Precision::identity(2)).unwrap();
        assert_eq!(
            efe_score(&traj, &broadcast).unwrap(),
            efe_score(&traj, &spelled).unwrap()
        );
    }

    #[test]
    fn tiny_deviations_still_score_positive() {
        let pref = Preference::terminal(Tensor::vector(vec![0.0]), Precision::identity(1)).unwrap();
        let score = efe_score(&[Tensor::vector(vec![1e-12])], &pref).unwrap();
        assert!(score.value > 0.0);
    }

    #[test]
    fn zero_actions_reproduce_the_passive_rollout() {
        let model = rigged_model();
        let zero = act(vec![0.0, 0.0]);
        let policy = Policy::new(vec![zero.clone(), zero], stride(4)).unwrap();
        let driven = rollout_policy(&model, &policy).unwrap();
        assert_eq!(driven.predictions, model.predict_rollout(4).unwrap());
    }

    #[test]
    fn held_action_drives_a_zero_transition_chain() {
        let mut model = rigged_model();
        for l in 0..2 {
            model.replica_set_mut(l).replicas_mut()[0].transitions[0]
                .set_weight(Tensor::zeros(Shape::Matrix(2, 2)));
        }
        model.down_weights_mut(1).set_weight(Tensor::identity(2));

        let delta = vec![0.5, -0.25];
        let policy = Policy::new(vec![act(delta.clone())], stride(1)).unwrap();
        let rollout = rollout_policy(&model, &policy).unwrap();
        assert!(rollout.untrained);
        assert_eq!(rollout.predictions.len(), 1);
        assert_eq!(rollout.predictions[0].data(), &delta[..]);
    }

    /// The rigged model is linear, so the whole rollout collapses to matrix
    /// products composed here independently.
    #[test]
    fn rollout_matches_hand_composed_matrix_products() {
        let model = rigged_model();
        let a1 = vec![0.1, 0.0];
        let a2 = vec![0.0, 0.2];
        let policy = Policy::new(vec![act(a1.clone()), act(a2.clone())], stride(3)).unwrap();
        let rollout = rollout_policy(&model, &policy).unwrap();
        assert!(!rollout.untrained);
        assert_eq!(rollout.predictions.len(), 3);

        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -1.0]);
        let acts = [
            DVector::from_column_slice(&a1),
            DVector::from_column_slice(&a2),
        ];
        let mut x = DVector::from_column_slice(&[0.4, -0.6]);
        for (i, pred) in rollout.predictions.iter().enumerate() {
            x = &w * &x + &acts[i.min(1)];
            let want = &h * &x;
            for (got, expect) in pred.data().iter().zip(want.iter()) {
                assert!((got - expect).abs() < 1e-12, "step {i}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn a_single_candidate_is_selected() {
        let model = rigged_model();
        let pref =
            Preference::terminal(Tensor::vector(vec![0.0, 0.0]), Precision::identity(2)).unwrap();
        let policy = Policy::new(vec![act(vec![0.1, 0.1])], stride(2)).unwrap();
        let (chosen, scores) = select_policy(&model, std::slice::from_ref(&policy), &pref).unwrap();
        assert_eq!(chosen, policy);
        assert_eq!(scores.len(), 1);

        assert!(matches!(
            select_policy(&model, &[], &pref),
            Err(GpcError::EmptyPolicyList)
        ));
    }

    #[test]
    fn a_goal_on_the_passive_path_selects_the_null_policy() {
        let model = rigged_model();
        let pref =
            Preference::trajectory(model.predict_rollout(3).unwrap(), Precision::identity(2))
                .unwrap();
        let null = Policy::new(vec![act(vec![0.0, 0.0])], stride(3)).unwrap();
        let push = Policy::new(vec![act(vec![0.8, -0.3])], stride(3)).unwrap();
        let (chosen, scores) = select_policy(&model, &[push, null.clone()], &pref).unwrap();
        assert_eq!(chosen, null);
        assert_eq!(scores[1].value, 0.0);
        assert!(scores[0].value > 0.0);
    }

    #[test]
    fn selection_matches_a_brute_force_argmin() {
        let model = rigged_model();
        let actions = [
            act(vec![-0.2, 0.1]),
            act(vec![0.0, 0.0]),
            act(vec![0.3, -0.4]),
        ];
        let policies = enumerate_policies(&actions, &[1, 2], &[stride(2), stride(3)]).unwrap();
        assert_eq!(policies.len(), 3 * 2 + 9 * 2);
        let pref =
            Preference::terminal(Tensor::vector(vec![0.6, -0.9]), Precision::identity(2)).unwrap();

        let (chosen, scores) = select_policy(&model, &policies, &pref).unwrap();

        let mut best = 0;
        for i in 0..policies.len() {
            let r = rollout_policy(&model, &policies[i]).unwrap();
            let s = efe_score(&r.predictions, &pref).unwrap();
            assert_eq!(s, scores[i]);
            if s.value < scores[best].value {
                best = i;
            }
        }
        assert_eq!(chosen, policies[best]);
    }

    #[test]
    fn exact_ties_go_to_the_earlier_policy() {
        let mut model = rigged_model();
        // Zero states make the rollout odd in the action, so +d and -d land
        // at mirrored observations with identical quadratic scores.
        model.replica_set_mut(1).replicas_mut()[0]
            .state
            .order_mut(0)
            .set_mu(Tensor::zeros(Shape::Vector(2)));
        let pref =
            Preference::terminal(Tensor::vector(vec![0.0, 0.0]), Precision::identity(2)).unwrap();
        let plus = Policy::new(vec![act(vec![0.4, -0.1])], stride(2)).unwrap();
        let minus = Policy::new(vec![act(vec![-0.4, 0.1])], stride(2)).unwrap();
        let (chosen, scores) = select_policy(&model, &[plus.clone(), minus], &pref).unwrap();
        assert_eq!(scores[0].value, scores[1].value);
        assert_eq!(chosen, plus);
    }

    #[test]
    fn rescaling_the_goal_precision_preserves_the_choice() {
        let model = rigged_model();
        let actions = [act(vec![-0.2, 0.1]), act(vec![0.3, -0.4])];
        let policies = enumerate_policies(&actions, &[1, 2], &[stride(3)]).unwrap();
        let goal = Tensor::vector(vec![0.6, -0.9]);

        let unit = Preference::terminal(goal.clone(), Precision::identity(2)).unwrap();
        let scaled_prec = Precision::from_parts(
            Tensor::identity(2).scale(7.0),
            Tensor::identity(2).scale(1.0 / 7.0),
            2.0 * 7.0_f64.ln(),
        )
        .unwrap();
        let scaled = Preference::terminal(goal, scaled_prec).unwrap();

        let (c1, s1) = select_policy(&model, &policies, &unit).unwrap();
        let (c2, s2) = select_policy(&model, &policies, &scaled).unwrap();
        assert_eq!(c1, c2);
        for (a, b) in s1.iter().zip(&s2) {
            assert!((b.value - 7.0 * a.value).abs() <= 1e-12 * b.value.abs().max(1.0));
        }
    }

    #[test]
    fn planning_leaves_the_model_untouched() {
        let model = rigged_model();
        let before = model.checkpoint_string().unwrap();
        let actions = [act(vec![0.5, 0.5]), act(vec![-0.5, 0.5])];
        let policies = enumerate_policies(&actions, &[1, 2], &[stride(2), stride(4)]).unwrap();
        let pref =
            Preference::terminal(Tensor::vector(vec![1.0, 1.0]), Precision::identity(2)).unwrap();
        select_policy(&model, &policies, &pref).unwrap();
        assert_eq!(before, model.checkpoint_string().unwrap());
    }

    #[test]
    fn rollouts_reject_mismatched_action_widths() {
        let model = rigged_model();
        let policy = Policy::new(vec![act(vec![1.0, 2.0, 3.0])], stride(1)).unwrap();
        assert!(matches!(
            rollout_policy(&model, &policy),
            Err(GpcError::ShapeMismatch { .. })
        ));
    }
}
