//! Discounted risk-sensitive game.
//!
//! The infinite-horizon criterion is truncated at a horizon `T` chosen from
//! the requested tail tolerance; past `T` the exponential continuation is 1.
//! Stage `t` is solved at risk level `theta_t = theta * alpha^t`, which is
//! what ties the exponential value at stage `t` to the one at `t + 1`.

use serde::{Deserialize, Serialize};

use crate::bimatrix::{bimatrix_nash, Equilibrium};
use crate::linalg::Matrix;
use crate::model::{GameSpec, MarkovProfile, MixedAction, Player};
use crate::{Error, Result};

/// Relative tolerance for membership in an argmin set.
pub const ARGMIN_TOL: f64 = 1e-9;

/// Smallest horizon whose neglected tail changes the exponential value by a
/// factor of at most `1 + eps` and the certainty equivalent by at most `eps`:
/// `exp(theta alpha^T |r| / (1 - alpha)) - 1 <= eps` and
/// `alpha^T |r| / (1 - alpha) <= eps`.
pub fn horizon_for(theta: f64, alpha: f64, cost_norm: f64, eps: f64) -> usize {
    if cost_norm == 0.0 || alpha == 0.0 {
        return 1;
    }
    let target = (1.0 + eps).ln().min(theta * eps) * (1.0 - alpha) / (theta * cost_norm);
    if target >= 1.0 {
        return 1;
    }
    let t = (target.ln() / alpha.ln()).ceil();
    (t as usize).max(1)
}

/// Risk level used at stage `t`.
pub fn stage_theta(spec: &GameSpec, t: usize) -> f64 {
    spec.theta * spec.alpha.powi(t as i32)
}

/// Exponential values per stage and their log-scale counterparts.
///
/// `phi*[t][k]` for `t = 0..=T` (the last row is the tail value 1);
/// `psi*[t][k] = ln(phi*[t][k]) / theta_t` for `t = 0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpValueTable {
    pub phi1: Vec<Vec<f64>>,
    pub phi2: Vec<Vec<f64>>,
    pub psi1: Vec<Vec<f64>>,
    pub psi2: Vec<Vec<f64>>,
    pub horizon: usize,
    pub tail_bound: f64,
}

impl ExpValueTable {
    pub fn phi(&self, player: Player) -> &Vec<Vec<f64>> {
        match player {
            Player::One => &self.phi1,
            Player::Two => &self.phi2,
        }
    }

    pub fn psi(&self, player: Player) -> &Vec<Vec<f64>> {
        match player {
            Player::One => &self.psi1,
            Player::Two => &self.psi2,
        }
    }

    /// Checks `|psi_i(t, k)| <= |r_i| / (1 - alpha)` and the matching bounds
    /// on `phi` at every stage. Returns the first violation.
    pub fn check_bounds(&self, spec: &GameSpec) -> std::result::Result<(), String> {
        for player in Player::BOTH {
            let bound = spec.cost_norm(player) / (1.0 - spec.alpha);
            for t in 0..self.horizon {
                let theta_t = stage_theta(spec, t);
                let (lo, hi) = ((-theta_t * bound).exp(), (theta_t * bound).exp());
                for (k, (&phi, &psi)) in self.phi(player)[t].iter().zip(&self.psi(player)[t]).enumerate() {
                    if phi < lo * (1.0 - 1e-12) || phi > hi * (1.0 + 1e-12) {
                        return Err(format!("phi{} at ({}, {}) = {} outside [{}, {}]", player.index() + 1, t, k, phi, lo, hi));
                    }
                    if psi.abs() > bound * (1.0 + 1e-12) + 1e-15 {
                        return Err(format!("psi{} at ({}, {}) = {} exceeds {}", player.index() + 1, t, k, psi, bound));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cost matrices of the one-shot game at state `k` and stage risk `theta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGame {
    pub a: Matrix,
    pub b: Matrix,
}

fn check_positive(v: &[f64]) -> Result<()> {
    match v.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
        Some((index, &value)) => Err(Error::NonPositive { index, value }),
        None => Ok(()),
    }
}

fn continuation_term(spec: &GameSpec, player: Player, theta: f64, next: &[f64], k: usize, u: usize, v: usize) -> f64 {
    let expected: f64 = spec.row(k, u, v).iter().zip(next).map(|(q, f)| q * f).sum();
    (theta * spec.cost(player, k, u, v)).exp() * expected
}

/// `A[u][v] = exp(theta_t r1(k,u,v)) sum_j phi1_next(j) q(j|k,u,v)`, and `B`
/// likewise with `r2`, `phi2_next`.
pub fn build_stage_game(
    spec: &GameSpec,
    k: usize,
    theta_t: f64,
    phi1_next: &[f64],
    phi2_next: &[f64],
) -> Result<StageGame> {
    if phi1_next.len() != spec.n_states || phi2_next.len() != spec.n_states || k >= spec.n_states {
        return Err(Error::Dimension("stage game continuation length".into()));
    }
    check_positive(phi1_next)?;
    check_positive(phi2_next)?;
    let (nu, nv) = (spec.n_actions_u, spec.n_actions_v);
    Ok(StageGame {
        a: Matrix::from_fn(nu, nv, |u, v| continuation_term(spec, Player::One, theta_t, phi1_next, k, u, v)),
        b: Matrix::from_fn(nu, nv, |u, v| continuation_term(spec, Player::Two, theta_t, phi2_next, k, u, v)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellmanStep {
    pub value: f64,
    /// Own pure actions within relative `ARGMIN_TOL` of the minimum.
    pub argmin: Vec<usize>,
    /// Value of each own pure action.
    pub action_values: Vec<f64>,
}

/// One application of the exponential Bellman operator at state `k` for
/// `player` against a fixed opponent mixture. Minimizing over pure actions
/// suffices since the objective is linear in the player's own mixture.
pub fn exp_bellman_apply(
    spec: &GameSpec,
    theta: f64,
    continuation: &[f64],
    opponent: &MixedAction,
    k: usize,
    player: Player,
) -> Result<BellmanStep> {
    if continuation.len() != spec.n_states || opponent.len() != spec.n_actions(player.other()) {
        return Err(Error::Dimension("Bellman operator inputs".into()));
    }
    check_positive(continuation)?;
    let own = spec.n_actions(player);
    let action_values: Vec<f64> = (0..own)
        .map(|a| {
            opponent
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(b, &w)| {
                    let (u, v) = match player {
                        Player::One => (a, b),
                        Player::Two => (b, a),
                    };
                    w * continuation_term(spec, player, theta, continuation, k, u, v)
                })
                .sum()
        })
        .collect();
    Ok(argmin_step(action_values))
}

pub(crate) fn argmin_step(action_values: Vec<f64>) -> BellmanStep {
    let value = action_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let argmin = action_values
        .iter()
        .enumerate()
        .filter(|(_, &x)| x <= value * (1.0 + ARGMIN_TOL))
        .map(|(a, _)| a)
        .collect();
    BellmanStep {
        value,
        argmin,
        action_values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountedSolution {
    pub profile: MarkovProfile,
    pub values: ExpValueTable,
}

/// Backward induction with one stage-game equilibrium per `(t, k)`, horizon
/// chosen from the tail tolerance `eps`.
pub fn solve_discounted(spec: &GameSpec, eps: f64) -> Result<DiscountedSolution> {
    if !(eps > 0.0) {
        return Err(Error::InvalidSpec(format!("tail tolerance {} is not > 0", eps)));
    }
    let horizon = horizon_for(spec.theta, spec.alpha, spec.max_cost_norm(), eps);
    solve_discounted_with_horizon(spec, horizon, eps)
}

/// Backward induction over an explicit horizon.
pub fn solve_discounted_with_horizon(spec: &GameSpec, horizon: usize, tail_bound: f64) -> Result<DiscountedSolution> {
    spec.validate().into_result()?;
    if horizon == 0 {
        return Err(Error::InvalidSpec("horizon must be positive".into()));
    }
    let n = spec.n_states;
    let mut phi1 = vec![vec![1.0; n]; horizon + 1];
    let mut phi2 = vec![vec![1.0; n]; horizon + 1];
    let mut stages = vec![spec.uniform_profile(); horizon];
    for t in (0..horizon).rev() {
        let theta_t = stage_theta(spec, t);
        let mut stage = spec.uniform_profile();
        for k in 0..n {
            let game = build_stage_game(spec, k, theta_t, &phi1[t + 1], &phi2[t + 1])?;
            let sol = bimatrix_nash(&game.a, &game.b)?;
            let Equilibrium {
                row,
                col,
                cost_row,
                cost_col,
            } = sol.selected().clone();
            phi1[t][k] = cost_row;
            phi2[t][k] = cost_col;
            stage.mu[k] = row;
            stage.nu[k] = col;
        }
        stages[t] = stage;
    }
    let psi = |phi: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..horizon)
            .map(|t| {
                let theta_t = stage_theta(spec, t);
                phi[t]
                    .iter()
                    .map(|&f| if theta_t > 0.0 { f.ln() / theta_t } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let values = ExpValueTable {
        psi1: psi(&phi1),
        psi2: psi(&phi2),
        phi1,
        phi2,
        horizon,
        tail_bound,
    };
    Ok(DiscountedSolution {
        profile: MarkovProfile { stages },
        values,
    })
}

/// Exponential cost `zeta_i(t, k)` of a Markov profile for every stage
/// `t = 0..=T` (the last row is the tail value 1).
pub fn evaluate_exp_cost_table(spec: &GameSpec, profile: &MarkovProfile, player: Player) -> Result<Vec<Vec<f64>>> {
    profile.check(spec)?;
    let (n, horizon) = (spec.n_states, profile.horizon());
    let mut zeta = vec![vec![1.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        let theta_t = stage_theta(spec, t);
        let stage = &profile.stages[t];
        for k in 0..n {
            zeta[t][k] = stage
                .joint(k)
                .map(|(u, v, w)| w * continuation_term(spec, player, theta_t, &zeta[t + 1], k, u, v))
                .sum();
        }
    }
    Ok(zeta)
}

/// `zeta_i(theta, (k, 0))` for every start state.
pub fn evaluate_exp_cost(spec: &GameSpec, profile: &MarkovProfile, player: Player) -> Result<Vec<f64>> {
    Ok(evaluate_exp_cost_table(spec, profile, player)?.swap_remove(0))
}

/// Risk-neutral truncated discounted cost `E sum_{t<T} alpha^t r_i` under a
/// Markov profile.
pub fn evaluate_linear_cost(spec: &GameSpec, profile: &MarkovProfile, player: Player) -> Result<Vec<f64>> {
    profile.check(spec)?;
    let n = spec.n_states;
    let mut value = vec![0.0; n];
    for stage in profile.stages.iter().rev() {
        let next = value.clone();
        for (k, slot) in value.iter_mut().enumerate() {
            *slot = stage
                .joint(k)
                .map(|(u, v, w)| {
                    let cont: f64 = spec.row(k, u, v).iter().zip(&next).map(|(q, x)| q * x).sum();
                    w * (spec.cost(player, k, u, v) + spec.alpha * cont)
                })
                .sum();
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    /// Optimal exponential value per stage, `T + 1` rows.
    pub values: Vec<Vec<f64>>,
    /// One minimizing pure action per stage and state.
    pub actions: Vec<Vec<usize>>,
}

/// Optimal exponential cost for `player` when the opponent follows its
/// component of `profile` over the profile's horizon.
pub fn best_response_value_discounted(spec: &GameSpec, profile: &MarkovProfile, player: Player) -> Result<BestResponse> {
    profile.check(spec)?;
    let (n, horizon) = (spec.n_states, profile.horizon());
    let mut values = vec![vec![1.0; n]; horizon + 1];
    let mut actions = vec![vec![0; n]; horizon];
    for t in (0..horizon).rev() {
        let theta_t = stage_theta(spec, t);
        let opponent = profile.stages[t].strategy(player.other());
        for k in 0..n {
            let step = exp_bellman_apply(spec, theta_t, &values[t + 1], &opponent[k], k, player)?;
            values[t][k] = step.value;
            actions[t][k] = step.argmin[0];
        }
    }
    Ok(BestResponse { values, actions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerGaps {
    /// `zeta_i^{profile}(k) - zeta_i^*(k)`, exponential scale.
    pub exp_gap: Vec<f64>,
    /// Same gap on the `(1/theta) ln` scale.
    pub psi_gap: Vec<f64>,
    /// Allowed gap per state: `tol + 2 * tail_bound * zeta_i^*(k)`.
    pub allowed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountedVerification {
    pub player1: PlayerGaps,
    pub player2: PlayerGaps,
    pub max_gap: f64,
    pub passed: bool,
}

/// Compares each player's value under the profile with their exact best
/// response against the opponent's announced strategy.
pub fn verify_nash_discounted(
    spec: &GameSpec,
    profile: &MarkovProfile,
    tol: f64,
    tail_bound: f64,
) -> Result<DiscountedVerification> {
    let mut gaps = Vec::with_capacity(2);
    let mut passed = true;
    let mut max_gap = 0.0f64;
    for player in Player::BOTH {
        let own = evaluate_exp_cost(spec, profile, player)?;
        let best = best_response_value_discounted(spec, profile, player)?;
        let best0 = &best.values[0];
        let exp_gap: Vec<f64> = own.iter().zip(best0).map(|(a, b)| a - b).collect();
        let psi_gap = own
            .iter()
            .zip(best0)
            .map(|(a, b)| (a.ln() - b.ln()) / spec.theta)
            .collect();
        let allowed: Vec<f64> = best0.iter().map(|b| tol + 2.0 * tail_bound * b).collect();
        for (g, a) in exp_gap.iter().zip(&allowed) {
            max_gap = max_gap.max(*g);
            passed &= *g <= *a;
        }
        gaps.push(PlayerGaps {
            exp_gap,
            psi_gap,
            allowed,
        });
    }
    let player2 = gaps.pop().expect("two players");
    let player1 = gaps.pop().expect("two players");
    Ok(DiscountedVerification {
        player1,
        player2,
        max_gap,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn horizon_formula() {
        assert_eq!(horizon_for(0.5, 0.9, 0.0, 1e-8), 1);
        assert_eq!(horizon_for(0.5, 0.0, 1.0, 1e-8), 1);
        let (theta, alpha, norm, eps) = (0.5, 0.8, 0.3, 1e-6);
        let t = horizon_for(theta, alpha, norm, eps);
        let ce = |t: usize| alpha.powi(t as i32) * norm / (1.0 - alpha);
        let tail = |t: usize| (theta * ce(t)).exp() - 1.0;
        assert!(tail(t) <= eps && ce(t) <= eps);
        assert!(tail(t - 1) > eps || ce(t - 1) > eps);
    }

    #[test]
    fn flat_bellman_step() {
        let mut spec = fixtures::random_game(2, 3, 2, 1, 0.0, 0.1);
        spec.r1 = vec![vec![vec![0.0; 2]; 3]; 2];
        let step = exp_bellman_apply(&spec, 0.4, &[1.0, 1.0], &MixedAction::uniform(2), 1, Player::One).unwrap();
        assert!((step.value - 1.0).abs() < 1e-15);
        assert_eq!(step.argmin, vec![0, 1, 2]);
    }

    #[test]
    fn single_action_bellman_step() {
        let spec = fixtures::random_game(2, 1, 2, 3, 0.4, 0.1);
        let opp = MixedAction::new(vec![0.3, 0.7]).unwrap();
        let cont = [1.2, 0.8];
        let step = exp_bellman_apply(&spec, 0.6, &cont, &opp, 0, Player::One).unwrap();
        let mut expect = 0.0;
        for v in 0..2 {
            let e: f64 = (0..2).map(|j| spec.q[0][0][v][j] * cont[j]).sum();
            expect += opp.weights[v] * (0.6 * spec.r1[0][0][v]).exp() * e;
        }
        assert!((step.value - expect).abs() < 1e-14);
        assert_eq!(step.argmin, vec![0]);
    }

    #[test]
    fn bellman_step_matches_enumeration() {
        let spec = fixtures::random_game(2, 2, 2, 17, 0.5, 0.1);
        let opp = MixedAction::new(vec![0.45, 0.55]).unwrap();
        let cont = [0.9, 1.3];
        for player in Player::BOTH {
            let step = exp_bellman_apply(&spec, 0.7, &cont, &opp, 1, player).unwrap();
            let mut vals = Vec::new();
            for a in 0..2 {
                let mut total = 0.0;
                for b in 0..2 {
                    let (u, v) = if player == Player::One { (a, b) } else { (b, a) };
                    let e: f64 = (0..2).map(|j| spec.q[1][u][v][j] * cont[j]).sum();
                    total += opp.weights[b] * (0.7 * spec.cost(player, 1, u, v)).exp() * e;
                }
                vals.push(total);
            }
            let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((step.value - best).abs() < 1e-14);
            assert_eq!(vals[step.argmin[0]], best);
        }
        assert!(matches!(
            exp_bellman_apply(&spec, 0.7, &[1.0, 0.0], &opp, 1, Player::One),
            Err(Error::NonPositive { index: 1, .. })
        ));
    }

    #[test]
    fn bellman_monotone_in_continuation() {
        let spec = fixtures::random_game(3, 2, 3, 23, 0.5, 0.05);
        let opp = MixedAction::uniform(3);
        let f = [0.7, 1.1, 0.9];
        let g = [0.8, 1.1, 1.4];
        for k in 0..3 {
            let a = exp_bellman_apply(&spec, 0.5, &f, &opp, k, Player::One).unwrap();
            let b = exp_bellman_apply(&spec, 0.5, &g, &opp, k, Player::One).unwrap();
            assert!(a.value <= b.value);
        }
    }

    #[test]
    fn stage_game_cases() {
        let mut spec = fixtures::random_game(2, 2, 2, 31, 0.5, 0.1);
        spec.r2 = spec.r1.clone();
        let g = build_stage_game(&spec, 0, 0.8, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g.a, g.b);
        let next = [1.3, 0.6];
        let g = build_stage_game(&spec, 1, 0.0, &next, &next).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                let e: f64 = (0..2).map(|j| spec.q[1][u][v][j] * next[j]).sum();
                assert!((g.a[(u, v)] - e).abs() < 1e-15);
            }
        }
        let g = build_stage_game(&spec, 1, 0.8, &next, &[1.0, 1.0]).unwrap();
        let e01: f64 = spec.q[1][0][1][0] * next[0] + spec.q[1][0][1][1] * next[1];
        assert!((g.a[(0, 1)] - (0.8 * spec.r1[1][0][1]).exp() * e01).abs() < 1e-14);
    }

    #[test]
    fn constant_cost_value() {
        let mut spec = fixtures::random_game(3, 2, 2, 41, 0.0, 0.1);
        let c = 0.3;
        spec.r1 = vec![vec![vec![c; 2]; 2]; 3];
        spec.r2 = spec.r1.clone();
        let eps = 1e-9;
        let sol = solve_discounted(&spec, eps).unwrap();
        let horizon = sol.values.horizon;
        let exact = c * (1.0 - spec.alpha.powi(horizon as i32)) / (1.0 - spec.alpha);
        for k in 0..3 {
            assert!((sol.values.psi1[0][k] - exact).abs() < 1e-12);
            // Truncation error is within the tail tolerance on the log scale.
            assert!((sol.values.psi1[0][k] - c / (1.0 - spec.alpha)).abs() <= (1.0 + eps).ln() / spec.theta);
        }
        let zeta = evaluate_exp_cost(&spec, &sol.profile, Player::Two).unwrap();
        let expect = (spec.theta * exact).exp();
        for z in zeta {
            assert!((z - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn zero_cost_is_neutral() {
        let mut spec = fixtures::random_game(3, 2, 2, 43, 0.0, 0.1);
        spec.r1 = vec![vec![vec![0.0; 2]; 2]; 3];
        spec.r2 = spec.r1.clone();
        let sol = solve_discounted(&spec, 1e-8).unwrap();
        for row in sol.values.phi1.iter().chain(&sol.values.phi2) {
            assert!(row.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn best_response_with_single_action_is_evaluation() {
        let spec = fixtures::random_game(3, 1, 2, 47, 0.4, 0.1);
        let sol = solve_discounted_with_horizon(&spec, 5, 0.0).unwrap();
        let br = best_response_value_discounted(&spec, &sol.profile, Player::One).unwrap();
        let own = evaluate_exp_cost(&spec, &sol.profile, Player::One).unwrap();
        for k in 0..3 {
            assert!((br.values[0][k] - own[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn perturbed_profile_fails_verification() {
        let spec = fixtures::random_game(2, 2, 2, 53, 0.5, 0.1);
        let sol = solve_discounted(&spec, 1e-8).unwrap();
        let report = verify_nash_discounted(&spec, &sol.profile, 1e-8, 1e-8).unwrap();
        assert!(report.passed);
        // Swap player I's action at stage 0 where that is strictly worse.
        let mut tampered = sol.profile.clone();
        let step = |k: usize, cont: &[f64], prof: &MarkovProfile| {
            exp_bellman_apply(&spec, spec.theta, cont, &prof.stages[0].nu[k], k, Player::One).unwrap()
        };
        let zeta1 = evaluate_exp_cost_table(&spec, &sol.profile, Player::One).unwrap();
        let k = (0..2)
            .find(|&k| step(k, &zeta1[1], &sol.profile).argmin.len() == 1)
            .expect("some state has a strict best action");
        let best = step(k, &zeta1[1], &sol.profile).argmin[0];
        tampered.stages[0].mu[k] = MixedAction::pure(2, 1 - best);
        let report = verify_nash_discounted(&spec, &tampered, 1e-8, 1e-8).unwrap();
        assert!(!report.passed);
        assert!(report.player1.exp_gap[k] > 0.0);
    }

    #[test]
    fn single_action_game_has_zero_gaps() {
        let spec = fixtures::random_game(3, 1, 1, 59, 0.5, 0.1);
        let sol = solve_discounted(&spec, 1e-8).unwrap();
        let report = verify_nash_discounted(&spec, &sol.profile, 0.0, 0.0).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_gap, 0.0);
    }

    #[test]
    fn value_bounds_hold() {
        for seed in 0..5 {
            let spec = fixtures::random_game(3, 2, 3, seed, 1.0, 0.0);
            let sol = solve_discounted(&spec, 1e-6).unwrap();
            sol.values.check_bounds(&spec).unwrap();
        }
    }
}
