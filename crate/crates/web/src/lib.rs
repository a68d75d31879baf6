//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string; errors come back as `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use riskgame::discounted::{solve_discounted, verify_nash_discounted};
use riskgame::ergodic::{nash_search_ergodic, ErgodicConfig, SearchOutcome};
use riskgame::fixtures;
use riskgame::markov::{dobrushin_of_matrix, invariant_measure, uniform_ergodicity_check};
use riskgame::model::induced_kernel;
use riskgame::GameSpec;

fn respond<T: Serialize>(result: riskgame::Result<T>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn game(n_states: usize, n_actions: usize, seed: u64, theta: f64) -> GameSpec {
    let mut spec = fixtures::random_game(n_states.clamp(1, 8), n_actions.clamp(1, 4), n_actions.clamp(1, 4), seed, 1.0, 0.05);
    spec.theta = theta;
    spec.theta_max = spec.theta_max.max(theta);
    spec
}

#[derive(Serialize)]
struct DiscountedView {
    horizon: usize,
    psi1: Vec<f64>,
    psi2: Vec<f64>,
    mu: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
    max_gap: f64,
    passed: bool,
}

/// Discounted equilibrium of a seeded random game: stage-0 values and actions.
#[wasm_bindgen]
pub fn solve_random_discounted(n_states: usize, n_actions: usize, seed: u64, theta: f64, alpha: f64, eps: f64) -> String {
    let mut spec = game(n_states, n_actions, seed, theta);
    spec.alpha = alpha;
    respond((|| {
        spec.validate().into_result()?;
        let sol = solve_discounted(&spec, eps)?;
        let check = verify_nash_discounted(&spec, &sol.profile, 1e-8, eps)?;
        let first = &sol.profile.stages[0];
        Ok(DiscountedView {
            horizon: sol.values.horizon,
            psi1: sol.values.psi1[0].clone(),
            psi2: sol.values.psi2[0].clone(),
            mu: first.mu.iter().map(|m| m.weights.clone()).collect(),
            nu: first.nu.iter().map(|m| m.weights.clone()).collect(),
            max_gap: check.max_gap,
            passed: check.passed,
        })
    })())
}

#[derive(Serialize)]
struct ErgodicPoint {
    theta: f64,
    status: &'static str,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    h1: Option<Vec<f64>>,
    method: Option<String>,
}

/// Ergodic equilibrium costs of one seeded game across `steps` risk levels
/// in `(0, theta_max]`.
#[wasm_bindgen]
pub fn ergodic_theta_sweep(n_states: usize, n_actions: usize, seed: u64, theta_max: f64, steps: usize) -> String {
    let base = game(n_states, n_actions, seed, theta_max);
    let Some(mut base) = fixtures::within_cost_bound(&base, 0.5) else {
        return error_json("assumptions fail for this seed");
    };
    base.theta_max = theta_max;
    let steps = steps.clamp(1, 40);
    respond((1..=steps).map(|i| {
        let mut spec = base.clone();
        spec.theta = theta_max * i as f64 / steps as f64;
        let point = match nash_search_ergodic(&spec, &ErgodicConfig::default())? {
            SearchOutcome::Converged(sol) => ErgodicPoint {
                theta: spec.theta,
                status: "solved",
                lambda1: Some(sol.lambda1),
                lambda2: Some(sol.lambda2),
                h1: Some(sol.h1),
                method: serde_json::to_value(sol.method).ok().and_then(|v| v.as_str().map(String::from)),
            },
            SearchOutcome::Failed(_) => ErgodicPoint {
                theta: spec.theta,
                status: "failed",
                lambda1: None,
                lambda2: None,
                h1: None,
                method: None,
            },
        };
        Ok(point)
    }).collect::<riskgame::Result<Vec<_>>>())
}

#[derive(Serialize)]
struct Decay {
    delta: f64,
    invariant: Vec<f64>,
    distance: Vec<f64>,
    bound: Vec<f64>,
    passed: bool,
}

/// Distance of `P^t` from the invariant law against `2 delta^t` for a seeded
/// profile of a seeded game.
#[wasm_bindgen]
pub fn ergodicity_decay(n_states: usize, n_actions: usize, seed: u64, min_prob: f64, t_max: usize) -> String {
    let spec = fixtures::random_game(n_states.clamp(1, 8), n_actions.clamp(1, 4), n_actions.clamp(1, 4), seed, 1.0, min_prob.max(0.0));
    respond((|| {
        let profile = fixtures::random_profile(&spec, seed.wrapping_add(1));
        let p = induced_kernel(&spec, &profile)?;
        let eta = invariant_measure(&p)?;
        let delta = dobrushin_of_matrix(&p);
        let check = uniform_ergodicity_check(&p, &eta, delta, t_max.clamp(1, 200));
        Ok(Decay {
            delta,
            invariant: eta,
            distance: check.margins.iter().map(|m| m.distance).collect(),
            bound: check.margins.iter().map(|m| m.bound).collect(),
            passed: check.passed,
        })
    })())
}
