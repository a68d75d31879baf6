//! Ergodic risk-sensitive game.
//!
//! For a stationary profile the long-run exponential cost `Lambda` is the
//! root of `g(ref) = 1`, where `g` is the expected exponential cost of one
//! excursion away from the reference state. The same number is the log of
//! the Perron root of the cost-weighted kernel, which gives an independent
//! cross-check.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::bimatrix::{bimatrix_nash, Equilibrium};
use crate::discounted::{build_stage_game, exp_bellman_apply};
use crate::linalg::{perron, solve, spectral_radius, Matrix, Vector};
use crate::model::{weighted_kernel, GameSpec, MixedAction, Player, StationaryProfile};
use crate::{par, Error, Result};

/// Default absolute tolerance on `Lambda` for the bisection.
pub const GPE_TOL: f64 = 1e-10;

/// Default log-span tolerance of the multiplicative value iteration.
pub const VI_TOL: f64 = 1e-12;

pub const MAX_SWEEPS: usize = 100_000;

/// Row sums of a twisted kernel may deviate from 1 by at most this much.
pub const TWIST_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpeResult {
    pub lambda: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
}

fn others(n: usize, r: usize) -> Vec<usize> {
    (0..n).filter(|&j| j != r).collect()
}

fn taboo_block(w: &Matrix, rest: &[usize]) -> Matrix {
    Matrix::from_fn(rest.len(), rest.len(), |a, b| w[(rest[a], rest[b])])
}

/// Solves the taboo system for `g` given the shifted weighted kernel `w`.
/// `rho` is the spectral radius of the taboo block when already known.
fn first_passage_from_kernel(w: &Matrix, r: usize, rho: Option<f64>) -> Result<Vec<f64>> {
    let n = w.nrows();
    let rest = others(n, r);
    let block = taboo_block(w, &rest);
    let rho = rho.unwrap_or_else(|| spectral_radius(&block));
    if !(rho < 1.0) {
        return Err(Error::Divergent { spectral_radius: rho });
    }
    let m = rest.len();
    let a = Matrix::identity(m, m) - &block;
    let b = Vector::from_fn(m, |i, _| w[(rest[i], r)]);
    let x = solve(&a, &b)?;
    let mut g = vec![0.0; n];
    for (i, &k) in rest.iter().enumerate() {
        g[k] = x[i];
    }
    g[r] = w[(r, r)] + rest.iter().enumerate().map(|(i, &j)| w[(r, j)] * x[i]).sum::<f64>();
    Ok(g)
}

/// `E_k[exp(theta sum_{t < sigma} (r_i - lambda))]` with `sigma` the first
/// return time to the reference state, for every start `k`.
pub fn first_passage_exp(spec: &GameSpec, profile: &StationaryProfile, player: Player, lambda: f64) -> Result<Vec<f64>> {
    profile.check(spec)?;
    let w = weighted_kernel(spec, profile, player, spec.theta, lambda);
    first_passage_from_kernel(&w, spec.ref_state, None)
}

/// Bisection for the root of `g(ref) = 1` on `[-|r_i|, |r_i|]`. A divergent
/// taboo series counts as `g(ref) = +inf`.
pub fn gpe_bisection(spec: &GameSpec, profile: &StationaryProfile, player: Player, tol: f64) -> Result<GpeResult> {
    profile.check(spec)?;
    let (theta, r) = (spec.theta, spec.ref_state);
    let base = weighted_kernel(spec, profile, player, theta, 0.0);
    let rho0 = spectral_radius(&taboo_block(&base, &others(spec.n_states, r)));
    // Shifting by lambda scales the whole kernel by exp(-theta lambda).
    let eval = |lambda: f64| -> Option<Vec<f64>> {
        let scale = (-theta * lambda).exp();
        let rho = rho0 * scale;
        if !(rho < 1.0) {
            return None;
        }
        first_passage_from_kernel(&(&base * scale), r, Some(rho)).ok()
    };
    let excess = |g: &Option<Vec<f64>>| g.as_ref().map_or(f64::INFINITY, |g| g[r] - 1.0);

    let norm = spec.cost_norm(player);
    let (mut lo, mut hi) = (-norm, norm);
    let g_hi = eval(hi);
    if excess(&g_hi) > 1e-12 || excess(&eval(lo)) < -1e-12 {
        return Err(Error::NoBracket { lo, hi });
    }
    let mut iterations = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if excess(&eval(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let lambda = 0.5 * (lo + hi);
    let g = match eval(lambda).or_else(|| eval(hi)) {
        Some(g) => g,
        None => return Err(Error::Divergent { spectral_radius: rho0 * (-theta * lambda).exp() }),
    };
    Ok(GpeResult { lambda, g, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralLambda {
    pub lambda: f64,
    /// Perron root of the cost-weighted kernel.
    pub root: f64,
    /// Positive right eigenvector, 1 at the reference state.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// `(1/theta) ln rho(M)` with `M[k][j] = sum mu nu exp(theta r_i) q(j|k,u,v)`.
pub fn spectral_lambda(spec: &GameSpec, profile: &StationaryProfile, player: Player) -> Result<SpectralLambda> {
    profile.check(spec)?;
    let m = weighted_kernel(spec, profile, player, spec.theta, 0.0);
    let p = perron(&m, spec.ref_state, 1e-12, 100_000)?;
    Ok(SpectralLambda {
        lambda: p.root.ln() / spec.theta,
        root: p.root,
        vector: p.vector.iter().cloned().collect(),
        iterations: p.iterations,
    })
}

fn ref_step_value(spec: &GameSpec, profile: &StationaryProfile, player: Player, lambda: f64) -> f64 {
    let r = spec.ref_state;
    profile
        .joint(r)
        .map(|(u, v, w)| w * (spec.theta * (spec.cost(player, r, u, v) - lambda)).exp())
        .sum()
}

/// `h(k) = E_k[exp(theta sum_{t <= tau} (r_i - lambda))]` with `tau` the
/// hitting time of the reference state, counted from `t = 0`. At the
/// reference state this is the one-step value.
pub fn relative_value_h(spec: &GameSpec, profile: &StationaryProfile, player: Player, lambda: f64) -> Result<Vec<f64>> {
    let g = first_passage_exp(spec, profile, player, lambda)?;
    let c0 = ref_step_value(spec, profile, player, lambda);
    let mut h: Vec<f64> = g.iter().map(|x| c0 * x).collect();
    h[spec.ref_state] = c0;
    Ok(h)
}

/// Largest relative defect in `e^{theta lambda} h = M h`.
pub fn mpe_residual(spec: &GameSpec, profile: &StationaryProfile, player: Player, h: &[f64], lambda: f64) -> f64 {
    if h.len() != spec.n_states || profile.check(spec).is_err() {
        return f64::INFINITY;
    }
    let m = weighted_kernel(spec, profile, player, spec.theta, 0.0);
    let hv = Vector::from_column_slice(h);
    let mh = &m * &hv;
    let e = (spec.theta * lambda).exp();
    (0..spec.n_states)
        .map(|k| (mh[k] - e * h[k]).abs() / (e * h[k]))
        .fold(0.0, f64::max)
}

/// `q~(j|k) = sum mu nu exp(theta (r_i - lambda)) f(j) q(j|k,u,v) / f(k)`.
pub fn twisted_kernel(
    spec: &GameSpec,
    profile: &StationaryProfile,
    player: Player,
    f: &[f64],
    lambda: f64,
) -> Result<Matrix> {
    profile.check(spec)?;
    if f.len() != spec.n_states {
        return Err(Error::Dimension("twist function length".into()));
    }
    if let Some((index, &value)) = f.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
        return Err(Error::NonPositive { index, value });
    }
    let w = weighted_kernel(spec, profile, player, spec.theta, lambda);
    let n = spec.n_states;
    let t = Matrix::from_fn(n, n, |k, j| w[(k, j)] * f[j] / f[k]);
    for row in 0..n {
        let sum = t.row(row).sum();
        if (sum - 1.0).abs() > TWIST_TOL {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    Ok(t)
}

/// Optimal response of one player to a fixed stationary opponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueIterationResult {
    pub lambda: f64,
    /// Relative value with the reference normalization.
    pub h: Vec<f64>,
    /// Minimizing own actions per state.
    pub argmin: Vec<Vec<usize>>,
    pub sweeps: usize,
    pub span: f64,
}

impl ValueIterationResult {
    /// Lowest-index member of each argmin set, as pure mixed actions.
    pub fn select(&self, n_actions: usize) -> Vec<MixedAction> {
        self.argmin.iter().map(|a| MixedAction::pure(n_actions, a[0])).collect()
    }

    /// Whether every state's mixture is supported on its argmin set.
    pub fn contains(&self, strategy: &[MixedAction]) -> bool {
        strategy
            .iter()
            .zip(&self.argmin)
            .all(|(m, set)| m.support().iter().all(|a| set.contains(a)))
    }
}

fn check_opponent(spec: &GameSpec, opponent: &[MixedAction], player: Player) -> Result<()> {
    if opponent.len() != spec.n_states {
        return Err(Error::Dimension(format!(
            "opponent strategy covers {} states, game has {}",
            opponent.len(),
            spec.n_states
        )));
    }
    let na = spec.n_actions(player.other());
    for m in opponent {
        if m.len() != na {
            return Err(Error::Dimension(format!("opponent mixture of length {}, expected {}", m.len(), na)));
        }
        m.check()?;
    }
    Ok(())
}

/// Profile in which `player` uses `own` and the other player `opponent`.
pub fn assemble(player: Player, own: Vec<MixedAction>, opponent: &[MixedAction]) -> StationaryProfile {
    match player {
        Player::One => StationaryProfile { mu: own, nu: opponent.to_vec() },
        Player::Two => StationaryProfile { mu: opponent.to_vec(), nu: own },
    }
}

/// Relative value iteration for `Tf(k) = min_a sum_b opp(b) exp(theta r_i) sum_j f(j) q`,
/// renormalized at the reference state each sweep. Stops once the log-span
/// of `Tf / f` is at most `tol`; the min and max ratios bracket
/// `exp(theta lambda*)`.
pub fn rs_value_iteration(
    spec: &GameSpec,
    opponent: &[MixedAction],
    player: Player,
    tol: f64,
) -> Result<ValueIterationResult> {
    check_opponent(spec, opponent, player)?;
    let (n, theta, r) = (spec.n_states, spec.theta, spec.ref_state);
    let mut f = vec![1.0; n];
    let mut span = f64::INFINITY;
    let mut mid = 0.0;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let tf = (0..n)
            .map(|k| exp_bellman_apply(spec, theta, &f, &opponent[k], k, player).map(|s| s.value))
            .collect::<Result<Vec<f64>>>()?;
        let (lo, hi) = tf
            .iter()
            .zip(&f)
            .map(|(t, x)| (t / x).ln())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        span = hi - lo;
        mid = 0.5 * (lo + hi);
        let scale = tf[r];
        f = tf.iter().map(|x| x / scale).collect();
        if span <= tol {
            break;
        }
    }
    if !(span <= tol) {
        return Err(Error::NoConvergence {
            what: "multiplicative value iteration",
            iterations: sweeps,
            residual: span,
        });
    }
    let lambda = mid / theta;
    let argmin = (0..n)
        .map(|k| exp_bellman_apply(spec, theta, &f, &opponent[k], k, player).map(|s| s.argmin))
        .collect::<Result<Vec<_>>>()?;
    let own = argmin.iter().map(|a| MixedAction::pure(spec.n_actions(player), a[0])).collect();
    let c0 = ref_step_value(spec, &assemble(player, own, opponent), player, lambda);
    Ok(ValueIterationResult {
        lambda,
        h: f.iter().map(|x| x * c0).collect(),
        argmin,
        sweeps,
        span,
    })
}

/// Best-response set of `player` against `opponent`: all mixtures supported
/// on the per-state argmin sets.
pub fn best_response_ergodic(spec: &GameSpec, opponent: &[MixedAction], player: Player) -> Result<ValueIterationResult> {
    rs_value_iteration(spec, opponent, player, VI_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicPlayerGap {
    /// Long-run cost of the profile.
    pub lambda_profile: f64,
    /// Best achievable long-run cost against the opponent's component.
    pub lambda_best: f64,
    pub gap: f64,
    /// Per-state excess of the profile's mixture over the best action, on the
    /// per-stage cost scale.
    pub state_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicVerification {
    pub player1: ErgodicPlayerGap,
    pub player2: ErgodicPlayerGap,
    pub max_gap: f64,
    pub passed: bool,
}

fn player_gap(spec: &GameSpec, profile: &StationaryProfile, player: Player) -> Result<(ErgodicPlayerGap, ValueIterationResult)> {
    let own = gpe_bisection(spec, profile, player, GPE_TOL)?;
    let best = best_response_ergodic(spec, profile.strategy(player.other()), player)?;
    let state_gaps = (0..spec.n_states)
        .map(|k| {
            let step = exp_bellman_apply(spec, spec.theta, &best.h, &profile.strategy(player.other())[k], k, player)?;
            let mixed: f64 = profile.strategy(player)[k]
                .weights
                .iter()
                .zip(&step.action_values)
                .map(|(w, x)| w * x)
                .sum();
            Ok((mixed / step.value).ln() / spec.theta)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((
        ErgodicPlayerGap {
            lambda_profile: own.lambda,
            lambda_best: best.lambda,
            gap: own.lambda - best.lambda,
            state_gaps,
        },
        best,
    ))
}

fn verify_inner(
    spec: &GameSpec,
    profile: &StationaryProfile,
    tol: f64,
) -> Result<(ErgodicVerification, ValueIterationResult, ValueIterationResult)> {
    profile.check(spec)?;
    let (a, b) = par::join(
        || player_gap(spec, profile, Player::One),
        || player_gap(spec, profile, Player::Two),
    );
    let ((player1, br1), (player2, br2)) = (a?, b?);
    let max_gap = player1.gap.max(player2.gap);
    Ok((
        ErgodicVerification {
            passed: player1.gap <= tol && player2.gap <= tol,
            player1,
            player2,
            max_gap,
        },
        br1,
        br2,
    ))
}

/// Deviation gaps `lambda_i(profile) - lambda_i*` for both players. Pure
/// deviations suffice since the Bellman minimand is linear in the deviating
/// player's mixture.
pub fn verify_nash_ergodic(spec: &GameSpec, profile: &StationaryProfile, tol: f64) -> Result<ErgodicVerification> {
    verify_inner(spec, profile, tol).map(|(v, _, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErgodicConfig {
    /// Verification tolerance on the deviation gaps.
    pub tol: f64,
    /// Weight on the new best response in each mixture update.
    pub damping: f64,
    pub max_rounds: usize,
    pub cycle_resolution: f64,
    pub fallback: bool,
    /// Largest pure-strategy space of player I searched by enumeration.
    pub fallback_cap: usize,
    pub stage_iterations: usize,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            damping: 0.5,
            max_rounds: 100,
            cycle_resolution: 1e-9,
            fallback: true,
            fallback_cap: 10_000,
            stage_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    BestResponse,
    PureEnumeration,
    StageIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicSolution {
    pub lambda1: f64,
    pub lambda2: f64,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub profile: StationaryProfile,
    /// `h1` and `h2` at the reference state.
    pub normalization: [f64; 2],
    pub mpe_residual: [f64; 2],
    pub verification: ErgodicVerification,
    pub method: SearchMethod,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFailure {
    pub reason: String,
    pub rounds: usize,
    pub cycle_detected: bool,
    pub last_profile: StationaryProfile,
    pub last_gaps: Option<[f64; 2]>,
    pub fallbacks_tried: Vec<SearchMethod>,
    /// Size of player I's pure strategy space, `None` on overflow.
    pub enumeration_space: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SearchOutcome {
    Converged(ErgodicSolution),
    Failed(SearchFailure),
}

impl SearchOutcome {
    pub fn solution(&self) -> Option<&ErgodicSolution> {
        match self {
            SearchOutcome::Converged(s) => Some(s),
            SearchOutcome::Failed(_) => None,
        }
    }
}

fn finish(
    spec: &GameSpec,
    profile: StationaryProfile,
    tol: f64,
    method: SearchMethod,
    rounds: usize,
) -> Result<std::result::Result<ErgodicSolution, [f64; 2]>> {
    let (verification, br1, br2) = verify_inner(spec, &profile, tol)?;
    if !verification.passed {
        return Ok(Err([verification.player1.gap, verification.player2.gap]));
    }
    let r = spec.ref_state;
    let mpe_residual = [
        mpe_residual(spec, &profile, Player::One, &br1.h, br1.lambda),
        mpe_residual(spec, &profile, Player::Two, &br2.h, br2.lambda),
    ];
    Ok(Ok(ErgodicSolution {
        lambda1: br1.lambda,
        lambda2: br2.lambda,
        normalization: [br1.h[r], br2.h[r]],
        h1: br1.h,
        h2: br2.h,
        profile,
        mpe_residual,
        verification,
        method,
        rounds,
    }))
}

fn profile_key(profile: &StationaryProfile, resolution: f64) -> Vec<i64> {
    profile
        .mu
        .iter()
        .chain(&profile.nu)
        .flat_map(|m| m.weights.iter().map(|w| (w / resolution).round() as i64))
        .collect()
}

/// Player I's pure stationary strategies, `None` when there are more than `cap`.
fn pure_strategies(n_states: usize, n_actions: usize, cap: usize) -> Option<Vec<Vec<usize>>> {
    let count = (0..n_states).try_fold(1usize, |acc, _| acc.checked_mul(n_actions))?;
    if count > cap {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    let mut cur = vec![0; n_states];
    for _ in 0..count {
        out.push(cur.clone());
        for digit in cur.iter_mut() {
            *digit += 1;
            if *digit < n_actions {
                break;
            }
            *digit = 0;
        }
    }
    Some(out)
}

fn search_pure(spec: &GameSpec, config: &ErgodicConfig) -> Result<Option<ErgodicSolution>> {
    let Some(candidates) = pure_strategies(spec.n_states, spec.n_actions_u, config.fallback_cap) else {
        return Ok(None);
    };
    for (i, us) in candidates.iter().enumerate() {
        let mu: Vec<MixedAction> = us.iter().map(|&u| MixedAction::pure(spec.n_actions_u, u)).collect();
        let br2 = best_response_ergodic(spec, &mu, Player::Two)?;
        let nu = br2.select(spec.n_actions_v);
        let br1 = best_response_ergodic(spec, &nu, Player::One)?;
        if !br1.contains(&mu) {
            continue;
        }
        if let Ok(sol) = finish(spec, StationaryProfile { mu, nu }, config.tol, SearchMethod::PureEnumeration, i + 1)? {
            return Ok(Some(sol));
        }
    }
    Ok(None)
}

fn nearest<'a>(equilibria: &'a [Equilibrium], prev: Option<(&MixedAction, &MixedAction)>) -> &'a Equilibrium {
    let Some((x, y)) = prev else {
        return &equilibria[0];
    };
    let dist = |e: &Equilibrium| -> f64 {
        let d = |a: &MixedAction, b: &MixedAction| a.weights.iter().zip(&b.weights).map(|(p, q)| (p - q).abs()).sum::<f64>();
        d(&e.row, x) + d(&e.col, y)
    };
    // Stable on ties, so the selection rule still decides between equals.
    equilibria
        .iter()
        .fold(None::<(&Equilibrium, f64)>, |best, e| {
            let de = dist(e);
            match best {
                Some((_, db)) if db <= de => best,
                _ => Some((e, de)),
            }
        })
        .map(|(e, _)| e)
        .unwrap_or(&equilibria[0])
}

/// Fixed-point iteration on per-state stage games built from the current
/// relative values. A fixed point is an equilibrium: each stage mixture
/// minimizes the player's Bellman minimand at its own relative value.
fn search_stage(spec: &GameSpec, config: &ErgodicConfig) -> Result<Option<ErgodicSolution>> {
    let (n, r) = (spec.n_states, spec.ref_state);
    let mut f1 = vec![1.0; n];
    let mut f2 = vec![1.0; n];
    let mut prev: Option<StationaryProfile> = None;
    for it in 1..=config.stage_iterations {
        let mut mu = Vec::with_capacity(n);
        let mut nu = Vec::with_capacity(n);
        let mut c1 = Vec::with_capacity(n);
        let mut c2 = Vec::with_capacity(n);
        for k in 0..n {
            let game = build_stage_game(spec, k, spec.theta, &f1, &f2)?;
            let sol = match bimatrix_nash(&game.a, &game.b) {
                Ok(sol) => sol,
                Err(_) => return Ok(None),
            };
            let e = nearest(&sol.equilibria, prev.as_ref().map(|p| (&p.mu[k], &p.nu[k])));
            mu.push(e.row.clone());
            nu.push(e.col.clone());
            c1.push(e.cost_row);
            c2.push(e.cost_col);
        }
        let span = |c: &[f64], f: &[f64]| {
            let (lo, hi) = c
                .iter()
                .zip(f)
                .map(|(a, b)| (a / b).ln())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            hi - lo
        };
        let spans = span(&c1, &f1).max(span(&c2, &f2));
        let profile = StationaryProfile { mu, nu };
        let moved = prev.as_ref().map_or(f64::INFINITY, |p| p.max_abs_diff(&profile));
        f1 = c1.iter().map(|x| x / c1[r]).collect();
        f2 = c2.iter().map(|x| x / c2[r]).collect();
        if spans <= VI_TOL && moved <= 1e-12 || n == 1 {
            return Ok(finish(spec, profile, config.tol, SearchMethod::StageIteration, it)?.ok());
        }
        prev = Some(profile);
    }
    Ok(None)
}

/// Damped iterated best response from the uniform profile, with cycle
/// detection, then (when enabled) pure-strategy enumeration and stage-game
/// iteration. Existence is guaranteed but no procedure is, so exhausting
/// every route returns a structured failure rather than an error.
pub fn nash_search_ergodic(spec: &GameSpec, config: &ErgodicConfig) -> Result<SearchOutcome> {
    spec.validate().into_result()?;
    if !(config.damping > 0.0 && config.damping <= 1.0) {
        return Err(Error::InvalidSpec(format!("damping {} outside (0, 1]", config.damping)));
    }
    let mut profile = spec.uniform_profile();
    let mut seen = HashSet::new();
    seen.insert(profile_key(&profile, config.cycle_resolution));
    let mut cycle_detected = false;
    let mut last_gaps = None;
    let mut rounds = 0;
    while rounds < config.max_rounds {
        rounds += 1;
        let (b1, b2) = par::join(
            || best_response_ergodic(spec, &profile.nu, Player::One),
            || best_response_ergodic(spec, &profile.mu, Player::Two),
        );
        let (t1, t2) = (b1?.select(spec.n_actions_u), b2?.select(spec.n_actions_v));
        let candidate = StationaryProfile { mu: t1.clone(), nu: t2.clone() };
        let (c1, c2) = par::join(
            || best_response_ergodic(spec, &candidate.nu, Player::One),
            || best_response_ergodic(spec, &candidate.mu, Player::Two),
        );
        if c1?.contains(&candidate.mu) && c2?.contains(&candidate.nu) {
            match finish(spec, candidate, config.tol, SearchMethod::BestResponse, rounds)? {
                Ok(sol) => return Ok(SearchOutcome::Converged(sol)),
                Err(gaps) => last_gaps = Some(gaps),
            }
        }
        let g = config.damping;
        profile = StationaryProfile {
            mu: profile.mu.iter().zip(&t1).map(|(a, b)| a.mix(b, g)).collect(),
            nu: profile.nu.iter().zip(&t2).map(|(a, b)| a.mix(b, g)).collect(),
        };
        if !seen.insert(profile_key(&profile, config.cycle_resolution)) {
            cycle_detected = true;
            break;
        }
    }
    let mut fallbacks_tried = Vec::new();
    if config.fallback {
        fallbacks_tried.push(SearchMethod::PureEnumeration);
        if let Some(sol) = search_pure(spec, config)? {
            return Ok(SearchOutcome::Converged(sol));
        }
        fallbacks_tried.push(SearchMethod::StageIteration);
        if let Some(sol) = search_stage(spec, config)? {
            return Ok(SearchOutcome::Converged(sol));
        }
    }
    let enumeration_space = (0..spec.n_states).try_fold(1usize, |acc, _| acc.checked_mul(spec.n_actions_u));
    Ok(SearchOutcome::Failed(SearchFailure {
        reason: if cycle_detected {
            "best-response iteration revisited a profile".into()
        } else {
            format!("best-response iteration did not settle in {} rounds", rounds)
        },
        rounds,
        cycle_detected,
        last_profile: profile,
        last_gaps,
        fallbacks_tried,
        enumeration_space,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bimatrix::bimatrix_nash;
    use crate::fixtures;

    fn random_profile(spec: &GameSpec, seed: u64) -> StationaryProfile {
        fixtures::random_profile(spec, seed)
    }

    fn constant_cost(n: usize, c: f64, seed: u64) -> GameSpec {
        let mut spec = fixtures::random_game(n, 2, 2, seed, 0.0, 0.1);
        spec.r1 = vec![vec![vec![c; 2]; 2]; n];
        spec.r2 = spec.r1.clone();
        spec
    }

    #[test]
    fn constant_cost_closed_forms() {
        let c = 0.37;
        let spec = constant_cost(3, c, 3);
        let p = random_profile(&spec, 1);
        let g = first_passage_exp(&spec, &p, Player::One, c).unwrap();
        assert!(g.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let gpe = gpe_bisection(&spec, &p, Player::One, GPE_TOL).unwrap();
        assert!((gpe.lambda - c).abs() <= 1e-10);
        let sl = spectral_lambda(&spec, &p, Player::Two).unwrap();
        assert!((sl.lambda - c).abs() < 1e-11);
        let h = relative_value_h(&spec, &p, Player::One, c).unwrap();
        assert!(h.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let t = twisted_kernel(&spec, &p, Player::One, &[1.0; 3], c).unwrap();
        let k = crate::model::induced_kernel(&spec, &p).unwrap();
        assert!((t - k).amax() < 1e-14);
        let vi = rs_value_iteration(&spec, &p.nu, Player::One, VI_TOL).unwrap();
        assert!((vi.lambda - c).abs() < 1e-12);
        assert!(vi.h.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sign_bound_at_top_of_bracket() {
        let spec = fixtures::random_game(4, 2, 3, 5, 0.8, 0.05);
        let p = random_profile(&spec, 2);
        let g = first_passage_exp(&spec, &p, Player::Two, spec.cost_norm(Player::Two)).unwrap();
        assert!(g[spec.ref_state] <= 1.0);
    }

    #[test]
    fn two_state_hand_solution() {
        // Action-free chain with p01 = a, p10 = b and state costs c0, c1.
        let (a, b) = (0.3, 0.6);
        let mut spec = fixtures::action_free_chain(&[vec![1.0 - a, a], vec![b, 1.0 - b]], 1, 1);
        let (c0, c1) = (0.2, -0.5);
        spec.r1 = vec![vec![vec![c0]], vec![vec![c1]]];
        spec.theta = 0.7;
        let p = spec.uniform_profile();
        let lam = 0.1;
        let (e0, e1) = ((0.7 * (c0 - lam) as f64).exp(), (0.7 * (c1 - lam) as f64).exp());
        // g1 = e1 (b + (1 - b) g1), g0 = e0 (1 - a + a g1).
        let g1 = e1 * b / (1.0 - e1 * (1.0 - b));
        let g0 = e0 * (1.0 - a + a * g1);
        let g = first_passage_exp(&spec, &p, Player::One, lam).unwrap();
        assert!((g[0] - g0).abs() < 1e-14 && (g[1] - g1).abs() < 1e-14);
        let h = relative_value_h(&spec, &p, Player::One, lam).unwrap();
        assert!((h[0] - e0).abs() < 1e-14 && (h[1] - e0 * g1).abs() < 1e-14);
    }

    #[test]
    fn single_state_closed_form() {
        let spec = fixtures::single_state(vec![vec![0.3, -0.2], vec![0.1, 0.5]], vec![vec![0.0, 0.4], vec![-0.3, 0.2]], 0.8);
        let p = StationaryProfile {
            mu: vec![MixedAction { weights: vec![0.25, 0.75] }],
            nu: vec![MixedAction { weights: vec![0.6, 0.4] }],
        };
        let exact = |player: Player| {
            let s: f64 = p.joint(0).map(|(u, v, w)| w * (0.8 * spec.cost(player, 0, u, v)).exp()).sum();
            s.ln() / 0.8
        };
        for player in Player::BOTH {
            let gpe = gpe_bisection(&spec, &p, player, GPE_TOL).unwrap();
            assert!((gpe.lambda - exact(player)).abs() <= 1e-10);
            assert!((gpe.g[0] - 1.0).abs() < 1e-8);
            let sl = spectral_lambda(&spec, &p, player).unwrap();
            assert!((sl.lambda - exact(player)).abs() < 1e-12);
        }
        let vi = rs_value_iteration(&spec, &p.nu, Player::One, VI_TOL).unwrap();
        let best = (0..2)
            .map(|u| {
                let s: f64 = (0..2).map(|v| p.nu[0].weights[v] * (0.8 * spec.r1[0][u][v]).exp()).sum();
                s.ln() / 0.8
            })
            .fold(f64::INFINITY, f64::min);
        assert!((vi.lambda - best).abs() < 1e-13);
    }

    #[test]
    fn gpe_agrees_with_spectral() {
        for seed in 0..10 {
            let spec = fixtures::random_game(3 + seed as usize % 4, 2, 3, seed, 1.0, 0.0);
            let p = random_profile(&spec, seed + 100);
            for player in Player::BOTH {
                let gpe = gpe_bisection(&spec, &p, player, GPE_TOL).unwrap();
                let sl = spectral_lambda(&spec, &p, player).unwrap();
                assert!((gpe.lambda - sl.lambda).abs() < 1e-8, "seed {}", seed);
                assert!((gpe.g[spec.ref_state] - 1.0).abs() < 1e-8);
                assert!(gpe.lambda.abs() <= spec.cost_norm(player) + 1e-10);
            }
        }
    }

    #[test]
    fn g_ref_decreases_in_lambda() {
        let spec = fixtures::random_game(4, 2, 2, 17, 0.6, 0.05);
        let p = random_profile(&spec, 4);
        let gpe = gpe_bisection(&spec, &p, Player::One, GPE_TOL).unwrap();
        let norm = spec.cost_norm(Player::One);
        let values: Vec<f64> = [-0.5, 0.0, 0.25, 0.6, 1.0]
            .iter()
            .map(|&s| gpe.lambda + s * (norm - gpe.lambda))
            .map(|l| first_passage_exp(&spec, &p, Player::One, l).unwrap()[0])
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn h_solves_poisson_equation() {
        let spec = fixtures::random_game(5, 2, 2, 19, 0.5, 0.02);
        let p = random_profile(&spec, 5);
        let gpe = gpe_bisection(&spec, &p, Player::Two, GPE_TOL).unwrap();
        let h = relative_value_h(&spec, &p, Player::Two, gpe.lambda).unwrap();
        assert!(mpe_residual(&spec, &p, Player::Two, &h, gpe.lambda) < 1e-8);
        let t = twisted_kernel(&spec, &p, Player::Two, &h, gpe.lambda).unwrap();
        for k in 0..5 {
            assert!((t.row(k).sum() - 1.0).abs() < 1e-10);
        }
        let mut bumped = h.clone();
        bumped[2] += 0.1;
        assert!(matches!(
            twisted_kernel(&spec, &p, Player::Two, &bumped, gpe.lambda),
            Err(Error::NotStochastic { .. })
        ));
        let zero = fixtures::action_free_chain(&[vec![0.5, 0.5], vec![0.2, 0.8]], 2, 2);
        let u = zero.uniform_profile();
        assert_eq!(mpe_residual(&zero, &u, Player::One, &[1.0, 1.0], 0.0), 0.0);
        assert!(mpe_residual(&spec, &p, Player::Two, &[1.0, 3.0, 0.2, 1.0, 2.0], gpe.lambda) > 0.1);
    }

    #[test]
    fn value_iteration_matches_pure_strategy_oracle() {
        let spec = fixtures::random_game(3, 2, 2, 29, 0.8, 0.05);
        let opp = random_profile(&spec, 6).nu;
        let vi = rs_value_iteration(&spec, &opp, Player::One, VI_TOL).unwrap();
        let mut best = f64::INFINITY;
        for code in 0..8usize {
            let own: Vec<MixedAction> = (0..3).map(|k| MixedAction::pure(2, (code >> k) & 1)).collect();
            let p = assemble(Player::One, own, &opp);
            best = best.min(gpe_bisection(&spec, &p, Player::One, GPE_TOL).unwrap().lambda);
        }
        assert!((vi.lambda - best).abs() < 1e-8);
        let p = assemble(Player::One, vi.select(2), &opp);
        assert!(mpe_residual(&spec, &p, Player::One, &vi.h, vi.lambda) < 1e-8);
        twisted_kernel(&spec, &p, Player::One, &vi.h, vi.lambda).unwrap();
        let lam = gpe_bisection(&spec, &p, Player::One, GPE_TOL).unwrap().lambda;
        assert!((lam - vi.lambda).abs() < 1e-8);
        let h = relative_value_h(&spec, &p, Player::One, vi.lambda).unwrap();
        for (a, b) in h.iter().zip(&vi.h) {
            assert!((a - b).abs() < 1e-7 * b);
        }
    }

    #[test]
    fn dominant_action_gives_singleton() {
        let mut spec = fixtures::random_game(3, 3, 2, 31, 0.3, 0.1);
        for k in 0..3 {
            for v in 0..2 {
                spec.r1[k][2][v] = -1.0;
                spec.q[k][2][v] = spec.q[k][0][v].clone();
                spec.q[k][1][v] = spec.q[k][0][v].clone();
            }
        }
        let br = best_response_ergodic(&spec, &spec.uniform_profile().nu, Player::One).unwrap();
        assert!(br.argmin.iter().all(|a| a == &vec![2]));
        // Identical actions tie everywhere.
        let mut tied = spec.clone();
        tied.r1 = vec![vec![vec![0.2; 2]; 3]; 3];
        let br = best_response_ergodic(&tied, &tied.uniform_profile().nu, Player::One).unwrap();
        assert!(br.argmin.iter().all(|a| a == &vec![0, 1, 2]));
    }

    #[test]
    fn shift_moves_lambda_and_keeps_argmin() {
        let spec = fixtures::random_game(3, 2, 2, 37, 0.5, 0.05);
        let opp = random_profile(&spec, 8).nu;
        let base = best_response_ergodic(&spec, &opp, Player::One).unwrap();
        for c in [0.1, -0.1] {
            let mut shifted = spec.clone();
            shifted.shift_cost(Player::One, c);
            let br = best_response_ergodic(&shifted, &opp, Player::One).unwrap();
            assert!((br.lambda - base.lambda - c).abs() < 1e-10);
            assert_eq!(br.argmin, base.argmin);
        }
    }

    #[test]
    fn decoupled_game_converges_in_one_round() {
        let mut spec = fixtures::random_game(3, 2, 2, 41, 0.5, 0.05);
        for k in 0..3 {
            for u in 0..2 {
                spec.r1[k][u][1] = spec.r1[k][u][0];
                spec.r2[k][1][u] = spec.r2[k][0][u];
                spec.q[k][u] = vec![spec.q[k][0][0].clone(); 2];
            }
        }
        let out = nash_search_ergodic(&spec, &ErgodicConfig::default()).unwrap();
        let sol = out.solution().expect("converged");
        assert_eq!(sol.rounds, 1);
        assert_eq!(sol.method, SearchMethod::BestResponse);
    }

    #[test]
    fn single_state_matches_bimatrix() {
        // No pure equilibrium: forces the mixed route.
        let spec = fixtures::single_state(vec![vec![0.4, -0.3], vec![-0.2, 0.5]], vec![vec![-0.1, 0.3], vec![0.6, -0.4]], 0.6);
        let out = nash_search_ergodic(&spec, &ErgodicConfig::default()).unwrap();
        let sol = out.solution().expect("converged");
        let a = Matrix::from_fn(2, 2, |u, v| (0.6 * spec.r1[0][u][v]).exp());
        let b = Matrix::from_fn(2, 2, |u, v| (0.6 * spec.r2[0][u][v]).exp());
        let eq = bimatrix_nash(&a, &b).unwrap();
        assert_eq!(eq.equilibria.len(), 1);
        assert_eq!(sol.profile.mu[0], eq.selected().row);
        assert_eq!(sol.profile.nu[0], eq.selected().col);
        assert!((sol.lambda1 - eq.selected().cost_row.ln() / 0.6).abs() < 1e-12);
    }

    #[test]
    fn search_result_verifies() {
        for seed in 0..4 {
            let spec = fixtures::random_game(2, 2, 2, 200 + seed, 0.5, 0.05);
            let out = nash_search_ergodic(&spec, &ErgodicConfig::default()).unwrap();
            let sol = out.solution().expect("converged");
            let report = verify_nash_ergodic(&spec, &sol.profile, 1e-7).unwrap();
            assert!(report.passed, "seed {}: {:?}", seed, report);
            assert!(sol.mpe_residual.iter().all(|&r| r <= 1e-8));
            for (lam, player) in [(sol.lambda1, Player::One), (sol.lambda2, Player::Two)] {
                assert!(lam.abs() <= spec.cost_norm(player));
            }
        }
    }

    #[test]
    fn perturbed_profile_shows_gap() {
        let spec = fixtures::random_game(2, 2, 2, 43, 0.6, 0.05);
        let sol = nash_search_ergodic(&spec, &ErgodicConfig::default()).unwrap();
        let sol = sol.solution().unwrap();
        let br = best_response_ergodic(&spec, &sol.profile.nu, Player::One).unwrap();
        let k = (0..2).find(|&k| br.argmin[k].len() == 1).unwrap();
        let mut tampered = sol.profile.clone();
        tampered.mu[k] = MixedAction::pure(2, 1 - br.argmin[k][0]);
        let report = verify_nash_ergodic(&spec, &tampered, 1e-7).unwrap();
        assert!(report.player1.gap > 0.0);
        assert!(report.player1.state_gaps[k] > 0.0);
    }

    #[test]
    fn single_action_game_has_zero_gaps() {
        let spec = fixtures::random_game(3, 1, 1, 47, 0.5, 0.1);
        let report = verify_nash_ergodic(&spec, &spec.uniform_profile(), 1e-7).unwrap();
        assert!(report.passed);
        assert!(report.max_gap.abs() < 1e-9);
    }
}
