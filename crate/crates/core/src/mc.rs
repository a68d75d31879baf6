//! Seeded Monte Carlo for the game dynamics.
//!
//! Every path draws from its own ChaCha8 stream: the generator is seeded
//! with the run seed and the stream number is the path index. Paths are
//! independent of scheduling, so serial and parallel runs agree bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{GameSpec, MarkovProfile, Player, StationaryProfile};
use crate::par;
use crate::Result;

/// Default cap on the length of one return-time excursion.
pub const RETURN_CAP: u64 = 1_000_000;

/// Share of censored paths above which a return-time report is flagged.
pub const CENSOR_FLAG: f64 = 0.01;

/// Anything that prescribes a stationary profile at each time step.
pub trait Strategy: Sync {
    fn at(&self, t: usize) -> &StationaryProfile;
}

impl Strategy for StationaryProfile {
    fn at(&self, _t: usize) -> &StationaryProfile {
        self
    }
}

/// Past its horizon a Markov profile keeps playing its last stage.
impl Strategy for MarkovProfile {
    fn at(&self, t: usize) -> &StationaryProfile {
        &self.stages[t.min(self.stages.len() - 1)]
    }
}

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if x < acc {
                return i;
            }
        }
    }
    last
}

struct Step {
    u: usize,
    v: usize,
    next: usize,
}

fn step<R: Rng>(spec: &GameSpec, profile: &StationaryProfile, k: usize, rng: &mut R) -> Step {
    let u = sample_index(rng, &profile.mu[k].weights);
    let v = sample_index(rng, &profile.nu[k].weights);
    let next = sample_index(rng, spec.row(k, u, v));
    Step { u, v, next }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T + 1` visited states, starting with the initial one.
    pub states: Vec<usize>,
    pub actions: Vec<(usize, usize)>,
    /// Stage costs `[r1, r2]`.
    pub costs: Vec<[f64; 2]>,
}

/// One length-`horizon` trajectory from `start`, drawn from stream 0.
pub fn simulate(
    spec: &GameSpec,
    profile: &dyn Strategy,
    start: usize,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    spec.validate().into_result()?;
    profile.at(0).check(spec)?;
    let mut rng = path_rng(seed, 0);
    let mut k = start;
    let mut out = Trajectory {
        states: vec![k],
        actions: Vec::with_capacity(horizon),
        costs: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let s = step(spec, profile.at(t), k, &mut rng);
        out.actions.push((s.u, s.v));
        out.costs.push([spec.cost(Player::One, k, s.u, s.v), spec.cost(Player::Two, k, s.u, s.v)]);
        out.states.push(s.next);
        k = s.next;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Discounted,
    ErgodicBatch,
    ReturnTimeMoment,
    ReturnTimeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub point: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub estimator_kind: EstimatorKind,
    /// Kish effective sample size of the exponential weights; equals
    /// `n_paths` for plain means.
    pub effective_sample_size: f64,
    pub censored: usize,
    pub flagged: bool,
}

/// Per-path total cost, as written to batch CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub path: usize,
    pub steps: usize,
    pub cost_sum: f64,
    pub end_state: usize,
}

/// Sum of `weight^t r_i` over `horizon` steps from `start`, one sample per path.
pub fn path_sums(
    spec: &GameSpec,
    profile: &dyn Strategy,
    player: Player,
    start: usize,
    horizon: usize,
    weight: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    spec.validate().into_result()?;
    for t in 0..horizon.max(1) {
        profile.at(t).check(spec)?;
    }
    Ok(par::map(n_paths, |path| {
        let mut rng = path_rng(seed, path as u64);
        let (mut k, mut total, mut scale) = (start, 0.0, 1.0);
        for t in 0..horizon {
            let s = step(spec, profile.at(t), k, &mut rng);
            total += scale * spec.cost(player, k, s.u, s.v);
            scale *= weight;
            k = s.next;
        }
        PathSample {
            path,
            steps: horizon,
            cost_sum: total,
            end_state: k,
        }
    }))
}

/// `(1/scale) ln mean exp(scale x)` with its delta-method standard error and
/// the effective sample size of the weights.
pub fn log_mean_exp(xs: &[f64], scale: f64) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let top = xs.iter().map(|x| scale * x).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = xs.iter().map(|x| (scale * x - top).exp()).collect();
    let sum: f64 = w.iter().sum();
    let mean = sum / n;
    let var = if xs.len() > 1 {
        w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let point = (top + mean.ln()) / scale;
    let stderr = var.sqrt() / (n.sqrt() * mean * scale);
    let ess = sum * sum / w.iter().map(|x| x * x).sum::<f64>();
    (point, stderr, ess)
}

fn exp_report(samples: &[PathSample], scale: f64, seed: u64, kind: EstimatorKind) -> EstimatorReport {
    let xs: Vec<f64> = samples.iter().map(|s| s.cost_sum).collect();
    let (point, stderr, ess) = log_mean_exp(&xs, scale);
    EstimatorReport {
        point,
        stderr,
        n_paths: samples.len(),
        seed,
        estimator_kind: kind,
        effective_sample_size: ess,
        censored: 0,
        flagged: false,
    }
}

/// Estimates `(1/theta) ln E_start[exp(theta sum_{s<T} alpha^s r_i)]`.
pub fn estimate_discounted_cost_from(
    spec: &GameSpec,
    profile: &dyn Strategy,
    player: Player,
    start: usize,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    let samples = path_sums(spec, profile, player, start, horizon, spec.alpha, n_paths, seed)?;
    Ok(exp_report(&samples, spec.theta, seed, EstimatorKind::Discounted))
}

/// Discounted estimate started at the reference state.
pub fn estimate_discounted_cost(
    spec: &GameSpec,
    profile: &dyn Strategy,
    player: Player,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    estimate_discounted_cost_from(spec, profile, player, spec.ref_state, horizon, n_paths, seed)
}

/// Estimates the long-run exponential cost as
/// `(1/(theta T)) ln mean_b exp(theta S_b)` over independent batches, each a
/// length-`T` path from the reference state. Log of a sample mean is biased
/// low by about `stderr^2 theta T / 2`, i.e. `O(1/n_batches)`, and the
/// start state adds an `O(1/T)` term.
pub fn estimate_ergodic_cost(
    spec: &GameSpec,
    profile: &StationaryProfile,
    player: Player,
    horizon: usize,
    n_batches: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    let samples = ergodic_batches(spec, profile, player, horizon, n_batches, seed)?;
    let mut report = exp_report(&samples, spec.theta, seed, EstimatorKind::ErgodicBatch);
    let t = horizon.max(1) as f64;
    report.point /= t;
    report.stderr /= t;
    Ok(report)
}

/// Batch sums behind [`estimate_ergodic_cost`].
pub fn ergodic_batches(
    spec: &GameSpec,
    profile: &StationaryProfile,
    player: Player,
    horizon: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    path_sums(spec, profile, player, spec.ref_state, horizon, 1.0, n_batches, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTimeReport {
    /// Estimate of `E[R^sigma]`.
    pub moment: EstimatorReport,
    /// Estimate of `E[sigma]`.
    pub mean_time: EstimatorReport,
    pub rate: f64,
    pub cap: u64,
}

/// First return time to `target` from `target` for each path, `None` when
/// the excursion is longer than `cap`.
pub fn return_times(
    spec: &GameSpec,
    profile: &StationaryProfile,
    target: usize,
    n_paths: usize,
    seed: u64,
    cap: u64,
) -> Result<Vec<Option<u64>>> {
    spec.validate().into_result()?;
    profile.check(spec)?;
    Ok(par::map(n_paths, |path| {
        let mut rng = path_rng(seed, path as u64);
        let mut k = target;
        for t in 1..=cap {
            k = step(spec, profile, k, &mut rng).next;
            if k == target {
                return Some(t);
            }
        }
        None
    }))
}

/// Samples the first return time to `target` from `target`; excursions
/// longer than `cap` are censored and left out of both means.
pub fn sample_return_time(
    spec: &GameSpec,
    profile: &StationaryProfile,
    target: usize,
    n_paths: usize,
    rate: f64,
    seed: u64,
    cap: u64,
) -> Result<ReturnTimeReport> {
    let times = return_times(spec, profile, target, n_paths, seed, cap)?;
    let done: Vec<f64> = times.iter().flatten().map(|&t| t as f64).collect();
    let censored = n_paths - done.len();
    let flagged = censored as f64 > CENSOR_FLAG * n_paths as f64;
    let plain = |xs: Vec<f64>, kind| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EstimatorReport {
            point: mean,
            stderr: (var / n).sqrt(),
            n_paths,
            seed,
            estimator_kind: kind,
            effective_sample_size: n,
            censored,
            flagged,
        }
    };
    let moments = done.iter().map(|t| rate.powf(*t)).collect();
    Ok(ReturnTimeReport {
        moment: plain(moments, EstimatorKind::ReturnTimeMoment),
        mean_time: plain(done, EstimatorKind::ReturnTimeMean),
        rate,
        cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::{induced_kernel, MixedAction};

    #[test]
    fn deterministic_kernel_pure_profile() {
        let spec = fixtures::action_free_chain(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]], 2, 2);
        let p = StationaryProfile::pure(&spec, &[0, 1, 0], &[1, 1, 0]);
        let a = simulate(&spec, &p, 0, 6, 1).unwrap();
        let b = simulate(&spec, &p, 0, 6, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states, vec![0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(a.actions[1], (1, 1));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let spec = fixtures::random_game(4, 2, 3, 3, 0.5, 0.0);
        let p = spec.uniform_profile();
        assert_eq!(simulate(&spec, &p, 0, 200, 7).unwrap(), simulate(&spec, &p, 0, 200, 7).unwrap());
        assert_ne!(simulate(&spec, &p, 0, 200, 7).unwrap(), simulate(&spec, &p, 0, 200, 8).unwrap());
    }

    #[test]
    fn transition_frequencies_match_kernel() {
        let spec = fixtures::random_game(3, 2, 2, 11, 0.5, 0.1);
        let p = StationaryProfile {
            mu: vec![MixedAction { weights: vec![0.3, 0.7] }; 3],
            nu: vec![MixedAction { weights: vec![0.5, 0.5] }; 3],
        };
        let traj = simulate(&spec, &p, 0, 100_000, 5).unwrap();
        let kernel = induced_kernel(&spec, &p).unwrap();
        let mut counts = vec![vec![0usize; 3]; 3];
        for w in traj.states.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        for k in 0..3 {
            let n: usize = counts[k].iter().sum();
            for j in 0..3 {
                let pk = kernel[(k, j)];
                let sd = (pk * (1.0 - pk) / n as f64).sqrt();
                assert!((counts[k][j] as f64 / n as f64 - pk).abs() <= 3.0 * sd, "{} -> {}", k, j);
            }
        }
    }

    #[test]
    fn degenerate_costs() {
        let mut spec = fixtures::random_game(3, 2, 2, 13, 0.0, 0.1);
        let p = spec.uniform_profile();
        let zero = estimate_discounted_cost(&spec, &p, Player::One, 20, 50, 1).unwrap();
        assert_eq!(zero.point, 0.0);
        let c = 0.4;
        spec.r1 = vec![vec![vec![c; 2]; 2]; 3];
        let d = estimate_discounted_cost(&spec, &p, Player::One, 20, 50, 1).unwrap();
        let exact = c * (1.0 - spec.alpha.powi(20)) / (1.0 - spec.alpha);
        assert!((d.point - exact).abs() < 1e-12);
        assert!(d.stderr < 1e-12);
        let e = estimate_ergodic_cost(&spec, &p, Player::One, 100, 20, 1).unwrap();
        assert!((e.point - c).abs() < 1e-12);
        assert!(e.stderr < 1e-12);
    }

    #[test]
    fn single_state_pure_ergodic() {
        let spec = fixtures::single_state(vec![vec![0.3, -0.2]], vec![vec![0.1, 0.5]], 0.5);
        let p = StationaryProfile::pure(&spec, &[0], &[1]);
        let e = estimate_ergodic_cost(&spec, &p, Player::One, 50, 10, 3).unwrap();
        assert!((e.point + 0.2).abs() < 1e-12);
    }

    #[test]
    fn swap_chain_return_time() {
        let spec = fixtures::action_free_chain(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1, 1);
        let p = spec.uniform_profile();
        let r = sample_return_time(&spec, &p, 0, 100, 1.5, 9, RETURN_CAP).unwrap();
        assert_eq!(r.mean_time.point, 2.0);
        assert_eq!(r.moment.point, 2.25);
        assert_eq!(r.moment.censored, 0);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        let spec = fixtures::action_free_chain(&[vec![0.0, 1.0], vec![0.0, 1.0]], 1, 1);
        let p = spec.uniform_profile();
        let r = sample_return_time(&spec, &p, 0, 20, 1.1, 1, 1000).unwrap();
        assert_eq!(r.moment.censored, 20);
        assert!(r.moment.flagged);
    }

    #[test]
    fn reports_are_reproducible() {
        let spec = fixtures::random_game(3, 2, 2, 17, 0.5, 0.05);
        let p = spec.uniform_profile();
        let a = estimate_discounted_cost(&spec, &p, Player::Two, 30, 500, 21).unwrap();
        let b = estimate_discounted_cost(&spec, &p, Player::Two, 30, 500, 21).unwrap();
        assert_eq!(a, b);
        let serial: Vec<PathSample> = (0..50)
            .map(|i| path_sums(&spec, &p, Player::Two, 0, 30, spec.alpha, i + 1, 21).unwrap()[i])
            .collect();
        let parallel = path_sums(&spec, &p, Player::Two, 0, 30, spec.alpha, 50, 21).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn stderr_scales_with_paths() {
        let spec = fixtures::random_game(3, 2, 2, 19, 0.5, 0.05);
        let p = spec.uniform_profile();
        let a = estimate_discounted_cost(&spec, &p, Player::One, 30, 2_000, 1).unwrap();
        let b = estimate_discounted_cost(&spec, &p, Player::One, 30, 8_000, 2).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!(ratio > 1.0 && ratio < 4.0, "ratio {}", ratio);
    }
}
