//! Seeded game generators shared by tests, the CLI examples and the web demo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::markov::{check_assumptions, RecurrenceConfig};
use crate::model::{GameSpec, MixedAction, StationaryProfile};

/// Random game with costs uniform on `[-cost_scale, cost_scale]` and kernel
/// rows drawn uniformly then normalized. `min_prob` is added to every entry
/// before normalizing, so `min_prob > 0` gives a strictly positive kernel.
pub fn random_game(
    n_states: usize,
    n_actions_u: usize,
    n_actions_v: usize,
    seed: u64,
    cost_scale: f64,
    min_prob: f64,
) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let costs = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        (0..n_states)
            .map(|_| {
                (0..n_actions_u)
                    .map(|_| {
                        (0..n_actions_v)
                            .map(|_| cost_scale * (2.0 * rng.random::<f64>() - 1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let r1 = costs(&mut rng);
    let r2 = costs(&mut rng);
    let q = (0..n_states)
        .map(|_| {
            (0..n_actions_u)
                .map(|_| {
                    (0..n_actions_v)
                        .map(|_| random_row(&mut rng, n_states, min_prob))
                        .collect()
                })
                .collect()
        })
        .collect();
    GameSpec {
        n_states,
        n_actions_u,
        n_actions_v,
        r1,
        r2,
        q,
        theta: 0.5,
        theta_max: 1.0,
        alpha: 0.8,
        ref_state: 0,
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize, min_prob: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + min_prob).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Put the rounding remainder on the largest entry.
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    let rest: f64 = row.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, x)| x).sum();
    row[imax] = 1.0 - rest;
    row
}

/// Game whose dynamics ignore the actions: every `(k, u, v)` uses row `p[k]`.
pub fn action_free_chain(p: &[Vec<f64>], n_actions_u: usize, n_actions_v: usize) -> GameSpec {
    let n = p.len();
    GameSpec {
        n_states: n,
        n_actions_u,
        n_actions_v,
        r1: vec![vec![vec![0.0; n_actions_v]; n_actions_u]; n],
        r2: vec![vec![vec![0.0; n_actions_v]; n_actions_u]; n],
        q: p.iter()
            .map(|row| vec![vec![row.clone(); n_actions_v]; n_actions_u])
            .collect(),
        theta: 0.5,
        theta_max: 1.0,
        alpha: 0.8,
        ref_state: 0,
    }
}

/// Single-state game with the given cost matrices.
pub fn single_state(r1: Vec<Vec<f64>>, r2: Vec<Vec<f64>>, theta: f64) -> GameSpec {
    let nu = r1.len();
    let nv = r1[0].len();
    GameSpec {
        n_states: 1,
        n_actions_u: nu,
        n_actions_v: nv,
        r1: vec![r1],
        r2: vec![r2],
        q: vec![vec![vec![vec![1.0]; nv]; nu]],
        theta,
        theta_max: theta,
        alpha: 0.8,
        ref_state: 0,
    }
}

/// Random game whose kernel keeps only entries above `1 / (keep n)` plus the
/// cycle `k -> k + 1 mod n`, so every induced chain stays irreducible. Self
/// loops on state 0 make it aperiodic.
pub fn sparse_random_game(n_states: usize, n_actions_u: usize, n_actions_v: usize, seed: u64, cost_scale: f64, keep: f64) -> GameSpec {
    let mut spec = random_game(n_states, n_actions_u, n_actions_v, seed, cost_scale, 0.0);
    let cut = 1.0 / (keep * n_states as f64);
    for (k, by_u) in spec.q.iter_mut().enumerate() {
        for row in by_u.iter_mut().flatten() {
            for (j, x) in row.iter_mut().enumerate() {
                let forced = j == (k + 1) % n_states || (k == 0 && j == 0);
                if *x < cut && !forced {
                    *x = 0.0;
                } else if forced {
                    *x += cut;
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
            let (imax, _) = row.iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
            let rest: f64 = row.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, x)| x).sum();
            row[imax] = 1.0 - rest;
        }
    }
    spec
}

/// Rescales both cost arrays so the larger norm is `fraction` of
/// `ln(R0) / (3 Theta)`. `None` when (A1) or (A2) fails or no geometric rate
/// exists.
pub fn within_cost_bound(spec: &GameSpec, fraction: f64) -> Option<GameSpec> {
    let report = check_assumptions(spec, &RecurrenceConfig::default()).ok()?;
    if !(report.a1_holds && report.a2_holds) {
        return None;
    }
    let threshold = report.a3_threshold?;
    let norm = spec.max_cost_norm();
    if norm == 0.0 {
        return Some(spec.clone());
    }
    let s = fraction * threshold / norm;
    let scale = |r: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        r.iter()
            .map(|a| a.iter().map(|b| b.iter().map(|x| x * s).collect()).collect())
            .collect()
    };
    Some(spec.with_costs(scale(&spec.r1), scale(&spec.r2)))
}

/// Stationary profile with every weight drawn uniformly, bounded away from 0.
pub fn random_profile(spec: &GameSpec, seed: u64) -> StationaryProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixed = |n: usize| {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let rest: f64 = w[1..].iter().sum();
        w[0] = 1.0 - rest;
        MixedAction { weights: w }
    };
    StationaryProfile {
        mu: (0..spec.n_states).map(|_| mixed(spec.n_actions_u)).collect(),
        nu: (0..spec.n_states).map(|_| mixed(spec.n_actions_v)).collect(),
    }
}
