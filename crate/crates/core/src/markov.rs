//! Ergodicity and recurrence certificates for the controlled chain.
//!
//! Everything that must hold "uniformly over stationary strategies" is
//! checked over pure stationary profiles: mixing only adds support edges and
//! every quantity maximized here is attained at a vertex of the per-state
//! action simplex.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix, Vector};
use crate::model::{pure_kernel, GameSpec, Player, PureProfiles};
use crate::{Error, Result};

/// Dobrushin coefficient: half the largest total-variation distance between
/// any two kernel rows `q(.|i,u,v)` and `q(.|j,u',v')`.
pub fn dobrushin_delta(spec: &GameSpec) -> f64 {
    let rows: Vec<&[f64]> = (0..spec.n_states)
        .flat_map(|k| spec.joint_actions().map(move |(u, v)| spec.row(k, u, v)))
        .collect();
    let mut delta = 0.0f64;
    for (a, ra) in rows.iter().enumerate() {
        for rb in &rows[a + 1..] {
            let d: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum();
            delta = delta.max(0.5 * d);
        }
    }
    delta.min(1.0)
}

/// Same coefficient for a single stochastic matrix.
pub fn dobrushin_of_matrix(p: &Matrix) -> f64 {
    let n = p.nrows();
    let mut delta = 0.0f64;
    for a in 0..n {
        for b in a + 1..n {
            let d: f64 = (0..n).map(|j| (p[(a, j)] - p[(b, j)]).abs()).sum();
            delta = delta.max(0.5 * d);
        }
    }
    delta.min(1.0)
}

fn support_graph(p: &Matrix) -> Vec<Vec<usize>> {
    (0..p.nrows())
        .map(|k| (0..p.ncols()).filter(|&j| p[(k, j)] > 0.0).collect())
        .collect()
}

fn reaches_all(adj: &[Vec<usize>], start: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(k) = stack.pop() {
        for &j in &adj[k] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of an irreducible support graph, `None` if it is reducible.
fn graph_period(adj: &[Vec<usize>]) -> Option<usize> {
    let n = adj.len();
    if n == 0 || !reaches_all(adj, 0) {
        return None;
    }
    let mut reverse = vec![Vec::new(); n];
    for (k, out) in adj.iter().enumerate() {
        for &j in out {
            reverse[j].push(k);
        }
    }
    if !reaches_all(&reverse, 0) {
        return None;
    }
    // BFS levels; the period is the gcd of level[k] + 1 - level[j] over edges.
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0]);
    while let Some(k) = queue.pop_front() {
        for &j in &adj[k] {
            if level[j] == usize::MAX {
                level[j] = level[k] + 1;
                queue.push_back(j);
            }
        }
    }
    let mut g = 0;
    for (k, out) in adj.iter().enumerate() {
        for &j in out {
            g = gcd(g, (level[k] + 1).abs_diff(level[j]));
        }
    }
    Some(g)
}

pub fn is_irreducible(p: &Matrix) -> bool {
    graph_period(&support_graph(p)).is_some()
}

/// Period of an irreducible matrix, `None` when reducible.
pub fn period(p: &Matrix) -> Option<usize> {
    graph_period(&support_graph(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainVerdict {
    pub holds: bool,
    /// How the verdict was reached: "common-support", "enumeration",
    /// "union-support" or "undetermined".
    pub method: String,
    /// Offending pure profile as per-state `(u, v)` pairs.
    pub witness: Option<Vec<(usize, usize)>>,
    pub detail: String,
}

/// Default number of pure profiles enumerated before giving up.
pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

/// Irreducibility and aperiodicity under every pure stationary profile.
///
/// If the edges common to all action pairs already form an irreducible
/// aperiodic graph, every profile inherits that. Otherwise pure profiles
/// are enumerated up to `cap`.
pub fn check_irreducible_aperiodic(spec: &GameSpec, cap: usize) -> ChainVerdict {
    let n = spec.n_states;
    let common: Vec<Vec<usize>> = (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| spec.joint_actions().all(|(u, v)| spec.row(k, u, v)[j] > 0.0))
                .collect()
        })
        .collect();
    if graph_period(&common) == Some(1) {
        return ChainVerdict {
            holds: true,
            method: "common-support".into(),
            witness: None,
            detail: "edges shared by all action pairs form an irreducible aperiodic graph".into(),
        };
    }
    let to_pairs = |joint: &[usize]| -> Vec<(usize, usize)> {
        joint
            .iter()
            .map(|&a| (a / spec.n_actions_v, a % spec.n_actions_v))
            .collect()
    };
    match PureProfiles::count(spec) {
        Some(count) if count <= cap => {
            for joint in PureProfiles::new(spec) {
                let p = pure_kernel(spec, &joint);
                match period(&p) {
                    Some(1) => {}
                    Some(d) => {
                        return ChainVerdict {
                            holds: false,
                            method: "enumeration".into(),
                            witness: Some(to_pairs(&joint)),
                            detail: format!("chain is periodic with period {}", d),
                        }
                    }
                    None => {
                        return ChainVerdict {
                            holds: false,
                            method: "enumeration".into(),
                            witness: Some(to_pairs(&joint)),
                            detail: "chain is reducible".into(),
                        }
                    }
                }
            }
            ChainVerdict {
                holds: true,
                method: "enumeration".into(),
                witness: None,
                detail: format!("all {} pure profiles irreducible and aperiodic", count),
            }
        }
        _ => {
            let union: Vec<Vec<usize>> = (0..n)
                .map(|k| {
                    (0..n)
                        .filter(|&j| spec.joint_actions().any(|(u, v)| spec.row(k, u, v)[j] > 0.0))
                        .collect()
                })
                .collect();
            if graph_period(&union) != Some(1) {
                let joint = vec![0; n];
                return ChainVerdict {
                    holds: false,
                    method: "union-support".into(),
                    witness: Some(to_pairs(&joint)),
                    detail: "even the union of all supports is reducible or periodic".into(),
                };
            }
            ChainVerdict {
                holds: false,
                method: "undetermined".into(),
                witness: None,
                detail: format!("more than {} pure profiles; enumeration skipped", cap),
            }
        }
    }
}

/// Unique invariant probability of an irreducible stochastic matrix.
pub fn invariant_measure(p: &Matrix) -> Result<Vec<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} kernel", n, p.ncols())));
    }
    if !is_irreducible(p) {
        return Err(Error::Reducible("invariant measure is not unique".into()));
    }
    // Solve eta (P - I) = 0 with the last equation replaced by sum(eta) = 1.
    let mut a = p.transpose() - Matrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = Vector::zeros(n);
    b[n - 1] = 1.0;
    let eta = linalg::solve(&a, &b)?;
    let mut eta: Vec<f64> = eta.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = eta.iter().sum();
    eta.iter_mut().for_each(|x| *x /= total);
    Ok(eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityMargin {
    pub t: usize,
    /// `max_k sum_j |P^t[k][j] - eta[j]|`.
    pub distance: f64,
    /// `2 delta^t`.
    pub bound: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformErgodicityCheck {
    pub margins: Vec<ErgodicityMargin>,
    pub passed: bool,
}

/// Compares the distance of `P^t` from its invariant law with `2 delta^t`.
pub fn uniform_ergodicity_check(
    p: &Matrix,
    eta: &[f64],
    delta: f64,
    t_max: usize,
) -> UniformErgodicityCheck {
    let n = p.nrows();
    let mut power = Matrix::identity(n, n);
    let mut margins = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        power = &power * p;
        let distance = (0..n)
            .map(|k| (0..n).map(|j| (power[(k, j)] - eta[j]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let bound = 2.0 * delta.powi(t as i32);
        margins.push(ErgodicityMargin {
            t,
            distance,
            bound,
            slack: bound - distance,
        });
    }
    let passed = margins.iter().all(|m| m.slack >= -1e-9);
    UniformErgodicityCheck { margins, passed }
}

fn target_mask(n: usize, target: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &a in target {
        if a >= n {
            return Err(Error::Dimension(format!("target state {} out of range", a)));
        }
        mask[a] = true;
    }
    if target.is_empty() {
        return Err(Error::Dimension("empty target set".into()));
    }
    Ok(mask)
}

/// Indices outside the target set and the taboo kernel restricted to them.
fn taboo(p: &Matrix, mask: &[bool]) -> (Vec<usize>, Matrix) {
    let outside: Vec<usize> = (0..mask.len()).filter(|&k| !mask[k]).collect();
    let m = outside.len();
    let t = Matrix::from_fn(m, m, |a, b| p[(outside[a], outside[b])]);
    (outside, t)
}

/// Expected first return times `E_k[sigma_A]` for every start state.
pub fn expected_return_time(p: &Matrix, target: &[usize]) -> Result<Vec<f64>> {
    let n = p.nrows();
    let mask = target_mask(n, target)?;
    let (outside, t) = taboo(p, &mask);
    let m = outside.len();
    let a = Matrix::identity(m, m) - &t;
    let tilde = linalg::solve(&a, &Vector::from_element(m, 1.0))?;
    Ok((0..n)
        .map(|k| 1.0 + outside.iter().enumerate().map(|(b, &j)| p[(k, j)] * tilde[b]).sum::<f64>())
        .collect())
}

/// Geometric moments `E_k[R^{sigma_A}]` for every start state.
pub fn geometric_moment(p: &Matrix, rate: f64, target: &[usize]) -> Result<Vec<f64>> {
    let n = p.nrows();
    let mask = target_mask(n, target)?;
    let (outside, t) = taboo(p, &mask);
    let m = outside.len();
    let rho = rate * linalg::spectral_radius(&t);
    if rho >= 1.0 {
        return Err(Error::Divergent { spectral_radius: rho });
    }
    let into_target = |k: usize| -> f64 { (0..n).filter(|&j| mask[j]).map(|j| p[(k, j)]).sum() };
    let a = Matrix::identity(m, m) - &t * rate;
    let rhs = Vector::from_iterator(m, outside.iter().map(|&k| rate * into_target(k)));
    let tilde = linalg::solve(&a, &rhs)?;
    Ok((0..n)
        .map(|k| {
            rate * (into_target(k)
                + outside.iter().enumerate().map(|(b, &j)| p[(k, j)] * tilde[b]).sum::<f64>())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Passage {
    /// `E[R^{sigma_A}]` at the given rate.
    Geometric(f64),
    /// `E[sigma_A]`.
    Time,
}

/// Worst case over pure stationary profiles of a first-passage functional,
/// by policy iteration on the maximizing problem. Returns the values at
/// every state (one-step extension at target states) or `Divergent` as soon
/// as some profile makes the series blow up.
fn max_passage(spec: &GameSpec, mask: &[bool], kind: Passage) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = spec.n_states;
    let nv = spec.n_actions_v;
    let n_joint = spec.n_actions_u * nv;
    let outside: Vec<usize> = (0..n).filter(|&k| !mask[k]).collect();
    let pos: Vec<Option<usize>> = {
        let mut pos = vec![None; n];
        for (b, &k) in outside.iter().enumerate() {
            pos[k] = Some(b);
        }
        pos
    };
    let scale = match kind {
        Passage::Geometric(r) => r,
        Passage::Time => 1.0,
    };
    // Value of taking joint action `a` at state `k` given continuation on the outside set.
    let q_value = |k: usize, a: usize, x: &Vector| -> f64 {
        let row = spec.row(k, a / nv, a % nv);
        let cont: f64 = outside.iter().enumerate().map(|(b, &j)| row[j] * x[b]).sum();
        match kind {
            Passage::Geometric(r) => {
                let hit: f64 = (0..n).filter(|&j| mask[j]).map(|j| row[j]).sum();
                r * (hit + cont)
            }
            Passage::Time => 1.0 + cont,
        }
    };
    let m = outside.len();
    let mut policy = vec![0usize; m];
    for _ in 0..10_000 {
        // Evaluate.
        let mut t = Matrix::zeros(m, m);
        let mut c = Vector::zeros(m);
        for (b, &k) in outside.iter().enumerate() {
            let a = policy[b];
            let row = spec.row(k, a / nv, a % nv);
            for (b2, &j) in outside.iter().enumerate() {
                t[(b, b2)] = scale * row[j];
            }
            c[b] = match kind {
                Passage::Geometric(r) => r * (0..n).filter(|&j| mask[j]).map(|j| row[j]).sum::<f64>(),
                Passage::Time => 1.0,
            };
        }
        let rho = linalg::spectral_radius(&t);
        if rho >= 1.0 {
            return Err(Error::Divergent { spectral_radius: rho });
        }
        let x = linalg::solve(&(Matrix::identity(m, m) - t), &c)?;
        // Improve, keeping the incumbent unless strictly better.
        let mut changed = false;
        for (b, &k) in outside.iter().enumerate() {
            let current = q_value(k, policy[b], &x);
            let (best_a, best) = (0..n_joint)
                .map(|a| (a, q_value(k, a, &x)))
                .fold((policy[b], current), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if best > current * (1.0 + 1e-12) + 1e-15 {
                policy[b] = best_a;
                changed = true;
            }
        }
        if !changed {
            let mut full_policy = vec![0usize; n];
            let values = (0..n)
                .map(|k| match pos[k] {
                    Some(b) => {
                        full_policy[k] = policy[b];
                        x[b]
                    }
                    None => {
                        let (a, v) = (0..n_joint)
                            .map(|a| (a, q_value(k, a, &x)))
                            .fold((0, f64::MIN), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                        full_policy[k] = a;
                        v
                    }
                })
                .collect();
            return Ok((values, full_policy));
        }
    }
    Err(Error::NoConvergence {
        what: "policy iteration",
        iterations: 10_000,
        residual: f64::NAN,
    })
}

/// `sup` over pure profiles of `E_k[R^{sigma_A}]` for every `k`.
pub fn uniform_geometric_moment(spec: &GameSpec, rate: f64, target: &[usize]) -> Result<Vec<f64>> {
    let mask = target_mask(spec.n_states, target)?;
    max_passage(spec, &mask, Passage::Geometric(rate)).map(|(v, _)| v)
}

/// `sup` over pure profiles of `E_k[sigma_A]` for every `k`.
pub fn uniform_return_time(spec: &GameSpec, target: &[usize]) -> Result<Vec<f64>> {
    let mask = target_mask(spec.n_states, target)?;
    max_passage(spec, &mask, Passage::Time).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    /// Relative shrink applied to the bisection estimate of the critical rate.
    pub safety_margin: f64,
    /// Cap on the rate when returns are immediate for every profile.
    pub r_max: f64,
    pub enumeration_cap: usize,
    pub t_max: usize,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        Self {
            safety_margin: 0.01,
            r_max: 1e6,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            t_max: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    /// Critical rate: `E[R^{sigma_0}]` is finite for every profile iff `R < r_star`
    /// (or `r_star == r_max` when no profile ever diverges).
    pub r_star: f64,
    pub r0: f64,
    pub b0: f64,
    pub bisection_steps: usize,
}

/// Largest uniform geometric recurrence rate to `ref_state`, shrunk by the
/// safety margin, and the matching moment bound `B0`.
pub fn max_feasible_r(spec: &GameSpec, ref_state: usize, config: &RecurrenceConfig) -> Result<RateBound> {
    let mask = target_mask(spec.n_states, &[ref_state])?;
    let feasible = |r: f64| max_passage(spec, &mask, Passage::Geometric(r)).is_ok();
    let mut steps = 0;
    let r_star = if feasible(config.r_max) {
        config.r_max
    } else {
        let (mut lo, mut hi) = (1.0f64, config.r_max);
        if !feasible(1.0 + 1e-12) {
            return Err(Error::NoFeasibleRate);
        }
        // Bisect in log space; the bracket spans several decades.
        while hi - lo > 1e-12 * hi && steps < 200 {
            let mid = (lo * hi).sqrt();
            let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
            steps += 1;
        }
        lo
    };
    let shrunk = (1.0 - config.safety_margin) * r_star;
    let r0 = if shrunk > 1.0 {
        shrunk
    } else {
        1.0 + (1.0 - config.safety_margin) * (r_star - 1.0)
    };
    if !(r0 > 1.0) {
        return Err(Error::NoFeasibleRate);
    }
    let (moments, _) = max_passage(spec, &mask, Passage::Geometric(r0))?;
    let b0 = moments.into_iter().fold(0.0, f64::max);
    Ok(RateBound {
        r_star,
        r0,
        b0,
        bisection_steps: steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub v: Vec<f64>,
    pub eta: f64,
    pub b: f64,
    pub c: Vec<usize>,
    /// Largest `lhs - rhs` over all states and action pairs (<= 0 when valid).
    pub worst_violation: f64,
}

/// Drift certificate with `C = {ref_state}`.
pub fn lyapunov_certificate(spec: &GameSpec, r0: f64) -> Result<LyapunovCertificate> {
    lyapunov_certificate_for(spec, r0, &[spec.ref_state])
}

/// Builds `V(k) = sup E_k[R0^{tau_C}]` over pure profiles and checks
/// `sum_j V(j) q(j|i,u,v) <= eta V(i) + b 1_C(i)` for every `(i, u, v)` with
/// `eta = 1/R0` and the smallest admissible `b`.
pub fn lyapunov_certificate_for(spec: &GameSpec, r0: f64, c_set: &[usize]) -> Result<LyapunovCertificate> {
    let n = spec.n_states;
    let mask = target_mask(n, c_set)?;
    let (moments, _) = max_passage(spec, &mask, Passage::Geometric(r0))?;
    // Hitting time is zero on C itself.
    let v: Vec<f64> = (0..n).map(|k| if mask[k] { 1.0 } else { moments[k] }).collect();
    let eta = 1.0 / r0;
    let drift = |k: usize, u: usize, v_: usize| -> f64 {
        spec.row(k, u, v_).iter().zip(&v).map(|(q, x)| q * x).sum()
    };
    let mut b = 0.0f64;
    for k in (0..n).filter(|&k| mask[k]) {
        for (u, va) in spec.joint_actions() {
            b = b.max(drift(k, u, va) - eta * v[k]);
        }
    }
    let mut worst = f64::MIN;
    for k in 0..n {
        for (u, va) in spec.joint_actions() {
            let lhs = drift(k, u, va);
            let rhs = eta * v[k] + if mask[k] { b } else { 0.0 };
            worst = worst.max(lhs - rhs);
            if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::DriftViolated {
                    state: k,
                    u,
                    v: va,
                    lhs,
                    rhs,
                });
            }
        }
    }
    Ok(LyapunovCertificate {
        v,
        eta,
        b,
        c: c_set.to_vec(),
        worst_violation: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceReport {
    pub delta: f64,
    pub a1_holds: bool,
    pub a1: ChainVerdict,
    pub a2_holds: bool,
    pub a3_holds: bool,
    /// `ln(R0) / (3 Theta)`, the largest admissible cost norm.
    pub a3_threshold: Option<f64>,
    /// Threshold minus the larger of the two cost norms.
    pub a3_margin: Option<f64>,
    pub cost_norms: [f64; 2],
    pub r_star: Option<f64>,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    #[serde(rename = "B0")]
    pub b0: Option<f64>,
    #[serde(rename = "L0")]
    pub l0: Option<f64>,
    pub lyapunov: Option<LyapunovCertificate>,
    pub diagnostics: Vec<String>,
}

impl RecurrenceReport {
    pub fn all_hold(&self) -> bool {
        self.a1_holds && self.a2_holds && self.a3_holds
    }
}

/// Runs every check and collects constants and verdicts. Failures of
/// individual constructions end up in `diagnostics` rather than aborting.
pub fn check_assumptions(spec: &GameSpec, config: &RecurrenceConfig) -> Result<RecurrenceReport> {
    spec.validate().into_result()?;
    let delta = dobrushin_delta(spec);
    let a1 = check_irreducible_aperiodic(spec, config.enumeration_cap);
    let a2_holds = delta < 1.0;
    let cost_norms = [spec.cost_norm(Player::One), spec.cost_norm(Player::Two)];
    let mut report = RecurrenceReport {
        delta,
        a1_holds: a1.holds,
        a1,
        a2_holds,
        a3_holds: false,
        a3_threshold: None,
        a3_margin: None,
        cost_norms,
        r_star: None,
        r0: None,
        b0: None,
        l0: None,
        lyapunov: None,
        diagnostics: Vec::new(),
    };
    if !report.a1_holds {
        report.diagnostics.push(format!("(A1) fails: {}", report.a1.detail));
    }
    if !a2_holds {
        report
            .diagnostics
            .push(format!("(A2) fails: Dobrushin coefficient is {}", delta));
    }
    match max_feasible_r(spec, spec.ref_state, config) {
        Ok(rate) => {
            report.r_star = Some(rate.r_star);
            report.r0 = Some(rate.r0);
            report.b0 = Some(rate.b0);
            let threshold = rate.r0.ln() / (3.0 * spec.theta_max);
            let worst = cost_norms[0].max(cost_norms[1]);
            report.a3_threshold = Some(threshold);
            report.a3_margin = Some(threshold - worst);
            report.a3_holds = worst <= threshold;
            if !report.a3_holds {
                report.diagnostics.push(format!(
                    "(A3) fails: cost norm {} exceeds ln(R0)/(3 Theta) = {}",
                    worst, threshold
                ));
            }
            match lyapunov_certificate(spec, rate.r0) {
                Ok(cert) => report.lyapunov = Some(cert),
                Err(e) => report.diagnostics.push(format!("Lyapunov certificate: {}", e)),
            }
        }
        Err(e) => report.diagnostics.push(format!("geometric recurrence: {}", e)),
    }
    match uniform_return_time(spec, &[spec.ref_state]) {
        Ok(times) => report.l0 = Some(times.into_iter().fold(0.0, f64::max)),
        Err(e) => report.diagnostics.push(format!("mean return time: {}", e)),
    }
    Ok(report)
}
