//! Game data model: state space, action sets, costs, transition kernel and
//! strategy profiles, plus the strategy-averaged quantities every solver
//! builds on.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Tolerance on row sums of the transition tensor and mixed actions.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    pub fn other(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Player::One => write!(f, "I"),
            Player::Two => write!(f, "II"),
        }
    }
}

fn default_ref_state() -> usize {
    0
}

/// Two-player game on a finite (possibly truncated) state space.
///
/// Tensors are stored densely in the index order used by the JSON format:
/// `r1[k][u][v]`, `r2[k][u][v]` and `q[k][u][v][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub n_states: usize,
    pub n_actions_u: usize,
    pub n_actions_v: usize,
    pub r1: Vec<Vec<Vec<f64>>>,
    pub r2: Vec<Vec<Vec<f64>>>,
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    pub theta: f64,
    pub theta_max: f64,
    pub alpha: f64,
    #[serde(default = "default_ref_state")]
    pub ref_state: usize,
}

/// One violated invariant, with the offending indices where applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub index: Vec<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &str, index: Vec<usize>, message: String) {
        self.violations.push(Violation {
            field: field.to_owned(),
            index,
            message,
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let msgs: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}{:?}: {}", v.field, v.index, v.message))
            .collect();
        Err(Error::InvalidSpec(msgs.join("; ")))
    }
}

impl GameSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: GameSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate().into_result()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::InvalidSpec(format!("{}: {}", path.as_ref().display(), e)))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Checks every structural and numeric invariant, collecting all
    /// violations rather than stopping at the first.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let (n, nu, nv) = (self.n_states, self.n_actions_u, self.n_actions_v);
        if n == 0 {
            report.push("n_states", vec![], "must be positive".into());
        }
        if nu == 0 {
            report.push("n_actions_u", vec![], "must be positive".into());
        }
        if nv == 0 {
            report.push("n_actions_v", vec![], "must be positive".into());
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            report.push("theta", vec![], format!("{} is not > 0", self.theta));
        }
        if !(self.theta_max.is_finite() && self.theta_max >= self.theta) {
            report.push(
                "theta_max",
                vec![],
                format!("{} is not >= theta ({})", self.theta_max, self.theta),
            );
        }
        if !(self.alpha.is_finite() && (0.0..1.0).contains(&self.alpha)) {
            report.push("alpha", vec![], format!("{} is not in [0, 1)", self.alpha));
        }
        if self.ref_state >= n.max(1) {
            report.push(
                "ref_state",
                vec![self.ref_state],
                format!("out of range for {} states", n),
            );
        }
        for (name, r) in [("r1", &self.r1), ("r2", &self.r2)] {
            if r.len() != n {
                report.push(name, vec![], format!("expected {} states, got {}", n, r.len()));
                continue;
            }
            for (k, rk) in r.iter().enumerate() {
                if rk.len() != nu {
                    report.push(name, vec![k], format!("expected {} rows, got {}", nu, rk.len()));
                    continue;
                }
                for (u, row) in rk.iter().enumerate() {
                    if row.len() != nv {
                        report.push(
                            name,
                            vec![k, u],
                            format!("expected {} entries, got {}", nv, row.len()),
                        );
                        continue;
                    }
                    for (v, &c) in row.iter().enumerate() {
                        if !c.is_finite() {
                            report.push(name, vec![k, u, v], format!("non-finite cost {}", c));
                        }
                    }
                }
            }
        }
        if self.q.len() != n {
            report.push("q", vec![], format!("expected {} states, got {}", n, self.q.len()));
            return report;
        }
        for (k, qk) in self.q.iter().enumerate() {
            if qk.len() != nu {
                report.push("q", vec![k], format!("expected {} rows, got {}", nu, qk.len()));
                continue;
            }
            for (u, qku) in qk.iter().enumerate() {
                if qku.len() != nv {
                    report.push("q", vec![k, u], format!("expected {} rows, got {}", nv, qku.len()));
                    continue;
                }
                for (v, row) in qku.iter().enumerate() {
                    if row.len() != n {
                        report.push(
                            "q",
                            vec![k, u, v],
                            format!("expected {} next states, got {}", n, row.len()),
                        );
                        continue;
                    }
                    let mut sum = 0.0;
                    for (j, &p) in row.iter().enumerate() {
                        if !p.is_finite() || p < 0.0 {
                            report.push("q", vec![k, u, v, j], format!("invalid probability {}", p));
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > STOCHASTIC_TOL {
                        report.push("q", vec![k, u, v], format!("row sums to {}", sum));
                    }
                }
            }
        }
        report
    }

    pub fn n_actions(&self, player: Player) -> usize {
        match player {
            Player::One => self.n_actions_u,
            Player::Two => self.n_actions_v,
        }
    }

    pub fn costs(&self, player: Player) -> &Vec<Vec<Vec<f64>>> {
        match player {
            Player::One => &self.r1,
            Player::Two => &self.r2,
        }
    }

    pub fn costs_mut(&mut self, player: Player) -> &mut Vec<Vec<Vec<f64>>> {
        match player {
            Player::One => &mut self.r1,
            Player::Two => &mut self.r2,
        }
    }

    #[inline]
    pub fn cost(&self, player: Player, k: usize, u: usize, v: usize) -> f64 {
        self.costs(player)[k][u][v]
    }

    #[inline]
    pub fn row(&self, k: usize, u: usize, v: usize) -> &[f64] {
        &self.q[k][u][v]
    }

    /// Sup norm of a player's cost.
    pub fn cost_norm(&self, player: Player) -> f64 {
        self.costs(player)
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn max_cost_norm(&self) -> f64 {
        self.cost_norm(Player::One).max(self.cost_norm(Player::Two))
    }

    /// Adds `c` to every entry of a player's cost.
    pub fn shift_cost(&mut self, player: Player, c: f64) {
        for x in self.costs_mut(player).iter_mut().flatten().flatten() {
            *x += c;
        }
    }

    /// Iterates over every joint action pair `(u, v)`.
    pub fn joint_actions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_actions_u).flat_map(move |u| (0..self.n_actions_v).map(move |v| (u, v)))
    }

    pub fn uniform_profile(&self) -> StationaryProfile {
        StationaryProfile {
            mu: vec![MixedAction::uniform(self.n_actions_u); self.n_states],
            nu: vec![MixedAction::uniform(self.n_actions_v); self.n_states],
        }
    }

    /// Game with the same dynamics and a different pair of cost tensors.
    pub fn with_costs(&self, r1: Vec<Vec<Vec<f64>>>, r2: Vec<Vec<Vec<f64>>>) -> Self {
        Self {
            r1,
            r2,
            ..self.clone()
        }
    }
}

/// Probability vector over one player's action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixedAction {
    pub weights: Vec<f64>,
}

impl MixedAction {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let m = Self { weights };
        m.check()?;
        Ok(m)
    }

    pub fn pure(n: usize, action: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[action] = 1.0;
        Self { weights }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidSpec("empty mixed action".into()));
        }
        if let Some((i, w)) = self
            .weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidSpec(format!("weight {} at action {}", w, i)));
        }
        let sum: f64 = self.weights.iter().sum();
        // Sums of n floats carry rounding of order n * eps.
        if (sum - 1.0).abs() > STOCHASTIC_TOL.max(4.0 * f64::EPSILON * self.weights.len() as f64) {
            return Err(Error::InvalidSpec(format!("weights sum to {}", sum)));
        }
        Ok(())
    }

    /// Actions carrying positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(1 - t) * self + t * other`.
    pub fn mix(&self, other: &MixedAction, t: f64) -> MixedAction {
        MixedAction {
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        }
    }
}

/// Time-invariant pair of per-state mixed actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryProfile {
    pub mu: Vec<MixedAction>,
    pub nu: Vec<MixedAction>,
}

impl StationaryProfile {
    pub fn pure(spec: &GameSpec, us: &[usize], vs: &[usize]) -> Self {
        Self {
            mu: us.iter().map(|&u| MixedAction::pure(spec.n_actions_u, u)).collect(),
            nu: vs.iter().map(|&v| MixedAction::pure(spec.n_actions_v, v)).collect(),
        }
    }

    pub fn strategy(&self, player: Player) -> &[MixedAction] {
        match player {
            Player::One => &self.mu,
            Player::Two => &self.nu,
        }
    }

    pub fn strategy_mut(&mut self, player: Player) -> &mut Vec<MixedAction> {
        match player {
            Player::One => &mut self.mu,
            Player::Two => &mut self.nu,
        }
    }

    pub fn check(&self, spec: &GameSpec) -> Result<()> {
        if self.mu.len() != spec.n_states || self.nu.len() != spec.n_states {
            return Err(Error::Dimension(format!(
                "profile covers {}/{} states, game has {}",
                self.mu.len(),
                self.nu.len(),
                spec.n_states
            )));
        }
        for (k, (m, n)) in self.mu.iter().zip(&self.nu).enumerate() {
            if m.len() != spec.n_actions_u || n.len() != spec.n_actions_v {
                return Err(Error::Dimension(format!(
                    "state {}: mixed actions of length {}/{}, game has {}/{}",
                    k,
                    m.len(),
                    n.len(),
                    spec.n_actions_u,
                    spec.n_actions_v
                )));
            }
            m.check()?;
            n.check()?;
        }
        Ok(())
    }

    /// Joint weights `mu(k)(u) * nu(k)(v)` with zero-weight pairs skipped.
    pub fn joint(&self, k: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (m, n) = (&self.mu[k], &self.nu[k]);
        m.weights.iter().enumerate().flat_map(move |(u, &wu)| {
            n.weights
                .iter()
                .enumerate()
                .filter(move |_| wu > 0.0)
                .filter(|(_, &wv)| wv > 0.0)
                .map(move |(v, &wv)| (u, v, wu * wv))
        })
    }

    pub fn max_abs_diff(&self, other: &StationaryProfile) -> f64 {
        self.mu
            .iter()
            .chain(&self.nu)
            .zip(other.mu.iter().chain(&other.nu))
            .flat_map(|(a, b)| a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Time-indexed profile over a finite horizon. Past the horizon the
/// exponential continuation value is taken to be 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovProfile {
    pub stages: Vec<StationaryProfile>,
}

impl MarkovProfile {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn constant(profile: StationaryProfile, horizon: usize) -> Self {
        Self {
            stages: vec![profile; horizon],
        }
    }

    pub fn check(&self, spec: &GameSpec) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Dimension("Markov profile with zero stages".into()));
        }
        self.stages.iter().try_for_each(|s| s.check(spec))
    }
}

/// Strategy-averaged transition matrix `P[k][j] = sum_{u,v} mu nu q(j|k,u,v)`.
pub fn induced_kernel(spec: &GameSpec, profile: &StationaryProfile) -> Result<Matrix> {
    profile.check(spec)?;
    let n = spec.n_states;
    let mut p = Matrix::zeros(n, n);
    for k in 0..n {
        for (u, v, w) in profile.joint(k) {
            for (j, &qj) in spec.row(k, u, v).iter().enumerate() {
                p[(k, j)] += w * qj;
            }
        }
    }
    Ok(p)
}

/// Per-state strategy average of `exp(scale * r_i(k, u, v))`.
pub fn expected_exp_cost(
    spec: &GameSpec,
    profile: &StationaryProfile,
    player: Player,
    scale: f64,
) -> Result<Vec<f64>> {
    profile.check(spec)?;
    if !(scale > 0.0) {
        return Err(Error::InvalidSpec(format!("scale {} is not > 0", scale)));
    }
    Ok((0..spec.n_states)
        .map(|k| {
            profile
                .joint(k)
                .map(|(u, v, w)| w * (scale * spec.cost(player, k, u, v)).exp())
                .sum()
        })
        .collect())
}

/// Cost-weighted kernel `M[k][j] = sum_{u,v} mu nu exp(theta (r_i - shift)) q(j|k,u,v)`.
pub fn weighted_kernel(
    spec: &GameSpec,
    profile: &StationaryProfile,
    player: Player,
    theta: f64,
    shift: f64,
) -> Matrix {
    let n = spec.n_states;
    let mut m = Matrix::zeros(n, n);
    for k in 0..n {
        for (u, v, w) in profile.joint(k) {
            let a = w * (theta * (spec.cost(player, k, u, v) - shift)).exp();
            for (j, &qj) in spec.row(k, u, v).iter().enumerate() {
                m[(k, j)] += a * qj;
            }
        }
    }
    m
}

/// Enumerates pure stationary profiles as per-state joint action indices
/// `u * n_actions_v + v`, odometer style.
#[derive(Debug, Clone)]
pub struct PureProfiles {
    n_joint: usize,
    current: Option<Vec<usize>>,
}

impl PureProfiles {
    pub fn new(spec: &GameSpec) -> Self {
        Self {
            n_joint: spec.n_actions_u * spec.n_actions_v,
            current: Some(vec![0; spec.n_states]),
        }
    }

    /// Total count, or `None` when it overflows `usize`.
    pub fn count(spec: &GameSpec) -> Option<usize> {
        let per = spec.n_actions_u * spec.n_actions_v;
        (0..spec.n_states).try_fold(1usize, |acc, _| acc.checked_mul(per))
    }
}

impl Iterator for PureProfiles {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let mut next = out.clone();
        let mut i = 0;
        loop {
            if i == next.len() {
                self.current = None;
                break;
            }
            next[i] += 1;
            if next[i] < self.n_joint {
                self.current = Some(next);
                break;
            }
            next[i] = 0;
            i += 1;
        }
        Some(out)
    }
}

/// Transition matrix of the pure profile given as joint action indices.
pub fn pure_kernel(spec: &GameSpec, joint: &[usize]) -> Matrix {
    let n = spec.n_states;
    let mut p = Matrix::zeros(n, n);
    for (k, &a) in joint.iter().enumerate() {
        let (u, v) = (a / spec.n_actions_v, a % spec.n_actions_v);
        for (j, &qj) in spec.row(k, u, v).iter().enumerate() {
            p[(k, j)] = qj;
        }
    }
    p
}
