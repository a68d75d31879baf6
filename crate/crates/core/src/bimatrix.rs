//! Support enumeration for two-player bimatrix games where both players
//! minimize their own cost matrix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix, Vector};
use crate::model::MixedAction;
use crate::{Error, Result};

/// Largest support size tried.
pub const SUPPORT_CAP: usize = 8;

/// Relative tolerance for indifference and best-response checks.
pub const EQ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub row: MixedAction,
    pub col: MixedAction,
    /// Expected costs `x'Ay` and `x'By`.
    pub cost_row: f64,
    pub cost_col: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimatrixSolution {
    /// All equilibria found, ordered by the selection rule.
    pub equilibria: Vec<Equilibrium>,
    /// Support pairs whose indifference system was singular.
    pub skipped_supports: usize,
}

impl BimatrixSolution {
    /// Lexicographically smallest support pair, then smallest weights.
    pub fn selected(&self) -> &Equilibrium {
        &self.equilibria[0]
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k == 0 || k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Mixture over `support` of the columns of `m` (or rows if `transpose`)
/// that equalizes the opponent's costs on `other`. Returns the full-length
/// weight vector and the common cost.
fn indifference(
    m: &Matrix,
    own: &[usize],
    other: &[usize],
    transpose: bool,
    len: usize,
) -> Result<(Vec<f64>, f64)> {
    let s = own.len();
    let entry = |i: usize, j: usize| if transpose { m[(j, i)] } else { m[(i, j)] };
    // Unknowns: weights on `own`, then the common value.
    let mut a = Matrix::zeros(s + 1, s + 1);
    let mut b = Vector::zeros(s + 1);
    for (r, &i) in other.iter().enumerate() {
        for (c, &j) in own.iter().enumerate() {
            a[(r, c)] = entry(i, j);
        }
        a[(r, s)] = -1.0;
    }
    for c in 0..s {
        a[(s, c)] = 1.0;
    }
    b[s] = 1.0;
    let sol = linalg::solve(&a, &b)?;
    let mut w = vec![0.0; len];
    for (c, &j) in own.iter().enumerate() {
        w[j] = sol[c];
    }
    Ok((w, sol[s]))
}

fn clean(weights: &mut [f64], tol: f64) -> bool {
    if weights.iter().any(|&w| w < -tol) {
        return false;
    }
    weights.iter_mut().for_each(|w| {
        if *w < tol {
            *w = 0.0
        }
    });
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return false;
    }
    weights.iter_mut().for_each(|w| *w /= total);
    true
}

fn row_costs(a: &Matrix, y: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * y[j]).sum())
        .collect()
}

fn col_costs(b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..b.ncols())
        .map(|j| (0..b.nrows()).map(|i| x[i] * b[(i, j)]).sum())
        .collect()
}

/// Largest amount by which each player could lower their expected cost
/// with a pure deviation.
pub fn regret(a: &Matrix, b: &Matrix, x: &[f64], y: &[f64]) -> (f64, f64) {
    let ry = row_costs(a, y);
    let cx = col_costs(b, x);
    let v1: f64 = x.iter().zip(&ry).map(|(p, c)| p * c).sum();
    let v2: f64 = y.iter().zip(&cx).map(|(p, c)| p * c).sum();
    let m1 = ry.iter().cloned().fold(f64::INFINITY, f64::min);
    let m2 = cx.iter().cloned().fold(f64::INFINITY, f64::min);
    (v1 - m1, v2 - m2)
}

fn cmp_weights(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// All equilibria reachable by equal-size support enumeration, with both
/// players minimizing (`A` for the row player, `B` for the column player).
pub fn bimatrix_nash(a: &Matrix, b: &Matrix) -> Result<BimatrixSolution> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 || b.nrows() != m || b.ncols() != n {
        return Err(Error::Dimension(format!(
            "cost matrices {}x{} and {}x{}",
            m,
            n,
            b.nrows(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidSpec("non-finite stage cost".into()));
    }
    let scale = a.amax().max(b.amax()).max(1e-300);
    let tol = EQ_TOL * scale;
    let mut found: Vec<Equilibrium> = Vec::new();
    let mut skipped = 0;
    for s in 1..=m.min(n).min(SUPPORT_CAP) {
        let rows = combinations(m, s);
        let cols = combinations(n, s);
        for i_set in &rows {
            for j_set in &cols {
                // Column mixture makes the row player indifferent on i_set.
                let (mut y, _) = match indifference(a, j_set, i_set, false, n) {
                    Ok(r) => r,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                let (mut x, _) = match indifference(b, i_set, j_set, true, m) {
                    Ok(r) => r,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                if !clean(&mut x, EQ_TOL) || !clean(&mut y, EQ_TOL) {
                    continue;
                }
                let (g1, g2) = regret(a, b, &x, &y);
                if g1 > tol || g2 > tol {
                    continue;
                }
                let duplicate = found.iter().any(|e| {
                    e.row.weights.iter().zip(&x).all(|(p, q)| (p - q).abs() < 1e-9)
                        && e.col.weights.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-9)
                });
                if duplicate {
                    continue;
                }
                let ry = row_costs(a, &y);
                let cx = col_costs(b, &x);
                found.push(Equilibrium {
                    cost_row: x.iter().zip(&ry).map(|(p, c)| p * c).sum(),
                    cost_col: y.iter().zip(&cx).map(|(p, c)| p * c).sum(),
                    row: MixedAction { weights: x },
                    col: MixedAction { weights: y },
                });
            }
        }
    }
    if found.is_empty() {
        return Err(Error::NoEquilibrium { skipped });
    }
    found.sort_by(|e, f| {
        e.row
            .support()
            .cmp(&f.row.support())
            .then_with(|| e.col.support().cmp(&f.col.support()))
            .then_with(|| cmp_weights(&e.row.weights, &f.row.weights))
            .then_with(|| cmp_weights(&e.col.weights, &f.col.weights))
    });
    Ok(BimatrixSolution {
        equilibria: found,
        skipped_supports: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m2(v: [f64; 4]) -> Matrix {
        Matrix::from_row_slice(2, 2, &v)
    }

    #[test]
    fn combinations_in_lexicographic_order() {
        assert_eq!(
            combinations(4, 2),
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn matching_pennies_is_uniform() {
        // Row player pays 1 on a match, column player pays 1 on a mismatch.
        let a = m2([1.0, 0.0, 0.0, 1.0]);
        let b = m2([0.0, 1.0, 1.0, 0.0]);
        let sol = bimatrix_nash(&a, &b).unwrap();
        assert_eq!(sol.equilibria.len(), 1);
        let e = sol.selected();
        for w in e.row.weights.iter().chain(&e.col.weights) {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_pair_is_unique() {
        // Row 1 and column 0 are strictly cheaper for their owners.
        let a = m2([3.0, 4.0, 1.0, 2.0]);
        let b = m2([1.0, 5.0, 2.0, 3.0]);
        let sol = bimatrix_nash(&a, &b).unwrap();
        assert_eq!(sol.equilibria.len(), 1);
        assert_eq!(sol.selected().row.weights, vec![0.0, 1.0]);
        assert_eq!(sol.selected().col.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn selection_prefers_smallest_support() {
        // Coordination game: two pure equilibria and one mixed.
        let a = m2([0.0, 1.0, 1.0, 0.0]);
        let b = a.clone();
        let sol = bimatrix_nash(&a, &b).unwrap();
        assert_eq!(sol.equilibria.len(), 3);
        assert_eq!(sol.selected().row.weights, vec![1.0, 0.0]);
        assert_eq!(sol.selected().col.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn flat_game_returns_pure_equilibrium() {
        let a = m2([1.0; 4]);
        let sol = bimatrix_nash(&a, &a).unwrap();
        assert!(!sol.equilibria.is_empty());
        assert_eq!(sol.selected().row.weights, vec![1.0, 0.0]);
    }

    /// Scans both mixtures on a 1e-3 grid. Pure equilibria are read off the
    /// vertices; an interior equilibrium sits where each player's cost
    /// difference between their two actions changes sign along the grid.
    fn grid_oracle(a: &Matrix, b: &Matrix) -> Vec<(f64, f64)> {
        let steps = 1000;
        let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        let mut hits = Vec::new();
        for &p in &[0.0, 1.0] {
            for &q in &[0.0, 1.0] {
                let (g1, g2) = regret(a, b, &[p, 1.0 - p], &[q, 1.0 - q]);
                if g1 <= 0.0 && g2 <= 0.0 {
                    hits.push((p, q));
                }
            }
        }
        // Row player's cost of action 0 minus action 1 when the column mix is q.
        let d1 = |q: f64| (a[(0, 0)] - a[(1, 0)]) * q + (a[(0, 1)] - a[(1, 1)]) * (1.0 - q);
        let d2 = |p: f64| (b[(0, 0)] - b[(0, 1)]) * p + (b[(1, 0)] - b[(1, 1)]) * (1.0 - p);
        let crossing = |f: &dyn Fn(f64) -> f64| {
            grid.windows(2)
                .find(|w| f(w[0]) * f(w[1]) < 0.0)
                .map(|w| 0.5 * (w[0] + w[1]))
        };
        if let (Some(q), Some(p)) = (crossing(&d1), crossing(&d2)) {
            hits.push((p, q));
        }
        hits
    }

    #[test]
    fn random_two_by_two_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..10 {
            let a = Matrix::from_fn(2, 2, |_, _| rng.random::<f64>() + 0.5);
            let b = Matrix::from_fn(2, 2, |_, _| rng.random::<f64>() + 0.5);
            let sol = bimatrix_nash(&a, &b).unwrap();
            let mut exact: Vec<(f64, f64)> = sol
                .equilibria
                .iter()
                .map(|e| (e.row.weights[0], e.col.weights[0]))
                .collect();
            let mut grid = grid_oracle(&a, &b);
            assert_eq!(exact.len(), grid.len());
            let key = |x: &(f64, f64), y: &(f64, f64)| x.partial_cmp(y).unwrap();
            exact.sort_by(key);
            grid.sort_by(key);
            for (e, g) in exact.iter().zip(&grid) {
                assert!((e.0 - g.0).abs() <= 1e-3 && (e.1 - g.1).abs() <= 1e-3, "{:?} vs {:?}", e, g);
            }
        }
    }

    #[test]
    fn every_returned_pair_is_an_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (m, n) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let a = Matrix::from_fn(m, n, |_, _| rng.random::<f64>());
            let b = Matrix::from_fn(m, n, |_, _| rng.random::<f64>());
            let sol = bimatrix_nash(&a, &b).unwrap();
            for e in &sol.equilibria {
                let (g1, g2) = regret(&a, &b, &e.row.weights, &e.col.weights);
                assert!(g1 <= 1e-9 && g2 <= 1e-9);
                e.row.check().unwrap();
                e.col.check().unwrap();
            }
        }
    }

    #[test]
    fn positive_scaling_keeps_equilibria() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(3, 3, |_, _| rng.random::<f64>() + 0.1);
        let b = Matrix::from_fn(3, 3, |_, _| rng.random::<f64>() + 0.1);
        let base = bimatrix_nash(&a, &b).unwrap();
        let scaled = bimatrix_nash(&(&a * 1.7), &b).unwrap();
        assert_eq!(base.equilibria.len(), scaled.equilibria.len());
        for (e, f) in base.equilibria.iter().zip(&scaled.equilibria) {
            assert_eq!(e.row.support(), f.row.support());
            assert_eq!(e.col.support(), f.col.support());
        }
    }
}
