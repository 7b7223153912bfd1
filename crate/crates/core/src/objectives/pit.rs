//! Permutation assignment for PIT losses.
//!
//! Ties are broken towards the lexicographically smallest permutation among
//! those whose total is within [`TIE_TOL`] (relative) of the minimum, for both
//! solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIE_TOL: f64 = 1e-12;
pub const MAX_BRUTE_K: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitMethod {
    Brute,
    Hungarian,
    /// Brute force up to `K = 4`, Hungarian beyond.
    #[default]
    Auto,
}

/// Stream `j` is matched to target `pi[j]`; `loss` is the mean chosen entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pi: Vec<usize>,
    pub loss: f64,
}

/// `K x K` losses, entry `(j, i)` for prediction stream `j` against target `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLossMatrix {
    pub k: usize,
    pub values: Vec<f64>,
}

impl PairLossMatrix {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.len() != k * k {
            return Err(Error::shape("PairLossMatrix", format!("{} values for K={k}", values.len())));
        }
        Ok(Self { k, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("PairLossMatrix", "matrix is not square"));
        }
        Self::new(k, rows.concat())
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.k + i]
    }

    /// Sum of chosen entries, accumulated in stream order.
    pub fn total(&self, pi: &[usize]) -> f64 {
        pi.iter().enumerate().map(|(j, &i)| self.get(j, i)).sum()
    }

    fn check(&self) -> Result<()> {
        if self.values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::invalid("loss matrix has NaN or -inf entries"));
        }
        Ok(())
    }
}

fn within(total: f64, best: f64) -> bool {
    total <= best + TIE_TOL * best.abs().max(1.0)
}

fn finish(m: &PairLossMatrix, pi: Vec<usize>) -> Result<Assignment> {
    let total = m.total(&pi);
    if !total.is_finite() {
        return Err(Error::AllInfeasible);
    }
    Ok(Assignment {
        loss: total / m.k as f64,
        pi,
    })
}

/// In-place next permutation in lexicographic order; false after the last one.
pub fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn brute(m: &PairLossMatrix) -> Result<Assignment> {
    if m.k > MAX_BRUTE_K {
        return Err(Error::invalid(format!("brute-force PIT limited to K <= {MAX_BRUTE_K}, got {}", m.k)));
    }
    let mut perms = Vec::new();
    let mut p: Vec<usize> = (0..m.k).collect();
    loop {
        perms.push((m.total(&p), p.clone()));
        if !next_permutation(&mut p) {
            break;
        }
    }
    let best = perms.iter().map(|(t, _)| *t).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::AllInfeasible);
    }
    let (_, pi) = perms.into_iter().find(|(t, _)| within(*t, best)).expect("minimum exists");
    finish(m, pi)
}

/// Minimum-cost perfect matching on a dense square cost matrix (row `j` to
/// column `a[j]`), shortest augmenting paths with potentials.
fn hungarian_solve(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut a = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            a[p[j] - 1] = j - 1;
        }
    }
    a
}

/// Optimal value of the sub-assignment over the given rows and columns.
fn sub_optimum(cost: &[f64], n: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let r = rows.len();
    if r == 0 {
        return 0.0;
    }
    let mut sub = Vec::with_capacity(r * r);
    for &j in rows {
        for &i in cols {
            sub.push(cost[j * n + i]);
        }
    }
    let a = hungarian_solve(&sub, r);
    a.iter().enumerate().map(|(x, &y)| sub[x * r + y]).sum()
}

fn hungarian(m: &PairLossMatrix) -> Result<Assignment> {
    let k = m.k;
    // Infeasible (+inf) entries become a cost larger than any feasible total.
    let finite_span: f64 = m.values.iter().filter(|v| v.is_finite()).map(|v| v.abs()).sum();
    let big = 2.0 * finite_span + 1.0;
    let cost: Vec<f64> = m.values.iter().map(|&v| if v.is_finite() { v } else { big }).collect();
    let a = hungarian_solve(&cost, k);
    let best: f64 = a.iter().enumerate().map(|(j, &i)| cost[j * k + i]).sum();
    if best >= big {
        return Err(Error::AllInfeasible);
    }

    // Greedy lexicographic repair: smallest column per row that still admits
    // an optimal completion.
    let mut pi = Vec::with_capacity(k);
    let mut used = vec![false; k];
    let mut prefix = 0.0;
    for j in 0..k {
        let rows: Vec<usize> = (j + 1..k).collect();
        let mut chosen = None;
        for i in 0..k {
            if used[i] || !m.get(j, i).is_finite() {
                continue;
            }
            let cols: Vec<usize> = (0..k).filter(|&c| !used[c] && c != i).collect();
            let rest = sub_optimum(&cost, k, &rows, &cols);
            if within(prefix + cost[j * k + i] + rest, best) {
                chosen = Some(i);
                break;
            }
        }
        let i = chosen.unwrap_or(a[j]);
        used[i] = true;
        prefix += cost[j * k + i];
        pi.push(i);
    }
    finish(m, pi)
}

pub fn pit_assign(m: &PairLossMatrix, method: PitMethod) -> Result<Assignment> {
    m.check()?;
    match method {
        PitMethod::Brute => brute(m),
        PitMethod::Hungarian => hungarian(m),
        PitMethod::Auto if m.k <= 4 => brute(m),
        PitMethod::Auto => hungarian(m),
    }
}
