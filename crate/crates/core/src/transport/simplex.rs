//! Transportation simplex on a dense cost matrix.
//!
//! The basis is a spanning tree over `n` row nodes and `m` column nodes with
//! exactly `n + m - 1` basic cells, degenerate (zero-flow) cells included.
//! Pricing is Dantzig's rule; after a run of degenerate pivots it switches to
//! the first eligible cell so the method cannot cycle.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct SimplexSolution {
    pub flow: DMatrix<f64>,
    /// Some basic cell carries zero flow.
    pub degenerate: bool,
    /// A non-basic cell with zero reduced cost admits a pivot with positive
    /// step, so another optimal vertex exists.
    pub non_unique: bool,
}

struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    is_basic: Vec<bool>,
}

impl Basis {
    fn basic(&self, i: usize, j: usize) -> bool {
        self.is_basic[i * self.m + j]
    }

    fn set(&mut self, i: usize, j: usize, b: bool) {
        self.is_basic[i * self.m + j] = b;
    }

    /// Node ids: rows are `0..n`, columns are `n..n+m`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.n + j, k));
            adj[self.n + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.n + self.m];
        let mut queue = VecDeque::new();
        pot[0] = 0.0;
        queue.push_back(0);
        while let Some(a) = queue.pop_front() {
            for &(b, k) in &adj[a] {
                if pot[b].is_nan() {
                    let (i, j) = self.cells[k];
                    // u_i + v_j = c_ij
                    pot[b] = cost[(i, j)] - pot[a];
                    queue.push_back(b);
                }
            }
        }
        let (u, v) = pot.split_at(self.n);
        (u.to_vec(), v.to_vec())
    }

    /// Basic cells on the tree path from column node `j` to row node `i`,
    /// in traversal order.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let start = self.n + j;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.n + self.m];
        let mut seen = vec![false; self.n + self.m];
        let mut queue = VecDeque::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(a) = queue.pop_front() {
            if a == i {
                break;
            }
            for &(b, k) in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    prev[b] = Some((a, k));
                    queue.push_back(b);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = i;
        while node != start {
            let (p, k) = prev[node].expect("basis is a spanning tree");
            cells.push(k);
            node = p;
        }
        cells.reverse();
        cells
    }
}

fn northwest_corner(supply: &[f64], demand: &[f64]) -> (Basis, DMatrix<f64>) {
    let (n, m) = (supply.len(), demand.len());
    let mut flow = DMatrix::zeros(n, m);
    let mut basis = Basis { n, m, cells: Vec::with_capacity(n + m - 1), is_basic: vec![false; n * m] };
    let mut ra = supply.to_vec();
    let mut rb = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let last = i == n - 1 && j == m - 1;
        let x = if last { ra[i].max(0.0) } else { ra[i].min(rb[j]).max(0.0) };
        flow[(i, j)] = x;
        basis.cells.push((i, j));
        basis.set(i, j, true);
        if last {
            break;
        }
        ra[i] -= x;
        rb[j] -= x;
        let advance_row = if i == n - 1 {
            false
        } else if j == m - 1 {
            true
        } else {
            ra[i] <= rb[j]
        };
        if advance_row {
            i += 1;
        } else {
            j += 1;
        }
    }
    (basis, flow)
}

/// Cycle of the entering cell `(i, j)`: returns basic cells with their signs
/// (`false` for the cells that lose flow) and the admissible step.
fn cycle(basis: &Basis, flow: &DMatrix<f64>, i: usize, j: usize) -> (Vec<(usize, bool)>, f64, Option<usize>) {
    let path = basis.path(i, j);
    let mut signed = Vec::with_capacity(path.len());
    let mut theta = f64::INFINITY;
    let mut leaving = None;
    for (pos, &k) in path.iter().enumerate() {
        let plus = pos % 2 == 1;
        signed.push((k, plus));
        if !plus {
            let (a, b) = basis.cells[k];
            if flow[(a, b)] < theta {
                theta = flow[(a, b)];
                leaving = Some(k);
            }
        }
    }
    (signed, theta, leaving)
}

pub(crate) fn solve(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> Result<SimplexSolution> {
    let (n, m) = (supply.len(), demand.len());
    if n == 0 || m == 0 || cost.shape() != (n, m) {
        return Err(Error::InvalidArgument("transport problem shape mismatch".into()));
    }
    let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let (mut basis, mut flow) = northwest_corner(supply, demand);

    let max_pivots = 50 * (n + m) * (n + m) + 1000;
    let mut pivots = 0;
    let mut degenerate_run = 0;
    loop {
        let (u, v) = basis.potentials(cost);
        let bland = degenerate_run > n + m;
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for a in 0..n {
            for b in 0..m {
                if basis.basic(a, b) {
                    continue;
                }
                let rc = cost[(a, b)] - u[a] - v[b];
                if rc < -tol && entering.is_none_or(|(_, _, best)| rc < best) {
                    entering = Some((a, b, rc));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej, _)) = entering else {
            break;
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::InvalidArgument("transport simplex failed to terminate".into()));
        }
        let (signed, theta, leaving) = cycle(&basis, &flow, ei, ej);
        let leaving = leaving.expect("cycle contains a donor cell");
        if theta > 0.0 {
            degenerate_run = 0;
        } else {
            degenerate_run += 1;
        }
        flow[(ei, ej)] += theta;
        for &(k, plus) in &signed {
            let (a, b) = basis.cells[k];
            if plus {
                flow[(a, b)] += theta;
            } else {
                flow[(a, b)] = (flow[(a, b)] - theta).max(0.0);
            }
        }
        let (li, lj) = basis.cells[leaving];
        flow[(li, lj)] = 0.0;
        basis.set(li, lj, false);
        basis.set(ei, ej, true);
        basis.cells[leaving] = (ei, ej);
    }

    let (u, v) = basis.potentials(cost);
    let flow_tol = 1e-14;
    let degenerate = basis.cells.iter().any(|&(a, b)| flow[(a, b)] <= flow_tol);
    let mut non_unique = false;
    'outer: for a in 0..n {
        for b in 0..m {
            if basis.basic(a, b) {
                continue;
            }
            let rc = cost[(a, b)] - u[a] - v[b];
            if rc.abs() <= tol.max(1e-12) {
                let (_, theta, _) = cycle(&basis, &flow, a, b);
                if theta > flow_tol {
                    non_unique = true;
                    break 'outer;
                }
            }
        }
    }
    Ok(SimplexSolution { flow, degenerate, non_unique })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn northwest_corner_is_spanning() {
        let (basis, flow) = northwest_corner(&[0.5, 0.5], &[0.25, 0.25, 0.5]);
        assert_eq!(basis.cells.len(), 4);
        assert!((flow.sum() - 1.0).abs() < 1e-15);
        let (u, v) = basis.potentials(&DMatrix::zeros(2, 3));
        assert!(u.iter().chain(&v).all(|p| p.is_finite()));
    }

    #[test]
    fn solves_small_assignment() {
        let cost = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let w = [1.0 / 3.0; 3];
        let sol = solve(&w, &w, &cost).unwrap();
        let total: f64 = sol.flow.component_mul(&cost).sum();
        // optimal assignment 0->1, 1->0, 2->2 costs 1 + 2 + 2
        assert!((total - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn flags_ties() {
        // all permutations cost the same
        let cost = DMatrix::from_element(2, 2, 1.0);
        let sol = solve(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!(sol.non_unique);

        let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let sol = solve(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!(!sol.non_unique);
        assert!(sol.degenerate);
    }
}
