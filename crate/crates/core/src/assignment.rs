//! Batch vehicle/request matching as a linear assignment problem with
//! forbidden arcs.
//!
//! The objective is lexicographic: assign as many requests as possible, then
//! minimize total cost, then pick the smallest pair list `(vehicle, request)`
//! in id order. The first two levels are solved exactly by the Hungarian
//! method on a square matrix padded with "unassigned" arcs: leaving a vehicle
//! idle costs more than the sum of all real costs. The third level walks the
//! equality subgraph of the optimal duals, which contains exactly the optimal
//! matchings.

use std::collections::HashSet;

use thiserror::Error;

use crate::ids::{RequestId, VehicleId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignmentError {
    #[error("problem has neither vehicles nor requests")]
    Empty,
    #[error("cost at ({vehicle}, {request}) must be finite and >= 0")]
    InvalidCost { vehicle: VehicleId, request: RequestId },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(VehicleId),
    #[error("duplicate request id {0}")]
    DuplicateRequest(RequestId),
    #[error("cost matrix shape does not match ids")]
    Shape,
}

/// Vehicles (rows) by requests (columns); `None` marks a forbidden arc.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem<S = f64> {
    vehicles: Vec<VehicleId>,
    requests: Vec<RequestId>,
    costs: Vec<Option<S>>,
}

impl<S: Scalar> AssignmentProblem<S> {
    /// A problem where every arc is forbidden.
    pub fn new(vehicles: Vec<VehicleId>, requests: Vec<RequestId>) -> Result<Self, AssignmentError> {
        if vehicles.is_empty() && requests.is_empty() {
            return Err(AssignmentError::Empty);
        }
        let mut seen = HashSet::new();
        if let Some(&v) = vehicles.iter().find(|v| !seen.insert(**v)) {
            return Err(AssignmentError::DuplicateVehicle(v));
        }
        let mut seen = HashSet::new();
        if let Some(&r) = requests.iter().find(|r| !seen.insert(**r)) {
            return Err(AssignmentError::DuplicateRequest(r));
        }
        let costs = vec![None; vehicles.len() * requests.len()];
        Ok(Self { vehicles, requests, costs })
    }

    pub fn from_matrix(
        vehicles: Vec<VehicleId>,
        requests: Vec<RequestId>,
        matrix: Vec<Vec<Option<S>>>,
    ) -> Result<Self, AssignmentError> {
        if matrix.len() != vehicles.len() || matrix.iter().any(|row| row.len() != requests.len()) {
            return Err(AssignmentError::Shape);
        }
        let mut p = Self::new(vehicles, requests)?;
        for (r, row) in matrix.into_iter().enumerate() {
            for (c, cost) in row.into_iter().enumerate() {
                if let Some(cost) = cost {
                    p.allow(r, c, cost)?;
                }
            }
        }
        Ok(p)
    }

    /// Permits arc `(row, col)` at `cost` seconds.
    pub fn allow(&mut self, row: usize, col: usize, cost: S) -> Result<(), AssignmentError> {
        if !(cost.is_finite() && cost >= S::zero()) {
            return Err(AssignmentError::InvalidCost { vehicle: self.vehicles[row], request: self.requests[col] });
        }
        let n = self.requests.len();
        self.costs[row * n + col] = Some(cost);
        Ok(())
    }

    pub fn vehicles(&self) -> &[VehicleId] {
        &self.vehicles
    }

    pub fn requests(&self) -> &[RequestId] {
        &self.requests
    }

    pub fn cost(&self, row: usize, col: usize) -> Option<S> {
        self.costs[row * self.requests.len() + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution<S = f64> {
    /// Assigned pairs ordered by vehicle id.
    pub pairs: Vec<(VehicleId, RequestId)>,
    pub total_cost: S,
    /// Unassigned requests ordered by request id.
    pub unassigned: Vec<RequestId>,
}

impl<S: Scalar> AssignmentSolution<S> {
    pub fn cardinality(&self) -> usize {
        self.pairs.len()
    }
}

/// Dense Hungarian method (shortest augmenting paths with potentials) over a
/// square matrix; `None` arcs are never used. Returns the row->column
/// assignment and the final row/column potentials. A perfect matching over
/// allowed arcs must exist.
fn hungarian<S: Scalar>(cost: &[Vec<Option<S>>]) -> (Vec<usize>, Vec<S>, Vec<S>) {
    let n = cost.len();
    let inf = S::infinity();
    // 1-based with a virtual column 0, as in the classic formulation
    let mut u = vec![S::zero(); n + 1];
    let mut v = vec![S::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                if let Some(c) = cost[i0 - 1][j - 1] {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            assert!(j1 != 0, "padded assignment matrix always admits a perfect matching");
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrites a perfect matching of the equality subgraph into the one whose
/// first `ordered_rows` rows take the smallest feasible column, in order.
/// `adj[r]` lists the equality columns of row `r` in preference order.
fn lexicographic_matching(adj: &[Vec<usize>], ordered_rows: usize, mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = adj.len();
    let mut col_to_row = vec![0usize; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut fixed_col = vec![false; n];
    for r in 0..ordered_rows {
        for &c in &adj[r] {
            if fixed_col[c] {
                continue;
            }
            if row_to_col[r] == c {
                fixed_col[c] = true;
                break;
            }
            // Re-match c's owner along an alternating path ending at r's column.
            let target = row_to_col[r];
            let start = col_to_row[c];
            let mut prev_col: Vec<Option<usize>> = vec![None; n];
            let mut visited = vec![false; n];
            visited[c] = true;
            let mut queue = std::collections::VecDeque::from([start]);
            let mut found = None;
            'bfs: while let Some(row) = queue.pop_front() {
                for &y in &adj[row] {
                    if fixed_col[y] || visited[y] {
                        continue;
                    }
                    visited[y] = true;
                    prev_col[y] = Some(row_to_col[row]);
                    if y == target {
                        found = Some(y);
                        break 'bfs;
                    }
                    queue.push_back(col_to_row[y]);
                }
            }
            let Some(mut y) = found else { continue };
            // Walk back: the owner of prev_col[y] moves to y.
            loop {
                let from_col = prev_col[y].expect("path columns have predecessors");
                let row = col_to_row[from_col];
                row_to_col[row] = y;
                col_to_row[y] = row;
                if from_col == c {
                    break;
                }
                y = from_col;
            }
            row_to_col[r] = c;
            col_to_row[c] = r;
            fixed_col[c] = true;
            break;
        }
    }
    row_to_col
}

/// Maximum-cardinality, then minimum-cost, then lexicographically smallest
/// matching of vehicles to requests.
pub fn solve<S: Scalar>(problem: &AssignmentProblem<S>) -> AssignmentSolution<S> {
    let mut rows: Vec<usize> = (0..problem.vehicles.len()).collect();
    rows.sort_by_key(|&r| problem.vehicles[r]);
    let mut cols: Vec<usize> = (0..problem.requests.len()).collect();
    cols.sort_by_key(|&c| problem.requests[c]);
    // rows/columns without any allowed arc cannot take part
    rows.retain(|&r| cols.iter().any(|&c| problem.cost(r, c).is_some()));
    cols.retain(|&c| rows.iter().any(|&r| problem.cost(r, c).is_some()));

    let (nr, nc) = (rows.len(), cols.len());
    let n = nr + nc;
    let mut pairs = Vec::new();
    if n > 0 {
        let real_total: S = rows.iter().flat_map(|&r| cols.iter().filter_map(move |&c| problem.cost(r, c))).sum();
        let idle = real_total + S::one();
        let mut matrix = vec![vec![None; n]; n];
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                matrix[i][j] = problem.cost(r, c);
            }
            matrix[i][nc + i] = Some(idle);
        }
        for l in 0..nc {
            matrix[nr + l][l] = Some(S::zero());
            for k in 0..nr {
                matrix[nr + l][nc + k] = Some(S::zero());
            }
        }
        let (row_to_col, u, v) = hungarian(&matrix);

        let eps = idle * S::of(n as f64) * S::epsilon() * S::of(16.0);
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| matrix[i][j].is_some_and(|c| c - u[i] - v[j] <= eps)).collect())
            .collect();
        debug_assert!((0..n).all(|i| adj[i].contains(&row_to_col[i])));
        let row_to_col = lexicographic_matching(&adj, nr, row_to_col);
        for (i, &r) in rows.iter().enumerate() {
            if row_to_col[i] < nc {
                pairs.push((r, cols[row_to_col[i]]));
            }
        }
    }

    let total_cost = pairs.iter().map(|&(r, c)| problem.cost(r, c).expect("matched arcs are allowed")).sum();
    let assigned: HashSet<usize> = pairs.iter().map(|&(_, c)| c).collect();
    let mut unassigned: Vec<RequestId> =
        (0..problem.requests.len()).filter(|c| !assigned.contains(c)).map(|c| problem.requests[c]).collect();
    unassigned.sort();
    AssignmentSolution {
        pairs: pairs.into_iter().map(|(r, c)| (problem.vehicles[r], problem.requests[c])).collect(),
        total_cost,
        unassigned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> (Vec<VehicleId>, Vec<RequestId>) {
        ((0..n as u32).map(VehicleId).collect(), (0..n as u64).map(RequestId).collect())
    }

    #[test]
    fn two_by_two() {
        let (v, r) = ids(2);
        let p =
            AssignmentProblem::from_matrix(v, r, vec![vec![Some(4.0), Some(1.0)], vec![Some(2.0), Some(3.0)]]).unwrap();
        let s = solve(&p);
        assert_eq!(s.pairs, vec![(VehicleId(0), RequestId(1)), (VehicleId(1), RequestId(0))]);
        assert_eq!(s.total_cost, 3.0);
        assert!(s.unassigned.is_empty());
    }

    #[test]
    fn single_forbidden_arc() {
        let (v, r) = ids(1);
        let p = AssignmentProblem::<f64>::from_matrix(v, r, vec![vec![None]]).unwrap();
        let s = solve(&p);
        assert!(s.pairs.is_empty());
        assert_eq!(s.unassigned, vec![RequestId(0)]);
        assert_eq!(s.total_cost, 0.0);
    }

    #[test]
    fn cardinality_beats_cost() {
        // v0 alone would take r0 cheaply, but then r1 stays unserved
        let (v, r) = ids(2);
        let p =
            AssignmentProblem::from_matrix(v, r, vec![vec![Some(1.0), Some(100.0)], vec![Some(1.0), None]]).unwrap();
        let s = solve(&p);
        assert_eq!(s.pairs, vec![(VehicleId(0), RequestId(1)), (VehicleId(1), RequestId(0))]);
        assert_eq!(s.total_cost, 101.0);
    }

    #[test]
    fn ties_go_to_smallest_pairs() {
        let (v, r) = ids(3);
        let p = AssignmentProblem::from_matrix(v, r, vec![vec![Some(5.0); 3]; 3]).unwrap();
        let s = solve(&p);
        assert_eq!(
            s.pairs,
            vec![(VehicleId(0), RequestId(0)), (VehicleId(1), RequestId(1)), (VehicleId(2), RequestId(2))]
        );
        // tie-break follows ids, not positions
        let p = AssignmentProblem::from_matrix(
            vec![VehicleId(9), VehicleId(3)],
            vec![RequestId(8), RequestId(2)],
            vec![vec![Some(1.0), Some(1.0)], vec![Some(1.0), Some(1.0)]],
        )
        .unwrap();
        let s = solve(&p);
        assert_eq!(s.pairs, vec![(VehicleId(3), RequestId(2)), (VehicleId(9), RequestId(8))]);
    }

    #[test]
    fn rectangular_and_unassigned() {
        let p = AssignmentProblem::from_matrix(
            vec![VehicleId(0)],
            vec![RequestId(0), RequestId(1), RequestId(2)],
            vec![vec![Some(3.0), Some(2.0), None]],
        )
        .unwrap();
        let s = solve(&p);
        assert_eq!(s.pairs, vec![(VehicleId(0), RequestId(1))]);
        assert_eq!(s.unassigned, vec![RequestId(0), RequestId(2)]);
    }

    #[test]
    fn rejects_invalid_problems() {
        assert_eq!(AssignmentProblem::<f64>::new(vec![], vec![]).unwrap_err(), AssignmentError::Empty);
        let mut p = AssignmentProblem::<f64>::new(vec![VehicleId(0)], vec![RequestId(0)]).unwrap();
        assert!(p.allow(0, 0, -1.0).is_err());
        assert!(p.allow(0, 0, f64::NAN).is_err());
        assert!(AssignmentProblem::<f64>::new(vec![VehicleId(0), VehicleId(0)], vec![]).is_err());
        assert_eq!(
            AssignmentProblem::<f64>::from_matrix(vec![VehicleId(0)], vec![RequestId(0)], vec![vec![]]).unwrap_err(),
            AssignmentError::Shape
        );
    }

    #[test]
    fn works_in_f32() {
        let (v, r) = ids(2);
        let p =
            AssignmentProblem::<f32>::from_matrix(v, r, vec![vec![Some(4.0), Some(1.0)], vec![Some(2.0), Some(3.0)]])
                .unwrap();
        assert_eq!(solve(&p).total_cost, 3.0f32);
    }
}
