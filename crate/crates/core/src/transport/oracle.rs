//! Exact transport by exhaustive vertex enumeration, for checking the solver
//! on small problems.
//!
//! Every vertex of the transportation polytope is supported on a spanning
//! tree of the complete bipartite graph between rows and columns. The
//! enumeration visits every spanning tree, solves its flow by peeling leaves,
//! and keeps the cheapest nonnegative one.

use ndarray::{Array2, ArrayView1};

use super::{CostMatrix, TransportPlan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_CELLS: usize = 25;
const FEASIBILITY_TOL: f64 = 1e-12;

struct Search<'a> {
    rows: usize,
    cols: usize,
    costs: &'a [f64],
    supply: Vec<f64>,
    best_cost: f64,
    best_tree: Vec<usize>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl Search<'_> {
    fn nodes(&self) -> usize {
        self.rows + self.cols
    }

    fn endpoints(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, self.rows + cell % self.cols)
    }

    fn visit(&mut self, next: usize, tree: &mut Vec<usize>, parent: &[usize]) {
        let need = self.nodes() - 1;
        if tree.len() == need {
            self.evaluate(tree);
            return;
        }
        let cells = self.rows * self.cols;
        if cells - next < need - tree.len() {
            return;
        }
        let (u, v) = self.endpoints(next);
        let mut with = parent.to_vec();
        let (ru, rv) = (find(&mut with, u), find(&mut with, v));
        if ru != rv {
            with[ru] = rv;
            tree.push(next);
            self.visit(next + 1, tree, &with);
            tree.pop();
        }
        self.visit(next + 1, tree, parent);
    }

    fn flows(&self, tree: &[usize]) -> Option<Vec<f64>> {
        let mut remaining = self.supply.clone();
        let mut flow = vec![0.0; tree.len()];
        let mut alive = vec![true; tree.len()];
        let mut degree = vec![0usize; self.nodes()];
        for &cell in tree {
            let (u, v) = self.endpoints(cell);
            degree[u] += 1;
            degree[v] += 1;
        }
        for _ in 0..tree.len() {
            let (e, leaf) = tree.iter().enumerate().find_map(|(e, &cell)| {
                if !alive[e] {
                    return None;
                }
                let (u, v) = self.endpoints(cell);
                if degree[u] == 1 {
                    Some((e, u))
                } else if degree[v] == 1 {
                    Some((e, v))
                } else {
                    None
                }
            })?;
            let (u, v) = self.endpoints(tree[e]);
            let other = if leaf == u { v } else { u };
            flow[e] = remaining[leaf];
            if flow[e] < -FEASIBILITY_TOL {
                return None;
            }
            remaining[other] -= flow[e];
            remaining[leaf] = 0.0;
            alive[e] = false;
            degree[u] -= 1;
            degree[v] -= 1;
        }
        Some(flow)
    }

    fn evaluate(&mut self, tree: &[usize]) {
        let Some(flow) = self.flows(tree) else {
            return;
        };
        let cost: f64 = tree
            .iter()
            .zip(&flow)
            .map(|(&cell, &f)| self.costs[cell] * f)
            .sum();
        if cost < self.best_cost {
            self.best_cost = cost;
            self.best_tree = tree.to_vec();
        }
    }
}

/// Exact minimum of `<C, T>` over the transport polytope, with an optimal vertex.
///
/// Limited to `rows * cols <= 25`. Marginals must have equal mass.
pub fn brute_force_ot<T: Scalar>(
    costs: &CostMatrix<T>,
    mu_row: ArrayView1<T>,
    mu_col: ArrayView1<T>,
) -> Result<(f64, TransportPlan<T>)> {
    let (rows, cols) = costs.dim();
    if rows * cols > MAX_CELLS {
        return Err(Error::TooLarge { rows, cols });
    }
    if mu_row.len() != rows || mu_col.len() != cols {
        return Err(Error::Shape("marginals do not match the cost matrix".into()));
    }
    let flat: Vec<f64> = costs.view().iter().map(|c| c.as_f64()).collect();
    let supply: Vec<f64> = mu_row
        .iter()
        .chain(mu_col.iter())
        .map(|x| x.as_f64())
        .collect();
    let mut search = Search {
        rows,
        cols,
        costs: &flat,
        supply,
        best_cost: f64::INFINITY,
        best_tree: Vec::new(),
    };
    let parent: Vec<usize> = (0..rows + cols).collect();
    search.visit(0, &mut Vec::with_capacity(rows + cols), &parent);
    if !search.best_cost.is_finite() {
        return Err(Error::InvalidArgument(
            "no feasible vertex: marginals must be nonnegative with equal mass".into(),
        ));
    }
    let flow = search.flows(&search.best_tree).expect("best tree is feasible");
    let mut plan = Array2::zeros((rows, cols));
    for (&cell, &f) in search.best_tree.iter().zip(&flow) {
        plan[[cell / cols, cell % cols]] = T::lit(f.max(0.0));
    }
    Ok((
        search.best_cost,
        TransportPlan {
            plan,
            row_marginal: mu_row.to_owned(),
            col_marginal: mu_col.to_owned(),
        },
    ))
}
