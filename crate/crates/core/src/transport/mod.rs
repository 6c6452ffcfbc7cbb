//! Discrete optimal transport between an admission's diseases and procedures.
//!
//! The solver is an inexact proximal point method: each outer step solves
//!
//! ```text
//! T(j) = argmin_{T in Pi(mu, nu)} <C, T> + beta * KL(T || T(j-1))
//! ```
//!
//! which is an entropic problem with kernel `exp(-C/beta) * T(j-1)` and is
//! handled by Sinkhorn scaling warm-started from the previous row scaling.
//! Repeating the step drives the plan toward an exact minimizer of `<C, T>`.

pub mod oracle;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine distance matrix; entries lie in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T>(Array2<T>);

impl<T: Scalar> CostMatrix<T> {
    pub fn new(costs: Array2<T>) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::Shape("cost matrix is empty".into()));
        }
        if costs
            .iter()
            .any(|c| !c.is_finite() || *c < T::zero() || *c > T::lit(2.0))
        {
            return Err(Error::InvalidArgument(
                "cost entries must be finite and within [0, 2]".into(),
            ));
        }
        Ok(Self(costs))
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

/// Cosine distance `1 - u'v / max(|u| |v|, guard)` between every row of
/// `rows` and every row of `cols`, clamped to `[0, 2]`.
pub fn cost_matrix<T: Scalar>(
    rows: ArrayView2<T>,
    cols: ArrayView2<T>,
    epsilon_guard: f64,
) -> Result<CostMatrix<T>> {
    if rows.nrows() == 0 || cols.nrows() == 0 {
        return Err(Error::Shape("cost matrix needs at least one row and column".into()));
    }
    if rows.ncols() != cols.ncols() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            rows.ncols(),
            cols.ncols()
        )));
    }
    let guard = T::lit(epsilon_guard);
    let row_norms: Vec<T> = rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let col_norms: Vec<T> = cols.rows().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let dots = rows.dot(&cols.t());
    let two = T::lit(2.0);
    let costs = Array2::from_shape_fn(dots.dim(), |(d, p)| {
        let denom = (row_norms[d] * col_norms[p]).max(guard);
        (T::one() - dots[[d, p]] / denom).max(T::zero()).min(two)
    });
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(CostMatrix(costs))
}

/// `<C, T>`.
pub fn ot_objective<T: Scalar>(costs: ArrayView2<T>, plan: ArrayView2<T>) -> T {
    Zip::from(&costs)
        .and(&plan)
        .fold(T::zero(), |acc, &c, &t| acc + c * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    /// Proximal (KL) weight.
    pub beta: f64,
    pub outer_max: usize,
    pub inner_max: usize,
    /// Max-norm marginal violation at which Sinkhorn stops.
    pub inner_tol: f64,
    /// Max-norm plan change at which the proximal loop stops.
    pub outer_tol: f64,
    pub epsilon_guard: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            outer_max: 200,
            inner_max: 1000,
            inner_tol: 1e-9,
            outer_tol: 1e-6,
            epsilon_guard: 1e-16,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.outer_max > 0
            && self.inner_max > 0
            && self.inner_tol > 0.0
            && self.outer_tol > 0.0
            && self.epsilon_guard > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "optimal transport settings must all be positive: {self:?}"
            )))
        }
    }
}

/// A coupling together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Array2<T>,
    pub row_marginal: Array1<T>,
    pub col_marginal: Array1<T>,
}

impl<T: Scalar> TransportPlan<T> {
    /// Largest absolute deviation of the plan's row or column sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(self.plan.view(), self.row_marginal.view(), self.col_marginal.view())
    }
}

pub fn marginal_violation<T: Scalar>(
    plan: ArrayView2<T>,
    row_marginal: ArrayView1<T>,
    col_marginal: ArrayView1<T>,
) -> f64 {
    let rows = plan
        .rows()
        .into_iter()
        .zip(row_marginal)
        .map(|(r, &m)| (r.sum() - m).abs().as_f64());
    let cols = plan
        .columns()
        .into_iter()
        .zip(col_marginal)
        .map(|(c, &m)| (c.sum() - m).abs().as_f64());
    rows.chain(cols).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OtDiagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Marginal violation left by the last Sinkhorn solve, before the
    /// returned plan is rounded onto the marginals.
    pub final_violation: f64,
    /// Max-norm change of the plan in the last outer step.
    pub final_change: f64,
    pub converged: bool,
    /// `<C, T(j)>` for `j = 0..=outer_iterations`, starting from the product plan.
    pub objective_trace: Vec<f64>,
}

/// Sinkhorn scalings: the plan is `diag(a) K diag(b)`.
#[derive(Debug, Clone)]
pub struct Scaling<T> {
    pub a: Array1<T>,
    pub b: Array1<T>,
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
}

impl<T: Scalar> Scaling<T> {
    pub fn plan(&self, kernel: ArrayView2<T>) -> Array2<T> {
        Array2::from_shape_fn(kernel.dim(), |(i, j)| self.a[i] * kernel[[i, j]] * self.b[j])
    }
}

/// Alternating Sinkhorn-Knopp scaling of a positive kernel, starting from `a = 1`.
pub fn sinkhorn<T: Scalar>(
    kernel: ArrayView2<T>,
    mu_row: ArrayView1<T>,
    mu_col: ArrayView1<T>,
    inner_max: usize,
    inner_tol: f64,
) -> Result<Scaling<T>> {
    let start = Array1::ones(kernel.nrows());
    sinkhorn_from(kernel, mu_row, mu_col, start, inner_max, inner_tol, 1e-300)
}

/// Sinkhorn warm-started at the row scaling `a`. Each sweep sets
/// `b = mu_col / K'a` then `a = mu_row / K b`, so row marginals are exact after
/// every sweep and the stopping test is on the column marginals.
pub fn sinkhorn_from<T: Scalar>(
    kernel: ArrayView2<T>,
    mu_row: ArrayView1<T>,
    mu_col: ArrayView1<T>,
    a: Array1<T>,
    inner_max: usize,
    inner_tol: f64,
    guard: f64,
) -> Result<Scaling<T>> {
    let (n, m) = kernel.dim();
    if mu_row.len() != n || mu_col.len() != m || a.len() != n {
        return Err(Error::Shape(format!(
            "kernel is {n}x{m} but marginals have lengths {} and {}",
            mu_row.len(),
            mu_col.len()
        )));
    }
    let guard = T::lit(guard);
    let kernel = kernel.as_standard_layout();
    let ks = kernel.as_slice().expect("standard layout");
    let (mu_r, mu_c) = (mu_row.to_vec(), mu_col.to_vec());
    let mut a = a.to_vec();
    let mut b = vec![T::one(); m];
    let mut kt_a = vec![T::zero(); m];
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    loop {
        kt_a.fill(T::zero());
        for (row, &ai) in ks.chunks_exact(m).zip(&a) {
            for (acc, &k) in kt_a.iter_mut().zip(row) {
                *acc += k * ai;
            }
        }
        if iterations > 0 {
            violation = b
                .iter()
                .zip(&kt_a)
                .zip(&mu_c)
                .fold(0.0_f64, |v, ((&bj, &s), &nu)| v.max((bj * s - nu).abs().as_f64()));
            if violation <= inner_tol {
                converged = true;
                break;
            }
        }
        if iterations == inner_max {
            break;
        }
        iterations += 1;
        let mut finite = true;
        for ((bj, &s), &nu) in b.iter_mut().zip(&kt_a).zip(&mu_c) {
            *bj = nu / s.max(guard);
            finite &= bj.is_finite();
        }
        for ((ai, row), &mu) in a.iter_mut().zip(ks.chunks_exact(m)).zip(&mu_r) {
            let s = row.iter().zip(&b).fold(T::zero(), |acc, (&k, &bj)| acc + k * bj);
            *ai = mu / s.max(guard);
            finite &= ai.is_finite();
        }
        if !finite {
            return Err(Error::SinkhornDiverged { iteration: iterations });
        }
    }
    let (a, b) = (Array1::from(a), Array1::from(b));
    Ok(Scaling {
        a,
        b,
        iterations,
        violation,
        converged,
    })
}

/// Proximal point optimal transport. Returns the plan and solver diagnostics.
pub fn solve_ot<T: Scalar>(
    costs: &CostMatrix<T>,
    mu_row: ArrayView1<T>,
    mu_col: ArrayView1<T>,
    cfg: &OtConfig,
) -> Result<(TransportPlan<T>, OtDiagnostics)> {
    cfg.validate()?;
    let c = costs.view();
    let (n, m) = c.dim();
    if mu_row.len() != n || mu_col.len() != m {
        return Err(Error::Shape(format!(
            "cost matrix is {n}x{m} but marginals have lengths {} and {}",
            mu_row.len(),
            mu_col.len()
        )));
    }
    let beta = T::lit(cfg.beta);
    let guard = T::lit(cfg.epsilon_guard);
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    // A tolerance below a few ulps cannot be met and would only burn the inner budget.
    let inner_tol = cfg.inner_tol.max(8.0 * T::epsilon().as_f64());
    let gibbs = c.mapv(|x| (-x / beta).exp());

    let mut plan = Array2::from_shape_fn((n, m), |(i, j)| mu_row[i] * mu_col[j]);
    let mut a = Array1::ones(n);
    let mut diag = OtDiagnostics {
        objective_trace: vec![ot_objective(c, plan.view()).as_f64()],
        ..Default::default()
    };
    let mut inner_ok = true;

    for _ in 0..cfg.outer_max {
        let kernel = Zip::from(&gibbs).and(&plan).map_collect(|&g, &t| {
            let t = if t < tiny { guard } else { t };
            (g * t).max(guard)
        });
        let scaling =
            sinkhorn_from(kernel.view(), mu_row, mu_col, a, cfg.inner_max, inner_tol, cfg.epsilon_guard)?;
        let next = scaling.plan(kernel.view());
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("transport plan".into()));
        }
        let change = Zip::from(&next)
            .and(&plan)
            .fold(0.0_f64, |v, &x, &y| v.max((x - y).abs().as_f64()));
        inner_ok &= scaling.converged;
        diag.outer_iterations += 1;
        diag.inner_iterations += scaling.iterations;
        diag.final_change = change;
        diag.objective_trace.push(ot_objective(c, next.view()).as_f64());
        a = scaling.a;
        plan = next;
        if change <= cfg.outer_tol {
            diag.converged = true;
            break;
        }
    }
    diag.converged &= inner_ok;
    diag.final_violation = marginal_violation(plan.view(), mu_row, mu_col);
    round_to_marginals(&mut plan, mu_row, mu_col);
    let result = TransportPlan {
        plan,
        row_marginal: mu_row.to_owned(),
        col_marginal: mu_col.to_owned(),
    };
    Ok((result, diag))
}

/// Moves a nearly feasible plan onto the exact marginals: shrink rows that are
/// too heavy, then columns, then spread the remaining deficits as a rank-one
/// correction. Entries stay nonnegative and the plan moves by at most the
/// total violation in L1.
pub fn round_to_marginals<T: Scalar>(plan: &mut Array2<T>, mu_row: ArrayView1<T>, mu_col: ArrayView1<T>) {
    for (mut row, &target) in plan.rows_mut().into_iter().zip(mu_row.iter()) {
        let sum = row.sum();
        if sum > target {
            row.mapv_inplace(|x| x * (target / sum));
        }
    }
    for (mut col, &target) in plan.columns_mut().into_iter().zip(mu_col.iter()) {
        let sum = col.sum();
        if sum > target {
            col.mapv_inplace(|x| x * (target / sum));
        }
    }
    let row_deficit: Array1<T> = &mu_row - &plan.sum_axis(Axis(1));
    let col_deficit: Array1<T> = &mu_col - &plan.sum_axis(Axis(0));
    let mass = col_deficit.sum();
    if mass > T::zero() {
        Zip::indexed(plan).for_each(|(i, j), t| {
            *t += (row_deficit[i].max(T::zero()) * col_deficit[j].max(T::zero())) / mass;
        });
    }
}

pub fn uniform<T: Scalar>(n: usize) -> Array1<T> {
    Array1::from_elem(n, T::one() / T::lit(n as f64))
}
