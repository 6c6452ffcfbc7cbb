//! Alternating optimization of the joint objective
//!
//! ```text
//! sum_i L_P(D_i, P_i+, P_i-) + alpha * <C(D_i, P_i+), T_i>
//! ```
//!
//! For every batch the transport plans `T_i` are solved from the current
//! parameters and then held fixed while one Adam step is taken on the sum.
//! The regularizer reaches `U` and `V` through the cosine costs only; the
//! attention network is trained by the predictive loss.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{fuse, FusionMode};
use crate::data::{sample_negatives, Admission};
use crate::error::{Error, Result};
use crate::model::{init_model, predictive_loss, GradBundle, ModelParams};
use crate::scalar::Scalar;
use crate::transport::{cost_matrix, ot_objective, solve_ot, uniform, OtConfig, OtDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub heads: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub fusion: FusionMode,
    pub ot: OtConfig,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Worker threads for per-admission work; 0 lets rayon decide.
    pub threads: usize,
    /// Run every admission sequentially on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            heads: 8,
            alpha: 0.1,
            learning_rate: 0.001,
            batch_size: 300,
            epochs: 25,
            fusion: FusionMode::SelfAttention,
            ot: OtConfig::default(),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            threads: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.dim > 0
            && self.heads > 0
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.adam_eps > 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2);
        if !positive || self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid training configuration: {self:?}"
            )));
        }
        self.ot.validate()
    }
}

/// Adam moment estimates, laid out like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update with dense gradients.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.adam_beta1), T::lit(cfg.adam_beta2));
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.adam_eps);
        let c1 = T::one() - b1.powi(self.step as i32);
        let c2 = T::one() - b2.powi(self.step as i32);
        for (((tensor, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &g), m), v) in tensor.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Gradients of `<C(U_D, V_P), plan>` with the plan held constant.
///
/// With `c = 1 - u'v / (|u| |v|)`:
/// `dc/du = -v / (|u| |v|) + (u'v) u / (|u|^3 |v|)`, and symmetrically for `v`.
/// Pairs whose norm product falls below `epsilon_guard` use the guarded
/// denominator, giving `dc/du = -v / guard`.
pub fn cost_gradients<T: Scalar>(
    rows: ArrayView2<T>,
    cols: ArrayView2<T>,
    plan: ArrayView2<T>,
    epsilon_guard: f64,
) -> Result<(Array2<T>, Array2<T>)> {
    let (n, m) = plan.dim();
    if rows.nrows() != n || cols.nrows() != m || rows.ncols() != cols.ncols() {
        return Err(Error::Shape(format!(
            "plan is {n}x{m}, embeddings are {:?} and {:?}",
            rows.dim(),
            cols.dim()
        )));
    }
    let guard = T::lit(epsilon_guard);
    let row_norms: Vec<T> = rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let col_norms: Vec<T> = cols.rows().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut grad_rows = Array2::zeros(rows.dim());
    let mut grad_cols = Array2::zeros(cols.dim());
    for d in 0..n {
        let u = rows.row(d);
        for p in 0..m {
            let t = plan[[d, p]];
            if t == T::zero() {
                continue;
            }
            let v = cols.row(p);
            let (nu, nv) = (row_norms[d], col_norms[p]);
            let prod = nu * nv;
            if prod > guard {
                let dot = u.dot(&v);
                let inv = T::one() / prod;
                let coef_u = dot / (nu * nu * prod);
                let coef_v = dot / (nv * nv * prod);
                grad_rows.row_mut(d).scaled_add(-t * inv, &v);
                grad_rows.row_mut(d).scaled_add(t * coef_u, &u);
                grad_cols.row_mut(p).scaled_add(-t * inv, &u);
                grad_cols.row_mut(p).scaled_add(t * coef_v, &v);
            } else {
                grad_rows.row_mut(d).scaled_add(-t / guard, &v);
                grad_cols.row_mut(p).scaled_add(-t / guard, &u);
            }
        }
    }
    Ok((grad_rows, grad_cols))
}

/// Transport plan between an admission's diseases (weighted by the fusion
/// distribution) and its positive procedures (uniform).
pub fn admission_plan<T: Scalar>(
    params: &ModelParams<T>,
    admission: &Admission,
    ot: &OtConfig,
) -> Result<(Array2<T>, OtDiagnostics)> {
    let rows = params.disease_rows(&admission.diseases)?;
    let cols = params.procedure_rows(&admission.positives)?;
    let mu = fuse(&params.attention, params.fusion, rows.view())?.mu;
    let costs = cost_matrix(rows.view(), cols.view(), ot.epsilon_guard)?;
    let (plan, diag) = solve_ot(&costs, mu.view(), uniform::<T>(cols.nrows()).view(), ot)?;
    Ok((plan.plan, diag))
}

/// Per-admission terms of the batch objective and their gradient.
#[derive(Debug, Clone)]
pub struct AdmissionObjective<T> {
    pub predictive: T,
    /// `<C, plan>`, zero when no plan is given.
    pub transport: T,
    pub grads: GradBundle<T>,
}

impl<T: Scalar> AdmissionObjective<T> {
    pub fn total(&self, alpha: f64) -> T {
        self.predictive + T::lit(alpha) * self.transport
    }
}

/// `L_P + alpha <C(theta), plan>` and its gradient, with `plan` treated as a constant.
pub fn objective_with_plan<T: Scalar>(
    params: &ModelParams<T>,
    admission: &Admission,
    negatives: &[usize],
    plan: Option<ArrayView2<T>>,
    alpha: f64,
    epsilon_guard: f64,
) -> Result<AdmissionObjective<T>> {
    let (predictive, mut grads) =
        predictive_loss(params, &admission.diseases, &admission.positives, negatives)?;
    let mut transport = T::zero();
    if let Some(plan) = plan {
        let rows = params.disease_rows(&admission.diseases)?;
        let cols = params.procedure_rows(&admission.positives)?;
        let costs = cost_matrix(rows.view(), cols.view(), epsilon_guard)?;
        transport = ot_objective(costs.view(), plan);
        let (gu, gv) = cost_gradients(rows.view(), cols.view(), plan, epsilon_guard)?;
        let a = T::lit(alpha);
        for (&d, g) in admission.diseases.iter().zip(gu.rows()) {
            grads.add_disease(d, g.mapv(|x| x * a).view());
        }
        for (&p, g) in admission.positives.iter().zip(gv.rows()) {
            grads.add_procedure(p, g.mapv(|x| x * a).view());
        }
    }
    Ok(AdmissionObjective {
        predictive,
        transport,
        grads,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub admissions: usize,
    /// Sum of `L_P` over the batch.
    pub predictive_loss: f64,
    /// Sum of `<C, T>` over the batch.
    pub transport: f64,
    pub ot_solves: usize,
    pub ot_unconverged: usize,
    pub ot_outer_iterations: usize,
    pub ot_inner_iterations: usize,
    pub ot_max_violation: f64,
}

struct Outcome<T> {
    objective: AdmissionObjective<T>,
    ot: Option<OtDiagnostics>,
}

fn admission_outcome<T: Scalar>(
    params: &ModelParams<T>,
    admission: &Admission,
    negatives: &[usize],
    cfg: &TrainConfig,
) -> Result<Outcome<T>> {
    let planned = if cfg.alpha > 0.0 {
        Some(admission_plan(params, admission, &cfg.ot)?)
    } else {
        None
    };
    let objective = objective_with_plan(
        params,
        admission,
        negatives,
        planned.as_ref().map(|(p, _)| p.view()),
        cfg.alpha,
        cfg.ot.epsilon_guard,
    )?;
    if !objective.total(cfg.alpha).is_finite() || !objective.grads.is_finite() {
        return Err(Error::NonFinite(format!("loss for admission {}", admission.id)));
    }
    Ok(Outcome {
        objective,
        ot: planned.map(|(_, d)| d),
    })
}

/// One alternation: solve every plan from the current parameters, then take
/// a single Adam step on the batch objective.
pub fn batch_step<T: Scalar, R: Rng>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &[Admission],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchDiagnostics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let procedures = params.procedure_count();
    let negatives = batch
        .iter()
        .map(|a| sample_negatives(a, procedures, rng))
        .collect::<Result<Vec<_>>>()?;

    let snapshot: &ModelParams<T> = params;
    let outcomes: Vec<Outcome<T>> = if cfg.deterministic {
        batch
            .iter()
            .zip(&negatives)
            .map(|(a, neg)| admission_outcome(snapshot, a, neg, cfg))
            .collect::<Result<_>>()?
    } else {
        batch
            .par_iter()
            .zip(negatives.par_iter())
            .map(|(a, neg)| admission_outcome(snapshot, a, neg, cfg))
            .collect::<Result<_>>()?
    };

    // Fixed-order accumulation keeps the update independent of scheduling.
    let mut dense: Vec<Vec<T>> = params
        .tensors()
        .iter()
        .map(|t| vec![T::zero(); t.len()])
        .collect();
    let mut diag = BatchDiagnostics {
        admissions: batch.len(),
        ..Default::default()
    };
    for out in &outcomes {
        out.objective.grads.scatter_into(&mut dense);
        diag.predictive_loss += out.objective.predictive.as_f64();
        diag.transport += out.objective.transport.as_f64();
        if let Some(ot) = &out.ot {
            diag.ot_solves += 1;
            diag.ot_unconverged += usize::from(!ot.converged);
            diag.ot_outer_iterations += ot.outer_iterations;
            diag.ot_inner_iterations += ot.inner_iterations;
            diag.ot_max_violation = diag.ot_max_violation.max(ot.final_violation);
        }
    }
    adam.update(params, &dense, cfg);
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean `L_P` per admission.
    pub mean_predictive_loss: f64,
    /// Mean `<C, T>` per transport solve (0 when the regularizer is off).
    pub mean_transport: f64,
    pub ot_solves: usize,
    pub ot_unconverged: usize,
    pub ot_max_violation: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub total_seconds: f64,
}

/// Trains from a fresh initialization.
pub fn train<T: Scalar>(
    records: &[Admission],
    disease_count: usize,
    procedure_count: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    train_with(records, disease_count, procedure_count, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after each epoch.
pub fn train_with<T: Scalar>(
    records: &[Admission],
    disease_count: usize,
    procedure_count: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(ModelParams<T>, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset("no training admissions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_model(
        cfg.dim,
        disease_count,
        procedure_count,
        cfg.heads,
        cfg.fusion,
        cfg.alpha,
        &mut rng,
    )?;
    let mut adam = AdamState::new(&params);
    let mut report = TrainReport::default();
    let started = Instant::now();

    let pool = if cfg.deterministic {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    };

    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut totals = BatchDiagnostics::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Admission> = chunk.iter().map(|&i| records[i].clone()).collect();
            let diag = match &pool {
                Some(pool) => {
                    pool.install(|| batch_step(&mut params, &mut adam, &batch, cfg, &mut rng))?
                }
                None => batch_step(&mut params, &mut adam, &batch, cfg, &mut rng)?,
            };
            totals.admissions += diag.admissions;
            totals.predictive_loss += diag.predictive_loss;
            totals.transport += diag.transport;
            totals.ot_solves += diag.ot_solves;
            totals.ot_unconverged += diag.ot_unconverged;
            totals.ot_max_violation = totals.ot_max_violation.max(diag.ot_max_violation);
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            mean_predictive_loss: totals.predictive_loss / totals.admissions as f64,
            mean_transport: if totals.ot_solves > 0 {
                totals.transport / totals.ot_solves as f64
            } else {
                0.0
            },
            ot_solves: totals.ot_solves,
            ot_unconverged: totals.ot_unconverged,
            ot_max_violation: totals.ot_max_violation,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if summary.ot_unconverged > 0 {
            log::warn!(
                "epoch {}: {} of {} transport solves hit their iteration limits",
                summary.epoch,
                summary.ot_unconverged,
                summary.ot_solves
            );
        }
        on_epoch(&summary);
        report.epochs.push(summary);
    }
    report.total_seconds = started.elapsed().as_secs_f64();
    Ok((params, report))
}
