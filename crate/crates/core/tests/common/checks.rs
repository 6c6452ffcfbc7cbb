//! Measurement routines shared by the integration tests and the acceptance run.
//! Each returns what it measured; callers decide how to assert or report.
#![allow(dead_code)]

use std::time::Instant;

use icdot::data::{sample_negatives, split_train_test};
use icdot::eval::admission_metrics;
use icdot::scalar::is_simplex;
use icdot::trainer::{admission_plan, objective_with_plan};
use icdot::transport::oracle::brute_force_ot;
use icdot::{
    evaluate, fuse, fuse_backward, head_weights, init_model, ot_objective, predictive_loss, solve_ot, train,
    Admission, AttentionParams, CostMatrix, FusionMode, ModelParams, OtConfig, TrainConfig,
};
use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn simplex(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let w = Array1::from_shape_simple_fn(n, || rng.gen_range(0.01..1.0));
    let s = w.sum();
    w / s
}

pub fn random_costs(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CostMatrix<f64> {
    CostMatrix::new(Array2::from_shape_simple_fn((n, m), || rng.gen_range(0.0..2.0))).unwrap()
}

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSummary {
    pub instances: usize,
    pub max_gap: f64,
    pub max_violation: f64,
    pub seconds: f64,
}

/// Solver objective against the exhaustive vertex search, n, m <= 5.
pub fn ot_oracle(instances: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let (mut max_gap, mut max_violation) = (0.0_f64, 0.0_f64);
    for _ in 0..instances {
        let (n, m) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let c = random_costs(n, m, &mut rng);
        let (mu, nu) = (simplex(n, &mut rng), simplex(m, &mut rng));
        let (plan, _) = solve_ot(&c, mu.view(), nu.view(), &OtConfig::default()).unwrap();
        let (best, _) = brute_force_ot(&c, mu.view(), nu.view()).unwrap();
        max_gap = max_gap.max((ot_objective(c.view(), plan.plan.view()) - best).abs());
        max_violation = max_violation.max(plan.marginal_violation());
    }
    OracleSummary {
        instances,
        max_gap,
        max_violation,
        seconds: elapsed(start),
    }
}

/// Largest increase of `<C, T>` between consecutive proximal steps, n, m <= 10.
pub fn proximal_max_rise(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let (n, m) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let c = random_costs(n, m, &mut rng);
        let (mu, nu) = (simplex(n, &mut rng), simplex(m, &mut rng));
        let (_, diag) = solve_ot(&c, mu.view(), nu.view(), &OtConfig::default()).unwrap();
        for w in diag.objective_trace.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
    }
    worst
}

/// `max |analytic - numeric| / max |numeric|`, absolute when the gradient is ~0.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

const STEP: f64 = 1e-5;

/// Central differences over every entry of every model tensor.
fn numeric_model_grad(params: &ModelParams<f64>, f: impl Fn(&ModelParams<f64>) -> f64) -> Vec<Vec<f64>> {
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    lens.iter()
        .enumerate()
        .map(|(t, &len)| {
            (0..len)
                .map(|i| {
                    let mut plus = params.clone();
                    plus.tensors_mut()[t][i] += STEP;
                    let mut minus = params.clone();
                    minus.tensors_mut()[t][i] -= STEP;
                    (f(&plus) - f(&minus)) / (2.0 * STEP)
                })
                .collect()
        })
        .collect()
}

fn max_tensor_err(params: &ModelParams<f64>, analytic: &icdot::GradBundle<f64>, numeric: &[Vec<f64>]) -> f64 {
    let mut dense: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    analytic.scatter_into(&mut dense);
    dense
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradientSummary {
    pub instances: usize,
    pub fuse: f64,
    pub predictive: f64,
    pub objective: f64,
    pub seconds: f64,
}

impl GradientSummary {
    pub fn worst(&self) -> f64 {
        self.fuse.max(self.predictive).max(self.objective)
    }
}

struct TinyInstance {
    params: ModelParams<f64>,
    admission: Admission,
    negatives: Vec<usize>,
    alpha: f64,
}

/// M <= 4, K <= 3, at most 4 diseases per admission.
fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=4);
    let heads = rng.gen_range(1..=3);
    let (nd, np) = (6, 6);
    let alpha = rng.gen_range(0.05..1.0);
    let params = init_model(dim, nd, np, heads, FusionMode::SelfAttention, alpha, &mut rng).unwrap();
    let count = rng.gen_range(1..=4);
    let mut diseases = sample(&mut rng, nd, count).into_vec();
    diseases.sort_unstable();
    let count = rng.gen_range(1..=3);
    let mut positives = sample(&mut rng, np, count).into_vec();
    positives.sort_unstable();
    let admission = Admission {
        id: format!("g{seed}"),
        diseases,
        positives,
    };
    let negatives = sample_negatives(&admission, np, &mut rng).unwrap();
    TinyInstance {
        params,
        admission,
        negatives,
        alpha,
    }
}

/// Finite-difference checks of the fusion, the predictive loss and the full
/// per-admission objective with its transport plan held fixed.
pub fn gradient_suite(instances: usize, seed: u64) -> GradientSummary {
    let start = Instant::now();
    let mut out = GradientSummary {
        instances,
        ..Default::default()
    };
    for i in 0..instances as u64 {
        let inst = tiny_instance(seed + i);
        let p = &inst.params;
        let adm = &inst.admission;

        // Fusion: a random linear functional of (fused, mu).
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i + 1_000_000);
        let x = p.disease_rows(&adm.diseases).unwrap();
        let gf = Array1::from_shape_simple_fn(p.dim(), || rng.gen_range(-1.0..1.0));
        let gm = Array1::from_shape_simple_fn(x.nrows(), || rng.gen_range(-1.0..1.0));
        let probe = |a: &AttentionParams<f64>, x: &Array2<f64>| {
            let f = fuse(a, FusionMode::SelfAttention, x.view()).unwrap();
            f.fused.dot(&gf) + f.mu.dot(&gm)
        };
        let (ga, gx) = fuse_backward(&p.attention, FusionMode::SelfAttention, x.view(), gf.view(), gm.view()).unwrap();
        for t in 0..4 {
            let numeric: Vec<f64> = (0..p.attention.tensors()[t].len())
                .map(|j| {
                    let mut plus = p.attention.clone();
                    plus.tensors_mut()[t][j] += STEP;
                    let mut minus = p.attention.clone();
                    minus.tensors_mut()[t][j] -= STEP;
                    (probe(&plus, &x) - probe(&minus, &x)) / (2.0 * STEP)
                })
                .collect();
            out.fuse = out.fuse.max(rel_err(ga.tensors()[t], &numeric));
        }
        let mut numeric = Array2::zeros(x.dim());
        for ((r, c), v) in numeric.indexed_iter_mut() {
            let mut plus = x.clone();
            plus[[r, c]] += STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= STEP;
            *v = (probe(&p.attention, &plus) - probe(&p.attention, &minus)) / (2.0 * STEP);
        }
        out.fuse = out.fuse.max(rel_err(gx.as_slice().unwrap(), numeric.as_slice().unwrap()));

        let (_, grads) = predictive_loss(p, &adm.diseases, &adm.positives, &inst.negatives).unwrap();
        let numeric = numeric_model_grad(p, |q| {
            predictive_loss(q, &adm.diseases, &adm.positives, &inst.negatives).unwrap().0
        });
        out.predictive = out.predictive.max(max_tensor_err(p, &grads, &numeric));

        let ot = OtConfig::default();
        let (plan, _) = admission_plan(p, adm, &ot).unwrap();
        let objective = |q: &ModelParams<f64>| {
            objective_with_plan(q, adm, &inst.negatives, Some(plan.view()), inst.alpha, ot.epsilon_guard)
                .unwrap()
                .total(inst.alpha)
        };
        let analytic =
            objective_with_plan(p, adm, &inst.negatives, Some(plan.view()), inst.alpha, ot.epsilon_guard).unwrap();
        let numeric = numeric_model_grad(p, objective);
        out.objective = out.objective.max(max_tensor_err(p, &analytic.grads, &numeric));
    }
    out.seconds = elapsed(start);
    out
}

/// 20 diseases, 10 procedures, disease `d` requires procedure `d % 10`;
/// each admission draws 3 distinct diseases.
pub fn planted_dataset(admissions: usize, seed: u64) -> Vec<Admission> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..admissions)
        .map(|i| {
            let mut diseases = sample(&mut rng, 20, 3).into_vec();
            diseases.sort_unstable();
            let mut positives: Vec<usize> = diseases.iter().map(|d| d % 10).collect();
            positives.sort_unstable();
            positives.dedup();
            Admission {
                id: format!("a{i}"),
                diseases,
                positives,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PlantedSummary {
    /// Top-3 recall on the held-out fifth, in percent.
    pub recall_at_3: f64,
    pub seconds: f64,
}

pub fn planted_config() -> TrainConfig {
    TrainConfig {
        dim: 32,
        heads: 4,
        alpha: 0.1,
        epochs: 10,
        learning_rate: 0.01,
        batch_size: 32,
        seed: 11,
        ..TrainConfig::default()
    }
}

pub fn planted_learning(cfg: &TrainConfig) -> PlantedSummary {
    let start = Instant::now();
    let data = planted_dataset(2000, 5);
    let (train_set, test_set) = split_train_test(&data, 0.2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (params, _) = train::<f64>(&train_set, 20, 10, cfg).unwrap();
    let report = evaluate(&params, &test_set, &[3]).unwrap();
    PlantedSummary {
        recall_at_3: report.rows[0].recall,
        seconds: elapsed(start),
    }
}

/// 5 severe diseases, each tied to two procedures, plus 25 incidental ones.
/// Every admission has one severe and three incidental diseases; its third
/// procedure is drawn from 10 unrelated ones.
pub fn severity_dataset(admissions: usize, seed: u64) -> Vec<Admission> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..admissions)
        .map(|i| {
            let severe = rng.gen_range(0..5);
            let mut diseases: Vec<usize> = sample(&mut rng, 25, 3).into_iter().map(|d| d + 5).collect();
            diseases.push(severe);
            diseases.sort_unstable();
            let mut positives = vec![2 * severe, 2 * severe + 1, 10 + rng.gen_range(0..10)];
            positives.sort_unstable();
            Admission {
                id: format!("s{i}"),
                diseases,
                positives,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AblationRun {
    pub seed: u64,
    /// F1@3 in percent.
    pub full: f64,
    pub pooling: f64,
}

/// F1@3 of self-attention with the transport term against max pooling without it.
pub fn ablation(seeds: &[u64]) -> Vec<AblationRun> {
    let data = severity_dataset(1500, 21);
    let (train_set, test_set) = split_train_test(&data, 0.2, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let base = TrainConfig {
        dim: 16,
        heads: 2,
        epochs: 8,
        learning_rate: 0.01,
        batch_size: 32,
        ..TrainConfig::default()
    };
    seeds
        .iter()
        .map(|&seed| {
            let run = |fusion, alpha| {
                let cfg = TrainConfig {
                    fusion,
                    alpha,
                    seed,
                    ..base.clone()
                };
                let (params, _) = train::<f64>(&train_set, 30, 20, &cfg).unwrap();
                evaluate(&params, &test_set, &[3]).unwrap().rows[0].f1
            };
            AblationRun {
                seed,
                full: run(FusionMode::SelfAttention, 0.1),
                pooling: run(FusionMode::Max, 0.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SimplexSummary {
    pub cases: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

/// Randomized checks that attention outputs are distributions, transport plans
/// are feasible and nonnegative, and metrics stay in range.
pub fn simplex_suite(cases: usize, seed: u64) -> SimplexSummary {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dim = rng.gen_range(1..=6);
        let heads = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=6);
        let attention = AttentionParams::<f64>::init(dim, heads, &mut rng).unwrap();
        let scale = rng.gen_range(0.1..10.0);
        let x = Array2::from_shape_simple_fn((n, dim), || scale * rng.gen_range(-1.0..1.0));
        for mode in [FusionMode::Mean, FusionMode::Max, FusionMode::SelfAttention] {
            let f = fuse(&attention, mode, x.view()).unwrap();
            if !is_simplex(f.mu.as_slice().unwrap(), 1e-9) {
                failures.push(format!("case {case}: {} weights {:?}", mode.name(), f.mu));
            }
        }
        for k in 0..heads {
            let w = head_weights(
                attention.head_proj.index_axis(ndarray::Axis(0), k),
                attention.head_query.row(k),
                x.view(),
            )
            .unwrap();
            if !is_simplex(w.as_slice().unwrap(), 1e-9) {
                failures.push(format!("case {case}: head {k} weights {w:?}"));
            }
        }

        let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let costs = random_costs(r, c, &mut rng);
        let (mu, nu) = (simplex(r, &mut rng), simplex(c, &mut rng));
        let (plan, _) = solve_ot(&costs, mu.view(), nu.view(), &OtConfig::default()).unwrap();
        if plan.marginal_violation() > 1e-6 || plan.plan.iter().any(|&t| t < 0.0 || t.is_nan()) {
            failures.push(format!("case {case}: infeasible plan, violation {:e}", plan.marginal_violation()));
        }

        let universe = rng.gen_range(2..=12);
        let top = rng.gen_range(1..=universe);
        let recommended = sample(&mut rng, universe, top).into_vec();
        let count = rng.gen_range(1..=universe);
        let truth = sample(&mut rng, universe, count).into_vec();
        let m = admission_metrics(&recommended, &truth);
        let lo = m.precision.min(m.recall);
        let hi = m.precision.max(m.recall);
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(m.precision) && in_unit(m.recall) && m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12) {
            failures.push(format!("case {case}: metrics out of range {m:?}"));
        }
    }
    SimplexSummary {
        cases,
        failures,
        seconds: elapsed(start),
    }
}
