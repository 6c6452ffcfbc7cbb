#[path = "common/checks.rs"]
mod checks;

use icdot::data::sample_negatives;
use icdot::{batch_step, init_model, train, AdamState, Admission, FusionMode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn planted_structure_is_recovered() {
    let s = checks::planted_learning(&checks::planted_config());
    assert!(s.recall_at_3 >= 90.0, "top-3 recall {:.2}%", s.recall_at_3);
    assert!(s.seconds < 120.0, "took {:.1}s", s.seconds);
}

#[test]
fn loss_falls_over_epochs() {
    let data = checks::planted_dataset(400, 3);
    let cfg = TrainConfig {
        dim: 8,
        heads: 2,
        epochs: 5,
        learning_rate: 0.01,
        batch_size: 32,
        deterministic: true,
        ..TrainConfig::default()
    };
    let (_, report) = train::<f64>(&data, 20, 10, &cfg).unwrap();
    let first = report.epochs[0].mean_predictive_loss;
    let last = report.epochs[4].mean_predictive_loss;
    assert!(last < first, "{first} -> {last}");
}

/// Plain mean-pooled logistic loss with hand-written Adam, sharing nothing
/// with the library beyond the initial parameters and the negative draws.
struct Reference {
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    mv: Vec<Vec<f64>>,
    su: Vec<Vec<f64>>,
    sv: Vec<Vec<f64>>,
    step: i32,
}

impl Reference {
    fn batch(&mut self, batch: &[(Admission, Vec<usize>)], lr: f64) -> f64 {
        let dim = self.u[0].len();
        let mut gu = vec![vec![0.0; dim]; self.u.len()];
        let mut gv = vec![vec![0.0; dim]; self.v.len()];
        let mut loss = 0.0;
        for (adm, neg) in batch {
            let n = adm.diseases.len() as f64;
            let mut f = vec![0.0; dim];
            for &d in &adm.diseases {
                for k in 0..dim {
                    f[k] += self.u[d][k] / n;
                }
            }
            let mut gf = vec![0.0; dim];
            for (p, y) in adm.positives.iter().map(|&p| (p, 1.0)).chain(neg.iter().map(|&p| (p, 0.0))) {
                let s: f64 = (0..dim).map(|k| self.v[p][k] * f[k]).sum();
                let prob = 1.0 / (1.0 + (-s).exp());
                loss -= y * prob.ln() + (1.0 - y) * (1.0 - prob).ln();
                for k in 0..dim {
                    gv[p][k] += (prob - y) * f[k];
                    gf[k] += (prob - y) * self.v[p][k];
                }
            }
            for &d in &adm.diseases {
                for k in 0..dim {
                    gu[d][k] += gf[k] / n;
                }
            }
        }
        self.step += 1;
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        for (w, g, m, s) in [
            (&mut self.u, &gu, &mut self.mu, &mut self.su),
            (&mut self.v, &gv, &mut self.mv, &mut self.sv),
        ] {
            for i in 0..w.len() {
                for k in 0..dim {
                    m[i][k] = b1 * m[i][k] + (1.0 - b1) * g[i][k];
                    s[i][k] = b2 * s[i][k] + (1.0 - b2) * g[i][k] * g[i][k];
                    w[i][k] -= lr * (m[i][k] / c1) / ((s[i][k] / c2).sqrt() + eps);
                }
            }
        }
        loss
    }
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn mean_pooling_without_transport_is_plain_logistic_training() {
    let data = checks::planted_dataset(90, 4);
    let cfg = TrainConfig {
        dim: 5,
        heads: 2,
        alpha: 0.0,
        fusion: FusionMode::Mean,
        learning_rate: 0.05,
        deterministic: true,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = init_model::<f64, _>(5, 20, 10, 2, FusionMode::Mean, 0.0, &mut rng).unwrap();
    let zeros = |r: usize| vec![vec![0.0; 5]; r];
    let mut reference = Reference {
        u: rows(&params.disease_emb),
        v: rows(&params.procedure_emb),
        mu: zeros(20),
        mv: zeros(10),
        su: zeros(20),
        sv: zeros(10),
        step: 0,
    };
    let mut adam = AdamState::new(&params);
    let mut neg_rng = rng.clone();
    for batch in data.chunks(30) {
        let with_negatives: Vec<(Admission, Vec<usize>)> = batch
            .iter()
            .map(|a| (a.clone(), sample_negatives(a, 10, &mut neg_rng).unwrap()))
            .collect();
        let expected = reference.batch(&with_negatives, cfg.learning_rate);
        let diag = batch_step(&mut params, &mut adam, batch, &cfg, &mut rng).unwrap();
        assert!((diag.predictive_loss - expected).abs() <= 1e-9, "{} vs {expected}", diag.predictive_loss);
    }
    for (lib, refr) in [(&params.disease_emb, &reference.u), (&params.procedure_emb, &reference.v)] {
        for (a, b) in lib.rows().into_iter().zip(refr) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
