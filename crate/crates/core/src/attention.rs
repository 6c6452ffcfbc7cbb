//! Set fusion of disease embeddings.
//!
//! The self-attention variant is a two-layer network. Each of `K` heads scores
//! the set members through its own projection and query vector:
//!
//! ```text
//! w_k = softmax(a_k' tanh(A_k X'))          k = 1..K, X is n x M (one row per member)
//! mu  = softmax(b' tanh(B W))               W stacks w_k as rows, K x n
//! f   = X' mu
//! ```
//!
//! `mu` is the significance distribution over the members. Mean and max
//! pooling are provided as ablation baselines; both report a uniform `mu`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{softmax, softmax_backward, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Mean,
    Max,
    SelfAttention,
}

impl FusionMode {
    pub fn code(self) -> u8 {
        match self {
            FusionMode::Mean => 0,
            FusionMode::Max => 1,
            FusionMode::SelfAttention => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FusionMode::Mean),
            1 => Some(FusionMode::Max),
            2 => Some(FusionMode::SelfAttention),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Mean => "mean",
            FusionMode::Max => "max",
            FusionMode::SelfAttention => "sa",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionMode::Mean),
            "max" => Ok(FusionMode::Max),
            "sa" | "self_attention" => Ok(FusionMode::SelfAttention),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode {other:?} (expected mean, max or sa)"
            ))),
        }
    }
}

/// Parameters of the two-layer attention network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// Per-head projections `A_k`, shape `K x M x M`.
    pub head_proj: Array3<T>,
    /// Per-head query vectors `a_k`, shape `K x M`.
    pub head_query: Array2<T>,
    /// Second-layer projection `B`, shape `K x K`.
    pub mix_proj: Array2<T>,
    /// Second-layer query `b`, length `K`.
    pub mix_query: Array1<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            head_proj: Array3::zeros((heads, dim, dim)),
            head_query: Array2::zeros((heads, dim)),
            mix_proj: Array2::zeros((heads, heads)),
            mix_query: Array1::zeros(heads),
        }
    }

    /// Uniform on `[-1/sqrt(M), 1/sqrt(M)]` for the heads and `[-1/sqrt(K), 1/sqrt(K)]`
    /// for the second layer.
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || heads == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention needs M >= 1 and K >= 1, got M={dim} K={heads}"
            )));
        }
        let sm = 1.0 / (dim as f64).sqrt();
        let sk = 1.0 / (heads as f64).sqrt();
        let mut draw = |s: f64| T::lit(rng.gen_range(-s..=s));
        let head_proj = Array3::from_shape_simple_fn((heads, dim, dim), || draw(sm));
        let head_query = Array2::from_shape_simple_fn((heads, dim), || draw(sm));
        let mix_proj = Array2::from_shape_simple_fn((heads, heads), || draw(sk));
        let mix_query = Array1::from_shape_simple_fn(heads, || draw(sk));
        Ok(Self {
            head_proj,
            head_query,
            mix_proj,
            mix_query,
        })
    }

    pub fn dim(&self) -> usize {
        self.head_query.ncols()
    }

    pub fn heads(&self) -> usize {
        self.head_query.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> [&[T]; 4] {
        [
            self.head_proj.as_slice().expect("standard layout"),
            self.head_query.as_slice().expect("standard layout"),
            self.mix_proj.as_slice().expect("standard layout"),
            self.mix_query.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 4] {
        [
            self.head_proj.as_slice_mut().expect("standard layout"),
            self.head_query.as_slice_mut().expect("standard layout"),
            self.mix_proj.as_slice_mut().expect("standard layout"),
            self.mix_query.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.head_proj += &other.head_proj;
        self.head_query += &other.head_query;
        self.mix_proj += &other.mix_proj;
        self.mix_query += &other.mix_query;
    }
}

/// Output of a fusion forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<T> {
    /// Significance distribution over the set members.
    pub mu: Array1<T>,
    /// Fused vector of length `M`.
    pub fused: Array1<T>,
}

fn check_members<T: Scalar>(members: &ArrayView2<T>, dim: usize) -> Result<()> {
    if members.nrows() == 0 {
        return Err(Error::Shape("cannot fuse an empty set".into()));
    }
    if members.ncols() != dim {
        return Err(Error::Shape(format!(
            "member embeddings have dimension {}, expected {dim}",
            members.ncols()
        )));
    }
    Ok(())
}

fn finite_or<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn softmax1<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    Array1::from(softmax(logits.as_slice().expect("contiguous")))
}

/// One first-layer head: `softmax(query' tanh(proj X'))`.
pub fn head_weights<T: Scalar>(
    proj: ArrayView2<T>,
    query: ArrayView1<T>,
    members: ArrayView2<T>,
) -> Result<Array1<T>> {
    check_members(&members, query.len())?;
    let hidden = members.dot(&proj.t()).mapv(T::tanh);
    let logits = hidden.dot(&query);
    finite_or(logits.as_slice().expect("contiguous"), "attention head logits")?;
    Ok(softmax1(&logits))
}

struct SaForward<T> {
    /// Per-head `tanh(X A_k')`, each `n x M`.
    hidden: Vec<Array2<T>>,
    /// Stacked head weights, `K x n`.
    weights: Array2<T>,
    /// `tanh(B W)`, `K x n`.
    mixed: Array2<T>,
    mu: Array1<T>,
}

fn sa_forward<T: Scalar>(params: &AttentionParams<T>, members: &ArrayView2<T>) -> Result<SaForward<T>> {
    let n = members.nrows();
    let k = params.heads();
    let mut hidden = Vec::with_capacity(k);
    let mut weights = Array2::zeros((k, n));
    for h in 0..k {
        let proj = params.head_proj.index_axis(Axis(0), h);
        let query = params.head_query.row(h);
        let hid = members.dot(&proj.t()).mapv(T::tanh);
        let logits = hid.dot(&query);
        finite_or(logits.as_slice().expect("contiguous"), "attention head logits")?;
        weights.row_mut(h).assign(&softmax1(&logits));
        hidden.push(hid);
    }
    let mixed = params.mix_proj.dot(&weights).mapv(T::tanh);
    let logits = mixed.t().dot(&params.mix_query);
    finite_or(logits.as_slice().expect("contiguous"), "attention mixing logits")?;
    let mu = softmax1(&logits);
    Ok(SaForward {
        hidden,
        weights,
        mixed,
        mu,
    })
}

/// Fuses the rows of `members` (`n x M`) into one vector and a significance distribution.
pub fn fuse<T: Scalar>(
    params: &AttentionParams<T>,
    mode: FusionMode,
    members: ArrayView2<T>,
) -> Result<Fusion<T>> {
    check_members(&members, params.dim())?;
    let n = members.nrows();
    let uniform = || Array1::from_elem(n, T::one() / T::lit(n as f64));
    let out = match mode {
        FusionMode::Mean => {
            let mu = uniform();
            let fused = members.t().dot(&mu);
            Fusion { mu, fused }
        }
        FusionMode::Max => {
            let fused = members.fold_axis(Axis(0), T::neg_infinity(), |&m, &x| m.max(x));
            Fusion { mu: uniform(), fused }
        }
        FusionMode::SelfAttention => {
            let fwd = sa_forward(params, &members)?;
            let fused = members.t().dot(&fwd.mu);
            Fusion { mu: fwd.mu, fused }
        }
    };
    finite_or(out.fused.as_slice().expect("contiguous"), "fused vector")?;
    Ok(out)
}

/// Gradients of `grad_fused' f + grad_mu' mu` with respect to the attention
/// parameters and to `members`.
///
/// Pooling modes return zero parameter gradients and ignore `grad_mu`, since
/// their `mu` does not depend on the inputs.
pub fn fuse_backward<T: Scalar>(
    params: &AttentionParams<T>,
    mode: FusionMode,
    members: ArrayView2<T>,
    grad_fused: ArrayView1<T>,
    grad_mu: ArrayView1<T>,
) -> Result<(AttentionParams<T>, Array2<T>)> {
    check_members(&members, params.dim())?;
    let (n, dim) = members.dim();
    let k = params.heads();
    if grad_fused.len() != dim || grad_mu.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradients have lengths ({}, {}), expected ({dim}, {n})",
            grad_fused.len(),
            grad_mu.len()
        )));
    }
    let mut grad_params = AttentionParams::zeros(dim, k);
    let mut grad_members = Array2::zeros((n, dim));

    match mode {
        FusionMode::Mean => {
            let share = grad_fused.mapv(|g| g / T::lit(n as f64));
            for mut row in grad_members.rows_mut() {
                row.assign(&share);
            }
        }
        FusionMode::Max => {
            for (j, col) in members.columns().into_iter().enumerate() {
                let mut arg = 0;
                for (i, &x) in col.iter().enumerate() {
                    if x > col[arg] {
                        arg = i;
                    }
                }
                grad_members[[arg, j]] = grad_fused[j];
            }
        }
        FusionMode::SelfAttention => {
            let fwd = sa_forward(params, &members)?;

            // f = X' mu
            for (mut row, &m) in grad_members.rows_mut().into_iter().zip(fwd.mu.iter()) {
                row.scaled_add(m, &grad_fused);
            }
            let grad_mu_total = &grad_mu + &members.dot(&grad_fused);

            // mu = softmax(r), r = Z' b, Z = tanh(B W)
            let grad_r = Array1::from(softmax_backward(
                fwd.mu.as_slice().expect("contiguous"),
                grad_mu_total.as_slice().expect("contiguous"),
            ));
            grad_params.mix_query.assign(&fwd.mixed.dot(&grad_r));
            let mut grad_pre = Array2::zeros((k, n));
            Zip::from(&mut grad_pre)
                .and(&fwd.mixed)
                .and(grad_r.broadcast((k, n)).expect("broadcast"))
                .and(&params.mix_query.view().insert_axis(Axis(1)).broadcast((k, n)).expect("broadcast"))
                .for_each(|g, &z, &gr, &b| *g = b * gr * (T::one() - z * z));
            grad_params.mix_proj.assign(&grad_pre.dot(&fwd.weights.t()));
            let grad_weights = params.mix_proj.t().dot(&grad_pre);

            for h in 0..k {
                let w = fwd.weights.row(h);
                let grad_logits = Array1::from(softmax_backward(
                    w.to_vec().as_slice(),
                    grad_weights.row(h).to_vec().as_slice(),
                ));
                let hid = &fwd.hidden[h];
                grad_params
                    .head_query
                    .row_mut(h)
                    .assign(&hid.t().dot(&grad_logits));
                // d/d(pre) of tanh(pre) with pre = X A_k'
                let query = params.head_query.row(h);
                let mut grad_hpre = Array2::zeros((n, dim));
                Zip::indexed(&mut grad_hpre)
                    .and(hid)
                    .for_each(|(i, j), g, &t| *g = grad_logits[i] * query[j] * (T::one() - t * t));
                grad_params
                    .head_proj
                    .index_axis_mut(Axis(0), h)
                    .assign(&grad_hpre.t().dot(&members));
                grad_members += &grad_hpre.dot(&params.head_proj.index_axis(Axis(0), h));
            }
        }
    }
    Ok((grad_params, grad_members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_members(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, dim), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = AttentionParams::<f64>::init(4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p.head_proj.dim(), (2, 4, 4));
        assert_eq!(p.head_query.dim(), (2, 4));
        assert_eq!(p.mix_proj.dim(), (2, 2));
        assert_eq!(p.mix_query.len(), 2);
        let q = AttentionParams::<f64>::init(4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p, q);
        assert!(p.head_proj.iter().all(|x| x.abs() <= 0.5));
        assert!(p.mix_proj.iter().all(|x| x.abs() <= 1.0 / 2f64.sqrt()));

        let one = AttentionParams::<f32>::init(1, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(one.is_finite());
        assert!(AttentionParams::<f64>::init(0, 1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn head_weights_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = random_members(3, 3, &mut rng);
        let query = array![0.3, -0.8, 1.1];
        let single = random_members(1, 3, &mut rng);
        assert_eq!(head_weights(proj.view(), query.view(), single.view()).unwrap(), array![1.0]);

        let zero = Array2::<f64>::zeros((3, 3));
        let x = random_members(4, 3, &mut rng);
        let w = head_weights(zero.view(), query.view(), x.view()).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut dup = random_members(3, 3, &mut rng);
        let first = dup.row(0).to_owned();
        dup.row_mut(2).assign(&first);
        let w = head_weights(proj.view(), query.view(), dup.view()).unwrap();
        assert_eq!(w[0], w[2]);
    }

    #[test]
    fn head_weights_rejects_non_finite() {
        let proj = Array2::<f64>::eye(2);
        let query = array![f64::INFINITY, 1.0];
        let x = array![[1.0, 0.5], [0.2, 0.1]];
        assert!(matches!(
            head_weights(proj.view(), query.view(), x.view()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn singleton_fusion_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f64>::init(3, 2, &mut rng).unwrap();
        let x = random_members(1, 3, &mut rng);
        for mode in [FusionMode::Mean, FusionMode::Max, FusionMode::SelfAttention] {
            let f = fuse(&p, mode, x.view()).unwrap();
            assert_eq!(f.mu, array![1.0]);
            assert!((&f.fused - &x.row(0)).iter().all(|d| d.abs() < 1e-15));
        }
    }

    #[test]
    fn mean_of_basis_vectors() {
        let p = AttentionParams::<f64>::zeros(4, 1);
        let x = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let f = fuse(&p, FusionMode::Mean, x.view()).unwrap();
        assert_eq!(f.fused, array![0.5, 0.5, 0.0, 0.0]);
        let f = fuse(&p, FusionMode::Max, x.view()).unwrap();
        assert_eq!(f.fused, array![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.mu, array![0.5, 0.5]);
    }

    #[test]
    fn zero_attention_is_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::<f64>::zeros(3, 2);
        let x = random_members(5, 3, &mut rng);
        let sa = fuse(&p, FusionMode::SelfAttention, x.view()).unwrap();
        let mean = fuse(&p, FusionMode::Mean, x.view()).unwrap();
        assert!(sa.mu.iter().all(|&m| (m - 0.2).abs() < 1e-15));
        assert!((&sa.fused - &mean.fused).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_empty_and_misshaped_sets() {
        let p = AttentionParams::<f64>::zeros(3, 2);
        assert!(fuse(&p, FusionMode::Mean, Array2::zeros((0, 3)).view()).is_err());
        assert!(fuse(&p, FusionMode::Mean, Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::<f64>::init(3, 2, &mut rng).unwrap();
        let x = random_members(4, 3, &mut rng);
        for mode in [FusionMode::Mean, FusionMode::Max, FusionMode::SelfAttention] {
            let (gp, gx) = fuse_backward(
                &p,
                mode,
                x.view(),
                Array1::zeros(3).view(),
                Array1::zeros(4).view(),
            )
            .unwrap();
            assert!(gx.iter().all(|&v| v == 0.0));
            assert!(gp.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let p = AttentionParams::<f64>::zeros(3, 1);
        let x = array![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]];
        let g = array![0.4, -2.0, 1.0];
        let (_, gx) =
            fuse_backward(&p, FusionMode::Mean, x.view(), g.view(), Array1::zeros(2).view())
                .unwrap();
        for row in gx.rows() {
            assert_eq!(row, g.mapv(|v| v / 2.0));
        }
    }

    /// Objective `g_f' f + g_mu' mu` as a plain function of flattened inputs.
    fn objective(
        p: &AttentionParams<f64>,
        x: &Array2<f64>,
        gf: &Array1<f64>,
        gm: &Array1<f64>,
    ) -> f64 {
        let f = fuse(p, FusionMode::SelfAttention, x.view()).unwrap();
        f.fused.dot(gf) + f.mu.dot(gm)
    }

    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
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

    #[test]
    fn self_attention_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..25 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (dim, k, n) = (3, 2, 4);
            let p = AttentionParams::<f64>::init(dim, k, &mut rng).unwrap();
            let x = random_members(n, dim, &mut rng);
            let gf = Array1::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0));
            let gm = Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0));
            let (gp, gx) =
                fuse_backward(&p, FusionMode::SelfAttention, x.view(), gf.view(), gm.view())
                    .unwrap();

            for t in 0..4 {
                let len = p.tensors()[t].len();
                let mut numeric = vec![0.0; len];
                for i in 0..len {
                    let mut pp = p.clone();
                    pp.tensors_mut()[t][i] += h;
                    let mut pm = p.clone();
                    pm.tensors_mut()[t][i] -= h;
                    numeric[i] = (objective(&pp, &x, &gf, &gm) - objective(&pm, &x, &gf, &gm))
                        / (2.0 * h);
                }
                let e = rel_err(gp.tensors()[t], &numeric);
                assert!(e <= 1e-4, "seed {seed} tensor {t}: {e}");
            }
            let mut numeric = Array2::zeros((n, dim));
            for ((i, j), v) in numeric.indexed_iter_mut() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                *v = (objective(&p, &xp, &gf, &gm) - objective(&p, &xm, &gf, &gm)) / (2.0 * h);
            }
            let e = rel_err(gx.as_slice().unwrap(), numeric.as_slice().unwrap());
            assert!(e <= 1e-4, "seed {seed} members: {e}");
        }
    }

    #[test]
    fn f32_instantiation_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = AttentionParams::<f32>::init(4, 3, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0f32..1.0));
        let f = fuse(&p, FusionMode::SelfAttention, x.view()).unwrap();
        assert!((f.mu.sum() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..10_000, n in 1usize..6, shift in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AttentionParams::<f64>::init(3, 2, &mut rng).unwrap();
            let x = random_members(n, 3, &mut rng);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let xp = x.select(Axis(0), &perm);
            for mode in [FusionMode::Mean, FusionMode::Max, FusionMode::SelfAttention] {
                let a = fuse(&p, mode, x.view()).unwrap();
                let b = fuse(&p, mode, xp.view()).unwrap();
                for (i, &src) in perm.iter().enumerate() {
                    prop_assert!((b.mu[i] - a.mu[src]).abs() < 1e-12);
                }
                for (u, v) in a.fused.iter().zip(b.fused.iter()) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn fused_lies_in_convex_hull(seed in 0u64..10_000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AttentionParams::<f64>::init(4, 3, &mut rng).unwrap();
            let x = random_members(n, 4, &mut rng);
            for mode in [FusionMode::Mean, FusionMode::SelfAttention] {
                let f = fuse(&p, mode, x.view()).unwrap();
                prop_assert!(crate::scalar::is_simplex(f.mu.as_slice().unwrap(), 1e-9));
                for (j, col) in x.columns().into_iter().enumerate() {
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(f.fused[j] >= lo - 1e-12 && f.fused[j] <= hi + 1e-12);
                }
            }
        }
    }
}
