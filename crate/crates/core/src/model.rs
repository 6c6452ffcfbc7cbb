//! Embedding model: per-procedure probability `sigmoid(v_p' f(U_D))`, the
//! negative-sampled binary cross-entropy loss, scoring and top-L ranking.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::attention::{fuse, fuse_backward, AttentionParams, FusionMode};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Disease embeddings, one row per disease (`|D| x M`).
    pub disease_emb: Array2<T>,
    /// Procedure embeddings, one row per procedure (`|P| x M`).
    pub procedure_emb: Array2<T>,
    pub attention: AttentionParams<T>,
    pub fusion: FusionMode,
    /// Weight of the transport regularizer used in training.
    pub alpha: f64,
}

/// Embeddings uniform on `[-1/sqrt(M), 1/sqrt(M)]`, then the attention network.
pub fn init_model<T: Scalar, R: Rng>(
    dim: usize,
    disease_count: usize,
    procedure_count: usize,
    heads: usize,
    fusion: FusionMode,
    alpha: f64,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    if dim == 0 || disease_count == 0 || procedure_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "model sizes must be positive: M={dim} |D|={disease_count} |P|={procedure_count}"
        )));
    }
    let s = 1.0 / (dim as f64).sqrt();
    let disease_emb =
        Array2::from_shape_simple_fn((disease_count, dim), || T::lit(rng.gen_range(-s..=s)));
    let procedure_emb =
        Array2::from_shape_simple_fn((procedure_count, dim), || T::lit(rng.gen_range(-s..=s)));
    let attention = AttentionParams::init(dim, heads, rng)?;
    Ok(ModelParams {
        disease_emb,
        procedure_emb,
        attention,
        fusion,
        alpha,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn dim(&self) -> usize {
        self.disease_emb.ncols()
    }

    pub fn heads(&self) -> usize {
        self.attention.heads()
    }

    pub fn disease_count(&self) -> usize {
        self.disease_emb.nrows()
    }

    pub fn procedure_count(&self) -> usize {
        self.procedure_emb.nrows()
    }

    /// Flat views of `U, V, A, a, B, b` in that order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![
            self.disease_emb.as_slice().expect("standard layout"),
            self.procedure_emb.as_slice().expect("standard layout"),
        ];
        out.extend(self.attention.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![
            self.disease_emb.as_slice_mut().expect("standard layout"),
            self.procedure_emb.as_slice_mut().expect("standard layout"),
        ];
        out.extend(self.attention.tensors_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Rows of `U` for the given diseases, in order.
    pub fn disease_rows(&self, diseases: &[usize]) -> Result<Array2<T>> {
        if diseases.is_empty() {
            return Err(Error::InvalidArgument("disease set is empty".into()));
        }
        check_indices("disease", diseases, self.disease_count())?;
        Ok(self.disease_emb.select(Axis(0), diseases))
    }

    pub fn procedure_rows(&self, procedures: &[usize]) -> Result<Array2<T>> {
        check_indices("procedure", procedures, self.procedure_count())?;
        Ok(self.procedure_emb.select(Axis(0), procedures))
    }

    /// `f(U_D)` for a disease set.
    pub fn fused(&self, diseases: &[usize]) -> Result<Array1<T>> {
        let rows = self.disease_rows(diseases)?;
        Ok(fuse(&self.attention, self.fusion, rows.view())?.fused)
    }
}

fn check_indices(what: &'static str, indices: &[usize], size: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::IndexOutOfRange { what, index, size }),
        None => Ok(()),
    }
}

/// Gradient of a per-admission loss, sparse over the embedding rows it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    pub disease: BTreeMap<usize, Array1<T>>,
    pub procedure: BTreeMap<usize, Array1<T>>,
    pub attention: AttentionParams<T>,
}

impl<T: Scalar> GradBundle<T> {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            disease: BTreeMap::new(),
            procedure: BTreeMap::new(),
            attention: AttentionParams::zeros(dim, heads),
        }
    }

    pub fn add_disease(&mut self, index: usize, grad: ArrayView1<T>) {
        add_row(&mut self.disease, index, grad);
    }

    pub fn add_procedure(&mut self, index: usize, grad: ArrayView1<T>) {
        add_row(&mut self.procedure, index, grad);
    }

    pub fn merge(&mut self, other: &Self) {
        for (&i, g) in &other.disease {
            self.add_disease(i, g.view());
        }
        for (&p, g) in &other.procedure {
            self.add_procedure(p, g.view());
        }
        self.attention.add_assign(&other.attention);
    }

    /// Adds this bundle into dense buffers laid out like [`ModelParams::tensors`].
    pub fn scatter_into(&self, dense: &mut [Vec<T>]) {
        let dim = self.attention.dim();
        for (&i, g) in &self.disease {
            for (slot, &v) in dense[0][i * dim..(i + 1) * dim].iter_mut().zip(g) {
                *slot += v;
            }
        }
        for (&p, g) in &self.procedure {
            for (slot, &v) in dense[1][p * dim..(p + 1) * dim].iter_mut().zip(g) {
                *slot += v;
            }
        }
        for (buf, src) in dense[2..].iter_mut().zip(self.attention.tensors()) {
            for (slot, &v) in buf.iter_mut().zip(src) {
                *slot += v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.disease
            .values()
            .chain(self.procedure.values())
            .all(|g| g.iter().all(|x| x.is_finite()))
            && self.attention.is_finite()
    }
}

fn add_row<T: Scalar>(map: &mut BTreeMap<usize, Array1<T>>, index: usize, grad: ArrayView1<T>) {
    match map.get_mut(&index) {
        Some(acc) => *acc += &grad,
        None => {
            map.insert(index, grad.to_owned());
        }
    }
}

/// `Prob(p | D) = sigmoid(v_p' f(U_D))`.
pub fn predict_prob<T: Scalar>(params: &ModelParams<T>, diseases: &[usize], procedure: usize) -> Result<T> {
    check_indices("procedure", &[procedure], params.procedure_count())?;
    let fused = params.fused(diseases)?;
    Ok(sigmoid(params.procedure_emb.row(procedure).dot(&fused)))
}

/// Binary cross-entropy over positives and sampled negatives, with gradients.
///
/// `-log sigmoid(s)` and `-log(1 - sigmoid(s))` are evaluated as softplus
/// terms, so the loss stays finite for saturated scores.
pub fn predictive_loss<T: Scalar>(
    params: &ModelParams<T>,
    diseases: &[usize],
    positives: &[usize],
    negatives: &[usize],
) -> Result<(T, GradBundle<T>)> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("positive procedure set is empty".into()));
    }
    if let Some(p) = negatives.iter().find(|n| positives.contains(n)) {
        return Err(Error::InvalidArgument(format!(
            "procedure {p} is both positive and negative"
        )));
    }
    check_indices("procedure", positives, params.procedure_count())?;
    check_indices("procedure", negatives, params.procedure_count())?;
    let rows = params.disease_rows(diseases)?;
    let fusion = fuse(&params.attention, params.fusion, rows.view())?;

    let dim = params.dim();
    let mut grads = GradBundle::zeros(dim, params.heads());
    let mut grad_fused = Array1::zeros(dim);
    let mut loss = T::zero();
    let labelled = positives
        .iter()
        .map(|&p| (p, true))
        .chain(negatives.iter().map(|&p| (p, false)));
    for (p, positive) in labelled {
        let v = params.procedure_emb.row(p);
        let s = v.dot(&fusion.fused);
        // dL/ds = sigmoid(s) - y
        let (term, slope) = if positive {
            (softplus(-s), sigmoid(s) - T::one())
        } else {
            (softplus(s), sigmoid(s))
        };
        loss += term;
        grads.add_procedure(p, fusion.fused.mapv(|f| f * slope).view());
        grad_fused.scaled_add(slope, &v);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("predictive loss".into()));
    }

    let (grad_attention, grad_rows) = fuse_backward(
        &params.attention,
        params.fusion,
        rows.view(),
        grad_fused.view(),
        Array1::zeros(diseases.len()).view(),
    )?;
    grads.attention = grad_attention;
    for (&d, g) in diseases.iter().zip(grad_rows.rows()) {
        grads.add_disease(d, g);
    }
    Ok((loss, grads))
}

/// Raw inner products `v_p' f(U_D)` for every procedure.
pub fn logits_all<T: Scalar>(params: &ModelParams<T>, diseases: &[usize]) -> Result<Array1<T>> {
    let fused = params.fused(diseases)?;
    Ok(params.procedure_emb.dot(&fused))
}

/// Probability of every procedure given the disease set.
pub fn score_all<T: Scalar>(params: &ModelParams<T>, diseases: &[usize]) -> Result<Array1<T>> {
    Ok(logits_all(params, diseases)?.mapv(sigmoid))
}

/// Indices of the `top` largest scores, descending; ties go to the lower index.
pub fn rank_top<T: Scalar>(scores: ArrayView1<T>, top: usize) -> Result<Vec<usize>> {
    if top == 0 || top > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "top-L must be within 1..={}, got {top}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(top);
    Ok(order)
}

/// Ranks by the logits rather than the probabilities: sigmoid is monotone, and
/// the logits keep ties apart where `f32` probabilities would saturate.
pub fn recommend_top_l<T: Scalar>(params: &ModelParams<T>, diseases: &[usize], top: usize) -> Result<Vec<usize>> {
    rank_top(logits_all(params, diseases)?.view(), top)
}
