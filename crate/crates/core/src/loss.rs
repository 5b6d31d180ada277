//! GNT-Xent and NT-Xent over three-view batch embeddings.
//!
//! Every loss is a sum of *log-terms*. A log-term contrasts one scaled
//! positive similarity `p` against a set of scaled negatives `q_k`:
//!
//! * GNT-Xent: `−p + log Σ_k e^{q_k}`; the positive is absent from the denominator,
//!   so `∂/∂p = −1` and the negative gradients are a softmax summing to 1.
//! * NT-Xent: `−p + log(e^p + Σ_k e^{q_k})`; both gradients shrink as `p` grows.
//!
//! For image `i` the batch loss uses one core-core term and, when an auxiliary
//! view exists, two terms for each of the (z, x) and (z, y) pairs:
//!
//! | component | positive      | negatives (over `j ≠ i`)                           |
//! |-----------|---------------|----------------------------------------------------|
//! | `L_xy`    | `S_xy(i,i)`   | `S_xy(i,j)`, `S_xy(j,i)`, `S_xx(i,j)`, `S_yy(i,j)` |
//! | `L_zx`    | `S_zx(i,i)`   | `S_zx(i,j)`, then separately `S_zx(j,i)`           |
//! | `L_zy`    | `S_zy(i,i)`   | `S_zy(i,j)`, then separately `S_zy(j,i)`           |
//!
//! Auxiliary-auxiliary pairs never appear. The total is the batch mean of the
//! summed components.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Tolerance on row norms accepted by [`BatchEmbeddings::new`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    GntXent,
    NtXent,
}

/// Row-normalized embeddings of the core views `x`, `y` and the optional auxiliary view `z`.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    x: Tensor<f64>,
    y: Tensor<f64>,
    z: Option<Tensor<f64>>,
}

impl BatchEmbeddings {
    pub fn new(x: Tensor<f64>, y: Tensor<f64>, z: Option<Tensor<f64>>) -> Result<Self> {
        let (n, d) = x.dims2()?;
        for (name, m) in [("y", Some(&y)), ("z", z.as_ref())] {
            if let Some(m) = m {
                if m.dims2()? != (n, d) {
                    return Err(Error::Dimension(format!(
                        "{name} has shape {:?}, x has {:?}",
                        m.shape(),
                        x.shape()
                    )));
                }
            }
        }
        if n < 2 {
            return Err(Error::BatchSize(n));
        }
        for m in [Some(&x), Some(&y), z.as_ref()].into_iter().flatten() {
            for r in 0..n {
                let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::Parameter(format!(
                        "embedding row {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(BatchEmbeddings { x, y, z })
    }

    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn x(&self) -> &Tensor<f64> {
        &self.x
    }

    pub fn y(&self) -> &Tensor<f64> {
        &self.y
    }

    pub fn z(&self) -> Option<&Tensor<f64>> {
        self.z.as_ref()
    }
}

/// Identifies one of the similarity matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimKind {
    Xy,
    Xx,
    Yy,
    Zx,
    Zy,
}

/// Temperature-scaled similarity matrices; entry `(i, j)` of `S_ab` is `a_i·b_j / τ`.
#[derive(Clone, Debug)]
pub struct ScaledSimilarities {
    pub temperature: f64,
    pub xy: Tensor<f64>,
    pub xx: Tensor<f64>,
    pub yy: Tensor<f64>,
    pub zx: Option<Tensor<f64>>,
    pub zy: Option<Tensor<f64>>,
}

fn scaled_gram(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
    let mut s = a.matmul(&b.transpose()?)?;
    s.data_mut().iter_mut().for_each(|v| *v /= tau);
    Ok(s)
}

/// Builds all scaled similarity matrices. Rows are unit-norm, so dot products are cosines.
pub fn similarity_matrices(emb: &BatchEmbeddings, temperature: f64) -> Result<ScaledSimilarities> {
    ScaledSimilarities::from_rows(&emb.x, &emb.y, emb.z.as_ref(), temperature)
}

impl ScaledSimilarities {
    /// Scaled dot products of arbitrary rows, without the unit-norm check.
    pub fn from_rows(
        x: &Tensor<f64>,
        y: &Tensor<f64>,
        z: Option<&Tensor<f64>>,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let n = x.dims2()?.0;
        if n < 2 {
            return Err(Error::BatchSize(n));
        }
        Ok(ScaledSimilarities {
            temperature,
            xy: scaled_gram(x, y, temperature)?,
            xx: scaled_gram(x, x, temperature)?,
            yy: scaled_gram(y, y, temperature)?,
            zx: z.map(|z| scaled_gram(z, x, temperature)).transpose()?,
            zy: z.map(|z| scaled_gram(z, y, temperature)).transpose()?,
        })
    }

    pub fn rows(&self) -> usize {
        self.xy.shape()[0]
    }

    pub fn has_aux(&self) -> bool {
        self.zx.is_some()
    }

    pub fn matrix(&self, kind: SimKind) -> Option<&Tensor<f64>> {
        match kind {
            SimKind::Xy => Some(&self.xy),
            SimKind::Xx => Some(&self.xx),
            SimKind::Yy => Some(&self.yy),
            SimKind::Zx => self.zx.as_ref(),
            SimKind::Zy => self.zy.as_ref(),
        }
    }

    pub fn matrix_mut(&mut self, kind: SimKind) -> Option<&mut Tensor<f64>> {
        match kind {
            SimKind::Xy => Some(&mut self.xy),
            SimKind::Xx => Some(&mut self.xx),
            SimKind::Yy => Some(&mut self.yy),
            SimKind::Zx => self.zx.as_mut(),
            SimKind::Zy => self.zy.as_mut(),
        }
    }

    pub fn get(&self, e: Entry) -> f64 {
        let m = self.matrix(e.kind).expect("entry refers to a present matrix");
        m.data()[e.row * self.rows() + e.col]
    }

    pub fn get_mut(&mut self, e: Entry) -> &mut f64 {
        let n = self.rows();
        let m = self.matrix_mut(e.kind).expect("entry refers to a present matrix");
        &mut m.data_mut()[e.row * n + e.col]
    }

    /// The matrices present in this batch, in a fixed order.
    pub fn kinds(&self) -> Vec<SimKind> {
        let mut k = vec![SimKind::Xy, SimKind::Xx, SimKind::Yy];
        if self.has_aux() {
            k.extend([SimKind::Zx, SimKind::Zy]);
        }
        k
    }
}

/// One entry of one similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Entry {
    pub kind: SimKind,
    pub row: usize,
    pub col: usize,
}

const fn entry(kind: SimKind, row: usize, col: usize) -> Entry {
    Entry { kind, row, col }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Xy,
    Zx,
    Zy,
}

/// One `−log(e^p / Σ e^q)` term of the batch loss.
#[derive(Clone, Debug)]
pub struct LogTerm {
    pub component: Component,
    pub image: usize,
    pub positive: Entry,
    pub negatives: Vec<Entry>,
}

/// Enumerates the log-terms of a batch of `n` images, image by image.
pub fn log_terms(n: usize, with_aux: bool) -> Vec<LogTerm> {
    use SimKind::*;
    let mut terms = Vec::with_capacity(n * if with_aux { 5 } else { 1 });
    for i in 0..n {
        let others = (0..n).filter(move |&j| j != i);
        terms.push(LogTerm {
            component: Component::Xy,
            image: i,
            positive: entry(Xy, i, i),
            negatives: others
                .clone()
                .flat_map(|j| [entry(Xy, i, j), entry(Xy, j, i), entry(Xx, i, j), entry(Yy, i, j)])
                .collect(),
        });
        if with_aux {
            for (component, kind) in [(Component::Zx, Zx), (Component::Zy, Zy)] {
                terms.push(LogTerm {
                    component,
                    image: i,
                    positive: entry(kind, i, i),
                    negatives: others.clone().map(|j| entry(kind, i, j)).collect(),
                });
                terms.push(LogTerm {
                    component,
                    image: i,
                    positive: entry(kind, i, i),
                    negatives: others.clone().map(|j| entry(kind, j, i)).collect(),
                });
            }
        }
    }
    terms
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Value and gradients of one log-term given its positive and negatives.
fn term_value_and_grads(kind: LossKind, pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let lse = match kind {
        LossKind::GntXent => log_sum_exp(negs.iter().copied()),
        LossKind::NtXent => log_sum_exp(std::iter::once(pos).chain(negs.iter().copied())),
    };
    let neg_grads: Vec<f64> = negs.iter().map(|q| (q - lse).exp()).collect();
    let pos_grad = match kind {
        LossKind::GntXent => -1.0,
        LossKind::NtXent => -neg_grads.iter().sum::<f64>(),
    };
    (lse - pos, pos_grad, neg_grads)
}

impl LogTerm {
    pub fn value(&self, sims: &ScaledSimilarities, kind: LossKind) -> f64 {
        let negs: Vec<f64> = self.negatives.iter().map(|&e| sims.get(e)).collect();
        term_value_and_grads(kind, sims.get(self.positive), &negs).0
    }
}

/// Gradients of one log-term (not divided by the batch size).
#[derive(Clone, Debug)]
pub struct TermGrad {
    pub component: Component,
    pub image: usize,
    pub value: f64,
    pub positive: f64,
    pub negatives: Vec<f64>,
}

impl TermGrad {
    pub fn negative_sum(&self) -> f64 {
        self.negatives.iter().sum()
    }
}

/// Gradients of the total loss with respect to every scaled-similarity entry.
#[derive(Clone, Debug)]
pub struct SimilarityGrads {
    pub xy: Tensor<f64>,
    pub xx: Tensor<f64>,
    pub yy: Tensor<f64>,
    pub zx: Option<Tensor<f64>>,
    pub zy: Option<Tensor<f64>>,
}

impl SimilarityGrads {
    fn zeros(n: usize, with_aux: bool) -> Self {
        let z = || Tensor::zeros([n, n]);
        SimilarityGrads {
            xy: z(),
            xx: z(),
            yy: z(),
            zx: with_aux.then(z),
            zy: with_aux.then(z),
        }
    }

    pub fn matrix(&self, kind: SimKind) -> Option<&Tensor<f64>> {
        match kind {
            SimKind::Xy => Some(&self.xy),
            SimKind::Xx => Some(&self.xx),
            SimKind::Yy => Some(&self.yy),
            SimKind::Zx => self.zx.as_ref(),
            SimKind::Zy => self.zy.as_ref(),
        }
    }

    fn add(&mut self, e: Entry, v: f64) {
        let m = match e.kind {
            SimKind::Xy => &mut self.xy,
            SimKind::Xx => &mut self.xx,
            SimKind::Yy => &mut self.yy,
            SimKind::Zx => self.zx.as_mut().unwrap(),
            SimKind::Zy => self.zy.as_mut().unwrap(),
        };
        let n = m.shape()[0];
        m.data_mut()[e.row * n + e.col] += v;
    }

    pub fn get(&self, e: Entry) -> f64 {
        let m = self.matrix(e.kind).expect("entry refers to a present matrix");
        m.data()[e.row * m.shape()[0] + e.col]
    }
}

/// Loss value, components, similarity-level gradients and training diagnostics.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub kind: LossKind,
    pub total: f64,
    /// Batch means of `L_xy`, `L_zx`, `L_zy`; the aux components are 0 without an aux view.
    pub components: [f64; 3],
    pub grads: SimilarityGrads,
    pub terms: Vec<TermGrad>,
    /// Mean raw cosine over positive pairs.
    pub mean_pos_sim: f64,
    /// Mean raw cosine over every negative entry of every log-term.
    pub mean_neg_sim: f64,
    /// Mean over log-terms of `∂term/∂(scaled positive)`.
    pub mean_grad_pos: f64,
    /// Mean over log-terms of `Σ_k ∂term/∂(scaled negative_k)`.
    pub mean_grad_neg_sum: f64,
}

/// Evaluates the batch loss of the given kind with its analytic gradients.
pub fn contrastive_loss(sims: &ScaledSimilarities, kind: LossKind) -> Result<LossReport> {
    let n = sims.rows();
    if n < 2 {
        return Err(Error::BatchSize(n));
    }
    let with_aux = sims.has_aux();
    let terms = log_terms(n, with_aux);
    let inv_n = 1.0 / n as f64;
    let mut grads = SimilarityGrads::zeros(n, with_aux);
    let mut components = [0.0f64; 3];
    let mut term_grads = Vec::with_capacity(terms.len());
    let (mut neg_sim_sum, mut neg_count) = (0.0, 0usize);
    let (mut gpos_sum, mut gneg_sum) = (0.0, 0.0);

    let mut negs = Vec::new();
    for term in &terms {
        negs.clear();
        negs.extend(term.negatives.iter().map(|&e| sims.get(e)));
        let pos = sims.get(term.positive);
        let (value, pos_grad, neg_grads) = term_value_and_grads(kind, pos, &negs);
        components[term.component as usize] += value * inv_n;
        grads.add(term.positive, pos_grad * inv_n);
        for (&e, g) in term.negatives.iter().zip(&neg_grads) {
            grads.add(e, g * inv_n);
        }
        neg_sim_sum += negs.iter().sum::<f64>();
        neg_count += negs.len();
        gpos_sum += pos_grad;
        gneg_sum += neg_grads.iter().sum::<f64>();
        term_grads.push(TermGrad {
            component: term.component,
            image: term.image,
            value,
            positive: pos_grad,
            negatives: neg_grads,
        });
    }

    let tau = sims.temperature;
    let diag_mean = |m: &Tensor<f64>| (0..n).map(|i| m.data()[i * n + i]).sum::<f64>() / n as f64;
    let mut pos_mats = vec![&sims.xy];
    pos_mats.extend(sims.zx.as_ref());
    pos_mats.extend(sims.zy.as_ref());
    let mean_pos_sim =
        tau * pos_mats.iter().map(|m| diag_mean(m)).sum::<f64>() / pos_mats.len() as f64;

    let total = components.iter().sum();
    let report = LossReport {
        kind,
        total,
        components,
        grads,
        mean_pos_sim,
        mean_neg_sim: tau * neg_sim_sum / neg_count as f64,
        mean_grad_pos: gpos_sum / term_grads.len() as f64,
        mean_grad_neg_sum: gneg_sum / term_grads.len() as f64,
        terms: term_grads,
    };
    if !report.total.is_finite() {
        return Err(Error::Parameter("loss is not finite".into()));
    }
    Ok(report)
}

pub fn gnt_xent(sims: &ScaledSimilarities) -> Result<LossReport> {
    contrastive_loss(sims, LossKind::GntXent)
}

/// Gradients of the GNT-Xent total with respect to every scaled similarity.
pub fn gnt_xent_similarity_grads(sims: &ScaledSimilarities) -> Result<SimilarityGrads> {
    Ok(gnt_xent(sims)?.grads)
}

/// Single NT-Xent log-term and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct NtXent {
    pub loss: f64,
    pub grad_pos: f64,
    pub grad_negs: Vec<f64>,
}

/// `−log(e^pos / (e^pos + Σ_k e^{neg_k}))` with gradients.
pub fn nt_xent(pos: f64, negs: &[f64]) -> Result<NtXent> {
    if negs.is_empty() {
        return Err(Error::Parameter("nt_xent needs at least one negative".into()));
    }
    let (loss, grad_pos, grad_negs) = term_value_and_grads(LossKind::NtXent, pos, negs);
    Ok(NtXent {
        loss,
        grad_pos,
        grad_negs,
    })
}

/// Gradients of the batch loss with respect to the embedding rows.
#[derive(Clone, Debug)]
pub struct EmbeddingGrads {
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub z: Option<Tensor<f64>>,
}

fn symmetrized(g: &Tensor<f64>) -> Result<Tensor<f64>> {
    let t = g.transpose()?;
    Tensor::new(
        g.shape(),
        g.data().iter().zip(t.data()).map(|(a, b)| a + b).collect(),
    )
}

fn add_into(acc: &mut Tensor<f64>, other: &Tensor<f64>, scale: f64) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b * scale;
    }
}

/// Chains similarity-level gradients through `S = A·Bᵀ/τ` onto the rows of `x`, `y`, `z`.
pub fn embedding_grads(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    z: Option<&Tensor<f64>>,
    grads: &SimilarityGrads,
    temperature: f64,
) -> Result<EmbeddingGrads> {
    let inv_tau = 1.0 / temperature;
    // S_xy = X·Yᵀ, S_xx = X·Xᵀ, S_yy = Y·Yᵀ, S_zx = Z·Xᵀ, S_zy = Z·Yᵀ
    let mut dx = Tensor::zeros(x.shape());
    let mut dy = Tensor::zeros(y.shape());
    add_into(&mut dx, &grads.xy.matmul(y)?, inv_tau);
    add_into(&mut dy, &grads.xy.transpose()?.matmul(x)?, inv_tau);
    add_into(&mut dx, &symmetrized(&grads.xx)?.matmul(x)?, inv_tau);
    add_into(&mut dy, &symmetrized(&grads.yy)?.matmul(y)?, inv_tau);
    let dz = match (z, &grads.zx, &grads.zy) {
        (Some(z), Some(gzx), Some(gzy)) => {
            add_into(&mut dx, &gzx.transpose()?.matmul(z)?, inv_tau);
            add_into(&mut dy, &gzy.transpose()?.matmul(z)?, inv_tau);
            let mut dz = gzx.matmul(x)?;
            add_into(&mut dz, &gzy.matmul(y)?, 1.0);
            dz.data_mut().iter_mut().for_each(|v| *v *= inv_tau);
            Some(dz)
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::Dimension(
                "auxiliary embeddings and gradients must be present together".into(),
            ))
        }
    };
    Ok(EmbeddingGrads {
        x: dx,
        y: dy,
        z: dz,
    })
}

/// Loss report plus gradients with respect to the embeddings.
pub fn full_loss_backward(
    emb: &BatchEmbeddings,
    temperature: f64,
    kind: LossKind,
) -> Result<(LossReport, EmbeddingGrads)> {
    let sims = similarity_matrices(emb, temperature)?;
    let report = contrastive_loss(&sims, kind)?;
    let grads = embedding_grads(&emb.x, &emb.y, emb.z.as_ref(), &report.grads, temperature)?;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::new([n, d], data).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize, aux: bool) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_unit_rows(&mut rng, n, d);
        let y = random_unit_rows(&mut rng, n, d);
        let z = aux.then(|| random_unit_rows(&mut rng, n, d));
        BatchEmbeddings::new(x, y, z).unwrap()
    }

    fn constant_sims(n: usize, value: f64) -> ScaledSimilarities {
        let m = || Tensor::full([n, n], value);
        ScaledSimilarities {
            temperature: 0.1,
            xy: m(),
            xx: m(),
            yy: m(),
            zx: Some(m()),
            zy: Some(m()),
        }
    }

    /// Direct transcription of the per-image formulas with explicit loops.
    fn naive_gnt(s: &ScaledSimilarities) -> [f64; 3] {
        let n = s.rows();
        let at = |m: &Tensor<f64>, i: usize, j: usize| m.data()[i * n + j];
        let (zx, zy) = (s.zx.as_ref().unwrap(), s.zy.as_ref().unwrap());
        let mut out = [0.0; 3];
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += at(&s.xy, i, j).exp()
                        + at(&s.xy, j, i).exp()
                        + at(&s.xx, i, j).exp()
                        + at(&s.yy, i, j).exp();
                }
            }
            out[0] += -(at(&s.xy, i, i).exp() / den).ln();
            for (k, m) in [(1, zx), (2, zy)] {
                let (mut r, mut c) = (0.0, 0.0);
                for j in 0..n {
                    if j != i {
                        r += at(m, i, j).exp();
                        c += at(m, j, i).exp();
                    }
                }
                let p = at(m, i, i).exp();
                out[k] += -((p / r) * (p / c)).ln();
            }
        }
        out.map(|v| v / n as f64)
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_unit_rows(&mut rng, 3, 5);
        let s = ScaledSimilarities::from_rows(&x, &x, None, 1.0).unwrap();
        for i in 0..3 {
            assert!((s.xy.data()[i * 3 + i] - 1.0).abs() < 1e-12);
        }
        let e = Tensor::<f64>::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap();
        let s = ScaledSimilarities::from_rows(&e, &e, None, 0.5).unwrap();
        assert_eq!(s.xy.data(), &[2., 0., 0., 2.]);
        assert!(matches!(
            ScaledSimilarities::from_rows(&e, &e, None, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn similarity_double_loop() {
        let b = random_batch(11, 4, 8, true);
        let s = similarity_matrices(&b, 0.1).unwrap();
        let z = b.z().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot = |a: &Tensor<f64>, bb: &Tensor<f64>| {
                    (0..8).map(|k| a.row(i)[k] * bb.row(j)[k]).sum::<f64>() / 0.1
                };
                assert!((s.xy.data()[i * 4 + j] - dot(b.x(), b.y())).abs() < 1e-6);
                assert!((s.xx.data()[i * 4 + j] - dot(b.x(), b.x())).abs() < 1e-6);
                assert!((s.zx.as_ref().unwrap().data()[i * 4 + j] - dot(z, b.x())).abs() < 1e-6);
                assert!((s.zy.as_ref().unwrap().data()[i * 4 + j] - dot(z, b.y())).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_equal_n2() {
        let r = gnt_xent(&constant_sims(2, 0.37)).unwrap();
        assert!((r.components[0] - 4f64.ln()).abs() < 1e-12);
        assert!(r.components[1].abs() < 1e-12);
        assert!(r.components[2].abs() < 1e-12);
        assert!((r.total - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn all_equal_closed_form() {
        for n in [3usize, 4, 9] {
            let r = gnt_xent(&constant_sims(n, -2.5)).unwrap();
            let m = (n - 1) as f64;
            assert!((r.components[0] - (4.0 * m).ln()).abs() < 1e-10);
            assert!((r.components[1] - 2.0 * m.ln()).abs() < 1e-10);
            assert!((r.components[2] - 2.0 * m.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_loops() {
        let b = random_batch(5, 8, 16, true);
        let s = similarity_matrices(&b, 0.1).unwrap();
        let r = gnt_xent(&s).unwrap();
        let naive = naive_gnt(&s);
        for k in 0..3 {
            assert!((r.components[k] - naive[k]).abs() < 1e-6);
        }
        assert!((r.total - naive.iter().sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn batch_of_one_rejected() {
        let x = Tensor::<f64>::from_f64([1, 2], &[1., 0.]).unwrap();
        assert!(matches!(
            BatchEmbeddings::new(x.clone(), x, None),
            Err(Error::BatchSize(1))
        ));
    }

    #[test]
    fn positive_grads_are_constant() {
        let b = random_batch(9, 6, 8, true);
        let s = similarity_matrices(&b, 0.1).unwrap();
        let r = gnt_xent(&s).unwrap();
        for t in &r.terms {
            assert_eq!(t.positive, -1.0);
            assert!((t.negative_sum() - 1.0).abs() < 1e-12);
        }
        for i in 0..6 {
            let d = |m: &Tensor<f64>| m.data()[i * 6 + i] * 6.0;
            assert!((d(&r.grads.xy) + 1.0).abs() < 1e-12);
            assert!((d(r.grads.zx.as_ref().unwrap()) + 2.0).abs() < 1e-12);
            assert!((d(r.grads.zy.as_ref().unwrap()) + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn n2_single_negative_gets_unit_grad() {
        let b = random_batch(1, 2, 4, true);
        let r = gnt_xent(&similarity_matrices(&b, 0.2).unwrap()).unwrap();
        for t in r.terms.iter().filter(|t| t.component != Component::Xy) {
            assert_eq!(t.negatives.len(), 1);
            assert!((t.negatives[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn similarity_grads_match_finite_differences() {
        for kind in [LossKind::GntXent, LossKind::NtXent] {
            let b = random_batch(21, 6, 8, true);
            let s = similarity_matrices(&b, 0.1).unwrap();
            let r = contrastive_loss(&s, kind).unwrap();
            for mk in s.kinds() {
                let base = s.matrix(mk).unwrap().clone();
                let fd = finite_difference_gradient(
                    |m| {
                        let mut p = s.clone();
                        *p.matrix_mut(mk).unwrap() = m.clone();
                        contrastive_loss(&p, kind).unwrap().total
                    },
                    &base,
                    1e-5,
                );
                let err = max_relative_error(r.grads.matrix(mk).unwrap(), &fd);
                assert!(err < 1e-6, "{kind:?} {mk:?}: {err}");
            }
        }
    }

    #[test]
    fn embedding_grads_match_finite_differences() {
        let b = random_batch(33, 5, 6, true);
        let tau = 0.1;
        let (_, g) = full_loss_backward(&b, tau, LossKind::GntXent).unwrap();
        let loss_of = |x: &Tensor<f64>, y: &Tensor<f64>, z: &Tensor<f64>| {
            let s = ScaledSimilarities::from_rows(x, y, Some(z), tau).unwrap();
            gnt_xent(&s).unwrap().total
        };
        let z = b.z().unwrap();
        let fx = finite_difference_gradient(|x| loss_of(x, b.y(), z), b.x(), 1e-6);
        let fy = finite_difference_gradient(|y| loss_of(b.x(), y, z), b.y(), 1e-6);
        let fz = finite_difference_gradient(|z| loss_of(b.x(), b.y(), z), z, 1e-6);
        assert!(max_relative_error(&g.x, &fx) < 1e-5);
        assert!(max_relative_error(&g.y, &fy) < 1e-5);
        assert!(max_relative_error(g.z.as_ref().unwrap(), &fz) < 1e-5);
    }

    #[test]
    fn permutation_equivariance() {
        let b = random_batch(8, 5, 4, true);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &Tensor<f64>| {
            let d = m.shape()[1];
            let data = perm.iter().flat_map(|&p| m.row(p).to_vec()).collect();
            Tensor::new([perm.len(), d], data).unwrap()
        };
        let pb = BatchEmbeddings::new(
            permute(b.x()),
            permute(b.y()),
            Some(permute(b.z().unwrap())),
        )
        .unwrap();
        let (r1, g1) = full_loss_backward(&b, 0.1, LossKind::GntXent).unwrap();
        let (r2, g2) = full_loss_backward(&pb, 0.1, LossKind::GntXent).unwrap();
        assert!((r1.total - r2.total).abs() < 1e-12);
        assert!(max_relative_error(&permute(&g1.x), &g2.x) < 1e-12);
        assert!(max_relative_error(&permute(g1.z.as_ref().unwrap()), g2.z.as_ref().unwrap()) < 1e-12);
    }

    #[test]
    fn doubling_temperature_halves_scaled_inputs() {
        let b = random_batch(4, 6, 8, true);
        let s1 = similarity_matrices(&b, 0.1).unwrap();
        let s2 = similarity_matrices(&b, 0.2).unwrap();
        for (a, c) in s1.xy.data().iter().zip(s2.xy.data()) {
            assert!((a / 2.0 - c).abs() < 1e-12);
        }
        let r2 = gnt_xent(&s2).unwrap();
        let naive = naive_gnt(&s2);
        assert!((r2.total - naive.iter().sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn nt_xent_examples() {
        let r = nt_xent(0.4, &[0.4]).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
        let r = nt_xent(1.0, &[0.0, 0.0]).unwrap();
        let direct = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((r.loss - direct).abs() < 1e-12);
        assert!((r.loss - 0.5514).abs() < 1e-4);
        assert!(matches!(nt_xent(1.0, &[]), Err(Error::Parameter(_))));
        let far = nt_xent(200.0, &[0.0, 0.0]).unwrap();
        assert!(far.loss < 1e-80 && far.grad_pos.abs() < 1e-80);
    }

    #[test]
    fn extreme_similarities_stay_finite() {
        let tau = 0.01;
        for v in [1.0 / tau, -1.0 / tau] {
            let r = gnt_xent(&constant_sims(4, v)).unwrap();
            assert!(r.total.is_finite());
            let mut s = constant_sims(4, -1.0 / tau);
            for i in 0..4 {
                s.xy.data_mut()[i * 4 + i] = v;
            }
            let r = contrastive_loss(&s, LossKind::NtXent).unwrap();
            assert!(r.total.is_finite());
            assert!(r.grads.xy.is_finite());
        }
    }

    #[test]
    fn two_view_batch_has_only_core_terms() {
        let b = random_batch(2, 4, 4, false);
        let r = gnt_xent(&similarity_matrices(&b, 0.1).unwrap()).unwrap();
        assert_eq!(r.terms.len(), 4);
        assert_eq!(r.components[1], 0.0);
        assert_eq!(r.components[2], 0.0);
    }
}
