//! A small trainable embedder with a classifier head.
//!
//! ```text
//! x --[W1, b1, tanh]--> u --[W, b]--> h --normalize--> f --[V, c]--> logits
//! ```
//!
//! The hidden layer is optional; without it `u = x`. `f` is the retrieval
//! feature used by the similarity matrix and the triplet loss, and the
//! classifier reads `f` as well. All parameters live in one flat buffer so
//! gradients, SGD and checkpoints share a single layout:
//! `W1 (d_in x h), b1 (h), W (d_u x d_out), b (d_out), V (d_out x classes), c (classes)`,
//! each matrix row-major with the input index first.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{euclidean, EmbeddingMatrix, FeatureVector, ZERO_NORM};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_in: usize,
    pub d_out: usize,
    /// Hidden width; 0 means no hidden layer.
    pub hidden: usize,
    /// Classifier width, the number of virtual identities.
    pub classes: usize,
}

impl ModelShape {
    fn d_u(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.d_in
        }
    }

    fn offsets(&self) -> [usize; 7] {
        let h = self.hidden;
        let w1 = 0;
        let b1 = w1 + self.d_in * h;
        let w = b1 + h;
        let b = w + self.d_u() * self.d_out;
        let v = b + self.d_out;
        let c = v + self.d_out * self.classes;
        let end = c + self.classes;
        [w1, b1, w, b, v, c, end]
    }

    pub fn num_params(&self) -> usize {
        self.offsets()[6]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.classes == 0 {
            return Err(Error::invalid(
                "model",
                "d_in, d_out and classes must be positive",
            ));
        }
        Ok(())
    }
}

/// Weights of the embedder and classifier. Also used for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    shape: ModelShape,
    data: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
struct Trace {
    hidden: Vec<f64>,
    h_norm: f64,
    f: Vec<f64>,
}

impl EmbedderParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    /// Gaussian initialization scaled by fan-in; classifier weights start
    /// small and biases at zero.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut p = Self::zeros(shape);
        let mut r = rng::stream(seed, 0);
        let [w1, b1, w, b, v, _, _] = shape.offsets();
        let fill = |slice: &mut [f64], std: f64, r: &mut rand_chacha::ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            slice.iter_mut().for_each(|x| *x = dist.sample(r));
        };
        fill(
            &mut p.data[w1..b1],
            (1.0 / shape.d_in as f64).sqrt(),
            &mut r,
        );
        fill(&mut p.data[w..b], (1.0 / shape.d_u() as f64).sqrt(), &mut r);
        fill(
            &mut p.data[v..v + shape.d_out * shape.classes],
            0.01,
            &mut r,
        );
        Ok(p)
    }

    pub fn from_raw(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.num_params() {
            return Err(Error::DimensionMismatch {
                expected: shape.num_params(),
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn part(&self, i: usize) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[i]..o[i + 1]]
    }

    fn forward(&self, x: &[f64]) -> Result<Trace> {
        let s = self.shape;
        if x.len() != s.d_in {
            return Err(Error::DimensionMismatch {
                expected: s.d_in,
                got: x.len(),
            });
        }
        let hidden = if s.hidden > 0 {
            let mut a = self.part(1).to_vec();
            affine_acc(self.part(0), x, &mut a);
            a.iter_mut().for_each(|v| *v = v.tanh());
            a
        } else {
            Vec::new()
        };
        let u = if s.hidden > 0 { &hidden[..] } else { x };
        let mut h = self.part(3).to_vec();
        affine_acc(self.part(2), u, &mut h);
        let h_norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !h_norm.is_finite() {
            return Err(Error::NonFinite);
        }
        if h_norm < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        let f = h.iter().map(|v| v / h_norm).collect();
        Ok(Trace { hidden, h_norm, f })
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// gradient with respect to the normalized feature `f` is `df`.
    fn backward_feature(&self, x: &[f64], t: &Trace, df: &[f64], grad: &mut Self) {
        let s = self.shape;
        let o = s.offsets();
        let fd: f64 = t.f.iter().zip(df).map(|(a, b)| a * b).sum();
        let dh: Vec<f64> =
            t.f.iter()
                .zip(df)
                .map(|(fi, dfi)| (dfi - fi * fd) / t.h_norm)
                .collect();
        let u = if s.hidden > 0 { &t.hidden[..] } else { x };
        outer_acc(&mut grad.data[o[2]..o[3]], u, &dh);
        add_acc(&mut grad.data[o[3]..o[4]], &dh);
        if s.hidden > 0 {
            let w = self.part(2);
            let da: Vec<f64> = (0..s.hidden)
                .map(|i| {
                    let du: f64 = w[i * s.d_out..(i + 1) * s.d_out]
                        .iter()
                        .zip(&dh)
                        .map(|(a, b)| a * b)
                        .sum();
                    du * (1.0 - t.hidden[i] * t.hidden[i])
                })
                .collect();
            outer_acc(&mut grad.data[o[0]..o[1]], x, &da);
            add_acc(&mut grad.data[o[1]..o[2]], &da);
        }
    }

    /// Normalized embedding of one input.
    pub fn embed(&self, x: &[f64]) -> Result<FeatureVector> {
        FeatureVector::new(self.forward(x)?.f)
    }

    /// Embeds every row; the result carries the input metadata and is
    /// flagged as normalized.
    pub fn embed_matrix(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let rows: Vec<Vec<f64>> = (0..e.len())
            .into_par_iter()
            .map(|i| self.forward(e.row(i)).map(|t| t.f))
            .collect::<Result<_>>()?;
        let data = rows.concat();
        e.with_data(self.shape.d_out, data)?.normalized()
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        let mut z = self.part(5).to_vec();
        affine_acc(self.part(4), f, &mut z);
        z
    }

    /// Class predictions for each row.
    pub fn predict(&self, e: &EmbeddingMatrix) -> Result<Vec<usize>> {
        (0..e.len())
            .map(|i| {
                let t = self.forward(e.row(i))?;
                let z = self.logits(&t.f);
                Ok(argmax(&z))
            })
            .collect()
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &Self, lr: f64) {
        assert_eq!(self.shape, grad.shape, "gradient shape mismatch");
        self.data
            .iter_mut()
            .zip(&grad.data)
            .for_each(|(p, g)| *p -= lr * g);
    }

    fn axpy(&mut self, a: f64, other: &Self) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(p, g)| *p += a * g);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `out[j] += sum_i w[i][j] * x[i]` for row-major `w` of shape `x.len() x out.len()`.
fn affine_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let m = out.len();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
            *o += wij * xi;
        }
    }
}

fn outer_acc(g: &mut [f64], x: &[f64], d: &[f64]) {
    let m = d.len();
    for (i, xi) in x.iter().enumerate() {
        for (gij, dj) in g[i * m..(i + 1) * m].iter_mut().zip(d) {
            *gij += xi * dj;
        }
    }
}

fn add_acc(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
}

/// Loss value with its parameter gradient.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: EmbedderParams,
}

/// A pseudo-labeled classification batch: rows of `items`, labels taken
/// from each row's `pseudo_label`.
#[derive(Clone, Copy, Debug)]
pub struct ClassBatch<'a> {
    pub items: &'a EmbeddingMatrix,
    pub rows: &'a [usize],
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy_loss(params: &EmbedderParams, batch: ClassBatch<'_>) -> Result<LossGrad> {
    let mut grad = EmbedderParams::zeros(params.shape);
    if batch.rows.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let classes = params.shape.classes;
    let o = params.shape.offsets();
    let scale = 1.0 / batch.rows.len() as f64;
    let mut loss = 0.0;
    for &row in batch.rows {
        let label = batch.items.meta()[row]
            .pseudo_label
            .ok_or(Error::NoGroundTruth)? as usize;
        if label >= classes {
            return Err(Error::invalid(
                "pseudo_label",
                format!("label {label} >= {classes} classes"),
            ));
        }
        let x = batch.items.row(row);
        let t = params.forward(x)?;
        let z = params.logits(&t.f);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = exp.iter().sum();
        loss += scale * (total.ln() + zmax - z[label]);
        let mut dz: Vec<f64> = exp.iter().map(|e| scale * e / total).collect();
        dz[label] -= scale;
        outer_acc(&mut grad.data[o[4]..o[5]], &t.f, &dz);
        add_acc(&mut grad.data[o[5]..o[6]], &dz);
        let v = params.part(4);
        let df: Vec<f64> = (0..params.shape.d_out)
            .map(|j| {
                v[j * classes..(j + 1) * classes]
                    .iter()
                    .zip(&dz)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        params.backward_feature(x, &t, &df, &mut grad);
    }
    Ok(LossGrad { loss, grad })
}

/// Which batch members may serve as the hardest negative of an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// The other anchors and their positives (`2 N_r - 2` slots).
    #[default]
    AnchorsAndPositives,
    /// The other anchors only.
    AnchorsOnly,
}

/// `N_r` mined pairs `(anchor_row, positive_row)` over `items`.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'a> {
    pub items: &'a EmbeddingMatrix,
    pub pairs: &'a [(usize, usize)],
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: EmbedderParams,
    /// Row chosen as the hardest negative for each anchor, `None` when no
    /// admissible candidate exists.
    pub negatives: Vec<Option<usize>>,
    /// Triplets with a positive hinge.
    pub active: usize,
}

/// Summed triplet hinge `[d(p,q) - d(p,z) + m]_+` with the closest
/// admissible batch member as `z`. The choice of `z` is held fixed when
/// differentiating, and a zero distance contributes a zero subgradient.
pub fn triplet_loss(
    params: &EmbedderParams,
    batch: TripletBatch<'_>,
    margin: f64,
    pool: NegativePool,
) -> Result<TripletOutput> {
    let n = batch.pairs.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    // Slots 0..n are anchors, n..2n their positives.
    let rows: Vec<usize> = batch
        .pairs
        .iter()
        .map(|p| p.0)
        .chain(batch.pairs.iter().map(|p| p.1))
        .collect();
    let traces: Vec<Trace> = rows
        .iter()
        .map(|&r| params.forward(batch.items.row(r)))
        .collect::<Result<_>>()?;
    let d_out = params.shape.d_out;
    let mut dfs = vec![vec![0.0; d_out]; 2 * n];
    let mut loss = 0.0;
    let mut active = 0;
    let mut negatives = Vec::with_capacity(n);
    let slots = match pool {
        NegativePool::AnchorsAndPositives => 2 * n,
        NegativePool::AnchorsOnly => n,
    };
    for i in 0..n {
        let (p, q) = batch.pairs[i];
        let fp = &traces[i].f;
        let mut best: Option<(usize, f64)> = None;
        for j in (0..slots).filter(|&j| j != i && j != n + i) {
            if rows[j] == p || rows[j] == q {
                continue;
            }
            let d = euclidean(fp, &traces[j].f);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let Some((z, d_pz)) = best else {
            negatives.push(None);
            continue;
        };
        negatives.push(Some(rows[z]));
        let fq = &traces[n + i].f;
        let d_pq = euclidean(fp, fq);
        let hinge = d_pq - d_pz + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        active += 1;
        let fz = &traces[z].f;
        if d_pq > 0.0 {
            for t in 0..d_out {
                let g = (fp[t] - fq[t]) / d_pq;
                dfs[i][t] += g;
                dfs[n + i][t] -= g;
            }
        }
        if d_pz > 0.0 {
            for t in 0..d_out {
                let g = (fp[t] - fz[t]) / d_pz;
                dfs[i][t] -= g;
                dfs[z][t] += g;
            }
        }
    }
    let mut grad = EmbedderParams::zeros(params.shape);
    for (slot, df) in dfs.iter().enumerate() {
        if df.iter().any(|v| *v != 0.0) {
            params.backward_feature(batch.items.row(rows[slot]), &traces[slot], df, &mut grad);
        }
    }
    Ok(TripletOutput {
        loss,
        grad,
        negatives,
        active,
    })
}

#[derive(Clone, Debug)]
pub struct CombinedOutput {
    pub loss: f64,
    pub cls_loss: f64,
    pub tri_loss: f64,
    pub grad: EmbedderParams,
    pub negatives: Vec<Option<usize>>,
}

/// `L = L_cls + lambda * L_tri` and its gradient.
pub fn combined_loss(
    params: &EmbedderParams,
    virtual_batch: ClassBatch<'_>,
    triplet_batch: TripletBatch<'_>,
    lambda: f64,
    margin: f64,
    pool: NegativePool,
) -> Result<CombinedOutput> {
    let cls = cross_entropy_loss(params, virtual_batch)?;
    let tri = triplet_loss(params, triplet_batch, margin, pool)?;
    let mut grad = cls.grad;
    grad.axpy(lambda, &tri.grad);
    Ok(CombinedOutput {
        loss: cls.loss + lambda * tri.loss,
        cls_loss: cls.loss,
        tri_loss: tri.loss,
        grad,
        negatives: tri.negatives,
    })
}
