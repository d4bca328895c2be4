//! Test-only oracles written straight from the definitions, plus random
//! instance builders. Nothing here calls the mining or metric code it
//! checks.

#![allow(dead_code)]

pub mod invariants;

use cfmine_core::embedding::{EmbeddingMatrix, ItemMeta, SimilarityMatrix};
use cfmine_core::model::EmbedderParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn meta_with(cams: &[u32], ids: Option<&[u64]>) -> Vec<ItemMeta> {
    cams.iter()
        .enumerate()
        .map(|(i, &c)| ItemMeta {
            item_id: i as u64,
            camera_id: c,
            true_identity: ids.map(|v| v[i]),
            pseudo_label: None,
        })
        .collect()
}

/// Random symmetric similarity matrix with unit diagonal. Off-diagonal
/// values are drawn from `levels` distinct values so ties are common.
pub fn random_similarity(r: &mut impl Rng, n: usize, levels: u32) -> SimilarityMatrix {
    let mut v = vec![0.0; n * n];
    for p in 0..n {
        v[p * n + p] = 1.0;
        for q in 0..p {
            let x = (-2.0 * (r.random_range(0..levels) as f64 + 1.0) / levels as f64).exp();
            v[p * n + q] = x;
            v[q * n + p] = x;
        }
    }
    SimilarityMatrix::from_values(n, v).unwrap()
}

/// Random rows in `dim` dimensions with the given metadata, normalized.
pub fn random_embedding(
    r: &mut impl Rng,
    meta: Vec<ItemMeta>,
    dim: usize,
    cams: u32,
) -> EmbeddingMatrix {
    let data: Vec<f64> = (0..meta.len() * dim)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    EmbeddingMatrix::from_flat(dim, data, meta, cams)
        .unwrap()
        .normalized()
        .unwrap()
}

/// Mining oracle: full sort for `N(p,k)`, set membership for `R_k`,
/// explicit intersection for `C`, the weighted sum for `F`, and a scan for
/// the argmax (lowest id among scores within 1e-12 of the maximum).
pub fn oracle_mine(
    s: &[Vec<f64>],
    cams: &[u32],
    k: usize,
    exclude: bool,
) -> Vec<(usize, usize, f64)> {
    let n = s.len();
    let knn: Vec<Vec<usize>> = (0..n)
        .map(|p| {
            let mut cand: Vec<usize> = (0..n)
                .filter(|&q| q != p && (!exclude || cams[q] != cams[p]))
                .collect();
            cand.sort_by(|&a, &b| s[p][b].partial_cmp(&s[p][a]).unwrap().then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect();
    let recip: Vec<Vec<usize>> = (0..n)
        .map(|p| {
            (0..n)
                .filter(|&q| knn[p].contains(&q) && knn[q].contains(&p))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for p in 0..n {
        let mut scored = Vec::new();
        for &q in &recip[p] {
            let c: Vec<usize> = recip[p]
                .iter()
                .copied()
                .filter(|x| recip[q].contains(x))
                .collect();
            let denom: f64 = c.iter().map(|&ci| s[q][ci]).sum();
            let mut f = s[p][q];
            for &ci in &c {
                f += s[q][ci] / denom * s[p][ci];
            }
            scored.push((q, f));
        }
        let top = scored.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        if let Some(&(q, f)) = scored.iter().find(|x| x.1 >= top - 1e-12) {
            out.push((p, q, f));
        }
    }
    out
}

pub fn to_rows(s: &SimilarityMatrix) -> Vec<Vec<f64>> {
    (0..s.n()).map(|p| s.row(p).to_vec()).collect()
}

/// Metric oracle over explicit similarity scores. Gallery entries with the
/// query's camera and identity are dropped, the rest sorted by score
/// descending then index. Returns per-query relevance vectors.
pub fn oracle_relevance(
    scores: &[Vec<f64>],
    q_meta: &[(u32, u64)],
    g_meta: &[(u32, u64)],
) -> Vec<Vec<bool>> {
    scores
        .iter()
        .zip(q_meta)
        .map(|(row, &(qc, qid))| {
            let mut idx: Vec<usize> = (0..g_meta.len())
                .filter(|&g| !(g_meta[g].0 == qc && g_meta[g].1 == qid))
                .collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx.iter().map(|&g| g_meta[g].1 == qid).collect()
        })
        .collect()
}

/// AP by counting relevant items in each prefix.
pub fn oracle_ap(rel: &[bool]) -> Option<f64> {
    let total = rel.iter().filter(|x| **x).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..rel.len() {
        if rel[i] {
            let in_prefix = rel[..=i].iter().filter(|x| **x).count();
            sum += in_prefix as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn oracle_map(rels: &[Vec<bool>]) -> f64 {
    let aps: Vec<f64> = rels.iter().filter_map(|r| oracle_ap(r)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn oracle_cmc(rels: &[Vec<bool>], r: usize) -> f64 {
    let valid: Vec<&Vec<bool>> = rels.iter().filter(|x| x.contains(&true)).collect();
    if valid.is_empty() {
        return 0.0;
    }
    let hits = valid
        .iter()
        .filter(|x| x.iter().take(r).any(|b| *b))
        .count();
    hits as f64 / valid.len() as f64
}

/// Central finite-difference gradient of `f` at `params`.
pub fn numeric_grad(
    params: &EmbedderParams,
    step: f64,
    f: impl Fn(&EmbedderParams) -> f64,
) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.as_slice().len())
        .map(|i| {
            let x = params.as_slice()[i];
            p.as_mut_slice()[i] = x + step;
            let up = f(&p);
            p.as_mut_slice()[i] = x - step;
            let down = f(&p);
            p.as_mut_slice()[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / (||a|| + ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm(a) + norm(b);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

use cfmine_core::model::{
    combined_loss, cross_entropy_loss, triplet_loss, ClassBatch, ModelShape, NegativePool,
    TripletBatch,
};

/// A random model with classification and triplet batches.
pub struct GradFixture {
    pub params: EmbedderParams,
    pub virt: EmbeddingMatrix,
    pub rows: Vec<usize>,
    pub real: EmbeddingMatrix,
    pub pairs: Vec<(usize, usize)>,
}

pub fn grad_fixture(seed: u64, hidden: usize) -> GradFixture {
    let mut r = rng(seed);
    let shape = ModelShape {
        d_in: 4,
        d_out: 3,
        hidden,
        classes: 5,
    };
    let data = (0..shape.num_params())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let params = EmbedderParams::from_raw(shape, data).unwrap();
    let virt_meta: Vec<ItemMeta> = (0..6)
        .map(|i| ItemMeta {
            item_id: i,
            camera_id: 0,
            true_identity: Some(i % 5),
            pseudo_label: Some(i % 5),
        })
        .collect();
    let virt = EmbeddingMatrix::from_flat(
        4,
        (0..24).map(|_| r.random_range(-2.0..2.0)).collect(),
        virt_meta,
        1,
    )
    .unwrap();
    let real = EmbeddingMatrix::from_flat(
        4,
        (0..40).map(|_| r.random_range(-2.0..2.0)).collect(),
        meta_with(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], None),
        2,
    )
    .unwrap();
    let pairs = (0..4).map(|i| (2 * i, 2 * i + 1)).collect();
    GradFixture {
        params,
        virt,
        rows: vec![0, 1, 2, 3, 4, 5],
        real,
        pairs,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Whether every hinge and every hardest-negative choice is at least `gap`
/// away from switching, so the loss is smooth around `params`.
pub fn triplet_is_smooth(fx: &GradFixture, margin: f64, gap: f64) -> bool {
    let n = fx.pairs.len();
    let rows: Vec<usize> = fx
        .pairs
        .iter()
        .map(|p| p.0)
        .chain(fx.pairs.iter().map(|p| p.1))
        .collect();
    let emb: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| fx.params.embed(fx.real.row(r)).unwrap().into_inner())
        .collect();
    for i in 0..n {
        let mut d: Vec<f64> = (0..2 * n)
            .filter(|&j| j != i && j != n + i && rows[j] != rows[i] && rows[j] != rows[n + i])
            .map(|j| dist(&emb[i], &emb[j]))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if d.len() >= 2 && d[1] - d[0] < gap {
            return false;
        }
        let hinge = dist(&emb[i], &emb[n + i]) - d[0] + margin;
        if hinge.abs() < gap {
            return false;
        }
    }
    true
}

/// Relative errors of the analytic gradients of `L_cls`, `L_tri` and
/// `L_cls + lambda L_tri` against central differences with step 1e-5.
pub fn gradient_errors(fx: &GradFixture, lambda: f64, margin: f64) -> [f64; 3] {
    let pool = NegativePool::AnchorsAndPositives;
    let cls = |p: &EmbedderParams| {
        cross_entropy_loss(
            p,
            ClassBatch {
                items: &fx.virt,
                rows: &fx.rows,
            },
        )
        .unwrap()
    };
    let tri = |p: &EmbedderParams| {
        triplet_loss(
            p,
            TripletBatch {
                items: &fx.real,
                pairs: &fx.pairs,
            },
            margin,
            pool,
        )
        .unwrap()
    };
    let comb = |p: &EmbedderParams| {
        combined_loss(
            p,
            ClassBatch {
                items: &fx.virt,
                rows: &fx.rows,
            },
            TripletBatch {
                items: &fx.real,
                pairs: &fx.pairs,
            },
            lambda,
            margin,
            pool,
        )
        .unwrap()
    };
    let h = 1e-5;
    let e_cls = relative_error(
        cls(&fx.params).grad.as_slice(),
        &numeric_grad(&fx.params, h, |p| cls(p).loss),
    );
    let e_tri = relative_error(
        tri(&fx.params).grad.as_slice(),
        &numeric_grad(&fx.params, h, |p| tri(p).loss),
    );
    let e_comb = relative_error(
        comb(&fx.params).grad.as_slice(),
        &numeric_grad(&fx.params, h, |p| comb(p).loss),
    );
    [e_cls, e_tri, e_comb]
}
