//! Invariants shared by the property tests and the acceptance gate. Each
//! check builds its instance from a `Case` so both callers draw the same
//! distribution.

use std::sync::OnceLock;

use cfmine_core::embedding::{pairwise_similarity, EmbeddingMatrix, ItemMeta, SimilarityMatrix};
use cfmine_core::eval::{cmc, mean_ap, rank_gallery};
use cfmine_core::mining::{
    cf_similarity, collaborator_weights, collaborators, mine_all, reciprocal_set, top_k_neighbors,
    ReciprocalSet,
};
use cfmine_core::model::{triplet_loss, EmbedderParams, ModelShape, NegativePool, TripletBatch};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;

use super::{
    oracle_cmc, oracle_map, oracle_mine, oracle_relevance, random_similarity, rng, to_rows,
};

#[derive(Clone, Debug)]
pub struct Case {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub cams: u32,
}

pub fn case() -> impl Strategy<Value = Case> {
    case_up_to(20)
}

/// Cases with at most `max_n` items.
pub fn case_up_to(max_n: usize) -> impl Strategy<Value = Case> {
    (
        any::<u64>(),
        3usize..=max_n,
        1usize..=5,
        1usize..=6,
        1u32..=4,
    )
        .prop_map(|(seed, n, k, dim, cams)| Case {
            seed,
            n,
            k: k.min(n - 1),
            dim,
            cams,
        })
}

pub type Check = fn(&Case) -> Result<(), TestCaseError>;

/// Every invariant by name.
pub const SUITES: &[(&str, Check)] = &[
    (
        "similarity symmetric, unit diagonal, in range",
        similarity_properties,
    ),
    ("reciprocity", reciprocity),
    ("weight normalization", weight_normalization),
    ("F-dominance", f_dominance),
    ("mining matches oracle", mining_oracle),
    ("monotone transform keeps k-NN, R and C", monotone_transform),
    ("CMC monotone", cmc_monotone),
    ("metrics match oracle", metrics_oracle),
    ("cross-camera pair constraint", cross_camera),
    ("determinism hashes", determinism),
    ("embeddings unit-norm", embed_unit_norm),
    (
        "triplet loss non-negative, negatives exclude pair",
        triplet_properties,
    ),
];

fn cameras(c: &Case, r: &mut impl Rng) -> Vec<u32> {
    (0..c.n).map(|_| r.random_range(0..c.cams)).collect()
}

fn meta(cams: &[u32], ids: Option<&[u64]>) -> Vec<ItemMeta> {
    super::meta_with(cams, ids)
}

/// Rows on a coarse grid so duplicate points and tied distances occur.
fn grid_embedding(c: &Case, r: &mut impl Rng, m: Vec<ItemMeta>) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(c.n * c.dim);
    for _ in 0..c.n {
        let mut row: Vec<f64> = (0..c.dim)
            .map(|_| r.random_range(-1i32..=1) as f64)
            .collect();
        if row.iter().all(|x| *x == 0.0) {
            row[0] = 1.0;
        }
        data.extend(row);
    }
    EmbeddingMatrix::from_flat(c.dim, data, m, c.cams)
        .unwrap()
        .normalized()
        .unwrap()
}

fn similarity_instance(c: &Case) -> (SimilarityMatrix, Vec<ItemMeta>, bool) {
    let mut r = rng(c.seed);
    let s = random_similarity(&mut r, c.n, 4);
    let cams = cameras(c, &mut r);
    let exclude = r.random_bool(0.7);
    (s, meta(&cams, None), exclude)
}

fn reciprocal_sets(
    s: &SimilarityMatrix,
    m: &[ItemMeta],
    k: usize,
    exclude: bool,
) -> Vec<ReciprocalSet> {
    let idx = top_k_neighbors(s, m, k, exclude).unwrap();
    (0..s.n()).map(|p| reciprocal_set(&idx, p)).collect()
}

pub fn similarity_properties(c: &Case) -> Result<(), TestCaseError> {
    let mut r = rng(c.seed);
    let cams = cameras(c, &mut r);
    let e = grid_embedding(c, &mut r, meta(&cams, None));
    let s = pairwise_similarity(&e).unwrap();
    let lo = (-2.0f64).exp();
    for p in 0..c.n {
        prop_assert_eq!(s.get(p, p), 1.0);
        for q in 0..c.n {
            prop_assert_eq!(s.get(p, q), s.get(q, p));
            prop_assert!(s.get(p, q) >= lo - 1e-15 && s.get(p, q) <= 1.0);
        }
    }
    Ok(())
}

pub fn reciprocity(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, exclude) = similarity_instance(c);
    let idx = top_k_neighbors(&s, &m, c.k, exclude).unwrap();
    let rs: Vec<ReciprocalSet> = (0..c.n).map(|p| reciprocal_set(&idx, p)).collect();
    for p in 0..c.n {
        prop_assert!(idx.list(p).len() <= c.k);
        for q in 0..c.n {
            prop_assert_eq!(rs[p].contains(q), rs[q].contains(p));
            if rs[p].contains(q) {
                prop_assert!(idx.contains(p, q) && idx.contains(q, p));
            }
        }
    }
    Ok(())
}

pub fn weight_normalization(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, exclude) = similarity_instance(c);
    let rs = reciprocal_sets(&s, &m, c.k, exclude);
    for p in 0..c.n {
        for &q in &rs[p].members {
            let col = collaborators(&rs[p], &rs[q]);
            for &x in &col.members {
                prop_assert!(rs[p].contains(x) && rs[q].contains(x));
            }
            if col.members.is_empty() {
                continue;
            }
            let w = collaborator_weights(&s, q, &col);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    Ok(())
}

pub fn f_dominance(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, exclude) = similarity_instance(c);
    let rs = reciprocal_sets(&s, &m, c.k, exclude);
    for p in 0..c.n {
        for &q in &rs[p].members {
            let col = collaborators(&rs[p], &rs[q]);
            let f = cf_similarity(&s, p, q, &col);
            let top = col.members.iter().map(|&x| s.get(p, x)).fold(0.0, f64::max);
            prop_assert!(f >= s.get(p, q));
            prop_assert!(f <= s.get(p, q) + top + 1e-12);
        }
    }
    Ok(())
}

pub fn mining_oracle(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, exclude) = similarity_instance(c);
    let cams: Vec<u32> = m.iter().map(|x| x.camera_id).collect();
    let got = mine_all(&s, &m, c.k, exclude).unwrap();
    let want = oracle_mine(&to_rows(&s), &cams, c.k, exclude);
    prop_assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        prop_assert_eq!((g.anchor, g.positive), (w.0, w.1));
        prop_assert!((g.f_score - w.2).abs() < 1e-9);
    }
    Ok(())
}

pub fn monotone_transform(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, exclude) = similarity_instance(c);
    let squared =
        SimilarityMatrix::from_values(c.n, s.values().iter().map(|x| x * x).collect()).unwrap();
    let a = top_k_neighbors(&s, &m, c.k, exclude).unwrap();
    let b = top_k_neighbors(&squared, &m, c.k, exclude).unwrap();
    for p in 0..c.n {
        let la: Vec<usize> = a.list(p).iter().map(|x| x.0).collect();
        let lb: Vec<usize> = b.list(p).iter().map(|x| x.0).collect();
        prop_assert_eq!(la, lb);
    }
    let ra: Vec<ReciprocalSet> = (0..c.n).map(|p| reciprocal_set(&a, p)).collect();
    let rb: Vec<ReciprocalSet> = (0..c.n).map(|p| reciprocal_set(&b, p)).collect();
    for p in 0..c.n {
        prop_assert_eq!(&ra[p].members, &rb[p].members);
        for &q in &ra[p].members {
            prop_assert_eq!(
                collaborators(&ra[p], &ra[q]).members,
                collaborators(&rb[p], &rb[q]).members
            );
        }
    }
    Ok(())
}

fn labeled_embedding(c: &Case) -> EmbeddingMatrix {
    let mut r = rng(c.seed);
    let cams = cameras(c, &mut r);
    let people = (c.n / 3).max(1) as u64;
    let ids: Vec<u64> = (0..c.n).map(|_| r.random_range(0..people)).collect();
    grid_embedding(c, &mut r, meta(&cams, Some(&ids)))
}

pub fn cmc_monotone(c: &Case) -> Result<(), TestCaseError> {
    let e = labeled_embedding(c);
    let lists = rank_gallery(&e, &e).unwrap();
    let ranks: Vec<usize> = (1..=c.n).collect();
    let curve = cmc(&lists, &ranks);
    let values: Vec<f64> = ranks.iter().map(|r| curve[r]).collect();
    for w in values.windows(2) {
        prop_assert!(w[0] <= w[1]);
    }
    prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    if mean_ap(&lists).evaluated > 0 {
        prop_assert_eq!(values[c.n - 1], 1.0);
    }
    Ok(())
}

pub fn metrics_oracle(c: &Case) -> Result<(), TestCaseError> {
    let e = labeled_embedding(c);
    let info: Vec<(u32, u64)> = e
        .meta()
        .iter()
        .map(|m| (m.camera_id, m.true_identity.unwrap()))
        .collect();
    let scores: Vec<Vec<f64>> = (0..c.n)
        .map(|a| {
            (0..c.n)
                .map(|b| {
                    let d: f64 = e
                        .row(a)
                        .iter()
                        .zip(e.row(b))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    (-d.sqrt().min(2.0)).exp()
                })
                .collect()
        })
        .collect();
    let rels = oracle_relevance(&scores, &info, &info);
    let lists = rank_gallery(&e, &e).unwrap();
    for (l, rel) in lists.iter().zip(&rels) {
        prop_assert_eq!(&l.relevant, rel);
    }
    prop_assert_eq!(mean_ap(&lists).value, oracle_map(&rels));
    let ranks: Vec<usize> = (1..=c.n).collect();
    let curve = cmc(&lists, &ranks);
    for r in ranks {
        prop_assert_eq!(curve[&r], oracle_cmc(&rels, r));
    }
    Ok(())
}

pub fn cross_camera(c: &Case) -> Result<(), TestCaseError> {
    let (s, m, _) = similarity_instance(c);
    let idx = top_k_neighbors(&s, &m, c.k, true).unwrap();
    for p in 0..c.n {
        for &(q, _) in idx.list(p) {
            prop_assert_ne!(m[p].camera_id, m[q].camera_id);
        }
    }
    for pair in mine_all(&s, &m, c.k, true).unwrap() {
        prop_assert_ne!(m[pair.anchor].camera_id, m[pair.positive].camera_id);
    }
    Ok(())
}

fn single_thread() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
    })
}

pub fn determinism(c: &Case) -> Result<(), TestCaseError> {
    let mut r = rng(c.seed);
    let cams = cameras(c, &mut r);
    let e = grid_embedding(c, &mut r, meta(&cams, None));
    let a = pairwise_similarity(&e).unwrap();
    let b = single_thread().install(|| pairwise_similarity(&e).unwrap());
    prop_assert_eq!(a.content_hash(), b.content_hash());
    let pa = mine_all(&a, e.meta(), c.k, true).unwrap();
    let pb = single_thread().install(|| mine_all(&b, e.meta(), c.k, true).unwrap());
    prop_assert_eq!(pa, pb);
    let shape = ModelShape {
        d_in: c.dim,
        d_out: 2,
        hidden: c.k - 1,
        classes: 3,
    };
    let h1 = EmbedderParams::init(shape, c.seed).unwrap().content_hash();
    let h2 = EmbedderParams::init(shape, c.seed).unwrap().content_hash();
    prop_assert_eq!(h1, h2);
    Ok(())
}

fn random_params(c: &Case, r: &mut impl Rng) -> EmbedderParams {
    let shape = ModelShape {
        d_in: c.dim,
        d_out: 3,
        hidden: c.k - 1,
        classes: 2,
    };
    let data = (0..shape.num_params())
        .map(|_| r.random_range(-2.0..2.0))
        .collect();
    EmbedderParams::from_raw(shape, data).unwrap()
}

pub fn embed_unit_norm(c: &Case) -> Result<(), TestCaseError> {
    let mut r = rng(c.seed);
    let params = random_params(c, &mut r);
    let x: Vec<f64> = (0..c.dim).map(|_| r.random_range(-3.0..3.0)).collect();
    let f = params.embed(&x).unwrap();
    let norm = f.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    prop_assert!((norm - 1.0).abs() < 1e-12);
    Ok(())
}

pub fn triplet_properties(c: &Case) -> Result<(), TestCaseError> {
    let mut r = rng(c.seed);
    let params = random_params(c, &mut r);
    let cams = cameras(c, &mut r);
    let data = (0..c.n * c.dim)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let items = EmbeddingMatrix::from_flat(c.dim, data, meta(&cams, None), c.cams).unwrap();
    let batch = r.random_range(2..=c.n.min(6));
    let pairs: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let p = r.random_range(0..c.n);
            let q = (p + r.random_range(1..c.n)) % c.n;
            (p, q)
        })
        .collect();
    for pool in [NegativePool::AnchorsAndPositives, NegativePool::AnchorsOnly] {
        let out = triplet_loss(
            &params,
            TripletBatch {
                items: &items,
                pairs: &pairs,
            },
            0.3,
            pool,
        )
        .unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!(out.active <= pairs.len());
        for (&(p, q), z) in pairs.iter().zip(&out.negatives) {
            if let Some(z) = z {
                prop_assert!(*z != p && *z != q);
                let allowed = pairs.iter().any(|&(a, b)| {
                    *z == a || (pool == NegativePool::AnchorsAndPositives && *z == b)
                });
                prop_assert!(allowed);
            }
        }
    }
    Ok(())
}
