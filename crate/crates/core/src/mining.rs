//! Positive-pair mining over a similarity graph.
//!
//! For an anchor `p` the candidates are its k-reciprocal neighbors
//! `R_k(p) = { q : q in N(p,k) and p in N(q,k) }`. Each candidate `q` is
//! re-scored through the collaborators `C(p,q) = R_k(p) ∩ R_k(q)`:
//!
//! ```text
//! F[p][q] = S[p][q] + sum_i w(q,c_i) * S[p][c_i],   w(q,c_i) = S[q][c_i] / sum_j S[q][c_j]
//! ```
//!
//! and the candidate with the largest `F` becomes the positive. Items are
//! addressed by row index, which agrees with ascending item id order, and
//! every tie is broken toward the smaller index.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{ItemMeta, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::rng;

/// Ranked k-nearest-neighbor lists for every item.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    camera_excluded: bool,
    lists: Vec<Vec<(usize, f64)>>,
    // Same ids as `lists`, sorted ascending for membership tests.
    sorted_ids: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn camera_excluded(&self) -> bool {
        self.camera_excluded
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// `N(p,k)` as `(neighbor, similarity)`, most similar first.
    pub fn list(&self, p: usize) -> &[(usize, f64)] {
        &self.lists[p]
    }

    /// Whether `q ∈ N(p,k)`.
    pub fn contains(&self, p: usize, q: usize) -> bool {
        self.sorted_ids[p].binary_search(&q).is_ok()
    }
}

/// Descending similarity, then ascending id.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Builds `N(p,k)` for every item. With `exclude_same_camera`, items sharing
/// `p`'s camera are removed before ranking, so lists may be shorter than k.
pub fn top_k_neighbors(
    s: &SimilarityMatrix,
    meta: &[ItemMeta],
    k: usize,
    exclude_same_camera: bool,
) -> Result<NeighborIndex> {
    let n = s.n();
    if meta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: meta.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let cam = meta[p].camera_id;
            let mut cand: Vec<(usize, f64)> = s
                .row(p)
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != p && !(exclude_same_camera && meta[q].camera_id == cam))
                .map(|(q, &v)| (q, v))
                .collect();
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, rank_order);
                cand.truncate(k);
            }
            cand.sort_by(rank_order);
            cand
        })
        .collect();
    let sorted_ids = lists
        .iter()
        .map(|l| {
            let mut ids: Vec<usize> = l.iter().map(|&(q, _)| q).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    Ok(NeighborIndex {
        k,
        camera_excluded: exclude_same_camera,
        lists,
        sorted_ids,
    })
}

/// `R_k(p)`, members sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReciprocalSet {
    pub anchor: usize,
    pub members: Vec<usize>,
}

impl ReciprocalSet {
    pub fn contains(&self, q: usize) -> bool {
        self.members.binary_search(&q).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn reciprocal_set(idx: &NeighborIndex, p: usize) -> ReciprocalSet {
    let members = idx.sorted_ids[p]
        .iter()
        .copied()
        .filter(|&q| idx.contains(q, p))
        .collect();
    ReciprocalSet { anchor: p, members }
}

/// `C(p,q)`, members sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollaboratorSet {
    pub p: usize,
    pub q: usize,
    pub members: Vec<usize>,
}

/// Intersection of two reciprocal sets.
pub fn collaborators(rp: &ReciprocalSet, rq: &ReciprocalSet) -> CollaboratorSet {
    let (a, b) = (&rp.members, &rq.members);
    let mut members = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                members.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    CollaboratorSet {
        p: rp.anchor,
        q: rq.anchor,
        members,
    }
}

/// Normalized collaborator weights `w(q,c) = S[q][c] / sum_j S[q][c_j]`,
/// in the order of `c.members`. Empty for an empty set.
pub fn collaborator_weights(s: &SimilarityMatrix, q: usize, c: &CollaboratorSet) -> Vec<f64> {
    let raw: Vec<f64> = c.members.iter().map(|&ci| s.get(q, ci)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.into_iter().map(|x| x / total).collect()
}

/// Collaborative-filtering similarity `F[p][q]`. Not symmetric: the
/// weights come from `q`'s row and the summands from `p`'s row.
pub fn cf_similarity(s: &SimilarityMatrix, p: usize, q: usize, c: &CollaboratorSet) -> f64 {
    let weights = collaborator_weights(s, q, c);
    s.get(p, q)
        + c.members
            .iter()
            .zip(&weights)
            .map(|(&ci, w)| w * s.get(p, ci))
            .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedPair {
    pub anchor: usize,
    pub positive: usize,
    /// Filtered similarity `F[anchor][positive]`.
    pub f_score: f64,
}

/// How the positive is picked from `R_k(p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSelection {
    /// Largest collaborative-filtering similarity.
    CollaborativeFiltering,
    /// Uniform draw from `R_k(p)`, keyed by `(seed, anchor)`.
    Random { seed: u64 },
}

/// Scores closer than this count as tied, so summation order cannot flip
/// a tie between mathematically equal scores.
pub const F_TIE_TOLERANCE: f64 = 1e-12;

fn argmax_cf(
    s: &SimilarityMatrix,
    rp: &ReciprocalSet,
    reciprocal_of: impl Fn(usize) -> ReciprocalSet,
) -> Option<MinedPair> {
    let mut best: Option<MinedPair> = None;
    // Members are ascending, so a strict comparison keeps the lowest id on ties.
    for &q in &rp.members {
        let c = collaborators(rp, &reciprocal_of(q));
        let f = cf_similarity(s, rp.anchor, q, &c);
        if best.is_none_or(|b| f > b.f_score + F_TIE_TOLERANCE) {
            best = Some(MinedPair {
                anchor: rp.anchor,
                positive: q,
                f_score: f,
            });
        }
    }
    best
}

/// `q* = argmax_{q in R_k(p)} F[p][q]`; `None` when `R_k(p)` is empty.
pub fn mine_positive_pair(
    s: &SimilarityMatrix,
    idx: &NeighborIndex,
    p: usize,
) -> Option<MinedPair> {
    let rp = reciprocal_set(idx, p);
    argmax_cf(s, &rp, |q| reciprocal_set(idx, q))
}

/// Result of one mining pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningOutcome {
    /// One pair per anchor with a non-empty `R_k`, ordered by anchor.
    pub pairs: Vec<MinedPair>,
    /// Anchors skipped because `R_k(p)` was empty.
    pub skipped: usize,
    /// Mean `|R_k(p)|` over all anchors.
    pub mean_reciprocal_size: f64,
}

/// Mines one pair per anchor with collaborative-filtering selection.
pub fn mine_all(
    s: &SimilarityMatrix,
    meta: &[ItemMeta],
    k: usize,
    exclude_same_camera: bool,
) -> Result<Vec<MinedPair>> {
    mine_all_with(
        s,
        meta,
        k,
        exclude_same_camera,
        PairSelection::CollaborativeFiltering,
    )
    .map(|o| o.pairs)
}

pub fn mine_all_with(
    s: &SimilarityMatrix,
    meta: &[ItemMeta],
    k: usize,
    exclude_same_camera: bool,
    selection: PairSelection,
) -> Result<MiningOutcome> {
    let idx = top_k_neighbors(s, meta, k, exclude_same_camera)?;
    let reciprocal: Vec<ReciprocalSet> = (0..idx.len())
        .into_par_iter()
        .map(|p| reciprocal_set(&idx, p))
        .collect();
    let picked: Vec<Option<MinedPair>> = reciprocal
        .par_iter()
        .map(|rp| match selection {
            PairSelection::CollaborativeFiltering => argmax_cf(s, rp, |q| reciprocal[q].clone()),
            PairSelection::Random { seed } => {
                if rp.is_empty() {
                    return None;
                }
                let mut r = rng::stream(rng::mix(seed, rp.anchor as u64), 0);
                let q = rp.members[r.random_range(0..rp.len())];
                let c = collaborators(rp, &reciprocal[q]);
                Some(MinedPair {
                    anchor: rp.anchor,
                    positive: q,
                    f_score: cf_similarity(s, rp.anchor, q, &c),
                })
            }
        })
        .collect();
    let total: usize = reciprocal.iter().map(ReciprocalSet::len).sum();
    let n = reciprocal.len();
    let pairs: Vec<MinedPair> = picked.into_iter().flatten().collect();
    Ok(MiningOutcome {
        skipped: n - pairs.len(),
        pairs,
        mean_reciprocal_size: if n == 0 { 0.0 } else { total as f64 / n as f64 },
    })
}
