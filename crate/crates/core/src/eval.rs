//! Retrieval metrics under the cross-camera protocol.
//!
//! A gallery entry that shares both camera and identity with the query is
//! dropped before ranking. Queries left without any relevant entry are
//! excluded from the averages and counted separately.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{euclidean, EmbeddingMatrix, ItemMeta};
use crate::error::{Error, Result};
use crate::mining::MinedPair;

/// Gallery rows for one query, best match first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub gallery: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Whether each ranked entry shares the query's identity.
    pub relevant: Vec<bool>,
}

impl RankedList {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }
}

fn identity(m: &ItemMeta) -> Result<u64> {
    m.true_identity.ok_or(Error::NoGroundTruth)
}

/// Ranks `gallery` for every row of `query` by `exp(-distance)`,
/// descending, ties by ascending gallery row.
pub fn rank_gallery(query: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<Vec<RankedList>> {
    if !query.is_normalized() || !gallery.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            got: query.dim(),
        });
    }
    let gallery_ids: Vec<u64> = gallery.meta().iter().map(identity).collect::<Result<_>>()?;
    (0..query.len())
        .into_par_iter()
        .map(|qi| {
            let qm = &query.meta()[qi];
            let qid = identity(qm)?;
            let mut scored: Vec<(usize, f64)> = (0..gallery.len())
                .filter(|&g| {
                    !(gallery.meta()[g].camera_id == qm.camera_id && gallery_ids[g] == qid)
                })
                .map(|g| {
                    (
                        g,
                        (-euclidean(query.row(qi), gallery.row(g)).min(2.0)).exp(),
                    )
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            Ok(RankedList {
                query: qi,
                relevant: scored.iter().map(|&(g, _)| gallery_ids[g] == qid).collect(),
                similarities: scored.iter().map(|x| x.1).collect(),
                gallery: scored.into_iter().map(|x| x.0).collect(),
            })
        })
        .collect()
}

/// Mean of a per-query statistic with the count of excluded queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averaged {
    pub value: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Precision at each relevant hit, averaged over the relevant count.
/// `None` when the list has no relevant entry.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean average precision. `value` is 0 when every query is excluded.
pub fn mean_ap(lists: &[RankedList]) -> Averaged {
    let aps: Vec<f64> = lists
        .iter()
        .filter_map(|l| average_precision(&l.relevant))
        .collect();
    Averaged {
        value: if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        },
        evaluated: aps.len(),
        excluded: lists.len() - aps.len(),
    }
}

/// `cmc[r]`: share of evaluated queries with a relevant entry in the top `r`.
pub fn cmc(lists: &[RankedList], ranks: &[usize]) -> BTreeMap<usize, f64> {
    let first_hits: Vec<usize> = lists
        .iter()
        .filter_map(|l| l.relevant.iter().position(|r| *r))
        .collect();
    ranks
        .iter()
        .map(|&r| {
            let acc = if first_hits.is_empty() {
                0.0
            } else {
                first_hits.iter().filter(|&&h| h < r).count() as f64 / first_hits.len() as f64
            };
            (r, acc)
        })
        .collect()
}

/// Share of pairs whose members have the same true identity.
pub fn mining_accuracy(pairs: &[MinedPair], meta: &[ItemMeta]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoPairsMined { epoch: 0 });
    }
    let mut correct = 0usize;
    for p in pairs {
        if identity(&meta[p.anchor])? == identity(&meta[p.positive])? {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Retrieval summary for one model on one query/gallery split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
}

impl RetrievalMetrics {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(0.0)
    }
}

/// Every row of a normalized matrix queried against all the others.
pub fn evaluate_retrieval(e: &EmbeddingMatrix, ranks: &[usize]) -> Result<RetrievalMetrics> {
    let lists = rank_gallery(e, e)?;
    let ap = mean_ap(&lists);
    Ok(RetrievalMetrics {
        map: ap.value,
        cmc: cmc(&lists, ranks),
        evaluated_queries: ap.evaluated,
        excluded_queries: ap.excluded,
    })
}

/// Per-query AP rows `(query_item_id, ap)`; queries without relevant
/// entries are omitted.
pub fn per_query_ap(lists: &[RankedList], meta: &[ItemMeta]) -> Vec<(u64, f64)> {
    lists
        .iter()
        .filter_map(|l| average_precision(&l.relevant).map(|ap| (meta[l.query].item_id, ap)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// What happened in one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub steps: usize,
    pub cls_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tri_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mining_passes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairs_mined: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped_anchors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_reciprocal_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mining_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negative_collision_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<RetrievalMetrics>,
}

/// Final report of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub cmc: Option<BTreeMap<usize, f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mining_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negative_collision_rate: Option<f64>,
    #[serde(default)]
    pub evaluated_queries: usize,
    #[serde(default)]
    pub excluded_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coarse: Option<RetrievalMetrics>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    /// Free-form run facts such as the ablation and the choices made
    /// where the method leaves room.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn rank1(&self) -> Option<f64> {
        self.cmc.as_ref().and_then(|c| c.get(&1).copied())
    }
}
