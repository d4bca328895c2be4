//! Pretraining, per-epoch mining and fine-tuning.
//!
//! 1. Train the embedder as an identity classifier on virtual data.
//! 2. Embed the unlabeled real data, rebuild the similarity matrix and mine
//!    one positive per anchor.
//! 3. Optimize `L_cls + lambda * L_tri` over the epoch, then go back to 2.
//!
//! Every epoch walks the virtual data once in shuffled batches of
//! `virtual_batch_size`; during fine-tuning each virtual batch is paired
//! with the next triplet batch of `anchors_per_batch` mined pairs, cycling
//! through a shuffled pair list. Each pair is its own pseudo class for the
//! epoch. Shuffles are keyed by `(seed, epoch)`, so a fine-tune epoch with
//! `lambda = 0` takes exactly the steps of a further pretraining epoch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::{Ablation, RunConfig, TrainConfig};
use crate::embedding::{pairwise_similarity, EmbeddingMatrix, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_retrieval, mining_accuracy, EpochRecord, MetricsReport, Phase, RetrievalMetrics,
};
use crate::io;
use crate::mining::{mine_all_with, MinedPair, PairSelection};
use crate::model::{
    combined_loss, cross_entropy_loss, ClassBatch, EmbedderParams, ModelShape, TripletBatch,
};
use crate::rng;
use crate::synthetic::{generate_split, Role, SyntheticDataset};

const INIT_SALT: u64 = 10;
const VIRTUAL_SALT: u64 = 11;
const TRIPLET_SALT: u64 = 12;
const SELECTION_SALT: u64 = 13;

/// Virtual training data, unlabeled real data and the held-out real split.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub virtual_data: SyntheticDataset,
    pub real: SyntheticDataset,
    pub test: SyntheticDataset,
}

impl Datasets {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let g = &cfg.generator;
        let test_cfg = crate::synthetic::GeneratorConfig {
            identities: g.test_identities,
            ..g.real.clone()
        };
        Ok(Self {
            virtual_data: generate_split(&g.virtual_data, Role::Virtual, 0)?,
            real: generate_split(&g.real, Role::Real, 0)?,
            test: generate_split(&test_cfg, Role::Real, 1)?,
        })
    }

    /// Uses `cfg.datasets` when present, the generator otherwise.
    pub fn load_or_generate(cfg: &RunConfig) -> Result<Self> {
        match &cfg.datasets {
            Some(paths) => Ok(Self {
                virtual_data: io::read_dataset_file(&paths.virtual_data)?,
                real: io::read_dataset_file(&paths.real)?,
                test: io::read_dataset_file(&paths.test)?,
            }),
            None => Self::generate(cfg),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_dataset_file(&dir.join("virtual.cfd"), &self.virtual_data)?;
        io::write_dataset_file(&dir.join("real.cfd"), &self.real)?;
        io::write_dataset_file(&dir.join("test.cfd"), &self.test)?;
        Ok(())
    }
}

/// Rows of `n` items in the shuffled order of `epoch`.
fn epoch_order(n: usize, seed: u64, salt: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::mix(seed, salt), epoch as u64));
    order
}

fn virtual_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    epoch_order(n, cfg.seed, VIRTUAL_SALT, epoch)
        .chunks(cfg.virtual_batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Initial parameters for a run.
pub fn init_params(shape: ModelShape, cfg: &TrainConfig) -> Result<EmbedderParams> {
    EmbedderParams::init(shape, rng::mix(cfg.seed, INIT_SALT))
}

/// One classification-only epoch over the virtual data.
fn classification_epoch(
    params: &mut EmbedderParams,
    virtual_data: &SyntheticDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let lr = cfg.lr_at(epoch);
    let batches = virtual_batches(virtual_data.len(), cfg, epoch);
    let mut total = 0.0;
    for rows in &batches {
        let out = cross_entropy_loss(
            params,
            ClassBatch {
                items: &virtual_data.embeddings,
                rows,
            },
        )?;
        total += out.loss;
        params.sgd_step(&out.grad, lr);
    }
    Ok(EpochRecord {
        epoch,
        phase: Phase::Pretrain,
        lr,
        steps: batches.len(),
        cls_loss: total / batches.len().max(1) as f64,
        tri_loss: None,
        mining_passes: None,
        pairs_mined: None,
        skipped_anchors: None,
        mean_reciprocal_size: None,
        mining_accuracy: None,
        negative_collision_rate: None,
        similarity_hash: None,
        eval: None,
    })
}

/// Parameters plus the per-epoch log that produced them.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: EmbedderParams,
    pub history: Vec<EpochRecord>,
}

fn require_labels(virtual_data: &SyntheticDataset) -> Result<()> {
    if virtual_data.labels().is_none() {
        return Err(Error::invalid(
            "virtual",
            "virtual data must carry pseudo labels",
        ));
    }
    Ok(())
}

/// Continues classification training from `params` for epochs
/// `[start, end)`.
pub fn train_classifier(
    mut params: EmbedderParams,
    virtual_data: &SyntheticDataset,
    cfg: &TrainConfig,
    start: usize,
    end: usize,
) -> Result<Trained> {
    require_labels(virtual_data)?;
    let mut history = Vec::new();
    for epoch in start..end {
        history.push(classification_epoch(&mut params, virtual_data, cfg, epoch)?);
    }
    Ok(Trained { params, history })
}

/// Trains the coarse model on virtual data for `cfg.pretrain_epochs`.
pub fn pretrain(
    virtual_data: &SyntheticDataset,
    shape: ModelShape,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let params = init_params(shape, cfg)?;
    train_classifier(params, virtual_data, cfg, 0, cfg.pretrain_epochs)
}

/// State handed to a fine-tuning observer right after mining.
pub struct EpochSnapshot<'a> {
    pub epoch: usize,
    /// Parameters at the start of the epoch, before any update.
    pub params: &'a EmbedderParams,
    /// Embedded, normalized real data.
    pub embedded: &'a EmbeddingMatrix,
    pub similarity: &'a SimilarityMatrix,
    pub pairs: &'a [MinedPair],
}

/// Options of a fine-tuning run that are not plain hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneOptions<'a> {
    pub selection: Ablation,
    /// Evaluated after every epoch when present.
    pub eval_split: Option<(&'a SyntheticDataset, &'a [usize])>,
}

/// Fine-tunes for epochs `[pretrain_epochs, total_epochs)`, re-mining
/// positives from freshly embedded real data at the start of each epoch.
pub fn finetune(
    params: EmbedderParams,
    virtual_data: &SyntheticDataset,
    real: &SyntheticDataset,
    cfg: &TrainConfig,
    opts: FinetuneOptions<'_>,
    mut observer: impl FnMut(&EpochSnapshot<'_>),
) -> Result<Trained> {
    cfg.validate()?;
    require_labels(virtual_data)?;
    let mut params = params;
    let mut history = Vec::new();
    let truth = real.embeddings.has_ground_truth();
    let meta = real.embeddings.meta();
    for epoch in cfg.pretrain_epochs..cfg.total_epochs {
        let embedded = params.embed_matrix(&real.embeddings)?;
        let similarity = pairwise_similarity(&embedded)?;
        let selection = match opts.selection {
            Ablation::Random => PairSelection::Random {
                seed: rng::mix(rng::mix(cfg.seed, SELECTION_SALT), epoch as u64),
            },
            _ => PairSelection::CollaborativeFiltering,
        };
        let mined = mine_all_with(&similarity, meta, cfg.k, cfg.exclude_same_camera, selection)?;
        if mined.pairs.is_empty() {
            return Err(Error::NoPairsMined { epoch });
        }
        observer(&EpochSnapshot {
            epoch,
            params: &params,
            embedded: &embedded,
            similarity: &similarity,
            pairs: &mined.pairs,
        });

        let lr = cfg.lr_at(epoch);
        let order = epoch_order(mined.pairs.len(), cfg.seed, TRIPLET_SALT, epoch);
        let batch_len = cfg.anchors_per_batch.min(order.len());
        let mut cursor = 0;
        let batches = virtual_batches(virtual_data.len(), cfg, epoch);
        let (mut cls_total, mut tri_total) = (0.0, 0.0);
        let (mut collisions, mut negatives_seen) = (0usize, 0usize);
        for rows in &batches {
            let class_batch = ClassBatch {
                items: &virtual_data.embeddings,
                rows,
            };
            if batch_len < 2 {
                let out = cross_entropy_loss(&params, class_batch)?;
                cls_total += out.loss;
                params.sgd_step(&out.grad, lr);
                continue;
            }
            let pairs: Vec<(usize, usize)> = (0..batch_len)
                .map(|i| {
                    let p = mined.pairs[order[(cursor + i) % order.len()]];
                    (p.anchor, p.positive)
                })
                .collect();
            cursor = (cursor + batch_len) % order.len();
            let out = combined_loss(
                &params,
                class_batch,
                TripletBatch {
                    items: &real.embeddings,
                    pairs: &pairs,
                },
                cfg.lambda,
                cfg.margin,
                cfg.negative_pool,
            )?;
            if truth {
                for (&(p, _), z) in pairs.iter().zip(&out.negatives) {
                    if let Some(z) = z {
                        negatives_seen += 1;
                        if meta[*z].true_identity == meta[p].true_identity {
                            collisions += 1;
                        }
                    }
                }
            }
            cls_total += out.cls_loss;
            tri_total += out.tri_loss;
            params.sgd_step(&out.grad, lr);
        }
        let steps = batches.len().max(1) as f64;
        let eval = match opts.eval_split {
            Some((test, ranks)) => Some(evaluate(&params, test, ranks)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            phase: Phase::Finetune,
            lr,
            steps: batches.len(),
            cls_loss: cls_total / steps,
            tri_loss: Some(tri_total / steps),
            mining_passes: Some(1),
            pairs_mined: Some(mined.pairs.len()),
            skipped_anchors: Some(mined.skipped),
            mean_reciprocal_size: Some(mined.mean_reciprocal_size),
            mining_accuracy: if truth {
                Some(mining_accuracy(&mined.pairs, meta)?)
            } else {
                None
            },
            negative_collision_rate: (truth && negatives_seen > 0)
                .then(|| collisions as f64 / negatives_seen as f64),
            similarity_hash: Some(similarity.content_hash()),
            eval,
        });
    }
    Ok(Trained { params, history })
}

/// Retrieval metrics of `params` on a labeled split.
pub fn evaluate(
    params: &EmbedderParams,
    split: &SyntheticDataset,
    ranks: &[usize],
) -> Result<RetrievalMetrics> {
    evaluate_retrieval(&params.embed_matrix(&split.embeddings)?, ranks)
}

/// Data and coarse model shared by every ablation of one configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub datasets: Datasets,
    pub coarse: Trained,
    pub coarse_metrics: RetrievalMetrics,
}

/// Loads or generates the data and pretrains the coarse model.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let datasets = Datasets::load_or_generate(cfg)?;
    let shape = cfg.model_shape();
    let mut coarse = pretrain(&datasets.virtual_data, shape, &cfg.train)?;
    if cfg.eval.every_epoch {
        // Only the final pretrain epoch is worth the cost.
        if let Some(last) = coarse.history.last_mut() {
            last.eval = Some(evaluate(&coarse.params, &datasets.test, &cfg.eval.ranks)?);
        }
    }
    let coarse_metrics = evaluate(&coarse.params, &datasets.test, &cfg.eval.ranks)?;
    Ok(Prepared {
        datasets,
        coarse,
        coarse_metrics,
    })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub coarse_params: EmbedderParams,
    pub final_params: EmbedderParams,
    /// Pairs mined from the final model on the real data; empty for the
    /// `none` ablation.
    pub final_pairs: Vec<MinedPair>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn notes(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut n = BTreeMap::new();
    let ablation = match cfg.ablation {
        Ablation::Cf => "cf",
        Ablation::Random => "random",
        Ablation::None => "none",
    };
    n.insert("ablation".into(), ablation.into());
    n.insert(
        "evaluation".into(),
        "held-out real identities, every item queried against the rest; same camera and identity entries dropped"
            .into(),
    );
    if cfg.ablation != Ablation::None {
        n.insert(
            "features".into(),
            "real data re-embedded and re-normalized at the start of every fine-tune epoch".into(),
        );
        n.insert(
            "batching".into(),
            "one virtual classification batch per triplet batch (1:1), one pass over virtual data per epoch"
                .into(),
        );
        n.insert(
            "pseudo_classes".into(),
            "one per mined pair, reassigned every epoch".into(),
        );
        n.insert(
            "camera_exclusion".into(),
            if cfg.train.exclude_same_camera {
                "same-camera items removed while building k-NN lists"
            } else {
                "off"
            }
            .into(),
        );
        n.insert(
            "negative_pool".into(),
            format!("{:?}", cfg.train.negative_pool),
        );
    }
    n
}

/// Fine-tunes the prepared coarse model according to `cfg` and evaluates.
/// `cfg` must describe the same data and pretraining as `prepared`.
pub fn finish(cfg: &RunConfig, prepared: &Prepared) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = &prepared.datasets;
    let ranks = &cfg.eval.ranks;
    let mut history = prepared.coarse.history.clone();
    let (final_params, final_metrics, mining_acc, collision, final_pairs) = match cfg.ablation {
        Ablation::None => (
            prepared.coarse.params.clone(),
            prepared.coarse_metrics.clone(),
            None,
            None,
            Vec::new(),
        ),
        selection => {
            let tuned = finetune(
                prepared.coarse.params.clone(),
                &ds.virtual_data,
                &ds.real,
                &cfg.train,
                FinetuneOptions {
                    selection,
                    eval_split: cfg.eval.every_epoch.then_some((&ds.test, &ranks[..])),
                },
                |_| {},
            )?;
            let metrics = evaluate(&tuned.params, &ds.test, ranks)?;
            let acc = mean(tuned.history.iter().filter_map(|r| r.mining_accuracy));
            let coll = mean(
                tuned
                    .history
                    .iter()
                    .filter_map(|r| r.negative_collision_rate),
            );
            let embedded = tuned.params.embed_matrix(&ds.real.embeddings)?;
            let pairs = mine_all_with(
                &pairwise_similarity(&embedded)?,
                ds.real.embeddings.meta(),
                cfg.train.k,
                cfg.train.exclude_same_camera,
                PairSelection::CollaborativeFiltering,
            )?
            .pairs;
            history.extend(tuned.history);
            (tuned.params, metrics, acc, coll, pairs)
        }
    };
    let report = MetricsReport {
        map: Some(final_metrics.map),
        cmc: Some(final_metrics.cmc.clone()),
        mining_accuracy: mining_acc,
        negative_collision_rate: collision,
        evaluated_queries: final_metrics.evaluated_queries,
        excluded_queries: final_metrics.excluded_queries,
        coarse: Some(prepared.coarse_metrics.clone()),
        history,
        notes: notes(cfg),
    };
    Ok(RunOutcome {
        report,
        coarse_params: prepared.coarse.params.clone(),
        final_params,
        final_pairs,
    })
}

/// Data generation, pretraining, fine-tuning and evaluation for one config.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    finish(cfg, &prepare(cfg)?)
}

/// Hyper-parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    K,
    Lambda,
    AnchorsPerBatch,
    Margin,
    /// Virtual identities `N_p`.
    VirtualIdentities,
    /// Virtual samples per identity `N_e`.
    VirtualSamples,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "k" => Self::K,
            "lambda" => Self::Lambda,
            "anchors_per_batch" | "n_r" => Self::AnchorsPerBatch,
            "margin" => Self::Margin,
            "n_p" | "virtual_identities" => Self::VirtualIdentities,
            "n_e" | "virtual_samples" => Self::VirtualSamples,
            other => {
                return Err(Error::invalid(
                    "sweep.param",
                    format!("unknown parameter `{other}`"),
                ))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::K => "k",
            Self::Lambda => "lambda",
            Self::AnchorsPerBatch => "anchors_per_batch",
            Self::Margin => "margin",
            Self::VirtualIdentities => "n_p",
            Self::VirtualSamples => "n_e",
        }
    }

    /// Whether changing this parameter leaves pretraining untouched.
    fn finetune_only(self) -> bool {
        matches!(
            self,
            Self::K | Self::Lambda | Self::AnchorsPerBatch | Self::Margin
        )
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::invalid(self.name(), format!("{v} is not a count")))
            }
        };
        match self {
            Self::K => c.train.k = as_count(value)?,
            Self::Lambda => c.train.lambda = value,
            Self::AnchorsPerBatch => c.train.anchors_per_batch = as_count(value)?,
            Self::Margin => c.train.margin = value,
            Self::VirtualIdentities => c.generator.virtual_data.identities = as_count(value)?,
            Self::VirtualSamples => {
                c.generator.virtual_data.samples_per_identity = as_count(value)?
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Runs `cfg` once per value of `param`, all with the same seeds.
pub fn run_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<(f64, MetricsReport)>> {
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| param.apply(cfg, v))
        .collect::<Result<_>>()?;
    let shared = if param.finetune_only() {
        Some(prepare(cfg)?)
    } else {
        None
    };
    values
        .iter()
        .zip(&configs)
        .map(|(&v, c)| {
            let outcome = match &shared {
                Some(p) => finish(c, p)?,
                None => run_experiment(c)?,
            };
            Ok((v, outcome.report))
        })
        .collect()
}
