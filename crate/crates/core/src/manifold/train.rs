//! The metric-learning trainer. One engine drives both modes: plain metric
//! learning is the K = 1 case of the divide-and-conquer schedule, so the two
//! produce identical batch streams and logs for the same seed.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    group_by_class, sample_balanced_batch, stack_images, try_sample_balanced_batch,
    BalancedBatchSpec, SampleStore,
};
use crate::error::{ensure, CoreError, CoreResult};
use crate::manifold::kmeans::{cluster_embeddings, split_dims, SubspacePartition};
use crate::manifold::loss::{batch_margin_loss_with_grad, build_pairs, MarginConfig};
use crate::nets::adam::{Adam, AdamConfig};
use crate::nets::embed::ManifoldNet;
use crate::nets::layers::{l2_normalize_rows, l2_normalize_rows_backward};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ManifoldTrainConfig {
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub per_class: usize,
    pub lr: f64,
    pub k: usize,
    pub recluster_every: usize,
    pub seed: u64,
    pub margin: MarginConfig,
}

impl Default for ManifoldTrainConfig {
    fn default() -> Self {
        ManifoldTrainConfig {
            epochs: 300,
            finetune_epochs: 50,
            embed_dim: 128,
            batch_size: 32,
            per_class: 8,
            lr: 1e-4,
            k: 4,
            recluster_every: 10,
            seed: 0,
            margin: MarginConfig::default(),
        }
    }
}

impl ManifoldTrainConfig {
    pub fn validate(&self) -> CoreResult<()> {
        self.margin.validate()?;
        if self.epochs == 0 {
            ensure!(
                self.finetune_epochs == 0,
                InvalidConfig,
                "finetune_epochs must be 0 when epochs is 0"
            );
        } else {
            ensure!(
                self.finetune_epochs < self.epochs,
                InvalidConfig,
                "finetune_epochs ({}) must be smaller than epochs ({})",
                self.finetune_epochs,
                self.epochs
            );
        }
        ensure!(self.k >= 1, InvalidConfig, "K must be at least 1");
        ensure!(
            self.embed_dim % self.k == 0,
            InvalidConfig,
            "K = {} does not divide the embedding dimension {}",
            self.k,
            self.embed_dim
        );
        ensure!(
            self.recluster_every > 0,
            InvalidConfig,
            "recluster_every must be positive"
        );
        BalancedBatchSpec::new(self.batch_size, self.per_class)?;
        Ok(())
    }

    /// First epoch of the full-embedding phase, or `epochs + 1` if the whole
    /// run is learner-phase (never happens under `validate`).
    fn transition(&self) -> usize {
        self.epochs - self.finetune_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Learner,
    Full,
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub active_pair_fraction: f64,
    pub recluster: bool,
}

/// Partition state written at every (re)clustering event. `epoch` is 0 for
/// the initial clustering and is not part of the on-disk snapshot format.
#[derive(Clone, Debug, Serialize)]
pub struct PartitionSnapshot {
    #[serde(skip)]
    pub epoch: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub dim_slices: Vec<(usize, usize)>,
    pub cluster_sizes: Vec<usize>,
}

/// A batch that could not be drawn from its scheduled cluster and fell back
/// to the full dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FallbackEvent {
    pub epoch: usize,
    pub batch: usize,
    pub cluster: usize,
}

pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub partitions: Vec<PartitionSnapshot>,
    pub fallbacks: Vec<FallbackEvent>,
    /// Sample indices of every batch in draw order.
    pub batch_trace: Vec<Vec<usize>>,
}

/// Plain metric learning: the K = 1 degenerate schedule.
pub fn train_ml<T: Scalar, S: SampleStore<T> + ?Sized>(
    store: &S,
    net: &mut ManifoldNet<T>,
    cfg: &ManifoldTrainConfig,
) -> CoreResult<TrainRun> {
    ensure!(cfg.k == 1, InvalidConfig, "train_ml requires K = 1, got {}", cfg.k);
    train_engine(store, net, cfg)
}

/// Divide-and-conquer training: cluster-pure batches with per-cluster
/// dimension slices, then a full-embedding fine-tune phase.
pub fn train_dcml<T: Scalar, S: SampleStore<T> + ?Sized>(
    store: &S,
    net: &mut ManifoldNet<T>,
    cfg: &ManifoldTrainConfig,
) -> CoreResult<TrainRun> {
    train_engine(store, net, cfg)
}

/// All-sample embeddings `[n, d]`, inference mode, in chunks of `chunk`.
pub fn embed_all<T: Scalar, S: SampleStore<T> + ?Sized>(
    store: &S,
    net: &ManifoldNet<T>,
    chunk: usize,
) -> CoreResult<Tensor<T>> {
    let n = store.len();
    ensure!(n > 0, InvalidData, "cannot embed an empty dataset");
    let d = net.embed_dim;
    let mut out = Tensor::zeros(&[n, d]);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let x = stack_images(store, &indices)?;
        let (e, _) = net.forward(&x)?;
        out.data_mut()[start * d..end * d].copy_from_slice(e.data());
        start = end;
    }
    Ok(out)
}

fn slice_rows<T: Scalar>(e: &Tensor<T>, slice: (usize, usize)) -> Tensor<T> {
    let d = e.shape()[1];
    let (s, t) = slice;
    let width = t - s;
    let rows = e.shape()[0];
    let mut out = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        out.data_mut()[r * width..(r + 1) * width]
            .copy_from_slice(&e.data()[r * d + s..r * d + t]);
    }
    out
}

fn scatter_rows<T: Scalar>(dy: &Tensor<T>, full_dim: usize, slice: (usize, usize)) -> Tensor<T> {
    let (s, t) = slice;
    let width = t - s;
    let rows = dy.shape()[0];
    let mut out = Tensor::zeros(&[rows, full_dim]);
    for r in 0..rows {
        out.data_mut()[r * full_dim + s..r * full_dim + t]
            .copy_from_slice(&dy.data()[r * width..(r + 1) * width]);
    }
    out
}

fn snapshot(epoch: usize, part: &SubspacePartition) -> PartitionSnapshot {
    PartitionSnapshot {
        epoch,
        k: part.k,
        dim_slices: part.dim_slices.clone(),
        cluster_sizes: part.cluster_sizes(),
    }
}

fn group_cluster(
    labels: &[usize],
    members: &[usize],
) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in members {
        groups.entry(labels[i]).or_default().push(i);
    }
    groups
}

fn train_engine<T: Scalar, S: SampleStore<T> + ?Sized>(
    store: &S,
    net: &mut ManifoldNet<T>,
    cfg: &ManifoldTrainConfig,
) -> CoreResult<TrainRun> {
    cfg.validate()?;
    ensure!(
        net.embed_dim == cfg.embed_dim,
        InvalidConfig,
        "net embeds into {} dimensions but the config says {}",
        net.embed_dim,
        cfg.embed_dim
    );
    let n = store.len();
    ensure!(n >= 2, InvalidData, "training needs at least 2 samples");

    let labels: Vec<usize> = (0..n).map(|i| store.label(i)).collect();
    let groups_full = group_by_class(&labels);
    let spec = BalancedBatchSpec::new(cfg.batch_size, cfg.per_class)?;
    for (class, members) in &groups_full {
        ensure!(
            members.len() >= cfg.per_class,
            InvalidData,
            "class {class} has {} samples, fewer than per_class = {}",
            members.len(),
            cfg.per_class
        );
    }
    ensure!(
        groups_full.len() >= spec.classes_per_batch(),
        InvalidData,
        "dataset has {} classes but each batch needs {}",
        groups_full.len(),
        spec.classes_per_batch()
    );

    let slices = split_dims(cfg.embed_dim, cfg.k)?;
    let full_slice = (0usize, cfg.embed_dim);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let transition = cfg.transition();

    let mut run = TrainRun {
        records: Vec::with_capacity(cfg.epochs),
        partitions: Vec::new(),
        fallbacks: Vec::new(),
        batch_trace: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(run);
    }

    // independent streams: batch sampling never senses reclustering
    let mut batch_rng = derive_rng(cfg.seed, "manifold-batch", 0);
    let mut opt: Adam<T> = Adam::new(AdamConfig::with_lr(cfg.lr));

    let mut partition = if cfg.k > 1 {
        let emb = embed_all(store, net, cfg.batch_size)?;
        let cluster_of = cluster_embeddings(&emb, cfg.k, derive_seed(cfg.seed, "manifold-cluster", 0))?;
        SubspacePartition {
            k: cfg.k,
            dim_slices: slices.clone(),
            cluster_of,
        }
    } else {
        SubspacePartition::trivial(cfg.embed_dim, n)
    };
    run.partitions.push(snapshot(0, &partition));
    let mut cluster_groups: Vec<BTreeMap<usize, Vec<usize>>> = partition
        .members()
        .iter()
        .map(|m| group_cluster(&labels, m))
        .collect();

    let mut recluster_events = 0usize;
    let mut global_batch = 0usize;

    for epoch in 1..=cfg.epochs {
        let phase = if epoch <= transition {
            Phase::Learner
        } else {
            Phase::Full
        };
        let mut loss_sum = 0.0f64;
        let mut active_sum = 0usize;
        let mut pair_sum = 0usize;

        for b in 0..batches_per_epoch {
            let (indices, slice) = match phase {
                Phase::Learner => {
                    let cluster = global_batch % cfg.k;
                    match try_sample_balanced_batch(&cluster_groups[cluster], &spec, &mut batch_rng)
                    {
                        Some(idx) => (idx, slices[cluster]),
                        None => {
                            run.fallbacks.push(FallbackEvent {
                                epoch,
                                batch: b,
                                cluster,
                            });
                            // the batch comes from everywhere, so train the
                            // full embedding for it
                            (
                                sample_balanced_batch(&groups_full, &spec, &mut batch_rng)?,
                                full_slice,
                            )
                        }
                    }
                }
                Phase::Full => (
                    sample_balanced_batch(&groups_full, &spec, &mut batch_rng)?,
                    full_slice,
                ),
            };
            global_batch += 1;

            let x = stack_images(store, &indices)?;
            let (e, _a, cache) = net.forward_train(&x)?;
            let sliced = slice_rows(&e, slice);
            let (s, norm_cache) = l2_normalize_rows(&sliced);
            let batch_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            let pairs = build_pairs(&batch_labels, cfg.margin.pair_strategy, &s, &mut batch_rng)?;
            let (loss, grad_s, active) = batch_margin_loss_with_grad(&s, &pairs, &cfg.margin)?;
            let loss_f = loss.to_f64();
            if !loss_f.is_finite() {
                return Err(CoreError::NonFinite(alloc::format!(
                    "training diverged: non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += loss_f;
            active_sum += active;
            pair_sum += pairs.len();
            run.batch_trace.push(indices);

            if active > 0 {
                let d_sliced = l2_normalize_rows_backward(&grad_s, &norm_cache);
                let de = scatter_rows(&d_sliced, cfg.embed_dim, slice);
                net.zero_grad();
                net.backward(&de, &cache)?;
                opt.step(|f| net.visit_params("", f));
            }
        }

        let recluster =
            cfg.k > 1 && epoch < transition && epoch % cfg.recluster_every == 0;
        if recluster {
            recluster_events += 1;
            let emb = embed_all(store, net, cfg.batch_size)?;
            let cluster_of = cluster_embeddings(
                &emb,
                cfg.k,
                derive_seed(cfg.seed, "manifold-cluster", recluster_events as u64),
            )?;
            partition.cluster_of = cluster_of;
            run.partitions.push(snapshot(epoch, &partition));
            cluster_groups = partition
                .members()
                .iter()
                .map(|m| group_cluster(&labels, m))
                .collect();
        }

        run.records.push(EpochRecord {
            epoch,
            phase,
            mean_loss: loss_sum / batches_per_epoch as f64,
            active_pair_fraction: if pair_sum == 0 {
                0.0
            } else {
                active_sum as f64 / pair_sum as f64
            },
            recluster,
        });
    }

    Ok(run)
}
