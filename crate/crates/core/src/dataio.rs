//! Dataset access abstractions and class-balanced batch sampling.
//!
//! IO-free: file formats live in the companion crate. Training code sees
//! datasets through [`SampleStore`], which serves one `[3, h, w]` image tensor
//! per index. Ground-truth masks are deliberately absent from this trait so no
//! training path can reach them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{ensure, CoreResult};
use crate::tensor::{Scalar, Tensor};

/// Read access to a labeled image collection. Labels are 1-based class ids.
pub trait SampleStore<T: Scalar> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, index: usize) -> &str;
    fn label(&self, index: usize) -> usize;
    /// Image tensor `[3, h, w]` with values in [0, 1].
    fn image(&self, index: usize) -> CoreResult<Tensor<T>>;
}

/// Samples held directly in memory; the store used by tests and synthetic
/// desk runs.
pub struct InMemoryStore<T> {
    ids: Vec<String>,
    labels: Vec<usize>,
    images: Vec<Tensor<T>>,
}

impl<T: Scalar> InMemoryStore<T> {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, images: Vec<Tensor<T>>) -> CoreResult<Self> {
        ensure!(
            ids.len() == labels.len() && ids.len() == images.len(),
            InvalidData,
            "store fields disagree: {} ids, {} labels, {} images",
            ids.len(),
            labels.len(),
            images.len()
        );
        for (i, img) in images.iter().enumerate() {
            ensure!(
                img.shape().len() == 3 && img.shape()[0] == 3,
                InvalidData,
                "image {} has shape {:?}, expected [3, h, w]",
                ids[i],
                img.shape()
            );
        }
        Ok(InMemoryStore {
            ids,
            labels,
            images,
        })
    }
}

impl<T: Scalar> SampleStore<T> for InMemoryStore<T> {
    fn len(&self) -> usize {
        self.ids.len()
    }
    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn image(&self, index: usize) -> CoreResult<Tensor<T>> {
        Ok(self.images[index].clone())
    }
}

/// Class label -> sample indices, in index order.
pub fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

#[derive(Clone, Copy, Debug)]
pub struct BalancedBatchSpec {
    pub batch_size: usize,
    pub per_class: usize,
}

impl BalancedBatchSpec {
    pub fn new(batch_size: usize, per_class: usize) -> CoreResult<Self> {
        ensure!(
            per_class > 0 && batch_size > 0 && batch_size % per_class == 0,
            InvalidConfig,
            "per_class {per_class} must divide batch size {batch_size}"
        );
        Ok(BalancedBatchSpec {
            batch_size,
            per_class,
        })
    }

    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.per_class
    }
}

/// Classes with at least `per_class` members, in ascending label order.
pub fn eligible_classes(groups: &BTreeMap<usize, Vec<usize>>, per_class: usize) -> Vec<usize> {
    groups
        .iter()
        .filter(|(_, v)| v.len() >= per_class)
        .map(|(&k, _)| k)
        .collect()
}

fn choose_without_replacement<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    // partial Fisher-Yates over a copy
    let mut items = pool.to_vec();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = i + rng.gen_range(0..items.len() - i);
        items.swap(i, j);
        out.push(items[i]);
    }
    out
}

fn draw_batch<R: Rng>(
    groups: &BTreeMap<usize, Vec<usize>>,
    eligible: &[usize],
    spec: &BalancedBatchSpec,
    rng: &mut R,
) -> Vec<usize> {
    let classes = choose_without_replacement(eligible, spec.classes_per_batch(), rng);
    let mut batch = Vec::with_capacity(spec.batch_size);
    for class in classes {
        batch.extend(choose_without_replacement(
            &groups[&class],
            spec.per_class,
            rng,
        ));
    }
    batch
}

/// Draw a batch of `B` indices: `classes_per_batch` distinct classes chosen
/// uniformly without replacement, `per_class` samples from each. Every class
/// present in `groups` must have at least `per_class` members.
pub fn sample_balanced_batch<R: Rng>(
    groups: &BTreeMap<usize, Vec<usize>>,
    spec: &BalancedBatchSpec,
    rng: &mut R,
) -> CoreResult<Vec<usize>> {
    for (class, members) in groups {
        ensure!(
            members.len() >= spec.per_class,
            InvalidData,
            "class {class} has only {} samples, need {}",
            members.len(),
            spec.per_class
        );
    }
    ensure!(
        groups.len() >= spec.classes_per_batch(),
        InvalidData,
        "batch needs {} distinct classes but the dataset has {}",
        spec.classes_per_batch(),
        groups.len()
    );
    let eligible: Vec<usize> = groups.keys().copied().collect();
    Ok(draw_batch(groups, &eligible, spec, rng))
}

/// Cluster-tolerant variant: classes lacking `per_class` members are skipped;
/// returns `None` (consuming no randomness) when too few classes remain, so
/// the caller can fall back to the full dataset.
pub fn try_sample_balanced_batch<R: Rng>(
    groups: &BTreeMap<usize, Vec<usize>>,
    spec: &BalancedBatchSpec,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let eligible = eligible_classes(groups, spec.per_class);
    if eligible.len() < spec.classes_per_batch() {
        return None;
    }
    Some(draw_batch(groups, &eligible, spec, rng))
}

/// Stack store images at `indices` into a `[B, 3, h, w]` tensor.
pub fn stack_images<T: Scalar, S: SampleStore<T> + ?Sized>(
    store: &S,
    indices: &[usize],
) -> CoreResult<Tensor<T>> {
    ensure!(!indices.is_empty(), InvalidData, "cannot stack an empty batch");
    let first = store.image(indices[0])?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
    let stride = c * h * w;
    out.data_mut()[..stride].copy_from_slice(first.data());
    for (bi, &idx) in indices.iter().enumerate().skip(1) {
        let img = store.image(idx)?;
        ensure!(
            img.shape() == [c, h, w],
            ShapeMismatch,
            "image {} has shape {:?}, batch expects {:?}",
            store.id(idx),
            img.shape(),
            [c, h, w]
        );
        out.data_mut()[bi * stride..(bi + 1) * stride].copy_from_slice(img.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn groups_for(class_sizes: &[usize]) -> BTreeMap<usize, Vec<usize>> {
        let mut labels = Vec::new();
        for (c, &n) in class_sizes.iter().enumerate() {
            for _ in 0..n {
                labels.push(c + 1);
            }
        }
        group_by_class(&labels)
    }

    #[test]
    fn batch_has_exact_per_class_counts() {
        let groups = groups_for(&[10, 10, 10, 10, 10]);
        let spec = BalancedBatchSpec::new(32, 8).unwrap();
        let mut rng = derive_rng(71, "batch", 0);
        let batch = sample_balanced_batch(&groups, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut labels = vec![0usize; 50];
        for (c, members) in &groups {
            for &m in members {
                labels[m] = *c;
            }
        }
        for &i in &batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&v| v == 8));
        // no duplicate samples
        let mut seen = batch.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 32);
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let groups = groups_for(&[10, 10, 10]);
        let spec = BalancedBatchSpec::new(32, 8).unwrap();
        let mut rng = derive_rng(71, "batch", 1);
        assert!(sample_balanced_batch(&groups, &spec, &mut rng).is_err());
    }

    #[test]
    fn short_class_is_an_error_strict_but_skipped_in_try() {
        let groups = groups_for(&[10, 3, 10, 10, 10]);
        let spec = BalancedBatchSpec::new(32, 8).unwrap();
        let mut rng = derive_rng(71, "batch", 2);
        assert!(sample_balanced_batch(&groups, &spec, &mut rng).is_err());
        let batch = try_sample_balanced_batch(&groups, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        // class 2 (indices 10..13) must not appear
        assert!(batch.iter().all(|&i| !(10..13).contains(&i)));
    }

    #[test]
    fn try_sample_returns_none_without_consuming_rng() {
        let groups = groups_for(&[10, 3, 10, 10]);
        let spec = BalancedBatchSpec::new(32, 8).unwrap();
        let mut a = derive_rng(71, "batch", 3);
        let mut b = derive_rng(71, "batch", 3);
        assert!(try_sample_balanced_batch(&groups, &spec, &mut a).is_none());
        let x: u64 = a.gen();
        let y: u64 = b.gen();
        assert_eq!(x, y);
    }

    #[test]
    fn class_frequencies_are_near_uniform() {
        // 7 classes, 4 chosen per batch: expected pick rate 4/7 per batch
        let groups = groups_for(&[20; 7]);
        let spec = BalancedBatchSpec::new(32, 8).unwrap();
        let mut rng = derive_rng(72, "uniform", 0);
        let mut picks = [0usize; 7];
        let trials = 2000;
        for _ in 0..trials {
            let batch = sample_balanced_batch(&groups, &spec, &mut rng).unwrap();
            let mut hit = [false; 7];
            for &i in &batch {
                hit[i / 20] = true;
            }
            for (c, h) in hit.iter().enumerate() {
                if *h {
                    picks[c] += 1;
                }
            }
        }
        let expect = trials as f64 * 4.0 / 7.0;
        for (c, &p) in picks.iter().enumerate() {
            let ratio = p as f64 / expect;
            assert!(
                (ratio - 1.0).abs() < 0.1,
                "class {c} picked {p} times, expected about {expect}"
            );
        }
    }

    #[test]
    fn stack_images_rejects_mixed_shapes() {
        let mk = |h: usize| Tensor::<f32>::zeros(&[3, h, 4]);
        let store = InMemoryStore::new(
            vec!["a".into(), "b".into()],
            vec![1, 1],
            vec![mk(4), mk(5)],
        )
        .unwrap();
        assert!(stack_images(&store, &[0, 1]).is_err());
        assert!(stack_images(&store, &[0]).is_ok());
    }
}
