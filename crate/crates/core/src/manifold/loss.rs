//! Margin loss over embedding pairs and within-batch pair construction.

use alloc::vec::Vec;

use rand::Rng;

// resolves float math on concrete f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{ensure, CoreResult};
use crate::tensor::{euclidean, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairStrategy {
    AllPairs,
    DistanceWeightedNegatives,
}

impl PairStrategy {
    pub fn from_name(name: &str) -> CoreResult<Self> {
        match name {
            "all_pairs" => Ok(PairStrategy::AllPairs),
            "distance_weighted_negatives" => Ok(PairStrategy::DistanceWeightedNegatives),
            other => Err(crate::error::CoreError::InvalidConfig(alloc::format!(
                "unknown pair strategy '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PairStrategy::AllPairs => "all_pairs",
            PairStrategy::DistanceWeightedNegatives => "distance_weighted_negatives",
        }
    }
}

/// Margin-loss hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct MarginConfig {
    pub alpha: f64,
    pub beta: f64,
    pub pair_strategy: PairStrategy,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            alpha: 0.2,
            beta: 1.2,
            pair_strategy: PairStrategy::AllPairs,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> CoreResult<()> {
        ensure!(
            self.alpha > 0.0,
            InvalidConfig,
            "margin alpha must be positive, got {}",
            self.alpha
        );
        ensure!(
            self.beta > self.alpha,
            InvalidConfig,
            "margin beta ({}) must exceed alpha ({})",
            self.beta,
            self.alpha
        );
        Ok(())
    }
}

/// An unordered sample pair with its similarity sign: `mu` is +1 when both
/// samples carry the same class label, -1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
    pub mu: i8,
}

/// Hinged margin loss for one pair:
/// `max(0, alpha + mu * (||e_i - e_j|| - beta))`.
pub fn margin_loss<T: Scalar>(
    e_i: &[T],
    e_j: &[T],
    mu: i8,
    cfg: &MarginConfig,
) -> CoreResult<T> {
    ensure!(
        e_i.len() == e_j.len(),
        ShapeMismatch,
        "embedding lengths differ: {} vs {}",
        e_i.len(),
        e_j.len()
    );
    ensure!(
        e_i.iter().chain(e_j.iter()).all(|v| v.is_finite()),
        NonFinite,
        "margin loss called with non-finite embeddings"
    );
    ensure!(mu == 1 || mu == -1, InvalidData, "mu must be +1 or -1, got {mu}");
    let d = euclidean(e_i, e_j);
    let pre = T::from_f64(cfg.alpha) + T::from_f64(mu as f64) * (d - T::from_f64(cfg.beta));
    Ok(if pre > T::zero() { pre } else { T::zero() })
}

/// Every unordered pair in the batch, labeled by class equality.
pub fn all_pairs(labels: &[usize]) -> CoreResult<Vec<PairLabel>> {
    ensure!(
        labels.len() >= 2,
        InvalidData,
        "pair construction needs at least 2 samples, got {}",
        labels.len()
    );
    let mut pairs = Vec::with_capacity(labels.len() * (labels.len() - 1) / 2);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            pairs.push(PairLabel {
                i,
                j,
                mu: if labels[i] == labels[j] { 1 } else { -1 },
            });
        }
    }
    Ok(pairs)
}

/// All positive pairs plus one sampled negative per anchor.
///
/// Negatives are drawn with probability proportional to the inverse of the
/// distance density on the unit (n-1)-sphere,
///
/// ```text
/// q(d) ∝ d^(n-2) * (1 - d^2/4)^((n-3)/2),
/// ```
///
/// which counteracts the concentration of random pairs near d = sqrt(2) and
/// yields informative negatives across the whole distance range. For the
/// density evaluation d is clamped to [0.05, 1.95] to keep the weights
/// finite at the ends of the support; n below 3 falls back to uniform
/// sampling.
pub fn distance_weighted_pairs<T: Scalar, R: Rng>(
    labels: &[usize],
    embeddings: &Tensor<T>,
    rng: &mut R,
) -> CoreResult<Vec<PairLabel>> {
    ensure!(
        labels.len() >= 2,
        InvalidData,
        "pair construction needs at least 2 samples, got {}",
        labels.len()
    );
    let b = labels.len();
    let d = embeddings.numel() / b;
    ensure!(
        embeddings.shape() == [b, d],
        ShapeMismatch,
        "embeddings {:?} do not match {b} labels",
        embeddings.shape()
    );
    let row = |i: usize| &embeddings.data()[i * d..(i + 1) * d];
    let n = d as f64;

    let mut pairs = Vec::new();
    for i in 0..b {
        for j in i + 1..b {
            if labels[i] == labels[j] {
                pairs.push(PairLabel { i, j, mu: 1 });
            }
        }
    }
    for anchor in 0..b {
        let candidates: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[anchor]).collect();
        if candidates.is_empty() {
            continue;
        }
        // log inverse-density weights, shift-normalized for stability
        let mut logw = Vec::with_capacity(candidates.len());
        for &j in &candidates {
            let dist = euclidean(row(anchor), row(j)).to_f64().clamp(0.05, 1.95);
            let lq = if n >= 3.0 {
                (n - 2.0) * dist.ln() + 0.5 * (n - 3.0) * (1.0 - dist * dist / 4.0).ln()
            } else {
                0.0
            };
            logw.push(-lq);
        }
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logw.iter().map(|&l| (l - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = candidates[candidates.len() - 1];
        for (w, &j) in weights.iter().zip(&candidates) {
            if u < *w {
                chosen = j;
                break;
            }
            u -= *w;
        }
        pairs.push(PairLabel {
            i: anchor,
            j: chosen,
            mu: -1,
        });
    }
    Ok(pairs)
}

pub fn build_pairs<T: Scalar, R: Rng>(
    labels: &[usize],
    strategy: PairStrategy,
    embeddings: &Tensor<T>,
    rng: &mut R,
) -> CoreResult<Vec<PairLabel>> {
    match strategy {
        PairStrategy::AllPairs => all_pairs(labels),
        PairStrategy::DistanceWeightedNegatives => {
            distance_weighted_pairs(labels, embeddings, rng)
        }
    }
}

/// Mean margin loss over the active pairs (those with strictly positive
/// loss); 0 when no pair is active. The pair list is expected to be nonempty.
pub fn batch_margin_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    pairs: &[PairLabel],
    cfg: &MarginConfig,
) -> CoreResult<T> {
    Ok(batch_margin_loss_with_grad(embeddings, pairs, cfg)?.0)
}

/// Loss, gradient w.r.t. the embeddings, and the number of active pairs.
///
/// The hinge uses subgradient 0 at an exactly-zero pre-hinge value (such
/// pairs are inactive). Coincident embeddings in an active pair contribute
/// zero gradient (subgradient choice at the distance kink).
pub fn batch_margin_loss_with_grad<T: Scalar>(
    embeddings: &Tensor<T>,
    pairs: &[PairLabel],
    cfg: &MarginConfig,
) -> CoreResult<(T, Tensor<T>, usize)> {
    let s = embeddings.shape();
    ensure!(
        s.len() == 2,
        ShapeMismatch,
        "expected [batch, dim] embeddings, got {s:?}"
    );
    let (b, d) = (s[0], s[1]);
    let alpha = T::from_f64(cfg.alpha);
    let beta = T::from_f64(cfg.beta);
    let mut grad = Tensor::zeros(s);
    let mut loss_sum = T::zero();
    let mut active = 0usize;
    for p in pairs {
        ensure!(
            p.i < b && p.j < b && p.i != p.j,
            InvalidData,
            "pair ({}, {}) out of range for batch {b}",
            p.i,
            p.j
        );
        let (lo, hi) = (p.i.min(p.j), p.i.max(p.j));
        let (head, tail) = embeddings.data().split_at(hi * d);
        let ei = &head[lo * d..lo * d + d];
        let ej = &tail[..d];
        let mu = T::from_f64(p.mu as f64);
        let dist = euclidean(ei, ej);
        let pre = alpha + mu * (dist - beta);
        if pre <= T::zero() {
            continue;
        }
        active += 1;
        loss_sum += pre;
        if dist > T::from_f64(1e-12) {
            let coef = mu / dist;
            let gd = grad.data_mut();
            for k in 0..d {
                let diff = (ei[k] - ej[k]) * coef;
                gd[lo * d + k] += diff;
                gd[hi * d + k] -= diff;
            }
        }
    }
    if active == 0 {
        return Ok((T::zero(), grad, 0));
    }
    let inv = T::from_f64(1.0 / active as f64);
    loss_sum *= inv;
    grad.scale(inv);
    ensure!(
        loss_sum.is_finite(),
        NonFinite,
        "batch margin loss is not finite"
    );
    Ok((loss_sum, grad, active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn cfg() -> MarginConfig {
        MarginConfig::default()
    }

    #[test]
    fn scalar_margin_loss_cases() {
        let e = [0.5f64, 0.5, 0.5, 0.5];
        // identical similar pair: hinge clips to 0
        assert_eq!(margin_loss(&e, &e, 1, &cfg()).unwrap(), 0.0);
        // identical dissimilar pair: 0.2 - (0 - 1.2) = 1.4
        assert!((margin_loss(&e, &e, -1, &cfg()).unwrap() - 1.4).abs() < 1e-15);
        // distance exactly beta: similar pair costs alpha
        let a = [0.0f64, 0.0];
        let b = [1.2f64, 0.0];
        assert!((margin_loss(&a, &b, 1, &cfg()).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn margin_loss_is_symmetric_and_nonnegative() {
        let mut rng = derive_rng(81, "sym", 0);
        for _ in 0..200 {
            let a = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            for mu in [1i8, -1] {
                let l1 = margin_loss(a.data(), b.data(), mu, &cfg()).unwrap();
                let l2 = margin_loss(b.data(), a.data(), mu, &cfg()).unwrap();
                assert_eq!(l1, l2);
                assert!(l1 >= 0.0);
            }
        }
    }

    #[test]
    fn margin_loss_zero_regions() {
        // mu=+1: zero iff distance <= beta - alpha; mu=-1: zero iff
        // distance >= beta + alpha. The exact boundaries (1.0 and 1.4) sit
        // within representation error of the analytic kink, so they are
        // checked with a tolerance instead of an exact-zero test.
        let origin = [0.0f64];
        for dist in [0.0, 0.5, 0.999, 1.001, 1.399, 1.401, 2.0] {
            let other = [dist];
            let lp = margin_loss(&origin, &other, 1, &cfg()).unwrap();
            let ln = margin_loss(&origin, &other, -1, &cfg()).unwrap();
            assert_eq!(lp == 0.0, dist <= 1.0, "mu=+1 at {dist}");
            assert_eq!(ln == 0.0, dist >= 1.4, "mu=-1 at {dist}");
        }
        let lp = margin_loss(&origin, &[1.0], 1, &cfg()).unwrap();
        let ln = margin_loss(&origin, &[1.4], -1, &cfg()).unwrap();
        assert!(lp.abs() <= 1e-15, "kink at 1.0: {lp}");
        assert!(ln.abs() <= 1e-15, "kink at 1.4: {ln}");
    }

    #[test]
    fn non_finite_embeddings_are_rejected() {
        let a = [f64::NAN, 0.0];
        let b = [0.0f64, 0.0];
        assert!(margin_loss(&a, &b, 1, &cfg()).is_err());
    }

    #[test]
    fn all_pairs_enumeration() {
        let pairs = all_pairs(&[1, 1, 2]).unwrap();
        assert_eq!(
            pairs,
            vec![
                PairLabel { i: 0, j: 1, mu: 1 },
                PairLabel { i: 0, j: 2, mu: -1 },
                PairLabel { i: 1, j: 2, mu: -1 },
            ]
        );
        let same = all_pairs(&[3, 3, 3, 3]).unwrap();
        assert!(same.iter().all(|p| p.mu == 1));
        assert_eq!(same.len(), 6);
    }

    #[test]
    fn balanced_batch_pair_counts() {
        // 4 classes x 8 samples: C(32,2) pairs, 4*C(8,2) positives
        let labels: Vec<usize> = (0..32).map(|i| i / 8 + 1).collect();
        let pairs = all_pairs(&labels).unwrap();
        assert_eq!(pairs.len(), 496);
        assert_eq!(pairs.iter().filter(|p| p.mu == 1).count(), 112);
    }

    #[test]
    fn batch_loss_means_over_active_pairs_only() {
        // 1-d embeddings place distances exactly; with mu=+1 the loss is
        // 0.2 + d - 1.2, so the three pairs below cost {0, 0.5, 1.5} and the
        // mean over the 2 active ones is 1.0
        let e = Tensor::from_vec(&[4, 1], vec![0.0f64, 0.5, 1.5, 4.0]).unwrap();
        let pairs = vec![
            PairLabel { i: 0, j: 1, mu: 1 }, // d=0.5 -> hinged to 0, inactive
            PairLabel { i: 0, j: 2, mu: 1 }, // d=1.5 -> 0.5
            PairLabel { i: 2, j: 3, mu: 1 }, // d=2.5 -> 1.5
        ];
        let (loss, _, active) = batch_margin_loss_with_grad(&e, &pairs, &cfg()).unwrap();
        assert_eq!(active, 2);
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_zero_when_all_inactive() {
        // similar pairs at distance <= 1.0 are all inactive
        let e = Tensor::from_vec(&[2, 1], vec![0.0f64, 0.5]).unwrap();
        let pairs = vec![PairLabel { i: 0, j: 1, mu: 1 }];
        let (loss, grad, active) = batch_margin_loss_with_grad(&e, &pairs, &cfg()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(active, 0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn singleton_pair_mean_equals_margin_loss() {
        let mut rng = derive_rng(82, "single", 0);
        let e = Tensor::<f64>::randn(&[2, 6], 1.0, &mut rng);
        let pairs = vec![PairLabel { i: 0, j: 1, mu: -1 }];
        let batch = batch_margin_loss(&e, &pairs, &cfg()).unwrap();
        let single =
            margin_loss(&e.data()[..6], &e.data()[6..], -1, &cfg()).unwrap();
        assert_eq!(batch, single);
    }

    #[test]
    fn batch_gradient_matches_finite_differences_away_from_kinks() {
        let step = 1e-5;
        let mut checked = 0usize;
        'outer: for attempt in 0..50 {
            let e = Tensor::<f64>::randn(&[6, 4], 0.8, &mut derive_rng(83, "fd-e", attempt));
            let labels = [1usize, 1, 2, 2, 3, 3];
            let pairs = all_pairs(&labels).unwrap();
            // skip configurations with any pair near its hinge kink
            for p in &pairs {
                let ei = &e.data()[p.i * 4..p.i * 4 + 4];
                let ej = &e.data()[p.j * 4..p.j * 4 + 4];
                let d = euclidean(ei, ej);
                let pre = 0.2 + (p.mu as f64) * (d - 1.2);
                if pre.abs() <= 1e-3 {
                    continue 'outer;
                }
            }
            let (_, grad, _) = batch_margin_loss_with_grad(&e, &pairs, &cfg()).unwrap();
            for k in 0..4 {
                let idx = (attempt as usize * 7 + k * 5) % e.numel();
                let mut ep = e.clone();
                ep.data_mut()[idx] += step;
                let mut em = e.clone();
                em.data_mut()[idx] -= step;
                let fd = (batch_margin_loss(&ep, &pairs, &cfg()).unwrap()
                    - batch_margin_loss(&em, &pairs, &cfg()).unwrap())
                    / (2.0 * step);
                let an = grad.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom <= 1e-4,
                    "attempt {attempt} idx {idx}: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
            if checked >= 20 {
                break;
            }
        }
        assert!(checked >= 20, "only {checked} gradient points checked");
    }

    #[test]
    fn distance_weighted_keeps_all_positives_and_one_negative_per_anchor() {
        let mut rng = derive_rng(84, "dw", 0);
        let labels = [1usize, 1, 1, 2, 2, 2];
        let e = {
            let raw = Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng);
            crate::nets::layers::l2_normalize_rows(&raw).0
        };
        let pairs = distance_weighted_pairs(&labels, &e, &mut rng).unwrap();
        let positives: Vec<_> = pairs.iter().filter(|p| p.mu == 1).collect();
        let negatives: Vec<_> = pairs.iter().filter(|p| p.mu == -1).collect();
        assert_eq!(positives.len(), 6); // 2 * C(3,2)
        assert_eq!(negatives.len(), 6); // one per anchor
        for p in &negatives {
            assert_ne!(labels[p.i], labels[p.j]);
        }
        for p in &positives {
            assert_eq!(labels[p.i], labels[p.j]);
        }
    }

    #[test]
    fn single_class_batch_has_no_negatives_under_distance_weighting() {
        let mut rng = derive_rng(84, "dw", 1);
        let labels = [5usize; 4];
        let e = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let pairs = distance_weighted_pairs(&labels, &e, &mut rng).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.mu == 1));
    }
}
