//! Ranking metrics and target-graph evaluation.
//!
//! AUROC is the Mann–Whitney statistic with ties counted as half wins.
//! AUPRC is average precision: positives are visited in descending score
//! order (equal scores keep ascending node order) and the precision at each
//! positive's rank is averaged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{infer, InferenceOptions, ModelParams, Support};
use crate::error::{Error, Result};
use crate::fingerprint::ReFiMatrix;
use crate::rng::SplitMix64;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::RowCountMismatch { what: "labels", got: labels.len(), expected: scores.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUROC needs both positive and negative labels".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l != 0).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::Invalid("AUPRC needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub folds: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub full_context: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 50, folds: 5, seed: 42, batch_size: 512, full_context: false }
    }
}

/// Scores and metrics for one support draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub fold: usize,
    pub fold_seed: u64,
    pub support: Support,
    pub nodes: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub k_requested: usize,
    pub k_used: usize,
    pub warnings: Vec<String>,
    pub folds: Vec<ScoreReport>,
    pub auroc: MeanStd,
    pub auprc: MeanStd,
}

/// Fold seed derived from the evaluation seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    SplitMix64::keyed(seed, &[0xe7a1, fold as u64]).next_u64()
}

/// Draws `k` normal and `k` anomalous supports uniformly without replacement.
pub fn sample_support(labels: &[u8], k: usize, rng: &mut SplitMix64) -> Result<Support> {
    let normals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let anomalies: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    if anomalies.len() < k {
        return Err(Error::InsufficientAnomalies { have: anomalies.len(), need: k });
    }
    if normals.len() < k {
        return Err(Error::InsufficientNormals { have: normals.len(), need: k });
    }
    let normal = rng.choose_distinct(&normals, k);
    let anomalous = rng.choose_distinct(&anomalies, k);
    Ok(Support { normal, anomalous })
}

/// Scores every non-support node of a labeled target graph for `folds`
/// independent support draws. The model is only read.
pub fn evaluate_target(params: &ModelParams, refi: &ReFiMatrix, labels: &[u8], cfg: &EvalConfig) -> Result<Evaluation> {
    if labels.len() != refi.n() {
        return Err(Error::RowCountMismatch { what: "labels", got: labels.len(), expected: refi.n() });
    }
    if cfg.folds == 0 || cfg.k == 0 {
        return Err(Error::Invalid("folds and k must be at least 1".into()));
    }
    let anomalies = labels.iter().filter(|&&l| l != 0).count();
    let normals = labels.len() - anomalies;
    // One node of each class must stay outside the support for the metrics.
    let k_used = cfg.k.min(anomalies.saturating_sub(1)).min(normals.saturating_sub(1));
    if k_used == 0 {
        return Err(Error::InsufficientAnomalies { have: anomalies, need: 2 });
    }
    let mut warnings = Vec::new();
    if k_used < cfg.k {
        let msg = format!(
            "target has {anomalies} anomalies and {normals} normals; using k = {k_used} instead of {}",
            cfg.k
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let opts = InferenceOptions { batch_size: cfg.batch_size, full_context: cfg.full_context, keep_embeddings: false };
    let folds = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let seed = fold_seed(cfg.seed, fold);
            let support = sample_support(labels, k_used, &mut SplitMix64::new(seed))?;
            let nodes: Vec<usize> = (0..labels.len()).filter(|&i| !support.contains(i)).collect();
            let out = infer(params, refi, &support, &nodes, opts)?;
            let fold_labels: Vec<u8> = nodes.iter().map(|&i| labels[i]).collect();
            Ok(ScoreReport {
                fold,
                fold_seed: seed,
                auroc: auroc(&out.scores, &fold_labels)?,
                auprc: auprc(&out.scores, &fold_labels)?,
                support,
                nodes,
                scores: out.scores,
                labels: fold_labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for f in &folds {
        if f.nodes.iter().any(|&i| f.support.contains(i)) {
            return Err(Error::Invalid(format!("fold {} scored a support node", f.fold)));
        }
    }
    let aurocs: Vec<f64> = folds.iter().map(|f| f.auroc).collect();
    let auprcs: Vec<f64> = folds.iter().map(|f| f.auprc).collect();
    Ok(Evaluation {
        k_requested: cfg.k,
        k_used,
        warnings,
        auroc: MeanStd::of(&aurocs),
        auprc: MeanStd::of(&auprcs),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn rank_walk_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        // Insertion into a descending list; equal scores go after earlier indices.
        let mut ranked: Vec<usize> = Vec::new();
        for i in 0..scores.len() {
            let at = ranked.iter().position(|&j| scores[j] < scores[i]).unwrap_or(ranked.len());
            ranked.insert(at, i);
        }
        let p = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut sum = 0.0;
        for (r, &i) in ranked.iter().enumerate() {
            if labels[i] == 1 {
                let tp = ranked[..=r].iter().filter(|&&j| labels[j] == 1).count() as f64;
                sum += tp / (r + 1) as f64;
            }
        }
        sum / p
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3; 7], &[1, 0, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(), 0.25);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(auroc(&[0.1], &[1, 0]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }

    #[test]
    fn random_vectors_match_oracles() {
        let mut rng = SplitMix64::new(99);
        for case in 0..300 {
            let m = 2 + rng.below(120) as usize;
            let levels = if case % 3 == 0 { 4 } else { 1_000_000 };
            let scores: Vec<f64> = (0..m).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let mut labels: Vec<u8> = (0..m).map(|_| rng.bernoulli(0.3) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert!((auroc(&scores, &labels).unwrap() - pair_oracle(&scores, &labels)).abs() <= 1e-12);
            assert!((auprc(&scores, &labels).unwrap() - rank_walk_oracle(&scores, &labels)).abs() <= 1e-9);
        }
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn support_sampling_respects_classes() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 5 == 0) as u8).collect();
        let s = sample_support(&labels, 3, &mut SplitMix64::new(1)).unwrap();
        assert!(s.normal.iter().all(|&i| labels[i] == 0));
        assert!(s.anomalous.iter().all(|&i| labels[i] == 1));
        assert!(matches!(sample_support(&labels, 9, &mut SplitMix64::new(1)), Err(Error::InsufficientAnomalies { .. })));
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_maps(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1 as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let a = auroc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            prop_assert!((a - auroc(&mapped, &labels).unwrap()).abs() <= 1e-12);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] < w[1]) {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
