//! Classification and retrieval scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold for F1 and precision.
pub const THRESHOLD: f64 = 0.5;

/// Mann-Whitney AUC of class 1 with midranks for ties.
pub fn binary_auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::shape("auc", &[labels.len()], &[scores.len()]));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined(format!("{pos} positive and {neg} negative labels")));
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&y, _)| y >= 0.5).map(|(_, r)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC of both classes weighted by class support.
pub fn weighted_auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    let auc1 = binary_auc(labels, scores)?;
    let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
    let inverse: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    let auc0 = binary_auc(&flipped, &inverse)?;
    let w1 = labels.iter().filter(|&&y| y >= 0.5).count() as f64 / labels.len() as f64;
    Ok(w1 * auc1 + (1.0 - w1) * auc0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct ClassCounts {
    tp: usize,
    predicted: usize,
    support: usize,
}

fn class_counts(labels: &[f64], scores: &[f64]) -> [ClassCounts; 2] {
    let mut c = [ClassCounts::default(); 2];
    for (&y, &s) in labels.iter().zip(scores) {
        let truth = usize::from(y >= 0.5);
        let pred = usize::from(s >= THRESHOLD);
        c[truth].support += 1;
        c[pred].predicted += 1;
        if truth == pred {
            c[truth].tp += 1;
        }
    }
    c
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Support-weighted precision; a class never predicted contributes 0.
pub fn weighted_precision(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("precision"));
    }
    let n = labels.len() as f64;
    Ok(class_counts(labels, scores)
        .iter()
        .map(|c| c.support as f64 / n * ratio(c.tp, c.predicted))
        .sum())
}

pub fn weighted_f1(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("f1"));
    }
    let n = labels.len() as f64;
    Ok(class_counts(labels, scores)
        .iter()
        .map(|c| {
            let (p, r) = (ratio(c.tp, c.predicted), ratio(c.tp, c.support));
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            c.support as f64 / n * f1
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentMetrics {
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
}

/// Fails with `AucUndefined` when only one class is present; F1 and precision are
/// still available through their own functions in that case.
pub fn metrics_sentiment(labels: &[f64], scores: &[f64]) -> Result<SentimentMetrics> {
    Ok(SentimentMetrics {
        auc: weighted_auc(labels, scores)?,
        f1: weighted_f1(labels, scores)?,
        precision: weighted_precision(labels, scores)?,
    })
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("median rank"));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

pub fn recall_at(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("recall at k"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub med_r: f64,
    /// `k -> R@k`
    pub recall: BTreeMap<usize, f64>,
}

pub fn metrics_retrieval(ranks: &[usize], ks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at(ranks, k)?);
    }
    Ok(RetrievalMetrics {
        med_r: median_rank(ranks)?,
        recall,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Candidate positions, best first.
    pub order: Vec<usize>,
    /// 1-based rank of the ground truth.
    pub rank: usize,
}

/// Sorts by descending score with ascending index breaking ties.
pub fn rank_candidates(scores: &[f64], truth: usize) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("candidate ranking"));
    }
    if truth >= scores.len() {
        return Err(Error::Contract(format!(
            "ground truth {truth} is not among {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let rank = order.iter().position(|&i| i == truth).expect("truth is in range") + 1;
    Ok(Ranking { order, rank })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum EvalReport {
    Sentiment {
        variant: String,
        items: usize,
        auc: f64,
        f1: f64,
        precision: f64,
    },
    Retrieval {
        variant: String,
        queries: usize,
        candidates: usize,
        med_r: f64,
        recall: Vec<RecallAt>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
    fn pair_auc(labels: &[f64], scores: &[f64]) -> f64 {
        let (mut good, mut total) = (0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    total += 1.0;
                    good += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        good / total
    }

    #[test]
    fn hand_case() {
        let y = [1.0, 1.0, 0.0, 0.0];
        let s = [0.9, 0.4, 0.6, 0.1];
        assert_eq!(binary_auc(&y, &s).unwrap(), 0.75);
        let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let oracle = 0.5 * pair_auc(&y, &s) + 0.5 * pair_auc(&flipped, &inv);
        assert!((weighted_auc(&y, &s).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn separated_and_flat() {
        let y = [0.0, 0.0, 1.0, 1.0, 1.0];
        let s = [0.1, 0.2, 0.7, 0.8, 0.9];
        let m = metrics_sentiment(&y, &s).unwrap();
        assert_eq!((m.auc, m.f1, m.precision), (1.0, 1.0, 1.0));
        let y: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i < 7))).collect();
        assert_eq!(weighted_auc(&y, &[0.5; 10]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_auc_is_undefined() {
        let y = [1.0, 1.0];
        let s = [0.2, 0.9];
        assert!(matches!(metrics_sentiment(&y, &s), Err(Error::AucUndefined(_))));
        assert_eq!(weighted_precision(&y, &s).unwrap(), 1.0);
        assert!((weighted_f1(&y, &s).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_precision_by_hand() {
        // predictions 1,0,1,0 against truth 1,1,0,0
        let y = [1.0, 1.0, 0.0, 0.0];
        let s = [0.9, 0.4, 0.6, 0.1];
        assert_eq!(weighted_precision(&y, &s).unwrap(), 0.5);
        assert_eq!(weighted_f1(&y, &s).unwrap(), 0.5);
        // everything predicted 1 with 3 of 4 positives
        let y = [1.0, 1.0, 1.0, 0.0];
        let s = [0.9; 4];
        assert!((weighted_precision(&y, &s).unwrap() - 0.75 * 0.75).abs() < 1e-15);
        assert!((weighted_f1(&y, &s).unwrap() - 0.75 * (2.0 * 0.75 / 1.75)).abs() < 1e-15);
    }

    #[test]
    fn retrieval_examples() {
        let m = metrics_retrieval(&[1, 3, 5], &[1, 5]).unwrap();
        assert_eq!(m.med_r, 3.0);
        assert!((m.recall[&1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall[&5], 1.0);
        let m = metrics_retrieval(&[1; 7], &[1, 5, 10]).unwrap();
        assert_eq!(m.med_r, 1.0);
        assert!(m.recall.values().all(|&r| r == 1.0));
        assert_eq!(median_rank(&[2, 4]).unwrap(), 3.0);
        assert!(matches!(metrics_retrieval(&[], &[1]), Err(Error::EmptyInput(_))));
        assert!(metrics_retrieval(&[0, 1], &[1]).is_err());
    }

    #[test]
    fn ranking_ties_and_truth() {
        assert_eq!(rank_candidates(&[0.3], 0).unwrap().rank, 1);
        for truth in 0..6 {
            assert_eq!(rank_candidates(&[0.5; 6], truth).unwrap().rank, truth + 1);
        }
        let r = rank_candidates(&[0.2, 0.9, 0.2, 0.5], 2).unwrap();
        assert_eq!(r.order, vec![1, 3, 0, 2]);
        assert_eq!(r.rank, 4);
        assert!(matches!(rank_candidates(&[0.1, 0.2], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn report_is_one_json_line() {
        let r = EvalReport::Retrieval {
            variant: "jtav".into(),
            queries: 2,
            candidates: 5,
            med_r: 1.5,
            recall: vec![RecallAt { k: 1, recall: 0.5 }],
        };
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(serde_json::from_str::<EvalReport>(&line).unwrap(), r);
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_ignores_monotone_maps(
            pts in prop::collection::vec((0u8..2, 0u8..6), 2..40)
        ) {
            let y: Vec<f64> = pts.iter().map(|p| f64::from(p.0)).collect();
            let s: Vec<f64> = pts.iter().map(|p| f64::from(p.1) / 5.0).collect();
            prop_assume!(y.contains(&0.0) && y.contains(&1.0));
            let auc = binary_auc(&y, &s).unwrap();
            prop_assert!((auc - pair_auc(&y, &s)).abs() < 1e-12);
            let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((binary_auc(&y, &warped).unwrap() - auc).abs() < 1e-12);
            let w = weighted_auc(&y, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
        }

        #[test]
        fn recall_monotone_and_median_bounded(ranks in prop::collection::vec(1usize..60, 1..50)) {
            let ks: Vec<usize> = (1..=60).collect();
            let m = metrics_retrieval(&ranks, &ks).unwrap();
            let vals: Vec<f64> = m.recall.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(vals[59], 1.0);
            let (lo, hi) = (*ranks.iter().min().unwrap() as f64, *ranks.iter().max().unwrap() as f64);
            prop_assert!(m.med_r >= lo && m.med_r <= hi);
            let below = ranks.iter().filter(|&&r| (r as f64) < m.med_r).count();
            let above = ranks.iter().filter(|&&r| (r as f64) > m.med_r).count();
            prop_assert!(below <= ranks.len() / 2 && above <= ranks.len() / 2);
        }
    }
}
