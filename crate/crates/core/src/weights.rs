//! Soft confusion counts, the expected overall F-score, and the weight vectors that
//! drive training: uniform `q`, fixed inverse-frequency, and dynamic F-score weights.

use crate::error::{Error, Result};
use crate::inference::PositionMarginals;
use crate::model::LabeledSequence;
use crate::objective::WeightVector;

/// Probabilistic confusion counts from chain marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCounts {
    /// `TP_k = sum_{t: gold = k} p(y_t = k | x)`
    pub tp: Vec<f64>,
    /// `FP_k = sum_{t: gold != k} p(y_t = k | x)`
    pub fp: Vec<f64>,
    /// Gold count of class `k`.
    pub n: Vec<u64>,
    pub total: u64,
}

impl SoftCounts {
    pub fn num_classes(&self) -> usize {
        self.n.len()
    }

    /// Classes with at least one gold position.
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.n.iter().enumerate().filter(|(_, &n)| n > 0).map(|(k, _)| k)
    }

    pub fn present_count(&self) -> usize {
        self.present_classes().count()
    }
}

/// Accumulates soft TP/FP and gold counts over a dataset, in sequence order.
pub fn soft_counts(
    marginals: &[PositionMarginals],
    gold: &[&[usize]],
    num_classes: usize,
) -> Result<SoftCounts> {
    if marginals.len() != gold.len() {
        return Err(Error::dim("marginals vs gold sequences", gold.len(), marginals.len()));
    }
    let mut tp = vec![0.0; num_classes];
    let mut fp = vec![0.0; num_classes];
    let mut n = vec![0u64; num_classes];
    for (i, (m, labels)) in marginals.iter().zip(gold).enumerate() {
        if m.len() != labels.len() {
            return Err(Error::dim(format!("marginals of sequence {i}"), labels.len(), m.len()));
        }
        if m.num_classes() != num_classes {
            return Err(Error::dim(format!("classes of sequence {i}"), num_classes, m.num_classes()));
        }
        for (t, &g) in labels.iter().enumerate() {
            if g >= num_classes {
                return Err(Error::contract(format!("label {g} out of range in sequence {i}")));
            }
            n[g] += 1;
            for (k, &p) in m.row(t).iter().enumerate() {
                if k == g {
                    tp[k] += p;
                } else {
                    fp[k] += p;
                }
            }
        }
    }
    let total = n.iter().sum();
    Ok(SoftCounts { tp, fp, n, total })
}

/// Gold label slices of a dataset, in order.
pub fn gold_labels(dataset: &[LabeledSequence]) -> Vec<&[usize]> {
    dataset.iter().map(LabeledSequence::labels).collect()
}

/// `(1 + beta^2) / K_present`: the scale factor of the F-score and the uniform weight.
pub fn q_factor(present_classes: usize, beta: f64) -> f64 {
    (1.0 + beta * beta) / present_classes as f64
}

/// Soft `F_beta` of one class: `(1 + b^2) tp / (tp + b^2 n + fp)`; 0 when the denominator is 0.
#[inline]
pub(crate) fn class_fscore(tp: f64, n: f64, fp: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = tp + b2 * n + fp;
    if denom > 0.0 {
        (1.0 + b2) * tp / denom
    } else {
        0.0
    }
}

/// Mean soft `F_beta` over classes present in the gold labels.
///
/// Equivalent to `(1+b^2)/K * sum_k TP_k / (TP_k + b^2 N_k + FP_k)`. Absent classes are
/// dropped from both the sum and `K`.
pub fn expected_overall_fscore(counts: &SoftCounts, beta: f64) -> Result<f64> {
    let present = counts.present_count();
    if present == 0 {
        return Err(Error::contract("expected F-score undefined: no class has gold support"));
    }
    let sum: f64 = counts
        .present_classes()
        .map(|k| class_fscore(counts.tp[k], counts.n[k] as f64, counts.fp[k], beta))
        .sum();
    Ok(sum / present as f64)
}

/// `dF/dTP_k ≈ q (b^2 N_k + FP_k) / (TP_k + b^2 N_k + FP_k)^2` per class, with the
/// cross-class terms dropped. Absent classes get 0.
pub fn fscore_partials(counts: &SoftCounts, beta: f64) -> Result<Vec<f64>> {
    let present = counts.present_count();
    if present == 0 {
        return Err(Error::contract("F-score partials undefined: no class has gold support"));
    }
    let q = q_factor(present, beta);
    let b2 = beta * beta;
    (0..counts.num_classes())
        .map(|k| {
            if counts.n[k] == 0 {
                return Ok(0.0);
            }
            let rest = b2 * counts.n[k] as f64 + counts.fp[k];
            let denom = counts.tp[k] + rest;
            if denom <= 0.0 {
                return Err(Error::contract(format!("zero F-score denominator for class {k}")));
            }
            Ok(q * rest / (denom * denom))
        })
        .collect()
}

/// Tracks how many accepted iterations have elapsed against `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    /// `None` means dynamic weights never activate.
    pub tau: Option<u64>,
    pub evaluation_count: u64,
    pub q: f64,
}

impl WeightSchedule {
    pub fn new(tau: Option<u64>, present_classes: usize, beta: f64) -> Self {
        Self {
            tau,
            evaluation_count: 0,
            q: q_factor(present_classes, beta),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self.tau, Some(tau) if self.evaluation_count >= tau)
    }
}

/// `q` before `tau` accepted iterations; afterwards `w_t = p(y_t = gold_t | x) * dF/dTP_{gold_t}`.
pub fn dynamic_weight_vector(
    marginals: &[PositionMarginals],
    gold: &[&[usize]],
    partials: &[f64],
    schedule: &WeightSchedule,
) -> Result<WeightVector> {
    if marginals.len() != gold.len() {
        return Err(Error::dim("marginals vs gold sequences", gold.len(), marginals.len()));
    }
    let mut out = Vec::with_capacity(gold.len());
    for (i, (m, labels)) in marginals.iter().zip(gold).enumerate() {
        if m.len() != labels.len() {
            return Err(Error::dim(format!("marginals of sequence {i}"), labels.len(), m.len()));
        }
        if !schedule.is_dynamic() {
            out.push(vec![schedule.q; labels.len()]);
            continue;
        }
        let mut w = Vec::with_capacity(labels.len());
        for (t, &g) in labels.iter().enumerate() {
            let partial = *partials
                .get(g)
                .ok_or_else(|| Error::contract(format!("no partial for class {g}")))?;
            w.push(m.get(t, g) * partial);
        }
        out.push(w);
    }
    WeightVector::new(out)
}

/// Inverse class-frequency weights normalized to mean 1: `w_t = total / (K * n_{gold_t})`.
pub fn fixed_weight_vector(dataset: &[LabeledSequence], num_classes: usize) -> Result<WeightVector> {
    let mut n = vec![0u64; num_classes];
    for seq in dataset {
        for &y in seq.labels() {
            if y >= num_classes {
                return Err(Error::contract(format!("label {y} out of range")));
            }
            n[y] += 1;
        }
    }
    if let Some(k) = n.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!(
            "class {k} absent from training data; inverse-frequency weight undefined"
        )));
    }
    let total: u64 = n.iter().sum();
    let per_class: Vec<f64> = n
        .iter()
        .map(|&c| total as f64 / (num_classes as f64 * c as f64))
        .collect();
    Ok(WeightVector::from_raw(
        dataset
            .iter()
            .map(|s| s.labels().iter().map(|&y| per_class[y]).collect())
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(tp: &[f64], fp: &[f64], n: &[u64]) -> SoftCounts {
        SoftCounts {
            tp: tp.to_vec(),
            fp: fp.to_vec(),
            n: n.to_vec(),
            total: n.iter().sum(),
        }
    }

    fn one_hot_marginals(labels: &[usize], k: usize) -> PositionMarginals {
        PositionMarginals::from_rows(
            labels
                .iter()
                .map(|&y| (0..k).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
                .collect(),
            0.0,
        )
    }

    #[test]
    fn perfect_marginals() {
        let gold = vec![0, 1, 1, 2, 0];
        let m = one_hot_marginals(&gold, 3);
        let c = soft_counts(&[m], &[&gold], 3).unwrap();
        assert_eq!(c.tp, vec![2.0, 2.0, 1.0]);
        assert_eq!(c.fp, vec![0.0; 3]);
        assert_eq!(c.n, vec![2, 2, 1]);
        assert_eq!(expected_overall_fscore(&c, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn uniform_marginals_k4() {
        let gold: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = PositionMarginals::from_rows(vec![vec![0.25; 4]; 40], 0.0);
        let c = soft_counts(&[m], &[&gold], 4).unwrap();
        for k in 0..4 {
            assert!((c.tp[k] - 2.5).abs() < 1e-12);
            assert!((c.fp[k] - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_counts_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 3;
        let gold: Vec<usize> = (0..20).map(|_| rng.gen_range(0..k)).collect();
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let c = soft_counts(&[PositionMarginals::from_rows(rows.clone(), 0.0)], &[&gold], k).unwrap();
        for class in 0..k {
            let tp: f64 = (0..20).filter(|&t| gold[t] == class).map(|t| rows[t][class]).sum();
            let fp: f64 = (0..20).filter(|&t| gold[t] != class).map(|t| rows[t][class]).sum();
            assert!((c.tp[class] - tp).abs() <= 1e-12);
            assert!((c.fp[class] - fp).abs() <= 1e-12);
        }
        let total: f64 = c.tp.iter().chain(&c.fp).sum();
        assert!((total - 20.0).abs() < 1e-6);
    }

    #[test]
    fn misaligned_counts_rejected() {
        let m = PositionMarginals::from_rows(vec![vec![0.5; 2]; 3], 0.0);
        let gold = vec![0usize, 1];
        assert!(soft_counts(&[m], &[&gold], 2).is_err());
    }

    #[test]
    fn expected_fscore_values() {
        let c = counts(&[0.0; 3], &[1.0; 3], &[3, 3, 3]);
        assert_eq!(expected_overall_fscore(&c, 1.0).unwrap(), 0.0);
        let c = counts(&[5.0; 4], &[2.0; 4], &[10; 4]);
        assert!((expected_overall_fscore(&c, 1.0).unwrap() - 10.0 / 17.0).abs() < 1e-15);
        let empty = counts(&[0.0; 2], &[0.0; 2], &[0, 0]);
        assert!(expected_overall_fscore(&empty, 1.0).is_err());
    }

    #[test]
    fn partial_values() {
        let c = counts(&[5.0; 4], &[2.0; 4], &[10; 4]);
        let p = fscore_partials(&c, 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 6.0 / 289.0).abs() < 1e-15));
        let c = counts(&[10.0; 4], &[0.0; 4], &[10; 4]);
        let p = fscore_partials(&c, 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.0125).abs() < 1e-15));
    }

    #[test]
    fn partial_vanishes_at_saturation() {
        let mut last = f64::INFINITY;
        for tp in [1e2, 1e4, 1e6, 1e8] {
            let c = counts(&[tp, 1.0], &[2.0, 1.0], &[10, 10]);
            let p = fscore_partials(&c, 1.0).unwrap()[0];
            assert!(p < last);
            last = p;
        }
        assert!(last < 1e-14);
    }

    #[test]
    fn partial_scales_inversely_with_class_size() {
        let c1 = counts(&[3.0, 5.0], &[1.5, 2.0], &[6, 10]);
        let c2 = counts(&[9.0, 5.0], &[4.5, 2.0], &[18, 10]);
        let p1 = fscore_partials(&c1, 1.0).unwrap()[0];
        let p2 = fscore_partials(&c2, 1.0).unwrap()[0];
        assert!((p1 / p2 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_q() {
        let c = counts(&[2.0, 0.0, 1.0], &[0.0, 0.5, 0.0], &[2, 0, 1]);
        assert_eq!(expected_overall_fscore(&c, 1.0).unwrap(), 1.0 - 0.0);
        let p = fscore_partials(&c, 1.0).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 1.0 * 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn dynamic_weights_pre_and_post_tau() {
        let gold = vec![0usize, 1];
        let m = PositionMarginals::from_rows(vec![vec![0.8, 0.1, 0.1, 0.0], vec![0.0, 0.0, 0.5, 0.5]], 0.0);
        let mut s = WeightSchedule::new(Some(5), 4, 1.0);
        let partials = vec![0.020761, 0.1, 0.1, 0.1];
        let w = dynamic_weight_vector(std::slice::from_ref(&m), &[&gold], &partials, &s).unwrap();
        assert_eq!(w.sequences(), &[vec![0.5, 0.5]]);
        s.evaluation_count = 5;
        let w = dynamic_weight_vector(&[m], &[&gold], &partials, &s).unwrap();
        assert!((w.sequences()[0][0] - 0.0166088).abs() < 1e-12);
        assert_eq!(w.sequences()[0][1], 0.0);
    }

    #[test]
    fn infinite_tau_is_never_dynamic() {
        let mut s = WeightSchedule::new(None, 4, 1.0);
        s.evaluation_count = u64::MAX;
        assert!(!s.is_dynamic());
    }

    #[test]
    fn fixed_weights() {
        let mk = |labels: Vec<usize>| {
            LabeledSequence::from_rows("s", vec![vec![0.0]; labels.len()], labels, 2).unwrap()
        };
        let balanced = vec![mk(vec![0, 1, 1, 0])];
        let w = fixed_weight_vector(&balanced, 2).unwrap();
        assert_eq!(w.sequences()[0], vec![1.0; 4]);

        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let skewed = vec![mk(labels)];
        let w = fixed_weight_vector(&skewed, 2).unwrap();
        assert!((w.sequences()[0][0] - 100.0 / 180.0).abs() < 1e-15);
        assert!((w.sequences()[0][99] - 5.0).abs() < 1e-15);
        let (mean, _, _) = w.summary();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((w.sequences()[0][99] / w.sequences()[0][0] - 9.0).abs() < 1e-12);

        let missing = vec![mk(vec![0, 0])];
        let err = fixed_weight_vector(&missing, 2).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }
}
