//! Hard-count evaluation, the two-sample t-test, and cross-validation.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{LabelAlphabet, LabeledSequence, TrainingConfig};
use crate::trainer::{grid_search, Decoder, Fold, TrainedModel};
use crate::weights::class_fscore;

/// Counts indexed `[gold][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if let Some(i) = counts.iter().position(|r| r.len() != k) {
            return Err(Error::dim(format!("confusion row {i}"), k, counts[i].len()));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&g| g != k).map(|g| self.counts[g][k]).sum()
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        self.support(k) - self.true_positives(k)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::dim("confusion merge", self.num_classes(), other.num_classes()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

pub fn confusion(pred: &[usize], gold: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gold.len() {
        return Err(Error::dim("predictions vs gold labels", gold.len(), pred.len()));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::contract(format!("label outside [0, {num_classes}): pred {p}, gold {g}")));
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub support: u64,
}

/// Per-class precision/recall/F and the macro F over supported classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f: f64,
    /// Classes left out of the macro average for lack of gold support.
    pub excluded_classes: Vec<String>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rates from a confusion matrix; any `0/0` is 0. Specificity is deliberately absent.
pub fn precision_recall_f(cm: &ConfusionMatrix) -> EvalReport {
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut supported = 0usize;
    let mut excluded = Vec::new();
    for c in 0..k {
        let tp = cm.true_positives(c);
        let fp = cm.false_positives(c);
        let support = cm.support(c);
        // 2 TP / (TP + N + FP): the harmonic mean of precision and recall, 0 when TP = 0
        let fscore = class_fscore(tp as f64, support as f64, fp as f64, 1.0);
        per_class.push(ClassMetrics {
            class: c.to_string(),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, support),
            fscore,
            support,
        });
        if support > 0 {
            sum += fscore;
            supported += 1;
        } else {
            excluded.push(c.to_string());
        }
    }
    if !excluded.is_empty() {
        warn!("classes without test support excluded from macro F: {excluded:?}");
    }
    EvalReport {
        per_class,
        macro_f: if supported == 0 { 0.0 } else { sum / supported as f64 },
        excluded_classes: excluded,
        confusion: cm.clone(),
    }
}

impl EvalReport {
    /// Replaces numeric class labels with alphabet names.
    pub fn with_names(mut self, alphabet: &LabelAlphabet) -> Self {
        let rename = |s: &mut String| {
            if let Some(name) = s.parse::<usize>().ok().and_then(|i| alphabet.name(i)) {
                *s = name.to_owned();
            }
        };
        self.per_class.iter_mut().for_each(|c| rename(&mut c.class));
        self.excluded_classes.iter_mut().for_each(rename);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// One row per class: `class,precision,recall,fscore,support`, then a `macro` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,fscore,support\n");
        for c in &self.per_class {
            let _ = writeln!(out, "{},{},{},{},{}", c.class, c.precision, c.recall, c.fscore, c.support);
        }
        let _ = writeln!(out, "macro,,,{},{}", self.macro_f, self.confusion.total());
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>9} {:>9} {:>9} {:>9}\n", "class", "precision", "recall", "f-score", "support");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                c.class, c.precision, c.recall, c.fscore, c.support
            );
        }
        let _ = writeln!(out, "{:<16} {:>9} {:>9} {:>9.4} {:>9}", "macro", "", "", self.macro_f, self.confusion.total());
        out
    }
}

/// Student's two-sample t statistic with pooled variance and its two-tailed p-value.
pub fn independent_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (ma, mb) = (mean(a), mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (ss(a, ma) + ss(b, mb)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::contract(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p.clamp(0.0, 1.0)))
}

/// Cross-validation layouts over whole sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvScheme {
    /// 10 folds; each rotation trains on 6, validates on 2, tests on 2.
    TenFold622,
    /// 4 folds; each rotation trains on 2, validates on 1, tests on 1.
    FourFold211,
}

impl CvScheme {
    pub fn num_folds(self) -> usize {
        match self {
            CvScheme::TenFold622 => 10,
            CvScheme::FourFold211 => 4,
        }
    }

    /// (test, validation, train) fold ids of rotation `r`.
    pub fn rotation(self, r: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let f = self.num_folds();
        let (n_test, n_val) = match self {
            CvScheme::TenFold622 => (2, 2),
            CvScheme::FourFold211 => (1, 1),
        };
        let ids: Vec<usize> = (0..f).map(|i| (r + i) % f).collect();
        (
            ids[..n_test].to_vec(),
            ids[n_test..n_test + n_val].to_vec(),
            ids[n_test + n_val..].to_vec(),
        )
    }
}

impl std::str::FromStr for CvScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "10fold622" | "kfold10_622" => Ok(CvScheme::TenFold622),
            "4fold211" | "kfold4_211" => Ok(CvScheme::FourFold211),
            other => Err(Error::Config(format!("unknown scheme {other:?} (expected 10fold622 or 4fold211)"))),
        }
    }
}

/// Shuffled round-robin fold id for each sequence.
pub fn assign_folds(num_sequences: usize, scheme: CvScheme, seed: u64) -> Result<Vec<usize>> {
    let f = scheme.num_folds();
    if num_sequences < f {
        return Err(Error::contract(format!(
            "{num_sequences} sequences is too few for {f}-fold cross-validation (minimum {f})"
        )));
    }
    let mut order: Vec<usize> = (0..num_sequences).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; num_sequences];
    for (pos, &seq) in order.iter().enumerate() {
        fold[seq] = pos % f;
    }
    Ok(fold)
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub rotation: usize,
    pub test_indices: Vec<usize>,
    pub best_config: TrainingConfig,
    pub report: EvalReport,
    pub iterations_used: usize,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub fold_of_sequence: Vec<usize>,
    pub folds: Vec<FoldReport>,
    pub mean_macro_f: f64,
    pub std_macro_f: f64,
}

impl CvReport {
    pub fn macro_f_values(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.report.macro_f).collect()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rotates over the folds of `scheme`: picks the grid entry with the best validation macro F,
/// then reports that model on the test folds.
pub fn cross_validate(
    dataset: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    scheme: CvScheme,
    grid: &[TrainingConfig],
    seed: u64,
    decoder: Decoder,
) -> Result<CvReport> {
    let fold_of_sequence = assign_folds(dataset.len(), scheme, seed)?;
    info!("fold assignment (sequence -> fold): {fold_of_sequence:?}");
    let members = |ids: &[usize]| -> Vec<usize> {
        (0..dataset.len()).filter(|i| ids.contains(&fold_of_sequence[*i])).collect()
    };
    let mut folds = Vec::with_capacity(scheme.num_folds());
    for r in 0..scheme.num_folds() {
        let (test_ids, val_ids, train_ids) = scheme.rotation(r);
        let split = Fold {
            train: members(&train_ids),
            validation: members(&val_ids),
        };
        let test_indices = members(&test_ids);
        let search = grid_search(dataset, alphabet, std::slice::from_ref(&split), grid)?;
        let model: &TrainedModel = &search.best_models[0];
        let report = evaluate_model(model, test_indices.iter().map(|&i| &dataset[i]), decoder)?;
        info!("rotation {r}: test macro F {:.4}", report.macro_f);
        folds.push(FoldReport {
            rotation: r,
            test_indices,
            best_config: search.best,
            report: report.with_names(alphabet),
            iterations_used: model.iterations_used,
        });
    }
    let (mean_macro_f, std_macro_f) = mean_std(&folds.iter().map(|f| f.report.macro_f).collect::<Vec<_>>());
    Ok(CvReport {
        fold_of_sequence,
        folds,
        mean_macro_f,
        std_macro_f,
    })
}

/// Pools predictions over sequences into one report.
pub fn evaluate_model<'a>(
    model: &TrainedModel,
    sequences: impl IntoIterator<Item = &'a LabeledSequence>,
    decoder: Decoder,
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::zeros(model.alphabet.len());
    for s in sequences {
        let pred = model.predict(s, decoder)?;
        cm.merge(&confusion(&pred, s.labels(), model.alphabet.len())?)?;
    }
    Ok(precision_recall_f(&cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_when_perfect() {
        let gold = vec![0, 1, 2, 2, 1];
        let cm = confusion(&gold, &gold, 3).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        assert_eq!(precision_recall_f(&cm).macro_f, 1.0);
    }

    #[test]
    fn hand_countable_case() {
        let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1], vec![0, 2]]);
        assert_eq!(cm.support(0), 2);
        assert_eq!(cm.support(1), 2);
        let r = precision_recall_f(&cm);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert!((r.per_class[0].fscore - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[1].fscore - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_division_convention() {
        let cm = ConfusionMatrix::from_counts(vec![vec![0, 5], vec![0, 3]]).unwrap();
        let r = precision_recall_f(&cm);
        assert_eq!((r.per_class[0].precision, r.per_class[0].recall, r.per_class[0].fscore), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unsupported_class_excluded() {
        let cm = confusion(&[0, 0, 2], &[0, 0, 0], 3).unwrap();
        let r = precision_recall_f(&cm);
        assert_eq!(r.excluded_classes, vec!["1".to_string(), "2".to_string()]);
        assert!((r.macro_f - r.per_class[0].fscore).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn t_test_cases() {
        let (t, p) = independent_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        let (t, p) = independent_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((t + 1.0).abs() < 1e-12);
        assert!((p - 0.3466).abs() < 1e-3, "{p}");
        let a = [0.0, 1e-9, 0.0, -1e-9];
        let b = [1.0, 1.0 + 1e-9, 1.0, 1.0 - 1e-9];
        assert!(independent_t_test(&a, &b).unwrap().1 < 1e-6);
        assert!(independent_t_test(&[1.0], &[1.0, 2.0]).is_err());
        let (t, p) = independent_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!((t, p), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn t_test_symmetry() {
        let a = [0.3, 0.5, 0.45, 0.61];
        let b = [0.2, 0.41, 0.33];
        let (t1, p1) = independent_t_test(&a, &b).unwrap();
        let (t2, p2) = independent_t_test(&b, &a).unwrap();
        assert_eq!(t1, -t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn ten_fold_rotation_tests_each_sequence_twice() {
        let folds = assign_folds(10, CvScheme::TenFold622, 3).unwrap();
        let mut tested = vec![0; 10];
        for r in 0..10 {
            let (test, val, train) = CvScheme::TenFold622.rotation(r);
            assert_eq!((test.len(), val.len(), train.len()), (2, 2, 6));
            for (i, f) in folds.iter().enumerate() {
                if test.contains(f) {
                    tested[i] += 1;
                }
            }
        }
        assert_eq!(tested, vec![2; 10]);
    }

    #[test]
    fn fold_assignment_deterministic_and_guarded() {
        assert_eq!(
            assign_folds(23, CvScheme::FourFold211, 9).unwrap(),
            assign_folds(23, CvScheme::FourFold211, 9).unwrap()
        );
        let err = assign_folds(3, CvScheme::FourFold211, 0).unwrap_err();
        assert!(err.to_string().contains("minimum 4"));
        let (test, val, train) = CvScheme::FourFold211.rotation(3);
        assert_eq!((test, val, train), (vec![3], vec![0], vec![1, 2]));
    }

    #[test]
    fn csv_and_json_agree() {
        let cm = confusion(&[0, 1, 1, 2, 2, 0], &[0, 1, 2, 2, 1, 0], 3).unwrap();
        let r = precision_recall_f(&cm);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let csv = r.to_csv();
        for (row, jc) in csv.lines().skip(1).zip(json["per_class"].as_array().unwrap()) {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[0], jc["class"].as_str().unwrap());
            assert_eq!(cols[1].parse::<f64>().unwrap(), jc["precision"].as_f64().unwrap());
            assert_eq!(cols[2].parse::<f64>().unwrap(), jc["recall"].as_f64().unwrap());
            assert_eq!(cols[3].parse::<f64>().unwrap(), jc["fscore"].as_f64().unwrap());
            assert_eq!(cols[4].parse::<u64>().unwrap(), jc["support"].as_u64().unwrap());
        }
    }

    #[test]
    fn mean_std_of_constant_is_zero() {
        let (m, sd) = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!((m, sd), (0.5, 0.0));
        let (m, sd) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, sd), (2.0, 1.0));
    }
}
