//! Full-batch quasi-Newton training for plain CRF, fWCRF and dWCRF, plus grid search.

use std::io::Write;

use log::{debug, info, warn};
use serde_json::json;

use crate::error::{Error, Result};
use crate::inference::{compute_potentials, forward_backward, stream_decode, viterbi};
use crate::metrics::{confusion, precision_recall_f};
use crate::model::{
    CrfParameters, LabelAlphabet, LabeledSequence, Method, ModelBundle, Standardizer,
    TrainingConfig, TAU_GRID, THETA_GRID,
};
use crate::objective::{evaluate, Evaluation, WeightVector};
use crate::optim::{dot, strong_wolfe, LbfgsMemory, Probe};
use crate::weights::{
    dynamic_weight_vector, expected_overall_fscore, fixed_weight_vector, fscore_partials,
    gold_labels, soft_counts, WeightSchedule,
};

/// Consecutive small relative changes required to declare convergence.
const STALL_ITERATIONS: usize = 3;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Weighted objective (penalty included) at the accepted point, under the weights in force
    /// for that step.
    pub objective: f64,
    pub penalty: f64,
    /// Expected overall F-score of the training data at the accepted point.
    pub train_macro_f: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    /// Whether the weights used for this step were dynamic.
    pub dynamic: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<IterationRecord>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str =
        "iteration,objective,penalty,train_macro_f,grad_norm,step,weight_mean,weight_min,weight_max";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.iteration,
                r.objective,
                r.penalty,
                r.train_macro_f,
                r.grad_norm,
                r.step,
                r.weight_mean,
                r.weight_min,
                r.weight_max
            )?;
        }
        Ok(())
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

/// Output of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: CrfParameters,
    pub alphabet: LabelAlphabet,
    pub standardizer: Option<Standardizer>,
    pub trace: TrainingTrace,
    pub config: TrainingConfig,
    pub converged: bool,
    pub iterations_used: usize,
    /// Parameters after every accepted iteration (index 0 is the starting point), kept only
    /// when requested through [`train_recording`].
    pub path: Vec<Vec<f64>>,
}

/// How labels are read off a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoder {
    /// Argmax of the forward-backward marginals.
    #[default]
    Marginal,
    /// Highest-scoring joint labeling.
    Viterbi,
    /// Argmax of the forward-only streaming message.
    Stream,
}

/// Labels of an already-standardized observation sequence.
pub fn decode<X: AsRef<[f64]>>(params: &CrfParameters, observations: &[X], decoder: Decoder) -> Result<Vec<usize>> {
    match decoder {
        Decoder::Marginal => {
            let pot = compute_potentials(observations, params)?;
            Ok(forward_backward(&pot)?.0.argmax_labels())
        }
        Decoder::Viterbi => viterbi(&compute_potentials(observations, params)?),
        Decoder::Stream => Ok(stream_decode(observations, params)?.0),
    }
}

fn standardized_rows(standardizer: Option<&Standardizer>, seq: &LabeledSequence) -> Result<Vec<Vec<f64>>> {
    match standardizer {
        Some(s) => {
            if s.dim() != seq.dim() {
                return Err(Error::dim("model features vs sequence", s.dim(), seq.dim()));
            }
            Ok(seq.observations().iter().map(|x| s.transform(x.values())).collect())
        }
        None => Ok(seq.observations().iter().map(|x| x.values().to_vec()).collect()),
    }
}

impl TrainedModel {
    pub fn predict(&self, seq: &LabeledSequence, decoder: Decoder) -> Result<Vec<usize>> {
        decode(&self.params, &standardized_rows(self.standardizer.as_ref(), seq)?, decoder)
    }

    pub fn to_bundle(&self, feature_names: Vec<String>) -> ModelBundle {
        ModelBundle {
            params: self.params.clone(),
            alphabet: self.alphabet.clone(),
            feature_names,
            config: self.config.clone(),
            provenance: json!({
                "bias_feature": true,
                "converged": self.converged,
                "iterations_used": self.iterations_used,
                "generator": concat!("dwcrf ", env!("CARGO_PKG_VERSION")),
            }),
            standardizer: self.standardizer.clone(),
        }
    }
}

impl ModelBundle {
    pub fn predict(&self, seq: &LabeledSequence, decoder: Decoder) -> Result<Vec<usize>> {
        decode(&self.params, &standardized_rows(self.standardizer.as_ref(), seq)?, decoder)
    }
}

fn check_dataset(dataset: &[LabeledSequence], alphabet: &LabelAlphabet) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::contract("training set is empty"))?;
    let d = first.dim();
    for (i, s) in dataset.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::dim(format!("features of sequence {i}"), d, s.dim()));
        }
        if let Some(t) = s.labels().iter().position(|&y| y >= alphabet.len()) {
            return Err(Error::contract(format!(
                "sequence {i} position {t}: label outside the alphabet"
            )));
        }
    }
    Ok(d)
}

/// Trains from `lambda = 0` by limited-memory quasi-Newton ascent on the weighted objective.
pub fn train(dataset: &[LabeledSequence], alphabet: &LabelAlphabet, config: &TrainingConfig) -> Result<TrainedModel> {
    run(dataset, alphabet, config, false)
}

/// Like [`train`], additionally keeping the parameter vector after every iteration.
pub fn train_recording(
    dataset: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    config: &TrainingConfig,
) -> Result<TrainedModel> {
    run(dataset, alphabet, config, true)
}

fn run(
    dataset: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    config: &TrainingConfig,
    record_path: bool,
) -> Result<TrainedModel> {
    config.validate()?;
    let d = check_dataset(dataset, alphabet)?;
    let k = alphabet.len();

    let standardizer = if config.standardize {
        Some(Standardizer::fit(dataset)?)
    } else {
        None
    };
    let owned;
    let data: &[LabeledSequence] = match &standardizer {
        Some(s) => {
            owned = dataset.iter().map(|seq| s.apply(seq)).collect::<Result<Vec<_>>>()?;
            &owned
        }
        None => dataset,
    };

    let gold = gold_labels(data);
    let mut class_counts = vec![0u64; k];
    for &y in gold.iter().flat_map(|g| g.iter()) {
        class_counts[y] += 1;
    }
    let present = class_counts.iter().filter(|&&n| n > 0).count();
    if present < k {
        let missing: Vec<&str> = (0..k)
            .filter(|&c| class_counts[c] == 0)
            .filter_map(|c| alphabet.name(c))
            .collect();
        warn!("classes absent from training data, excluded from F-score and q: {missing:?}");
    }

    let mut schedule = WeightSchedule::new(config.tau, present, config.beta);
    let mut weights = match config.method {
        Method::PlainCrf | Method::Dwcrf => WeightVector::uniform(data, schedule.q),
        Method::Fwcrf => fixed_weight_vector(data, k)?,
    };
    if config.method == Method::PlainCrf && config.tau.is_some() {
        debug!("tau is ignored for plain CRF training");
    }

    let n_params = CrfParameters::param_count(k, d);
    let mut x = vec![0.0; n_params];
    let mut path = Vec::new();
    if record_path {
        path.push(x.clone());
    }
    let params_of = |x: &[f64]| CrfParameters::from_flat(k, d, x);

    let mut current = evaluate(data, &params_of(&x)?, &weights, config.theta)?;
    if !current.value.total.is_finite() {
        return Err(Error::contract("objective is not finite at the starting point"));
    }

    let fbar = |ev: &Evaluation| -> Result<f64> {
        let counts = soft_counts(&ev.marginals, &gold, k)?;
        expected_overall_fscore(&counts, config.beta)
    };
    let mut trace = TrainingTrace::default();
    let summary = weights.summary();
    trace.records.push(IterationRecord {
        iteration: 0,
        objective: current.value.total,
        penalty: current.value.l2_penalty,
        train_macro_f: fbar(&current)?,
        grad_norm: max_abs(&current.value.gradient),
        step: 0.0,
        weight_mean: summary.0,
        weight_min: summary.1,
        weight_max: summary.2,
        dynamic: false,
    });

    let mut memory = LbfgsMemory::new(config.history_size);
    let mut converged = false;
    let mut iterations_used = 0usize;
    let mut stall = 0usize;
    let mut last_step: Option<(f64, f64)> = None;

    while iterations_used < config.max_iterations {
        if max_abs(&current.value.gradient) < config.convergence_tol {
            converged = true;
            break;
        }
        // minimize the negated objective
        let neg_grad: Vec<f64> = current.value.gradient.iter().map(|g| -g).collect();
        let f0 = -current.value.total;

        let mut attempt = None;
        for retry in 0..2 {
            if retry == 1 {
                if memory.is_empty() {
                    break;
                }
                debug!("line search failed, restarting from steepest ascent");
                memory.clear();
            }
            let dir = memory.direction(&neg_grad);
            let slope = dot(&neg_grad, &dir);
            let initial = if !memory.is_empty() {
                1.0
            } else {
                // carry the previous step's first-order change over to the new direction
                match last_step {
                    Some((step, prev_slope)) if retry == 0 && (step * prev_slope / slope).is_finite() => {
                        step * prev_slope / slope
                    }
                    _ => (1.0 / dot(&neg_grad, &neg_grad).sqrt()).min(1.0),
                }
            };
            let outcome = strong_wolfe(
                |point: &[f64]| {
                    let ev = evaluate(data, &params_of(point)?, &weights, config.theta)?;
                    Ok(Probe {
                        value: -ev.value.total,
                        gradient: ev.value.gradient.iter().map(|g| -g).collect(),
                        extra: ev,
                    })
                },
                &x,
                f0,
                &neg_grad,
                &dir,
                initial,
            )?;
            if let Ok(out) = outcome {
                attempt = Some((out, slope));
                break;
            }
        }
        let Some((out, slope)) = attempt else {
            warn!("line search failed at iteration {iterations_used}; keeping best parameters");
            break;
        };
        last_step = Some((out.step, slope));

        let s: Vec<f64> = out.point.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = out
            .probe
            .gradient
            .iter()
            .zip(&neg_grad)
            .map(|(a, b)| a - b)
            .collect();
        memory.push(s, y);

        let previous = current.value.total;
        x = out.point;
        current = out.probe.extra;
        iterations_used += 1;
        if record_path {
            path.push(x.clone());
        }

        let accepted_value = current.value.total;
        let accepted_penalty = current.value.l2_penalty;
        let step_weights = weights.summary();
        let step_dynamic = schedule.is_dynamic();
        let train_f = fbar(&current)?;

        // dynamic weights refresh once per accepted iteration
        schedule.evaluation_count = iterations_used as u64;
        if config.method == Method::Dwcrf && schedule.is_dynamic() {
            let counts = soft_counts(&current.marginals, &gold, k)?;
            let partials = fscore_partials(&counts, config.beta)?;
            weights = dynamic_weight_vector(&current.marginals, &gold, &partials, &schedule)?;
            memory.clear();
            current = evaluate(data, &params_of(&x)?, &weights, config.theta)?;
        }

        trace.records.push(IterationRecord {
            iteration: iterations_used,
            objective: accepted_value,
            penalty: accepted_penalty,
            train_macro_f: train_f,
            grad_norm: max_abs(&current.value.gradient),
            step: out.step,
            weight_mean: step_weights.0,
            weight_min: step_weights.1,
            weight_max: step_weights.2,
            dynamic: step_dynamic,
        });

        let scale = previous.abs().max(accepted_value.abs()).max(1e-300);
        if (accepted_value - previous).abs() / scale < config.convergence_tol {
            stall += 1;
            if stall >= STALL_ITERATIONS {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
    }

    info!(
        "{} training finished: {} iterations, converged={}, objective={:.6e}",
        config.method,
        iterations_used,
        converged,
        trace.records.last().map_or(f64::NAN, |r| r.objective)
    );
    Ok(TrainedModel {
        params: params_of(&x)?,
        alphabet: alphabet.clone(),
        standardizer,
        trace,
        config: config.clone(),
        converged,
        iterations_used,
        path,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Train/validation split over sequence indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Validation scores of one grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub config: TrainingConfig,
    pub fold_macro_f: Vec<f64>,
    pub mean_macro_f: f64,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_index: usize,
    pub best: TrainingConfig,
    pub table: Vec<GridEntry>,
    /// Model of the winning config trained on each fold's training part.
    pub best_models: Vec<TrainedModel>,
}

fn subset(dataset: &[LabeledSequence], idx: &[usize]) -> Vec<LabeledSequence> {
    idx.iter().map(|&i| dataset[i].clone()).collect()
}

/// Macro F of a model over sequences, using `decoder`.
pub fn macro_f_on(model: &TrainedModel, sequences: &[LabeledSequence], decoder: Decoder) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for s in sequences {
        pred.extend(model.predict(s, decoder)?);
        gold.extend_from_slice(s.labels());
    }
    let cm = confusion(&pred, &gold, model.alphabet.len())?;
    Ok(precision_recall_f(&cm).macro_f)
}

/// Picks the config with the highest mean validation macro F; ties go to the earliest entry.
pub fn grid_search(
    dataset: &[LabeledSequence],
    alphabet: &LabelAlphabet,
    folds: &[Fold],
    grid: &[TrainingConfig],
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::contract("grid search needs at least one configuration"));
    }
    if folds.is_empty() {
        return Err(Error::contract("grid search needs at least one fold"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best_index = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_models = Vec::new();
    for (gi, config) in grid.iter().enumerate() {
        let mut fold_macro_f = Vec::with_capacity(folds.len());
        let mut iterations = Vec::with_capacity(folds.len());
        let mut models = Vec::with_capacity(folds.len());
        for fold in folds {
            let train_set = subset(dataset, &fold.train);
            let val_set = subset(dataset, &fold.validation);
            let model = train(&train_set, alphabet, config)?;
            fold_macro_f.push(macro_f_on(&model, &val_set, Decoder::Marginal)?);
            iterations.push(model.iterations_used);
            models.push(model);
        }
        let mean_macro_f = fold_macro_f.iter().sum::<f64>() / fold_macro_f.len() as f64;
        debug!("grid entry {gi}: theta={} tau={:?} mean macro F {mean_macro_f:.4}", config.theta, config.tau);
        if gi == 0 || mean_macro_f > best_score {
            best_index = gi;
            best_score = mean_macro_f;
            best_models = models;
        }
        table.push(GridEntry {
            config: config.clone(),
            fold_macro_f,
            mean_macro_f,
            iterations,
        });
    }
    Ok(GridResult {
        best_index,
        best: grid[best_index].clone(),
        table,
        best_models,
    })
}

/// Default grid for `method`: every theta in [`THETA_GRID`], and for dWCRF every tau in
/// [`TAU_GRID`] not exceeding `plain_iterations` (the smallest tau is always kept).
pub fn default_grid(base: &TrainingConfig, method: Method, plain_iterations: Option<usize>) -> Vec<TrainingConfig> {
    let taus: Vec<Option<u64>> = if method == Method::Dwcrf {
        let limit = plain_iterations.map_or(u64::MAX, |n| n as u64);
        let mut t: Vec<Option<u64>> = TAU_GRID.iter().filter(|&&t| t <= limit).map(|&t| Some(t)).collect();
        if t.is_empty() {
            t.push(Some(TAU_GRID[0]));
        }
        t
    } else {
        vec![base.tau]
    };
    let mut grid = Vec::new();
    for &theta in &THETA_GRID {
        for &tau in &taus {
            grid.push(TrainingConfig {
                method,
                theta,
                tau,
                ..base.clone()
            });
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Vec<LabeledSequence>, LabelAlphabet) {
        let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 1.1]];
        let seq = LabeledSequence::from_rows("s", rows, vec![0, 0, 1, 1], 2).unwrap();
        (vec![seq], LabelAlphabet::numbered(2).unwrap())
    }

    #[test]
    fn separable_instance_is_learned() {
        let (data, alphabet) = separable();
        let config = TrainingConfig {
            theta: 1e-4,
            max_iterations: 100,
            ..TrainingConfig::default()
        };
        let model = train(&data, &alphabet, &config).unwrap();
        assert!(model.iterations_used <= 100);
        let last = model.trace.records.last().unwrap();
        assert!(last.train_macro_f >= 0.99, "{}", last.train_macro_f);
        assert_eq!(model.predict(&data[0], Decoder::Marginal).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(model.predict(&data[0], Decoder::Viterbi).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn zero_budget_returns_zero_params() {
        let (data, alphabet) = separable();
        let config = TrainingConfig {
            max_iterations: 0,
            ..TrainingConfig::default()
        };
        let model = train(&data, &alphabet, &config).unwrap();
        assert!(!model.converged);
        assert_eq!(model.iterations_used, 0);
        assert!(model.params.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trace_indices_increase_from_zero() {
        let (data, alphabet) = separable();
        let model = train(&data, &alphabet, &TrainingConfig::with_method(Method::Dwcrf)).unwrap();
        for (i, r) in model.trace.records.iter().enumerate() {
            assert_eq!(r.iteration, i);
        }
        let mut csv = Vec::new();
        model.trace.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(TrainingTrace::CSV_HEADER));
        assert_eq!(text.lines().count(), model.trace.records.len() + 1);
    }

    #[test]
    fn empty_training_set_rejected() {
        let alphabet = LabelAlphabet::numbered(2).unwrap();
        assert!(train(&[], &alphabet, &TrainingConfig::default()).is_err());
    }

    #[test]
    fn fwcrf_requires_every_class() {
        let seq = LabeledSequence::from_rows("s", vec![vec![0.0]; 3], vec![0, 0, 0], 2).unwrap();
        let alphabet = LabelAlphabet::numbered(2).unwrap();
        assert!(train(&[seq], &alphabet, &TrainingConfig::with_method(Method::Fwcrf)).is_err());
    }

    #[test]
    fn singleton_grid() {
        let (data, alphabet) = separable();
        let folds = vec![Fold { train: vec![0], validation: vec![0] }];
        let grid = vec![TrainingConfig { theta: 1e-3, ..TrainingConfig::default() }];
        let r = grid_search(&data, &alphabet, &folds, &grid).unwrap();
        assert_eq!(r.best, grid[0]);
        assert!(grid_search(&data, &alphabet, &folds, &[]).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let base = TrainingConfig::default();
        let g = default_grid(&base, Method::PlainCrf, None);
        assert_eq!(g.iter().map(|c| c.theta).collect::<Vec<_>>(), THETA_GRID.to_vec());
        let g = default_grid(&base, Method::Dwcrf, Some(12));
        assert_eq!(g.len(), 4 * 3);
        let g = default_grid(&base, Method::Dwcrf, Some(0));
        assert!(g.iter().all(|c| c.tau == Some(1)));
    }
}
