//! Weighted per-position log-marginal objective and its gradient.
//!
//! The objective is `sum_t w_t log p(y_t = gold_t | x) - theta ||lambda||^2`, where
//! `p(y_t | x)` is the chain marginal from forward-backward. Its gradient with respect to
//! the parameters is `sum_t w_t (E[F | y_t = gold_t] - E[F]) - 2 theta lambda`.
//!
//! [`weighted_objective`] evaluates that gradient in `O(T K^2)` per sequence by carrying,
//! along with the forward and backward messages, the conditional expectation of the
//! weighted gold-indicator sum `h(y) = sum_s c_s [y_s = gold_s]` with
//! `c_s = w_s / p(y_s = gold_s | x)`. [`weighted_objective_clamped`] computes the same
//! quantity the direct way, one clamped forward-backward per position.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{
    chain_pass, clamped_expectation, compute_potentials, log_sum_exp, ChainPass, PositionMarginals,
    PotentialTables,
};
use crate::model::{CrfParameters, LabeledSequence};

/// Marginals below this are floored before taking the log.
pub const MARGINAL_FLOOR: f64 = 1e-300;

/// One nonnegative weight per training position, aligned with the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<Vec<f64>>,
}

impl WeightVector {
    pub fn new(weights: Vec<Vec<f64>>) -> Result<Self> {
        for (i, seq) in weights.iter().enumerate() {
            if let Some(t) = seq.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invariant(
                    format!("weights[{i}][{t}]"),
                    format!("weight must be finite and >= 0, got {}", seq[t]),
                ));
            }
        }
        Ok(Self { weights })
    }

    /// Same weight at every position.
    pub fn uniform(dataset: &[LabeledSequence], value: f64) -> Self {
        Self {
            weights: dataset.iter().map(|s| vec![value; s.len()]).collect(),
        }
    }

    pub(crate) fn from_raw(weights: Vec<Vec<f64>>) -> Self {
        Self { weights }
    }

    pub fn sequences(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|s| s.iter().map(|w| w * c).collect())
                .collect(),
        }
    }

    /// (mean, min, max) over all positions.
    pub fn summary(&self) -> (f64, f64, f64) {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &w in self.weights.iter().flatten() {
            n += 1;
            sum += w;
            min = min.min(w);
            max = max.max(w);
        }
        if n == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (sum / n as f64, min, max)
        }
    }

    pub fn check_aligned(&self, dataset: &[LabeledSequence]) -> Result<()> {
        if self.weights.len() != dataset.len() {
            return Err(Error::dim("weight vector sequences", dataset.len(), self.weights.len()));
        }
        for (i, (w, s)) in self.weights.iter().zip(dataset).enumerate() {
            if w.len() != s.len() {
                return Err(Error::dim(format!("weights of sequence {i}"), s.len(), w.len()));
            }
        }
        Ok(())
    }
}

/// Objective value and gradient at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub weighted_loglik: f64,
    pub l2_penalty: f64,
    pub total: f64,
    /// Gradient of `total`, flattened like [`CrfParameters::to_flat`].
    pub gradient: Vec<f64>,
}

impl ObjectiveValue {
    /// Gradient of the weighted log-likelihood alone (penalty term removed).
    pub fn data_gradient(&self, params: &CrfParameters, theta: f64) -> Vec<f64> {
        self.gradient
            .iter()
            .zip(params.to_flat())
            .map(|(g, p)| g + 2.0 * theta * p)
            .collect()
    }
}

/// Objective, gradient, and the marginals they were computed from.
pub(crate) struct Evaluation {
    pub value: ObjectiveValue,
    pub marginals: Vec<PositionMarginals>,
}

struct SequenceTerm {
    loglik: f64,
    gradient: Vec<f64>,
    marginals: PositionMarginals,
}

fn check_inputs(
    dataset: &[LabeledSequence],
    params: &CrfParameters,
    weights: &WeightVector,
    theta: f64,
) -> Result<()> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::contract(format!("theta must be finite and >= 0, got {theta}")));
    }
    weights.check_aligned(dataset)?;
    for (i, s) in dataset.iter().enumerate() {
        if s.dim() != params.num_features() {
            return Err(Error::dim(format!("features of sequence {i}"), params.num_features(), s.dim()));
        }
        if let Some(t) = s.labels().iter().position(|&y| y >= params.num_classes()) {
            return Err(Error::contract(format!("label out of range in sequence {i} at {t}")));
        }
    }
    Ok(())
}

/// `sum_t w_t log p(y_t = gold_t | x) - theta ||lambda||^2` with its exact gradient.
pub fn weighted_objective(
    dataset: &[LabeledSequence],
    params: &CrfParameters,
    weights: &WeightVector,
    theta: f64,
) -> Result<ObjectiveValue> {
    Ok(evaluate(dataset, params, weights, theta)?.value)
}

pub(crate) fn evaluate(
    dataset: &[LabeledSequence],
    params: &CrfParameters,
    weights: &WeightVector,
    theta: f64,
) -> Result<Evaluation> {
    check_inputs(dataset, params, weights, theta)?;
    // per-sequence terms in parallel, combined in dataset order
    let terms: Vec<SequenceTerm> = dataset
        .par_iter()
        .zip(weights.sequences().par_iter())
        .map(|(seq, w)| sequence_term(seq, params, w))
        .collect::<Result<_>>()?;
    Ok(combine(terms, params, theta))
}

fn combine(terms: Vec<SequenceTerm>, params: &CrfParameters, theta: f64) -> Evaluation {
    let flat = params.to_flat();
    let mut gradient = vec![0.0; flat.len()];
    let mut weighted_loglik = 0.0;
    let mut marginals = Vec::with_capacity(terms.len());
    for term in terms {
        weighted_loglik += term.loglik;
        for (g, v) in gradient.iter_mut().zip(&term.gradient) {
            *g += v;
        }
        marginals.push(term.marginals);
    }
    let l2_penalty = theta * params.squared_norm();
    for (g, p) in gradient.iter_mut().zip(&flat) {
        *g -= 2.0 * theta * p;
    }
    Evaluation {
        value: ObjectiveValue {
            weighted_loglik,
            l2_penalty,
            total: weighted_loglik - l2_penalty,
            gradient,
        },
        marginals,
    }
}

fn sequence_term(seq: &LabeledSequence, params: &CrfParameters, weights: &[f64]) -> Result<SequenceTerm> {
    let pot = compute_potentials(seq.observations(), params)?;
    let pass = chain_pass(&pot);
    let k = pass.k;
    let len = pass.len;
    let gold = seq.labels();

    let mut loglik = 0.0;
    // c_s = w_s / mu_s(gold_s); floored positions have zero derivative
    let mut c = vec![0.0; len];
    let mut total_weight = 0.0;
    for t in 0..len {
        let mu = pass.unary[t * k + gold[t]];
        loglik += weights[t] * mu.max(MARGINAL_FLOOR).ln();
        if mu >= MARGINAL_FLOOR && weights[t] != 0.0 {
            c[t] = weights[t] / mu;
            total_weight += weights[t];
        }
    }

    let score_grad = score_gradient(&pot, &pass, gold, &c, total_weight);
    let gradient = scores_to_params(&score_grad, seq, params);
    Ok(SequenceTerm {
        loglik,
        gradient,
        marginals: pass.marginals(),
    })
}

/// Gradient of `sum_s w_s log mu_s(gold_s)` with respect to the emission scores (T x K)
/// and the transition scores (K x K).
struct ScoreGradient {
    emission: Vec<f64>,
    transition: Vec<f64>,
}

fn score_gradient(
    pot: &PotentialTables,
    pass: &ChainPass,
    gold: &[usize],
    c: &[f64],
    total_weight: f64,
) -> ScoreGradient {
    let k = pass.k;
    let len = pass.len;
    let mut scratch = vec![0.0; k];

    // fwd[t][j] = E[sum_{s<=t} c_s [y_s = gold_s] | y_t = j, x_{1..t}]
    let mut fwd = vec![0.0; len * k];
    fwd[gold[0]] = c[0];
    for t in 1..len {
        for j in 0..k {
            // p(y_{t-1} = i | y_t = j) ∝ alpha_{t-1}(i) exp(A[i][j])
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = pass.log_alpha[(t - 1) * k + i] + pot.transition(i, j);
            }
            let norm = log_sum_exp(&scratch);
            let mut acc = 0.0;
            if norm.is_finite() {
                for i in 0..k {
                    acc += (scratch[i] - norm).exp() * fwd[(t - 1) * k + i];
                }
            }
            if j == gold[t] {
                acc += c[t];
            }
            fwd[t * k + j] = acc;
        }
    }

    // bwd[t][j] = E[sum_{s>t} c_s [y_s = gold_s] | y_t = j, x]
    let mut bwd = vec![0.0; len * k];
    for t in (0..len.saturating_sub(1)).rev() {
        for j in 0..k {
            let lb = pass.log_beta[t * k + j];
            if lb == f64::NEG_INFINITY {
                continue;
            }
            let mut acc = 0.0;
            for m in 0..k {
                // p(y_{t+1} = m | y_t = j, x)
                let p = (pot.transition(j, m) + pot.emission(t + 1, m) + pass.log_beta[(t + 1) * k + m]
                    - pass.log_norm[t + 1]
                    - lb)
                    .exp();
                let gain = if m == gold[t + 1] { c[t + 1] } else { 0.0 };
                acc += p * (bwd[(t + 1) * k + m] + gain);
            }
            bwd[t * k + j] = acc;
        }
    }

    let mut emission = vec![0.0; len * k];
    for t in 0..len {
        for j in 0..k {
            let mu = pass.unary[t * k + j];
            emission[t * k + j] = mu * (fwd[t * k + j] + bwd[t * k + j] - total_weight);
        }
    }

    let mut transition = vec![0.0; k * k];
    for s in 0..len.saturating_sub(1) {
        let slice = &pass.pairwise[s * k * k..(s + 1) * k * k];
        for i in 0..k {
            for j in 0..k {
                let xi = slice[i * k + j];
                if xi == 0.0 {
                    continue;
                }
                let gain = if j == gold[s + 1] { c[s + 1] } else { 0.0 };
                transition[i * k + j] += xi * (fwd[s * k + i] + gain + bwd[(s + 1) * k + j] - total_weight);
            }
        }
    }
    ScoreGradient { emission, transition }
}

/// Chain rule from score space to the flattened parameter vector.
fn scores_to_params(g: &ScoreGradient, seq: &LabeledSequence, params: &CrfParameters) -> Vec<f64> {
    let k = params.num_classes();
    let d = params.num_features();
    let mut out = vec![0.0; params.num_params()];
    out[..k * k].copy_from_slice(&g.transition);
    let (emission_part, bias_part) = out[k * k..].split_at_mut(k * d);
    for (t, x) in seq.observations().iter().enumerate() {
        let x = x.values();
        for c in 0..k {
            let ge = g.emission[t * k + c];
            if ge == 0.0 {
                continue;
            }
            bias_part[c] += ge;
            for (acc, xv) in emission_part[c * d..(c + 1) * d].iter_mut().zip(x) {
                *acc += ge * xv;
            }
        }
    }
    out
}

/// Reference gradient via one clamped forward-backward per position: `O(T^2 K^2)`.
pub fn weighted_objective_clamped(
    dataset: &[LabeledSequence],
    params: &CrfParameters,
    weights: &WeightVector,
    theta: f64,
) -> Result<ObjectiveValue> {
    check_inputs(dataset, params, weights, theta)?;
    let k = params.num_classes();
    let terms = dataset
        .iter()
        .zip(weights.sequences())
        .map(|(seq, w)| {
            let pot = compute_potentials(seq.observations(), params)?;
            let pass = chain_pass(&pot);
            let unconditional = expected_stats(&pass.unary, &pass.pairwise, k);
            let mut loglik = 0.0;
            let mut emission = vec![0.0; pass.len * k];
            let mut transition = vec![0.0; k * k];
            for (t, (&gold, &wt)) in seq.labels().iter().zip(w).enumerate() {
                let mu = pass.unary[t * k + gold];
                loglik += wt * mu.max(MARGINAL_FLOOR).ln();
                if wt == 0.0 || mu < MARGINAL_FLOOR {
                    continue;
                }
                let clamped = clamped_expectation(&pot, t, gold)?;
                for s in 0..pass.len {
                    for j in 0..k {
                        emission[s * k + j] += wt * (clamped.unary.get(s, j) - unconditional.0[s * k + j]);
                    }
                }
                for (acc, (a, b)) in transition
                    .iter_mut()
                    .zip(clamped.transition_counts.iter().zip(&unconditional.1))
                {
                    *acc += wt * (a - b);
                }
            }
            let grad = scores_to_params(&ScoreGradient { emission, transition }, seq, params);
            Ok(SequenceTerm {
                loglik,
                gradient: grad,
                marginals: pass.marginals(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(terms, params, theta).value)
}

fn expected_stats(unary: &[f64], pairwise: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut trans = vec![0.0; k * k];
    for slice in pairwise.chunks(k * k) {
        for (acc, p) in trans.iter_mut().zip(slice) {
            *acc += p;
        }
    }
    (unary.to_vec(), trans)
}
