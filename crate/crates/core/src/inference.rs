//! Exact inference on linear chains.
//!
//! All message passing runs in the log domain with the forward message
//! renormalized at every step; `log Z` is accumulated from the per-step
//! normalizers. Clamped passes reuse the same code with `-inf` emission
//! entries for the excluded classes.

use crate::error::{Error, Result};
use crate::model::CrfParameters;

/// Largest number of labelings `enumerate_log_partition` will visit.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Per-position emission scores (T x K) and the transition score matrix (K x K).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTables {
    len: usize,
    num_classes: usize,
    emission: Vec<f64>,
    transition: Vec<f64>,
}

impl PotentialTables {
    pub fn new(emission_scores: Vec<Vec<f64>>, transition_scores: Vec<Vec<f64>>) -> Result<Self> {
        let k = transition_scores.len();
        if k == 0 {
            return Err(Error::contract("transition matrix is empty"));
        }
        if emission_scores.is_empty() {
            return Err(Error::contract("potential tables need at least one position"));
        }
        for (j, row) in transition_scores.iter().enumerate() {
            if row.len() != k {
                return Err(Error::dim(format!("transition_scores[{j}]"), k, row.len()));
            }
        }
        for (t, row) in emission_scores.iter().enumerate() {
            if row.len() != k {
                return Err(Error::dim(format!("emission_scores[{t}]"), k, row.len()));
            }
        }
        let tables = Self {
            len: emission_scores.len(),
            num_classes: k,
            emission: emission_scores.concat(),
            transition: transition_scores.concat(),
        };
        tables.check_finite()?;
        Ok(tables)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn emission(&self, t: usize, k: usize) -> f64 {
        self.emission[t * self.num_classes + k]
    }

    #[inline]
    pub fn emission_row(&self, t: usize) -> &[f64] {
        &self.emission[t * self.num_classes..(t + 1) * self.num_classes]
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.num_classes + to]
    }

    /// Adds `c` to every emission score at position `t`.
    pub fn shift_position(&mut self, t: usize, c: f64) {
        let k = self.num_classes;
        self.emission[t * k..(t + 1) * k]
            .iter_mut()
            .for_each(|v| *v += c);
    }

    fn check_finite(&self) -> Result<()> {
        let k = self.num_classes;
        if let Some(i) = self.emission.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite emission potential at position {} class {}",
                i / k,
                i % k
            )));
        }
        if let Some(i) = self.transition.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite transition potential {} -> {}",
                i / k,
                i % k
            )));
        }
        Ok(())
    }
}

/// Potentials of `params` on an observation sequence.
pub fn compute_potentials<X: AsRef<[f64]>>(
    observations: &[X],
    params: &CrfParameters,
) -> Result<PotentialTables> {
    if observations.is_empty() {
        return Err(Error::contract("cannot score an empty sequence"));
    }
    let k = params.num_classes();
    let d = params.num_features();
    let mut emission = Vec::with_capacity(observations.len() * k);
    for (t, x) in observations.iter().enumerate() {
        let x = x.as_ref();
        if x.len() != d {
            return Err(Error::dim(format!("observation {t}"), d, x.len()));
        }
        for c in 0..k {
            let score: f64 = params.bias()[c] + dot(params.emission_row(c), x);
            emission.push(score);
        }
    }
    let mut transition = Vec::with_capacity(k * k);
    for j in 0..k {
        for c in 0..k {
            transition.push(params.transition(j, c));
        }
    }
    let tables = PotentialTables {
        len: observations.len(),
        num_classes: k,
        emission,
        transition,
    };
    tables.check_finite()?;
    Ok(tables)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-position class distribution `p(y_t = k | x)` and `log Z(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMarginals {
    num_classes: usize,
    probs: Vec<f64>,
    pub log_partition: f64,
}

impl PositionMarginals {
    pub fn from_rows(rows: Vec<Vec<f64>>, log_partition: f64) -> Self {
        let num_classes = rows.first().map_or(0, Vec::len);
        Self {
            num_classes,
            probs: rows.concat(),
            log_partition,
        }
    }

    pub fn len(&self) -> usize {
        if self.num_classes == 0 {
            0
        } else {
            self.probs.len() / self.num_classes
        }
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.probs[t * self.num_classes + k]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.num_classes..(t + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_classes)
    }

    /// Highest-marginal label per position, lowest index on ties.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

/// `p(y_t = i, y_{t+1} = j | x)` for every adjacent pair; slice `s` covers positions `(s, s+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMarginals {
    num_classes: usize,
    probs: Vec<f64>,
}

impl PairwiseMarginals {
    pub fn len(&self) -> usize {
        self.probs.len() / (self.num_classes * self.num_classes).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn get(&self, s: usize, from: usize, to: usize) -> f64 {
        let k = self.num_classes;
        self.probs[s * k * k + from * k + to]
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let kk = self.num_classes * self.num_classes;
        &self.probs[s * kk..(s + 1) * kk]
    }
}

/// First index of the maximum; NaN-free input assumed.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Raw results of one forward-backward sweep, kept for gradient computations.
pub(crate) struct ChainPass {
    pub k: usize,
    pub len: usize,
    /// log of the normalized forward message at each position
    pub log_alpha: Vec<f64>,
    /// log of the backward message scaled by the same normalizers
    pub log_beta: Vec<f64>,
    /// per-step log normalizer; sums to log Z
    pub log_norm: Vec<f64>,
    pub unary: Vec<f64>,
    pub pairwise: Vec<f64>,
    pub log_partition: f64,
}

/// Forward-backward over (possibly `-inf`-masked) potentials.
pub(crate) fn chain_pass(pot: &PotentialTables) -> ChainPass {
    let k = pot.num_classes;
    let len = pot.len;
    let mut log_alpha = vec![0.0; len * k];
    let mut log_norm = vec![0.0; len];
    let mut scratch = vec![0.0; k];

    log_alpha[..k].copy_from_slice(pot.emission_row(0));
    log_norm[0] = normalize_log(&mut log_alpha[..k]);
    for t in 1..len {
        let (prev, cur) = log_alpha.split_at_mut(t * k);
        let prev = &prev[(t - 1) * k..];
        let cur = &mut cur[..k];
        for (c, out) in cur.iter_mut().enumerate() {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = prev[j] + pot.transition(j, c);
            }
            *out = pot.emission(t, c) + log_sum_exp(&scratch);
        }
        log_norm[t] = normalize_log(cur);
    }
    let log_partition: f64 = log_norm.iter().sum();

    let mut log_beta = vec![0.0; len * k];
    for t in (0..len.saturating_sub(1)).rev() {
        let (cur, next) = log_beta.split_at_mut((t + 1) * k);
        let next = &next[..k];
        let cur = &mut cur[t * k..];
        for (j, out) in cur.iter_mut().enumerate() {
            for (c, s) in scratch.iter_mut().enumerate() {
                *s = pot.transition(j, c) + pot.emission(t + 1, c) + next[c];
            }
            *out = log_sum_exp(&scratch) - log_norm[t + 1];
        }
    }

    let mut unary = vec![0.0; len * k];
    for t in 0..len {
        let row = &mut unary[t * k..(t + 1) * k];
        for c in 0..k {
            row[c] = (log_alpha[t * k + c] + log_beta[t * k + c]).exp();
        }
        renormalize(row);
    }

    let mut pairwise = vec![0.0; len.saturating_sub(1) * k * k];
    for s in 0..len.saturating_sub(1) {
        let slice = &mut pairwise[s * k * k..(s + 1) * k * k];
        for i in 0..k {
            for j in 0..k {
                slice[i * k + j] = (log_alpha[s * k + i]
                    + pot.transition(i, j)
                    + pot.emission(s + 1, j)
                    + log_beta[(s + 1) * k + j]
                    - log_norm[s + 1])
                    .exp();
            }
        }
        renormalize(slice);
    }

    ChainPass {
        k,
        len,
        log_alpha,
        log_beta,
        log_norm,
        unary,
        pairwise,
        log_partition,
    }
}

/// Normalizes log-weights in place so they exponentiate to a distribution; returns the log normalizer.
fn normalize_log(values: &mut [f64]) -> f64 {
    let z = log_sum_exp(values);
    values.iter_mut().for_each(|v| *v -= z);
    z
}

fn renormalize(values: &mut [f64]) {
    let s: f64 = values.iter().sum();
    if s > 0.0 {
        values.iter_mut().for_each(|v| *v /= s);
    }
}

/// Exact `log Z`, unary and pairwise marginals by sum-product.
pub fn forward_backward(pot: &PotentialTables) -> Result<(PositionMarginals, PairwiseMarginals)> {
    pot.check_finite()?;
    let pass = chain_pass(pot);
    Ok(pass.into_marginals())
}

impl ChainPass {
    pub(crate) fn into_marginals(self) -> (PositionMarginals, PairwiseMarginals) {
        (
            PositionMarginals {
                num_classes: self.k,
                probs: self.unary,
                log_partition: self.log_partition,
            },
            PairwiseMarginals {
                num_classes: self.k,
                probs: self.pairwise,
            },
        )
    }

    pub(crate) fn marginals(&self) -> PositionMarginals {
        PositionMarginals {
            num_classes: self.k,
            probs: self.unary.clone(),
            log_partition: self.log_partition,
        }
    }
}

/// Normalized forward messages `alpha_t / sum(alpha_t)`: the filtering distribution of
/// each position given only the observations up to it.
pub fn forward_prefix_marginals(pot: &PotentialTables) -> Result<Vec<Vec<f64>>> {
    pot.check_finite()?;
    let k = pot.num_classes;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(pot.len);
    let mut scratch = vec![0.0; k];
    let mut log_msg = pot.emission_row(0).to_vec();
    normalize_log(&mut log_msg);
    out.push(log_msg.iter().map(|v| v.exp()).collect());
    for t in 1..pot.len {
        let prev = log_msg.clone();
        for (c, out) in log_msg.iter_mut().enumerate() {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = prev[j] + pot.transition(j, c);
            }
            *out = pot.emission(t, c) + log_sum_exp(&scratch);
        }
        normalize_log(&mut log_msg);
        out.push(log_msg.iter().map(|v| v.exp()).collect());
    }
    Ok(out)
}

/// Total score of one labeling.
pub fn path_score(pot: &PotentialTables, labels: &[usize]) -> f64 {
    let mut score = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        score += pot.emission(t, y);
        if t > 0 {
            score += pot.transition(labels[t - 1], y);
        }
    }
    score
}

/// Result of brute-force enumeration over all `K^T` labelings.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub log_partition: f64,
    pub unary: PositionMarginals,
    pub pairwise: PairwiseMarginals,
}

/// Exact `log Z` and marginals by visiting every labeling. Refuses when `K^T` exceeds
/// [`ENUMERATION_LIMIT`].
pub fn enumerate_log_partition(pot: &PotentialTables) -> Result<Enumeration> {
    pot.check_finite()?;
    let k = pot.num_classes;
    let len = pot.len;
    let total = (k as u64)
        .checked_pow(len as u32)
        .filter(|&n| n <= ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::Refused(format!(
                "enumeration of {k}^{len} labelings exceeds the limit of {ENUMERATION_LIMIT}"
            ))
        })?;

    let mut scores = Vec::with_capacity(total as usize);
    let mut labels = vec![0usize; len];
    for _ in 0..total {
        scores.push(path_score(pot, &labels));
        increment(&mut labels, k);
    }
    let log_partition = log_sum_exp(&scores);

    let mut unary = vec![0.0; len * k];
    let mut pairwise = vec![0.0; len.saturating_sub(1) * k * k];
    labels.iter_mut().for_each(|y| *y = 0);
    for score in &scores {
        let p = (score - log_partition).exp();
        for (t, &y) in labels.iter().enumerate() {
            unary[t * k + y] += p;
            if t > 0 {
                pairwise[(t - 1) * k * k + labels[t - 1] * k + y] += p;
            }
        }
        increment(&mut labels, k);
    }
    Ok(Enumeration {
        log_partition,
        unary: PositionMarginals {
            num_classes: k,
            probs: unary,
            log_partition,
        },
        pairwise: PairwiseMarginals {
            num_classes: k,
            probs: pairwise,
        },
    })
}

/// Odometer increment, last position fastest.
fn increment(labels: &mut [usize], k: usize) {
    for y in labels.iter_mut().rev() {
        *y += 1;
        if *y < k {
            return;
        }
        *y = 0;
    }
}

/// Highest-scoring labeling. Ties go to the lowest label index: at the last position and
/// at every backpointer.
pub fn viterbi(pot: &PotentialTables) -> Result<Vec<usize>> {
    pot.check_finite()?;
    let k = pot.num_classes;
    let len = pot.len;
    let mut score = pot.emission_row(0).to_vec();
    let mut back = vec![0usize; len * k];
    let mut next = vec![0.0; k];
    for t in 1..len {
        for (c, out) in next.iter_mut().enumerate() {
            let mut best_j = 0;
            let mut best = score[0] + pot.transition(0, c);
            for (j, &s) in score.iter().enumerate().skip(1) {
                let cand = s + pot.transition(j, c);
                if cand > best {
                    best = cand;
                    best_j = j;
                }
            }
            back[t * k + c] = best_j;
            *out = best + pot.emission(t, c);
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut path = vec![0usize; len];
    path[len - 1] = argmax(&score);
    for t in (1..len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok(path)
}

/// Expectations of the sufficient statistics under `p(y | x, y_t = k)`.
#[derive(Debug, Clone)]
pub struct ClampedExpectation {
    /// `log sum_{y: y_t = k} exp(score(y))`
    pub log_mass: f64,
    /// Expected emission indicators per position (T x K), i.e. clamped unary marginals.
    pub unary: PositionMarginals,
    /// Expected transition-pair counts summed over positions (K x K, row-major).
    pub transition_counts: Vec<f64>,
}

/// Constrained forward-backward with position `t` restricted to class `k`.
pub fn clamped_expectation(pot: &PotentialTables, t: usize, k: usize) -> Result<ClampedExpectation> {
    pot.check_finite()?;
    if t >= pot.len {
        return Err(Error::contract(format!("clamp position {t} outside sequence of length {}", pot.len)));
    }
    if k >= pot.num_classes {
        return Err(Error::contract(format!("clamp class {k} outside [0, {})", pot.num_classes)));
    }
    let mut clamped = pot.clone();
    for c in 0..pot.num_classes {
        if c != k {
            clamped.emission[t * pot.num_classes + c] = f64::NEG_INFINITY;
        }
    }
    let pass = chain_pass(&clamped);
    let kk = pot.num_classes * pot.num_classes;
    let mut transition_counts = vec![0.0; kk];
    for slice in pass.pairwise.chunks(kk) {
        for (acc, p) in transition_counts.iter_mut().zip(slice) {
            *acc += p;
        }
    }
    Ok(ClampedExpectation {
        log_mass: pass.log_partition,
        unary: pass.into_marginals().0,
        transition_counts,
    })
}

/// Running forward message for real-time labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    message: Vec<f64>,
    position: usize,
}

impl StreamState {
    /// Fresh state: no observation consumed yet.
    pub fn new(num_classes: usize) -> Self {
        Self {
            message: vec![1.0 / num_classes as f64; num_classes],
            position: 0,
        }
    }

    pub fn message(&self) -> &[f64] {
        &self.message
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Consumes one observation in place; returns the predicted label.
    pub fn push(&mut self, x: &[f64], params: &CrfParameters) -> Result<usize> {
        let (next, label, _) = stream_update(self, x, params)?;
        *self = next;
        Ok(label)
    }
}

/// One step of the forward-only recursion
/// `m(y_t) ∝ exp(emit(y_t, x)) * sum_{y'} exp(trans(y', y_t)) m(y')`.
///
/// At position 0 there is no incoming message and `m ∝ exp(emit)`. The predicted label is the
/// argmax of the new message, lowest index on ties.
pub fn stream_update(
    state: &StreamState,
    x: &[f64],
    params: &CrfParameters,
) -> Result<(StreamState, usize, Vec<f64>)> {
    let k = params.num_classes();
    if state.message.len() != k {
        return Err(Error::dim("stream message", k, state.message.len()));
    }
    if x.len() != params.num_features() {
        return Err(Error::dim("stream observation", params.num_features(), x.len()));
    }
    let mut log_msg: Vec<f64> = (0..k)
        .map(|c| params.bias()[c] + dot(params.emission_row(c), x))
        .collect();
    if let Some(c) = log_msg.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite emission score for class {c}")));
    }
    if state.position > 0 {
        let log_prev: Vec<f64> = state.message.iter().map(|m| m.ln()).collect();
        let mut scratch = vec![0.0; k];
        for (c, out) in log_msg.iter_mut().enumerate() {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = log_prev[j] + params.transition(j, c);
            }
            *out += log_sum_exp(&scratch);
        }
    }
    normalize_log(&mut log_msg);
    let message: Vec<f64> = log_msg.iter().map(|v| v.exp()).collect();
    let label = argmax(&message);
    Ok((
        StreamState {
            message: message.clone(),
            position: state.position + 1,
        },
        label,
        message,
    ))
}

/// Streams a whole observation sequence; returns per-position labels and messages.
pub fn stream_decode<X: AsRef<[f64]>>(
    observations: &[X],
    params: &CrfParameters,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut state = StreamState::new(params.num_classes());
    let mut labels = Vec::with_capacity(observations.len());
    let mut messages = Vec::with_capacity(observations.len());
    for x in observations {
        let (next, label, msg) = stream_update(&state, x.as_ref(), params)?;
        state = next;
        labels.push(label);
        messages.push(msg);
    }
    Ok((labels, messages))
}
