//! Domain types shared by every other module and the model document format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use crate::error::{Error, Result};

/// Ordered set of class names. Label indices are positions in this list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAlphabet {
    names: Vec<String>,
}

impl LabelAlphabet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::invariant(
                "alphabet",
                format!("need at least 2 classes, got {}", names.len()),
            ));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::invariant(format!("alphabet[{i}]"), "empty class name"));
            }
            if names[..i].contains(name) {
                return Err(Error::invariant(
                    format!("alphabet[{i}]"),
                    format!("duplicate class name {name:?}"),
                ));
            }
        }
        Ok(Self { names })
    }

    /// Alphabet `class0 .. class{k-1}`.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("class{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Dense observation vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invariant(
                format!("feature[{i}]"),
                format!("non-finite value {}", values[i]),
            ));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// One trial: observations with gold labels. The unit of fold splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    sequence_id: String,
    observations: Vec<FeatureVector>,
    labels: Vec<usize>,
}

impl LabeledSequence {
    /// Validates lengths, feature dimension, and that every label is below `num_classes`.
    pub fn new(
        sequence_id: impl Into<String>,
        observations: Vec<FeatureVector>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let sequence_id = sequence_id.into();
        if observations.is_empty() {
            return Err(Error::invariant(
                format!("sequence {sequence_id}"),
                "sequence must have at least one position",
            ));
        }
        if observations.len() != labels.len() {
            return Err(Error::dim(
                format!("labels of sequence {sequence_id}"),
                observations.len(),
                labels.len(),
            ));
        }
        let dim = observations[0].dim();
        if let Some(t) = observations.iter().position(|x| x.dim() != dim) {
            return Err(Error::dim(
                format!("observation {t} of sequence {sequence_id}"),
                dim,
                observations[t].dim(),
            ));
        }
        if let Some(t) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::invariant(
                format!("sequence {sequence_id} position {t}"),
                format!("label {} outside [0, {num_classes})", labels[t]),
            ));
        }
        Ok(Self {
            sequence_id,
            observations,
            labels,
        })
    }

    /// Convenience constructor from raw rows.
    pub fn from_rows(
        sequence_id: impl Into<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let observations = rows
            .into_iter()
            .map(FeatureVector::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(sequence_id, observations, labels, num_classes)
    }

    pub fn id(&self) -> &str {
        &self.sequence_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations[0].dim()
    }

    pub fn observations(&self) -> &[FeatureVector] {
        &self.observations
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Keeps only the positions whose index is listed (in order). Returns `None` when empty.
    pub(crate) fn select_positions(&self, keep: &[usize]) -> Option<Self> {
        if keep.is_empty() {
            return None;
        }
        Some(Self {
            sequence_id: self.sequence_id.clone(),
            observations: keep.iter().map(|&t| self.observations[t].clone()).collect(),
            labels: keep.iter().map(|&t| self.labels[t]).collect(),
        })
    }

    pub(crate) fn map_observations(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            sequence_id: self.sequence_id.clone(),
            observations: self
                .observations
                .iter()
                .map(|x| FeatureVector(f(x.values())))
                .collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Model weights: transition (K x K), emission (K x D) and a per-class bias.
///
/// Emission scores are linear in the real-valued features:
/// `score(k, x) = bias[k] + sum_d emission[k][d] * x[d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParameters {
    num_classes: usize,
    num_features: usize,
    transition: Vec<f64>,
    emission: Vec<f64>,
    bias: Vec<f64>,
}

impl CrfParameters {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self {
            num_classes,
            num_features,
            transition: vec![0.0; num_classes * num_classes],
            emission: vec![0.0; num_classes * num_features],
            bias: vec![0.0; num_classes],
        }
    }

    /// Builds parameters from row-major matrices, checking shapes and finiteness.
    pub fn from_parts(
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let k = bias.len();
        check_matrix("transition", &transition, k, k)?;
        let d = emission.first().map_or(0, Vec::len);
        check_matrix("emission", &emission, k, d)?;
        check_finite("bias", &bias)?;
        Ok(Self {
            num_classes: k,
            num_features: d,
            transition: transition.concat(),
            emission: emission.concat(),
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Length of the flattened parameter vector: `K*K + K*D + K`.
    pub fn num_params(&self) -> usize {
        Self::param_count(self.num_classes, self.num_features)
    }

    pub fn param_count(num_classes: usize, num_features: usize) -> usize {
        num_classes * num_classes + num_classes * num_features + num_classes
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.num_classes + to]
    }

    #[inline]
    pub fn emission_row(&self, class: usize) -> &[f64] {
        &self.emission[class * self.num_features..(class + 1) * self.num_features]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn transition_rows(&self) -> Vec<Vec<f64>> {
        self.transition
            .chunks(self.num_classes.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn emission_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|k| self.emission_row(k).to_vec())
            .collect()
    }

    /// Flattened as transition (row-major), then emission (row-major), then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.transition);
        out.extend_from_slice(&self.emission);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn from_flat(num_classes: usize, num_features: usize, flat: &[f64]) -> Result<Self> {
        let expected = Self::param_count(num_classes, num_features);
        if flat.len() != expected {
            return Err(Error::dim("flat parameter vector", expected, flat.len()));
        }
        check_finite("parameters", flat)?;
        let kk = num_classes * num_classes;
        let kd = num_classes * num_features;
        Ok(Self {
            num_classes,
            num_features,
            transition: flat[..kk].to_vec(),
            emission: flat[kk..kk + kd].to_vec(),
            bias: flat[kk + kd..].to_vec(),
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.transition
            .iter()
            .chain(&self.emission)
            .chain(&self.bias)
            .map(|v| v * v)
            .sum()
    }

    /// Copy with the transition matrix zeroed (factorized per-position model).
    pub fn without_transitions(&self) -> Self {
        let mut out = self.clone();
        out.transition.iter_mut().for_each(|v| *v = 0.0);
        out
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invariant(
            format!("{name}[{i}]"),
            format!("non-finite value {}", values[i]),
        )),
        None => Ok(()),
    }
}

fn check_matrix(name: &str, rows: &[Vec<f64>], n_rows: usize, n_cols: usize) -> Result<()> {
    if rows.len() != n_rows {
        return Err(Error::dim(format!("{name} rows"), n_rows, rows.len()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n_cols {
            return Err(Error::dim(format!("{name}[{i}] columns"), n_cols, row.len()));
        }
        check_finite(&format!("{name}[{i}]"), row)?;
    }
    Ok(())
}

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Uniform weights `q`.
    PlainCrf,
    /// Fixed inverse class-frequency weights.
    Fwcrf,
    /// Dynamic F-score-driven weights after `tau` iterations.
    Dwcrf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::PlainCrf => "crf",
            Method::Fwcrf => "fwcrf",
            Method::Dwcrf => "dwcrf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crf" | "plain_crf" | "plain" => Ok(Method::PlainCrf),
            "fwcrf" => Ok(Method::Fwcrf),
            "dwcrf" => Ok(Method::Dwcrf),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected crf, fwcrf or dwcrf)"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub method: Method,
    /// L2 strength; the penalty is `theta * ||lambda||^2`.
    pub theta: f64,
    /// Accepted iterations at uniform weight before dynamic weights kick in.
    /// `None` means never (tau = infinity).
    pub tau: Option<u64>,
    pub beta: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub history_size: usize,
    pub seed: u64,
    /// Standardize features with statistics of the training data.
    pub standardize: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            method: Method::PlainCrf,
            theta: 1e-2,
            tau: Some(5),
            beta: 1.0,
            max_iterations: 500,
            convergence_tol: 1e-6,
            history_size: 10,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainingConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("theta must be >= 0, got {}", self.theta)));
        }
        if self.tau == Some(0) {
            return Err(Error::Config("tau must be a positive integer".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        if self.history_size == 0 {
            return Err(Error::Config("history_size must be positive".into()));
        }
        Ok(())
    }
}

/// Default regularization grid.
pub const THETA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// Default tau grid, clipped by the plain-CRF iteration count at grid time.
pub const TAU_GRID: [u64; 4] = [1, 5, 10, 25];

/// Per-feature affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation per feature; constant features get scale 1.
    pub fn fit(sequences: &[LabeledSequence]) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::contract("cannot fit standardizer on empty data"))?;
        let d = first.dim();
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for seq in sequences {
            for x in seq.observations() {
                if x.dim() != d {
                    return Err(Error::dim("standardizer input", d, x.dim()));
                }
                count += 1;
                for (m, v) in mean.iter_mut().zip(x.values()) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; d];
        for x in sequences.iter().flat_map(|s| s.observations()) {
            for ((acc, v), m) in var.iter_mut().zip(x.values()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let mut scale = Vec::with_capacity(d);
        for (j, v) in var.into_iter().enumerate() {
            let sd = (v / count as f64).sqrt();
            if sd > 1e-12 {
                scale.push(sd);
            } else {
                // constant column: centre on its exact value so it maps to 0
                mean[j] = first.observations()[0].values()[j];
                scale.push(1.0);
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, seq: &LabeledSequence) -> Result<LabeledSequence> {
        if seq.dim() != self.dim() {
            return Err(Error::dim("standardizer input", self.dim(), seq.dim()));
        }
        Ok(seq.map_observations(|x| self.transform(x)))
    }
}

/// Everything persisted in a model document.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: CrfParameters,
    pub alphabet: LabelAlphabet,
    pub feature_names: Vec<String>,
    pub config: TrainingConfig,
    /// Free-form metadata (training outcome, feature notes). Kept as an ordered JSON object.
    pub provenance: Value,
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    alphabet: &'a [String],
    feature_names: &'a [String],
    transition: Vec<Vec<Box<RawValue>>>,
    emission: Vec<Vec<Box<RawValue>>>,
    bias: Vec<Box<RawValue>>,
    config: &'a TrainingConfig,
    provenance: &'a Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<StandardizationOut>,
}

#[derive(Serialize)]
struct StandardizationOut {
    mean: Vec<Box<RawValue>>,
    scale: Vec<Box<RawValue>>,
}

/// 17 significant digits, enough to reproduce every f64 exactly.
fn exact_number(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("formatted float is valid JSON")
}

fn exact_row(values: &[f64]) -> Vec<Box<RawValue>> {
    values.iter().copied().map(exact_number).collect()
}

/// Serializes a model into its JSON document.
pub fn serialize_model(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let k = bundle.params.num_classes();
    let d = bundle.params.num_features();
    if bundle.alphabet.len() != k {
        return Err(Error::dim("alphabet vs parameters", k, bundle.alphabet.len()));
    }
    if bundle.feature_names.len() != d {
        return Err(Error::dim("feature_names vs parameters", d, bundle.feature_names.len()));
    }
    check_finite("parameters", &bundle.params.to_flat())?;
    if let Some(s) = &bundle.standardizer {
        if s.dim() != d || s.scale.len() != d {
            return Err(Error::dim("standardization", d, s.dim()));
        }
    }
    let doc = DocumentOut {
        alphabet: bundle.alphabet.names(),
        feature_names: &bundle.feature_names,
        transition: (0..k)
            .map(|j| exact_row(&bundle.params.transition[j * k..(j + 1) * k]))
            .collect(),
        emission: (0..k).map(|c| exact_row(bundle.params.emission_row(c))).collect(),
        bias: exact_row(bundle.params.bias()),
        config: &bundle.config,
        provenance: &bundle.provenance,
        standardization: bundle.standardizer.as_ref().map(|s| StandardizationOut {
            mean: exact_row(&s.mean),
            scale: exact_row(&s.scale),
        }),
    };
    let mut out = serde_json::to_vec_pretty(&doc)
        .map_err(|e| Error::contract(format!("serializing model: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes a model document to `path`.
pub fn save_model(bundle: &ModelBundle, path: &std::path::Path) -> Result<()> {
    let bytes = serialize_model(bundle)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &std::path::Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_model(&bytes)
}

/// Parses a model document. Numeric entries may be JSON numbers or numeric strings;
/// either way every entry must be finite.
pub fn deserialize_model(document: &[u8]) -> Result<ModelBundle> {
    let root: Value = serde_json::from_slice(document)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::parse("document", "top level must be an object"))?;
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| Error::parse(name, "missing field"))
    };

    let alphabet_names = string_list(field("alphabet")?, "alphabet")?;
    let alphabet = LabelAlphabet::new(alphabet_names)?;
    let k = alphabet.len();
    let feature_names = string_list(field("feature_names")?, "feature_names")?;
    let d = feature_names.len();

    let transition = number_matrix(field("transition")?, "transition", k, k)?;
    let emission = number_matrix(field("emission")?, "emission", k, d)?;
    let bias = number_list(field("bias")?, "bias", Some(k))?;

    let config: TrainingConfig = serde_json::from_value(field("config")?.clone())
        .map_err(|e| Error::parse("config", e.to_string()))?;
    let provenance = field("provenance")?.clone();
    if !provenance.is_object() {
        return Err(Error::parse("provenance", "must be an object"));
    }

    let standardizer = match obj.get("standardization") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let mean = number_list(
                v.get("mean")
                    .ok_or_else(|| Error::parse("standardization.mean", "missing field"))?,
                "standardization.mean",
                Some(d),
            )?;
            let scale = number_list(
                v.get("scale")
                    .ok_or_else(|| Error::parse("standardization.scale", "missing field"))?,
                "standardization.scale",
                Some(d),
            )?;
            if let Some(i) = scale.iter().position(|s| *s <= 0.0) {
                return Err(Error::invariant(
                    format!("standardization.scale[{i}]"),
                    "scale must be positive",
                ));
            }
            Some(Standardizer { mean, scale })
        }
    };

    let params = CrfParameters {
        num_classes: k,
        num_features: d,
        transition: transition.concat(),
        emission: emission.concat(),
        bias,
    };
    Ok(ModelBundle {
        params,
        alphabet,
        feature_names,
        config,
        provenance,
        standardizer,
    })
}

fn string_list(v: &Value, name: &str) -> Result<Vec<String>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(name, "expected an array of strings"))?;
    arr.iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::parse(format!("{name}[{i}]"), "expected a string"))
        })
        .collect()
}

fn number(v: &Value, location: String) -> Result<f64> {
    let x = match v {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::parse(&location, "number not representable as f64"))?,
        Value::String(s) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(&location, format!("not a number: {s:?}")))?,
        _ => return Err(Error::parse(&location, "expected a number")),
    };
    if !x.is_finite() {
        return Err(Error::invariant(location, format!("non-finite value {x}")));
    }
    Ok(x)
}

fn number_list(v: &Value, name: &str, len: Option<usize>) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(name, "expected an array of numbers"))?;
    if let Some(len) = len {
        if arr.len() != len {
            return Err(Error::dim(name, len, arr.len()));
        }
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| number(x, format!("{name}[{i}]")))
        .collect()
}

fn number_matrix(v: &Value, name: &str, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(name, "expected an array of rows"))?;
    if arr.len() != rows {
        return Err(Error::dim(format!("{name} rows"), rows, arr.len()));
    }
    arr.iter()
        .enumerate()
        .map(|(i, row)| number_list(row, &format!("{name}[{i}]"), Some(cols)))
        .collect()
}
