//! Dataset files, the imbalance-injection subsampler and the synthetic generator.
//!
//! Two CSV layouts are understood. Raw sensor files carry
//! `timestamp,ax_f,ax_v,ax_l,rssi,antenna,label,sex` (plus an optional `sequence_id`)
//! and go through feature extraction; passthrough files carry
//! `sequence_id,label,<feature columns...>`. Lines starting with `#` are comments.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::error::{Error, Result};
use crate::features::{extract_sequence, feature_names, FeatureConfig, SensorRecord};
use crate::model::{LabelAlphabet, LabeledSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<LabeledSequence>,
    pub alphabet: LabelAlphabet,
    pub feature_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        sequences: Vec<LabeledSequence>,
        alphabet: LabelAlphabet,
        feature_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let d = feature_names.len();
        for s in &sequences {
            if s.dim() != d {
                return Err(Error::dim(format!("features of sequence {}", s.id()), d, s.dim()));
            }
            if let Some(t) = s.labels().iter().position(|&y| y >= alphabet.len()) {
                return Err(Error::invariant(
                    format!("sequence {} position {t}", s.id()),
                    "label outside the alphabet",
                ));
            }
        }
        Ok(Self {
            sequences,
            alphabet,
            feature_names,
            provenance: provenance.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.alphabet.len()];
        for s in &self.sequences {
            for &y in s.labels() {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Most frequent class; the lowest index wins ties.
    pub fn majority_class(&self) -> usize {
        let counts = self.class_counts();
        let mut best = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    RawSensor(FeatureConfig),
    Passthrough,
}

pub fn load_dataset(path: &Path, mode: &Mode) -> Result<Dataset> {
    load_dataset_with_alphabet(path, mode, None)
}

/// As [`load_dataset`], but labels are resolved against `alphabet` when one is given
/// (for scoring against a trained model).
pub fn load_dataset_with_alphabet(path: &Path, mode: &Mode, alphabet: Option<&LabelAlphabet>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, mode, alphabet, &path.display().to_string())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(input)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::parse(format!("{source}:{line}"), e.to_string())
}

fn resolve_alphabet(raw: &[String], given: Option<&LabelAlphabet>) -> Result<LabelAlphabet> {
    match given {
        Some(a) => Ok(a.clone()),
        None => {
            let mut names: Vec<&String> = raw.iter().collect();
            names.sort();
            names.dedup();
            LabelAlphabet::new(names.into_iter().cloned())
        }
    }
}

/// Rows grouped by sequence id, in order of first appearance.
struct Grouped<T> {
    ids: Vec<String>,
    rows: Vec<Vec<(u64, String, T)>>,
}

impl<T> Grouped<T> {
    fn new() -> Self {
        Self {
            ids: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, index: &mut HashMap<String, usize>, id: &str, line: u64, label: String, value: T) {
        let slot = *index.entry(id.to_owned()).or_insert_with(|| {
            self.ids.push(id.to_owned());
            self.rows.push(Vec::new());
            self.ids.len() - 1
        });
        self.rows[slot].push((line, label, value));
    }

    fn labels(&self) -> Vec<String> {
        self.rows.iter().flatten().map(|r| r.1.clone()).collect()
    }
}

fn label_indices<T>(
    rows: &[(u64, String, T)],
    alphabet: &LabelAlphabet,
    source: &str,
) -> Result<Vec<usize>> {
    rows.iter()
        .map(|(line, name, _)| {
            alphabet
                .index_of(name)
                .ok_or_else(|| Error::parse(format!("{source}:{line}"), format!("label {name:?} not in the model alphabet")))
        })
        .collect()
}

pub fn read_dataset<R: Read>(input: R, mode: &Mode, alphabet: Option<&LabelAlphabet>, source: &str) -> Result<Dataset> {
    match mode {
        Mode::Passthrough => read_passthrough(input, alphabet, source),
        Mode::RawSensor(cfg) => read_raw(input, cfg, alphabet, source),
    }
}

fn read_passthrough<R: Read>(input: R, given: Option<&LabelAlphabet>, source: &str) -> Result<Dataset> {
    let mut rdr = csv_reader(input);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    if header.len() < 3 || &header[0] != "sequence_id" || &header[1] != "label" {
        return Err(Error::parse(
            format!("{source}:1"),
            "expected header sequence_id,label,<feature columns>",
        ));
    }
    let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut index = HashMap::new();
    let mut grouped = Grouped::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let line = line_of(&record);
        let values = record
            .iter()
            .skip(2)
            .enumerate()
            .map(|(j, v)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(format!("{source}:{line}"), format!("column {}: bad number {v:?}", names[j])))
            })
            .collect::<Result<Vec<f64>>>()?;
        grouped.push(&mut index, &record[0], line, record[1].to_owned(), values);
    }
    if grouped.ids.is_empty() {
        return Err(Error::parse(source.to_owned(), "no data rows"));
    }
    let alphabet = resolve_alphabet(&grouped.labels(), given)?;
    let mut sequences = Vec::with_capacity(grouped.ids.len());
    for (id, rows) in grouped.ids.iter().zip(&grouped.rows) {
        let labels = label_indices(rows, &alphabet, source)?;
        let obs = rows.iter().map(|r| r.2.clone()).collect();
        sequences.push(LabeledSequence::from_rows(id.clone(), obs, labels, alphabet.len())?);
    }
    Dataset::new(sequences, alphabet, names, format!("passthrough {source}"))
}

const RAW_COLUMNS: [&str; 8] = ["timestamp", "ax_f", "ax_v", "ax_l", "rssi", "antenna", "label", "sex"];

/// Raw sensor trials: `(sequence_id, records, label names)`. Labels are kept as strings
/// (`None` when blank or `unlabeled`) so callers can build or reuse an alphabet.
pub struct RawTrial {
    pub id: String,
    pub records: Vec<SensorRecord>,
    pub labels: Vec<Option<String>>,
}

pub fn read_raw_trials<R: Read>(input: R, require_labels: bool, source: &str) -> Result<Vec<RawTrial>> {
    let mut rdr = csv_reader(input);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut cols = HashMap::new();
    for name in RAW_COLUMNS {
        match col(name) {
            Some(i) => {
                cols.insert(name, i);
            }
            None if name == "label" && !require_labels => {}
            None => {
                return Err(Error::parse(format!("{source}:1"), format!("missing required column {name:?}")));
            }
        }
    }
    let seq_col = col("sequence_id");
    let mut index = HashMap::new();
    let mut grouped: Grouped<SensorRecord> = Grouped::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let line = line_of(&record);
        let at = |e: String| Error::parse(format!("{source}:{line}"), e);
        let num = |name: &str| -> Result<f64> {
            let v = &record[cols[name]];
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| at(format!("column {name}: bad number {v:?}")))
        };
        let rssi = match &record[cols["rssi"]] {
            "" => None,
            _ => Some(num("rssi")?),
        };
        let antenna = match &record[cols["antenna"]] {
            "" => None,
            v => Some(v.parse::<usize>().map_err(|_| at(format!("column antenna: bad id {v:?}")))?),
        };
        let sex = match &record[cols["sex"]] {
            "0" => 0,
            "1" => 1,
            v => return Err(at(format!("column sex: expected 0 or 1, got {v:?}"))),
        };
        let label = cols
            .get("label")
            .map(|&i| record[i].to_owned())
            .filter(|l| !l.is_empty() && l != "unlabeled");
        if require_labels && label.is_none() {
            return Err(at("unlabeled row in labeled mode".into()));
        }
        let rec = SensorRecord {
            timestamp: num("timestamp")?,
            accel_frontal: num("ax_f")?,
            accel_vertical: num("ax_v")?,
            accel_lateral: num("ax_l")?,
            rssi,
            antenna,
            label: None,
            sex,
        };
        let id = seq_col.map_or("trial", |i| &record[i]);
        grouped.push(&mut index, id, line, label.unwrap_or_default(), rec);
    }
    if grouped.ids.is_empty() {
        return Err(Error::parse(source.to_owned(), "no data rows"));
    }
    Ok(grouped
        .ids
        .into_iter()
        .zip(grouped.rows)
        .map(|(id, rows)| RawTrial {
            id,
            labels: rows.iter().map(|r| Some(r.1.clone()).filter(|l| !l.is_empty())).collect(),
            records: rows.into_iter().map(|r| r.2).collect(),
        })
        .collect())
}

fn read_raw<R: Read>(input: R, cfg: &FeatureConfig, given: Option<&LabelAlphabet>, source: &str) -> Result<Dataset> {
    let trials = read_raw_trials(input, true, source)?;
    let all: Vec<String> = trials.iter().flat_map(|t| t.labels.iter().flatten().cloned()).collect();
    let alphabet = resolve_alphabet(&all, given)?;
    let mut sequences = Vec::with_capacity(trials.len());
    for mut trial in trials {
        for (r, name) in trial.records.iter_mut().zip(&trial.labels) {
            let name = name.as_deref().unwrap_or_default();
            r.label = Some(alphabet.index_of(name).ok_or_else(|| {
                Error::parse(format!("{source} trial {}", trial.id), format!("label {name:?} not in the alphabet"))
            })?);
        }
        sequences.push(extract_sequence(trial.id.clone(), &trial.records, cfg, alphabet.len())?);
    }
    Dataset::new(
        sequences,
        alphabet,
        feature_names(cfg),
        format!("raw_sensor {source} window={}", cfg.window),
    )
}

/// Writes the passthrough layout; `comments` become leading `# ` lines.
pub fn write_passthrough<W: Write>(ds: &Dataset, comments: &[String], out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let io = |e: std::io::Error| Error::io("<output>", e);
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let header = ["sequence_id", "label"]
        .into_iter()
        .map(String::from)
        .chain(ds.feature_names.iter().cloned());
    w.write_record(header).map_err(|e| csv_error("<output>", e))?;
    for s in &ds.sequences {
        for (x, &y) in s.observations().iter().zip(s.labels()) {
            let mut row = vec![s.id().to_owned(), ds.alphabet.name(y).unwrap_or_default().to_owned()];
            row.extend(x.values().iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_error("<output>", e))?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn save_passthrough(ds: &Dataset, comments: &[String], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_passthrough(ds, comments, file)
}

/// Positions kept by the subsampler: indices `0, n, 2n, ...` inside each maximal run of a
/// non-preserved label, everything inside preserved runs.
pub fn subsample_positions(labels: &[usize], n: usize, preserved: usize) -> Vec<usize> {
    let mut keep = Vec::with_capacity(labels.len());
    let mut run_start = 0;
    for (t, &y) in labels.iter().enumerate() {
        if t > 0 && y != labels[t - 1] {
            run_start = t;
        }
        if y == preserved || (t - run_start) % n == 0 {
            keep.push(t);
        }
    }
    keep
}

/// Thins every non-preserved run to one position in `n`. Sequences left empty are dropped.
pub fn imbalance_subsample(ds: &Dataset, n: usize, preserved: usize) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::contract(format!("keep-1-of-n factor must be at least 2, got {n}")));
    }
    if preserved >= ds.alphabet.len() {
        return Err(Error::contract(format!(
            "preserved class {preserved} outside [0, {})",
            ds.alphabet.len()
        )));
    }
    let sequences = ds
        .sequences
        .iter()
        .filter_map(|s| s.select_positions(&subsample_positions(s.labels(), n, preserved)))
        .collect();
    Ok(Dataset {
        sequences,
        alphabet: ds.alphabet.clone(),
        feature_names: ds.feature_names.clone(),
        provenance: format!(
            "{} | subsample n={n} preserved={}",
            ds.provenance,
            ds.alphabet.name(preserved).unwrap_or_default()
        ),
    })
}

/// Skew of the most imbalanced clinical room: minority share 1.5%.
pub const ROOM2_LIKE: [f64; 4] = [0.84, 0.10, 0.045, 0.015];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_features: usize,
    pub class_distribution: Vec<f64>,
    pub transition_stickiness: f64,
    pub emission_separation: f64,
    pub sequence_count: usize,
    pub mean_length: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Four classes with the room2-like skew.
    pub fn room2_like(num_features: usize, sequence_count: usize, mean_length: usize, seed: u64) -> Self {
        Self {
            num_classes: 4,
            num_features,
            class_distribution: ROOM2_LIKE.to_vec(),
            transition_stickiness: 0.9,
            emission_separation: 3.0,
            sequence_count,
            mean_length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {k}")));
        }
        if self.class_distribution.len() != k {
            return Err(Error::dim("class distribution", k, self.class_distribution.len()));
        }
        let sum: f64 = self.class_distribution.iter().sum();
        if self.class_distribution.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "class distribution must be non-negative and sum to 1 (sum {sum})"
            )));
        }
        if !(0.0..1.0).contains(&self.transition_stickiness) {
            return Err(Error::contract(format!(
                "stickiness must lie in [0, 1), got {}",
                self.transition_stickiness
            )));
        }
        if !(self.emission_separation >= 0.0) || !self.emission_separation.is_finite() {
            return Err(Error::contract("emission separation must be finite and non-negative"));
        }
        if self.num_features < k {
            return Err(Error::contract(format!(
                "need at least as many features as classes for separated centers ({} < {k})",
                self.num_features
            )));
        }
        if self.sequence_count == 0 || self.mean_length == 0 {
            return Err(Error::contract("sequence count and mean length must be positive"));
        }
        Ok(())
    }
}

/// Markov-chain labels with spherical Gaussian emissions around centers
/// `(sep / sqrt 2) e_k`, so every pair of centers is `sep` apart.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let s = cfg.transition_stickiness;
    let pi = &cfg.class_distribution;
    let initial = WeightedIndex::new(pi).map_err(|e| Error::contract(format!("class distribution: {e}")))?;
    let rows = (0..k)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|j| s * f64::from(u8::from(i == j)) + (1.0 - s) * pi[j]).collect();
            WeightedIndex::new(row).map_err(|e| Error::contract(format!("transition row {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let offset = cfg.emission_separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = ((cfg.mean_length / 2).max(1), (3 * cfg.mean_length / 2).max(1));
    let mut sequences = Vec::with_capacity(cfg.sequence_count);
    for i in 0..cfg.sequence_count {
        let len = rng.gen_range(lo..=hi);
        let mut labels = Vec::with_capacity(len);
        let mut obs = Vec::with_capacity(len);
        let mut y = initial.sample(&mut rng);
        for t in 0..len {
            if t > 0 {
                y = rows[y].sample(&mut rng);
            }
            let x: Vec<f64> = (0..cfg.num_features)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    noise + if d == y { offset } else { 0.0 }
                })
                .collect();
            labels.push(y);
            obs.push(x);
        }
        sequences.push(LabeledSequence::from_rows(format!("synth-{i:04}"), obs, labels, k)?);
    }
    let alphabet = LabelAlphabet::new((0..k).map(|c| format!("c{c}")))?;
    let names = (1..=cfg.num_features).map(|d| format!("f{d}")).collect();
    let dist: Vec<String> = pi.iter().map(|p| p.to_string()).collect();
    Dataset::new(
        sequences,
        alphabet,
        names,
        format!(
            "synthetic seed={} distribution={} stickiness={} separation={}",
            cfg.seed,
            dist.join("/"),
            s,
            cfg.emission_separation
        ),
    )
}
