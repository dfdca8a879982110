//! Sliding-window features for passive wearable sensor streams.
//!
//! Each record anchors one segment: the records with timestamps in `(t - W, t]` up to and
//! including the anchor. The feature vector of a record is the concatenation
//! instantaneous ∥ contextual ∥ inter-segment.

use crate::error::{Error, Result};
use crate::model::LabeledSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub timestamp: f64,
    pub accel_frontal: f64,
    pub accel_vertical: f64,
    pub accel_lateral: f64,
    /// `None` for devices without RFID readings.
    pub rssi: Option<f64>,
    pub antenna: Option<usize>,
    pub label: Option<usize>,
    pub sex: u8,
}

impl SensorRecord {
    fn axes(&self) -> [f64; 3] {
        [self.accel_frontal, self.accel_vertical, self.accel_lateral]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Window length in seconds.
    pub window: f64,
    pub antenna_count: usize,
    pub bed_antenna: usize,
    pub chair_antenna: usize,
    /// Require a label on every anchor.
    pub labeled: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 4.0,
            antenna_count: 4,
            bed_antenna: 0,
            chair_antenna: 1,
            labeled: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0) || !self.window.is_finite() {
            return Err(Error::Config(format!("window must be positive, got {}", self.window)));
        }
        if self.antenna_count == 0 {
            return Err(Error::Config("antenna count must be at least 1".into()));
        }
        if self.bed_antenna == self.chair_antenna {
            return Err(Error::Config(format!(
                "bed and chair antenna must differ (both are {})",
                self.bed_antenna
            )));
        }
        if self.bed_antenna >= self.antenna_count || self.chair_antenna >= self.antenna_count {
            return Err(Error::Config(format!(
                "bed/chair antenna ids ({}, {}) must be below the antenna count {}",
                self.bed_antenna, self.chair_antenna, self.antenna_count
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        feature_names(self).len()
    }
}

/// The records of one window, oldest first; the anchor is last.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub records: &'a [SensorRecord],
}

impl<'a> Segment<'a> {
    pub fn anchor(&self) -> &'a SensorRecord {
        self.records.last().expect("segment holds its anchor")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremes {
    pub max: f64,
    pub min: f64,
    pub median: f64,
}

fn extremes(values: &mut [f64]) -> Option<Extremes> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    Some(Extremes {
        max: values[n - 1],
        min: values[0],
        median,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    /// Frontal, vertical, lateral.
    pub axes: [Extremes; 3],
    pub rssi: Vec<Option<Extremes>>,
    pub counts: Vec<u64>,
}

impl SegmentStats {
    pub fn of(seg: &Segment<'_>, antenna_count: usize) -> Self {
        let axes = std::array::from_fn(|a| {
            let mut v: Vec<f64> = seg.records.iter().map(|r| r.axes()[a]).collect();
            extremes(&mut v).expect("segment is non-empty")
        });
        let mut per_antenna: Vec<Vec<f64>> = vec![Vec::new(); antenna_count];
        let mut counts = vec![0; antenna_count];
        for r in seg.records {
            if let Some(a) = r.antenna.filter(|&a| a < antenna_count) {
                counts[a] += 1;
                if let Some(rssi) = r.rssi {
                    per_antenna[a].push(rssi);
                }
            }
        }
        Self {
            axes,
            rssi: per_antenna.iter_mut().map(|v| extremes(v)).collect(),
            counts,
        }
    }
}

/// `sin(alpha)` for the body tilt `alpha = atan2(a_f, a_v)`.
pub fn tilt_sine(af: f64, av: f64) -> f64 {
    let h = af.hypot(av);
    if h == 0.0 {
        0.0
    } else {
        af / h
    }
}

pub fn instantaneous_features(anchor: &SensorRecord, prev_timestamp: Option<f64>, antenna_count: usize) -> Vec<f64> {
    let (af, av, al) = (anchor.accel_frontal, anchor.accel_vertical, anchor.accel_lateral);
    let mut out = Vec::with_capacity(antenna_count + 9);
    out.extend([af, av, al, tilt_sine(af, av)]);
    out.extend((0..antenna_count).map(|a| if anchor.antenna == Some(a) { 1.0 } else { 0.0 }));
    out.push(anchor.rssi.unwrap_or(0.0));
    out.push(prev_timestamp.map_or(0.0, |p| anchor.timestamp - p));
    out.push(al.atan2(af));
    out.push(al.atan2(av));
    out.push(f64::from(anchor.sex));
    out
}

/// Pearson correlation, 0 when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub fn contextual_features(seg: &Segment<'_>, config: &FeatureConfig) -> Result<Vec<f64>> {
    if config.bed_antenna == config.chair_antenna {
        return Err(Error::Config(format!(
            "bed and chair antenna must differ (both are {})",
            config.bed_antenna
        )));
    }
    if seg.records.is_empty() {
        return Err(Error::contract("segment must hold at least its anchor"));
    }
    let m = config.antenna_count;
    let stats = SegmentStats::of(seg, m);
    let mut out = Vec::with_capacity(3 * m + 5);
    out.extend(stats.counts.iter().map(|&c| c as f64));

    // strongest / weakest single reading; first antenna wins ties
    let mut strongest: Option<(usize, f64)> = None;
    let mut weakest: Option<(usize, f64)> = None;
    for r in seg.records {
        if let (Some(a), Some(v)) = (r.antenna.filter(|&a| a < m), r.rssi) {
            if strongest.is_none_or(|(sa, sv)| v > sv || (v == sv && a < sa)) {
                strongest = Some((a, v));
            }
            if weakest.is_none_or(|(wa, wv)| v < wv || (v == wv && a < wa)) {
                weakest = Some((a, v));
            }
        }
    }
    for pick in [strongest, weakest] {
        out.extend((0..m).map(|a| if pick.map(|p| p.0) == Some(a) { 1.0 } else { 0.0 }));
    }

    out.push(stats.axes[1].max - stats.axes[1].min);
    let (bed, chair) = (Some(config.bed_antenna), Some(config.chair_antenna));
    let pairs = seg
        .records
        .windows(2)
        .filter(|w| {
            let (a, b) = (w[0].antenna, w[1].antenna);
            (a == bed && b == chair) || (a == chair && b == bed)
        })
        .count();
    out.push(pairs as f64);

    let f: Vec<f64> = seg.records.iter().map(|r| r.accel_frontal).collect();
    let v: Vec<f64> = seg.records.iter().map(|r| r.accel_vertical).collect();
    let l: Vec<f64> = seg.records.iter().map(|r| r.accel_lateral).collect();
    out.extend([pearson(&f, &v), pearson(&f, &l), pearson(&v, &l)]);
    Ok(out)
}

/// `cur - prev` of the segment statistics; zeros without a previous segment.
pub fn intersegment_features(prev: Option<&SegmentStats>, cur: &SegmentStats) -> Vec<f64> {
    let m = cur.counts.len();
    let mut out = Vec::with_capacity(9 + 3 * m);
    let delta = |a: &Extremes, b: &Extremes| [a.max - b.max, a.min - b.min, a.median - b.median];
    for axis in 0..3 {
        match prev {
            Some(p) => out.extend(delta(&cur.axes[axis], &p.axes[axis])),
            None => out.extend([0.0; 3]),
        }
    }
    for a in 0..m {
        match (prev.and_then(|p| p.rssi.get(a).copied().flatten()), cur.rssi[a]) {
            (Some(p), Some(c)) => out.extend(delta(&c, &p)),
            _ => out.extend([0.0; 3]),
        }
    }
    out
}

pub fn feature_names(config: &FeatureConfig) -> Vec<String> {
    let m = config.antenna_count;
    let mut names: Vec<String> = ["accel_frontal", "accel_vertical", "accel_lateral", "sin_tilt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..m).map(|a| format!("antenna_{a}")));
    names.extend(["rssi", "dt", "yaw", "roll", "sex"].map(String::from));
    names.extend((0..m).map(|a| format!("count_antenna_{a}")));
    names.extend((0..m).map(|a| format!("max_rssi_antenna_{a}")));
    names.extend((0..m).map(|a| format!("min_rssi_antenna_{a}")));
    names.extend(["vdisp_range", "mi_bed_chair", "r_fv", "r_fl", "r_vl"].map(String::from));
    for axis in ["frontal", "vertical", "lateral"] {
        for stat in ["max", "min", "median"] {
            names.push(format!("delta_{stat}_{axis}"));
        }
    }
    for a in 0..m {
        for stat in ["max", "min", "median"] {
            names.push(format!("delta_{stat}_rssi_{a}"));
        }
    }
    names
}

/// Start index of each record's window.
pub fn window_starts(records: &[SensorRecord], window: f64) -> Vec<usize> {
    let mut lo = 0;
    records
        .iter()
        .map(|r| {
            while r.timestamp - records[lo].timestamp >= window {
                lo += 1;
            }
            lo
        })
        .collect()
}

fn check_records(records: &[SensorRecord], config: &FeatureConfig) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let values = [r.timestamp, r.accel_frontal, r.accel_vertical, r.accel_lateral, r.rssi.unwrap_or(0.0)];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("record {i}: non-finite value")));
        }
        if i > 0 && r.timestamp < records[i - 1].timestamp {
            return Err(Error::contract(format!(
                "record {i}: timestamp {} precedes {}",
                r.timestamp,
                records[i - 1].timestamp
            )));
        }
        if let Some(a) = r.antenna.filter(|&a| a >= config.antenna_count) {
            return Err(Error::contract(format!(
                "record {i}: antenna {a} outside [0, {})",
                config.antenna_count
            )));
        }
        if config.labeled && r.label.is_none() {
            return Err(Error::contract(format!("record {i}: unlabeled anchor in labeled mode")));
        }
    }
    Ok(())
}

/// One feature vector per record.
pub fn extract_features(records: &[SensorRecord], config: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    check_records(records, config)?;
    let starts = window_starts(records, config.window);
    let mut prev_stats: Option<SegmentStats> = None;
    let mut rows = Vec::with_capacity(records.len());
    for (i, start) in starts.into_iter().enumerate() {
        let seg = Segment {
            records: &records[start..=i],
        };
        let stats = SegmentStats::of(&seg, config.antenna_count);
        let prev_ts = i.checked_sub(1).map(|p| records[p].timestamp);
        let mut row = instantaneous_features(&records[i], prev_ts, config.antenna_count);
        row.extend(contextual_features(&seg, config)?);
        row.extend(intersegment_features(prev_stats.as_ref(), &stats));
        prev_stats = Some(stats);
        rows.push(row);
    }
    Ok(rows)
}

pub fn extract_sequence(
    id: impl Into<String>,
    records: &[SensorRecord],
    config: &FeatureConfig,
    num_classes: usize,
) -> Result<LabeledSequence> {
    let labeled = FeatureConfig {
        labeled: true,
        ..config.clone()
    };
    let rows = extract_features(records, &labeled)?;
    let labels = records.iter().map(|r| r.label.expect("checked")).collect();
    LabeledSequence::from_rows(id, rows, labels, num_classes)
}
