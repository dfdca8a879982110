use proptest::prelude::*;

use dwcrf::data::subsample_positions;
use dwcrf::features::{extract_features, window_starts, FeatureConfig, SensorRecord};
use dwcrf::inference::forward_backward;
use dwcrf::model::{deserialize_model, serialize_model, ModelBundle};
use dwcrf::{CrfParameters, LabelAlphabet, LabeledSequence, PotentialTables, Standardizer, TrainingConfig};

/// Timestamps on a quarter-second grid so shifts by whole seconds stay exact.
fn records_strategy() -> impl Strategy<Value = Vec<SensorRecord>> {
    prop::collection::vec(
        (0u32..12, -2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64, prop::option::of((-90.0..-30.0f64, 0usize..4)), 0usize..3),
        1..40,
    )
    .prop_map(|rows| {
        let mut t = 0.0;
        rows.into_iter()
            .map(|(gap, af, av, al, tag, label)| {
                t += gap as f64 * 0.25;
                SensorRecord {
                    timestamp: t,
                    accel_frontal: af,
                    accel_vertical: av,
                    accel_lateral: al,
                    rssi: tag.map(|(r, _)| r),
                    antenna: tag.map(|(_, a)| a),
                    label: Some(label),
                    sex: 1,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn windows_hold_exactly_the_recent_records(records in records_strategy(), window in 0.5..6.0f64) {
        let starts = window_starts(&records, window);
        for (i, &s) in starts.iter().enumerate() {
            let expected = (0..=i)
                .find(|&j| records[i].timestamp - records[j].timestamp < window)
                .unwrap();
            prop_assert_eq!(s, expected);
        }
    }

    #[test]
    fn features_ignore_clock_offset(records in records_strategy(), shift in 0u32..100000) {
        let cfg = FeatureConfig::default();
        let shifted: Vec<SensorRecord> = records
            .iter()
            .cloned()
            .map(|mut r| {
                r.timestamp += shift as f64;
                r
            })
            .collect();
        prop_assert_eq!(extract_features(&records, &cfg).unwrap(), extract_features(&shifted, &cfg).unwrap());
    }

    #[test]
    fn feature_rows_have_declared_width(records in records_strategy(), m in 2usize..6) {
        let cfg = FeatureConfig { antenna_count: m, ..FeatureConfig::default() };
        let records: Vec<SensorRecord> = records
            .into_iter()
            .map(|mut r| {
                r.antenna = r.antenna.map(|a| a % m);
                r
            })
            .collect();
        let rows = extract_features(&records, &cfg).unwrap();
        prop_assert_eq!(rows.len(), records.len());
        prop_assert!(rows.iter().all(|r| r.len() == cfg.dim() && r.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn standardized_columns_are_centred_and_scaled(
        rows in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 3), 2..60),
        constant in -5.0..5.0f64,
    ) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.push(constant); r }).collect();
        let n = rows.len();
        let seq = LabeledSequence::from_rows("s", rows, vec![0; n], 2).unwrap();
        let s = Standardizer::fit(std::slice::from_ref(&seq)).unwrap();
        let out = s.apply(&seq).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = out.observations().iter().map(|x| x.values()[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            if s.scale[j] != 1.0 {
                prop_assert!((var - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(col.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn subsampler_keeps_run_heads(labels in prop::collection::vec(0usize..3, 0..200), n in 2usize..20, preserved in 0usize..3) {
        let kept = subsample_positions(&labels, n, preserved);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let mut expected = Vec::new();
        let mut run_start = 0;
        for t in 0..labels.len() {
            if t > 0 && labels[t] != labels[t - 1] {
                run_start = t;
            }
            if labels[t] == preserved || (t - run_start) % n == 0 {
                expected.push(t);
            }
        }
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn marginals_are_consistent(
        k in 2usize..5,
        t in 1usize..12,
        seed in prop::collection::vec(-4.0..4.0f64, 200),
    ) {
        let emis: Vec<Vec<f64>> = (0..t).map(|s| (0..k).map(|c| seed[(s * k + c) % 200]).collect()).collect();
        let trans: Vec<Vec<f64>> = (0..k).map(|a| (0..k).map(|b| seed[(150 + a * k + b) % 200]).collect()).collect();
        let pot = PotentialTables::new(emis, trans).unwrap();
        let (unary, pairwise) = forward_backward(&pot).unwrap();
        for s in 0..t {
            let total: f64 = (0..k).map(|c| unary.get(s, c)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            if s + 1 < t {
                for a in 0..k {
                    let out: f64 = (0..k).map(|b| pairwise.get(s, a, b)).sum();
                    let into: f64 = (0..k).map(|b| pairwise.get(s, b, a)).sum();
                    prop_assert!((out - unary.get(s, a)).abs() < 1e-12);
                    prop_assert!((into - unary.get(s + 1, a)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn model_document_round_trips_exactly(
        flat in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 3 * 3 + 3 * 2 + 3),
    ) {
        let bundle = ModelBundle {
            params: CrfParameters::from_flat(3, 2, &flat).unwrap(),
            alphabet: LabelAlphabet::new(["a", "b", "c"]).unwrap(),
            feature_names: vec!["x".into(), "y".into()],
            config: TrainingConfig::default(),
            provenance: serde_json::json!({"note": "property"}),
            standardizer: Some(Standardizer { mean: vec![flat[0], flat[1]], scale: vec![1.5, 0.25] }),
        };
        let doc = serialize_model(&bundle).unwrap();
        let back = deserialize_model(&doc).unwrap();
        prop_assert_eq!(back.params.to_flat(), flat);
        prop_assert_eq!(serialize_model(&back).unwrap(), doc);
    }
}
