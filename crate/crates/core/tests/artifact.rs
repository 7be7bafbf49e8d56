mod common;

use common::{random_tensor, rng};
use mambar_core::artifact::{
    extract_feature, feature_distance_map, log_histogram, norm_map, outlier_comparison_csv,
    outlier_summary, probe_features, select_by_norm, token_norms, trace_activations, write_pgm,
    ActivationTrace, FeatureSpec, ProbeConfig, Side, HISTOGRAM_BINS,
};
use mambar_core::data::{DatasetSpec, SyntheticDataset};
use mambar_core::mbrt::Container;
use mambar_core::model::{ModelConfig, PredictionMode, TapPoint, VisionMambaR};
use mambar_core::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        depth: 4,
        d: 16,
        n: 3,
        r: 1,
        patch: 4,
        img: 16,
        state_dim: 4,
        num_classes: 2,
        seed: 3,
        ..ModelConfig::micro()
    }
}

fn traced(cfg: ModelConfig, tap: TapPoint) -> (VisionMambaR<f64>, Tensor<f64>, ActivationTrace<f64>) {
    let model = VisionMambaR::<f64>::new(cfg).unwrap();
    let image = random_tensor(&mut rng(1), &model.image_shape(), 1.0);
    let (logits, trace) = trace_activations(&model, &image, tap).unwrap();
    (model, logits, trace)
}

#[test]
fn trace_has_one_entry_per_layer_and_does_not_change_logits() {
    for tap in [TapPoint::PostResidual, TapPoint::PreNorm] {
        let (model, logits, trace) = traced(small_config(), tap);
        assert_eq!(trace.depth(), 4);
        assert!(trace.layers.iter().all(|t| t.shape() == [16 + 3, 16]));
        let image = random_tensor(&mut rng(1), &model.image_shape(), 1.0);
        assert_eq!(model.logits(&image).unwrap(), logits);
    }
}

#[test]
fn trace_round_trips_through_container() {
    let (_, _, trace) = traced(small_config(), TapPoint::PreNorm);
    let bytes = trace.to_container().to_bytes().unwrap();
    let back = ActivationTrace::<f64>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, trace);
    assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
}

fn synthetic_trace(layers: Vec<Tensor<f64>>, m: usize, n: usize) -> ActivationTrace<f64> {
    ActivationTrace {
        layout: mambar_core::model::build_layout(m, n, mambar_core::model::PositionMode::Even),
        tap: TapPoint::PostResidual,
        layers,
    }
}

#[test]
fn norm_map_basics() {
    let zero = synthetic_trace(vec![Tensor::zeros(&[11, 5])], 9, 2);
    let report = norm_map(&zero, 0).unwrap();
    assert_eq!(report.grid, 3);
    assert!(report.norms.iter().all(|&v| v == 0.0));
    assert_eq!(report.histogram.counts.iter().sum::<usize>(), 9);

    let base = random_tensor(&mut rng(2), &[11, 5], 1.0);
    let trace = synthetic_trace(vec![base.clone()], 9, 2);
    let before = token_norms(&trace, 0).unwrap();
    let target = trace.layout.image_positions()[4];
    let mut scaled = base.clone();
    scaled.data_mut()[target * 5..(target + 1) * 5].iter_mut().for_each(|v| *v *= 10.0);
    let after = token_norms(&synthetic_trace(vec![scaled], 9, 2), 0).unwrap();
    for i in 0..9 {
        if i == 4 {
            assert!((after[i] - 10.0 * before[i]).abs() <= 1e-12 * after[i]);
        } else {
            assert_eq!(after[i], before[i]);
        }
    }
    assert!(norm_map(&trace, 1).is_err());
}

#[test]
fn register_rows_never_enter_the_map() {
    let base = random_tensor(&mut rng(3), &[20, 4], 1.0);
    let trace = synthetic_trace(vec![base.clone()], 16, 4);
    let mut loud = base;
    for k in trace.layout.register_positions() {
        loud.data_mut()[k * 4..(k + 1) * 4].iter_mut().for_each(|v| *v = 1e6);
    }
    let a = norm_map(&trace, 0).unwrap();
    let b = norm_map(&synthetic_trace(vec![loud], 16, 4), 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.norms.len(), 16);
}

#[test]
fn maps_match_scalar_loops() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (m, n, d) = (16, r.gen_range(0..5), r.gen_range(1..9));
        let t = random_tensor(&mut r, &[m + n, d], 3.0);
        let trace = synthetic_trace(vec![t.clone()], m, n);
        let global = common::random_vec(&mut r, d, -1.0, 1.0);
        let norms = norm_map(&trace, 0).unwrap().norms;
        let dist = feature_distance_map(&trace, 0, &global).unwrap();
        for (i, k) in trace.layout.image_positions().into_iter().enumerate() {
            let (mut sn, mut sd) = (0.0, 0.0);
            for j in 0..d {
                let v = t.data()[k * d + j];
                sn += v * v;
                sd += (v - global[j]) * (v - global[j]);
            }
            assert!((norms[i] - sn.sqrt()).abs() <= 1e-6 * sn.sqrt().max(1.0));
            assert!((dist[i] - sd.sqrt()).abs() <= 1e-6 * sd.sqrt().max(1.0));
        }
        assert_eq!(feature_distance_map(&trace, 0, &vec![0.0; d]).unwrap(), norms);
        let local = trace.image_rows(0).unwrap()[3].to_vec();
        assert_eq!(feature_distance_map(&trace, 0, &local).unwrap()[3], 0.0);
    }
}

#[test]
fn histograms_are_deterministic() {
    let norms = common::random_vec(&mut rng(5), 196, 0.0, 30.0);
    let a = serde_json::to_vec(&log_histogram(&norms, HISTOGRAM_BINS)).unwrap();
    let b = serde_json::to_vec(&log_histogram(&norms, HISTOGRAM_BINS)).unwrap();
    assert_eq!(a, b);
}

fn sort_oracle(norms: &[f64], p: f64, side: Side) -> Vec<usize> {
    let k = ((p * norms.len() as f64) - 1e-9).ceil() as usize;
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    // Stable sort keeps lower indices first among equal norms.
    match side {
        Side::Top => idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap()),
        Side::Bottom => idx.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap()),
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

proptest! {
    #[test]
    fn selection_matches_sort_oracle(
        norms in prop::collection::vec(prop_oneof![0.0f64..10.0, Just(1.0), Just(2.0)], 1..300),
        p in 0.001f64..=1.0,
    ) {
        for side in [Side::Top, Side::Bottom] {
            prop_assert_eq!(select_by_norm(&norms, p, side).unwrap(), sort_oracle(&norms, p, side));
        }
        prop_assert_eq!(select_by_norm(&norms, 1.0, Side::Top).unwrap().len(), norms.len());
    }

    #[test]
    fn top_selection_is_monotone(
        norms in prop::collection::vec(prop_oneof![0.0f64..10.0, Just(3.0)], 1..200),
        p1 in 0.001f64..=1.0,
        p2 in 0.001f64..=1.0,
    ) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let small = select_by_norm(&norms, lo, Side::Top).unwrap();
        let large = select_by_norm(&norms, hi, Side::Top).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }
}

fn two_class_set() -> SyntheticDataset {
    SyntheticDataset::generate(DatasetSpec {
        seed: 9,
        num_classes: 2,
        per_class: 40,
        side: 16,
        ..DatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn random_frozen_features_separate_two_classes() {
    let model = VisionMambaR::<f64>::new(small_config()).unwrap();
    let data = two_class_set();
    let cfg = ProbeConfig::default();
    let pooled = probe_features(&model, &data, FeatureSpec::GlobalPool, &cfg).unwrap();
    assert!(pooled.test_acc > 0.9, "{pooled:?}");
    let top_all = probe_features(&model, &data, FeatureSpec::TopNorm(1.0), &cfg).unwrap();
    assert_eq!(top_all, pooled);
    assert!(probe_features(&model, &data, FeatureSpec::MeanRegisters, &cfg).is_ok());
}

#[test]
fn register_features_need_registers() {
    let cfg = ModelConfig { n: 0, prediction_mode: PredictionMode::GlobalPool, ..small_config() };
    let model = VisionMambaR::<f64>::new(cfg).unwrap();
    let data = two_class_set();
    let err = probe_features(&model, &data, FeatureSpec::ClassToken, &ProbeConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let (_, trace) = trace_activations(&model, &data.image(0), TapPoint::PostResidual).unwrap();
    assert!(extract_feature(&trace, FeatureSpec::MeanRegisters).is_err());
    assert_eq!(extract_feature(&trace, FeatureSpec::BottomNorm(0.25)).unwrap().len(), 16);
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _, trace) = traced(small_config(), TapPoint::PostResidual);
    let report = norm_map(&trace, 3).unwrap();
    let pgm = dir.path().join("norm.pgm");
    write_pgm(&pgm, &report.norms, report.grid).unwrap();
    assert_eq!(std::fs::read(&pgm).unwrap().len(), "P5\n4 4\n255\n".len() + 16);
    assert_eq!(report.csv_rows().lines().count(), 16);
    assert!(report.csv_rows().starts_with("3,0,0,"));

    let images: Vec<Tensor<f64>> = (0..3).map(|s| random_tensor(&mut rng(s), &model.image_shape(), 1.0)).collect();
    let vim = VisionMambaR::<f64>::new(small_config().vim_baseline()).unwrap();
    let rows = vec![
        outlier_summary("vim", &vim, &images).unwrap(),
        outlier_summary("mambar", &model, &images).unwrap(),
    ];
    let csv = outlier_comparison_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("model,layer,images,outlier_fraction,mean_norm,max_norm\nvim,3,3,"));
}
