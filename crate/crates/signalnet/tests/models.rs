use qsine_core::signal::make_dataset;
use qsine_core::{GenConfig, IqFrame, Snr};
use signalnet::data::frames_tensor;
use signalnet::train::{train_detection, train_estimator};
use signalnet::{DetectionModel, SignalNetModel, SinusoidEstimator, TrainConfig};

fn data(m: Option<usize>, count: usize, seed: u64) -> Vec<qsine_core::LabeledExample> {
    let cfg = GenConfig { fixed_m: m, snr: Snr::Uniform { min: 0.0, max: 10.0 }, seed, ..GenConfig::default() };
    make_dataset(&cfg, count).unwrap()
}

#[test]
fn bundle_round_trip_keeps_predictions() {
    let det = DetectionModel::<f32>::new(64, 5, 3, 1).unwrap();
    let ests = (1..=5).map(|m| SinusoidEstimator::<f32>::new(m, 3, 64, 10 + m as u64).unwrap()).collect();
    let model = SignalNetModel::new(det, ests).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("signalnet.b3.txt");
    model.save_bundle(&manifest).unwrap();
    let back = SignalNetModel::<f32>::load_bundle(&manifest).unwrap();
    let ex = data(None, 40, 2);
    let frames: Vec<&IqFrame> = ex.iter().map(|e| &e.x).collect();
    let x = frames_tensor(&frames).unwrap();
    assert_eq!(model.infer_batch(&x).unwrap(), back.infer_batch(&x).unwrap());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig { epochs: 2, batch: 16, seed: 5, ..TrainConfig::default() };
    let ex = data(Some(2), 96, 3);
    let (a, la) = train_estimator(&ex, 2, 3, &cfg).unwrap();
    let (b, lb) = train_estimator(&ex, 2, 3, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(la.to_csv(), lb.to_csv());

    let ex = data(None, 96, 4);
    let (c, _) = train_detection(&ex, 5, 3, &cfg).unwrap();
    let (d, _) = train_detection(&ex, 5, 3, &cfg).unwrap();
    assert_eq!(c.to_bytes(), d.to_bytes());
}

#[test]
fn bundle_rejects_mismatched_parts() {
    let det = DetectionModel::<f32>::new(64, 5, 3, 1).unwrap();
    let est = SinusoidEstimator::<f32>::new(1, 1, 64, 2).unwrap();
    assert!(SignalNetModel::new(det, vec![est]).is_err());
}
