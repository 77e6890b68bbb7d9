use mctnet::data::{ChangeKind, ChangeSample, Region, ShapeKind, SizeClass};
use mctnet::metrics::{confusion, metrics, size_stratified_metrics, ConfusionCounts, MetricsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_fixture_nine_one_nine_eighty_one() {
    // 9 TP, 1 FP, 9 FN, 81 TN laid out over 100 pixels
    let mut pred = vec![0u8; 100];
    let mut truth = vec![0u8; 100];
    pred[..10].fill(1);
    truth[..9].fill(1);
    truth[10..19].fill(1);
    let c = confusion(&pred, &truth).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 9, fp: 1, fn_: 9, tn: 81 });
    let m = metrics(&c);
    assert!((m.precision - 0.9).abs() <= 1e-12);
    assert!((m.recall - 0.5).abs() <= 1e-12);
    assert!((m.f1 - 9.0 / 14.0).abs() <= 1e-12);
    assert!((m.oa - 0.9).abs() <= 1e-12);
}

#[test]
fn perfect_prediction_scores_one() {
    let truth: Vec<u8> = (0..50).map(|i| u8::from(i % 3 == 0)).collect();
    let m = metrics(&confusion(&truth, &truth).unwrap());
    assert_eq!((m.precision, m.recall, m.f1, m.oa), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn degenerate_predictions() {
    let truth = [1u8, 0, 0, 1];
    let none = metrics(&confusion(&[0; 4], &truth).unwrap());
    assert_eq!((none.precision, none.recall, none.f1, none.oa), (0.0, 0.0, 0.0, 0.5));
    let all = metrics(&confusion(&[1; 4], &truth).unwrap());
    assert_eq!((all.precision, all.recall, all.oa), (0.5, 1.0, 0.5));
    assert!((all.f1 - 2.0 / 3.0).abs() <= 1e-12);
    let empty = metrics(&confusion(&[0; 4], &[0; 4]).unwrap());
    assert_eq!((empty.precision, empty.recall, empty.f1, empty.oa), (0.0, 0.0, 0.0, 1.0));
}

#[test]
fn size_or_value_errors() {
    assert_eq!(confusion(&[0, 1], &[0]), Err(MetricsError::ShapeMismatch { pred: 2, truth: 1 }));
    assert_eq!(confusion(&[0], &[3]), Err(MetricsError::NotBinary(3)));
}

#[test]
fn random_predictor_matches_expected_values() {
    let (n, prevalence, rate) = (100_000usize, 0.2, 0.3);
    let positives = (n as f64 * prevalence) as usize;
    let truth: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(rate))).collect();
    let m = metrics(&confusion(&pred, &truth).unwrap());

    let (np, nn) = (positives as f64, (n - positives) as f64);
    let var = rate * (1.0 - rate);
    let recall_sd = (var / np).sqrt();
    let predicted = rate * n as f64;
    let precision_sd = (prevalence * (1.0 - prevalence) / predicted).sqrt();
    let oa = rate * prevalence + (1.0 - rate) * (1.0 - prevalence);
    let oa_sd = (oa * (1.0 - oa) / n as f64).sqrt();
    // F1 = 2 TP / (P + TP + FP), linearised around the means
    let (tp, fp) = (rate * np, rate * nn);
    let d = np + tp + fp;
    let f1 = 2.0 * tp / d;
    let f1_sd = ((2.0 * (np + fp) / (d * d)).powi(2) * np * var + (2.0 * tp / (d * d)).powi(2) * nn * var).sqrt();

    for (name, got, want, sd) in [
        ("recall", m.recall, rate, recall_sd),
        ("precision", m.precision, prevalence, precision_sd),
        ("oa", m.oa, oa, oa_sd),
        ("f1", m.f1, f1, f1_sd),
    ] {
        assert!((got - want).abs() <= 3.0 * sd, "{name}: {got} vs {want} +- {}", 3.0 * sd);
    }
}

fn strip(regions: &[(usize, usize, SizeClass)]) -> ChangeSample {
    let width = regions.iter().map(|r| r.1).max().unwrap_or(0) + 2;
    let mut mask = vec![0u8; width];
    let mut region_map = vec![0u16; width];
    let mut out = Vec::new();
    for (k, &(start, end, class)) in regions.iter().enumerate() {
        mask[start..end].fill(1);
        region_map[start..end].fill(k as u16 + 1);
        out.push(Region {
            center: (0, ((start + end) / 2) as i64),
            radius: (end - start) / 2,
            size_class: class,
            shape: ShapeKind::Rect,
            kind: ChangeKind::Added,
            pixels: end - start,
        });
    }
    ChangeSample {
        height: 1,
        width,
        image_t1: vec![0.0; width * 3],
        image_t2: vec![0.0; width * 3],
        mask,
        region_map,
        regions: out,
    }
}

#[test]
fn region_counts_as_detected_at_half_overlap() {
    let s = strip(&[(0, 4, SizeClass::Small), (4, 10, SizeClass::Medium)]);
    s.validate().unwrap();
    let mut pred = vec![0u8; s.width];
    pred[1..3].fill(1); // 2 of 4
    pred[4..6].fill(1); // 2 of 6
    let by = size_stratified_metrics(&[pred.clone()], &[s.clone()]).unwrap();
    assert_eq!((by[&SizeClass::Small].regions, by[&SizeClass::Small].detected), (1, 1));
    assert_eq!((by[&SizeClass::Medium].regions, by[&SizeClass::Medium].detected), (1, 0));
    assert!(!by.contains_key(&SizeClass::Large));
    pred[6] = 1; // 3 of 6
    let by = size_stratified_metrics(&[pred], &[s]).unwrap();
    assert_eq!(by[&SizeClass::Medium].recall(), 1.0);
}

#[test]
fn region_recall_pools_samples() {
    let a = strip(&[(0, 2, SizeClass::Small), (3, 5, SizeClass::Small)]);
    let b = strip(&[(1, 3, SizeClass::Small)]);
    let pa = vec![1, 1, 0, 0, 0, 0, 0];
    let pb = vec![0, 0, 0, 0, 0];
    let by = size_stratified_metrics(&[pa, pb], &[a, b]).unwrap();
    assert_eq!((by[&SizeClass::Small].regions, by[&SizeClass::Small].detected), (3, 1));
    assert!((by[&SizeClass::Small].recall() - 1.0 / 3.0).abs() <= 1e-15);
}
