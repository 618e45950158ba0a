use hvgg::metrics::*;
use hvgg::model::ClassHierarchy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice = 0u64;
    for p in &pos {
        for n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    Some(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

#[test]
fn auc_examples() {
    let t = [true, true, false, false];
    assert_eq!(auc_ovr(&[0.9, 0.8, 0.1, 0.2], &t), Some(1.0));
    assert_eq!(auc_ovr(&[0.8, 0.2, 0.6, 0.4], &t), Some(0.5));
    assert_eq!(auc_ovr(&[0.3; 4], &t), Some(0.5));
    assert_eq!(auc_ovr(&[0.3, 0.4], &[true, true]), None);
    assert_eq!(auc_ovr(&[], &[]), None);
}

#[test]
fn auc_matches_pairwise_counting_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let n = rng.random_range(2..30);
        // Coarse score grid to force ties.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        assert_eq!(auc_ovr(&scores, &positive), pairwise_auc(&scores, &positive));
    }
}

#[test]
fn auc_equals_trapezoidal_roc_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8))).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        positive[0] = !positive[1];
        let pts = roc_points(&scores, &positive);
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((area - auc_ovr(&scores, &positive).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transforms(
        data in prop::collection::vec((0u8..8, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 7.0).collect();
        let positive: Vec<bool> = data.iter().map(|d| d.1).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 10.0).collect();
        prop_assert_eq!(auc_ovr(&scores, &positive), auc_ovr(&moved, &positive));
    }

    #[test]
    fn confusion_rows_sum_to_one_and_recall_is_diagonal(
        pairs in prop::collection::vec((0usize..7, 0usize..7), 1..200),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = confusion(&pred, &truth, 7).unwrap();
        let h = ClassHierarchy::default();
        let cross = cross_coarse_rows(&m.normalized, &h);
        for (i, row) in m.normalized.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if m.empty_rows.contains(&i) {
                prop_assert_eq!(s, 0.0);
                continue;
            }
            prop_assert!((s - 1.0).abs() < 1e-9);
            let prf = precision_recall_f1(&pred, &truth, i);
            prop_assert!((prf.recall - row[i]).abs() < 1e-12);
            let within: f64 = (0..7).filter(|&j| h.parent_of(j) == h.parent_of(i)).map(|j| row[j]).sum();
            prop_assert!((cross[i] + within - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ci_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..1.0, 1..15), seed in any::<u64>()) {
        let a = aggregate_ci(&v, CiMethod::Normal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(a, aggregate_ci(&v, CiMethod::Normal).unwrap());
    }
}

#[test]
fn per_class_accuracy_examples() {
    let truth = [0, 1, 2, 1, 0];
    for c in 0..3 {
        assert_eq!(per_class_accuracy(&truth, &truth, c), 1.0);
    }
    assert_eq!(per_class_accuracy(&[1, 0, 1], &[0, 1, 0], 0), 0.0);

    let pred = [0, 1, 1, 2, 2, 0, 1, 2, 0, 0];
    let truth = [0, 1, 2, 2, 1, 0, 0, 2, 1, 0];
    for c in 0..3 {
        let mut agree = 0;
        for i in 0..10 {
            if (pred[i] == c) == (truth[i] == c) {
                agree += 1;
            }
        }
        assert_eq!(per_class_accuracy(&pred, &truth, c), f64::from(agree) / 10.0);
    }
}

#[test]
fn precision_recall_f1_examples() {
    let perfect = precision_recall_f1(&[0, 1, 2], &[0, 1, 2], 1);
    assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

    // TP=3, FP=1, FN=2 for class 0.
    let pred = [0, 0, 0, 0, 1, 1, 1];
    let truth = [0, 0, 0, 1, 0, 0, 1];
    let p = precision_recall_f1(&pred, &truth, 0);
    assert_eq!(p.precision, 0.75);
    assert_eq!(p.recall, 0.6);
    assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);

    let half = precision_recall_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 0);
    assert_eq!((half.precision, half.recall, half.f1), (0.5, 0.5, 0.5));

    let none = precision_recall_f1(&[1, 1], &[1, 1], 0);
    assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    assert!(none.precision_undefined && none.recall_undefined);
    assert!(!perfect.precision_undefined && !perfect.recall_undefined);
}

#[test]
fn confusion_examples() {
    let truth: Vec<usize> = (0..7).chain(0..7).collect();
    let m = confusion(&truth, &truth, 7).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert_eq!(m.normalized[i][j], if i == j { 1.0 } else { 0.0 });
        }
        assert_eq!(m.counts[i][i], 2);
    }
    assert!(m.empty_rows.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 70_000;
    let truth: Vec<usize> = (0..n).map(|i| i % 7).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
    let m = confusion(&pred, &truth, 7).unwrap();
    for row in &m.normalized {
        for v in row {
            assert!((v - 1.0 / 7.0).abs() < 0.01, "{v}");
        }
    }
    assert!(confusion(&[7], &[0], 7).is_err());
    assert!(confusion(&[0, 1], &[0], 7).is_err());
}

#[test]
fn empty_rows_are_flagged() {
    let m = confusion(&[0, 1], &[0, 0], 3).unwrap();
    assert_eq!(m.empty_rows, vec![1, 2]);
    assert_eq!(m.normalized[0], vec![0.5, 0.5, 0.0]);
}

#[test]
fn cross_coarse_mass_examples() {
    let h = ClassHierarchy::default();
    // Rows under a 3-child parent leak 4/7, rows under 2-child parents 5/7:
    // (3 * 4/7 + 4 * 5/7) / 7 = 32/49.
    let uniform = vec![vec![1.0 / 7.0; 7]; 7];
    let rows = cross_coarse_rows(&uniform, &h);
    let expected_rows = [4.0, 4.0, 4.0, 5.0, 5.0, 5.0, 5.0].map(|v| v / 7.0);
    for (r, e) in rows.iter().zip(expected_rows) {
        assert!((r - e).abs() < 1e-12);
    }
    assert!((cross_coarse_mass(&uniform, &h) - 32.0 / 49.0).abs() < 1e-12);
    let identity: Vec<Vec<f64>> = (0..7).map(|i| (0..7).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    assert_eq!(cross_coarse_mass(&identity, &h), 0.0);
    let block: Vec<Vec<f64>> = (0..7)
        .map(|i| {
            let siblings: Vec<usize> = h.children(h.parent_of(i)).collect();
            (0..7).map(|j| if siblings.contains(&j) { 1.0 / siblings.len() as f64 } else { 0.0 }).collect()
        })
        .collect();
    assert_eq!(cross_coarse_mass(&block, &h), 0.0);
}

#[test]
fn ci_examples() {
    let same = aggregate_ci(&[0.1; 10], CiMethod::Normal).unwrap();
    assert_eq!(same.half_width, 0.0);
    assert_eq!(same.mean, 0.1);
    assert_eq!(aggregate_ci(&[0.1; 10], CiMethod::StudentT).unwrap().half_width, 0.0);

    let two = aggregate_ci(&[0.0, 1.0], CiMethod::Normal).unwrap();
    assert_eq!(two.mean, 0.5);
    let sd = 0.5f64.sqrt();
    assert!((two.half_width - 1.959963984540054 * sd / 2f64.sqrt()).abs() < 1e-12);
    assert!((two.half_width - 0.980).abs() < 1e-3);

    let t = aggregate_ci(&[0.0, 1.0], CiMethod::StudentT).unwrap();
    assert!((t.half_width - 12.706204736174707 * sd / 2f64.sqrt()).abs() < 1e-6);

    let tenths: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
    assert!((aggregate_ci(&tenths, CiMethod::Normal).unwrap().mean - 0.55).abs() < 1e-15);

    let one = aggregate_ci(&[0.7], CiMethod::Normal).unwrap();
    assert_eq!(one.half_width, 0.0);
    assert!(one.is_degenerate());
    assert!(aggregate_ci(&[], CiMethod::Normal).is_err());
    assert!(aggregate_ci(&[f64::NAN], CiMethod::Normal).is_err());
    assert_eq!("t".parse::<CiMethod>().unwrap(), CiMethod::StudentT);
    assert!("bogus".parse::<CiMethod>().is_err());
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_bundle(h: &ClassHierarchy, n: usize, skill: f64, rng: &mut ChaCha8Rng) -> PredictionBundle {
    let truth: Vec<usize> = (0..n).map(|i| i % 7).collect();
    let fine: Vec<Vec<f64>> = truth
        .iter()
        .map(|&t| {
            let logits: Vec<f64> = (0..7).map(|j| rng.random_range(0.0..1.0) + if j == t { skill } else { 0.0 }).collect();
            softmax(&logits)
        })
        .collect();
    let coarse = fine.iter().map(|f| h.lift_probs(f).unwrap()).collect();
    PredictionBundle::new(fine, coarse, truth, h).unwrap()
}

#[test]
fn bundle_validation() {
    let h = ClassHierarchy::default();
    let ok = vec![vec![1.0 / 7.0; 7]];
    let coarse = vec![vec![3.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0]];
    let b = PredictionBundle::new(ok.clone(), coarse.clone(), vec![5], &h).unwrap();
    assert_eq!(b.coarse_truth, vec![2]);
    assert!(PredictionBundle::new(vec![vec![0.5; 7]], coarse.clone(), vec![0], &h).is_err());
    assert!(PredictionBundle::new(ok.clone(), coarse.clone(), vec![0, 1], &h).is_err());
    assert!(PredictionBundle::new(ok.clone(), coarse.clone(), vec![9], &h).is_err());
    assert!(PredictionBundle::new(vec![], vec![], vec![], &h).is_err());
}

#[test]
fn evaluation_is_consistent() {
    let h = ClassHierarchy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_bundle(&h, 140, 1.0, &mut rng);
    let r = evaluate_bundle(&b, &h).unwrap();
    assert_eq!(r, evaluate_bundle(&b, &h).unwrap());
    assert_eq!(r.per_class.len(), 7);
    for (c, m) in r.per_class.iter().enumerate() {
        assert!((m.recall - r.confusion.normalized[c][c]).abs() < 1e-12);
        for v in [m.accuracy, m.auc.unwrap(), m.precision, m.recall, m.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(r.fine_accuracy, accuracy(&b.fine_predictions(), &b.fine_truth));
}

fn report(rng: &mut ChaCha8Rng) -> MetricsReport {
    let h = ClassHierarchy::default();
    let mut models = Vec::new();
    for (key, label, skill) in [("flat", "VGGNet", 0.6), ("hier", "H-VGGNet", 0.9)] {
        let runs: Vec<RunMetrics> = (0..10)
            .map(|_| evaluate_bundle(&random_bundle(&h, 70, skill, rng), &h).unwrap())
            .collect();
        models.push(summarize(key, label, &runs, &h, CiMethod::Normal).unwrap());
    }
    MetricsReport::new(&h, CiMethod::Normal, Some("abc".into()), models).unwrap()
}

fn is_cell(s: &str) -> bool {
    let Some((m, w)) = s.split_once(" ± ") else {
        return false;
    };
    let three = |x: &str| x.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 3 && x.parse::<f64>().is_ok());
    three(m) && three(w)
}

#[test]
fn report_has_table_layout() {
    let r = report(&mut ChaCha8Rng::seed_from_u64(3));
    let csv = r.metrics_csv().unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 9);
    assert_eq!(&header[2], "Celiac");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(&row[0], Metric::ALL[i / 2].label());
        assert_eq!(&row[1], ["VGGNet", "H-VGGNet"][i % 2]);
        for c in 2..9 {
            assert!(is_cell(&row[c]), "cell {:?}", &row[c]);
        }
    }
    for key in ["flat", "hier"] {
        let conf = r.confusion_csv(key).unwrap();
        let mut reader = csv::Reader::from_reader(conf.as_bytes());
        assert_eq!(reader.headers().unwrap().len(), 8);
        let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| (1..8).all(|c| is_cell(&r[c]))));
    }
    assert!(r.confusion_csv("other").is_err());
}

#[test]
fn report_json_round_trips() {
    let r = report(&mut ChaCha8Rng::seed_from_u64(5));
    let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn report_rejects_mismatched_classes() {
    let h = ClassHierarchy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let runs = vec![evaluate_bundle(&random_bundle(&h, 70, 1.0, &mut rng), &h).unwrap()];
    let mut s = summarize("flat", "VGGNet", &runs, &h, CiMethod::Normal).unwrap();
    s.classes.swap(0, 1);
    assert!(MetricsReport::new(&h, CiMethod::Normal, None, vec![s]).is_err());

    let other = ClassHierarchy::new(vec!["a".into()], vec!["x".into(), "y".into()], vec![0, 0]).unwrap();
    assert!(summarize("flat", "VGGNet", &runs, &other, CiMethod::Normal).is_err());
}

#[test]
fn report_writes_four_files() {
    let r = report(&mut ChaCha8Rng::seed_from_u64(7));
    let dir = tempfile::tempdir().unwrap();
    let files = r.write(dir.path()).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["metrics.csv", "metrics.json", "confusion_flat.csv", "confusion_hier.csv"]);
    for f in files {
        assert!(std::fs::metadata(f).unwrap().len() > 0);
    }
}
