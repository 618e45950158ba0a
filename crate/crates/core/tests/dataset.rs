use std::collections::{BTreeSet, HashSet};

use hvgg::dataset::{
    batch_indices, generate_synthetic, make_batches, split_by_patient, ImageSet, Manifest, ManifestRow, Split,
    SplitAssignment, SyntheticSpec, DEFAULT_RATIOS,
};
use hvgg::error::Error;
use hvgg::model::ClassHierarchy;
use hvgg::preprocess::to_grayscale;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(patient: &str, wsi: &str, fine: usize, h: &ClassHierarchy) -> ManifestRow {
    ManifestRow {
        patient_id: patient.into(),
        wsi_id: wsi.into(),
        image_path: format!("{wsi}.png"),
        coarse_label: h.coarse_names[h.parent_of(fine)].clone(),
        fine_label: h.fine_names[fine].clone(),
    }
}

/// Test-split slide counts per fine class (hierarchy order).
const TEST_WSIS: [usize; 7] = [104, 14, 65, 134, 45, 6, 5];

#[test]
fn manifest_of_held_out_slides_totals_373() {
    let h = ClassHierarchy::default();
    let mut rows = Vec::new();
    for (fine, &n) in TEST_WSIS.iter().enumerate() {
        for i in 0..n {
            rows.push(row(&format!("p{fine}-{}", i / 2), &format!("w{fine}-{i}"), fine, &h));
        }
    }
    let m = Manifest::new(rows, &h).unwrap();
    let mut buf = Vec::new();
    m.write(&mut buf).unwrap();
    let back = Manifest::from_reader(buf.as_slice(), &h).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.len(), 373);
    let header = String::from_utf8(buf).unwrap();
    assert!(header.starts_with("patient_id,wsi_id,image_path,coarse_label,fine_label\n"));
}

#[test]
fn manifest_rejects_bad_input() {
    let h = ClassHierarchy::default();
    assert!(matches!(Manifest::from_reader("".as_bytes(), &h), Err(Error::Data(_))));
    let header = "patient_id,wsi_id,image_path,coarse_label,fine_label\n";
    assert!(matches!(Manifest::from_reader(header.as_bytes(), &h), Err(Error::Data(_))));

    let wrong = format!("{header}a,w1,x.png,Ileum,Crohn's\nb,w2,y.png,Duodenum,Crohn's\n");
    let msg = Manifest::from_reader(wrong.as_bytes(), &h).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("Ileum"), "{msg}");

    let dup = format!("{header}a,w1,x.png,Ileum,Crohn's\nb,w1,y.png,Ileum,Crohn's\n");
    let msg = Manifest::from_reader(dup.as_bytes(), &h).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("w1"), "{msg}");

    let unknown = format!("{header}a,w1,x.png,Colon,Colitis\n");
    assert!(Manifest::from_reader(unknown.as_bytes(), &h).is_err());

    let swapped = "wsi_id,patient_id,image_path,coarse_label,fine_label\na,w1,x.png,Ileum,Crohn's\n";
    assert!(Manifest::from_reader(swapped.as_bytes(), &h).unwrap_err().to_string().contains("header"));

    let short = format!("{header}a,w1,x.png,Ileum\n");
    assert!(Manifest::from_reader(short.as_bytes(), &h).unwrap_err().to_string().contains("line 2"));
}

#[test]
fn ten_single_slide_patients_split_five_two_three() {
    let h = ClassHierarchy::default();
    let rows = (0..10).map(|i| row(&format!("p{i}"), &format!("w{i}"), i % 7, &h)).collect();
    let m = Manifest::new(rows, &h).unwrap();
    for seed in 0..20 {
        let s = split_by_patient(&m, DEFAULT_RATIOS, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(s.wsi_counts(&m).unwrap(), [5, 2, 3]);
    }
}

#[test]
fn split_preconditions() {
    let h = ClassHierarchy::default();
    let rows = (0..6).map(|i| row(&format!("p{}", i % 2), &format!("w{i}"), 0, &h)).collect();
    let two_patients = Manifest::new(rows, &h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(split_by_patient(&two_patients, DEFAULT_RATIOS, &mut rng).is_err());

    let rows = (0..6).map(|i| row(&format!("p{i}"), &format!("w{i}"), 0, &h)).collect();
    let m = Manifest::new(rows, &h).unwrap();
    assert!(matches!(split_by_patient(&m, [0.5, 0.2, 0.2], &mut rng), Err(Error::Config(_))));
    assert!(split_by_patient(&m, [1.2, -0.2, 0.0], &mut rng).is_err());
}

fn random_manifest(rng: &mut ChaCha8Rng, h: &ClassHierarchy) -> Manifest {
    let patients = rng.random_range(30..200);
    let mut rows = Vec::new();
    for p in 0..patients {
        let fine = rng.random_range(0..h.num_fine());
        for _ in 0..rng.random_range(1..=3) {
            let wsi = format!("w{}", rows.len());
            rows.push(row(&format!("p{p}"), &wsi, fine, h));
        }
    }
    Manifest::new(rows, h).unwrap()
}

#[test]
fn random_manifests_split_without_overlap_near_target() {
    let h = ClassHierarchy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = random_manifest(&mut rng, &h);
        let s = split_by_patient(&m, DEFAULT_RATIOS, &mut rng).unwrap();
        // Each slide's patient maps to one split, and every patient is covered.
        let mut seen: [HashSet<&str>; 3] = Default::default();
        for (r, sp) in m.rows().iter().zip(s.row_splits(&m).unwrap()) {
            seen[sp.index()].insert(&r.patient_id);
        }
        assert!(seen[0].is_disjoint(&seen[1]) && seen[0].is_disjoint(&seen[2]) && seen[1].is_disjoint(&seen[2]));
        assert_eq!(seen.iter().map(HashSet::len).sum::<usize>(), s.patients.len());
        for (got, want) in s.wsi_fractions(&m).unwrap().iter().zip(DEFAULT_RATIOS) {
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst <= 0.05, "worst fraction error {worst}");
}

#[test]
fn split_csv_round_trip_and_class_counts() {
    let h = ClassHierarchy::default();
    let m = random_manifest(&mut ChaCha8Rng::seed_from_u64(1), &h);
    let s = split_by_patient(&m, DEFAULT_RATIOS, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let again = split_by_patient(&m, DEFAULT_RATIOS, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(s, again);
    let mut buf = Vec::new();
    s.write(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("patient_id,split\n"));
    assert!(text.contains(",development\n") && text.contains(",test\n") && text.contains(",train\n"));
    assert_eq!(SplitAssignment::read(text.as_bytes()).unwrap(), s);
    let twice = "patient_id,split\np1,train\np1,test\n";
    assert!(SplitAssignment::read(twice.as_bytes()).is_err());

    let per_class = s.class_counts(&m, h.num_fine()).unwrap();
    let totals = s.wsi_counts(&m).unwrap();
    for sp in Split::ALL {
        assert_eq!(per_class.iter().map(|c| c[sp.index()]).sum::<usize>(), totals[sp.index()]);
    }
}

#[test]
fn batches_drop_short_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = batch_indices(100, 32, &mut rng).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [32, 32, 32]);
    let flat: Vec<usize> = b.concat();
    assert_eq!(flat.iter().collect::<BTreeSet<_>>().len(), 96);
    assert_eq!(b, batch_indices(100, 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    assert_eq!(batch_indices(5, 8, &mut rng).unwrap().concat().len(), 5);
    assert!(batch_indices(1, 8, &mut rng).unwrap().is_empty());
    assert!(batch_indices(0, 8, &mut rng).is_err());
    assert!(batch_indices(10, 1, &mut rng).is_err());

    let h = ClassHierarchy::default();
    let set = ImageSet::<f64>::new([1, 1, 2], (0..20).map(f64::from).collect(), vec![0; 10], vec![1; 10], &h).unwrap();
    let batches = make_batches(&set, 4, &mut rng).unwrap();
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[0].images.shape(), &[4, 1, 1, 2]);
}

#[test]
fn synthetic_counts_and_patients() {
    let spec = SyntheticSpec::default();
    let corpus = generate_synthetic(&spec).unwrap();
    let m = &corpus.manifest;
    assert_eq!(m.len(), 350);
    assert_eq!(corpus.images.len(), 350);
    let fine: BTreeSet<_> = m.rows().iter().map(|r| &r.fine_label).collect();
    let coarse: BTreeSet<_> = m.rows().iter().map(|r| &r.coarse_label).collect();
    assert_eq!((fine.len(), coarse.len()), (7, 3));
    let sizes = m.patient_sizes();
    assert!(sizes.values().all(|&n| (1..=3).contains(&n)));
    assert!(sizes.values().any(|&n| n > 1));
    assert!(corpus.images.iter().all(|i| i.dimensions() == (32, 32)));
    // Enough patients for a grouped split.
    split_by_patient(m, DEFAULT_RATIOS, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
}

#[test]
fn synthetic_zero_noise_repeats_within_class() {
    let spec = SyntheticSpec {
        noise: 0.0,
        samples_per_class: 4,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    for class in c.images.chunks(4) {
        assert!(class.iter().all(|i| i == &class[0]));
    }
    assert_ne!(c.images[0], c.images[4]);
}

#[test]
fn synthetic_is_reproducible_and_seed_dependent() {
    let spec = SyntheticSpec {
        samples_per_class: 5,
        blank_margin: 0.25,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.manifest, b.manifest);
    let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
    assert_ne!(a.images, c.images);

    // The right quarter is near-white background.
    let img = &a.images[0];
    for y in 0..32 {
        for x in 24..32 {
            assert!(img.get_pixel(x, y).0.iter().all(|&v| v >= 200));
        }
        assert!(img.get_pixel(0, y).0[0] < 200);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = a.write(dir.path()).unwrap();
    let h = ClassHierarchy::default();
    let back = Manifest::load(&path, &h).unwrap();
    assert_eq!(back, a.manifest);
    let first = image::open(dir.path().join(&back.rows()[0].image_path)).unwrap().to_rgb8();
    assert_eq!(&first, img);
}

#[test]
fn synthetic_spec_validation() {
    let base = SyntheticSpec::default();
    for bad in [
        SyntheticSpec { width: 2, ..base.clone() },
        SyntheticSpec { samples_per_class: 0, ..base.clone() },
        SyntheticSpec { noise: -1.0, ..base.clone() },
        SyntheticSpec { blank_margin: 1.0, ..base.clone() },
        SyntheticSpec { pattern_scale: 0.0, ..base.clone() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(Error::InvalidSpec(_))));
    }
}

/// Ridge least-squares one-vs-rest probe, solved in the dual since there are
/// fewer examples than pixels. Returns held-out accuracy.
fn probe_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let features = |x: &[f64]| x.iter().copied().chain([1.0]).collect::<Vec<_>>();
    let d = train[0].0.len() + 1;
    let x = DMatrix::from_row_iterator(train.len(), d, train.iter().flat_map(|(v, _)| features(v)));
    let mut y = DMatrix::zeros(train.len(), classes);
    for (i, (_, c)) in train.iter().enumerate() {
        y[(i, *c)] = 1.0;
    }
    let gram = &x * x.transpose() + DMatrix::identity(train.len(), train.len()) * 1e-3;
    let alpha = gram.cholesky().expect("ridge gram is positive definite").solve(&y);
    let w = x.transpose() * alpha;
    let correct = test
        .iter()
        .filter(|(v, c)| {
            let scores = DVector::from_vec(features(v)).transpose() * &w;
            scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == *c
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_probe_finds_families_but_not_fine_classes() {
    let spec = SyntheticSpec::default();
    let h = &spec.hierarchy;
    let corpus = generate_synthetic(&spec).unwrap();
    let pixels: Vec<Vec<f64>> = corpus
        .images
        .iter()
        .map(|i| to_grayscale(i).pixels().map(|p| p.0[0] as f64 / 255.0).collect())
        .collect();
    let per = spec.samples_per_class;
    let held_out = |i: usize| i % per >= per * 7 / 10;

    let coarse: Vec<(Vec<f64>, usize)> = (0..pixels.len()).map(|i| (pixels[i].clone(), h.parent_of(i / per))).collect();
    let (test, train): (Vec<_>, Vec<_>) = coarse.into_iter().enumerate().partition(|(i, _)| held_out(*i));
    let strip = |v: Vec<(usize, (Vec<f64>, usize))>| v.into_iter().map(|p| p.1).collect::<Vec<_>>();
    let coarse_acc = probe_accuracy(&strip(train), &strip(test), h.num_coarse());
    assert!(coarse_acc > 0.9, "coarse probe accuracy {coarse_acc}");

    let (mut correct, mut total) = (0.0, 0.0);
    for family in 0..h.num_coarse() {
        let children: Vec<usize> = h.children(family).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (rank, &f) in children.iter().enumerate() {
            for i in f * per..(f + 1) * per {
                let ex = (pixels[i].clone(), rank);
                if held_out(i) { test.push(ex) } else { train.push(ex) }
            }
        }
        let acc = probe_accuracy(&train, &test, children.len());
        correct += acc * test.len() as f64;
        total += test.len() as f64;
    }
    let fine_acc = correct / total;
    assert!(fine_acc < 0.9, "fine-within-family probe accuracy {fine_acc}");
    assert!(coarse_acc > fine_acc);
}
