use hvgg::autodiff::{HasParams, Mode, ParamStore, Tape};
use hvgg::dataset::ImageSet;
use hvgg::model::{Architecture, ClassHierarchy, ModelSpec, Network};
use hvgg::training::{
    hierarchical_loss, multi_run, rmsprop_step, train, LossWeightSchedule, LrSchedule, RmsPropState, Splits,
    TrainConfig,
};
use hvgg::{Scalar, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `-ln softmax(z)[t]` summed directly in f64.
fn ce_oracle(row: &[f64], t: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    -((row[t] - m).exp() / z).ln()
}

fn loss_oracle(heads: &[Vec<Vec<f64>>], targets: &[Vec<usize>], weights: &[f64]) -> f64 {
    let n = targets[0].len() as f64;
    let mut total = 0.0;
    for ((rows, t), w) in heads.iter().zip(targets).zip(weights) {
        let ce: f64 = rows.iter().zip(t).map(|(r, &ti)| ce_oracle(r, ti)).sum();
        total += w * ce / n;
    }
    total
}

fn loss_on_tape<T: Scalar>(heads: &[Vec<Vec<f64>>], targets: &[Vec<usize>], weights: &[f64]) -> f64 {
    let store = ParamStore::<T>::new();
    let mut tape = Tape::new(&store);
    let vars: Vec<_> = heads
        .iter()
        .map(|rows| {
            let flat: Vec<f64> = rows.concat();
            tape.constant(Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).unwrap())
        })
        .collect();
    let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let l = hierarchical_loss(&mut tape, &vars, &t, weights).unwrap();
    tape.value(l).item().unwrap().f64()
}

fn random_instance(r: &mut ChaCha8Rng, cast32: bool) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>, Vec<f64>) {
    let n = r.random_range(1..6);
    let mut heads = Vec::new();
    let mut targets = Vec::new();
    for classes in [3usize, 7] {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..classes)
                    .map(|_| {
                        let v: f64 = r.random_range(-4.0..4.0);
                        // Feed the oracle exactly the values the 32-bit tape sees.
                        if cast32 { v as f32 as f64 } else { v }
                    })
                    .collect()
            })
            .collect();
        heads.push(rows);
        targets.push((0..n).map(|_| r.random_range(0..classes)).collect());
    }
    let w0: f64 = r.random_range(0.0..1.0);
    let w = if cast32 { vec![w0 as f32 as f64, (1.0 - w0) as f32 as f64] } else { vec![w0, 1.0 - w0] };
    (heads, targets, w)
}

#[test]
fn loss_worked_example() {
    let heads = vec![vec![vec![2.0, 0.0, 0.0]], vec![vec![0.0; 7]]];
    let targets = vec![vec![0], vec![3]];
    let expected = 0.5 * (1.0 + 2.0 * (-2.0f64).exp()).ln() + 0.5 * 7f64.ln();
    assert!((expected - 1.0927).abs() < 1e-4);
    let got = loss_on_tape::<f64>(&heads, &targets, &[0.5, 0.5]);
    assert!((got - expected).abs() < 1e-12, "{got}");
}

#[test]
fn loss_of_confident_correct_predictions_is_zero() {
    let heads = vec![vec![vec![1000.0, 0.0, 0.0]], vec![vec![0.0, 0.0, 0.0, 0.0, 0.0, 1000.0, 0.0]]];
    let got = loss_on_tape::<f64>(&heads, &[vec![0], vec![5]], &[0.3, 0.7]);
    assert_eq!(got, 0.0);
}

#[test]
fn loss_matches_oracle_on_random_instances() {
    let mut r = rng(1);
    for _ in 0..100 {
        let (h, t, w) = random_instance(&mut r, false);
        let a = loss_on_tape::<f64>(&h, &t, &w);
        assert!((a - loss_oracle(&h, &t, &w)).abs() < 1e-12);
        let (h, t, w) = random_instance(&mut r, true);
        let a = loss_on_tape::<f32>(&h, &t, &w);
        let o = loss_oracle(&h, &t, &w);
        assert!((a - o).abs() < 1e-6, "{a} vs {o}");
    }
}

#[test]
fn fine_only_weights_equal_plain_cross_entropy() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (h, t, _) = random_instance(&mut r, false);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::from_f64(&[h[0].len(), 3], &h[0].concat()).unwrap());
        let f = tape.constant(Tensor::from_f64(&[h[1].len(), 7], &h[1].concat()).unwrap());
        let l = hierarchical_loss(&mut tape, &[c, f], &[&t[0], &t[1]], &[0.0, 1.0]).unwrap();
        let plain = tape.cross_entropy(f, &t[1]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), tape.value(plain).item().unwrap());
    }
}

#[test]
fn loss_is_linear_in_weights() {
    let mut r = rng(3);
    for _ in 0..50 {
        let (h, t, w) = random_instance(&mut r, false);
        let e0 = loss_on_tape::<f64>(&h, &t, &[1.0, 0.0]);
        let e1 = loss_on_tape::<f64>(&h, &t, &[0.0, 1.0]);
        let mixed = loss_on_tape::<f64>(&h, &t, &w);
        assert!((mixed - (w[0] * e0 + w[1] * e1)).abs() < 1e-9);
    }
}

#[test]
fn loss_argument_errors() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let c = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let f = tape.constant(Tensor::zeros(&[2, 7]).unwrap());
    assert!(hierarchical_loss(&mut tape, &[c, f], &[&[0, 1]], &[0.5, 0.5]).is_err());
    assert!(hierarchical_loss(&mut tape, &[c, f], &[&[0, 1], &[0, 1]], &[1.0]).is_err());
    assert!(hierarchical_loss(&mut tape, &[c, f], &[&[0, 3], &[0, 1]], &[0.5, 0.5]).is_err());
}

#[test]
fn schedule_anchor_values() {
    let w = LossWeightSchedule::default();
    assert_eq!(w.weights_at(1), &[0.98, 0.02]);
    assert_eq!(w.weights_at(5), &[0.30, 0.70]);
    assert_eq!(w.weights_at(7), &[0.30, 0.70]);
    assert_eq!(w.weights_at(10), &[0.10, 0.90]);
    assert_eq!(w.weights_at(15), &[0.00, 1.00]);
    assert_eq!(w.weights_at(20), &[0.00, 1.00]);
    let lr = LrSchedule::default();
    assert_eq!(lr.lr_at(1), 1e-3);
    assert_eq!(lr.lr_at(10), 1e-3);
    assert_eq!(lr.lr_at(11), 5e-4);
    assert_eq!(lr.lr_at(15), 5e-4);
    assert_eq!(lr.lr_at(16), 1e-4);
}

proptest! {
    #[test]
    fn schedules_are_step_functions(epoch in 1usize..200) {
        let w = LossWeightSchedule::default();
        let lr = LrSchedule::default();
        // The value at `epoch` is the one of the latest anchor at or before it.
        let anchor = w.anchors().iter().rev().find(|a| a.0 <= epoch).unwrap();
        prop_assert_eq!(w.weights_at(epoch), anchor.1.as_slice());
        let anchor = lr.anchors().iter().rev().find(|a| a.0 <= epoch).unwrap();
        prop_assert_eq!(lr.lr_at(epoch), anchor.1);
        // Between anchors nothing changes.
        let next_anchor = w.anchors().iter().any(|a| a.0 == epoch + 1);
        if !next_anchor {
            prop_assert_eq!(w.weights_at(epoch), w.weights_at(epoch + 1));
        }
    }
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("theta", Tensor::from_f64(&[1], &[v]).unwrap());
    s
}

/// Gradients of `sum(k * theta)` so the gradient is exactly `k`.
fn linear_grads(store: &ParamStore<f64>, k: f64) -> hvgg::autodiff::Gradients<f64> {
    let mut tape = Tape::new(store);
    let id = store.ids().next().unwrap();
    let p = tape.param(id);
    let y = tape.scale(p, k);
    let l = tape.sum(y);
    tape.backward(l).unwrap()
}

#[test]
fn rmsprop_single_step_oracle() {
    let mut store = scalar_store(0.0);
    let mut state = RmsPropState::new(&store);
    let g = linear_grads(&store, 1.0);
    rmsprop_step(&mut store, &g, &mut state, 0.1).unwrap();
    assert!((state.accumulator(0)[0] - 0.1).abs() < 1e-15);
    let expected = -0.1 / (0.1f64.sqrt() + 1e-8);
    let got = store.value(store.ids().next().unwrap()).data()[0];
    assert!((got - expected).abs() < 1e-12 && (got + 0.3162).abs() < 1e-4, "{got}");
}

#[test]
fn rmsprop_zero_gradient_is_noop() {
    let mut store = scalar_store(1.25);
    let mut state = RmsPropState::new(&store);
    let g = linear_grads(&store, 0.0);
    rmsprop_step(&mut store, &g, &mut state, 0.1).unwrap();
    assert_eq!(store.value(store.ids().next().unwrap()).data()[0], 1.25);
}

#[test]
fn rmsprop_descends_quadratic() {
    let mut store = scalar_store(1.0);
    let mut state = RmsPropState::new(&store);
    let id = store.ids().next().unwrap();
    let f = |s: &ParamStore<f64>| s.value(id).data()[0].powi(2);
    let before = f(&store);
    let grads = {
        let mut tape = Tape::new(&store);
        let p = tape.param(id);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap()
    };
    rmsprop_step(&mut store, &grads, &mut state, 1e-3).unwrap();
    assert!(f(&store) < before);
}

#[test]
fn rmsprop_rejects_non_finite_gradient() {
    let mut store = scalar_store(1.0);
    let mut state = RmsPropState::new(&store);
    let g = linear_grads(&store, f64::NAN);
    let e = rmsprop_step(&mut store, &g, &mut state, 0.1).unwrap_err();
    assert!(e.to_string().contains("theta"), "{e}");
    assert_eq!(store.value(store.ids().next().unwrap()).data()[0], 1.0);
}

#[test]
fn zero_coarse_weight_gives_exactly_zero_branch_gradient() {
    let spec = ModelSpec::desk();
    let net = Network::<f32>::build_hierarchical(&spec, &mut rng(4)).unwrap();
    let x = Tensor::<f32>::randn(&[4, 1, 32, 32], 1.0, &mut rng(5)).unwrap();
    let mut tape = Tape::new(net.params());
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, xv, Mode::Train, &mut rng(6)).unwrap();
    let l = hierarchical_loss(&mut tape, &out.heads.levels(), &[&[0, 1, 2, 2], &[0, 3, 5, 6]], &[0.0, 1.0]).unwrap();
    let g = tape.backward(l).unwrap();
    let branch = net.branch_params();
    assert!(!branch.is_empty());
    for id in branch {
        assert!(g.param(id).unwrap().data().iter().all(|&v| v == 0.0));
    }
    // The trunk still learns.
    let trunk = net.trunk_params()[0];
    assert!(g.param(trunk).unwrap().data().iter().any(|&v| v != 0.0));
}

/// Each fine class lights a distinct 8x8 square on a dark background.
fn squares_set(per_class: usize, seed: u64) -> ImageSet<f32> {
    let h = ClassHierarchy::default();
    let mut r = rng(seed);
    let (mut pixels, mut coarse, mut fine) = (Vec::new(), Vec::new(), Vec::new());
    for f in 0..7 {
        for _ in 0..per_class {
            let (oy, ox) = ((f / 4) * 16 + 4, (f % 4) * 8);
            for y in 0..32 {
                for x in 0..32 {
                    let on = (oy..oy + 8).contains(&y) && (ox..ox + 8).contains(&x);
                    let noise: f32 = r.random_range(-0.1..0.1);
                    pixels.push(if on { 1.0 } else { 0.0 } + noise);
                }
            }
            coarse.push(h.parent_of(f));
            fine.push(f);
        }
    }
    ImageSet::new([1, 32, 32], pixels, coarse, fine, &h).unwrap()
}

fn small_config(epochs: usize, runs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        runs,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn training_descends_and_logs() {
    let data = squares_set(6, 7);
    let dev = squares_set(2, 8);
    let spec = ModelSpec::desk();
    let config = small_config(4, 1);
    let mut net = Network::<f32>::build_hierarchical(&spec, &mut rng(9)).unwrap();
    let logs = train(&mut net, &data, Some(&dev), &config, 0, &mut rng(10)).unwrap();
    assert_eq!(logs.len(), 4);
    assert!(logs.last().unwrap().train_loss < logs[0].train_loss, "{logs:?}");
    assert_eq!(logs[0].loss_weights, vec![0.98, 0.02]);
    assert_eq!(logs[0].lr, 1e-3);
    assert!(logs[0].dev_fine_acc.is_some());

    let mut flat = Network::<f32>::build_flat(&spec, &mut rng(9)).unwrap();
    let flogs = train(&mut flat, &data, None, &config, 0, &mut rng(10)).unwrap();
    assert_eq!(flogs[0].loss_weights, vec![1.0]);
    assert!(flogs[0].dev_loss.is_none());
}

#[test]
fn training_is_deterministic() {
    let data = squares_set(3, 12);
    let config = small_config(2, 1);
    let run = || {
        let mut net = Network::<f32>::build_hierarchical(&ModelSpec::desk(), &mut rng(13)).unwrap();
        let logs = train(&mut net, &data, Some(&data), &config, 0, &mut rng(14)).unwrap();
        (serde_json::to_string(&logs).unwrap(), net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    for ((_, pa), (_, pb)) in na.params().iter().zip(nb.params().iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
}

#[test]
fn training_rejects_bad_config() {
    let data = squares_set(1, 15);
    let mut net = Network::<f32>::build_hierarchical(&ModelSpec::desk(), &mut rng(16)).unwrap();
    let mut config = small_config(1, 1);
    config.batch_size = 1;
    assert!(train(&mut net, &data, None, &config, 0, &mut rng(0)).is_err());
    config.batch_size = 4;
    config.loss_weights = LossWeightSchedule::single_level();
    assert!(train(&mut net, &data, None, &config, 0, &mut rng(0)).is_err());
}

#[test]
fn multi_run_seeds_and_counts() {
    let data = squares_set(2, 17);
    let splits = Splits {
        train: &data,
        dev: None,
        test: Some(&data),
    };
    let one = multi_run(&small_config(1, 1), &ModelSpec::desk(), Architecture::Flat, splits).unwrap();
    assert_eq!(one.len(), 1);
    let three = multi_run(&small_config(1, 3), &ModelSpec::desk(), Architecture::Hierarchical, splits).unwrap();
    let seeds: Vec<u64> = three.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![11, 12, 13]);
    assert!(three.iter().all(|r| r.test.as_ref().unwrap().fine.len() == data.len()));
    // Each run is reproducible on its own.
    let again = multi_run(&small_config(1, 1), &ModelSpec::desk(), Architecture::Hierarchical, splits).unwrap();
    assert_eq!(again[0].logs, three[0].logs);
}
