use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::hierarchical_loss;
use super::rmsprop::{rmsprop_step, RmsPropState};
use super::schedule::{LossWeightSchedule, LrSchedule};
use crate::autodiff::{HasParams, Mode, Tape};
use crate::dataset::{make_batches, ImageSet};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec, Network};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub runs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Used by hierarchical networks; flat networks train on `[1.0]`.
    pub loss_weights: LossWeightSchedule,
    pub lr: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            runs: 10,
            batch_size: 32,
            seed: 0,
            loss_weights: LossWeightSchedule::default(),
            lr: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.runs == 0 {
            return Err(Error::Config("epochs and runs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Loss-weight schedule matching the network's head count.
    pub fn schedule_for(&self, arch: Architecture) -> LossWeightSchedule {
        match arch {
            Architecture::Flat => LossWeightSchedule::single_level(),
            Architecture::Hierarchical => self.loss_weights.clone(),
        }
    }
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub run: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_weights: Vec<f64>,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_coarse_acc: Option<f64>,
    pub dev_fine_acc: Option<f64>,
}

/// Per-example class probabilities at both levels. Flat networks get their
/// coarse row by summing fine probabilities over each category's children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelProbs {
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl LevelProbs {
    pub fn coarse_predictions(&self) -> Vec<usize> {
        self.coarse.iter().map(|r| argmax(r)).collect()
    }

    pub fn fine_predictions(&self) -> Vec<usize> {
        self.fine.iter().map(|r| argmax(r)).collect()
    }
}

/// Inference-mode probabilities for a whole set, `chunk` images at a time.
pub fn predict_set<T: Scalar>(net: &Network<T>, set: &ImageSet<T>, chunk: usize) -> Result<LevelProbs> {
    let hierarchy = &net.spec().hierarchy;
    let mut out = LevelProbs {
        coarse: Vec::with_capacity(set.len()),
        fine: Vec::with_capacity(set.len()),
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let batch = set.gather(part)?;
        let p = net.predict(&batch.images)?;
        match p.coarse {
            Some(c) => out.coarse.extend(c),
            None => {
                for row in &p.fine {
                    out.coarse.push(hierarchy.lift_probs(row)?);
                }
            }
        }
        out.fine.extend(p.fine);
    }
    Ok(out)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn dev_summary<T: Scalar>(
    net: &Network<T>,
    dev: &ImageSet<T>,
    weights: &[f64],
    chunk: usize,
) -> Result<(f64, f64, f64)> {
    let probs = predict_set(net, dev, chunk)?;
    let nll = |rows: &[Vec<f64>], targets: &[usize]| -> f64 {
        rows.iter()
            .zip(targets)
            .map(|(r, &t)| -r[t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64
    };
    let loss = match net.architecture() {
        Architecture::Flat => weights[0] * nll(&probs.fine, dev.fine()),
        Architecture::Hierarchical => {
            weights[0] * nll(&probs.coarse, dev.coarse()) + weights[1] * nll(&probs.fine, dev.fine())
        }
    };
    Ok((
        loss,
        accuracy(&probs.coarse_predictions(), dev.coarse()),
        accuracy(&probs.fine_predictions(), dev.fine()),
    ))
}

/// Train `net` in place for `config.epochs` epochs and return the epoch log.
/// The development set, when present, is only monitored.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    data: &ImageSet<T>,
    dev: Option<&ImageSet<T>>,
    config: &TrainConfig,
    run: usize,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.image_shape() != net.spec().input_shape {
        return Err(Error::Data(format!(
            "training images are {:?} but the network expects {:?}",
            data.image_shape(),
            net.spec().input_shape
        )));
    }
    let arch = net.architecture();
    let schedule = config.schedule_for(arch);
    let levels = match arch {
        Architecture::Flat => 1,
        Architecture::Hierarchical => 2,
    };
    if schedule.levels() != levels {
        return Err(Error::Config(format!(
            "loss weight schedule has {} levels but the network has {levels} heads",
            schedule.levels()
        )));
    }
    if dev.is_none() {
        log::warn!("run {run}: no development set; epoch logs carry no dev metrics");
    }
    let mut state = RmsPropState::new(net.params());
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let weights = schedule.weights_at(epoch).to_vec();
        let lr = config.lr.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in make_batches(data, config.batch_size, rng)? {
            let n = batch.fine.len();
            let (loss, grads, updates) = {
                let mut tape = Tape::new(net.params());
                let x = tape.constant(batch.images);
                let out = net.forward(&mut tape, x, Mode::Train, rng)?;
                let targets: Vec<&[usize]> = match arch {
                    Architecture::Flat => vec![&batch.fine],
                    Architecture::Hierarchical => vec![&batch.coarse, &batch.fine],
                };
                let loss = hierarchical_loss(&mut tape, &out.heads.levels(), &targets, &weights)?;
                let value = tape.value(loss).item()?.f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
                }
                (value, tape.backward(loss)?, out.bn_updates)
            };
            net.apply_bn_updates(updates);
            rmsprop_step(net.params_mut(), &grads, &mut state, lr)?;
            loss_sum += loss * n as f64;
            seen += n;
        }
        let (dev_loss, dev_coarse_acc, dev_fine_acc) = match dev {
            Some(d) if !d.is_empty() => {
                let (l, c, f) = dev_summary(net, d, &weights, config.batch_size.max(64))?;
                (Some(l), Some(c), Some(f))
            }
            _ => (None, None, None),
        };
        let entry = EpochLog {
            run,
            epoch,
            lr,
            loss_weights: weights,
            train_loss: loss_sum / seen.max(1) as f64,
            dev_loss,
            dev_coarse_acc,
            dev_fine_acc,
        };
        log::info!(
            "run {run} epoch {epoch}: lr {lr:e}, train loss {:.4}, dev coarse {:?}, dev fine {:?}",
            entry.train_loss,
            entry.dev_coarse_acc,
            entry.dev_fine_acc
        );
        logs.push(entry);
    }
    Ok(logs)
}

/// Everything one independent run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub run: usize,
    pub seed: u64,
    pub network: Network<T>,
    pub logs: Vec<EpochLog>,
    /// Test-set probabilities when a test set was supplied.
    pub test: Option<LevelProbs>,
}

/// Data for [`multi_run`].
#[derive(Clone, Copy)]
pub struct Splits<'a, T> {
    pub train: &'a ImageSet<T>,
    pub dev: Option<&'a ImageSet<T>>,
    pub test: Option<&'a ImageSet<T>>,
}

/// Build, train and (optionally) test run `run`, seeded with
/// `config.seed + run`.
pub fn run_one<T: Scalar>(
    config: &TrainConfig,
    spec: &ModelSpec,
    arch: Architecture,
    data: Splits<'_, T>,
    run: usize,
) -> Result<RunOutcome<T>> {
    let seed = config.seed.wrapping_add(run as u64);
    let attempt = || -> Result<RunOutcome<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut network = Network::build(spec, arch, &mut rng)?;
        let logs = train(&mut network, data.train, data.dev, config, run, &mut rng)?;
        let test = match data.test {
            Some(t) if !t.is_empty() => Some(predict_set(&network, t, config.batch_size.max(64))?),
            _ => None,
        };
        Ok(RunOutcome {
            run,
            seed,
            network,
            logs,
            test,
        })
    };
    attempt().map_err(|e| Error::Run {
        run,
        seed,
        source: Box::new(e),
    })
}

/// `config.runs` independent build+train+evaluate cycles; each is
/// reproducible on its own (see [`run_one`]).
pub fn multi_run<T: Scalar>(
    config: &TrainConfig,
    spec: &ModelSpec,
    arch: Architecture,
    data: Splits<'_, T>,
) -> Result<Vec<RunOutcome<T>>> {
    config.validate()?;
    (0..config.runs)
        .into_par_iter()
        .map(|run| run_one(config, spec, arch, data, run))
        .collect()
}
