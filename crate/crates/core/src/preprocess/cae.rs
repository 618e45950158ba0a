//! Convolutional autoencoder whose bottleneck embeds RGB patches for
//! clustering.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{HasParams, ParamId, ParamStore, Tape, Var};
use crate::dataset::batch_indices;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{rmsprop_step, LrSchedule, RmsPropState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    /// Encoder stage widths; the decoder mirrors them.
    pub filters: [usize; 3],
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Fraction of patches held out to monitor reconstruction error.
    pub holdout: f64,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            filters: [16, 32, 64],
            embedding_dim: 64,
            epochs: 5,
            batch_size: 16,
            lr: LrSchedule::new(vec![(1, 1e-3)]).expect("valid schedule"),
            holdout: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Cae<T> {
    params: ParamStore<T>,
    size: usize,
    filters: [usize; 3],
    encoder: [ConvLayer; 3],
    to_code: (ParamId, ParamId),
    from_code: (ParamId, ParamId),
    decoder: [ConvLayer; 3],
}

/// Reconstruction error over training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeReport {
    pub epoch_mse: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Scalar> Cae<T> {
    /// Autoencoder for `3 x size x size` inputs; `size` must be divisible by 8.
    pub fn new<R: Rng + ?Sized>(size: usize, filters: [usize; 3], embedding_dim: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!("patch size {size} must be a positive multiple of 8")));
        }
        if embedding_dim < 2 || filters.contains(&0) {
            return Err(Error::InvalidArgument("embedding_dim must be >= 2 and filters positive".into()));
        }
        let mut params = ParamStore::new();
        let conv = |params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R| -> Result<ConvLayer> {
            Ok(ConvLayer {
                kernel: params.add(format!("{name}.kernel"), kaiming(&[cout, cin, 3, 3], cin * 9, rng)?),
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[cout])?),
            })
        };
        let [f1, f2, f3] = filters;
        let encoder = [
            conv(&mut params, "enc1", 3, f1, rng)?,
            conv(&mut params, "enc2", f1, f2, rng)?,
            conv(&mut params, "enc3", f2, f3, rng)?,
        ];
        let flat = f3 * (size / 8) * (size / 8);
        let to_code = (
            params.add("code.weight", kaiming(&[flat, embedding_dim], flat, rng)?),
            params.add("code.bias", Tensor::zeros(&[embedding_dim])?),
        );
        let from_code = (
            params.add("decode.weight", kaiming(&[embedding_dim, flat], embedding_dim, rng)?),
            params.add("decode.bias", Tensor::zeros(&[flat])?),
        );
        // The output layer is linear: unit-gain init, biased to mid-gray.
        let out = ConvLayer {
            kernel: params.add("dec3.kernel", Tensor::randn(&[3, f1, 3, 3], (1.0 / (f1 * 9) as f64).sqrt(), rng)?),
            bias: params.add("dec3.bias", Tensor::full(&[3], T::of(0.5))?),
        };
        let decoder = [conv(&mut params, "dec1", f3, f2, rng)?, conv(&mut params, "dec2", f2, f1, rng)?, out];
        Ok(Cae {
            params,
            size,
            filters,
            encoder,
            to_code,
            from_code,
            decoder,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.value(self.to_code.1).numel()
    }

    fn conv<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, layer: &ConvLayer) -> Result<Var> {
        let k = tape.param(layer.kernel);
        let b = tape.param(layer.bias);
        let y = tape.conv2d(x, k)?;
        tape.add_bias(y, b)
    }

    /// `[N, 3, S, S]` in `[0, 1]` to `[N, d]` codes.
    pub fn encode<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [3, self.size, self.size] {
            return Err(Error::shape(
                "cae",
                format!("input {s:?} does not match [N,3,{0},{0}]", self.size),
            ));
        }
        let mut h = x;
        for layer in &self.encoder {
            h = self.conv(tape, h, layer)?;
            h = tape.relu(h);
            h = tape.maxpool2d(h)?;
        }
        h = tape.flatten(h)?;
        let w = tape.param(self.to_code.0);
        let b = tape.param(self.to_code.1);
        let z = tape.matmul(h, w)?;
        tape.add_bias(z, b)
    }

    pub fn decode<'a>(&'a self, tape: &mut Tape<'a, T>, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let w = tape.param(self.from_code.0);
        let b = tape.param(self.from_code.1);
        let mut h = tape.matmul(z, w)?;
        h = tape.add_bias(h, b)?;
        h = tape.relu(h);
        let e = self.size / 8;
        h = tape.reshape(h, &[n, self.filters[2], e, e])?;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = tape.upsample2x(h)?;
            h = self.conv(tape, h, layer)?;
            if i + 1 < self.decoder.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn loss<'a>(&'a self, tape: &mut Tape<'a, T>, images: &Tensor<T>) -> Result<Var> {
        let x = tape.constant(images.clone());
        let z = self.encode(tape, x)?;
        let y = self.decode(tape, z)?;
        tape.mse(y, images)
    }

    /// Mean squared reconstruction error over `images`.
    pub fn reconstruction_mse(&self, images: &Tensor<T>) -> Result<f64> {
        let n = images.shape()[0];
        let mut total = 0.0;
        for chunk in chunks(n, 64) {
            let part = gather(images, &chunk)?;
            let mut tape = Tape::new(&self.params);
            let l = self.loss(&mut tape, &part)?;
            total += tape.value(l).item()?.f64() * chunk.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Bottleneck codes, one row per image.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let d = self.embedding_dim();
        let mut out = Vec::with_capacity(n);
        for chunk in chunks(n, 64) {
            let part = gather(images, &chunk)?;
            let mut tape = Tape::new(&self.params);
            let x = tape.constant(part);
            let z = self.encode(&mut tape, x)?;
            out.extend(tape.value(z).to_f64_vec().chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

impl<T: Scalar> HasParams<T> for Cae<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

fn chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
}

/// Rows `indices` of a tensor along its first axis.
pub(crate) fn gather<T: Scalar>(t: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let per = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(per * indices.len());
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

/// Train an autoencoder on `[N, 3, S, S]` images scaled to `[0, 1]`.
pub fn train_cae<T: Scalar, R: Rng + ?Sized>(
    images: &Tensor<T>,
    config: &CaeConfig,
    rng: &mut R,
) -> Result<(Cae<T>, CaeReport)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::shape("train_cae", format!("expected [N,3,S,S], got {s:?}")));
    }
    let n = s[0];
    if n < 2 * config.batch_size.max(2) {
        return Err(Error::Data(format!(
            "{n} patches are too few to train the autoencoder with batch size {}",
            config.batch_size
        )));
    }
    let mut cae = Cae::new(s[2], config.filters, config.embedding_dim, rng)?;
    let held = ((n as f64 * config.holdout).round() as usize).clamp(1, n / 2);
    let mut held_idx = index::sample(rng, n, held).into_vec();
    held_idx.sort_unstable();
    let train_idx: Vec<usize> = (0..n).filter(|i| held_idx.binary_search(i).is_err()).collect();
    let heldout = gather(images, &held_idx)?;
    let heldout_initial = cae.reconstruction_mse(&heldout)?;

    let mut state = RmsPropState::new(&cae.params);
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr.lr_at(epoch);
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in batch_indices(train_idx.len(), config.batch_size, rng)? {
            let idx: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let x = gather(images, &idx)?;
            let (loss, grads) = {
                let mut tape = Tape::new(&cae.params);
                let l = cae.loss(&mut tape, &x)?;
                let v = tape.value(l).item()?.f64();
                (v, tape.backward(l)?)
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss became {loss} in epoch {epoch}")));
            }
            rmsprop_step(&mut cae.params, &grads, &mut state, lr)?;
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let mse = sum / seen.max(1) as f64;
        log::info!("autoencoder epoch {epoch}: reconstruction mse {mse:.5}");
        epoch_mse.push(mse);
    }
    let heldout_final = cae.reconstruction_mse(&heldout)?;
    Ok((
        cae,
        CaeReport {
            epoch_mse,
            heldout_initial,
            heldout_final,
        },
    ))
}
