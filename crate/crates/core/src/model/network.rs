use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::ModelSpec;
use crate::autodiff::{BatchStats, HasParams, Mode, ParamId, ParamStore, Tape, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// One fine-class head.
    Flat,
    /// Shared trunk with a coarse branch and a fine head.
    Hierarchical,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Flat => "flat",
            Architecture::Hierarchical => "hierarchical",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Architecture::Flat),
            "hier" | "hierarchical" => Ok(Architecture::Hierarchical),
            other => Err(Error::InvalidArgument(format!(
                "unknown model family {other:?} (flat|hier)"
            ))),
        }
    }
}

/// Exponential moving averages used by inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
struct BatchNormUnit {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    kernel: ParamId,
    bias: ParamId,
    bn: BatchNormUnit,
}

#[derive(Clone, Debug)]
struct DenseUnit {
    name: String,
    weight: ParamId,
    bias: ParamId,
    /// Hidden layers carry ReLU, batch norm and dropout; output layers none.
    hidden: Option<BatchNormUnit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
}

/// A conv or fully-connected layer with trainable weights.
#[derive(Clone, Debug)]
pub struct TrainableLayer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<ParamId>,
}

/// Output logits of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub coarse: Option<Var>,
    pub fine: Var,
}

impl Heads {
    /// Heads ordered coarse to fine, as the loss expects them.
    pub fn levels(&self) -> Vec<Var> {
        self.coarse.into_iter().chain(Some(self.fine)).collect()
    }
}

pub struct ForwardOutput<T> {
    pub heads: Heads,
    /// Batch statistics per batch-norm unit (train mode only).
    pub bn_updates: Vec<(usize, BatchStats<T>)>,
}

/// Class probabilities for a batch, one row per example.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub coarse: Option<Vec<Vec<f64>>>,
    pub fine: Vec<Vec<f64>>,
}

/// A built VGG-style network: parameters plus the layer wiring.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ModelSpec,
    arch: Architecture,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    blocks: Vec<Vec<ConvUnit>>,
    head: Vec<DenseUnit>,
    branch: Vec<DenseUnit>,
}

struct Builder<'r, T, R: ?Sized> {
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn bn(&mut self, prefix: &str, channels: usize) -> Result<BatchNormUnit> {
        let gamma = self.params.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[channels])?);
        let beta = self.params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[channels])?);
        self.running.push(RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        Ok(BatchNormUnit {
            gamma,
            beta,
            stats: self.running.len() - 1,
        })
    }

    fn conv(&mut self, name: String, in_ch: usize, filters: usize) -> Result<ConvUnit> {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let kernel = self.params.add(
            format!("{name}.weight"),
            Tensor::randn(&[filters, in_ch, 3, 3], std, self.rng)?,
        );
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[filters])?);
        let bn = self.bn(&name, filters)?;
        Ok(ConvUnit {
            name,
            kernel,
            bias,
            bn,
        })
    }

    fn dense(&mut self, name: String, fan_in: usize, fan_out: usize, hidden: bool) -> Result<DenseUnit> {
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = self.params.add(
            format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], std, self.rng)?,
        );
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?);
        let hidden = if hidden {
            Some(self.bn(&name, fan_out)?)
        } else {
            None
        };
        Ok(DenseUnit {
            name,
            weight,
            bias,
            hidden,
        })
    }

    fn mlp(&mut self, prefix: &str, fan_in: usize, widths: &[usize], classes: usize) -> Result<Vec<DenseUnit>> {
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut prev = fan_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.dense(format!("{prefix}.fc{}", i + 1), prev, w, true)?);
            prev = w;
        }
        layers.push(self.dense(format!("{prefix}.out"), prev, classes, false)?);
        Ok(layers)
    }
}

impl<T: Scalar> Network<T> {
    /// VGG-style trunk and a single fine-class head.
    pub fn build_flat<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        Self::build(spec, Architecture::Flat, rng)
    }

    /// Same trunk and fine head as [`Network::build_flat`] plus a
    /// fully-connected coarse branch tapping the trunk after
    /// `spec.branch_attach` blocks. Parameters shared with the flat build are
    /// drawn first, so equal seeds give equal trunks.
    pub fn build_hierarchical<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        Self::build(spec, Architecture::Hierarchical, rng)
    }

    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, arch: Architecture, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            running: Vec::new(),
            rng,
        };
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut in_ch = spec.input_shape[0];
        for (bi, block) in spec.blocks.iter().enumerate() {
            let mut units = Vec::with_capacity(block.convs);
            for ci in 0..block.convs {
                units.push(b.conv(format!("block{}.conv{}", bi + 1, ci + 1), in_ch, block.filters)?);
                in_ch = block.filters;
            }
            blocks.push(units);
        }
        let classes = spec.hierarchy.num_fine();
        let head = b.mlp("head", spec.trunk_features(), &spec.head_widths, classes)?;
        let branch = match arch {
            Architecture::Flat => Vec::new(),
            Architecture::Hierarchical => b.mlp(
                "branch",
                spec.branch_features(),
                &spec.branch_widths,
                spec.hierarchy.num_coarse(),
            )?,
        };
        Ok(Network {
            spec: spec.clone(),
            arch,
            params: b.params,
            running: b.running,
            blocks,
            head,
            branch,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Names under which running statistics are checkpointed, in order.
    pub fn running_stat_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.running.len()];
        let conv = self.blocks.iter().flatten().map(|u| (&u.name, &u.bn));
        let dense = self
            .head
            .iter()
            .chain(&self.branch)
            .filter_map(|u| u.hidden.as_ref().map(|bn| (&u.name, bn)));
        for (name, bn) in conv.chain(dense) {
            names[bn.stats] = format!("{name}.bn");
        }
        names
    }

    /// Conv and fully-connected layers in forward order (trunk, fine head,
    /// then coarse branch).
    pub fn trainable_layers(&self) -> Vec<TrainableLayer> {
        let mut out = Vec::new();
        for u in self.blocks.iter().flatten() {
            out.push(TrainableLayer {
                name: u.name.clone(),
                kind: LayerKind::Conv,
                params: vec![u.kernel, u.bias, u.bn.gamma, u.bn.beta],
            });
        }
        for u in self.head.iter().chain(&self.branch) {
            let mut params = vec![u.weight, u.bias];
            if let Some(bn) = &u.hidden {
                params.extend([bn.gamma, bn.beta]);
            }
            out.push(TrainableLayer {
                name: u.name.clone(),
                kind: LayerKind::Dense,
                params,
            });
        }
        out
    }

    /// Parameters of the coarse branch (empty for flat networks).
    pub fn branch_params(&self) -> Vec<ParamId> {
        self.trainable_layers()
            .into_iter()
            .filter(|l| l.name.starts_with("branch."))
            .flat_map(|l| l.params)
            .collect()
    }

    /// Parameters of the shared conv trunk.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.trainable_layers()
            .into_iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .flat_map(|l| l.params)
            .collect()
    }

    fn batch_norm<'n>(
        &'n self,
        tape: &mut Tape<'n, T>,
        x: Var,
        bn: &BatchNormUnit,
        mode: Mode,
        updates: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let (gamma, beta) = (tape.param(bn.gamma), tape.param(bn.beta));
        let rs = &self.running[bn.stats];
        let (y, stats) = tape.batch_norm(x, gamma, beta, mode, (&rs.mean, &rs.var))?;
        if let Some(s) = stats {
            updates.push((bn.stats, s));
        }
        Ok(y)
    }

    fn dense_stack<'n, R: Rng + ?Sized>(
        &'n self,
        tape: &mut Tape<'n, T>,
        mut x: Var,
        layers: &[DenseUnit],
        mode: Mode,
        rng: &mut R,
        updates: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        x = tape.flatten(x)?;
        for layer in layers {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            x = tape.matmul(x, w)?;
            x = tape.add_bias(x, b)?;
            if let Some(bn) = &layer.hidden {
                x = tape.relu(x);
                x = self.batch_norm(tape, x, bn, mode, updates)?;
                x = tape.dropout(x, self.spec.dropout, mode, rng)?;
            }
        }
        Ok(x)
    }

    /// Forward pass on `[N, C, H, W]` input producing logits for every head.
    pub fn forward<'n, R: Rng + ?Sized>(
        &'n self,
        tape: &mut Tape<'n, T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        let s = tape.shape(input).to_vec();
        let [c, h, w] = self.spec.input_shape;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "network",
                format!("input {s:?} does not match [N,{c},{h},{w}]"),
            ));
        }
        let mut updates = Vec::new();
        let mut x = input;
        let mut tap = None;
        for (bi, block) in self.blocks.iter().enumerate() {
            for unit in block {
                let k = tape.param(unit.kernel);
                let b = tape.param(unit.bias);
                x = tape.conv2d(x, k)?;
                x = tape.add_bias(x, b)?;
                x = tape.relu(x);
                x = self.batch_norm(tape, x, &unit.bn, mode, &mut updates)?;
            }
            x = tape.maxpool2d(x)?;
            if bi + 1 == self.spec.branch_attach {
                tap = Some(x);
            }
        }
        let fine = self.dense_stack(tape, x, &self.head, mode, rng, &mut updates)?;
        let coarse = match self.arch {
            Architecture::Flat => None,
            Architecture::Hierarchical => {
                let tap = tap.expect("branch_attach validated");
                Some(self.dense_stack(tape, tap, &self.branch, mode, rng, &mut updates)?)
            }
        };
        Ok(ForwardOutput {
            heads: Heads { coarse, fine },
            bn_updates: updates,
        })
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, BatchStats<T>)>) {
        let m = T::of(BN_MOMENTUM);
        let one_minus = T::one() - m;
        for (idx, stats) in updates {
            let rs = &mut self.running[idx];
            for (r, b) in rs.mean.iter_mut().zip(&stats.mean) {
                *r = m * *r + one_minus * *b;
            }
            for (r, b) in rs.var.iter_mut().zip(&stats.var) {
                *r = m * *r + one_minus * *b;
            }
        }
    }

    /// Inference-mode class probabilities for `[N, C, H, W]` images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(images.clone());
        // Inference never draws from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, x, Mode::Infer, &mut unused)?;
        let probs = |tape: &mut Tape<'_, T>, v: Var| -> Result<Vec<Vec<f64>>> {
            let p = tape.softmax(v)?;
            let t = tape.value(p);
            let cols = t.shape()[1];
            Ok(t.to_f64_vec().chunks(cols).map(|r| r.to_vec()).collect())
        };
        let fine = probs(&mut tape, out.heads.fine)?;
        let coarse = match out.heads.coarse {
            Some(c) => Some(probs(&mut tape, c)?),
            None => None,
        };
        Ok(Prediction { coarse, fine })
    }
}

impl<T: Scalar> HasParams<T> for Network<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}
