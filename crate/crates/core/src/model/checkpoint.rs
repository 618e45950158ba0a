//! Plain-text model checkpoints.
//!
//! ```text
//! hvgg-checkpoint 1
//! architecture hierarchical
//! dtype f32
//! spec_hash 0123abcd...
//! spec {...json...}
//! meta <key> <value>          (zero or more)
//! tensors <count>
//! tensor <name>
//! shape d0 d1 ...
//! v0 v1 ...
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Architecture, Network};
use super::spec::ModelSpec;
use crate::autodiff::HasParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "hvgg-checkpoint 1";

/// Free-form metadata stored alongside the weights.
pub type Meta = BTreeMap<String, String>;

pub fn write_checkpoint<T: Scalar, W: Write>(net: &Network<T>, meta: &Meta, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let io = |e| Error::Data(format!("writing checkpoint: {e}"));
    let spec = net.spec();
    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "architecture {}", net.architecture().as_str()).map_err(io)?;
    writeln!(w, "dtype {}", T::NAME).map_err(io)?;
    writeln!(w, "spec_hash {}", spec.hash()).map_err(io)?;
    writeln!(w, "spec {}", serde_json::to_string(spec)?).map_err(io)?;
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!("bad checkpoint meta entry {k:?}")));
        }
        writeln!(w, "meta {k} {v}").map_err(io)?;
    }
    let params = net.params();
    let running = net.running_stats();
    writeln!(w, "tensors {}", params.len() + 2 * running.len()).map_err(io)?;
    for (_, p) in params.iter() {
        writeln!(w, "tensor {}", p.name).map_err(io)?;
        p.value.write_text(&mut w).map_err(io)?;
    }
    for (name, rs) in net.running_stat_names().iter().zip(running) {
        for (suffix, values) in [("running_mean", &rs.mean), ("running_var", &rs.var)] {
            writeln!(w, "tensor {name}.{suffix}").map_err(io)?;
            Tensor::new(&[values.len()], values.clone())?
                .write_text(&mut w)
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, meta: &Meta, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, meta, f)
}

fn line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    r.read_line(&mut s)
        .map_err(|e| Error::Data(format!("reading checkpoint: {e}")))?;
    if s.is_empty() {
        return Err(Error::Data("truncated checkpoint".into()));
    }
    Ok(s.trim_end_matches(['\n', '\r']).to_string())
}

fn field<'a>(s: &'a str, key: &str) -> Result<&'a str> {
    s.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Data(format!("checkpoint: expected `{key}`, found {s:?}")))
}

/// Read a checkpoint. When `expected` is given, the stored spec hash must
/// match it.
pub fn read_checkpoint<T: Scalar, R: BufRead>(
    mut r: R,
    expected: Option<&ModelSpec>,
) -> Result<(Network<T>, Meta)> {
    if line(&mut r)? != MAGIC {
        return Err(Error::Data("not an hvgg checkpoint".into()));
    }
    let arch: Architecture = field(&line(&mut r)?, "architecture")?.parse()?;
    let dtype = line(&mut r)?;
    if field(&dtype, "dtype")? != T::NAME {
        return Err(Error::Data(format!(
            "checkpoint holds {dtype:?} but this build reads {}",
            T::NAME
        )));
    }
    let hash = field(&line(&mut r)?, "spec_hash")?.to_string();
    let spec: ModelSpec = serde_json::from_str(field(&line(&mut r)?, "spec")?)?;
    if spec.hash() != hash {
        return Err(Error::Data(format!(
            "checkpoint spec hash {hash} does not match its embedded spec ({})",
            spec.hash()
        )));
    }
    if let Some(exp) = expected {
        if exp.hash() != hash {
            return Err(Error::Data(format!(
                "checkpoint spec hash {hash} does not match the configured model ({})",
                exp.hash()
            )));
        }
    }
    let mut meta = Meta::new();
    let count = loop {
        let l = line(&mut r)?;
        if let Ok(rest) = field(&l, "meta") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.insert(k.to_string(), v.to_string());
            continue;
        }
        let n = field(&l, "tensors")?;
        break n
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("bad tensor count {n:?}")))?;
    };
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = field(&line(&mut r)?, "tensor")?.to_string();
        tensors.insert(name, Tensor::<T>::read_text(&mut r)?);
    }

    let mut net = Network::build(&spec, arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let name = net.params().get(id).name.clone();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
        net.params_mut().set_value(id, t)?;
    }
    let names = net.running_stat_names();
    for (name, rs) in names.iter().zip(net.running_stats_mut()) {
        for (suffix, slot) in [("running_mean", &mut rs.mean), ("running_var", &mut rs.var)] {
            let key = format!("{name}.{suffix}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {key}")))?;
            if t.numel() != slot.len() {
                return Err(Error::Data(format!("tensor {key} has the wrong length")));
            }
            *slot = t.into_data();
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Data(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok((net, meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelSpec>) -> Result<(Network<T>, Meta)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), expected)
}
