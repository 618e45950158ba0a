use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weighted sum of per-level mean cross-entropies, coarse level first:
/// `sum_k w_k * CE(softmax(heads[k]), targets[k])`.
pub fn hierarchical_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    heads: &[Var],
    targets: &[&[usize]],
    weights: &[f64],
) -> Result<Var> {
    if heads.is_empty() || heads.len() != targets.len() || heads.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} heads, {} target vectors and {} weights must all match",
            heads.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for ((&logits, &target), &w) in heads.iter().zip(targets).zip(weights) {
        let ce = tape.cross_entropy(logits, target)?;
        let term = tape.scale(ce, T::of(w));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one head"))
}
