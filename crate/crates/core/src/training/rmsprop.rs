use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPSILON: f64 = 1e-8;

/// Running mean of squared gradients, one buffer per parameter.
#[derive(Clone, Debug)]
pub struct RmsPropState<T> {
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<T>>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        RmsPropState {
            decay: RMSPROP_DECAY,
            epsilon: RMSPROP_EPSILON,
            accumulators: params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect(),
        }
    }

    pub fn accumulator(&self, index: usize) -> &[T] {
        &self.accumulators[index]
    }
}

/// One RMSprop update without momentum:
/// `a <- rho*a + (1-rho)*g^2`, `theta <- theta - lr*g/(sqrt(a)+eps)`.
///
/// Parameters without a gradient are treated as having a zero gradient.
pub fn rmsprop_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut RmsPropState<T>,
    lr: f64,
) -> Result<()> {
    if state.accumulators.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.accumulators.len(),
            params.len()
        )));
    }
    // Validate everything before touching any parameter.
    for (id, g) in grads.params() {
        let p = params.get(id);
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "rmsprop_step",
                format!("gradient {:?} for parameter {} of shape {:?}", g.shape(), p.name, p.value.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    let rho = T::of(state.decay);
    let one_minus = T::one() - rho;
    let eps = T::of(state.epsilon);
    let lr = T::of(lr);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let acc = &mut state.accumulators[id.index()];
        match grads.param(id) {
            Some(g) => {
                let value = params.get_mut(id).value.data_mut();
                for ((a, v), &gi) in acc.iter_mut().zip(value.iter_mut()).zip(g.data()) {
                    *a = rho * *a + one_minus * gi * gi;
                    *v = *v - lr * gi / (a.sqrt() + eps);
                }
            }
            None => acc.iter_mut().for_each(|a| *a = rho * *a),
        }
    }
    Ok(())
}
