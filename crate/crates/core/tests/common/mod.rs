#![allow(dead_code)]

use hvgg::autodiff::{param_diff_errors, HasParams, ParamId, Tape, Var};
use hvgg::model::Network;
use rand::seq::SliceRandom;
use rand::Rng;

/// Result of checking one trainable layer.
#[derive(Debug)]
pub struct LayerCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates over `tol` whose stencil crossed a kink; replaced by
    /// fresh draws.
    pub excused_kinks: usize,
    /// Coordinates over `tol` on a smooth stencil (genuine failures).
    pub failures: usize,
    pub max_error: f64,
}

/// Check `per_layer` randomly drawn scalars of every trainable layer against
/// central differences. A coordinate over `tol` is excused, and replaced by a
/// fresh draw, only when its stencil changes a ReLU or max-pool decision.
pub fn check_network_layers<R, F>(
    net: &mut Network<f64>,
    per_layer: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
    loss: F,
) -> Vec<LayerCheck>
where
    R: Rng,
    F: for<'a> Fn(&'a Network<f64>, &mut Tape<'a, f64>) -> hvgg::Result<Var> + Copy,
{
    let mut report = Vec::new();
    for layer in net.trainable_layers() {
        let mut pool: Vec<(ParamId, usize)> = layer
            .params
            .iter()
            .flat_map(|&id| (0..net.params().value(id).numel()).map(move |i| (id, i)))
            .collect();
        pool.shuffle(rng);
        let mut check = LayerCheck {
            name: layer.name.clone(),
            checked: 0,
            excused_kinks: 0,
            failures: 0,
            max_error: 0.0,
        };
        let mut next = pool.into_iter();
        while check.checked < per_layer {
            let want = per_layer - check.checked;
            let batch: Vec<_> = next.by_ref().take(want).collect();
            if batch.is_empty() {
                break;
            }
            for c in param_diff_errors(net, &batch, step, loss).unwrap() {
                if c.error < tol {
                    check.checked += 1;
                    check.max_error = check.max_error.max(c.error);
                } else if c.crosses_kink {
                    check.excused_kinks += 1;
                } else {
                    check.checked += 1;
                    check.failures += 1;
                    check.max_error = check.max_error.max(c.error);
                }
            }
        }
        report.push(check);
    }
    report
}
