//! Sample-weighted Federated Averaging, in model space and gradient space.

use crate::error::{Error, Result};
use crate::model::{GradientVector, ModelParams};

/// Weighted mean of equal-length vectors, anchored at the first one:
/// `v_0 + sum_k a_k (v_k - v_0)`.
///
/// The anchored form reproduces a common input exactly, and every component
/// is clamped into the range spanned by the inputs so rounding can never
/// leave the convex hull.
pub(crate) fn anchored_weighted_mean(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let anchor = vectors[0];
    let mut out = anchor.to_vec();
    for (v, &a) in vectors.iter().zip(weights).skip(1) {
        for ((o, x), x0) in out.iter_mut().zip(v.iter()).zip(anchor) {
            *o += a * (x - x0);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        let (lo, hi) = vectors.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v[j]), hi.max(v[j]))
        });
        *o = o.clamp(lo, hi);
    }
    out
}

fn normalized_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.contains(&0) {
        return Err(Error::Contract("sample counts must be at least 1".into()));
    }
    let total: u64 = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `sum_k (n_k / n) w_k` over the updates, in the order given.
///
/// Callers that need bit reproducibility pass the updates in a canonical
/// order (ascending client id).
pub fn federated_aggregate<'a, I>(updates: I) -> Result<ModelParams>
where
    I: IntoIterator<Item = (&'a ModelParams, u64)>,
{
    let updates: Vec<(&ModelParams, u64)> = updates.into_iter().collect();
    let Some(&(first, _)) = updates.first() else {
        return Err(Error::Protocol("no updates to aggregate".into()));
    };
    if updates.iter().any(|(m, _)| !m.same_shape(first)) {
        return Err(Error::Contract("updates have differing shapes".into()));
    }
    let counts: Vec<u64> = updates.iter().map(|&(_, n)| n).collect();
    let weights = normalized_weights(&counts)?;
    let flats: Vec<Vec<f64>> = updates.iter().map(|(m, _)| m.iter().collect()).collect();
    let views: Vec<&[f64]> = flats.iter().map(Vec::as_slice).collect();
    first.with_flat(anchored_weighted_mean(&views, &weights))
}

/// Server-side step on the weighted gradient average:
/// `w_t - learning_rate * sum_k (n_k / n) g_k`, summed in the order given.
pub fn aggregate_gradients<'a, I>(current: &ModelParams, grads: I, learning_rate: f64) -> Result<ModelParams>
where
    I: IntoIterator<Item = (&'a GradientVector, u64)>,
{
    let grads: Vec<(&GradientVector, u64)> = grads.into_iter().collect();
    if grads.is_empty() {
        return Err(Error::Protocol("no gradients to aggregate".into()));
    }
    if grads.iter().any(|(g, _)| !g.matches(current)) {
        return Err(Error::Contract("gradient shape does not match model".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive and finite".into()));
    }
    let counts: Vec<u64> = grads.iter().map(|&(_, n)| n).collect();
    let weights = normalized_weights(&counts)?;
    let mut avg_w = vec![0.0; current.weights().len()];
    let mut avg_b = vec![0.0; current.biases().len()];
    for ((g, _), a) in grads.iter().zip(&weights) {
        for (s, x) in avg_w.iter_mut().zip(&g.d_weights) {
            *s += a * x;
        }
        for (s, x) in avg_b.iter_mut().zip(&g.d_biases) {
            *s += a * x;
        }
    }
    let mut next = current.clone();
    crate::model::apply_step(&mut next, &avg_w, &avg_b, learning_rate);
    next.ensure_finite()?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, sgd_step};

    fn vec_model(w: &[f64]) -> ModelParams {
        // 1 feature x 2 classes, biases zero: the weights carry the test vector.
        ModelParams::from_parts(1, 2, w.to_vec(), vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn weighted_pair_matches_direct_evaluation() {
        // (1/4)[1,0] + (3/4)[0,1]
        let a = vec_model(&[1.0, 0.0]);
        let b = vec_model(&[0.0, 1.0]);
        let out = federated_aggregate([(&a, 1), (&b, 3)]).unwrap();
        assert_eq!(out.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn identical_updates_are_a_fixed_point() {
        let w = init_model(6, 10, 3).unwrap();
        let counts = [1u64, 7, 250, 3, 11, 13, 17];
        let out = federated_aggregate(counts.iter().map(|&n| (&w, n))).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn single_update_is_returned_unchanged() {
        let w = init_model(3, 4, 8).unwrap();
        assert_eq!(federated_aggregate([(&w, 42)]).unwrap(), w);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let none: Vec<(&ModelParams, u64)> = Vec::new();
        assert!(matches!(federated_aggregate(none), Err(Error::Protocol(_))));
        let a = ModelParams::zeros(2, 2).unwrap();
        let b = ModelParams::zeros(3, 2).unwrap();
        assert!(matches!(
            federated_aggregate([(&a, 1), (&b, 1)]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(federated_aggregate([(&a, 0)]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gradients_leave_model_unchanged() {
        let w = init_model(4, 3, 1).unwrap();
        let g = GradientVector::zeros_like(&w);
        assert_eq!(aggregate_gradients(&w, [(&g, 5), (&g, 9)], 0.5).unwrap(), w);
    }

    #[test]
    fn single_gradient_is_plain_sgd() {
        let w = init_model(4, 3, 1).unwrap();
        let mut g = GradientVector::zeros_like(&w);
        g.d_weights
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = (i as f64).sin());
        g.d_biases = vec![0.1, -0.2, 0.3];
        assert_eq!(
            aggregate_gradients(&w, [(&g, 17)], 0.05).unwrap(),
            sgd_step(&w, &g, 0.05).unwrap()
        );
    }
}
