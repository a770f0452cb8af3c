use crate::error::{Error, Result};

/// Numerically stable softmax, in place. Panics on an empty slice.
pub fn softmax_in_place(scores: &mut [f64]) {
    assert!(!scores.is_empty(), "softmax over an empty slice");
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// Softmax of `scores` restricted to the node ids in `neighborhood`.
///
/// The returned weights are aligned with `neighborhood`.
pub fn masked_softmax(scores: &[f64], neighborhood: &[usize]) -> Result<Vec<f64>> {
    if neighborhood.is_empty() {
        return Err(Error::Domain("softmax over an empty neighborhood".into()));
    }
    let mut out = Vec::with_capacity(neighborhood.len());
    for &j in neighborhood {
        let s = *scores.get(j).ok_or_else(|| {
            Error::Validation(format!(
                "neighbor {j} outside score list of length {}",
                scores.len()
            ))
        })?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite score {s} for node {j}")));
        }
        out.push(s);
    }
    softmax_in_place(&mut out);
    Ok(out)
}

/// Backward of softmax: given weights `α` and upstream `∂L/∂α`, returns `∂L/∂scores`.
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let inner: f64 = weights.iter().zip(grad_weights).map(|(a, g)| a * g).sum();
    weights
        .iter()
        .zip(grad_weights)
        .map(|(a, g)| a * (g - inner))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singleton_is_one() {
        assert_eq!(masked_softmax(&[123.4], &[0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_scores_split_evenly() {
        assert_eq!(masked_softmax(&[0.7, 0.7], &[0, 1]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn ln2_vs_zero() {
        let w = masked_softmax(&[2f64.ln(), 0.0], &[0, 1]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_neighborhood_is_domain_error() {
        assert!(matches!(masked_softmax(&[1.0], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_selects_subset() {
        let w = masked_softmax(&[5.0, 0.0, 5.0], &[0, 2]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn large_scores_stay_finite() {
        let w = masked_softmax(&[1000.0, 999.0], &[0, 1]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn sums_to_one_and_shift_invariant(
            scores in prop::collection::vec(-30.0f64..30.0, 1..20),
            shift in -50.0f64..50.0,
        ) {
            let idx: Vec<usize> = (0..scores.len()).collect();
            let w = masked_softmax(&scores, &idx).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let w2 = masked_softmax(&shifted, &idx).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
