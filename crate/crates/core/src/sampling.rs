use crate::error::{Error, Result};
use crate::rng::RngState;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Softmax of `logits / temperature`. Temperature 0 yields a one-hot on the
/// argmax (lowest index wins ties).
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and non-negative, got {temperature}"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    if temperature == 0.0 {
        let mut out = vec![0.0; logits.len()];
        out[argmax(logits)] = 1.0;
        return Ok(out);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, best first, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn validate_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidDistribution("negative or non-finite entry".into()));
    }
    let sum: f64 = dist.iter().sum();
    if sum == 0.0 {
        return Err(Error::InvalidDistribution("all-zero".into()));
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Draws one index from `dist`, consuming exactly one draw from `rng`.
pub fn sample_categorical(dist: &[f64], rng: &mut RngState) -> Result<usize> {
    validate_distribution(dist)?;
    sample_categorical_with(dist, rng.uniform())
}

/// Inverse-CDF lookup for a uniform `u` in `[0, 1)`.
pub(crate) fn sample_categorical_with(dist: &[f64], u: f64) -> Result<usize> {
    validate_distribution(dist)?;
    let total: f64 = dist.iter().sum();
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last_positive = Some(i);
        if target < cum {
            return Ok(i);
        }
    }
    last_positive.ok_or(Error::InvalidDistribution("all-zero".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        assert_eq!(softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn ln2_gap_gives_two_thirds() {
        let p = softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_temperature_is_argmax_one_hot() {
        assert_eq!(softmax_with_temperature(&[1.0, 3.0], 0.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(softmax_with_temperature(&[2.0, 2.0], 0.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn empty_logits_rejected() {
        let err = softmax_with_temperature(&[], 1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty distribution");
    }

    #[test]
    fn deterministic_support() {
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
            assert_eq!(sample_categorical(&[0.0, 1.0], &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn one_draw_per_sample() {
        let mut rng = RngState::new(3);
        sample_categorical(&[0.2, 0.3, 0.5], &mut rng).unwrap();
        assert_eq!(rng.position(), 1);
    }

    #[test]
    fn fair_coin_frequency_within_three_sigma() {
        // n = 1e5, p = 0.5: sigma = sqrt(n p (1-p)) / n = 0.00158, 3 sigma < 0.005.
        let mut rng = RngState::new(2024);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.485..=0.515).contains(&freq), "freq {freq}");
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut rng = RngState::new(0);
        assert!(sample_categorical(&[0.0, 0.0], &mut rng).is_err());
        assert!(sample_categorical(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_categorical(&[-0.1, 1.1], &mut rng).is_err());
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        assert_eq!(top_k(&[0.1, 0.4, 0.4, 0.1], 3), vec![1, 2, 0]);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
            temp in 0.1f64..3.0,
        ) {
            let a = softmax_with_temperature(&logits, temp).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax_with_temperature(&shifted, temp).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let sum: f64 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sampled_index_has_positive_mass(
            weights in prop::collection::vec(0.0f64..1.0, 1..10),
            seed in any::<u64>(),
        ) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-6);
            let dist: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let mut rng = RngState::new(seed);
            let i = sample_categorical(&dist, &mut rng).unwrap();
            prop_assert!(dist[i] > 0.0);
        }
    }
}
