//! Cross-round early stopping on the hold-out NLL.

/// True once at least `min_rounds` values are recorded and the best value
/// has gone more than `patience` consecutive rounds without improving by at
/// least `min_delta`.
pub fn should_stop(history: &[f64], min_rounds: usize, patience: usize, min_delta: f64) -> bool {
    if history.is_empty() || history.len() < min_rounds {
        return false;
    }
    let mut best = history[0];
    let mut since = 0;
    for &x in &history[1..] {
        if x < best - min_delta {
            best = x;
            since = 0;
        } else {
            since += 1;
        }
    }
    since > patience
}

/// First 1-based round at which [`should_stop`] fires, if any.
pub fn stop_round(history: &[f64], min_rounds: usize, patience: usize, min_delta: f64) -> Option<usize> {
    (1..=history.len()).find(|&n| should_stop(&history[..n], min_rounds, patience, min_delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_after_round_three_stops_at_five() {
        let h = [3.0, 2.5, 2.0, 2.0, 2.0, 2.0, 2.0];
        assert_eq!(stop_round(&h, 3, 1, 1e-3), Some(5));
    }

    #[test]
    fn steady_improvement_never_stops() {
        let h: Vec<f64> = (0..10).map(|i| 5.0 - 0.01 * i as f64).collect();
        assert_eq!(stop_round(&h, 3, 1, 1e-3), None);
    }

    #[test]
    fn short_history_does_not_stop() {
        assert!(!should_stop(&[1.0, 1.0], 3, 0, 1e-3));
        assert!(!should_stop(&[], 0, 0, 1e-3));
    }

    proptest! {
        #[test]
        fn stopping_is_monotone_under_non_improving_extensions(
            h in prop::collection::vec(-5.0..5.0f64, 1..12),
            ext in prop::collection::vec(0.0..3.0f64, 0..6),
        ) {
            if should_stop(&h, 3, 1, 1e-3) {
                let best = h.iter().copied().fold(f64::INFINITY, f64::min);
                let mut longer = h.clone();
                longer.extend(ext.iter().map(|e| best + e));
                prop_assert!(should_stop(&longer, 3, 1, 1e-3));
            }
        }
    }
}
