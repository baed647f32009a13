//! Otsu's histogram threshold for foreground detection.

use crate::error::{Error, Result};

/// Number of histogram bins; 16-bit intensities are compressed to this range.
pub const HIST_BINS: usize = 256;

/// Threshold index maximizing between-class variance. Classes split as
/// `bin <= t` versus `bin > t`; ties resolve to the lowest threshold.
pub fn otsu_threshold(histogram: &[u64; HIST_BINS]) -> Result<usize> {
    let nonzero = histogram.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(Error::contract(format!(
            "Otsu needs at least 2 populated bins, got {nonzero}"
        )));
    }
    let total: u64 = histogram.iter().sum();
    let total_f = total as f64;
    let weighted_sum: f64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as u64 * c) as f64)
        .sum();

    let mut best_t = 0usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut count_below: u64 = 0;
    let mut sum_below: f64 = 0.0;
    for t in 0..HIST_BINS - 1 {
        count_below += histogram[t];
        sum_below += (t as u64 * histogram[t]) as f64;
        if count_below == 0 {
            continue;
        }
        let count_above = total - count_below;
        if count_above == 0 {
            break;
        }
        let w_b = count_below as f64 / total_f;
        let w_f = count_above as f64 / total_f;
        let mu_b = sum_below / count_below as f64;
        let mu_f = (weighted_sum - sum_below) / count_above as f64;
        let var = w_b * w_f * (mu_b - mu_f) * (mu_b - mu_f);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    Ok(best_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(histogram: &[u64; HIST_BINS]) -> usize {
        // exhaustive search, recomputing both class statistics from scratch
        let mut best_t = 0;
        let mut best_var = f64::NEG_INFINITY;
        for t in 0..HIST_BINS - 1 {
            let below: u64 = histogram[..=t].iter().sum();
            let above: u64 = histogram[t + 1..].iter().sum();
            if below == 0 || above == 0 {
                continue;
            }
            let total = (below + above) as f64;
            let mu_b = histogram[..=t]
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as u64 * c) as f64)
                .sum::<f64>()
                / below as f64;
            let mu_f = histogram[t + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| ((t + 1 + i) as u64 * c) as f64)
                .sum::<f64>()
                / above as f64;
            let var =
                (below as f64 / total) * (above as f64 / total) * (mu_b - mu_f) * (mu_b - mu_f);
            if var > best_var {
                best_var = var;
                best_t = t;
            }
        }
        best_t
    }

    #[test]
    fn bimodal_histogram_separates_exactly() {
        let mut h = [0u64; HIST_BINS];
        h[10] = 500;
        h[200] = 500;
        let t = otsu_threshold(&h).unwrap();
        assert!((10..200).contains(&t), "threshold {t} must separate 10 from 200");
    }

    #[test]
    fn uniform_histogram_matches_exhaustive_oracle() {
        let h = [4u64; HIST_BINS];
        assert_eq!(otsu_threshold(&h).unwrap(), oracle(&h));
    }

    #[test]
    fn single_valued_histogram_is_degenerate() {
        let mut h = [0u64; HIST_BINS];
        h[42] = 1000;
        assert!(matches!(otsu_threshold(&h), Err(Error::Contract(_))));
        let empty = [0u64; HIST_BINS];
        assert!(otsu_threshold(&empty).is_err());
    }

    #[test]
    fn random_histograms_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut h = [0u64; HIST_BINS];
            let populated = rng.gen_range(2..40);
            for _ in 0..populated {
                let bin = rng.gen_range(0..HIST_BINS);
                h[bin] += rng.gen_range(1..1000);
            }
            if h.iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            assert_eq!(otsu_threshold(&h).unwrap(), oracle(&h), "histogram {h:?}");
        }
    }

    #[test]
    fn plateau_ties_pick_the_lowest_threshold() {
        // symmetric two-spike histogram: every t between the spikes gives the
        // same variance, so the first maximizer must win
        let mut h = [0u64; HIST_BINS];
        h[0] = 100;
        h[20] = 100;
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t, 0, "lowest tied threshold expected");
    }
}
