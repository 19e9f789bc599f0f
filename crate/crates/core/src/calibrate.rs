//! Threshold fitting for score-valued confidence signals.
//!
//! Perplexity, consistency counts, and verbalized probabilities are real
//! scores; turning them into a binary confidence requires a cutoff. The
//! cutoff is chosen on a held-out split to maximize alignment — the fraction
//! of items where confidence matches correctness.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Which side of the threshold counts as confident.
///
/// Low perplexity means confident (`ConfidentIfScoreAtMost`); high
/// consistency or a high self-reported probability means confident
/// (`ConfidentIfScoreAtLeast`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ConfidentIfScoreAtMost,
    ConfidentIfScoreAtLeast,
}

/// A fitted binarization cutoff plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    /// The cutoff; may be ±∞ when one of the trivial policies (everything
    /// confident / everything unconfident) is optimal.
    #[serde(
        serialize_with = "serialize_threshold",
        deserialize_with = "deserialize_threshold"
    )]
    pub threshold: f64,
    pub direction: Direction,
    /// Alignment this threshold achieved on the fitting data.
    pub heldout_alignment: f64,
    pub n_heldout: usize,
}

// JSON has no literal for infinities, so the sentinel thresholds serialize as
// the strings "inf"/"-inf" and finite values as plain numbers.
fn serialize_threshold<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        ser.serialize_f64(*value)
    } else if *value > 0.0 {
        ser.serialize_str("inf")
    } else {
        ser.serialize_str("-inf")
    }
}

fn deserialize_threshold<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(de)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(D::Error::custom(format!("bad threshold string {other:?}"))),
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("cannot fit a threshold on an empty score list")]
    Empty,
    #[error("scores must not contain NaN (pair {index})")]
    NanScore { index: usize },
}

/// Whether `score` counts as confident under `fit`. Boundary equality is
/// confident in both directions.
pub fn apply_threshold(fit: &ThresholdFit, score: f64) -> bool {
    match fit.direction {
        Direction::ConfidentIfScoreAtMost => score <= fit.threshold,
        Direction::ConfidentIfScoreAtLeast => score >= fit.threshold,
    }
}

fn alignment_at(pairs: &[(f64, bool)], direction: Direction, threshold: f64) -> (usize, usize) {
    let mut matches = 0;
    let mut unconfident = 0;
    for &(score, correct) in pairs {
        let confident = match direction {
            Direction::ConfidentIfScoreAtMost => score <= threshold,
            Direction::ConfidentIfScoreAtLeast => score >= threshold,
        };
        if !confident {
            unconfident += 1;
        }
        if confident == correct {
            matches += 1;
        }
    }
    (matches, unconfident)
}

/// Fits the alignment-maximizing threshold on `(score, correct)` pairs.
///
/// Candidates are the midpoints between adjacent distinct sorted scores plus
/// −∞/+∞ sentinels; together these realize every achievable classification
/// (boundary equality counts as confident). Ties prefer the candidate that
/// classifies more items unconfident, then the smaller threshold, so fits are
/// deterministic and lean conservative.
pub fn fit_threshold(
    pairs: &[(f64, bool)],
    direction: Direction,
) -> Result<ThresholdFit, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if let Some(index) = pairs.iter().position(|(s, _)| s.is_nan()) {
        return Err(CalibrationError::NanScore { index });
    }

    let mut scores: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();

    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for pair in scores.windows(2) {
        // Halving before adding keeps midpoints finite for extreme scores.
        candidates.push(pair[0] / 2.0 + pair[1] / 2.0);
    }
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(usize, usize, f64)> = None; // (matches, unconfident, threshold)
    for &threshold in &candidates {
        let (matches, unconfident) = alignment_at(pairs, direction, threshold);
        let better = match best {
            None => true,
            Some((bm, bu, bt)) => {
                matches > bm
                    || (matches == bm && unconfident > bu)
                    || (matches == bm && unconfident == bu && threshold < bt)
            }
        };
        if better {
            best = Some((matches, unconfident, threshold));
        }
    }
    let (matches, _, threshold) = best.expect("candidate list is never empty");
    Ok(ThresholdFit {
        threshold,
        direction,
        heldout_alignment: matches as f64 / pairs.len() as f64,
        n_heldout: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: every score, every midpoint, and both sentinels
    /// (2N+1 candidates for N pairs); returns the best achievable alignment.
    fn brute_force_best_alignment(pairs: &[(f64, bool)], direction: Direction) -> f64 {
        let mut sorted: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
        sorted.sort_by(f64::total_cmp);
        let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
        candidates.extend_from_slice(&sorted);
        for pair in sorted.windows(2) {
            candidates.push(pair[0] / 2.0 + pair[1] / 2.0);
        }
        candidates
            .iter()
            .map(|&t| alignment_at(pairs, direction, t).0)
            .max()
            .unwrap() as f64
            / pairs.len() as f64
    }

    #[test]
    fn separable_scores_get_the_midpoint() {
        // Low perplexity correct, high perplexity incorrect: θ in (2,3).
        let pairs = [(1.0, true), (2.0, true), (3.0, false), (4.0, false)];
        let fit = fit_threshold(&pairs, Direction::ConfidentIfScoreAtMost).unwrap();
        assert_eq!(fit.threshold, 2.5);
        assert_eq!(fit.heldout_alignment, 1.0);
        assert_eq!(fit.n_heldout, 4);
    }

    #[test]
    fn all_correct_consistency_picks_everything_confident() {
        let pairs = [(3.0, true), (7.0, true), (10.0, true)];
        let fit = fit_threshold(&pairs, Direction::ConfidentIfScoreAtLeast).unwrap();
        assert_eq!(fit.threshold, f64::NEG_INFINITY);
        assert_eq!(fit.heldout_alignment, 1.0);
        assert!(apply_threshold(&fit, 0.0), "−∞ cutoff marks everything confident");
    }

    #[test]
    fn ties_break_toward_more_unconfident() {
        // One correct item scoring high, one incorrect scoring low, at-least
        // direction: both θ=-∞ (all confident) and θ=+∞ (all unconfident)
        // would align 1/2, as does the midpoint (which aligns 2/2 — so pick a
        // case without a separating winner: equal scores).
        let pairs = [(5.0, true), (5.0, false)];
        let fit = fit_threshold(&pairs, Direction::ConfidentIfScoreAtLeast).unwrap();
        // Candidates are only ±∞ (single distinct score): both align 1/2;
        // +∞ classifies more items unconfident and must win.
        assert_eq!(fit.threshold, f64::INFINITY);
        assert_eq!(fit.heldout_alignment, 0.5);
    }

    #[test]
    fn boundary_equality_is_confident() {
        let fit = ThresholdFit {
            threshold: 2.5,
            direction: Direction::ConfidentIfScoreAtMost,
            heldout_alignment: 1.0,
            n_heldout: 4,
        };
        assert!(apply_threshold(&fit, 1.2));
        assert!(apply_threshold(&fit, 2.5), "score exactly at θ is confident");
        assert!(!apply_threshold(&fit, 2.6));
        let fit = ThresholdFit {
            threshold: 8.0,
            direction: Direction::ConfidentIfScoreAtLeast,
            heldout_alignment: 1.0,
            n_heldout: 4,
        };
        assert!(!apply_threshold(&fit, 7.0));
        assert!(apply_threshold(&fit, 8.0));
    }

    #[test]
    fn empty_and_nan_inputs_are_errors() {
        assert!(matches!(
            fit_threshold(&[], Direction::ConfidentIfScoreAtLeast),
            Err(CalibrationError::Empty)
        ));
        assert!(matches!(
            fit_threshold(&[(f64::NAN, true)], Direction::ConfidentIfScoreAtLeast),
            Err(CalibrationError::NanScore { index: 0 })
        ));
    }

    #[test]
    fn infinite_thresholds_round_trip_through_json() {
        for threshold in [f64::INFINITY, f64::NEG_INFINITY, 2.5] {
            let fit = ThresholdFit {
                threshold,
                direction: Direction::ConfidentIfScoreAtMost,
                heldout_alignment: 0.75,
                n_heldout: 8,
            };
            let json = serde_json::to_string(&fit).unwrap();
            let back: ThresholdFit = serde_json::from_str(&json).unwrap();
            assert_eq!(back, fit);
        }
    }

    fn pairs_strategy(max_len: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
        proptest::collection::vec(
            ((0..200u32).prop_map(|v| v as f64 / 10.0), any::<bool>()),
            1..=max_len,
        )
    }

    proptest! {
        // The fitted threshold achieves exactly the alignment it reports, and
        // that alignment matches the exhaustive 2N+1-candidate oracle.
        #[test]
        fn fit_matches_brute_force(pairs in pairs_strategy(40), at_most in any::<bool>()) {
            let direction = if at_most { Direction::ConfidentIfScoreAtMost } else { Direction::ConfidentIfScoreAtLeast };
            let fit = fit_threshold(&pairs, direction).unwrap();
            let (matches, _) = alignment_at(&pairs, direction, fit.threshold);
            prop_assert_eq!(matches as f64 / pairs.len() as f64, fit.heldout_alignment);
            prop_assert_eq!(fit.heldout_alignment, brute_force_best_alignment(&pairs, direction));
        }

        // The sentinels guarantee the fit is at least as good as the trivial
        // all-confident / all-unconfident policies.
        #[test]
        fn fit_beats_trivial_policies(pairs in pairs_strategy(40), at_most in any::<bool>()) {
            let direction = if at_most { Direction::ConfidentIfScoreAtMost } else { Direction::ConfidentIfScoreAtLeast };
            let fit = fit_threshold(&pairs, direction).unwrap();
            let n = pairs.len() as f64;
            let correct = pairs.iter().filter(|&&(_, c)| c).count() as f64;
            prop_assert!(fit.heldout_alignment >= correct / n - 1e-12);
            prop_assert!(fit.heldout_alignment >= (n - correct) / n - 1e-12);
        }

        // Relabeling one item moves every candidate's alignment by exactly
        // 1/N, so the best achievable alignment moves by at most 1/N in
        // either direction. (It can move *up* when the flip makes a trivial
        // policy optimal, so only the two-sided bound holds.)
        #[test]
        fn single_relabel_moves_max_alignment_by_at_most_one_item(
            pairs in pairs_strategy(40),
            flip_index in any::<proptest::sample::Index>(),
            at_most in any::<bool>(),
        ) {
            let direction = if at_most { Direction::ConfidentIfScoreAtMost } else { Direction::ConfidentIfScoreAtLeast };
            let before = fit_threshold(&pairs, direction).unwrap().heldout_alignment;
            let mut flipped = pairs.clone();
            let i = flip_index.index(flipped.len());
            flipped[i].1 = !flipped[i].1;
            let after = fit_threshold(&flipped, direction).unwrap().heldout_alignment;
            prop_assert!((after - before).abs() <= 1.0 / pairs.len() as f64 + 1e-12);
        }

        // Classification is monotone in the score for at-least fits and
        // anti-monotone for at-most fits.
        #[test]
        fn apply_threshold_is_monotone(pairs in pairs_strategy(20), s1 in 0.0..20.0f64, s2 in 0.0..20.0f64) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let fit = fit_threshold(&pairs, Direction::ConfidentIfScoreAtLeast).unwrap();
            prop_assert!(!apply_threshold(&fit, lo) || apply_threshold(&fit, hi));
            let fit = fit_threshold(&pairs, Direction::ConfidentIfScoreAtMost).unwrap();
            prop_assert!(!apply_threshold(&fit, hi) || apply_threshold(&fit, lo));
        }
    }
}
